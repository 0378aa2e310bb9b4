//! Eviction-set construction: pool sizing, batched eviction testing,
//! binary-search pruning, the L2 prefilter for LLC targets, and the
//! row-partitioned parallel construction of representative LLC sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{with_page_offset, LINE_SIZE, PAGE_OFFSET_MASK, PAGE_SHIFT};
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};
use crate::machine::Machine;
use crate::timing::LatencyClass;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EvsetError {
    #[error("candidate pool does not evict the target")]
    PoolDoesNotEvict,
    #[error("pruning failed after {0} attempts")]
    PruneFailed(usize),
    #[error("page offset {0:#x} is not a line-aligned in-page offset")]
    Unaligned(u64),
    #[error("no eviction sets were built")]
    NoSets,
    #[error("f must be in 1..={max}, got {f}")]
    FOutOfRange { f: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verify {
    None,
    /// Drop one random member and expect the test to fail.
    Spot,
    /// Try dropping each member in turn, keeping only needed ones.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvsetConfig {
    /// Candidate batch repetitions per eviction test.
    pub rounds: usize,
    /// Independent repetitions per test, majority vote.
    pub trials: usize,
    /// Prune attempts per target before giving up.
    pub retries: usize,
    /// Pool scaling factor C.
    pub scale: usize,
    pub verify: Verify,
    /// Abort a prune whose result grows past this many members.
    pub max_members: usize,
    /// Require every trial to agree before calling a target evicted.
    pub unanimous: bool,
    /// Flush the target and candidates before each trial.
    pub flush: bool,
}

impl Default for EvsetConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            trials: 1,
            retries: 3,
            scale: 3,
            verify: Verify::Spot,
            max_members: 40,
            unanimous: false,
            flush: false,
        }
    }
}

impl EvsetConfig {
    /// Settings that stay reliable when replacement is not LRU.
    pub fn robust() -> Self {
        Self {
            rounds: 6,
            trials: 3,
            ..Self::default()
        }
    }
}

/// Who builds, and with which knobs.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: EvsetConfig,
    pub vcpu: usize,
    pub helper: Option<usize>,
    pub rng: ChaCha8Rng,
    /// Eviction tests issued so far.
    pub tests: u64,
}

impl Ctx {
    pub fn new(m: &Machine, vcpu: usize, cfg: EvsetConfig, seed: u64) -> Self {
        Self {
            cfg,
            vcpu,
            helper: m.helper_for(vcpu),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tests: 0,
        }
    }

    fn fork(&self, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            tests: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub level: Level,
    pub offset: u64,
    pub members: Vec<u64>,
}

impl CandidatePool {
    /// Candidates at `offset` within each of `pages` (GVA page numbers).
    pub fn from_pages(level: Level, offset: u64, pages: &[u64]) -> Result<Self> {
        check_offset(offset)?;
        Ok(Self {
            level,
            offset,
            members: pages.iter().map(|&p| (p << PAGE_SHIFT) | offset).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub level: Level,
    pub offset: u64,
    pub members: Vec<u64>,
    pub minimal: bool,
    /// The held-out target the set was pruned against.
    pub target: Option<u64>,
    /// Virtual color (L2 filter) the set was built under, when known.
    pub color: Option<u32>,
    pub domain: usize,
}

impl EvictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The same set moved to another in-page offset.
    pub fn shifted(&self, offset: u64) -> Result<Self> {
        check_offset(offset)?;
        Ok(Self {
            offset,
            members: self.members.iter().map(|&g| with_page_offset(g, offset)).collect(),
            target: self.target.map(|t| with_page_offset(t, offset)),
            ..self.clone()
        })
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{:#x},{}",
            self.level,
            self.offset,
            self.color.map_or(String::new(), |c| c.to_string())
        );
        for m in &self.members {
            let _ = write!(s, ",{m:#x}");
        }
        s
    }
}

pub fn evsets_csv(sets: &[EvictionSet]) -> String {
    let mut out = String::from("level,offset,color,member_gva...\n");
    for s in sets {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

pub fn check_offset(offset: u64) -> Result<(), EvsetError> {
    if offset & (LINE_SIZE - 1) != 0 || offset > PAGE_OFFSET_MASK {
        return Err(EvsetError::Unaligned(offset));
    }
    Ok(())
}

/// P_s: ways times the number of sets a fixed page offset can reach, times C.
pub fn pool_size(geometry: &CacheGeometry, level: Level, c: usize) -> usize {
    let ways = geometry.ways(level);
    let reach = 1usize << geometry.uncontrollable_bits(level);
    let slices = match level {
        Level::L2 => 1,
        Level::Llc => geometry.slices,
    };
    ways * reach * slices * c
}

/// Distinct sets one page offset can reach at `level`.
pub fn sets_per_offset(geometry: &CacheGeometry, level: Level) -> usize {
    pool_size(geometry, level, 1) / geometry.ways(level)
}

/// Expected row coverage when f distinct sets are drawn from a partition of
/// two rows of `n` slices each: 1 - C(n,f)/C(2n,f).
pub fn coverage_theoretical(n_slices: usize, f: usize) -> Result<f64, EvsetError> {
    if f == 0 || f > 2 * n_slices {
        return Err(EvsetError::FOutOfRange {
            f,
            max: 2 * n_slices,
        });
    }
    // C(n,f)/C(2n,f) = prod_{i<f} (n-i)/(2n-i)
    let n = n_slices as f64;
    let ratio = (0..f).map(|i| (n - i as f64).max(0.0) / (2.0 * n - i as f64)).product::<f64>();
    Ok(1.0 - ratio)
}

fn deeper(before: LatencyClass, after: LatencyClass) -> bool {
    after > before
}

fn touch(m: &mut Machine, ctx: &Ctx, level: Level, gva: u64) -> Result<()> {
    match level {
        Level::L2 => m.load(ctx.vcpu, gva).map(|_| ()),
        Level::Llc => m.pull(ctx.vcpu, ctx.helper, gva).map(|_| ()),
    }
}

fn timed(m: &mut Machine, ctx: &Ctx, level: Level, gva: u64) -> Result<Option<LatencyClass>> {
    match level {
        Level::L2 => m.timed_load(ctx.vcpu, gva),
        Level::Llc => m.timed_pull(ctx.vcpu, ctx.helper, gva),
    }
}

fn batch(m: &mut Machine, ctx: &Ctx, level: Level, gvas: &[u64]) -> Result<()> {
    match level {
        Level::L2 => m.batch_load(ctx.vcpu, gvas),
        Level::Llc => m.batch_pull(ctx.vcpu, ctx.helper, gvas).map(|_| ()),
    }
}

/// One trial; `None` if a reading was an outlier.
fn trial(m: &mut Machine, ctx: &Ctx, level: Level, candidates: &[&[u64]], target: u64) -> Result<Option<bool>> {
    if ctx.cfg.flush {
        m.flush(target)?;
        for g in candidates.iter().flat_map(|p| p.iter()) {
            m.flush(*g)?;
        }
    }
    m.warm_timer(ctx.vcpu);
    touch(m, ctx, level, target)?;
    let Some(before) = timed(m, ctx, level, target)? else {
        return Ok(None);
    };
    for _ in 0..ctx.cfg.rounds.max(1) {
        for part in candidates {
            batch(m, ctx, level, part)?;
        }
    }
    let Some(after) = timed(m, ctx, level, target)? else {
        return Ok(None);
    };
    Ok(Some(deeper(before, after)))
}

fn test_parts(m: &mut Machine, ctx: &mut Ctx, level: Level, candidates: &[&[u64]], target: u64) -> Result<bool> {
    ctx.tests += 1;
    let trials = ctx.cfg.trials.max(1);
    let need = if ctx.cfg.unanimous { trials } else { trials / 2 + 1 };
    let mut yes = 0;
    let mut done = 0;
    let mut attempts = 0;
    while done < trials && attempts < trials * 4 {
        attempts += 1;
        if let Some(v) = trial(m, ctx, level, candidates, target)? {
            done += 1;
            if v {
                yes += 1;
            }
            if yes >= need || (done - yes) > trials - need {
                break;
            }
        }
    }
    Ok(yes >= need)
}

/// Access the target, time it, stream the candidates through in batches for
/// `rounds` rounds, time the target again; evicted iff it moved deeper.
pub fn test_eviction(m: &mut Machine, ctx: &mut Ctx, level: Level, candidates: &[u64], target: u64) -> Result<bool> {
    test_parts(m, ctx, level, &[candidates], target)
}

/// Spot mode drops one random member and expects the test to fail.
/// Exhaustive mode tries every member and discards those the set does not
/// need, leaving a minimal set.
fn verify_minimal(m: &mut Machine, ctx: &mut Ctx, level: Level, members: &mut Vec<u64>, target: u64) -> Result<bool> {
    match ctx.cfg.verify {
        Verify::None => Ok(true),
        Verify::Spot => {
            let i = crate::util::index(&mut ctx.rng, members.len());
            let mut rest = members.clone();
            rest.remove(i);
            Ok(!test_eviction(m, ctx, level, &rest, target)?)
        }
        Verify::Exhaustive => {
            let mut i = members.len();
            while i > 0 && members.len() > 1 {
                i -= 1;
                let mut rest = members.clone();
                rest.remove(i);
                if test_eviction(m, ctx, level, &rest, target)? {
                    *members = rest;
                }
            }
            Ok(true)
        }
    }
}

/// Shrink `pool` to a minimal set evicting `target`: repeatedly find the
/// shortest candidate prefix that, together with the members found so far,
/// still evicts, and keep its last element.
pub fn prune_binary_search(m: &mut Machine, ctx: &mut Ctx, pool: &CandidatePool, target: u64) -> Result<EvictionSet> {
    let level = pool.level;
    let mut attempts = 0;
    let mut cands = pool.members.clone();
    cands.retain(|&g| g != target);
    while attempts < ctx.cfg.retries.max(1) {
        attempts += 1;
        if attempts > 1 {
            cands.shuffle(&mut ctx.rng);
        }
        if !test_eviction(m, ctx, level, &cands, target)? {
            if attempts == 1 {
                return Err(EvsetError::PoolDoesNotEvict.into());
            }
            continue;
        }
        if let Some(mut members) = prune_once(m, ctx, level, &cands, target)? {
            let minimal = verify_minimal(m, ctx, level, &mut members, target)?;
            return Ok(EvictionSet {
                level,
                offset: pool.offset,
                members,
                minimal,
                target: Some(target),
                color: None,
                domain: m.topology().domain_of(ctx.vcpu),
            });
        }
    }
    Err(EvsetError::PruneFailed(attempts).into())
}

fn prune_once(m: &mut Machine, ctx: &mut Ctx, level: Level, pool: &[u64], target: u64) -> Result<Option<Vec<u64>>> {
    let mut cands: Vec<u64> = pool.to_vec();
    let mut found: Vec<u64> = Vec::new();
    loop {
        if !found.is_empty() && test_eviction(m, ctx, level, &found, target)? {
            return Ok(Some(found));
        }
        if cands.is_empty() || found.len() >= ctx.cfg.max_members {
            return Ok(None);
        }
        // found ∪ cands evicts (checked up front, then kept by construction).
        let (mut lo, mut hi) = (1usize, cands.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if test_parts(m, ctx, level, &[&found, &cands[..mid]], target)? {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        found.push(cands[lo - 1]);
        cands.truncate(lo - 1);
    }
}

/// Keep only candidates that `l2_set` (shifted to the pool's offset) evicts
/// from the L2: they share the target's L2 index bits.
pub fn l2_prefilter(m: &mut Machine, ctx: &mut Ctx, pool: &CandidatePool, l2_set: &EvictionSet) -> Result<CandidatePool> {
    let filter = l2_set.shifted(pool.offset)?;
    let mut kept = Vec::new();
    for &c in &pool.members {
        if filter.members.contains(&c) {
            continue;
        }
        if test_eviction(m, ctx, Level::L2, &filter.members, c)? {
            kept.push(c);
        }
    }
    Ok(CandidatePool {
        level: pool.level,
        offset: pool.offset,
        members: kept,
    })
}

/// One minimal set for `target`. For the LLC, an L2 set for the target is
/// pruned first and used to prefilter the candidate pages.
pub fn build_for_target(m: &mut Machine, ctx: &mut Ctx, level: Level, target: u64, pages: &[u64]) -> Result<EvictionSet> {
    let offset = target & PAGE_OFFSET_MASK;
    let tpage = target >> PAGE_SHIFT;
    let pages: Vec<u64> = pages.iter().copied().filter(|&p| p != tpage).collect();
    let l2_n = pool_size(m.geometry(), Level::L2, ctx.cfg.scale).min(pages.len());
    let l2_pool = CandidatePool::from_pages(Level::L2, offset, &pages[..l2_n])?;
    let l2 = prune_binary_search(m, ctx, &l2_pool, target)?;
    if level == Level::L2 {
        return Ok(l2);
    }
    let pool = CandidatePool::from_pages(Level::Llc, offset, &pages)?;
    let mut filtered = l2_prefilter(m, ctx, &pool, &l2)?;
    filtered.members.extend(l2.members.iter().copied());
    prune_binary_search(m, ctx, &filtered, target)
}

/// Index of the first set in `sets` that evicts `target` at its level.
pub fn find_evicting_set(m: &mut Machine, ctx: &mut Ctx, sets: &[EvictionSet], target: u64) -> Result<Option<usize>> {
    for (i, s) in sets.iter().enumerate() {
        if test_eviction(m, ctx, s.level, &s.members, target)? {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub sets: Vec<EvictionSet>,
    pub expected: usize,
    /// Targets absorbed by an already-built set.
    pub assigned: usize,
    /// Targets the remaining pool could not evict.
    pub discarded: usize,
    pub prune_failures: usize,
    pub pool_exhausted: bool,
}

/// Build sets from one pool until `expected` are found or the pool runs dry.
/// Targets come out of the pool without replacement; found members leave it.
pub fn build_from_pool(m: &mut Machine, ctx: &mut Ctx, pool: &CandidatePool, expected: usize) -> Result<BuildReport> {
    let level = pool.level;
    let mut remaining = pool.members.clone();
    remaining.shuffle(&mut ctx.rng);
    let mut report = BuildReport {
        sets: Vec::new(),
        expected,
        assigned: 0,
        discarded: 0,
        prune_failures: 0,
        pool_exhausted: false,
    };
    while report.sets.len() < expected {
        let Some(target) = remaining.pop() else {
            report.pool_exhausted = true;
            break;
        };
        if find_evicting_set(m, ctx, &report.sets, target)?.is_some() {
            report.assigned += 1;
            continue;
        }
        let sub = CandidatePool {
            level,
            offset: pool.offset,
            members: std::mem::take(&mut remaining),
        };
        match prune_binary_search(m, ctx, &sub, target) {
            Ok(set) => {
                let taken: BTreeSet<u64> = set.members.iter().copied().collect();
                remaining = sub.members;
                remaining.retain(|g| !taken.contains(g));
                report.sets.push(set);
            }
            Err(Error::Evset(EvsetError::PoolDoesNotEvict)) => {
                remaining = sub.members;
                report.discarded += 1;
            }
            Err(Error::Evset(EvsetError::PruneFailed(_))) => {
                remaining = sub.members;
                report.prune_failures += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// All minimal sets reachable at `offset`. For the LLC, the pool is first
/// split by L2 set using `l2_sets` (built here when not supplied).
pub fn build_all_at_offset(
    m: &mut Machine,
    ctx: &mut Ctx,
    level: Level,
    offset: u64,
    pages: &[u64],
    l2_sets: Option<&[EvictionSet]>,
) -> Result<BuildReport> {
    check_offset(offset)?;
    let geometry = m.geometry().clone();
    let pool = CandidatePool::from_pages(level, offset, pages)?;
    match level {
        Level::L2 => build_from_pool(m, ctx, &pool, sets_per_offset(&geometry, Level::L2)),
        Level::Llc => {
            let owned;
            let l2 = match l2_sets {
                Some(s) => s
                    .iter()
                    .map(|e| e.shifted(offset))
                    .collect::<Result<Vec<_>>>()?,
                None => {
                    let l2_pages = &pages[..pages.len().min(pool_size(&geometry, Level::L2, ctx.cfg.scale))];
                    owned = build_all_at_offset(m, ctx, Level::L2, offset, l2_pages, None)?;
                    owned.sets.clone()
                }
            };
            let groups = group_by_l2_set(m, ctx, &pool, &l2)?;
            let per_group = sets_per_offset(&geometry, Level::Llc) / sets_per_offset(&geometry, Level::L2);
            let mut total = BuildReport {
                sets: Vec::new(),
                expected: per_group * groups.len(),
                assigned: 0,
                discarded: 0,
                prune_failures: 0,
                pool_exhausted: false,
            };
            for (color, group) in groups {
                let r = build_from_pool(m, ctx, &group, per_group)?;
                total.assigned += r.assigned;
                total.discarded += r.discarded;
                total.prune_failures += r.prune_failures;
                total.pool_exhausted |= r.pool_exhausted;
                total.sets.extend(r.sets.into_iter().map(|mut s| {
                    s.color = Some(color as u32);
                    s
                }));
            }
            Ok(total)
        }
    }
}

/// Split an LLC pool by which L2 set evicts each candidate.
fn group_by_l2_set(
    m: &mut Machine,
    ctx: &mut Ctx,
    pool: &CandidatePool,
    l2: &[EvictionSet],
) -> Result<BTreeMap<usize, CandidatePool>> {
    let mut groups: BTreeMap<usize, CandidatePool> = BTreeMap::new();
    let members: BTreeSet<u64> = l2.iter().flat_map(|s| s.members.iter().copied()).collect();
    for &c in &pool.members {
        if members.contains(&c) {
            continue;
        }
        if let Some(i) = find_evicting_set(m, ctx, l2, c)? {
            groups
                .entry(i)
                .or_insert_with(|| CandidatePool {
                    level: pool.level,
                    offset: pool.offset,
                    members: Vec::new(),
                })
                .members
                .push(c);
        }
    }
    Ok(groups)
}

/// Pages of one virtual color, as produced by color filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorGroup {
    pub color: u32,
    pub pages: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskStat {
    pub color: u32,
    pub offset: u64,
    pub worker: usize,
    pub built: usize,
    pub duration_ns: u64,
    pub tests: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParallelReport {
    pub sets: Vec<EvictionSet>,
    pub tasks: Vec<TaskStat>,
    pub workers: usize,
    /// Longest per-worker busy time.
    pub duration_ns: u64,
    /// Sum of all task times (the one-worker duration).
    pub serial_ns: u64,
    /// Tasks that finished with fewer than f sets.
    pub starved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coverage {
    pub covered_rows: usize,
    pub total_rows: usize,
    pub duplicate_sets: usize,
    pub total_sets: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.covered_rows as f64 / self.total_rows as f64
        }
    }

    pub fn duplication(&self) -> f64 {
        if self.total_sets == 0 {
            0.0
        } else {
            self.duplicate_sets as f64 / self.total_sets as f64
        }
    }
}

fn task_seed(seed: u64, color: u32, offset: u64) -> u64 {
    seed ^ ((color as u64 + 1) << 40) ^ ((offset + 1) << 8) ^ 0x7a5c
}

/// Build `f` LLC sets in every (color group, offset) partition. Partitions
/// touch disjoint LLC rows, so tasks are independent: each runs as its own
/// logical worker with an RNG derived from (seed, color, offset), and the
/// reported duration is the busiest worker's share under round-robin
/// assignment.
pub fn build_parallel(
    m: &mut Machine,
    base: &Ctx,
    f: usize,
    groups: &[ColorGroup],
    offsets: &[u64],
    workers: usize,
    seed: u64,
) -> Result<ParallelReport> {
    let workers = workers.max(1);
    let mut busy = vec![0u64; workers];
    let mut report = ParallelReport {
        sets: Vec::new(),
        tasks: Vec::new(),
        workers,
        duration_ns: 0,
        serial_ns: 0,
        starved: 0,
    };
    let mut k = 0usize;
    for &offset in offsets {
        check_offset(offset)?;
        for g in groups {
            let worker = k % workers;
            k += 1;
            let mut ctx = base.fork(task_seed(seed, g.color, offset));
            let pool = CandidatePool::from_pages(Level::Llc, offset, &g.pages)?;
            let (r, dt) = m.detached(|m| build_from_pool(m, &mut ctx, &pool, f))?;
            busy[worker] += dt;
            report.serial_ns += dt;
            if r.sets.len() < f {
                report.starved += 1;
            }
            report.tasks.push(TaskStat {
                color: g.color,
                offset,
                worker,
                built: r.sets.len(),
                duration_ns: dt,
                tests: ctx.tests,
            });
            report.sets.extend(r.sets.into_iter().map(|mut s| {
                s.color = Some(g.color);
                s
            }));
        }
    }
    report.duration_ns = busy.into_iter().max().unwrap_or(0);
    Ok(report)
}

/// Row coverage and duplication of LLC sets, judged by the oracle. Rows are
/// counted per (domain, partition) where a partition is (color, offset),
/// with `rows_per_partition` rows each.
pub fn oracle_coverage(m: &Machine, sets: &[EvictionSet], partitions: usize) -> Result<Coverage> {
    let rows_per = m.geometry().rows_per_partition();
    let mut rows: BTreeSet<(usize, u64, usize)> = BTreeSet::new();
    let mut seen: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut dups = 0;
    for s in sets {
        let Some(&first) = s.members.first() else {
            continue;
        };
        let (slice, set) = m.oracle_llc_set(first)?;
        if !seen.insert((s.domain, slice, set)) {
            dups += 1;
        }
        rows.insert((s.domain, s.offset, set));
    }
    Ok(Coverage {
        covered_rows: rows.len(),
        total_rows: partitions * rows_per,
        duplicate_sets: dups,
        total_sets: sets.len(),
    })
}

/// Duplicates without the oracle: within each (color, offset) partition, a
/// set whose first member is evicted by an earlier set is a duplicate.
pub fn mutual_eviction_duplicates(m: &mut Machine, ctx: &mut Ctx, sets: &[EvictionSet]) -> Result<usize> {
    let mut dups = 0;
    let mut by_part: BTreeMap<(Option<u32>, u64), Vec<&EvictionSet>> = BTreeMap::new();
    for s in sets {
        by_part.entry((s.color, s.offset)).or_default().push(s);
    }
    for part in by_part.values() {
        for (i, s) in part.iter().enumerate() {
            for earlier in &part[..i] {
                if test_eviction(m, ctx, s.level, &earlier.members, s.members[0])? {
                    dups += 1;
                    break;
                }
            }
        }
    }
    Ok(dups)
}

/// True when all members share the oracle's (slice, set) at `level`.
pub fn oracle_congruent(m: &Machine, set: &EvictionSet) -> Result<bool> {
    let keys: BTreeSet<(usize, usize)> = set
        .members
        .iter()
        .map(|&g| match set.level {
            Level::L2 => m.oracle_l2_set(g).map(|s| (0, s)),
            Level::Llc => m.oracle_llc_set(g),
        })
        .collect::<Result<_>>()?;
    Ok(keys.len() == 1)
}
