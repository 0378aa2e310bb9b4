//! Set-associative L2 and sliced LLC contents with per-actor way masks.
//!
//! Each core owns an L2; each LLC domain owns one sliced LLC, stored as a
//! flat array indexed by `slice * llc_sets + set`. Actors are the things
//! that issue accesses (guest vCPU threads, host tenants). An actor bound to
//! a core goes through that core's L2; an actor without a core touches its
//! domain's LLC directly.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::LINE_SHIFT;
use crate::geometry::{CacheGeometry, Inclusivity, Level, Replacement};

pub type ActorId = u16;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("actor {0} is not registered")]
    UnknownActor(ActorId),
    #[error("actor {0} has no core and cannot access an L2")]
    NoCore(ActorId),
    #[error("core {0} does not exist")]
    UnknownCore(usize),
    #[error("domain {0} does not exist")]
    UnknownDomain(usize),
    #[error("core {core} belongs to domain {actual}, not {requested}")]
    DomainMismatch {
        core: usize,
        actual: usize,
        requested: usize,
    },
    #[error("way count {ways} out of range 1..={max}")]
    WaysOutOfRange { ways: usize, max: usize },
    #[error("way mask {mask:#x} is empty or exceeds {max} ways")]
    BadMask { mask: u32, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum HitLevel {
    L2,
    Llc,
    Memory,
}

impl HitLevel {
    pub fn depth(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Eviction {
    pub level: Level,
    /// Core for L2 evictions, slice for LLC evictions.
    pub unit: usize,
    pub set: usize,
    pub way: usize,
    pub line: u64,
    pub owner: ActorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub level: HitLevel,
    /// Line displaced by filling the requested line.
    pub evicted: Option<Eviction>,
    /// LLC line displaced while absorbing an L2 victim.
    pub victim_fill_evicted: Option<Eviction>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LevelCounters {
    pub fills: u64,
    pub evictions: u64,
    pub flushes: u64,
}

impl LevelCounters {
    pub fn expected_present(&self) -> u64 {
        self.fills - self.evictions - self.flushes
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheCounters {
    pub l2: LevelCounters,
    pub llc: LevelCounters,
    pub accesses: u64,
    pub writes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActorInfo {
    pub core: Option<usize>,
    pub domain: usize,
    pub l2_mask: u32,
    pub llc_mask: u32,
}

fn full_mask(ways: usize) -> u32 {
    if ways >= 32 {
        u32::MAX
    } else {
        (1u32 << ways) - 1
    }
}

#[derive(Debug, Clone)]
struct SetArray {
    ways: usize,
    tags: Vec<u64>,
    stamps: Vec<u64>,
    owners: Vec<ActorId>,
    dirty: Vec<bool>,
    plru: Vec<u32>,
    tick: u64,
}

impl SetArray {
    fn new(sets: usize, ways: usize) -> Self {
        Self {
            ways,
            tags: vec![0; sets * ways],
            stamps: vec![0; sets * ways],
            owners: vec![0; sets * ways],
            dirty: vec![false; sets * ways],
            plru: vec![0; sets],
            tick: 0,
        }
    }

    #[inline]
    fn find(&self, set: usize, line: u64) -> Option<usize> {
        let base = set * self.ways;
        let tag = line + 1;
        self.tags[base..base + self.ways].iter().position(|&t| t == tag)
    }

    #[inline]
    fn touch(&mut self, set: usize, way: usize, policy: Replacement) {
        let i = set * self.ways + way;
        self.tick += 1;
        self.stamps[i] = self.tick;
        if policy == Replacement::Plru {
            let all = full_mask(self.ways);
            let bits = self.plru[set] | (1 << way);
            self.plru[set] = if bits & all == all { 1 << way } else { bits };
        }
    }

    fn victim(&mut self, set: usize, mask: u32, policy: Replacement, rng: &mut ChaCha8Rng) -> usize {
        let base = set * self.ways;
        let masked = |w: usize| mask & (1 << w) != 0;
        if let Some(w) = (0..self.ways).find(|&w| masked(w) && self.tags[base + w] == 0) {
            return w;
        }
        match policy {
            Replacement::Lru => (0..self.ways)
                .filter(|&w| masked(w))
                .min_by_key(|&w| self.stamps[base + w])
                .expect("non-empty mask"),
            Replacement::Plru => {
                let bits = self.plru[set];
                match (0..self.ways).find(|&w| masked(w) && bits & (1 << w) == 0) {
                    Some(w) => w,
                    None => {
                        self.plru[set] &= !mask;
                        mask.trailing_zeros() as usize
                    }
                }
            }
            Replacement::Random => {
                let n = mask.count_ones();
                let mut k = rng.gen_range(0..n);
                let mut m = mask;
                loop {
                    let w = m.trailing_zeros();
                    if k == 0 {
                        break w as usize;
                    }
                    k -= 1;
                    m &= m - 1;
                }
            }
        }
    }

    #[inline]
    fn invalidate(&mut self, set: usize, way: usize) -> (u64, ActorId) {
        let i = set * self.ways + way;
        let line = self.tags[i] - 1;
        self.tags[i] = 0;
        self.dirty[i] = false;
        if self.plru[set] != 0 {
            self.plru[set] &= !(1 << way);
        }
        (line, self.owners[i])
    }

    fn occupied(&self) -> u64 {
        self.tags.iter().filter(|&&t| t != 0).count() as u64
    }
}

#[derive(Debug, Clone)]
pub struct CacheState {
    geometry: CacheGeometry,
    l2: Vec<SetArray>,
    llc: Vec<SetArray>,
    core_domain: Vec<usize>,
    actors: Vec<ActorInfo>,
    counters: CacheCounters,
    rng: ChaCha8Rng,
    llc_trace: Option<Vec<(ActorId, u64)>>,
}

impl CacheState {
    /// `core_domain[c]` is the LLC domain of core `c`. Domains are numbered
    /// densely from zero; a domain with no cores still gets an LLC.
    pub fn new(geometry: CacheGeometry, core_domain: Vec<usize>, domains: usize, seed: u64) -> Self {
        let domains = domains.max(core_domain.iter().map(|d| d + 1).max().unwrap_or(1));
        let l2 = core_domain
            .iter()
            .map(|_| SetArray::new(geometry.l2_sets, geometry.l2_ways))
            .collect();
        let llc = (0..domains)
            .map(|_| SetArray::new(geometry.llc_sets * geometry.slices, geometry.llc_ways))
            .collect();
        Self {
            geometry,
            l2,
            llc,
            core_domain,
            actors: Vec::new(),
            counters: CacheCounters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cace),
            llc_trace: None,
        }
    }

    /// One core, one domain.
    pub fn single(geometry: CacheGeometry, seed: u64) -> Self {
        Self::new(geometry, vec![0], 1, seed)
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn cores(&self) -> usize {
        self.l2.len()
    }

    pub fn domains(&self) -> usize {
        self.llc.len()
    }

    pub fn domain_of_core(&self, core: usize) -> Option<usize> {
        self.core_domain.get(core).copied()
    }

    pub fn register_actor(&mut self, core: Option<usize>, domain: usize) -> Result<ActorId, CacheError> {
        if domain >= self.llc.len() {
            return Err(CacheError::UnknownDomain(domain));
        }
        if let Some(c) = core {
            let actual = *self.core_domain.get(c).ok_or(CacheError::UnknownCore(c))?;
            if actual != domain {
                return Err(CacheError::DomainMismatch {
                    core: c,
                    actual,
                    requested: domain,
                });
            }
        }
        self.actors.push(ActorInfo {
            core,
            domain,
            l2_mask: full_mask(self.geometry.l2_ways),
            llc_mask: full_mask(self.geometry.llc_ways),
        });
        Ok((self.actors.len() - 1) as ActorId)
    }

    pub fn actor(&self, actor: ActorId) -> Result<ActorInfo, CacheError> {
        self.actors
            .get(actor as usize)
            .copied()
            .ok_or(CacheError::UnknownActor(actor))
    }

    /// Restrict `actor` to the lowest `ways` ways at `level`.
    pub fn set_way_mask(&mut self, actor: ActorId, level: Level, ways: usize) -> Result<(), CacheError> {
        let max = self.geometry.ways(level);
        if ways == 0 || ways > max {
            return Err(CacheError::WaysOutOfRange { ways, max });
        }
        self.set_way_mask_bits(actor, level, full_mask(ways))
    }

    pub fn set_way_mask_bits(&mut self, actor: ActorId, level: Level, mask: u32) -> Result<(), CacheError> {
        let max = self.geometry.ways(level);
        if mask == 0 || mask & !full_mask(max) != 0 {
            return Err(CacheError::BadMask { mask, max });
        }
        let info = self
            .actors
            .get_mut(actor as usize)
            .ok_or(CacheError::UnknownActor(actor))?;
        match level {
            Level::L2 => info.l2_mask = mask,
            Level::Llc => info.llc_mask = mask,
        }
        Ok(())
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn enable_llc_trace(&mut self) {
        self.llc_trace = Some(Vec::new());
    }

    /// LLC fills recorded since tracing was enabled, as `(actor, hpa)`.
    pub fn take_llc_trace(&mut self) -> Vec<(ActorId, u64)> {
        self.llc_trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    #[inline]
    fn llc_index(&self, hpa: u64) -> (usize, usize, usize) {
        let slice = self.geometry.slice_of(hpa);
        let set = self.geometry.set_index(Level::Llc, hpa);
        (slice, set, slice * self.geometry.llc_sets + set)
    }

    /// Regular load or store through the actor's core. Actors without a
    /// core access their domain's LLC directly.
    pub fn access(&mut self, hpa: u64, actor: ActorId, is_write: bool) -> Result<AccessResult, CacheError> {
        let info = self.actor(actor)?;
        self.counters.accesses += 1;
        if is_write {
            self.counters.writes += 1;
        }
        let Some(core) = info.core else {
            return Ok(self.llc_access(hpa, actor, info, is_write));
        };
        let policy = self.geometry.replacement;
        let line = hpa >> LINE_SHIFT;
        let l2_set = self.geometry.set_index(Level::L2, hpa);
        if let Some(way) = self.l2[core].find(l2_set, line) {
            self.l2[core].touch(l2_set, way, policy);
            if is_write {
                self.l2[core].dirty[l2_set * self.geometry.l2_ways + way] = true;
            }
            return Ok(AccessResult {
                level: HitLevel::L2,
                evicted: None,
                victim_fill_evicted: None,
            });
        }
        let domain = info.domain;
        let (_, _, llc_idx) = self.llc_index(hpa);
        let llc_hit = self.llc[domain].find(llc_idx, line);
        let level = if let Some(way) = llc_hit {
            self.llc[domain].touch(llc_idx, way, policy);
            HitLevel::Llc
        } else {
            HitLevel::Memory
        };
        let mut evicted = None;
        if level == HitLevel::Memory && self.geometry.inclusivity == Inclusivity::Inclusive {
            evicted = self.llc_fill(domain, hpa, actor, info.llc_mask);
        }
        let l2_victim = self.l2_fill(core, hpa, actor, info.l2_mask, is_write);
        let mut victim_fill_evicted = None;
        if let Some(v) = l2_victim {
            match self.geometry.inclusivity {
                Inclusivity::NonInclusive => {
                    let victim_hpa = v.line << LINE_SHIFT;
                    let (_, _, vidx) = self.llc_index(victim_hpa);
                    if let Some(way) = self.llc[domain].find(vidx, v.line) {
                        self.llc[domain].touch(vidx, way, policy);
                    } else {
                        victim_fill_evicted = self.llc_fill(domain, victim_hpa, v.owner, info.llc_mask);
                    }
                }
                Inclusivity::Inclusive => {}
            }
            if evicted.is_none() {
                evicted = Some(v);
            }
        }
        Ok(AccessResult {
            level,
            evicted,
            victim_fill_evicted,
        })
    }

    /// Access that bypasses the private levels and lands in the LLC of the
    /// actor's domain (host tenants, cross-core shared pulls).
    pub fn access_llc(&mut self, hpa: u64, actor: ActorId) -> Result<AccessResult, CacheError> {
        let info = self.actor(actor)?;
        self.counters.accesses += 1;
        Ok(self.llc_access(hpa, actor, info, false))
    }

    fn llc_access(&mut self, hpa: u64, actor: ActorId, info: ActorInfo, is_write: bool) -> AccessResult {
        let line = hpa >> LINE_SHIFT;
        let (_, _, idx) = self.llc_index(hpa);
        let domain = info.domain;
        if let Some(way) = self.llc[domain].find(idx, line) {
            self.llc[domain].touch(idx, way, self.geometry.replacement);
            if is_write {
                self.llc[domain].dirty[idx * self.geometry.llc_ways + way] = true;
            }
            return AccessResult {
                level: HitLevel::Llc,
                evicted: None,
                victim_fill_evicted: None,
            };
        }
        let evicted = self.llc_fill(domain, hpa, actor, info.llc_mask);
        AccessResult {
            level: HitLevel::Memory,
            evicted,
            victim_fill_evicted: None,
        }
    }

    fn purge_out_of_mask(arr: &mut SetArray, set: usize, actor: ActorId, mask: u32, count: &mut u64) {
        let base = set * arr.ways;
        for w in 0..arr.ways {
            if mask & (1 << w) == 0 && arr.tags[base + w] != 0 && arr.owners[base + w] == actor {
                arr.invalidate(set, w);
                *count += 1;
            }
        }
    }

    fn l2_fill(&mut self, core: usize, hpa: u64, actor: ActorId, mask: u32, dirty: bool) -> Option<Eviction> {
        let policy = self.geometry.replacement;
        let set = self.geometry.set_index(Level::L2, hpa);
        let arr = &mut self.l2[core];
        if mask != full_mask(arr.ways) {
            Self::purge_out_of_mask(arr, set, actor, mask, &mut self.counters.l2.evictions);
        }
        let way = arr.victim(set, mask, policy, &mut self.rng);
        let i = set * arr.ways + way;
        let evicted = (arr.tags[i] != 0).then(|| {
            let (line, owner) = arr.invalidate(set, way);
            Eviction {
                level: Level::L2,
                unit: core,
                set,
                way,
                line,
                owner,
            }
        });
        arr.tags[i] = (hpa >> LINE_SHIFT) + 1;
        arr.owners[i] = actor;
        arr.dirty[i] = dirty;
        arr.touch(set, way, policy);
        self.counters.l2.fills += 1;
        if evicted.is_some() {
            self.counters.l2.evictions += 1;
        }
        evicted
    }

    fn llc_fill(&mut self, domain: usize, hpa: u64, actor: ActorId, mask: u32) -> Option<Eviction> {
        let policy = self.geometry.replacement;
        let (slice, set, idx) = self.llc_index(hpa);
        let arr = &mut self.llc[domain];
        if mask != full_mask(arr.ways) {
            Self::purge_out_of_mask(arr, idx, actor, mask, &mut self.counters.llc.evictions);
        }
        let way = arr.victim(idx, mask, policy, &mut self.rng);
        let i = idx * arr.ways + way;
        let evicted = (arr.tags[i] != 0).then(|| {
            let (line, owner) = arr.invalidate(idx, way);
            Eviction {
                level: Level::Llc,
                unit: slice,
                set,
                way,
                line,
                owner,
            }
        });
        arr.tags[i] = (hpa >> LINE_SHIFT) + 1;
        arr.owners[i] = actor;
        arr.touch(idx, way, policy);
        self.counters.llc.fills += 1;
        if let Some(trace) = self.llc_trace.as_mut() {
            trace.push((actor, hpa & !((1 << LINE_SHIFT) - 1)));
        }
        if let Some(ev) = evicted {
            self.counters.llc.evictions += 1;
            if self.geometry.inclusivity == Inclusivity::Inclusive {
                self.back_invalidate(domain, ev.line);
            }
        }
        evicted
    }

    fn back_invalidate(&mut self, domain: usize, line: u64) {
        let set = self.geometry.set_index(Level::L2, line << LINE_SHIFT);
        for core in 0..self.l2.len() {
            if self.core_domain[core] != domain {
                continue;
            }
            if let Some(way) = self.l2[core].find(set, line) {
                self.l2[core].invalidate(set, way);
                self.counters.l2.evictions += 1;
            }
        }
    }

    /// Remove the line from every L2 and every LLC domain.
    pub fn flush_line(&mut self, hpa: u64) {
        let line = hpa >> LINE_SHIFT;
        let l2_set = self.geometry.set_index(Level::L2, hpa);
        for arr in &mut self.l2 {
            if let Some(way) = arr.find(l2_set, line) {
                arr.invalidate(l2_set, way);
                self.counters.l2.flushes += 1;
            }
        }
        let (_, _, idx) = self.llc_index(hpa);
        for arr in &mut self.llc {
            if let Some(way) = arr.find(idx, line) {
                arr.invalidate(idx, way);
                self.counters.llc.flushes += 1;
            }
        }
    }

    pub fn in_l2(&self, core: usize, hpa: u64) -> bool {
        let set = self.geometry.set_index(Level::L2, hpa);
        self.l2[core].find(set, hpa >> LINE_SHIFT).is_some()
    }

    pub fn in_llc(&self, domain: usize, hpa: u64) -> bool {
        let (_, _, idx) = self.llc_index(hpa);
        self.llc[domain].find(idx, hpa >> LINE_SHIFT).is_some()
    }

    /// Occupied ways of one LLC set owned by `actor`.
    pub fn llc_occupancy(&self, domain: usize, slice: usize, set: usize, actor: ActorId) -> usize {
        let arr = &self.llc[domain];
        let base = (slice * self.geometry.llc_sets + set) * arr.ways;
        (0..arr.ways)
            .filter(|&w| arr.tags[base + w] != 0 && arr.owners[base + w] == actor)
            .count()
    }

    pub fn lines_present(&self, level: Level) -> u64 {
        match level {
            Level::L2 => self.l2.iter().map(SetArray::occupied).sum(),
            Level::Llc => self.llc.iter().map(SetArray::occupied).sum(),
        }
    }

    pub fn dirty_lines(&self) -> usize {
        self.l2
            .iter()
            .chain(self.llc.iter())
            .map(|a| a.dirty.iter().filter(|&&d| d).count())
            .sum()
    }

    /// No line appears twice within any set.
    pub fn check_uniqueness(&self) -> bool {
        self.l2.iter().chain(self.llc.iter()).all(|arr| {
            arr.tags.chunks(arr.ways).all(|set| {
                let mut valid: Vec<u64> = set.iter().copied().filter(|&t| t != 0).collect();
                let n = valid.len();
                valid.sort_unstable();
                valid.dedup();
                valid.len() == n
            })
        })
    }

    /// Fill/eviction/flush counters agree with a scan of the arrays.
    pub fn check_conservation(&self) -> bool {
        self.counters.l2.expected_present() == self.lines_present(Level::L2)
            && self.counters.llc.expected_present() == self.lines_present(Level::Llc)
    }

    /// `level,slice,set,way,tag,owner`. The slice column is the core for L2
    /// rows and `domain * slices + slice` for LLC rows.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("level,slice,set,way,tag,owner\n");
        let l2_bits = self.geometry.index_bits(Level::L2);
        let llc_bits = self.geometry.index_bits(Level::Llc);
        for (core, arr) in self.l2.iter().enumerate() {
            for (i, &t) in arr.tags.iter().enumerate() {
                if t != 0 {
                    let _ = writeln!(
                        out,
                        "L2,{core},{},{},{:#x},{}",
                        i / arr.ways,
                        i % arr.ways,
                        (t - 1) >> l2_bits,
                        arr.owners[i]
                    );
                }
            }
        }
        let sets = self.geometry.llc_sets;
        for (domain, arr) in self.llc.iter().enumerate() {
            for (i, &t) in arr.tags.iter().enumerate() {
                if t != 0 {
                    let idx = i / arr.ways;
                    let _ = writeln!(
                        out,
                        "LLC,{},{},{},{:#x},{}",
                        domain * self.geometry.slices + idx / sets,
                        idx % sets,
                        i % arr.ways,
                        (t - 1) >> llc_bits,
                        arr.owners[i]
                    );
                }
            }
        }
        out
    }
}
