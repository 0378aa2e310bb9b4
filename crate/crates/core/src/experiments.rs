//! End-to-end experiments over the simulator. Each returns a serializable
//! outcome plus the CSV artifacts it produced.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{LINE_SIZE, PAGE_SHIFT};
use crate::cap::{self, CapConfig, PageCache, RecolorTracker, ReuseActor, ScanActor};
use crate::cas::{CasConfig, SchedConfig, SchedPolicy, SchedReport, SchedSim};
use crate::error::Result;
use crate::evset::{self, build_for_target, build_parallel, pool_size, ColorGroup, Ctx, EvictionSet, EvsetConfig};
use crate::geometry::{CacheGeometry, Level, Replacement};
use crate::machine::{Machine, MachineConfig};
use crate::mem::{FragmentationProfile, RemapEvent, TranslationConfig};
use crate::tenant::{ms, TenantWorkload};
use crate::vcol::{self, Classifier, ColoredFreeLists};
use crate::vscan::{self, ContentionMonitor, CycleReport, MonitorConfig};

pub type Artifacts = BTreeMap<String, String>;

fn shuffled() -> FragmentationProfile {
    FragmentationProfile::Fragmented { shuffle: 1.0 }
}

fn machine(geometry: CacheGeometry, pages: usize, seed: u64) -> Result<Machine> {
    Machine::new(MachineConfig::new(
        geometry,
        TranslationConfig::new(shuffled(), pages),
        seed,
    ))
}

fn mix(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ (k << 17)
}

// Coverage

/// Geometry used for coverage runs: one L2 color, two LLC rows per page
/// offset, `slices` slices.
pub fn coverage_geometry(slices: usize) -> CacheGeometry {
    CacheGeometry {
        l2_ways: 4,
        l2_sets: 64,
        llc_ways: 4,
        llc_sets: 128,
        slices,
        ..CacheGeometry::skylake_sp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageParams {
    pub f: usize,
    pub runs: usize,
    pub offsets_per_run: usize,
    pub slices: usize,
    pub workers: usize,
}

impl Default for CoverageParams {
    fn default() -> Self {
        Self {
            f: 4,
            runs: 50,
            offsets_per_run: 4,
            slices: 20,
            workers: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageOutcome {
    pub f: usize,
    pub runs: usize,
    pub partitions: usize,
    pub covered_rows: usize,
    pub total_rows: usize,
    pub coverage: f64,
    pub theoretical: f64,
    pub duplicate_sets: usize,
    pub starved_tasks: usize,
    pub mean_parallel_ms: f64,
    pub mean_serial_ms: f64,
}

pub fn coverage(p: &CoverageParams, seed: u64) -> Result<(CoverageOutcome, Artifacts)> {
    let g = coverage_geometry(p.slices);
    let theoretical = evset::coverage_theoretical(p.slices, p.f)?;
    let n = pool_size(&g, Level::Llc, EvsetConfig::default().scale);
    let mut out = CoverageOutcome {
        f: p.f,
        runs: p.runs,
        partitions: 0,
        covered_rows: 0,
        total_rows: 0,
        coverage: 0.0,
        theoretical,
        duplicate_sets: 0,
        starved_tasks: 0,
        mean_parallel_ms: 0.0,
        mean_serial_ms: 0.0,
    };
    let mut csv = String::from("run,offset,covered_rows,sets\n");
    let all: Vec<u64> = (0..(1u64 << PAGE_SHIFT) / LINE_SIZE).map(|i| i * LINE_SIZE).collect();
    for run in 0..p.runs {
        let s = mix(seed, run as u64);
        let mut m = machine(g.clone(), n + 64, s)?;
        let pages = m.alloc_pages(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let offsets: Vec<u64> = all
            .choose_multiple(&mut rng, p.offsets_per_run.min(all.len()))
            .copied()
            .collect();
        let ctx = Ctx::new(&m, 0, EvsetConfig::default(), s);
        let groups = [ColorGroup { color: 0, pages }];
        let r = build_parallel(&mut m, &ctx, p.f, &groups, &offsets, p.workers, s)?;
        let cov = evset::oracle_coverage(&m, &r.sets, offsets.len())?;
        for &o in &offsets {
            let here: Vec<EvictionSet> = r.sets.iter().filter(|s| s.offset == o).cloned().collect();
            let c = evset::oracle_coverage(&m, &here, 1)?;
            let _ = writeln!(csv, "{run},{o:#x},{},{}", c.covered_rows, here.len());
        }
        out.partitions += offsets.len();
        out.covered_rows += cov.covered_rows;
        out.total_rows += cov.total_rows;
        out.duplicate_sets += cov.duplicate_sets;
        out.starved_tasks += r.starved;
        out.mean_parallel_ms += crate::tenant::to_ms(r.duration_ns);
        out.mean_serial_ms += crate::tenant::to_ms(r.serial_ns);
    }
    out.coverage = out.covered_rows as f64 / out.total_rows.max(1) as f64;
    out.mean_parallel_ms /= p.runs.max(1) as f64;
    out.mean_serial_ms /= p.runs.max(1) as f64;
    let mut a = Artifacts::new();
    a.insert(format!("coverage_f{}.csv", p.f), csv);
    Ok((out, a))
}

// Associativity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocParams {
    pub ways: usize,
    pub mask: usize,
    pub runs: usize,
    pub sets_per_run: usize,
    pub replacement: Replacement,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            ways: 11,
            mask: 11,
            runs: 10,
            sets_per_run: 3,
            replacement: Replacement::Lru,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssocOutcome {
    pub mask: usize,
    pub replacement: Replacement,
    /// Modal minimal-set size per run.
    pub per_run: Vec<usize>,
    pub modal: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn evset_config_for(policy: Replacement) -> EvsetConfig {
    match policy {
        Replacement::Lru => EvsetConfig::default(),
        Replacement::Plru => EvsetConfig::robust(),
        Replacement::Random => EvsetConfig {
            rounds: 64,
            trials: 16,
            unanimous: true,
            flush: true,
            verify: crate::evset::Verify::Exhaustive,
            ..EvsetConfig::robust()
        },
    }
}

pub fn associativity(p: &AssocParams, seed: u64) -> Result<AssocOutcome> {
    let g = CacheGeometry {
        l2_ways: 4,
        l2_sets: 64,
        llc_ways: p.ways,
        llc_sets: 64,
        slices: 4,
        replacement: p.replacement,
        ..CacheGeometry::skylake_sp()
    };
    let mut per_run = Vec::new();
    for run in 0..p.runs {
        let s = mix(seed, run as u64);
        let mut m = machine(g.clone(), 2048, s)?;
        for v in 0..m.vcpus() {
            let a = m.actor_of(v);
            m.cache_mut().set_way_mask(a, Level::Llc, p.mask)?;
        }
        let mut ctx = Ctx::new(&m, 0, evset_config_for(p.replacement), s);
        let pages = m.alloc_pages(pool_size(&g, Level::Llc, ctx.cfg.scale))?;
        let mut sizes = Vec::new();
        let mut tries = 0;
        while sizes.len() < p.sets_per_run && tries < p.sets_per_run * 3 {
            tries += 1;
            let target = (m.alloc_page()? << PAGE_SHIFT) | ((tries as u64 * 7 % 64) * LINE_SIZE);
            if let Ok(set) = build_for_target(&mut m, &mut ctx, Level::Llc, target, &pages) {
                if set.minimal {
                    sizes.push(set.len());
                }
            }
        }
        if let Ok(mode) = vscan::probe_associativity(
            &sizes
                .iter()
                .map(|&n| EvictionSet {
                    level: Level::Llc,
                    offset: 0,
                    members: vec![0; n],
                    minimal: true,
                    target: None,
                    color: None,
                    domain: 0,
                })
                .collect::<Vec<_>>(),
        ) {
            per_run.push(mode);
        }
    }
    let modal = mode_of(&per_run);
    let (mean, std) = mean_std(&per_run.iter().map(|&x| x as f64).collect::<Vec<_>>());
    Ok(AssocOutcome {
        mask: p.mask,
        replacement: p.replacement,
        per_run,
        modal,
        mean,
        std,
    })
}

fn mode_of(xs: &[usize]) -> usize {
    let mut c: BTreeMap<usize, usize> = BTreeMap::new();
    for &x in xs {
        *c.entry(x).or_default() += 1;
    }
    c.into_iter()
        .max_by_key(|&(v, n)| (n, std::cmp::Reverse(v)))
        .map_or(0, |(v, _)| v)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

// Color identification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorIdParams {
    pub pages: usize,
    /// Host-side restriction of the VM's L2 colors.
    pub host_colors: Option<Vec<u32>>,
}

impl Default for ColorIdParams {
    fn default() -> Self {
        Self {
            pages: 10_000,
            host_colors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColorIdOutcome {
    pub filters: usize,
    pub distinct_filter_colors: usize,
    pub classified: usize,
    pub uncolored: usize,
    pub permutation: bool,
    /// Pages agreeing with the best relabeling of the oracle colors.
    pub accuracy: f64,
    pub histogram: Vec<usize>,
    pub stats: vcol::ClassifyStats,
}

/// Build the filters and classify `pages` fresh pages on a quiet machine.
pub fn color_identification(g: &CacheGeometry, profile: FragmentationProfile, p: &ColorIdParams, seed: u64) -> Result<(ColorIdOutcome, Artifacts)> {
    let g = g.clone();
    let mut t = TranslationConfig::new(profile, p.pages + 4 * pool_size(&g, Level::L2, 3));
    t.host_l2_colors = p.host_colors.clone();
    let mut m = Machine::new(MachineConfig::new(g, t, seed))?;
    let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), seed);
    let filters = vcol::build_color_filters(&mut m, &mut ctx)?;
    let distinct: BTreeSet<u32> = filters
        .iter()
        .map(|f| m.oracle_color(f.base.members[0], Level::L2))
        .collect::<Result<_>>()?;
    let mut cls = Classifier::new(&filters)?;
    let mut lists = ColoredFreeLists::new(filters.len());
    let r = vcol::refill_lists(&mut m, &mut ctx, &mut lists, &mut cls, p.pages)?;
    let assignments = lists.assignments();
    let table = vcol::contingency(&m, &assignments, filters.len())?;
    let agree: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    let mut a = Artifacts::new();
    a.insert("histogram.csv".into(), vcol::histogram_csv(&lists.histogram()));
    a.insert("lists.csv".into(), lists.dump());
    let mut ct = String::from("virtual,oracle,pages\n");
    for (v, row) in table.iter().enumerate() {
        for (o, &n) in row.iter().enumerate().filter(|(_, &n)| n > 0) {
            let _ = writeln!(ct, "{v},{o},{n}");
        }
    }
    a.insert("contingency.csv".into(), ct);
    a.insert("filters.csv".into(), evset::evsets_csv(&filters.iter().map(|f| f.base.clone()).collect::<Vec<_>>()));
    Ok((
        ColorIdOutcome {
            filters: filters.len(),
            distinct_filter_colors: distinct.len(),
            classified: assignments.len(),
            uncolored: r.uncolored,
            permutation: vcol::is_permutation(&table),
            accuracy: agree as f64 / assignments.len().max(1) as f64,
            histogram: lists.histogram(),
            stats: r.stats,
        },
        a,
    ))
}

// Monitoring helpers

/// Minimal LLC sets at `offsets` built from a dedicated pool, in `vcpu`'s
/// domain, with co-tenants frozen during construction.
pub fn monitor_sets(m: &mut Machine, vcpu: usize, offsets: &[u64], cfg: EvsetConfig, seed: u64) -> Result<Vec<EvictionSet>> {
    let g = m.geometry().clone();
    let mut ctx = Ctx::new(m, vcpu, cfg, seed);
    let pages = m.alloc_pages(pool_size(&g, Level::Llc, ctx.cfg.scale))?;
    let l2 = m
        .detached(|m| evset::build_all_at_offset(m, &mut ctx, Level::L2, 0, &pages[..pool_size(&g, Level::L2, 3).min(pages.len())], None))?
        .0
        .sets;
    let mut out = Vec::new();
    for &o in offsets {
        let r = m.detached(|m| evset::build_all_at_offset(m, &mut ctx, Level::Llc, o, &pages, Some(&l2)))?.0;
        out.extend(r.sets);
    }
    Ok(out)
}

/// Geometry for monitoring experiments: small L2, 8-way LLC with 16 sets
/// reachable from each page offset.
pub fn monitor_geometry() -> CacheGeometry {
    CacheGeometry {
        l2_ways: 4,
        l2_sets: 64,
        llc_ways: 8,
        llc_sets: 256,
        slices: 4,
        ..CacheGeometry::skylake_sp()
    }
}

// Manual flush

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManualFlushOutcome {
    pub ways: usize,
    pub set_size: usize,
    pub flushed: Vec<usize>,
    pub detected: Vec<usize>,
}

/// Prime one LLC set, flush k of its lines, probe.
pub fn manual_flush(ks: &[usize], seed: u64) -> Result<(ManualFlushOutcome, Artifacts)> {
    let g = CacheGeometry::skylake_sp();
    let n = pool_size(&g, Level::Llc, 3);
    let mut m = machine(g.clone(), n + 64, seed)?;
    let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), seed);
    let pages = m.alloc_pages(n)?;
    let target = m.alloc_page()? << PAGE_SHIFT | 0x140;
    let set = build_for_target(&mut m, &mut ctx, Level::Llc, target, &pages)?;
    let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), vec![set.clone()])?;
    let mut detected = Vec::new();
    let mut csv = String::from("flushed,detected\n");
    for &k in ks {
        let members = set.members.clone();
        let r = mon.cycle_with(&mut m, |m| {
            for &gva in members.iter().take(k) {
                m.flush(gva)?;
            }
            Ok(())
        })?;
        detected.push(r.sets[0].evicted);
        let _ = writeln!(csv, "{k},{}", r.sets[0].evicted);
        m.skip_to(m.now() + ms(1000.0))?;
    }
    let mut a = Artifacts::new();
    a.insert("manual_flush.csv".into(), csv);
    Ok((
        ManualFlushOutcome {
            ways: g.llc_ways,
            set_size: set.len(),
            flushed: ks.to_vec(),
            detected,
        },
        a,
    ))
}

// Window sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantProfile {
    pub name: String,
    /// Polluter accesses per ms.
    pub rate: f64,
}

pub fn default_profiles() -> Vec<TenantProfile> {
    vec![
        TenantProfile { name: "polluter".into(), rate: 8192.0 },
        TenantProfile { name: "moderate".into(), rate: 2048.0 },
        TenantProfile { name: "light".into(), rate: 256.0 },
    ]
}

pub fn default_windows() -> Vec<f64> {
    vec![0.1, 0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCurve {
    pub profile: String,
    pub rate: f64,
    /// (window ms, evicted percent)
    pub points: Vec<(f64, f64)>,
    /// First window at which every monitored line was evicted.
    pub saturation_ms: Option<f64>,
}

impl SweepCurve {
    /// Non-decreasing in window length up to the first saturated point.
    pub fn monotone_to_saturation(&self) -> bool {
        let mut prev = -1.0;
        for &(_, e) in &self.points {
            if e + 1e-9 < prev {
                return false;
            }
            if e >= 100.0 {
                break;
            }
            prev = e;
        }
        true
    }
}

pub fn window_sweep(profiles: &[TenantProfile], windows: &[f64], seed: u64) -> Result<(Vec<SweepCurve>, Artifacts)> {
    let g = monitor_geometry();
    let mut curves = Vec::new();
    let mut csv = String::from("profile,window_ms,evicted_percent\n");
    for prof in profiles {
        let mut points = Vec::new();
        for &w in windows {
            let mut m = machine(g.clone(), 4096, seed)?;
            let sets = monitor_sets(&mut m, 0, &[0x0], EvsetConfig::default(), seed)?;
            let start = m.now();
            m.add_tenant(TenantWorkload::polluter(prof.rate).between(crate::tenant::to_ms(start), None))?;
            let cfg = MonitorConfig {
                window_ms: w,
                window_min_ms: w.min(1.0),
                window_max_ms: w.max(7.0),
                fixed_window: true,
                ..MonitorConfig::default()
            };
            let mut mon = ContentionMonitor::new(&m, cfg, sets)?;
            let r = mon.cycle(&mut m)?;
            let e = r.evicted_percent();
            let _ = writeln!(csv, "{},{w},{e:.4}", prof.name);
            points.push((w, e));
        }
        let saturation_ms = points.iter().find(|p| p.1 >= 100.0).map(|p| p.0);
        curves.push(SweepCurve {
            profile: prof.name.clone(),
            rate: prof.rate,
            points,
            saturation_ms,
        });
    }
    let mut a = Artifacts::new();
    a.insert("window_sweep.csv".into(), csv);
    Ok((curves, a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowTrace {
    /// (window used, next window, fully evicted sets, total evicted)
    pub cycles: Vec<(f64, f64, usize, usize)>,
}

/// Saturating polluter for `loud_ms` after the monitor starts, then silence;
/// the adaptive window should step down by 1 ms per cycle and return to the
/// default once quiet.
pub fn window_adjust(cycles: usize, loud_ms: f64, seed: u64) -> Result<(WindowTrace, Artifacts)> {
    let g = monitor_geometry();
    let mut m = machine(g.clone(), 4096, seed)?;
    let sets = monitor_sets(&mut m, 0, &[0x0], EvsetConfig::default(), seed)?;
    let total = (g.llc_sets * g.slices) as f64;
    let t0 = crate::tenant::to_ms(m.now());
    m.add_tenant(TenantWorkload::polluter(total * g.llc_ways as f64 * 4.0).between(t0, Some(t0 + loud_ms)))?;
    let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets)?;
    let mut trace = WindowTrace { cycles: Vec::new() };
    let mut csv = String::from("t_ms,window_ms,next_window_ms,full_sets,evicted\n");
    for r in mon.run(&mut m, cycles)? {
        let full = r.sets.iter().filter(|s| s.fully_evicted()).count();
        let _ = writeln!(csv, "{},{},{},{full},{}", r.t_ms, r.window_ms, r.next_window_ms, r.total_evicted());
        trace.cycles.push((r.window_ms, r.next_window_ms, full, r.total_evicted()));
    }
    let mut a = Artifacts::new();
    a.insert("window_adjust.csv".into(), csv);
    Ok((trace, a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfEvictionOutcome {
    pub replacement: Replacement,
    pub sets: usize,
    pub cycles: usize,
    pub clean_sets: usize,
    pub evicted_lines: usize,
}

/// Quiet monitor cycles over every set at a few offsets.
pub fn self_eviction(replacement: Replacement, offsets: &[u64], cycles: usize, seed: u64) -> Result<SelfEvictionOutcome> {
    let g = monitor_geometry().with_replacement(replacement);
    let mut m = machine(g, 8192, seed)?;
    let sets = monitor_sets(&mut m, 0, offsets, evset_config_for(replacement), seed)?;
    let n = sets.len();
    let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets)?;
    let mut dirty = vec![false; n];
    let mut lines = 0;
    for r in mon.run(&mut m, cycles)? {
        for o in &r.sets {
            if o.evicted > 0 || o.unknown > 0 {
                dirty[o.id] = true;
            }
            lines += o.evicted;
        }
    }
    Ok(SelfEvictionOutcome {
        replacement,
        sets: n,
        cycles,
        clean_sets: dirty.iter().filter(|d| !**d).count(),
        evicted_lines: lines,
    })
}

/// Idle-host background noise: about `per_set` evictions per set per
/// default window.
pub fn idle_noise(per_set: f64, cycles: usize, seed: u64) -> Result<(f64, Vec<CycleReport>)> {
    let g = monitor_geometry();
    let mut m = machine(g.clone(), 4096, seed)?;
    let sets = monitor_sets(&mut m, 0, &[0x0], EvsetConfig::default(), seed)?;
    let n = sets.len();
    m.add_tenant(TenantWorkload::noise(TenantWorkload::background_rate(&g, per_set, 7.0)))?;
    let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets)?;
    let rs = mon.run(&mut m, cycles)?;
    let mean = rs.iter().map(|r| r.total_evicted() as f64).sum::<f64>() / (n * cycles.max(1)) as f64;
    Ok((mean, rs))
}

// Contention-aware scheduling driven by the monitor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasParams {
    pub intervals: usize,
    pub polluter_rate: f64,
    /// Background evictions per set per default window, in every domain.
    pub noise_per_set: f64,
    /// Move the polluter to the other domain every interval.
    pub alternate: bool,
    pub sched: SchedConfig,
    pub cas: CasConfig,
}

impl Default for CasParams {
    fn default() -> Self {
        Self {
            intervals: 30,
            polluter_rate: 2048.0,
            noise_per_set: 0.25,
            alternate: false,
            sched: SchedConfig::default(),
            cas: CasConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CasOutcome {
    pub policy: SchedPolicy,
    /// Per interval, per-domain rates fed to the scheduler.
    pub rates: Vec<Vec<f64>>,
    pub report: SchedReport,
}

impl CasOutcome {
    pub fn residency(&self, domain: usize) -> f64 {
        self.report.sensitive_residency.get(domain).copied().unwrap_or(0.0)
    }
}

/// Monitor both domains each interval and feed their rates to the scheduler.
pub fn cas_pipeline(p: &CasParams, policy: SchedPolicy, seed: u64) -> Result<(CasOutcome, Artifacts)> {
    let g = monitor_geometry();
    let domains = p.sched.domains.max(1);
    let cfg = MachineConfig::new(g.clone(), TranslationConfig::new(shuffled(), 8192), seed).with_vcpus(p.sched.vcpus, domains);
    let mut m = Machine::new(cfg)?;
    let mut sets = Vec::new();
    for d in 0..domains {
        let v = m.topology().vcpus_in(d)[0];
        sets.extend(monitor_sets(&mut m, v, &[0x0], EvsetConfig::default(), mix(seed, d as u64))?);
    }
    let mon_cfg = MonitorConfig::default();
    let interval = mon_cfg.interval_ms;
    let t0 = crate::tenant::to_ms(m.now());
    if p.alternate {
        for k in 0..p.intervals {
            let at = t0 + k as f64 * interval;
            m.add_tenant(
                TenantWorkload::polluter(p.polluter_rate)
                    .in_domain(k % domains)
                    .between(at, Some(at + interval)),
            )?;
        }
    } else {
        m.add_tenant(TenantWorkload::polluter(p.polluter_rate).between(t0, None))?;
    }
    if p.noise_per_set > 0.0 {
        let r = TenantWorkload::background_rate(&g, p.noise_per_set, mon_cfg.window_ms);
        for d in 0..domains {
            m.add_tenant(TenantWorkload::noise(r).in_domain(d).between(t0, None))?;
        }
    }
    let mut mon = ContentionMonitor::new(&m, mon_cfg, sets)?;
    let mut sim = SchedSim::new(SchedConfig { seed, ..p.sched.clone() }, p.cas.clone(), policy);
    let mut rates = Vec::new();
    let mut csv = String::from("interval,domain,rate,tier\n");
    for k in 0..p.intervals {
        let start = m.now();
        let r = mon.cycle(&mut m)?;
        let v: Vec<f64> = (0..domains).map(|d| r.aggregates.by_domain.get(&d).copied().unwrap_or(0.0)).collect();
        sim.step(&v);
        for (d, x) in v.iter().enumerate() {
            let _ = writeln!(csv, "{k},{d},{x:.4},{}", sim.tiers().tiers[d]);
        }
        rates.push(v);
        m.skip_to(start + ms(interval))?;
    }
    let report = sim.report();
    let mut a = Artifacts::new();
    a.insert("schedule.csv".into(), report.csv());
    a.insert("domain_rates.csv".into(), csv);
    Ok((CasOutcome { policy, rates, report }, a))
}

// Color-aware page cache driven by the monitor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapParams {
    pub intervals: usize,
    /// Oracle L2 color stressed by the poisoner.
    pub poisoned: u32,
    pub poison_rate: f64,
    /// File pages read per interval.
    pub scan_steps: usize,
    pub file_pages: u64,
    /// Reuse working set pages per non-poisoned color.
    pub reuse_pages_per_color: usize,
    /// Pages classified into the page-cache lists.
    pub cache_pool: usize,
    pub cap: CapConfig,
}

impl Default for CapParams {
    fn default() -> Self {
        Self {
            intervals: 8,
            poisoned: 5,
            poison_rate: 2048.0,
            scan_steps: 64,
            file_pages: 1 << 20,
            reuse_pages_per_color: 8,
            cache_pool: 1024,
            cap: CapConfig::default(),
        }
    }
}

/// Poisoner on oracle color `color` from interval `from` until `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonPhase {
    pub color: u32,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapInterval {
    pub interval: usize,
    pub hottest: Option<u32>,
    pub alloc_color: Option<u32>,
    /// Allocation color ranked below the hottest on tiers.
    pub demoted: bool,
    pub reclaimed: bool,
    /// Distinct oracle LLC zones the scan filled this interval.
    pub scan_zones: Vec<u32>,
    pub reuse_misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapOutcome {
    pub ranking: bool,
    pub intervals: Vec<CapInterval>,
    pub reuse_misses: u64,
    pub reclaims: usize,
    /// Virtual color the classifier assigned to the poisoned pages' color.
    pub poisoned_virtual: Option<u32>,
    pub dirty_lines: usize,
}

impl CapOutcome {
    /// Every interval's scan filled at most one zone.
    pub fn confined(&self) -> bool {
        self.intervals.iter().all(|i| i.scan_zones.len() <= 1)
    }

    /// Every reclaim came right after `after` demoted intervals, counting
    /// its own.
    pub fn reclaims_follow_demotions(&self, after: usize) -> bool {
        self.intervals.iter().enumerate().filter(|(_, i)| i.reclaimed).all(|(k, _)| {
            k + 1 >= after && self.intervals[k + 1 - after..=k].iter().all(|i| i.demoted)
        })
    }
}

pub fn cap_pipeline(p: &CapParams, schedule: &[PoisonPhase], seed: u64) -> Result<(CapOutcome, Artifacts)> {
    let g = CacheGeometry::desk();
    let colors = g.colors(Level::L2);
    let pool = pool_size(&g, Level::Llc, 3);
    let reuse_total = p.reuse_pages_per_color * colors;
    let pages = pool + p.cache_pool + 2 * reuse_total + 4 * pool_size(&g, Level::L2, 3) + 256;
    let cfg = MachineConfig::new(g.clone(), TranslationConfig::new(shuffled(), pages), seed).with_vcpus(4, 1);
    let mut m = Machine::new(cfg)?;
    let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), seed);
    let filters = vcol::build_color_filters(&mut m, &mut ctx)?;
    let mut cls = Classifier::new(&filters)?;
    let mut evset_lists = ColoredFreeLists::new(colors);
    vcol::refill_lists(&mut m, &mut ctx, &mut evset_lists, &mut cls, pool)?;
    let groups = vcol::color_groups(&evset_lists);
    let built = build_parallel(&mut m, &ctx, 2, &groups, &[0x0], 4, seed)?;
    let poisoned_virtual = groups
        .iter()
        .find(|gr| gr.pages.first().is_some_and(|&pg| m.oracle_color(pg << PAGE_SHIFT, Level::L2).ok() == Some(p.poisoned)))
        .map(|gr| gr.color);

    let mut lists = ColoredFreeLists::new(colors);
    vcol::refill_lists(&mut m, &mut ctx, &mut lists, &mut cls, p.cache_pool)?;
    let mut reuse_lists = ColoredFreeLists::new(colors);
    vcol::refill_lists(&mut m, &mut ctx, &mut reuse_lists, &mut cls, 2 * reuse_total)?;
    let mut reuse_pages = Vec::new();
    for c in 0..colors as u32 {
        if Some(c) == poisoned_virtual {
            continue;
        }
        for _ in 0..p.reuse_pages_per_color {
            if let Some(pg) = reuse_lists.pop(c) {
                reuse_pages.push(pg);
            }
        }
    }

    let scan_actor = m.add_guest_actor(2)?;
    let reuse_actor = m.add_guest_actor(3)?;
    let mon_cfg = MonitorConfig::default();
    let interval = mon_cfg.interval_ms;
    let t0 = crate::tenant::to_ms(m.now());
    for ph in schedule {
        m.add_tenant(
            TenantWorkload::poisoner(vec![ph.color], p.poison_rate)
                .between(t0 + ph.from as f64 * interval, Some(t0 + ph.to as f64 * interval)),
        )?;
    }
    let mut mon = ContentionMonitor::new(&m, mon_cfg, built.sets)?;
    let mut cache = PageCache::new(p.cap.clone(), colors);
    let mut tracker = RecolorTracker::default();
    let mut scan = ScanActor {
        actor: scan_actor,
        file_pages: p.file_pages,
        next: 0,
    };
    let mut reuse = ReuseActor::new(reuse_actor, &reuse_pages);
    reuse.pass(&mut m)?;
    reuse.accesses = 0;
    reuse.misses = 0;
    m.cache_mut().enable_llc_trace();

    let mut out = CapOutcome {
        ranking: p.cap.ranking,
        intervals: Vec::new(),
        reuse_misses: 0,
        reclaims: 0,
        poisoned_virtual,
        dirty_lines: 0,
    };
    let mut rows = Vec::new();
    for k in 0..p.intervals {
        let start = m.now();
        let r = mon.cycle(&mut m)?;
        let ranking = cap::rank_colors(&cap::color_rates(&r.aggregates.by_color, colors), p.cap.tiers, p.cap.min_gap);
        let demoted = match (tracker.current, ranking.hottest()) {
            (Some(cur), Some(top)) => ranking.tier[cur as usize] < ranking.tier[top as usize],
            _ => false,
        };
        let first = tracker.current.is_none();
        let reclaimed = tracker.maybe_recolor(&ranking, p.cap.recolor_after);
        if reclaimed {
            cache.reclaim(&mut lists);
        }
        if first || reclaimed {
            cache.set_ranking(ranking.clone());
        }
        m.cache_mut().take_llc_trace();
        let mut missed = 0;
        for step in 0..p.scan_steps {
            scan.step(&mut m, &mut cache, &mut lists)?;
            if step % 16 == 15 {
                missed += reuse.pass(&mut m)?;
            }
        }
        let mut zones = BTreeSet::new();
        for (actor, hpa) in m.cache_mut().take_llc_trace() {
            if actor == scan_actor {
                zones.insert(g.color_of(Level::L2, hpa));
            }
        }
        rows.push(cache.csv_row(k, scan_actor));
        out.reuse_misses += missed;
        out.intervals.push(CapInterval {
            interval: k,
            hottest: ranking.hottest(),
            alloc_color: cache.last_color,
            demoted,
            reclaimed,
            scan_zones: zones.into_iter().collect(),
            reuse_misses: missed,
        });
        m.skip_to((start + ms(interval)).max(m.now()))?;
    }
    out.reclaims = tracker.reclaims;
    out.dirty_lines = m.cache().dirty_lines();
    let mut trace = String::from("interval,hottest,alloc_color,demoted,reclaimed,scan_zones,reuse_misses\n");
    for i in &out.intervals {
        let z: Vec<String> = i.scan_zones.iter().map(u32::to_string).collect();
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{},{}",
            i.interval,
            i.hottest.map_or(String::new(), |c| c.to_string()),
            i.alloc_color.map_or(String::new(), |c| c.to_string()),
            i.demoted,
            i.reclaimed,
            z.join(";"),
            i.reuse_misses
        );
    }
    let mut a = Artifacts::new();
    a.insert("page_cache.csv".into(), cap::cap_csv(&rows));
    a.insert("cap_intervals.csv".into(), trace);
    Ok((out, a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorptionOutcome {
    /// (seed, misses with ranking, misses without)
    pub pairs: Vec<(u64, u64, u64)>,
    pub wins: usize,
    pub ties: usize,
    pub p_value: f64,
    pub confined: bool,
}

/// Paired ranking vs fixed-order runs under a steady poisoner.
pub fn cap_absorption(p: &CapParams, seeds: &[u64]) -> Result<(AbsorptionOutcome, Artifacts)> {
    let schedule = [PoisonPhase {
        color: p.poisoned,
        from: 0,
        to: p.intervals + 1,
    }];
    let mut pairs = Vec::new();
    let mut confined = true;
    let mut csv = String::from("seed,ranked_misses,unranked_misses\n");
    for &s in seeds {
        let on = CapParams {
            cap: CapConfig { ranking: true, ..p.cap.clone() },
            ..p.clone()
        };
        let off = CapParams {
            cap: CapConfig { ranking: false, ..p.cap.clone() },
            ..p.clone()
        };
        let (a, _) = cap_pipeline(&on, &schedule, s)?;
        let (b, _) = cap_pipeline(&off, &schedule, s)?;
        confined &= a.confined() && b.confined();
        let _ = writeln!(csv, "{s},{},{}", a.reuse_misses, b.reuse_misses);
        pairs.push((s, a.reuse_misses, b.reuse_misses));
    }
    let wins = pairs.iter().filter(|x| x.1 < x.2).count();
    let ties = pairs.iter().filter(|x| x.1 == x.2).count();
    let n = pairs.len() - ties;
    let mut a = Artifacts::new();
    a.insert("absorption.csv".into(), csv);
    Ok((
        AbsorptionOutcome {
            p_value: cap::sign_test(wins, n),
            pairs,
            wins,
            ties,
            confined,
        },
        a,
    ))
}

/// Poisoner on `a`, a one-interval flip to `b`, back to `a`, then a
/// permanent switch to `b`.
pub fn recolor_script(a: u32, b: u32, intervals: usize) -> Vec<PoisonPhase> {
    let flip = 3;
    let switch = intervals / 2 + 1;
    vec![
        PoisonPhase { color: a, from: 0, to: flip },
        PoisonPhase { color: b, from: flip, to: flip + 1 },
        PoisonPhase { color: a, from: flip + 1, to: switch },
        PoisonPhase { color: b, from: switch, to: intervals + 1 },
    ]
}

// Fragmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FragParams {
    pub pages: usize,
    /// Fraction of guest pages remapped at each stage.
    pub stage_fractions: Vec<f64>,
}

impl Default for FragParams {
    fn default() -> Self {
        Self {
            pages: 1024,
            stage_fractions: vec![0.15; 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragOutcome {
    pub contiguous: f64,
    pub shuffled: f64,
    /// Overlap before any remap, then after each stage.
    pub staged: Vec<f64>,
}

impl FragOutcome {
    pub fn staged_decreasing(&self) -> bool {
        self.staged.windows(2).all(|w| w[1] < w[0])
    }
}

fn classify_into_overlap(m: &mut Machine, pages: &[u64], seed: u64) -> Result<f64> {
    let mut ctx = Ctx::new(m, 0, EvsetConfig::default(), seed);
    let filters = vcol::build_color_filters(m, &mut ctx)?;
    let mut cls = Classifier::new(&filters)?;
    let mut assignments = Vec::with_capacity(pages.len());
    for &pg in pages {
        if let Some(c) = cls.classify(m, &mut ctx, pg)? {
            assignments.push((pg, c));
        }
    }
    for f in &filters {
        for &gva in &f.base.members {
            m.free_page(gva >> PAGE_SHIFT);
        }
    }
    vcol::gpa_color_overlap(m, &assignments)
}

fn frag_machine(g: &CacheGeometry, profile: FragmentationProfile, pages: usize, seed: u64) -> Result<(Machine, Vec<u64>)> {
    let n = pages + 4 * pool_size(g, Level::L2, 3);
    let mut m = Machine::new(MachineConfig::new(g.clone(), TranslationConfig::new(profile, n), seed))?;
    let ps = m.alloc_pages(pages)?;
    Ok((m, ps))
}

pub fn fragmentation(p: &FragParams, seed: u64) -> Result<(FragOutcome, Artifacts)> {
    let g = CacheGeometry::desk();
    let (mut m, ps) = frag_machine(&g, FragmentationProfile::Contiguous, p.pages, seed)?;
    let contiguous = classify_into_overlap(&mut m, &ps, seed)?;
    let (mut m2, ps2) = frag_machine(&g, shuffled(), p.pages, seed)?;
    let shuffled_overlap = classify_into_overlap(&mut m2, &ps2, seed)?;

    let (mut m, ps) = frag_machine(&g, FragmentationProfile::Contiguous, p.pages, seed)?;
    let t0 = crate::tenant::to_ms(m.now()) + 1.0;
    let events = p
        .stage_fractions
        .iter()
        .enumerate()
        .map(|(k, &f)| RemapEvent::new(t0 + k as f64 * 1000.0, f))
        .collect();
    m.map_mut().set_remap_schedule(events)?;
    let mut staged = vec![classify_into_overlap(&mut m, &ps, seed)?];
    for k in 0..p.stage_fractions.len() {
        m.skip_to(ms(t0 + k as f64 * 1000.0))?;
        staged.push(classify_into_overlap(&mut m, &ps, mix(seed, k as u64 + 1))?);
    }
    let mut csv = String::from("stage,overlap\n");
    for (k, o) in staged.iter().enumerate() {
        let _ = writeln!(csv, "{k},{o:.6}");
    }
    let mut a = Artifacts::new();
    a.insert("overlap.csv".into(), csv);
    Ok((
        FragOutcome {
            contiguous,
            shuffled: shuffled_overlap,
            staged,
        },
        a,
    ))
}

// Generic runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyParams {
    pub level: Level,
    pub offsets: Vec<u64>,
    pub replacement: Option<Replacement>,
    /// Add the final cache contents as `cache_state.csv`.
    pub dump_state: bool,
}

impl Default for SurveyParams {
    fn default() -> Self {
        Self {
            level: Level::Llc,
            offsets: vec![0x0],
            replacement: None,
            dump_state: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyOutcome {
    pub level: Level,
    pub offsets: usize,
    pub sets: usize,
    pub expected: usize,
    pub minimal: usize,
    pub congruent: usize,
    pub duplicate_sets: usize,
    pub prune_failures: usize,
}

/// Every set reachable at each offset, checked against the oracle.
pub fn evset_survey(g: &CacheGeometry, profile: FragmentationProfile, p: &SurveyParams, seed: u64) -> Result<(SurveyOutcome, Artifacts)> {
    let g = match p.replacement {
        Some(r) => g.clone().with_replacement(r),
        None => g.clone(),
    };
    let n = pool_size(&g, p.level, 3);
    let t = TranslationConfig::new(profile, n + 4 * pool_size(&g, Level::L2, 3));
    let mut m = Machine::new(MachineConfig::new(g.clone(), t, seed))?;
    let repl = g.replacement;
    let mut ctx = Ctx::new(&m, 0, evset_config_for(repl), seed);
    let pages = m.alloc_pages(n)?;
    let l2 = match p.level {
        Level::L2 => None,
        Level::Llc => {
            let k = pool_size(&g, Level::L2, 3).min(pages.len());
            Some(evset::build_all_at_offset(&mut m, &mut ctx, Level::L2, 0, &pages[..k], None)?.sets)
        }
    };
    let mut sets = Vec::new();
    let mut expected = 0;
    let mut prune_failures = 0;
    for &o in &p.offsets {
        let r = evset::build_all_at_offset(&mut m, &mut ctx, p.level, o, &pages, l2.as_deref())?;
        expected += r.expected;
        prune_failures += r.prune_failures;
        sets.extend(r.sets);
    }
    let mut congruent = 0;
    let mut keys = BTreeSet::new();
    let mut dups = 0;
    for s in &sets {
        if evset::oracle_congruent(&m, s)? {
            congruent += 1;
        }
        let k = match s.level {
            Level::L2 => (0, m.oracle_l2_set(s.members[0])?),
            Level::Llc => m.oracle_llc_set(s.members[0])?,
        };
        if !keys.insert(k) {
            dups += 1;
        }
    }
    let mut a = Artifacts::new();
    a.insert("evsets.csv".into(), evset::evsets_csv(&sets));
    if p.dump_state {
        a.insert("cache_state.csv".into(), m.cache().dump_csv());
    }
    Ok((
        SurveyOutcome {
            level: p.level,
            offsets: p.offsets.len(),
            sets: sets.len(),
            expected,
            minimal: sets.iter().filter(|s| s.minimal).count(),
            congruent,
            duplicate_sets: dups,
            prune_failures,
        },
        a,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorParams {
    pub offsets: Vec<u64>,
    /// Add the final cache contents as `cache_state.csv`.
    pub dump_state: bool,
}

impl Default for MonitorParams {
    fn default() -> Self {
        Self {
            offsets: vec![0x0],
            dump_state: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorOutcome {
    pub sets: usize,
    pub cycles: usize,
    pub mean_evicted_percent: f64,
    pub final_window_ms: f64,
    pub by_domain: BTreeMap<usize, f64>,
}

/// Monitor cycles against the given co-tenants.
pub fn monitor_run(
    g: &CacheGeometry,
    profile: FragmentationProfile,
    p: &MonitorParams,
    cfg: &MonitorConfig,
    tenants: &[TenantWorkload],
    cycles: usize,
    seed: u64,
) -> Result<(MonitorOutcome, Artifacts)> {
    let domains = tenants.iter().map(|t| t.domain + 1).max().unwrap_or(1);
    let pages = pool_size(g, Level::Llc, 3) * domains + 4 * pool_size(g, Level::L2, 3) + 256;
    let mc = MachineConfig::new(g.clone(), TranslationConfig::new(profile, pages), seed).with_vcpus(2 * domains, domains);
    let mut m = Machine::new(mc)?;
    let mut sets = Vec::new();
    for d in 0..domains {
        let v = m.topology().vcpus_in(d)[0];
        sets.extend(monitor_sets(&mut m, v, &p.offsets, evset_config_for(g.replacement), mix(seed, d as u64))?);
    }
    let t0 = crate::tenant::to_ms(m.now());
    for t in tenants {
        let mut t = t.clone();
        t.start_ms += t0;
        t.stop_ms = t.stop_ms.map(|s| s + t0);
        m.add_tenant(t)?;
    }
    let n = sets.len();
    let mut mon = ContentionMonitor::new(&m, cfg.clone(), sets)?;
    let reports = mon.run(&mut m, cycles)?;
    let mean = reports.iter().map(CycleReport::evicted_percent).sum::<f64>() / reports.len().max(1) as f64;
    let mut a = Artifacts::new();
    a.insert("sets.csv".into(), vscan::sets_csv(&reports, &mon));
    a.insert("aggregates.csv".into(), vscan::aggregates_csv(&reports));
    if p.dump_state {
        a.insert("cache_state.csv".into(), m.cache().dump_csv());
    }
    Ok((
        MonitorOutcome {
            sets: n,
            cycles: reports.len(),
            mean_evicted_percent: mean,
            final_window_ms: mon.window_ms(),
            by_domain: reports.last().map(|r| r.aggregates.by_domain.clone()).unwrap_or_default(),
        },
        a,
    ))
}
