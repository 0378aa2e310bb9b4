//! Windowed Prime+Probe contention monitoring over representative LLC sets.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evset::{EvictionSet, EvsetError};
use crate::machine::Machine;
use crate::tenant::{ms, to_ms};
use crate::timing::LatencyClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub interval_ms: f64,
    pub window_ms: f64,
    pub window_min_ms: f64,
    pub window_max_ms: f64,
    pub shrink_ms: f64,
    /// Sets built per (color, offset) partition.
    pub f: usize,
    pub ewma_alpha: f64,
    /// Passes over each set while priming.
    pub prime_passes: usize,
    /// Worker pairs sharing the prime and probe work.
    pub workers: usize,
    /// Share of sets that must be fully evicted to shrink the window.
    pub full_threshold: f64,
    /// Disable window adjustment (fixed-window sweeps).
    pub fixed_window: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            interval_ms: 1000.0,
            window_ms: 7.0,
            window_min_ms: 1.0,
            window_max_ms: 7.0,
            shrink_ms: 1.0,
            f: 4,
            ewma_alpha: 0.3,
            prime_passes: 2,
            workers: 1,
            full_threshold: 1.0,
            fixed_window: false,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("window {window} ms outside [{min}, {max}]")]
    Window { window: f64, min: f64, max: f64 },
    #[error("ewma alpha {0} outside (0, 1]")]
    Alpha(f64),
    #[error("domain {0} has no vCPU pair to monitor from")]
    NoPair(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.window_min_ms > 0.0 && self.window_min_ms <= self.window_ms && self.window_ms <= self.window_max_ms) {
            return Err(MonitorError::Window {
                window: self.window_ms,
                min: self.window_min_ms,
                max: self.window_max_ms,
            });
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(MonitorError::Alpha(self.ewma_alpha));
        }
        if self.interval_ms <= 0.0 {
            return Err(MonitorError::NonPositive("interval_ms"));
        }
        if self.f == 0 {
            return Err(MonitorError::NonPositive("f"));
        }
        if self.workers == 0 {
            return Err(MonitorError::NonPositive("workers"));
        }
        Ok(())
    }
}

pub fn ewma_update(ewma: f64, raw: f64, alpha: f64) -> f64 {
    alpha * raw + (1.0 - alpha) * ewma
}

/// Modal size of the given minimal sets.
pub fn probe_associativity(sets: &[EvictionSet]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in sets.iter().filter(|s| s.minimal && !s.is_empty()) {
        *counts.entry(s.len()).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(size, n)| (n, std::cmp::Reverse(size)))
        .map(|(size, _)| size)
        .ok_or_else(|| EvsetError::NoSets.into())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitoredSet {
    pub id: usize,
    pub set: EvictionSet,
    pub color: Option<u32>,
    pub domain: usize,
    pub ewma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetObservation {
    pub id: usize,
    pub evicted: usize,
    pub unknown: usize,
    pub size: usize,
    pub raw_rate: f64,
    pub ewma: f64,
}

impl SetObservation {
    pub fn fully_evicted(&self) -> bool {
        self.size > self.unknown && self.evicted == self.size - self.unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub by_domain: BTreeMap<usize, f64>,
    pub by_color: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub t_ms: f64,
    pub window_ms: f64,
    pub prime_ms: f64,
    pub probe_ms: f64,
    pub window_violated: bool,
    pub sets: Vec<SetObservation>,
    pub aggregates: Aggregates,
    pub next_window_ms: f64,
}

impl CycleReport {
    pub fn total_evicted(&self) -> usize {
        self.sets.iter().map(|s| s.evicted).sum()
    }

    /// Evicted lines as a share of all known lines, in percent.
    pub fn evicted_percent(&self) -> f64 {
        let known: usize = self.sets.iter().map(|s| s.size - s.unknown).sum();
        if known == 0 {
            0.0
        } else {
            self.total_evicted() as f64 * 100.0 / known as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pair {
    vcpu: usize,
    helper: Option<usize>,
}

const HISTORY: usize = 64;

#[derive(Debug, Clone)]
pub struct ContentionMonitor {
    cfg: MonitorConfig,
    sets: Vec<MonitoredSet>,
    window_ms: f64,
    pairs: BTreeMap<usize, Pair>,
    history: VecDeque<Aggregates>,
    cycles: u64,
}

impl ContentionMonitor {
    pub fn new(m: &Machine, cfg: MonitorConfig, sets: Vec<EvictionSet>) -> Result<Self> {
        cfg.validate().map_err(monitor_err)?;
        let mut pairs = BTreeMap::new();
        for s in &sets {
            if pairs.contains_key(&s.domain) {
                continue;
            }
            let vcpu = *m
                .topology()
                .vcpus_in(s.domain)
                .first()
                .ok_or_else(|| monitor_err(MonitorError::NoPair(s.domain)))?;
            pairs.insert(
                s.domain,
                Pair {
                    vcpu,
                    helper: m.helper_for(vcpu),
                },
            );
        }
        let sets = sets
            .into_iter()
            .enumerate()
            .map(|(id, set)| MonitoredSet {
                id,
                color: set.color,
                domain: set.domain,
                set,
                ewma: None,
            })
            .collect();
        Ok(Self {
            window_ms: cfg.window_ms,
            cfg,
            sets,
            pairs,
            history: VecDeque::new(),
            cycles: 0,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn window_ms(&self) -> f64 {
        self.window_ms
    }

    pub fn set_window_ms(&mut self, w: f64) {
        self.window_ms = w;
    }

    pub fn sets(&self) -> &[MonitoredSet] {
        &self.sets
    }

    pub fn history(&self) -> impl Iterator<Item = &Aggregates> {
        self.history.iter()
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    fn shares(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cfg.workers];
        for (i, s) in self.sets.iter().enumerate() {
            out[i % self.cfg.workers].push(s.id);
        }
        out
    }

    /// Fill every monitored set, spread over the worker pairs; returns the
    /// longest worker's time in ns.
    pub fn prime(&self, m: &mut Machine) -> Result<u64> {
        let mut worst = 0;
        for share in self.shares() {
            let ((), dt) = m.detached(|m| {
                for _ in 0..self.cfg.prime_passes.max(1) {
                    for &id in &share {
                        let s = &self.sets[id];
                        let p = self.pairs[&s.domain];
                        m.batch_pull(p.vcpu, p.helper, &s.set.members)?;
                    }
                }
                Ok(())
            })?;
            worst = worst.max(dt);
        }
        m.wait(worst)?;
        Ok(worst)
    }

    /// Re-access each set in reverse prime order; per set (evicted, unknown).
    pub fn probe(&self, m: &mut Machine) -> Result<(Vec<(usize, usize)>, u64)> {
        let mut counts = vec![(0, 0); self.sets.len()];
        let mut worst = 0;
        for share in self.shares() {
            let (part, dt) = m.detached(|m| {
                let mut part = Vec::with_capacity(share.len());
                for &id in &share {
                    let s = &self.sets[id];
                    let p = self.pairs[&s.domain];
                    if !m.timer(p.vcpu).is_warm(m.now()) {
                        m.warm_timer(p.vcpu);
                    }
                    let (mut ev, mut unk) = (0, 0);
                    for &g in s.set.members.iter().rev() {
                        match m.timed_pull(p.vcpu, p.helper, g)? {
                            None => unk += 1,
                            Some(LatencyClass::Memory) => ev += 1,
                            Some(_) => {}
                        }
                    }
                    part.push((id, (ev, unk)));
                }
                Ok(part)
            })?;
            for (id, c) in part {
                counts[id] = c;
            }
            worst = worst.max(dt);
        }
        m.wait(worst)?;
        Ok((counts, worst))
    }

    /// prime → wait out the window → probe, then update rates and window.
    pub fn cycle(&mut self, m: &mut Machine) -> Result<CycleReport> {
        self.cycle_with(m, |_| Ok(()))
    }

    /// As [`cycle`](Self::cycle), running `between` after the wait.
    pub fn cycle_with(&mut self, m: &mut Machine, between: impl FnOnce(&mut Machine) -> Result<()>) -> Result<CycleReport> {
        let window = self.window_ms;
        let start = m.now();
        let prime_ns = self.prime(m)?;
        let violated = to_ms(prime_ns) > window;
        m.wait_until((start + ms(window)).max(m.now()))?;
        between(m)?;
        let (counts, probe_ns) = self.probe(m)?;
        let alpha = self.cfg.ewma_alpha;
        let mut obs = Vec::with_capacity(self.sets.len());
        for (s, &(evicted, unknown)) in self.sets.iter_mut().zip(&counts) {
            let size = s.set.len();
            let known = size - unknown;
            let raw = if known == 0 {
                0.0
            } else {
                evicted as f64 * 100.0 / known as f64 / window
            };
            let e = match s.ewma {
                None => raw,
                Some(prev) => ewma_update(prev, raw, alpha),
            };
            s.ewma = Some(e);
            obs.push(SetObservation {
                id: s.id,
                evicted,
                unknown,
                size,
                raw_rate: raw,
                ewma: e,
            });
        }
        let next = self.adjust_window(&obs);
        let aggregates = self.aggregates();
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(aggregates.clone());
        self.cycles += 1;
        Ok(CycleReport {
            t_ms: to_ms(start),
            window_ms: window,
            prime_ms: to_ms(prime_ns),
            probe_ms: to_ms(probe_ns),
            window_violated: violated,
            sets: obs,
            aggregates,
            next_window_ms: next,
        })
    }

    /// Shrink on full eviction, reset when nothing was evicted.
    pub fn adjust_window(&mut self, obs: &[SetObservation]) -> f64 {
        if self.cfg.fixed_window || obs.is_empty() {
            return self.window_ms;
        }
        let full = obs.iter().filter(|o| o.fully_evicted()).count();
        if full as f64 >= self.cfg.full_threshold * obs.len() as f64 {
            self.window_ms = (self.window_ms - self.cfg.shrink_ms).max(self.cfg.window_min_ms);
        } else if obs.iter().all(|o| o.evicted == 0) {
            self.window_ms = self.cfg.window_ms;
        }
        self.window_ms
    }

    /// Mean member EWMA per domain and per color.
    pub fn aggregates(&self) -> Aggregates {
        let mut d: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut c: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for s in &self.sets {
            let Some(e) = s.ewma else { continue };
            let x = d.entry(s.domain).or_default();
            x.0 += e;
            x.1 += 1;
            if let Some(col) = s.color {
                let x = c.entry(col).or_default();
                x.0 += e;
                x.1 += 1;
            }
        }
        Aggregates {
            by_domain: d.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            by_color: c.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }

    /// Run cycles at the configured interval. Co-tenant traffic between
    /// cycles is skipped rather than replayed: each cycle re-primes anyway.
    pub fn run(&mut self, m: &mut Machine, cycles: usize) -> Result<Vec<CycleReport>> {
        let mut out = Vec::with_capacity(cycles);
        let interval = ms(self.cfg.interval_ms);
        for _ in 0..cycles {
            let start = m.now();
            out.push(self.cycle(m)?);
            m.skip_to((start + interval).max(m.now()))?;
        }
        Ok(out)
    }
}

fn monitor_err(e: MonitorError) -> Error {
    Error::Invariant {
        module: "vscan",
        message: e.to_string(),
    }
}

pub fn sets_csv(reports: &[CycleReport], monitor: &ContentionMonitor) -> String {
    let mut s = String::from("t_ms,set_id,color,domain,raw_rate,ewma\n");
    for r in reports {
        for o in &r.sets {
            let ms = &monitor.sets[o.id];
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                r.t_ms,
                o.id,
                ms.color.map_or(String::new(), |c| c.to_string()),
                ms.domain,
                o.raw_rate,
                o.ewma
            );
        }
    }
    s
}

pub fn aggregates_csv(reports: &[CycleReport]) -> String {
    let mut s = String::from("t_ms,window_ms,kind,key,ewma\n");
    for r in reports {
        for (d, v) in &r.aggregates.by_domain {
            let _ = writeln!(s, "{},{},domain,{d},{v:.6}", r.t_ms, r.window_ms);
        }
        for (c, v) in &r.aggregates.by_color {
            let _ = writeln!(s, "{},{},color,{c},{v:.6}", r.t_ms, r.window_ms);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evset::{build_all_at_offset, pool_size, Ctx, EvsetConfig};
    use crate::geometry::{CacheGeometry, Level, Replacement};
    use crate::machine::MachineConfig;
    use crate::mem::{FragmentationProfile, TranslationConfig};
    use crate::tenant::TenantWorkload;

    fn geometry() -> CacheGeometry {
        CacheGeometry {
            l2_ways: 4,
            l2_sets: 64,
            llc_ways: 8,
            llc_sets: 128,
            slices: 4,
            ..CacheGeometry::desk()
        }
    }

    fn setup(g: CacheGeometry, tenants: Vec<TenantWorkload>, seed: u64) -> (Machine, Vec<EvictionSet>) {
        let mut cfg = MachineConfig::new(
            g.clone(),
            TranslationConfig::new(FragmentationProfile::Fragmented { shuffle: 1.0 }, 8192),
            seed,
        );
        cfg.tenants = tenants;
        let mut m = Machine::new(cfg).unwrap();
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::robust(), seed);
        let pages = m.alloc_pages(pool_size(&g, Level::Llc, 3)).unwrap();
        let r = m
            .detached(|m| build_all_at_offset(m, &mut ctx, Level::Llc, 0x200, &pages, None))
            .unwrap()
            .0;
        (m, r.sets)
    }

    #[test]
    fn ewma_closed_form() {
        let mut e = 0.0;
        for _ in 0..3 {
            e = ewma_update(e, 10.0, 0.3);
        }
        assert!((e - 10.0 * (1.0 - 0.7f64.powi(3))).abs() < 1e-12);
        assert_eq!(ewma_update(4.0, 9.0, 1.0), 9.0);
    }

    #[test]
    fn config_validation() {
        assert!(MonitorConfig::default().validate().is_ok());
        let bad = MonitorConfig {
            window_ms: 9.0,
            ..MonitorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MonitorConfig {
            ewma_alpha: 0.0,
            ..MonitorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn associativity_is_modal_size() {
        let (_, sets) = setup(geometry(), vec![], 1);
        assert_eq!(probe_associativity(&sets).unwrap(), 8);
        assert!(probe_associativity(&[]).is_err());
    }

    #[test]
    fn quiescent_cycles_see_nothing() {
        for p in [Replacement::Lru, Replacement::Plru] {
            let (mut m, sets) = setup(geometry().with_replacement(p), vec![], 2);
            let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets).unwrap();
            for r in mon.run(&mut m, 3).unwrap() {
                assert_eq!(r.total_evicted(), 0, "{p}");
                assert!(!r.window_violated);
            }
            assert_eq!(mon.window_ms(), 7.0);
        }
    }

    #[test]
    fn flushed_lines_are_counted_exactly() {
        let (mut m, sets) = setup(geometry(), vec![], 3);
        let one = vec![sets[0].clone()];
        let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), one.clone()).unwrap();
        for k in [2, 4, 6, 8] {
            let members = one[0].members.clone();
            let r = mon
                .cycle_with(&mut m, |m| {
                    for &g in &members[..k] {
                        m.flush(g)?;
                    }
                    Ok(())
                })
                .unwrap();
            assert_eq!(r.sets[0].evicted, k);
        }
    }

    #[test]
    fn full_eviction_shrinks_then_quiet_resets() {
        let (mut m, sets) = setup(geometry(), vec![], 4);
        let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets).unwrap();
        let all: Vec<Vec<u64>> = mon.sets().iter().map(|s| s.set.members.clone()).collect();
        for expect in [6.0, 5.0, 4.0] {
            let r = mon
                .cycle_with(&mut m, |m| {
                    for g in all.iter().flatten() {
                        m.flush(*g)?;
                    }
                    Ok(())
                })
                .unwrap();
            assert_eq!(r.next_window_ms, expect);
        }
        let r = mon.cycle(&mut m).unwrap();
        assert_eq!(r.window_ms, 4.0);
        assert_eq!(r.next_window_ms, 7.0);
    }

    #[test]
    fn background_noise_gives_a_few_evictions_per_set() {
        let g = geometry();
        let rate = TenantWorkload::background_rate(&g, 1.5, 7.0);
        let (mut m, sets) = setup(g, vec![TenantWorkload::noise(rate)], 5);
        let n = sets.len() as f64;
        let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets).unwrap();
        let rs = mon.run(&mut m, 4).unwrap();
        let per_set = rs.iter().map(|r| r.total_evicted() as f64).sum::<f64>() / (4.0 * n);
        assert!((1.0..=2.0).contains(&per_set), "{per_set}");
    }

    #[test]
    fn aggregates_are_member_means() {
        let (mut m, mut sets) = setup(geometry(), vec![TenantWorkload::polluter(2000.0)], 6);
        for (i, s) in sets.iter_mut().enumerate() {
            s.color = Some((i % 3) as u32);
        }
        let mut mon = ContentionMonitor::new(&m, MonitorConfig::default(), sets).unwrap();
        mon.run(&mut m, 2).unwrap();
        let a = mon.aggregates();
        for c in 0..3u32 {
            let xs: Vec<f64> = mon
                .sets()
                .iter()
                .filter(|s| s.color == Some(c))
                .map(|s| s.ewma.unwrap())
                .collect();
            assert_eq!(a.by_color[&c], xs.iter().sum::<f64>() / xs.len() as f64);
        }
        assert!(a.by_domain[&0] > 0.0);
    }

    #[test]
    fn more_workers_prime_faster() {
        let (mut m, sets) = setup(geometry(), vec![], 7);
        let one = ContentionMonitor::new(&m, MonitorConfig::default(), sets.clone()).unwrap();
        let t1 = one.prime(&mut m).unwrap();
        let cfg = MonitorConfig {
            workers: 8,
            ..MonitorConfig::default()
        };
        let eight = ContentionMonitor::new(&m, cfg, sets).unwrap();
        let t8 = eight.prime(&mut m).unwrap();
        assert!(t8 * 6 < t1, "{t1} {t8}");
        let none = ContentionMonitor::new(&m, MonitorConfig::default(), vec![]).unwrap();
        assert_eq!(none.prime(&mut m).unwrap(), 0);
    }
}
