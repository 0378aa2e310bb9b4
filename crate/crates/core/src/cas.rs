//! Contention-aware task placement over LLC domains: tiering, idle-vCPU
//! selection, restricted balancing and tier hysteresis, plus a small
//! interval-driven scheduler simulation to exercise them.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tenant::{Layout, VTopology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasConfig {
    pub tiers: usize,
    /// Utilization at which a better-tier domain may shed work to a worse one.
    pub saturation: f64,
    /// Consecutive same-direction trends needed to move a tier.
    pub hysteresis: usize,
    /// Rate gaps below this never separate tiers.
    pub min_gap: f64,
}

impl Default for CasConfig {
    fn default() -> Self {
        Self {
            tiers: 2,
            saturation: 0.9,
            hysteresis: 3,
            min_gap: 0.5,
        }
    }
}

/// Tier per domain, 0 least contended. Sorted rates are cut at the largest
/// gaps (at most `tiers - 1` cuts, each at least `min_gap`); equal rates
/// always share a tier.
pub fn tier_domains(rates: &[f64], tiers: usize, min_gap: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)));
    let mut gaps: Vec<(f64, usize)> = order
        .windows(2)
        .enumerate()
        .map(|(i, w)| (rates[w[1]] - rates[w[0]], i + 1))
        .filter(|&(g, _)| g > 0.0 && g >= min_gap)
        .collect();
    gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cuts: Vec<usize> = gaps
        .into_iter()
        .take(tiers.saturating_sub(1))
        .map(|(_, at)| at)
        .collect();
    cuts.sort_unstable();
    let mut out = vec![0; rates.len()];
    for (pos, &d) in order.iter().enumerate() {
        out[d] = cuts.iter().filter(|&&c| c <= pos).count();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Trend {
    Up,
    Down,
    Flat,
}

/// Per-domain trend memory gating tier moves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hysteresis {
    last: Option<f64>,
    trends: VecDeque<Trend>,
    len: usize,
}

impl Hysteresis {
    pub fn new(len: usize) -> Self {
        Self {
            last: None,
            trends: VecDeque::new(),
            len: len.max(1),
        }
    }

    pub fn observe(&mut self, rate: f64) {
        if let Some(prev) = self.last {
            let t = if rate > prev {
                Trend::Up
            } else if rate < prev {
                Trend::Down
            } else {
                Trend::Flat
            };
            if self.trends.len() == self.len {
                self.trends.pop_front();
            }
            self.trends.push_back(t);
        }
        self.last = Some(rate);
    }

    /// The common direction of the last `len` trends, if they agree.
    pub fn consistent(&self) -> Option<Trend> {
        if self.trends.len() < self.len {
            return None;
        }
        update_tier_hysteresis(self.trends.iter().copied().collect::<Vec<_>>())
    }
}

/// `Some(direction)` when the history is full-length and one-signed.
pub fn update_tier_hysteresis(trends: impl AsRef<[Trend]>) -> Option<Trend> {
    let t = trends.as_ref();
    let first = *t.first()?;
    if first == Trend::Flat || t.len() < 3 || t.iter().any(|&x| x != first) {
        return None;
    }
    Some(first)
}

/// Current tiers with hysteresis applied to changes after the first update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierState {
    pub tiers: Vec<usize>,
    pub rates: Vec<f64>,
    history: Vec<Hysteresis>,
    pub changes: u64,
    bootstrapped: bool,
}

impl TierState {
    pub fn new(domains: usize, hysteresis: usize) -> Self {
        Self {
            tiers: vec![0; domains],
            rates: vec![0.0; domains],
            history: vec![Hysteresis::new(hysteresis); domains],
            changes: 0,
            bootstrapped: false,
        }
    }

    /// Feed one interval's per-domain rates; returns whether any tier moved.
    pub fn update(&mut self, rates: &[f64], cfg: &CasConfig) -> bool {
        for (h, &r) in self.history.iter_mut().zip(rates) {
            h.observe(r);
        }
        self.rates = rates.to_vec();
        let proposed = tier_domains(rates, cfg.tiers, cfg.min_gap);
        if !self.bootstrapped {
            self.bootstrapped = true;
            self.tiers = proposed;
            return false;
        }
        let mut changed = false;
        for d in 0..self.tiers.len() {
            let want = proposed[d];
            let cur = self.tiers[d];
            let ok = match self.history[d].consistent() {
                Some(Trend::Up) => want > cur,
                Some(Trend::Down) => want < cur,
                _ => false,
            };
            if ok {
                self.tiers[d] = want;
                changed = true;
            }
        }
        if changed {
            self.changes += 1;
        }
        changed
    }
}

/// Idle vCPU in the best tier that has one; within it prefer `prev`, then
/// `prev`'s domain, then the lowest id. Nothing idle: stay on `prev`.
pub fn select_cpu(prev: Option<usize>, tiers: &[usize], idle: &[bool], topo: &VTopology) -> usize {
    let best = (0..idle.len())
        .filter(|&v| idle[v])
        .map(|v| tiers[topo.domain_of(v)])
        .min();
    let Some(best) = best else {
        return prev.unwrap_or(0);
    };
    let in_tier = |v: usize| idle[v] && tiers[topo.domain_of(v)] == best;
    if let Some(p) = prev {
        if in_tier(p) {
            return p;
        }
        let pd = topo.domain_of(p);
        if let Some(v) = topo.vcpus_in(pd).into_iter().find(|&v| in_tier(v)) {
            return v;
        }
    }
    (0..idle.len()).find(|&v| in_tier(v)).expect("best tier has an idle vCPU")
}

/// Contention-blind placement: `prev` if idle, else the next idle vCPU
/// after a rotating cursor.
pub fn baseline_select(prev: Option<usize>, idle: &[bool], cursor: &mut usize) -> usize {
    if let Some(p) = prev.filter(|&p| idle[p]) {
        return p;
    }
    let n = idle.len();
    for k in 0..n {
        let v = (*cursor + k) % n;
        if idle[v] {
            *cursor = (v + 1) % n;
            return v;
        }
    }
    prev.unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DomainLoad {
    pub tier: usize,
    pub busy: usize,
    pub vcpus: usize,
}

impl DomainLoad {
    pub fn utilization(&self) -> f64 {
        if self.vcpus == 0 {
            0.0
        } else {
            self.busy as f64 / self.vcpus as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Migration {
    pub from: usize,
    pub to: usize,
}

/// One load-balancing pass: the busiest domain sheds a task to the idlest
/// when their busy counts differ by two or more. When `restricted`, a pull
/// from a better tier into a worse one needs the source saturated.
pub fn balance(domains: &[DomainLoad], saturation: f64, restricted: bool) -> Vec<Migration> {
    let mut out = Vec::new();
    let mut load: Vec<DomainLoad> = domains.to_vec();
    loop {
        let Some(from) = (0..load.len()).max_by_key(|&d| (load[d].busy, std::cmp::Reverse(d))) else {
            break;
        };
        let to = (0..load.len())
            .filter(|&d| load[d].busy < load[d].vcpus)
            .min_by_key(|&d| (load[d].busy, d));
        let Some(to) = to else { break };
        if from == to || load[from].busy < load[to].busy + 2 {
            break;
        }
        if restricted && load[from].tier < load[to].tier && load[from].utilization() < saturation {
            break;
        }
        load[from].busy -= 1;
        load[to].busy += 1;
        out.push(Migration { from, to });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedPolicy {
    Cas,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedConfig {
    pub vcpus: usize,
    pub domains: usize,
    /// Always-runnable cache-sensitive tasks.
    pub sensitive: usize,
    /// Insensitive tasks that sleep and wake at random.
    pub churn: usize,
    pub churn_prob: f64,
    pub seed: u64,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            vcpus: 16,
            domains: 2,
            sensitive: 4,
            churn: 6,
            churn_prob: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub interval: usize,
    pub task: usize,
    pub vcpu: usize,
    pub domain: usize,
    pub tier: usize,
    pub sensitive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedReport {
    pub policy: SchedPolicy,
    pub placements: Vec<Placement>,
    /// Per domain, share of sensitive-task intervals spent there.
    pub sensitive_residency: Vec<f64>,
    pub tier_changes: u64,
    pub migrations: usize,
    /// Intervals in which a runnable task found no vCPU of its own.
    pub starved: usize,
}

impl SchedReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("interval,task,domain,tier\n");
        for p in &self.placements {
            let _ = writeln!(s, "{},{},{},{}", p.interval, p.task, p.domain, p.tier);
        }
        s
    }
}

/// Interval-stepped scheduler. Each interval the rates snapshot updates the
/// tiers, runnable tasks wake and are placed, then one balancing pass runs.
pub struct SchedSim {
    cfg: SchedConfig,
    cas: CasConfig,
    policy: SchedPolicy,
    topo: VTopology,
    tiers: TierState,
    prev: Vec<Option<usize>>,
    cursor: usize,
    rng: ChaCha8Rng,
    interval: usize,
    placements: Vec<Placement>,
    migrations: usize,
    starved: usize,
}

impl SchedSim {
    pub fn new(cfg: SchedConfig, cas: CasConfig, policy: SchedPolicy) -> Self {
        let topo = VTopology::new(cfg.vcpus, cfg.domains, Layout::Blocked);
        let tasks = cfg.sensitive + cfg.churn;
        let prev = (0..tasks).map(|t| Some(t * cfg.vcpus / tasks.max(1))).collect();
        Self {
            tiers: TierState::new(cfg.domains, cas.hysteresis),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            topo,
            prev,
            cursor: 0,
            interval: 0,
            placements: Vec::new(),
            migrations: 0,
            starved: 0,
            cfg,
            cas,
            policy,
        }
    }

    pub fn tiers(&self) -> &TierState {
        &self.tiers
    }

    pub fn topology(&self) -> &VTopology {
        &self.topo
    }

    /// One scheduling interval given per-domain contention rates.
    pub fn step(&mut self, rates: &[f64]) {
        self.tiers.update(rates, &self.cas);
        let tasks = self.cfg.sensitive + self.cfg.churn;
        let mut runnable: Vec<usize> = (0..tasks)
            .filter(|&t| t < self.cfg.sensitive || self.rng.gen_bool(self.cfg.churn_prob))
            .collect();
        runnable.shuffle(&mut self.rng);
        let mut idle = vec![true; self.cfg.vcpus];
        let mut at = vec![usize::MAX; tasks];
        for &t in &runnable {
            let v = match self.policy {
                SchedPolicy::Cas => select_cpu(self.prev[t], &self.tiers.tiers, &idle, &self.topo),
                SchedPolicy::Baseline => baseline_select(self.prev[t], &idle, &mut self.cursor),
            };
            if !idle[v] {
                self.starved += 1;
            }
            idle[v] = false;
            at[t] = v;
        }
        let loads: Vec<DomainLoad> = (0..self.cfg.domains)
            .map(|d| {
                let vs = self.topo.vcpus_in(d);
                DomainLoad {
                    tier: self.tiers.tiers[d],
                    busy: vs.iter().filter(|&&v| !idle[v]).count(),
                    vcpus: vs.len(),
                }
            })
            .collect();
        let restricted = self.policy == SchedPolicy::Cas;
        for mv in balance(&loads, self.cas.saturation, restricted) {
            // Move the highest-numbered task running in the source domain.
            let Some(t) = (0..tasks)
                .rev()
                .find(|&t| at[t] != usize::MAX && self.topo.domain_of(at[t]) == mv.from)
            else {
                continue;
            };
            let Some(v) = self.topo.vcpus_in(mv.to).into_iter().find(|&v| idle[v]) else {
                continue;
            };
            idle[at[t]] = true;
            idle[v] = false;
            at[t] = v;
            self.migrations += 1;
        }
        for &t in &runnable {
            let v = at[t];
            self.prev[t] = Some(v);
            let d = self.topo.domain_of(v);
            self.placements.push(Placement {
                interval: self.interval,
                task: t,
                vcpu: v,
                domain: d,
                tier: self.tiers.tiers[d],
                sensitive: t < self.cfg.sensitive,
            });
        }
        self.interval += 1;
    }

    pub fn report(&self) -> SchedReport {
        let mut per = vec![0usize; self.cfg.domains];
        let mut total = 0;
        for p in self.placements.iter().filter(|p| p.sensitive) {
            per[p.domain] += 1;
            total += 1;
        }
        SchedReport {
            policy: self.policy,
            placements: self.placements.clone(),
            sensitive_residency: per
                .into_iter()
                .map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
                .collect(),
            tier_changes: self.tiers.changes,
            migrations: self.migrations,
            starved: self.starved,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiering_examples() {
        assert_eq!(tier_domains(&[1.0, 10.0], 2, 0.5), vec![0, 1]);
        assert_eq!(tier_domains(&[3.0, 3.0], 2, 0.5), vec![0, 0]);
        assert_eq!(tier_domains(&[1.0, 2.0, 100.0], 2, 0.5), vec![0, 0, 1]);
        assert_eq!(tier_domains(&[100.0, 1.0, 2.0], 3, 0.5), vec![2, 0, 1]);
        assert_eq!(tier_domains(&[1.0, 1.2], 2, 0.5), vec![0, 0]);
        assert_eq!(tier_domains(&[5.0], 2, 0.5), vec![0]);
    }

    #[test]
    fn selection_rules() {
        let topo = VTopology::new(4, 2, Layout::Blocked);
        let tiers = [1, 0];
        let all = [true; 4];
        assert_eq!(select_cpu(None, &tiers, &all, &topo), 2);
        assert_eq!(select_cpu(Some(3), &tiers, &all, &topo), 3);
        // Tier beats affinity.
        assert_eq!(select_cpu(Some(0), &tiers, &all, &topo), 2);
        assert_eq!(select_cpu(Some(0), &tiers, &[true, true, false, false], &topo), 0);
        assert_eq!(select_cpu(Some(1), &tiers, &[false; 4], &topo), 1);
        // Previous domain within the tier.
        assert_eq!(select_cpu(Some(2), &[0, 0], &[true, false, false, true], &topo), 3);
    }

    #[test]
    fn baseline_rotates() {
        let mut c = 0;
        let idle = [true, true, true];
        assert_eq!(baseline_select(Some(2), &idle, &mut c), 2);
        assert_eq!(baseline_select(None, &idle, &mut c), 0);
        assert_eq!(baseline_select(None, &idle, &mut c), 1);
        assert_eq!(baseline_select(Some(0), &[false, false, false], &mut c), 0);
    }

    #[test]
    fn balancing_respects_tiers() {
        let d = |tier, busy| DomainLoad { tier, busy, vcpus: 8 };
        assert!(balance(&[d(0, 4), d(1, 0)], 0.9, true).is_empty());
        assert_eq!(balance(&[d(0, 8), d(1, 0)], 0.9, true), vec![Migration { from: 0, to: 1 }]);
        assert_eq!(balance(&[d(0, 4), d(0, 0)], 0.9, true).len(), 2);
        assert_eq!(balance(&[d(0, 4), d(1, 0)], 0.9, false).len(), 2);
        assert_eq!(balance(&[d(1, 4), d(0, 0)], 0.9, true).len(), 2);
    }

    #[test]
    fn hysteresis_rules() {
        use Trend::*;
        assert_eq!(update_tier_hysteresis([Up, Up, Up]), Some(Up));
        assert_eq!(update_tier_hysteresis([Up, Down, Up]), None);
        assert_eq!(update_tier_hysteresis([Down, Down, Down]), Some(Down));
        assert_eq!(update_tier_hysteresis([Up, Up]), None);
        assert_eq!(update_tier_hysteresis([Flat, Flat, Flat]), None);
    }

    #[test]
    fn oscillation_never_moves_tiers() {
        let cfg = CasConfig::default();
        let mut s = TierState::new(2, 3);
        for i in 0..50 {
            let r = if i % 2 == 0 { [1.0, 10.0] } else { [10.0, 1.0] };
            s.update(&r, &cfg);
        }
        assert_eq!(s.changes, 0);
        let mut s = TierState::new(2, 3);
        s.update(&[1.0, 1.0], &cfg);
        for r in [3.0, 6.0, 9.0] {
            s.update(&[r, 1.0], &cfg);
        }
        assert_eq!(s.tiers, vec![1, 0]);
    }

    #[test]
    fn steering_versus_baseline() {
        let rates = [12.0, 2.0];
        let run = |p| {
            let mut sim = SchedSim::new(SchedConfig::default(), CasConfig::default(), p);
            for _ in 0..200 {
                sim.step(&rates);
            }
            sim.report()
        };
        let cas = run(SchedPolicy::Cas);
        let base = run(SchedPolicy::Baseline);
        assert!(cas.sensitive_residency[0] <= 0.2, "{:?}", cas.sensitive_residency);
        assert!(base.sensitive_residency[0] >= 0.4, "{:?}", base.sensitive_residency);
        assert_eq!(cas.starved, 0);
        assert_eq!(base.starved, 0);
    }
}
