//! Logical clock, co-tenant traffic generators, vCPU topology and the
//! latency-matrix topology inference.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::addr::{LINES_PER_PAGE, LINE_SHIFT, PAGE_SHIFT};
use crate::cache::{ActorId, CacheError, CacheState};
use crate::geometry::{CacheGeometry, Level};

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;

/// Milliseconds to logical nanoseconds.
pub fn ms(x: f64) -> u64 {
    (x * NS_PER_MS as f64).round().max(0.0) as u64
}

pub fn to_ms(ns: u64) -> f64 {
    ns as f64 / NS_PER_MS as f64
}

/// Base of host tenant `j`'s private physical region.
pub fn tenant_region_base(j: usize) -> u64 {
    (1u64 << 40) + ((j as u64) << 34)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LogicalClock {
    now: u64,
}

impl LogicalClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn now_ms(&self) -> f64 {
        to_ms(self.now)
    }

    pub fn advance_to(&mut self, t: u64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn advance_by(&mut self, dt: u64) {
        self.now += dt;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TenantKind {
    /// Sequential strided sweep over a large region.
    Polluter,
    /// Sweep restricted to pages of the target colors.
    Poisoner,
    Idle,
    /// Uniformly random lines over the region.
    Noise,
    /// Guest-side sequential file reader (driven by the page-cache policy).
    FileScan,
    /// Guest-side loop over a fixed working set (driven by the page-cache policy).
    ReuseLoop,
}

impl FromStr for TenantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "polluter" => Ok(TenantKind::Polluter),
            "poisoner" => Ok(TenantKind::Poisoner),
            "idle" => Ok(TenantKind::Idle),
            "noise" => Ok(TenantKind::Noise),
            "file-scan" => Ok(TenantKind::FileScan),
            "reuse-loop" => Ok(TenantKind::ReuseLoop),
            other => Err(format!("unknown tenant kind `{other}`")),
        }
    }
}

impl TenantKind {
    pub fn is_host(self) -> bool {
        matches!(
            self,
            TenantKind::Polluter | TenantKind::Poisoner | TenantKind::Idle | TenantKind::Noise
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantWorkload {
    pub kind: TenantKind,
    /// Poisoner targets, as colors at `color_level`.
    #[serde(default)]
    pub colors: Option<Vec<u32>>,
    #[serde(default = "default_color_level")]
    pub color_level: Level,
    #[serde(default = "default_region")]
    pub region_bytes: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    /// Accesses per millisecond.
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default)]
    pub stop_ms: Option<f64>,
    #[serde(default)]
    pub domain: usize,
}

fn default_color_level() -> Level {
    Level::L2
}

fn default_region() -> u64 {
    64 << 20
}

fn default_stride() -> u64 {
    64
}

impl TenantWorkload {
    pub fn new(kind: TenantKind, rate: f64) -> Self {
        Self {
            kind,
            colors: None,
            color_level: Level::L2,
            region_bytes: default_region(),
            stride: default_stride(),
            rate,
            start_ms: 0.0,
            stop_ms: None,
            domain: 0,
        }
    }

    pub fn polluter(rate: f64) -> Self {
        Self::new(TenantKind::Polluter, rate)
    }

    pub fn poisoner(colors: Vec<u32>, rate: f64) -> Self {
        Self {
            colors: Some(colors),
            ..Self::new(TenantKind::Poisoner, rate)
        }
    }

    pub fn noise(rate: f64) -> Self {
        Self::new(TenantKind::Noise, rate)
    }

    pub fn idle() -> Self {
        Self::new(TenantKind::Idle, 0.0)
    }

    pub fn in_domain(mut self, domain: usize) -> Self {
        self.domain = domain;
        self
    }

    pub fn between(mut self, start_ms: f64, stop_ms: Option<f64>) -> Self {
        self.start_ms = start_ms;
        self.stop_ms = stop_ms;
        self
    }

    /// Rate that produces about `per_set` evictions in every LLC set of one
    /// domain per `window_ms` of waiting.
    pub fn background_rate(geometry: &CacheGeometry, per_set: f64, window_ms: f64) -> f64 {
        per_set * (geometry.llc_sets * geometry.slices) as f64 / window_ms
    }
}

/// One applied tenant access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TenantEvent {
    pub time: u64,
    pub actor: ActorId,
    pub hpa: u64,
}

#[derive(Debug, Clone)]
struct TenantState {
    workload: TenantWorkload,
    actor: ActorId,
    base: u64,
    index: u64,
    rng: ChaCha8Rng,
    eligible: Vec<u64>,
}

impl TenantState {
    fn start(&self) -> u64 {
        ms(self.workload.start_ms)
    }

    /// Time of event `i`: the `i`-th access lands at ⌈(i+1)/rate⌉ - 1 ns
    /// after start, so exactly ⌊rate·t⌋ land in any prefix of length t.
    fn event_time(&self, i: u64) -> u64 {
        let r = self.workload.rate;
        self.start() + ((i + 1) as f64 * NS_PER_MS as f64 / r).ceil() as u64 - 1
    }

    fn active_at(&self, t: u64) -> bool {
        self.workload.stop_ms.is_none_or(|s| t < ms(s))
    }

    fn address(&mut self, i: u64) -> u64 {
        let w = &self.workload;
        let region = w.region_bytes.max(64);
        match w.kind {
            TenantKind::Polluter => self.base + (i * w.stride.max(64)) % region,
            TenantKind::Noise => {
                let line = self.rng.gen_range(0..region >> LINE_SHIFT);
                self.base + (line << LINE_SHIFT)
            }
            TenantKind::Poisoner => {
                let per_page = LINES_PER_PAGE;
                let page = self.eligible[((i / per_page) % self.eligible.len() as u64) as usize];
                (page << PAGE_SHIFT) + ((i % per_page) << LINE_SHIFT)
            }
            _ => unreachable!("guest and idle tenants issue no host accesses"),
        }
    }
}

/// Merges all host tenants' access streams in (time, actor, sequence) order.
#[derive(Debug, Clone)]
pub struct TenantRunner {
    tenants: Vec<TenantState>,
    heap: BinaryHeap<Reverse<(u64, ActorId, u64, usize)>>,
    now: u64,
    log: Option<Vec<TenantEvent>>,
    applied: u64,
}

impl TenantRunner {
    pub fn new() -> Self {
        Self {
            tenants: Vec::new(),
            heap: BinaryHeap::new(),
            now: 0,
            log: None,
            applied: 0,
        }
    }

    /// Register a host tenant. Guest-side kinds and zero-rate tenants are
    /// accepted but never scheduled.
    pub fn add(
        &mut self,
        workload: TenantWorkload,
        cache: &mut CacheState,
        geometry: &CacheGeometry,
        seed: u64,
    ) -> Result<ActorId, CacheError> {
        let actor = cache.register_actor(None, workload.domain)?;
        let j = self.tenants.len();
        let base = tenant_region_base(j);
        let mut eligible = Vec::new();
        if workload.kind == TenantKind::Poisoner {
            let colors = workload.colors.clone().unwrap_or_default();
            let first = base >> PAGE_SHIFT;
            let pages = (workload.region_bytes >> PAGE_SHIFT).max(1);
            eligible = (first..first + pages)
                .filter(|&p| colors.contains(&geometry.color_of(workload.color_level, p << PAGE_SHIFT)))
                .collect();
        }
        let state = TenantState {
            actor,
            base,
            index: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ ((j as u64 + 1) << 32)),
            eligible,
            workload,
        };
        self.tenants.push(state);
        self.schedule(j);
        Ok(actor)
    }

    fn schedulable(t: &TenantState) -> bool {
        t.workload.kind.is_host()
            && t.workload.kind != TenantKind::Idle
            && t.workload.rate > 0.0
            && (t.workload.kind != TenantKind::Poisoner || !t.eligible.is_empty())
    }

    fn schedule(&mut self, j: usize) {
        let t = &self.tenants[j];
        if !Self::schedulable(t) {
            return;
        }
        let time = t.event_time(t.index);
        if t.active_at(time) {
            self.heap.push(Reverse((time, t.actor, t.index, j)));
        }
    }

    pub fn record_events(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<TenantEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.0)
    }

    pub fn actors(&self) -> Vec<ActorId> {
        self.tenants.iter().map(|t| t.actor).collect()
    }

    pub fn workloads(&self) -> impl Iterator<Item = &TenantWorkload> {
        self.tenants.iter().map(|t| &t.workload)
    }

    /// Apply every access in `[now, until)`.
    pub fn step(&mut self, cache: &mut CacheState, until: u64) -> Result<u64, CacheError> {
        let mut n = 0;
        while let Some(&Reverse((time, actor, _, j))) = self.heap.peek() {
            if time >= until {
                break;
            }
            self.heap.pop();
            let t = &mut self.tenants[j];
            let hpa = t.address(t.index);
            t.index += 1;
            cache.access_llc(hpa, actor)?;
            if let Some(log) = self.log.as_mut() {
                log.push(TenantEvent { time, actor, hpa });
            }
            n += 1;
            self.schedule(j);
        }
        self.applied += n;
        self.now = self.now.max(until);
        Ok(n)
    }

    /// Drop all pending accesses before `t` without applying them.
    pub fn skip_to(&mut self, t: u64) {
        if t <= self.now {
            return;
        }
        self.heap.clear();
        for j in 0..self.tenants.len() {
            let s = &mut self.tenants[j];
            if Self::schedulable(s) && t > s.start() {
                let elapsed = (t - s.start()) as f64 / NS_PER_MS as f64;
                let mut i = (s.workload.rate * elapsed).floor().max(0.0) as u64;
                while i > 0 && s.event_time(i - 1) >= t {
                    i -= 1;
                }
                while s.event_time(i) < t {
                    i += 1;
                }
                s.index = i;
            }
            self.schedule(j);
        }
        self.now = t;
    }
}

impl Default for TenantRunner {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("latency matrix must be square and non-empty")]
    NotSquare,
    #[error("latency matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("no clear gap between intra- and cross-domain latencies")]
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTopology {
    pub vcpu_domain: Vec<usize>,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// vCPUs 0..k in domain 0, k..2k in domain 1, ...
    Blocked,
    /// vCPU i in domain i mod d.
    Interleaved,
}

impl VTopology {
    pub fn new(vcpus: usize, domains: usize, layout: Layout) -> Self {
        let domains = domains.max(1);
        let per = vcpus.div_ceil(domains).max(1);
        let vcpu_domain = (0..vcpus)
            .map(|i| match layout {
                Layout::Blocked => (i / per).min(domains - 1),
                Layout::Interleaved => i % domains,
            })
            .collect();
        Self {
            vcpu_domain,
            visible: true,
        }
    }

    pub fn vcpus(&self) -> usize {
        self.vcpu_domain.len()
    }

    pub fn domains(&self) -> usize {
        self.vcpu_domain.iter().map(|d| d + 1).max().unwrap_or(0)
    }

    pub fn domain_of(&self, vcpu: usize) -> usize {
        self.vcpu_domain[vcpu]
    }

    pub fn vcpus_in(&self, domain: usize) -> Vec<usize> {
        (0..self.vcpus()).filter(|&v| self.vcpu_domain[v] == domain).collect()
    }

    /// Same partition up to relabeling.
    pub fn same_partition(&self, other: &VTopology) -> bool {
        let n = self.vcpus();
        n == other.vcpus()
            && (0..n).all(|i| {
                (0..n).all(|j| {
                    (self.vcpu_domain[i] == self.vcpu_domain[j])
                        == (other.vcpu_domain[i] == other.vcpu_domain[j])
                })
            })
    }
}

/// Pairwise transfer latencies for a topology: `intra` within a domain,
/// `cross` across, plus Gaussian noise.
pub fn latency_matrix(topo: &VTopology, intra: f64, cross: f64, sigma: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = topo.vcpus();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let base = if topo.domain_of(i) == topo.domain_of(j) {
                intra
            } else {
                cross
            };
            let v = if sigma > 0.0 { base + noise.sample(rng) } else { base };
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Single-link clustering of vCPUs with the threshold placed in the middle
/// of the largest gap between sorted off-diagonal latencies.
pub fn infer_topology(matrix: &[Vec<f64>]) -> Result<VTopology, TopologyError> {
    let n = matrix.len();
    if n == 0 || matrix.iter().any(|r| r.len() != n) {
        return Err(TopologyError::NotSquare);
    }
    let mut values = Vec::with_capacity(n * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (matrix[i][j], matrix[j][i]);
            if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                return Err(TopologyError::Asymmetric(i, j));
            }
            values.push(a);
        }
    }
    if values.is_empty() {
        return Ok(VTopology {
            vcpu_domain: vec![0; n],
            visible: false,
        });
    }
    values.sort_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let spread = hi - lo;
    if spread <= 0.25 * lo.abs() {
        return Ok(VTopology {
            vcpu_domain: vec![0; n],
            visible: false,
        });
    }
    let (gap, at) = values
        .windows(2)
        .enumerate()
        .map(|(i, w)| (w[1] - w[0], i))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least two values");
    if gap < 0.3 * spread {
        return Err(TopologyError::Ambiguous);
    }
    let threshold = (values[at] + values[at + 1]) / 2.0;

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if matrix[i][j] < threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut vcpu_domain = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        vcpu_domain.push(label[r]);
    }
    Ok(VTopology {
        vcpu_domain,
        visible: false,
    })
}

/// Cross-core pull that leaves the line LLC-resident. Only works between
/// two distinct vCPUs of one domain; otherwise nothing is installed and
/// `false` comes back.
pub fn shared_pull(
    cache: &mut CacheState,
    topo: &VTopology,
    hpa: u64,
    helper_vcpu: usize,
    owner_vcpu: usize,
    helper_actor: ActorId,
) -> Result<bool, CacheError> {
    if helper_vcpu == owner_vcpu
        || helper_vcpu >= topo.vcpus()
        || owner_vcpu >= topo.vcpus()
        || topo.domain_of(helper_vcpu) != topo.domain_of(owner_vcpu)
    {
        return Ok(false);
    }
    cache.access_llc(hpa, helper_actor)?;
    Ok(true)
}
