//! The simulated VM: cache hierarchy, translation, timers and co-tenants
//! behind one logical clock. Everything the probing stack does goes
//! through the guest-visible operations here; the `oracle_*` methods are
//! the hypercall analog used only for verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{Address, PAGE_SHIFT};
use crate::cache::{ActorId, CacheState, HitLevel};
use crate::error::Result;
use crate::geometry::{CacheGeometry, Level};
use crate::mem::{MemError, TranslationConfig, TranslationMap};
use crate::tenant::{latency_matrix, LogicalClock, Layout, TenantRunner, TenantWorkload, VTopology};
use crate::timing::{warm_timer, LatencyClass, LatencyModel, Thresholds, TimerState};

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub geometry: CacheGeometry,
    pub latency: LatencyModel,
    pub thresholds: Option<Thresholds>,
    pub translation: TranslationConfig,
    pub vcpus: usize,
    pub domains: usize,
    pub layout: Layout,
    pub tenants: Vec<TenantWorkload>,
    /// Per-access issue slot when accesses overlap in a batch.
    pub issue_cycles: f64,
    /// Penalty for a shared pull that cannot reach the LLC.
    pub pull_stall_cycles: f64,
    pub seed: u64,
}

impl MachineConfig {
    pub fn new(geometry: CacheGeometry, translation: TranslationConfig, seed: u64) -> Self {
        Self {
            geometry,
            latency: LatencyModel::default(),
            thresholds: None,
            translation,
            vcpus: 2,
            domains: 1,
            layout: Layout::Blocked,
            tenants: Vec::new(),
            issue_cycles: 4.0,
            pull_stall_cycles: 3000.0,
            seed,
        }
    }

    pub fn with_vcpus(mut self, vcpus: usize, domains: usize) -> Self {
        self.vcpus = vcpus;
        self.domains = domains;
        self
    }

    pub fn with_tenant(mut self, t: TenantWorkload) -> Self {
        self.tenants.push(t);
        self
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MachineStats {
    pub loads: u64,
    pub pulls: u64,
    pub failed_pulls: u64,
    pub flushes: u64,
    pub outliers: u64,
    pub remaps: u64,
}

#[derive(Debug, Clone)]
pub struct Machine {
    geometry: CacheGeometry,
    latency: LatencyModel,
    thresholds: Thresholds,
    issue_cycles: f64,
    pull_stall_cycles: f64,
    cache: CacheState,
    map: TranslationMap,
    topo: VTopology,
    vcpu_actor: Vec<ActorId>,
    timers: Vec<TimerState>,
    clock: LogicalClock,
    rng: ChaCha8Rng,
    tenants: TenantRunner,
    tenants_frozen: bool,
    next_remap: usize,
    next_page: u64,
    free_pages: Vec<u64>,
    stats: MachineStats,
    seed: u64,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Result<Self> {
        cfg.geometry.validate()?;
        cfg.latency.validate()?;
        let map = cfg.translation.build(cfg.seed)?;
        let vcpus = cfg.vcpus.max(1);
        let topo = VTopology::new(vcpus, cfg.domains.max(1), cfg.layout);
        let mut cache = CacheState::new(cfg.geometry.clone(), topo.vcpu_domain.clone(), cfg.domains.max(1), cfg.seed);
        let vcpu_actor = (0..vcpus)
            .map(|v| cache.register_actor(Some(v), topo.domain_of(v)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut tenants = TenantRunner::new();
        for (j, t) in cfg.tenants.iter().enumerate() {
            tenants.add(t.clone(), &mut cache, &cfg.geometry, cfg.seed.wrapping_add(j as u64 * 7919))?;
        }
        Ok(Self {
            thresholds: cfg.thresholds.unwrap_or_else(|| Thresholds::from_model(&cfg.latency)),
            geometry: cfg.geometry,
            latency: cfg.latency,
            issue_cycles: cfg.issue_cycles,
            pull_stall_cycles: cfg.pull_stall_cycles,
            cache,
            map,
            topo,
            vcpu_actor,
            timers: vec![TimerState::default(); vcpus],
            clock: LogicalClock::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_6368),
            tenants,
            tenants_frozen: false,
            next_remap: 0,
            next_page: 0,
            free_pages: Vec::new(),
            stats: MachineStats::default(),
            seed: cfg.seed,
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn set_thresholds(&mut self, t: Thresholds) {
        self.thresholds = t;
    }

    pub fn topology(&self) -> &VTopology {
        &self.topo
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CacheState {
        &mut self.cache
    }

    pub fn map(&self) -> &TranslationMap {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut TranslationMap {
        &mut self.map
    }

    pub fn tenants(&self) -> &TenantRunner {
        &self.tenants
    }

    pub fn tenants_mut(&mut self) -> &mut TenantRunner {
        &mut self.tenants
    }

    pub fn stats(&self) -> MachineStats {
        self.stats
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn vcpus(&self) -> usize {
        self.vcpu_actor.len()
    }

    pub fn actor_of(&self, vcpu: usize) -> ActorId {
        self.vcpu_actor[vcpu]
    }

    /// Another vCPU sharing `vcpu`'s LLC, if any.
    pub fn helper_for(&self, vcpu: usize) -> Option<usize> {
        let d = self.topo.domain_of(vcpu);
        (0..self.vcpus()).find(|&v| v != vcpu && self.topo.domain_of(v) == d)
    }

    pub fn add_tenant(&mut self, t: TenantWorkload) -> Result<ActorId> {
        let seed = self.seed.wrapping_add(self.tenants.actors().len() as u64 * 7919);
        let geometry = self.geometry.clone();
        let actor = self.tenants.add(t, &mut self.cache, &geometry, seed)?;
        self.tenants.skip_to(self.clock.now());
        Ok(actor)
    }

    /// Register an extra guest actor bound to `vcpu`'s core (a second thread
    /// of work on the same vCPU, e.g. a workload distinct from the prober).
    pub fn add_guest_actor(&mut self, vcpu: usize) -> Result<ActorId> {
        Ok(self.cache.register_actor(Some(vcpu), self.topo.domain_of(vcpu))?)
    }

    // Clock

    /// Apply due remaps and tenant traffic up to the current time.
    pub fn catch_up(&mut self) -> Result<()> {
        let now = self.clock.now();
        while let Some(ev) = self.map.remap_schedule().get(self.next_remap) {
            if crate::tenant::ms(ev.at_ms) > now {
                break;
            }
            let ev = ev.clone();
            self.map.apply_remap(&ev, &mut self.rng)?;
            self.next_remap += 1;
            self.stats.remaps += 1;
        }
        if !self.tenants_frozen && self.tenants.next_event_time().is_some_and(|t| t < now) {
            self.tenants.step(&mut self.cache, now)?;
        }
        Ok(())
    }

    /// Let `dt` ns pass with co-tenants running.
    pub fn wait(&mut self, dt: u64) -> Result<()> {
        self.clock.advance_by(dt);
        self.catch_up()
    }

    pub fn wait_until(&mut self, t: u64) -> Result<()> {
        self.clock.advance_to(t);
        self.catch_up()
    }

    /// Jump the clock without replaying co-tenant traffic in between.
    pub fn skip_to(&mut self, t: u64) -> Result<()> {
        self.clock.advance_to(t);
        self.tenants.skip_to(t);
        self.catch_up()
    }

    /// Run `f` as an independent logical worker: co-tenants are frozen and
    /// the clock is restored afterwards. Returns `f`'s result and elapsed ns.
    pub fn detached<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<(T, u64)> {
        let start = self.clock.now();
        let frozen = std::mem::replace(&mut self.tenants_frozen, true);
        let out = f(self);
        let elapsed = self.clock.now() - start;
        self.clock = LogicalClock::default();
        self.clock.advance_to(start);
        self.tenants_frozen = frozen;
        Ok((out?, elapsed))
    }

    fn cost(&self, cycles: f64) -> u64 {
        self.latency.ns(cycles)
    }

    // Guest memory

    /// Next free guest page (GVA page number).
    pub fn alloc_page(&mut self) -> Result<u64> {
        if let Some(p) = self.free_pages.pop() {
            return Ok(p);
        }
        if self.next_page as usize >= self.map.guest_pages() {
            return Err(MemError::Capacity {
                guest: self.map.guest_pages(),
                host: self.map.host_pages(),
                need: self.next_page + 1,
            }
            .into());
        }
        self.next_page += 1;
        Ok(self.next_page - 1)
    }

    pub fn alloc_pages(&mut self, n: usize) -> Result<Vec<u64>> {
        (0..n).map(|_| self.alloc_page()).collect()
    }

    pub fn free_page(&mut self, page: u64) {
        self.free_pages.push(page);
    }

    pub fn pages_left(&self) -> usize {
        self.map.guest_pages() - self.next_page as usize + self.free_pages.len()
    }

    #[inline]
    fn hpa(&self, gva: u64) -> Result<u64> {
        self.map
            .gva_to_hpa(gva)
            .ok_or_else(|| MemError::Fault(Address::gva(gva)).into())
    }

    // Accesses

    pub fn warm_timer(&mut self, vcpu: usize) {
        let now = self.clock.now();
        let cycles = warm_timer(&mut self.timers[vcpu], now);
        self.clock.advance_by(self.cost(cycles as f64));
    }

    pub fn timer(&self, vcpu: usize) -> &TimerState {
        &self.timers[vcpu]
    }

    fn read(&mut self, vcpu: usize, level: HitLevel) -> (Option<LatencyClass>, f64) {
        let now = self.clock.now();
        let t = &mut self.timers[vcpu];
        t.tick(now);
        t.record_read();
        let warm = t.is_warm(now);
        let lat = self.latency.sample(level, warm, &mut self.rng);
        let class = self.thresholds.classify(lat);
        if class.is_none() {
            self.stats.outliers += 1;
        }
        (class, lat)
    }

    /// Untimed load from `vcpu`.
    pub fn load(&mut self, vcpu: usize, gva: u64) -> Result<HitLevel> {
        self.catch_up()?;
        let hpa = self.hpa(gva)?;
        let r = self.cache.access(hpa, self.vcpu_actor[vcpu], false)?;
        self.stats.loads += 1;
        self.clock.advance_by(self.cost(self.latency.base(r.level)));
        Ok(r.level)
    }

    /// Load as another actor bound to the same core.
    pub fn load_as(&mut self, actor: ActorId, gva: u64, write: bool) -> Result<HitLevel> {
        self.catch_up()?;
        let hpa = self.hpa(gva)?;
        let r = self.cache.access(hpa, actor, write)?;
        self.stats.loads += 1;
        self.clock.advance_by(self.cost(self.latency.base(r.level)));
        Ok(r.level)
    }

    /// Timed load; `None` when the reading is an outlier.
    pub fn timed_load(&mut self, vcpu: usize, gva: u64) -> Result<Option<LatencyClass>> {
        self.catch_up()?;
        let hpa = self.hpa(gva)?;
        let r = self.cache.access(hpa, self.vcpu_actor[vcpu], false)?;
        self.stats.loads += 1;
        let (class, lat) = self.read(vcpu, r.level);
        self.clock.advance_by(self.cost(lat));
        Ok(class)
    }

    /// Loads issued back to back; they overlap, so the batch costs the
    /// slowest access plus one issue slot per access.
    pub fn batch_load(&mut self, vcpu: usize, gvas: &[u64]) -> Result<()> {
        self.catch_up()?;
        let actor = self.vcpu_actor[vcpu];
        let mut worst = 0.0f64;
        for &gva in gvas {
            let hpa = self.hpa(gva)?;
            let r = self.cache.access(hpa, actor, false)?;
            worst = worst.max(self.latency.base(r.level));
        }
        self.stats.loads += gvas.len() as u64;
        self.clock
            .advance_by(self.cost(worst + self.issue_cycles * gvas.len() as f64));
        Ok(())
    }

    fn pull_inner(&mut self, vcpu: usize, helper: Option<usize>, gva: u64) -> Result<(HitLevel, bool)> {
        let hpa = self.hpa(gva)?;
        self.stats.pulls += 1;
        let ok = helper.is_some_and(|h| h != vcpu && self.topo.domain_of(h) == self.topo.domain_of(vcpu));
        if ok {
            let h = helper.expect("checked");
            let r = self.cache.access_llc(hpa, self.vcpu_actor[h])?;
            Ok((r.level, true))
        } else {
            self.stats.failed_pulls += 1;
            let r = self.cache.access(hpa, self.vcpu_actor[vcpu], false)?;
            Ok((r.level, false))
        }
    }

    /// Touch `gva` so that it lands in the LLC of `vcpu`'s domain, using a
    /// helper vCPU on the same LLC. Without a usable helper the line is
    /// loaded privately and the caller stalls; returns whether the pull
    /// reached the LLC.
    pub fn pull(&mut self, vcpu: usize, helper: Option<usize>, gva: u64) -> Result<bool> {
        self.catch_up()?;
        let (level, ok) = self.pull_inner(vcpu, helper, gva)?;
        let mut cycles = self.latency.base(level);
        if !ok {
            cycles += self.pull_stall_cycles;
        }
        self.clock.advance_by(self.cost(cycles));
        Ok(ok)
    }

    /// Pull and time the access: LLC hit versus memory.
    pub fn timed_pull(&mut self, vcpu: usize, helper: Option<usize>, gva: u64) -> Result<Option<LatencyClass>> {
        self.catch_up()?;
        let (level, ok) = self.pull_inner(vcpu, helper, gva)?;
        let (class, lat) = self.read(vcpu, level);
        let mut cycles = lat;
        if !ok {
            cycles += self.pull_stall_cycles;
        }
        self.clock.advance_by(self.cost(cycles));
        Ok(class)
    }

    pub fn batch_pull(&mut self, vcpu: usize, helper: Option<usize>, gvas: &[u64]) -> Result<usize> {
        self.catch_up()?;
        let mut worst = 0.0f64;
        let mut failed = 0;
        for &gva in gvas {
            let (level, ok) = self.pull_inner(vcpu, helper, gva)?;
            worst = worst.max(self.latency.base(level));
            if !ok {
                failed += 1;
            }
        }
        let cycles = worst + self.issue_cycles * gvas.len() as f64 + self.pull_stall_cycles * failed as f64;
        self.clock.advance_by(self.cost(cycles));
        Ok(failed)
    }

    /// clflush analog.
    pub fn flush(&mut self, gva: u64) -> Result<()> {
        let hpa = self.hpa(gva)?;
        self.cache.flush_line(hpa);
        self.stats.flushes += 1;
        self.clock.advance_by(self.cost(self.latency.llc));
        Ok(())
    }

    /// Transfer latencies between vCPU pairs as a guest would measure them.
    pub fn measure_transfer_latencies(&mut self, intra: f64, cross: f64) -> Vec<Vec<f64>> {
        let sigma = self.latency.jitter;
        latency_matrix(&self.topo.clone(), intra, cross, sigma, &mut self.rng)
    }

    pub fn random_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    // Oracle

    pub fn oracle_hpa(&self, gva: u64) -> Result<u64> {
        self.hpa(gva)
    }

    pub fn oracle_color(&self, gva: u64, level: Level) -> Result<u32> {
        Ok(self.geometry.color_of(level, self.hpa(gva)?))
    }

    pub fn oracle_l2_set(&self, gva: u64) -> Result<usize> {
        Ok(self.geometry.set_index(Level::L2, self.hpa(gva)?))
    }

    /// `(slice, set)` of the line in the LLC.
    pub fn oracle_llc_set(&self, gva: u64) -> Result<(usize, usize)> {
        let hpa = self.hpa(gva)?;
        Ok((self.geometry.slice_of(hpa), self.geometry.set_index(Level::Llc, hpa)))
    }

    pub fn oracle_in_llc(&self, vcpu: usize, gva: u64) -> Result<bool> {
        Ok(self.cache.in_llc(self.topo.domain_of(vcpu), self.hpa(gva)?))
    }

    pub fn oracle_gva_page_of_hpa(&self, hpa: u64) -> Option<u64> {
        self.map.gva_page_of_hpa(hpa >> PAGE_SHIFT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::FragmentationProfile;
    use crate::tenant::ms;

    fn machine(seed: u64) -> Machine {
        let cfg = MachineConfig::new(
            CacheGeometry::desk(),
            TranslationConfig::new(FragmentationProfile::Contiguous, 1024),
            seed,
        );
        Machine::new(cfg).unwrap()
    }

    #[test]
    fn loads_advance_the_clock() {
        let mut m = machine(1);
        let p = m.alloc_page().unwrap() << 12;
        assert_eq!(m.load(0, p).unwrap(), HitLevel::Memory);
        assert_eq!(m.now(), 100);
        assert_eq!(m.load(0, p).unwrap(), HitLevel::L2);
        assert_eq!(m.now(), 107);
    }

    #[test]
    fn pulls_land_in_llc_only_with_a_helper() {
        let mut m = machine(1);
        let p = m.alloc_page().unwrap() << 12;
        let helper = m.helper_for(0);
        assert_eq!(helper, Some(1));
        assert!(m.pull(0, helper, p).unwrap());
        assert!(m.oracle_in_llc(0, p).unwrap());
        let q = p + 64;
        assert!(!m.pull(0, None, q).unwrap());
        assert!(!m.oracle_in_llc(0, q).unwrap());
        assert_eq!(m.stats().failed_pulls, 1);
    }

    #[test]
    fn warm_timed_pull_classifies() {
        let mut m = machine(2);
        let p = m.alloc_page().unwrap() << 12;
        m.warm_timer(0);
        let h = m.helper_for(0);
        assert_eq!(m.timed_pull(0, h, p).unwrap(), Some(LatencyClass::Memory));
        assert_eq!(m.timed_pull(0, h, p).unwrap(), Some(LatencyClass::Llc));
        m.flush(p).unwrap();
        assert_eq!(m.timed_pull(0, h, p).unwrap(), Some(LatencyClass::Memory));
    }

    #[test]
    fn detached_restores_clock_and_freezes_tenants() {
        let mut m = machine(3);
        m.add_tenant(TenantWorkload::polluter(1000.0)).unwrap();
        let p = m.alloc_page().unwrap() << 12;
        let (_, dt) = m
            .detached(|m| {
                m.wait(ms(1.0))?;
                m.load(0, p)
            })
            .unwrap();
        assert_eq!(m.now(), 0);
        assert!(dt >= ms(1.0));
        assert_eq!(m.tenants().applied(), 0);
        m.wait(ms(2.0)).unwrap();
        assert_eq!(m.tenants().applied(), 2000);
    }

    #[test]
    fn scheduled_remap_applies_when_due() {
        let mut tc = TranslationConfig::new(FragmentationProfile::Contiguous, 256);
        tc.remaps.push(crate::mem::RemapEvent::new(1.0, 1.0));
        let mut m = Machine::new(MachineConfig::new(CacheGeometry::desk(), tc, 5)).unwrap();
        let before = m.oracle_hpa(0).unwrap();
        m.wait(ms(0.5)).unwrap();
        assert_eq!(m.oracle_hpa(0).unwrap(), before);
        m.wait(ms(0.6)).unwrap();
        assert_ne!(m.oracle_hpa(0).unwrap(), before);
        assert_eq!(m.stats().remaps, 1);
    }

    #[test]
    fn allocator_exhaustion() {
        let mut m = machine(1);
        assert_eq!(m.alloc_pages(1024).unwrap().len(), 1024);
        assert!(m.alloc_page().is_err());
        m.free_page(7);
        assert_eq!(m.alloc_page().unwrap(), 7);
    }
}
