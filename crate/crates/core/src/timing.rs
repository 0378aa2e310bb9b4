//! Latency readings with jitter and cold-timer spikes, and the threshold
//! classifier that turns readings back into cache levels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cache::{AccessResult, ActorId, CacheError, CacheState, HitLevel};
use crate::config::{parse_kv, ConfigError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("thresholds must be strictly increasing ({0} >= {1})")]
    NonMonotone(f64, f64),
    #[error("latency model bases must satisfy l2 < llc < mem")]
    BadBases,
    #[error("jitter must be non-negative")]
    NegativeJitter,
    #[error("calibration needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{lower} and {upper} latency distributions overlap")]
    Overlap {
        lower: &'static str,
        upper: &'static str,
    },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub l2: f64,
    pub llc: f64,
    pub mem: f64,
    pub jitter: f64,
    pub spike_prob: f64,
    pub spike_cycles: f64,
    pub ghz: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            l2: 14.0,
            llc: 50.0,
            mem: 200.0,
            jitter: 3.0,
            spike_prob: 0.05,
            spike_cycles: 1000.0,
            ghz: 2.0,
        }
    }
}

impl LatencyModel {
    pub fn noiseless() -> Self {
        Self {
            jitter: 0.0,
            spike_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        if !(self.l2 < self.llc && self.llc < self.mem) {
            return Err(TimingError::BadBases);
        }
        if self.jitter < 0.0 {
            return Err(TimingError::NegativeJitter);
        }
        Ok(())
    }

    pub fn base(&self, level: HitLevel) -> f64 {
        match level {
            HitLevel::L2 => self.l2,
            HitLevel::Llc => self.llc,
            HitLevel::Memory => self.mem,
        }
    }

    /// Logical nanoseconds for `cycles`.
    pub fn ns(&self, cycles: f64) -> u64 {
        (cycles / self.ghz).ceil().max(1.0) as u64
    }

    /// Apply `lat_l2`, `lat_llc`, `lat_mem`, `jitter` overrides; other keys
    /// are ignored so the same file can carry geometry keys.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        let kv = parse_kv(text)?;
        for (key, slot) in [
            ("lat_l2", &mut self.l2),
            ("lat_llc", &mut self.llc),
            ("lat_mem", &mut self.mem),
            ("jitter", &mut self.jitter),
        ] {
            if let Some((line, raw)) = kv.get(key) {
                *slot = raw.parse().map_err(|_| ConfigError::Invalid {
                    line: *line,
                    key: key.to_string(),
                    message: format!("expected a number, got `{raw}`"),
                })?;
            }
        }
        self.validate().map_err(|e| ConfigError::Timing(e.to_string()))
    }

    /// One reading for an access that was served at `level`.
    pub fn sample(&self, level: HitLevel, warm: bool, rng: &mut impl Rng) -> f64 {
        if !warm && self.spike_prob > 0.0 && rng.gen::<f64>() < self.spike_prob {
            return self.spike_cycles;
        }
        let base = self.base(level);
        if self.jitter == 0.0 {
            return base;
        }
        let noise = Normal::new(0.0, self.jitter).expect("finite jitter");
        (base + noise.sample(rng)).max(1.0)
    }
}

/// Per-worker timer. Dummy reads warm it; the warmth lasts `horizon_ns`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerState {
    pub warm: bool,
    pub warmed_at: u64,
    pub reads_since_warm: u64,
    pub horizon_ns: u64,
    pub dummy_reads: u32,
}

impl Default for TimerState {
    fn default() -> Self {
        Self {
            warm: false,
            warmed_at: 0,
            reads_since_warm: 0,
            horizon_ns: 1_000_000,
            dummy_reads: 32,
        }
    }
}

impl TimerState {
    pub fn is_warm(&self, now: u64) -> bool {
        self.warm && now < self.warmed_at.saturating_add(self.horizon_ns)
    }

    /// Refresh the flag against the clock: expired warmth is dropped.
    pub fn tick(&mut self, now: u64) {
        if self.warm && !self.is_warm(now) {
            self.warm = false;
        }
    }

    pub fn record_read(&mut self) {
        self.reads_since_warm += 1;
    }
}

/// Issue the dummy timer reads. Returns the cycles they took.
pub fn warm_timer(timer: &mut TimerState, now: u64) -> u64 {
    if timer.is_warm(now) {
        return 0;
    }
    timer.warm = true;
    timer.warmed_at = now;
    timer.reads_since_warm = 0;
    timer.dummy_reads as u64 * 20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LatencyClass {
    L2OrFaster,
    Llc,
    Memory,
}

impl LatencyClass {
    pub fn of(level: HitLevel) -> Self {
        match level {
            HitLevel::L2 => LatencyClass::L2OrFaster,
            HitLevel::Llc => LatencyClass::Llc,
            HitLevel::Memory => LatencyClass::Memory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub llc: f64,
    pub mem: f64,
    /// Readings at or above this are treated as measurement outliers.
    pub ceiling: f64,
}

impl Thresholds {
    pub fn new(llc: f64, mem: f64, ceiling: f64) -> Result<Self, TimingError> {
        if llc >= mem {
            return Err(TimingError::NonMonotone(llc, mem));
        }
        if mem >= ceiling {
            return Err(TimingError::NonMonotone(mem, ceiling));
        }
        Ok(Self { llc, mem, ceiling })
    }

    /// Midpoints between the model's base latencies.
    pub fn from_model(m: &LatencyModel) -> Self {
        Self {
            llc: (m.l2 + m.llc) / 2.0,
            mem: (m.llc + m.mem) / 2.0,
            ceiling: m.mem + (m.mem - m.llc),
        }
    }

    /// Like `classify_level`, but readings above the ceiling are `None`.
    pub fn classify(&self, latency: f64) -> Option<LatencyClass> {
        if latency >= self.ceiling {
            return None;
        }
        Some(if latency < self.llc {
            LatencyClass::L2OrFaster
        } else if latency < self.mem {
            LatencyClass::Llc
        } else {
            LatencyClass::Memory
        })
    }
}

/// Closed-open intervals: a reading equal to a threshold lands in the
/// higher class.
pub fn classify_level(latency: f64, thresholds: &Thresholds) -> Result<LatencyClass, TimingError> {
    if thresholds.llc >= thresholds.mem {
        return Err(TimingError::NonMonotone(thresholds.llc, thresholds.mem));
    }
    Ok(if latency < thresholds.llc {
        LatencyClass::L2OrFaster
    } else if latency < thresholds.mem {
        LatencyClass::Llc
    } else {
        LatencyClass::Memory
    })
}

/// Perform the access and return its reading.
pub fn measure_access(
    state: &mut CacheState,
    hpa: u64,
    actor: ActorId,
    model: &LatencyModel,
    timer: &mut TimerState,
    now: u64,
    rng: &mut impl Rng,
) -> Result<(f64, AccessResult), CacheError> {
    let result = state.access(hpa, actor, false)?;
    timer.tick(now);
    timer.record_read();
    Ok((model.sample(result.level, timer.is_warm(now), rng), result))
}

/// Sample each level `samples` times on a scratch line and place thresholds
/// at the midpoints of the per-level means.
pub fn calibrate_thresholds(
    state: &mut CacheState,
    actor: ActorId,
    scratch_hpa: u64,
    model: &LatencyModel,
    timer: &mut TimerState,
    now: u64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Thresholds, TimingError> {
    if samples < 100 {
        return Err(TimingError::TooFewSamples(samples));
    }
    warm_timer(timer, now);
    let mut levels: [Vec<f64>; 3] = Default::default();
    for _ in 0..samples {
        state.access(scratch_hpa, actor, false)?;
        levels[0].push(measure_access(state, scratch_hpa, actor, model, timer, now, rng)?.0);
        state.flush_line(scratch_hpa);
        state.access_llc(scratch_hpa, actor)?;
        levels[1].push(measure_access(state, scratch_hpa, actor, model, timer, now, rng)?.0);
        state.flush_line(scratch_hpa);
        levels[2].push(measure_access(state, scratch_hpa, actor, model, timer, now, rng)?.0);
        state.flush_line(scratch_hpa);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
    if max(&levels[0]) >= min(&levels[1]) {
        return Err(TimingError::Overlap {
            lower: "L2",
            upper: "LLC",
        });
    }
    if max(&levels[1]) >= min(&levels[2]) {
        return Err(TimingError::Overlap {
            lower: "LLC",
            upper: "memory",
        });
    }
    let (m2, mc, mm) = (mean(&levels[0]), mean(&levels[1]), mean(&levels[2]));
    Thresholds::new((m2 + mc) / 2.0, (mc + mm) / 2.0, mm + (mm - mc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CacheGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CacheState, ActorId) {
        let mut c = CacheState::single(CacheGeometry::skylake_sp(), 1);
        let a = c.register_actor(Some(0), 0).unwrap();
        (c, a)
    }

    #[test]
    fn noiseless_l2_hit_reads_base() {
        let (mut c, a) = setup();
        let m = LatencyModel::noiseless();
        let mut t = TimerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        warm_timer(&mut t, 0);
        c.access(0x40, a, false).unwrap();
        let (lat, r) = measure_access(&mut c, 0x40, a, &m, &mut t, 10, &mut rng).unwrap();
        assert_eq!(r.level, HitLevel::L2);
        assert_eq!(lat, 14.0);
    }

    #[test]
    fn cold_timer_forced_spike() {
        let m = LatencyModel {
            spike_prob: 1.0,
            ..LatencyModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for level in [HitLevel::L2, HitLevel::Llc, HitLevel::Memory] {
            assert_eq!(m.sample(level, false, &mut rng), 1000.0);
        }
    }

    #[test]
    fn warm_timer_never_spikes() {
        let m = LatencyModel {
            spike_prob: 1.0,
            ..LatencyModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..100_000).all(|_| m.sample(HitLevel::L2, true, &mut rng) < 100.0));
    }

    #[test]
    fn warm_up_is_idempotent_and_expires() {
        let mut t = TimerState::default();
        assert!(!t.is_warm(0));
        assert!(warm_timer(&mut t, 5) > 0);
        assert!(t.is_warm(5));
        assert_eq!(warm_timer(&mut t, 6), 0);
        assert_eq!(t.warmed_at, 5);
        t.tick(5 + t.horizon_ns);
        assert!(!t.warm);
    }

    #[test]
    fn warm_l2_misclassification_is_rare() {
        let m = LatencyModel::default();
        let th = Thresholds::from_model(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wrong = (0..10_000)
            .filter(|_| th.classify(m.sample(HitLevel::L2, true, &mut rng)) != Some(LatencyClass::L2OrFaster))
            .count();
        assert!(wrong < 10, "{wrong}");
    }

    #[test]
    fn tie_goes_to_higher_class() {
        let th = Thresholds::new(32.0, 125.0, 350.0).unwrap();
        assert_eq!(classify_level(31.9, &th).unwrap(), LatencyClass::L2OrFaster);
        assert_eq!(classify_level(32.0, &th).unwrap(), LatencyClass::Llc);
        assert_eq!(classify_level(125.0, &th).unwrap(), LatencyClass::Memory);
        assert_eq!(classify_level(200.0, &th).unwrap(), LatencyClass::Memory);
        assert_eq!(th.classify(400.0), None);
        assert!(Thresholds::new(50.0, 40.0, 300.0).is_err());
        let bad = Thresholds {
            llc: 9.0,
            mem: 9.0,
            ceiling: 10.0,
        };
        assert!(classify_level(1.0, &bad).is_err());
    }

    #[test]
    fn calibration_noiseless_hits_midpoints() {
        let (mut c, a) = setup();
        let m = LatencyModel::noiseless();
        let mut t = TimerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let th = calibrate_thresholds(&mut c, a, 0x1000, &m, &mut t, 0, 100, &mut rng).unwrap();
        assert_eq!(th.llc, 32.0);
        assert_eq!(th.mem, 125.0);
    }

    #[test]
    fn calibration_default_noise_is_accurate() {
        let (mut c, a) = setup();
        let m = LatencyModel::default();
        let mut t = TimerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = calibrate_thresholds(&mut c, a, 0x1000, &m, &mut t, 0, 1000, &mut rng).unwrap();
        let mut wrong = 0;
        let n = 30_000;
        for i in 0..n {
            let level = [HitLevel::L2, HitLevel::Llc, HitLevel::Memory][i % 3];
            if th.classify(m.sample(level, true, &mut rng)) != Some(LatencyClass::of(level)) {
                wrong += 1;
            }
        }
        assert!((wrong as f64) / (n as f64) < 0.001);
    }

    #[test]
    fn calibration_rejects_overlap_and_few_samples() {
        let (mut c, a) = setup();
        let m = LatencyModel {
            jitter: 60.0,
            ..LatencyModel::default()
        };
        let mut t = TimerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            calibrate_thresholds(&mut c, a, 0x1000, &m, &mut t, 0, 200, &mut rng),
            Err(TimingError::Overlap { .. })
        ));
        assert_eq!(
            calibrate_thresholds(&mut c, a, 0x1000, &m, &mut t, 0, 99, &mut rng),
            Err(TimingError::TooFewSamples(99))
        );
    }

    #[test]
    fn kv_overrides() {
        let mut m = LatencyModel::default();
        m.apply_kv("lat_l2=10\nlat_llc=40\nlat_mem=300\njitter=1\nl2_ways=16\n").unwrap();
        assert_eq!((m.l2, m.llc, m.mem, m.jitter), (10.0, 40.0, 300.0, 1.0));
        assert!(m.clone().apply_kv("lat_llc=5\n").is_err());
    }

    #[test]
    fn expected_latency_increases_with_depth() {
        let m = LatencyModel::default();
        assert!(m.base(HitLevel::L2) < m.base(HitLevel::Llc));
        assert!(m.base(HitLevel::Llc) < m.base(HitLevel::Memory));
    }
}
