//! Scenario files: a TOML description of one experiment run, and the
//! runner that turns it into a bundle of CSV artifacts plus `summary.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cas::SchedPolicy;
use crate::error::Result;
use crate::experiments::{self as ex, Artifacts};
use crate::geometry::{CacheGeometry, Inclusivity, Replacement};
use crate::mem::FragmentationProfile;
use crate::tenant::TenantWorkload;
use crate::vscan::MonitorConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("[geometry] is missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("unknown geometry preset `{0}` (expected skylake-sp, desk, monitor or coverage)")]
    UnknownPreset(String),
    #[error("unknown policy `{0}` (expected none, cas, cap or cas+cap)")]
    UnknownPolicy(String),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("experiment `{experiment}` needs policy `{needs}`, got `{got}`")]
    PolicyMismatch {
        experiment: &'static str,
        needs: &'static str,
        got: Policy,
    },
    #[error("experiment `{0}` uses a fixed geometry; remove the [geometry] section")]
    FixedGeometry(&'static str),
    #[error("experiment `{0}` uses a fixed memory layout; remove the [translation] section")]
    FixedTranslation(&'static str),
    #[error("experiment `{0}` defines its own co-tenants; remove the [[tenant]] entries")]
    FixedTenants(&'static str),
    #[error("[experiment]: {0}")]
    Params(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    None,
    Cas,
    Cap,
    CasCap,
}

impl Policy {
    pub fn has_cas(self) -> bool {
        matches!(self, Policy::Cas | Policy::CasCap)
    }

    pub fn has_cap(self) -> bool {
        matches!(self, Policy::Cap | Policy::CasCap)
    }
}

impl FromStr for Policy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Policy::None),
            "cas" => Ok(Policy::Cas),
            "cap" => Ok(Policy::Cap),
            "cas+cap" | "cap+cas" => Ok(Policy::CasCap),
            other => Err(ScenarioError::UnknownPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::None => "none",
            Policy::Cas => "cas",
            Policy::Cap => "cap",
            Policy::CasCap => "cas+cap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Coverage,
    Associativity,
    ColorId,
    ManualFlush,
    WindowSweep,
    WindowAdjust,
    SelfEviction,
    Cas,
    Cap,
    Recolor,
    Fragmentation,
    Evsets,
    Vcol,
    Vscan,
}

impl Experiment {
    pub const ALL: [Experiment; 14] = [
        Experiment::Coverage,
        Experiment::Associativity,
        Experiment::ColorId,
        Experiment::ManualFlush,
        Experiment::WindowSweep,
        Experiment::WindowAdjust,
        Experiment::SelfEviction,
        Experiment::Cas,
        Experiment::Cap,
        Experiment::Recolor,
        Experiment::Fragmentation,
        Experiment::Evsets,
        Experiment::Vcol,
        Experiment::Vscan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Coverage => "coverage",
            Experiment::Associativity => "associativity",
            Experiment::ColorId => "color_id",
            Experiment::ManualFlush => "manual_flush",
            Experiment::WindowSweep => "window_sweep",
            Experiment::WindowAdjust => "window_adjust",
            Experiment::SelfEviction => "self_eviction",
            Experiment::Cas => "cas",
            Experiment::Cap => "cap",
            Experiment::Recolor => "recolor",
            Experiment::Fragmentation => "fragmentation",
            Experiment::Evsets => "evsets",
            Experiment::Vcol => "vcol",
            Experiment::Vscan => "vscan",
        }
    }

    fn configurable_geometry(self) -> bool {
        matches!(self, Experiment::ColorId | Experiment::Evsets | Experiment::Vcol | Experiment::Vscan)
    }

    fn default_geometry(self) -> CacheGeometry {
        match self {
            Experiment::ColorId => CacheGeometry::skylake_sp(),
            Experiment::Vscan => ex::monitor_geometry(),
            _ => CacheGeometry::desk(),
        }
    }
}

impl FromStr for Experiment {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ScenarioError::UnknownExperiment(s.to_string()))
    }
}

// Raw file layout

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    scenario: RawHeader,
    geometry: Option<RawGeometry>,
    translation: Option<RawTranslation>,
    monitor: Option<MonitorConfig>,
    #[serde(default)]
    tenant: Vec<TenantWorkload>,
    experiment: Option<toml::Table>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    name: String,
    experiment: String,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_duration")]
    duration_ms: f64,
    #[serde(default = "default_policy")]
    policy: String,
}

fn default_seed() -> u64 {
    1
}

fn default_duration() -> f64 {
    10_000.0
}

fn default_policy() -> String {
    "none".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    preset: Option<String>,
    l2_ways: Option<usize>,
    l2_sets: Option<usize>,
    llc_ways: Option<usize>,
    llc_sets: Option<usize>,
    slices: Option<usize>,
    inclusivity: Option<Inclusivity>,
    replacement: Option<Replacement>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTranslation {
    profile: String,
    #[serde(default)]
    shuffle: Option<f64>,
}

pub fn geometry_preset(name: &str) -> Result<CacheGeometry, ScenarioError> {
    match name {
        "skylake-sp" => Ok(CacheGeometry::skylake_sp()),
        "desk" => Ok(CacheGeometry::desk()),
        "monitor" => Ok(ex::monitor_geometry()),
        "coverage" => Ok(ex::coverage_geometry(20)),
        other => Err(ScenarioError::UnknownPreset(other.to_string())),
    }
}

impl RawGeometry {
    /// A preset may be refined by `replacement`; without a preset every key
    /// is required.
    fn resolve(self) -> Result<CacheGeometry, ScenarioError> {
        if let Some(p) = &self.preset {
            let g = geometry_preset(p)?;
            let extra = self.l2_ways.is_some()
                || self.l2_sets.is_some()
                || self.llc_ways.is_some()
                || self.llc_sets.is_some()
                || self.slices.is_some()
                || self.inclusivity.is_some();
            if extra {
                return Err(ScenarioError::Invalid(
                    "[geometry] takes either `preset` (plus optional `replacement`) or every size key".into(),
                ));
            }
            return Ok(match self.replacement {
                Some(r) => g.with_replacement(r),
                None => g,
            });
        }
        let g = CacheGeometry {
            line_size: 64,
            l2_ways: self.l2_ways.ok_or(ScenarioError::MissingKey("l2_ways"))?,
            l2_sets: self.l2_sets.ok_or(ScenarioError::MissingKey("l2_sets"))?,
            llc_ways: self.llc_ways.ok_or(ScenarioError::MissingKey("llc_ways"))?,
            llc_sets: self.llc_sets.ok_or(ScenarioError::MissingKey("llc_sets"))?,
            slices: self.slices.ok_or(ScenarioError::MissingKey("slices"))?,
            inclusivity: self.inclusivity.ok_or(ScenarioError::MissingKey("inclusivity"))?,
            replacement: self.replacement.ok_or(ScenarioError::MissingKey("replacement"))?,
        };
        g.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(g)
    }
}

// Validated scenario

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub duration_ms: f64,
    pub policy: Policy,
    pub geometry: Option<CacheGeometry>,
    pub profile: FragmentationProfile,
    pub monitor: MonitorConfig,
    pub tenants: Vec<TenantWorkload>,
    pub params: toml::Table,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let experiment: Experiment = raw.scenario.experiment.parse()?;
        let policy: Policy = raw.scenario.policy.parse()?;
        if !(raw.scenario.duration_ms > 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "duration_ms must be positive, got {}",
                raw.scenario.duration_ms
            )));
        }
        let needs = match experiment {
            Experiment::Cas if !policy.has_cas() => Some("cas"),
            Experiment::Cap | Experiment::Recolor if !policy.has_cap() => Some("cap"),
            _ => None,
        };
        if let Some(needs) = needs {
            return Err(ScenarioError::PolicyMismatch {
                experiment: experiment.name(),
                needs,
                got: policy,
            });
        }
        let geometry = raw.geometry.map(RawGeometry::resolve).transpose()?;
        if geometry.is_some() && !experiment.configurable_geometry() {
            return Err(ScenarioError::FixedGeometry(experiment.name()));
        }
        if !raw.tenant.is_empty() && experiment != Experiment::Vscan {
            return Err(ScenarioError::FixedTenants(experiment.name()));
        }
        if raw.translation.is_some() && !experiment.configurable_geometry() {
            return Err(ScenarioError::FixedTranslation(experiment.name()));
        }
        let profile = match raw.translation {
            None => FragmentationProfile::Fragmented { shuffle: 1.0 },
            Some(t) => match t.profile.as_str() {
                "contiguous" => FragmentationProfile::Contiguous,
                "fragmented" => {
                    let s = t.shuffle.unwrap_or(1.0);
                    if !(0.0..=1.0).contains(&s) {
                        return Err(ScenarioError::Invalid(format!("shuffle must be in [0, 1], got {s}")));
                    }
                    FragmentationProfile::Fragmented { shuffle: s }
                }
                other => {
                    return Err(ScenarioError::Invalid(format!(
                        "unknown translation profile `{other}` (expected contiguous or fragmented)"
                    )))
                }
            },
        };
        let monitor = raw.monitor.unwrap_or_default();
        monitor.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let s = Scenario {
            name: raw.scenario.name,
            experiment,
            seed: raw.scenario.seed,
            duration_ms: raw.scenario.duration_ms,
            policy,
            geometry,
            profile,
            monitor,
            tenants: raw.tenant,
            params: raw.experiment.unwrap_or_default(),
        };
        s.check_params()?;
        Ok(s)
    }

    /// Replace the geometry, as from a `--geometry` file.
    pub fn with_geometry(mut self, g: CacheGeometry) -> Result<Self, ScenarioError> {
        if !self.experiment.configurable_geometry() {
            return Err(ScenarioError::FixedGeometry(self.experiment.name()));
        }
        self.geometry = Some(g);
        Ok(self)
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry.clone().unwrap_or_else(|| self.experiment.default_geometry())
    }

    /// Monitor intervals that fit in the scenario duration.
    pub fn intervals(&self) -> usize {
        ((self.duration_ms / self.monitor.interval_ms).floor() as usize).max(1)
    }

    fn params<T: for<'de> Deserialize<'de>>(&self) -> Result<T, ScenarioError> {
        T::deserialize(toml::Value::Table(self.params.clone())).map_err(|e| ScenarioError::Params(e.to_string()))
    }

    fn check_params(&self) -> Result<(), ScenarioError> {
        match self.experiment {
            Experiment::Coverage => self.params::<ex::CoverageParams>().map(drop),
            Experiment::Associativity => self.params::<ex::AssocParams>().map(drop),
            Experiment::ColorId | Experiment::Vcol => self.params::<ex::ColorIdParams>().map(drop),
            Experiment::ManualFlush => self.params::<FlushParams>().map(drop),
            Experiment::WindowSweep => self.params::<SweepParams>().map(drop),
            Experiment::WindowAdjust => self.params::<AdjustParams>().map(drop),
            Experiment::SelfEviction => self.params::<SelfEvictionParams>().map(drop),
            Experiment::Cas => self.params::<ex::CasParams>().map(drop),
            Experiment::Cap => CapRunParams::from_table(self.params.clone()).map(drop),
            Experiment::Recolor => RecolorParams::from_table(self.params.clone()).map(drop),
            Experiment::Fragmentation => self.params::<ex::FragParams>().map(drop),
            Experiment::Evsets => self.params::<ex::SurveyParams>().map(drop),
            Experiment::Vscan => self.params::<ex::MonitorParams>().map(drop),
        }
    }

    pub fn run(&self) -> Result<Bundle> {
        self.run_with_seed(self.seed)
    }

    pub fn run_with_seed(&self, seed: u64) -> Result<Bundle> {
        let p = |e: ScenarioError| crate::Error::Config(crate::config::ConfigError::Parse(e.to_string()));
        let (metrics, outcome, files): (Value, Value, Artifacts) = match self.experiment {
            Experiment::Coverage => {
                let (o, a) = ex::coverage(&self.params().map_err(p)?, seed)?;
                (json!({ "coverage": o.coverage, "theoretical": o.theoretical }), to_json(&o), a)
            }
            Experiment::Associativity => {
                let o = ex::associativity(&self.params().map_err(p)?, seed)?;
                let mut a = Artifacts::new();
                let mut csv = String::from("run,size\n");
                for (i, s) in o.per_run.iter().enumerate() {
                    csv.push_str(&format!("{i},{s}\n"));
                }
                a.insert("associativity.csv".into(), csv);
                (json!({ "modal": o.modal, "mean": o.mean, "std": o.std }), to_json(&o), a)
            }
            Experiment::ColorId | Experiment::Vcol => {
                let (o, a) = ex::color_identification(&self.geometry(), self.profile, &self.params().map_err(p)?, seed)?;
                (
                    json!({ "accuracy": o.accuracy, "permutation": o.permutation, "filters": o.filters }),
                    to_json(&o),
                    a,
                )
            }
            Experiment::ManualFlush => {
                let fp: FlushParams = self.params().map_err(p)?;
                let (o, a) = ex::manual_flush(&fp.flush, seed)?;
                (json!({ "flushed": o.flushed, "detected": o.detected }), to_json(&o), a)
            }
            Experiment::WindowSweep => {
                let sp: SweepParams = self.params().map_err(p)?;
                let (c, a) = ex::window_sweep(&sp.profiles, &sp.windows, seed)?;
                let sat: BTreeMap<String, Option<f64>> = c.iter().map(|x| (x.profile.clone(), x.saturation_ms)).collect();
                let mono = c.iter().all(ex::SweepCurve::monotone_to_saturation);
                (json!({ "saturation_ms": sat, "monotone": mono }), to_json(&c), a)
            }
            Experiment::WindowAdjust => {
                let ap: AdjustParams = self.params().map_err(p)?;
                let (t, a) = ex::window_adjust(self.intervals(), ap.loud_ms, seed)?;
                let windows: Vec<f64> = t.cycles.iter().map(|c| c.0).collect();
                (json!({ "windows_ms": windows }), to_json(&t), a)
            }
            Experiment::SelfEviction => {
                let sp: SelfEvictionParams = self.params().map_err(p)?;
                let o = ex::self_eviction(sp.replacement, &sp.offsets, self.intervals(), seed)?;
                let clean = o.clean_sets as f64 / o.sets.max(1) as f64;
                (json!({ "clean_fraction": clean, "evicted_lines": o.evicted_lines }), to_json(&o), Artifacts::new())
            }
            Experiment::Cas => {
                let cp = ex::CasParams {
                    intervals: self.intervals(),
                    ..self.params().map_err(p)?
                };
                let (c, mut a) = ex::cas_pipeline(&cp, SchedPolicy::Cas, seed)?;
                let (b, ab) = ex::cas_pipeline(&cp, SchedPolicy::Baseline, seed)?;
                for (k, v) in ab {
                    a.insert(format!("baseline_{k}"), v);
                }
                (
                    json!({
                        "residency_polluted_cas": c.residency(0),
                        "residency_polluted_baseline": b.residency(0),
                        "tier_changes": c.report.tier_changes,
                        "starved": c.report.starved,
                    }),
                    json!({ "cas": summary_sched(&c), "baseline": summary_sched(&b) }),
                    a,
                )
            }
            Experiment::Cap => {
                let cp = CapRunParams::from_table(self.params.clone()).map_err(p)?;
                let base = ex::CapParams {
                    intervals: self.intervals(),
                    ..cp.cap
                };
                let seeds: Vec<u64> = (0..cp.seeds as u64).map(|k| seed.wrapping_add(k)).collect();
                let (o, mut a) = ex::cap_absorption(&base, &seeds)?;
                let schedule = [ex::PoisonPhase {
                    color: base.poisoned,
                    from: 0,
                    to: base.intervals + 1,
                }];
                let (one, a1) = ex::cap_pipeline(&base, &schedule, seed)?;
                a.extend(a1);
                let rate = |x: u64| x as f64 / base.intervals.max(1) as f64;
                let ranked: u64 = o.pairs.iter().map(|x| x.1).sum();
                let unranked: u64 = o.pairs.iter().map(|x| x.2).sum();
                (
                    json!({
                        "reuse_misses_ranked": rate(ranked) / seeds.len().max(1) as f64,
                        "reuse_misses_unranked": rate(unranked) / seeds.len().max(1) as f64,
                        "wins": o.wins,
                        "p_value": o.p_value,
                        "confined": o.confined && one.confined(),
                    }),
                    json!({ "absorption": to_json(&o), "run": to_json(&one) }),
                    a,
                )
            }
            Experiment::Recolor => {
                let rp = RecolorParams::from_table(self.params.clone()).map_err(p)?;
                let cp = ex::CapParams {
                    intervals: self.intervals(),
                    ..rp.cap
                };
                let schedule = ex::recolor_script(rp.from_color, rp.to_color, cp.intervals);
                let (o, a) = ex::cap_pipeline(&cp, &schedule, seed)?;
                (
                    json!({
                        "reclaims": o.reclaims,
                        "reclaims_follow_demotions": o.reclaims_follow_demotions(cp.cap.recolor_after),
                    }),
                    to_json(&o),
                    a,
                )
            }
            Experiment::Fragmentation => {
                let (o, a) = ex::fragmentation(&self.params().map_err(p)?, seed)?;
                (
                    json!({
                        "overlap_contiguous": o.contiguous,
                        "overlap_shuffled": o.shuffled,
                        "overlap_staged": o.staged,
                    }),
                    to_json(&o),
                    a,
                )
            }
            Experiment::Evsets => {
                let (o, a) = ex::evset_survey(&self.geometry(), self.profile, &self.params().map_err(p)?, seed)?;
                (json!({ "sets": o.sets, "expected": o.expected, "congruent": o.congruent }), to_json(&o), a)
            }
            Experiment::Vscan => {
                let mp: ex::MonitorParams = self.params().map_err(p)?;
                let (o, a) = ex::monitor_run(&self.geometry(), self.profile, &mp, &self.monitor, &self.tenants, self.intervals(), seed)?;
                (
                    json!({ "mean_evicted_percent": o.mean_evicted_percent, "final_window_ms": o.final_window_ms }),
                    to_json(&o),
                    a,
                )
            }
        };
        let summary = json!({
            "scenario": self.name,
            "experiment": self.experiment.name(),
            "policy": self.policy.to_string(),
            "seed": seed,
            "metrics": metrics,
            "outcome": outcome,
        });
        let mut files = files;
        files.insert(
            "summary.json".into(),
            serde_json::to_string_pretty(&summary).expect("summary is plain data") + "\n",
        );
        Ok(Bundle { files, summary })
    }
}

fn to_json<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("outcomes are plain data")
}

fn summary_sched(o: &ex::CasOutcome) -> Value {
    json!({
        "sensitive_residency": o.report.sensitive_residency,
        "tier_changes": o.report.tier_changes,
        "migrations": o.report.migrations,
        "starved": o.report.starved,
        "rates": o.rates,
    })
}

// Per-experiment parameter tables that have no counterpart in experiments.rs

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlushParams {
    flush: Vec<usize>,
}

impl Default for FlushParams {
    fn default() -> Self {
        Self {
            flush: vec![2, 4, 6, 8, 11],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepParams {
    windows: Vec<f64>,
    profiles: Vec<ex::TenantProfile>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            windows: ex::default_windows(),
            profiles: ex::default_profiles(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AdjustParams {
    loud_ms: f64,
}

impl Default for AdjustParams {
    fn default() -> Self {
        Self { loud_ms: 4500.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelfEvictionParams {
    replacement: Replacement,
    offsets: Vec<u64>,
}

impl Default for SelfEvictionParams {
    fn default() -> Self {
        Self {
            replacement: Replacement::Lru,
            offsets: vec![0x0, 0x400, 0x800, 0xc00],
        }
    }
}

/// `[experiment]` for the cap runs: a few driver keys on top of the
/// pipeline's own parameters.
#[derive(Debug, Clone)]
struct CapRunParams {
    seeds: usize,
    cap: ex::CapParams,
}

#[derive(Debug, Clone)]
struct RecolorParams {
    from_color: u32,
    to_color: u32,
    cap: ex::CapParams,
}

fn take<T: for<'de> Deserialize<'de>>(t: &mut toml::Table, key: &str, default: T) -> Result<T, ScenarioError> {
    match t.remove(key) {
        None => Ok(default),
        Some(v) => T::deserialize(v).map_err(|e| ScenarioError::Params(format!("`{key}`: {e}"))),
    }
}

fn cap_params(mut t: toml::Table) -> Result<ex::CapParams, ScenarioError> {
    ex::CapParams::deserialize(toml::Value::Table(std::mem::take(&mut t))).map_err(|e| ScenarioError::Params(e.to_string()))
}

impl CapRunParams {
    fn from_table(mut t: toml::Table) -> Result<Self, ScenarioError> {
        let seeds = take(&mut t, "seeds", 10usize)?;
        Ok(Self { seeds, cap: cap_params(t)? })
    }
}

impl RecolorParams {
    fn from_table(mut t: toml::Table) -> Result<Self, ScenarioError> {
        let from_color = take(&mut t, "from_color", 5u32)?;
        let to_color = take(&mut t, "to_color", 9u32)?;
        Ok(Self {
            from_color,
            to_color,
            cap: cap_params(t)?,
        })
    }
}

/// Output of one run: file name to contents, `summary.json` included.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub files: BTreeMap<String, String>,
    pub summary: Value,
}

impl Bundle {
    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn metric(&self, key: &str) -> Option<&Value> {
        self.summary.get("metrics")?.get(key)
    }
}

/// Scenario files shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("coverage_f2", include_str!("../../../scenarios/coverage_f2.toml")),
    ("coverage_f3", include_str!("../../../scenarios/coverage_f3.toml")),
    ("coverage_f4", include_str!("../../../scenarios/coverage_f4.toml")),
    ("coverage_f5", include_str!("../../../scenarios/coverage_f5.toml")),
    ("coverage_f6", include_str!("../../../scenarios/coverage_f6.toml")),
    ("associativity", include_str!("../../../scenarios/associativity.toml")),
    ("color_id", include_str!("../../../scenarios/color_id.toml")),
    ("manual_flush", include_str!("../../../scenarios/manual_flush.toml")),
    ("window_sweep", include_str!("../../../scenarios/window_sweep.toml")),
    ("window_adjust", include_str!("../../../scenarios/window_adjust.toml")),
    ("self_eviction", include_str!("../../../scenarios/self_eviction.toml")),
    ("cas_steering", include_str!("../../../scenarios/cas_steering.toml")),
    ("cap_absorption", include_str!("../../../scenarios/cap_absorption.toml")),
    ("cap_recolor", include_str!("../../../scenarios/cap_recolor.toml")),
    ("fragmentation", include_str!("../../../scenarios/fragmentation.toml")),
    ("evsets_desk", include_str!("../../../scenarios/evsets_desk.toml")),
    ("vscan_polluter", include_str!("../../../scenarios/vscan_polluter.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".toml").unwrap_or(name);
    let stem = stem.rsplit('/').next().unwrap_or(stem);
    BUNDLED.iter().find(|(n, _)| *n == stem).map(|(_, t)| *t)
}
