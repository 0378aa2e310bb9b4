//! Cache geometry and address-to-set mapping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addr::{LINE_SHIFT, PAGE_SHIFT};
use crate::config::{parse_kv, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    L2,
    Llc,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L2 => "L2",
            Level::Llc => "LLC",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Level::L2),
            "llc" => Ok(Level::Llc),
            other => Err(format!("unknown cache level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inclusivity {
    Inclusive,
    NonInclusive,
}

impl FromStr for Inclusivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "inclusive" => Ok(Inclusivity::Inclusive),
            "non-inclusive" => Ok(Inclusivity::NonInclusive),
            other => Err(format!("unknown inclusivity `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    Lru,
    Plru,
    Random,
}

impl FromStr for Replacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Replacement::Lru),
            "plru" => Ok(Replacement::Plru),
            "random" => Ok(Replacement::Random),
            other => Err(format!("unknown replacement policy `{other}`")),
        }
    }
}

impl fmt::Display for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Replacement::Lru => "lru",
            Replacement::Plru => "plru",
            Replacement::Random => "random",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{0} must be a power of two (got {1})")]
    NotPowerOfTwo(&'static str, usize),
    #[error("{0} ways exceeds the supported maximum of 32")]
    TooManyWays(&'static str),
    #[error("line size must be 64 bytes (got {0})")]
    LineSize(u64),
}

/// Shape of the simulated L2 and sliced LLC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub line_size: u64,
    pub l2_ways: usize,
    pub l2_sets: usize,
    pub llc_ways: usize,
    /// Sets per LLC slice.
    pub llc_sets: usize,
    pub slices: usize,
    pub inclusivity: Inclusivity,
    pub replacement: Replacement,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        Self::skylake_sp()
    }
}

impl CacheGeometry {
    /// Intel Gold 6138: 16-way 1024-set L2, twenty 11-way 2048-set LLC slices,
    /// LLC non-inclusive of L1/L2.
    pub fn skylake_sp() -> Self {
        Self {
            line_size: 64,
            l2_ways: 16,
            l2_sets: 1024,
            llc_ways: 11,
            llc_sets: 2048,
            slices: 20,
            inclusivity: Inclusivity::NonInclusive,
            replacement: Replacement::Lru,
        }
    }

    /// Small geometry that keeps the 16 L2 colors and two LLC rows per
    /// color/offset partition but shrinks ways and slice count.
    pub fn desk() -> Self {
        Self {
            line_size: 64,
            l2_ways: 4,
            l2_sets: 1024,
            llc_ways: 4,
            llc_sets: 2048,
            slices: 4,
            inclusivity: Inclusivity::NonInclusive,
            replacement: Replacement::Lru,
        }
    }

    pub fn with_replacement(mut self, replacement: Replacement) -> Self {
        self.replacement = replacement;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.line_size != 64 {
            return Err(GeometryError::LineSize(self.line_size));
        }
        for (name, v) in [
            ("l2_ways", self.l2_ways),
            ("l2_sets", self.l2_sets),
            ("llc_ways", self.llc_ways),
            ("llc_sets", self.llc_sets),
            ("slices", self.slices),
        ] {
            if v == 0 {
                return Err(GeometryError::NotPositive(name));
            }
        }
        for (name, v) in [("l2_sets", self.l2_sets), ("llc_sets", self.llc_sets)] {
            if !v.is_power_of_two() {
                return Err(GeometryError::NotPowerOfTwo(name, v));
            }
        }
        if self.l2_ways > 32 {
            return Err(GeometryError::TooManyWays("l2"));
        }
        if self.llc_ways > 32 {
            return Err(GeometryError::TooManyWays("llc"));
        }
        Ok(())
    }

    pub fn ways(&self, level: Level) -> usize {
        match level {
            Level::L2 => self.l2_ways,
            Level::Llc => self.llc_ways,
        }
    }

    /// Sets per array (per slice for the LLC).
    pub fn sets(&self, level: Level) -> usize {
        match level {
            Level::L2 => self.l2_sets,
            Level::Llc => self.llc_sets,
        }
    }

    pub fn index_bits(&self, level: Level) -> u32 {
        self.sets(level).trailing_zeros()
    }

    /// Set-index bits that lie above the page offset and are therefore
    /// invisible to (and uncontrollable by) the guest.
    pub fn uncontrollable_bits(&self, level: Level) -> u32 {
        (LINE_SHIFT + self.index_bits(level)).saturating_sub(PAGE_SHIFT)
    }

    /// Number of page colors at `level` (16 for L2 and 32 for the LLC on
    /// the default geometry).
    pub fn colors(&self, level: Level) -> usize {
        1 << self.uncontrollable_bits(level)
    }

    /// Page color of a host physical address: the uncontrollable index bits
    /// starting at bit 12.
    #[inline]
    pub fn color_of(&self, level: Level, hpa: u64) -> u32 {
        let mask = (1u64 << self.uncontrollable_bits(level)) - 1;
        ((hpa >> PAGE_SHIFT) & mask) as u32
    }

    /// L2 index uses bits [6 + log2(l2_sets) - 1 : 6]; LLC per-slice index
    /// likewise with `llc_sets`.
    #[inline]
    pub fn set_index(&self, level: Level, hpa: u64) -> usize {
        ((hpa >> LINE_SHIFT) as usize) & (self.sets(level) - 1)
    }

    /// Slice selection: XOR-fold of line-address bits [35:6] into 12 bits,
    /// an odd multiply mod 2^12 so every folded bit reaches the top, then a
    /// multiply-shift reduction onto `slices`.
    #[inline]
    pub fn slice_of(&self, hpa: u64) -> usize {
        slice_hash(hpa, self.slices)
    }

    /// Number of LLC rows in one (L2 color, page offset) partition.
    pub fn rows_per_partition(&self) -> usize {
        1 << self
            .index_bits(Level::Llc)
            .saturating_sub(self.index_bits(Level::L2))
    }

    /// Parse `key=value` lines. Every geometry key is required.
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let kv = parse_kv(text)?;
        let num = |key: &'static str| -> Result<usize, ConfigError> {
            let (line, raw) = kv.get(key).ok_or(ConfigError::MissingKey(key.to_string()))?;
            raw.parse().map_err(|_| ConfigError::Invalid {
                line: *line,
                key: key.to_string(),
                message: format!("expected a positive integer, got `{raw}`"),
            })
        };
        let parsed = |key: &'static str| -> Result<&str, ConfigError> {
            kv.get(key)
                .map(|(_, v)| v.as_str())
                .ok_or(ConfigError::MissingKey(key.to_string()))
        };
        let inclusivity = parsed("inclusivity")?
            .parse()
            .map_err(|message| invalid(&kv, "inclusivity", message))?;
        let replacement = parsed("replacement")?
            .parse()
            .map_err(|message| invalid(&kv, "replacement", message))?;
        let geometry = Self {
            line_size: kv
                .get("line_size")
                .map(|(_, v)| v.parse().unwrap_or(0))
                .unwrap_or(64),
            l2_ways: num("l2_ways")?,
            l2_sets: num("l2_sets")?,
            llc_ways: num("llc_ways")?,
            llc_sets: num("llc_sets")?,
            slices: num("slices")?,
            inclusivity,
            replacement,
        };
        geometry
            .validate()
            .map_err(|e| ConfigError::Geometry(e.to_string()))?;
        Ok(geometry)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "line_size={}\nl2_ways={}\nl2_sets={}\nllc_ways={}\nllc_sets={}\nslices={}\ninclusivity={}\nreplacement={}\n",
            self.line_size,
            self.l2_ways,
            self.l2_sets,
            self.llc_ways,
            self.llc_sets,
            self.slices,
            match self.inclusivity {
                Inclusivity::Inclusive => "inclusive",
                Inclusivity::NonInclusive => "non-inclusive",
            },
            self.replacement
        )
    }
}

fn invalid(
    kv: &std::collections::BTreeMap<String, (usize, String)>,
    key: &str,
    message: String,
) -> ConfigError {
    ConfigError::Invalid {
        line: kv.get(key).map(|(l, _)| *l).unwrap_or(0),
        key: key.to_string(),
        message,
    }
}

#[inline]
pub fn slice_hash(hpa: u64, slices: usize) -> usize {
    if slices == 1 {
        return 0;
    }
    let x = (hpa >> LINE_SHIFT) & ((1 << 30) - 1);
    let folded = (x ^ (x >> 12) ^ (x >> 24)) & 0xfff;
    let mixed = (folded * 0x9e5) & 0xfff;
    ((mixed as usize) * slices) >> 12
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_one_shape() {
        let g = CacheGeometry::skylake_sp();
        g.validate().unwrap();
        assert_eq!(g.uncontrollable_bits(Level::L2), 4);
        assert_eq!(g.uncontrollable_bits(Level::Llc), 5);
        assert_eq!(g.colors(Level::L2), 16);
        assert_eq!(g.colors(Level::Llc), 32);
        assert_eq!(g.rows_per_partition(), 2);
    }

    #[test]
    fn set_index_examples() {
        let g = CacheGeometry::skylake_sp();
        assert_eq!(g.set_index(Level::L2, 0), 0);
        assert_eq!(g.set_index(Level::Llc, 0), 0);
        assert_eq!(g.set_index(Level::L2, 0x8000), 512);
        assert_eq!(g.set_index(Level::Llc, 0x1_0000), 1024);
        assert_eq!(g.set_index(Level::L2, 0x1_0000), 0);
    }

    #[test]
    fn slice_hash_is_deterministic_and_bounded() {
        let g = CacheGeometry::skylake_sp();
        for hpa in [0u64, 0x40, 0x1234_5678_40, 0xf_ffff_ffc0] {
            assert_eq!(g.slice_of(hpa), g.slice_of(hpa));
            assert!(g.slice_of(hpa) < 20);
        }
        assert_eq!(slice_hash(0xdead_beef_c0, 1), 0);
    }

    #[test]
    fn slice_hash_uniform_within_a_set() {
        // Count-based check: 1e5 random lines with LLC set index 0.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 20];
        let n = 100_000;
        for _ in 0..n {
            let tag: u64 = rng.gen_range(0..(1u64 << 19));
            let hpa = tag << 17; // bits [16:6] zero
            counts[slice_hash(hpa, 20)] += 1;
        }
        let expect = n as f64 / 20.0;
        for c in counts {
            assert!((c as f64 - expect).abs() <= 0.05 * expect, "{c} vs {expect}");
        }
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut g = CacheGeometry::skylake_sp();
        g.l2_sets = 1000;
        assert_eq!(g.validate(), Err(GeometryError::NotPowerOfTwo("l2_sets", 1000)));
        let mut g = CacheGeometry::skylake_sp();
        g.slices = 0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn kv_round_trip_and_missing_key() {
        let g = CacheGeometry::skylake_sp();
        assert_eq!(CacheGeometry::from_kv(&g.to_kv()).unwrap(), g);
        let text = g.to_kv().replace("llc_ways=11\n", "");
        match CacheGeometry::from_kv(&text) {
            Err(ConfigError::MissingKey(k)) => assert_eq!(k, "llc_ways"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
