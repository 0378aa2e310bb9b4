//! Two-layer guest translation (GVA -> GPA -> HPA) with fragmentation,
//! host-side color restriction and dynamic remapping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{Address, Space, PAGE_OFFSET_MASK, PAGE_SHIFT};
use crate::geometry::{CacheGeometry, Level};

const FREE: u32 = u32::MAX;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MemError {
    #[error("guest must have at least one page")]
    EmptyGuest,
    #[error("host space of {host} pages cannot back {guest} guest pages (need {need})")]
    Capacity { guest: usize, host: u64, need: u64 },
    #[error("translation fault at {0}")]
    Fault(Address),
    #[error("cannot translate {from} to {to}")]
    Direction { from: Space, to: Space },
    #[error("remap fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error("shuffle degree must be in [0, 1], got {0}")]
    Shuffle(f64),
    #[error("no free host pages left for remapping")]
    OutOfHostPages,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FragmentationProfile {
    Contiguous,
    Fragmented { shuffle: f64 },
}

impl FragmentationProfile {
    pub fn shuffle_degree(&self) -> f64 {
        match *self {
            FragmentationProfile::Contiguous => 0.0,
            FragmentationProfile::Fragmented { shuffle } => shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapEvent {
    pub at_ms: f64,
    pub fraction: f64,
    /// Relative weights over host colors (HPA page number modulo the vector
    /// length, which should be a power of two).
    #[serde(default)]
    pub color_bias: Option<Vec<f64>>,
}

impl RemapEvent {
    pub fn new(at_ms: f64, fraction: f64) -> Self {
        Self {
            at_ms,
            fraction,
            color_bias: None,
        }
    }

    pub fn validate(&self) -> Result<(), MemError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(MemError::Fraction(self.fraction));
        }
        Ok(())
    }

    pub fn pages_affected(&self, guest_pages: usize) -> usize {
        ((self.fraction * guest_pages as f64).ceil() as usize).min(guest_pages)
    }
}

/// Everything needed to build a map besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub profile: FragmentationProfile,
    pub guest_pages: usize,
    /// Host pages = factor x guest pages.
    pub host_factor: u64,
    /// Restrict backing pages to these L2 colors (HPA bits [15:12]).
    pub host_l2_colors: Option<Vec<u32>>,
    /// Map GVA page n to GPA page n instead of a seeded permutation.
    pub gva_identity: bool,
    pub remaps: Vec<RemapEvent>,
}

impl TranslationConfig {
    pub fn new(profile: FragmentationProfile, guest_pages: usize) -> Self {
        Self {
            profile,
            guest_pages,
            host_factor: 4,
            host_l2_colors: None,
            gva_identity: false,
            remaps: Vec::new(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<TranslationMap, MemError> {
        TranslationMap::build(self, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationMap {
    profile: FragmentationProfile,
    gva_to_gpa: Vec<u32>,
    gpa_to_gva: Vec<u32>,
    gpa_to_hpa: Vec<u64>,
    hpa_owner: Vec<u32>,
    allowed_l2_colors: Option<u16>,
    remap_schedule: Vec<RemapEvent>,
    seed: u64,
}

pub fn build_translation(
    profile: FragmentationProfile,
    guest_pages: usize,
    seed: u64,
) -> Result<TranslationMap, MemError> {
    TranslationConfig::new(profile, guest_pages).build(seed)
}

impl TranslationMap {
    pub fn build(cfg: &TranslationConfig, seed: u64) -> Result<Self, MemError> {
        let n = cfg.guest_pages;
        if n == 0 {
            return Err(MemError::EmptyGuest);
        }
        let shuffle = cfg.profile.shuffle_degree();
        if !(0.0..=1.0).contains(&shuffle) {
            return Err(MemError::Shuffle(shuffle));
        }
        for ev in &cfg.remaps {
            ev.validate()?;
        }
        let host_pages = cfg.host_factor.saturating_mul(n as u64);
        if cfg.host_factor < 4 {
            return Err(MemError::Capacity {
                guest: n,
                host: host_pages,
                need: 4 * n as u64,
            });
        }
        let allowed_l2_colors = cfg
            .host_l2_colors
            .as_ref()
            .map(|cs| cs.iter().fold(0u16, |m, &c| m | (1 << (c & 15))));
        let frames: Vec<u64> = (0..host_pages)
            .filter(|&p| allowed_l2_colors.is_none_or(|m| m & (1 << (p & 15)) != 0))
            .collect();
        if (frames.len() as u64) < n as u64 {
            return Err(MemError::Capacity {
                guest: n,
                host: frames.len() as u64,
                need: n as u64,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gva_to_gpa: Vec<u32> = (0..n as u32).collect();
        if !cfg.gva_identity {
            gva_to_gpa.shuffle(&mut rng);
        }
        let mut gpa_to_gva = vec![0u32; n];
        for (gva, &gpa) in gva_to_gpa.iter().enumerate() {
            gpa_to_gva[gpa as usize] = gva as u32;
        }

        let base = rng.gen_range(0..=frames.len() - n);
        let mut gpa_to_hpa: Vec<u64> = frames[base..base + n].to_vec();
        if shuffle > 0.0 {
            let k = ((shuffle * n as f64).ceil() as usize).min(n);
            let mut pages: Vec<usize> = (0..n).collect();
            let (chosen, _) = pages.partial_shuffle(&mut rng, k);
            let mut pool: Vec<u64> = chosen.iter().map(|&g| gpa_to_hpa[g]).collect();
            pool.extend_from_slice(&frames[..base]);
            pool.extend_from_slice(&frames[base + n..]);
            pool.shuffle(&mut rng);
            for (&g, &h) in chosen.iter().zip(pool.iter()) {
                gpa_to_hpa[g] = h;
            }
        }

        let mut hpa_owner = vec![FREE; host_pages as usize];
        for (gpa, &hpa) in gpa_to_hpa.iter().enumerate() {
            debug_assert_eq!(hpa_owner[hpa as usize], FREE);
            hpa_owner[hpa as usize] = gpa as u32;
        }
        let mut remap_schedule = cfg.remaps.clone();
        remap_schedule.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
        Ok(Self {
            profile: cfg.profile,
            gva_to_gpa,
            gpa_to_gva,
            gpa_to_hpa,
            hpa_owner,
            allowed_l2_colors,
            remap_schedule,
            seed,
        })
    }

    pub fn guest_pages(&self) -> usize {
        self.gpa_to_hpa.len()
    }

    pub fn host_pages(&self) -> u64 {
        self.hpa_owner.len() as u64
    }

    pub fn profile(&self) -> FragmentationProfile {
        self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn remap_schedule(&self) -> &[RemapEvent] {
        &self.remap_schedule
    }

    pub fn set_remap_schedule(&mut self, mut events: Vec<RemapEvent>) -> Result<(), MemError> {
        for ev in &events {
            ev.validate()?;
        }
        events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
        self.remap_schedule = events;
        Ok(())
    }

    #[inline]
    pub fn gpa_page_of_gva(&self, gva_page: u64) -> Option<u64> {
        self.gva_to_gpa.get(gva_page as usize).map(|&p| p as u64)
    }

    #[inline]
    pub fn hpa_page_of_gpa(&self, gpa_page: u64) -> Option<u64> {
        self.gpa_to_hpa.get(gpa_page as usize).copied()
    }

    /// GVA to HPA without constructing `Address` values; the hot path.
    #[inline]
    pub fn gva_to_hpa(&self, gva: u64) -> Option<u64> {
        let gpa_page = *self.gva_to_gpa.get((gva >> PAGE_SHIFT) as usize)?;
        let hpa_page = self.gpa_to_hpa[gpa_page as usize];
        Some((hpa_page << PAGE_SHIFT) | (gva & PAGE_OFFSET_MASK))
    }

    pub fn translate(&self, addr: Address, to: Space) -> Result<Address, MemError> {
        if addr.space > to {
            return Err(MemError::Direction {
                from: addr.space,
                to,
            });
        }
        let fault = || MemError::Fault(addr);
        let offset = addr.page_offset();
        let mut page = addr.page_number();
        let mut space = addr.space;
        while space < to {
            page = match space {
                Space::Gva => self.gpa_page_of_gva(page).ok_or_else(fault)?,
                Space::Gpa => self.hpa_page_of_gpa(page).ok_or_else(fault)?,
                Space::Hpa => unreachable!(),
            };
            space = match space {
                Space::Gva => Space::Gpa,
                _ => Space::Hpa,
            };
        }
        Ok(Address::new((page << PAGE_SHIFT) | offset, to))
    }

    /// Inverse lookup back to the GVA page backed by `hpa_page`.
    pub fn gva_page_of_hpa(&self, hpa_page: u64) -> Option<u64> {
        let gpa = *self.hpa_owner.get(hpa_page as usize)?;
        (gpa != FREE).then(|| self.gpa_to_gva[gpa as usize] as u64)
    }

    pub fn gpa_page_of_hpa(&self, hpa_page: u64) -> Option<u64> {
        let gpa = *self.hpa_owner.get(hpa_page as usize)?;
        (gpa != FREE).then_some(gpa as u64)
    }

    pub fn gva_page_of_gpa(&self, gpa_page: u64) -> Option<u64> {
        self.gpa_to_gva.get(gpa_page as usize).map(|&p| p as u64)
    }

    fn frame_allowed(&self, frame: u64) -> bool {
        self.allowed_l2_colors
            .is_none_or(|m| m & (1 << (frame & 15)) != 0)
    }

    /// Give ⌈fraction·pages⌉ randomly chosen GPA pages fresh host backing.
    /// Returns the remapped GPA pages in the order they were chosen.
    pub fn apply_remap(&mut self, event: &RemapEvent, rng: &mut impl Rng) -> Result<Vec<u64>, MemError> {
        event.validate()?;
        let n = self.guest_pages();
        let k = event.pages_affected(n);
        let ncolors = event
            .color_bias
            .as_ref()
            .map_or(1, |b| b.len().max(1).next_power_of_two());
        let mut free: Vec<Vec<u64>> = vec![Vec::new(); ncolors];
        for frame in 0..self.host_pages() {
            if self.hpa_owner[frame as usize] == FREE && self.frame_allowed(frame) {
                free[(frame as usize) & (ncolors - 1)].push(frame);
            }
        }
        let total_free: usize = free.iter().map(Vec::len).sum();
        if total_free < k {
            return Err(MemError::OutOfHostPages);
        }

        let mut pages: Vec<u64> = (0..n as u64).collect();
        let (chosen, _) = pages.partial_shuffle(rng, k);
        let chosen = chosen.to_vec();
        let mut released = Vec::with_capacity(k);
        for &gpa in &chosen {
            let bucket = pick_bucket(&free, event.color_bias.as_deref(), rng);
            let list = &mut free[bucket];
            let idx = rng.gen_range(0..list.len());
            let frame = list.swap_remove(idx);
            let old = self.gpa_to_hpa[gpa as usize];
            released.push(old);
            self.gpa_to_hpa[gpa as usize] = frame;
            self.hpa_owner[frame as usize] = gpa as u32;
        }
        for old in released {
            if self.hpa_owner[old as usize] != FREE
                && self.gpa_to_hpa[self.hpa_owner[old as usize] as usize] != old
            {
                self.hpa_owner[old as usize] = FREE;
            }
        }
        Ok(chosen)
    }

    /// Successor map after `event`, leaving `self` untouched.
    pub fn remapped(&self, event: &RemapEvent, rng: &mut impl Rng) -> Result<Self, MemError> {
        let mut next = self.clone();
        next.apply_remap(event, rng)?;
        Ok(next)
    }

    /// `gpa_page hpa_page` per line, in GPA order.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.guest_pages() * 16);
        for (gpa, hpa) in self.gpa_to_hpa.iter().enumerate() {
            let _ = writeln!(out, "{gpa} {hpa}");
        }
        out
    }

    /// Both per-page maps injective and mutually consistent.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![false; self.guest_pages()];
        for &g in &self.gva_to_gpa {
            if std::mem::replace(&mut seen[g as usize], true) {
                return false;
            }
        }
        let mut owners = 0usize;
        for (frame, &gpa) in self.hpa_owner.iter().enumerate() {
            if gpa != FREE {
                owners += 1;
                if self.gpa_to_hpa[gpa as usize] != frame as u64 {
                    return false;
                }
            }
        }
        owners == self.guest_pages()
    }
}

fn pick_bucket(free: &[Vec<u64>], bias: Option<&[f64]>, rng: &mut impl Rng) -> usize {
    let weight = |i: usize| -> f64 {
        if free[i].is_empty() {
            return 0.0;
        }
        match bias {
            Some(b) => b.get(i).copied().unwrap_or(0.0).max(0.0),
            None => free[i].len() as f64,
        }
    };
    let mut weights: Vec<f64> = (0..free.len()).map(weight).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        // Biased colors exhausted: fall back to uniform over free pages.
        weights = free.iter().map(|l| l.len() as f64).collect();
    }
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Hypercall analog: the true page color of a guest virtual address.
pub fn oracle_color(
    map: &TranslationMap,
    geometry: &CacheGeometry,
    gva: Address,
    level: Level,
) -> Result<u32, MemError> {
    let hpa = map.translate(gva, Space::Hpa)?;
    Ok(geometry.color_of(level, hpa.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn contiguous(n: usize, seed: u64) -> TranslationMap {
        build_translation(FragmentationProfile::Contiguous, n, seed).unwrap()
    }

    #[test]
    fn contiguous_pages_are_consecutive() {
        let m = contiguous(4, 1);
        let h: Vec<u64> = (0..4).map(|g| m.hpa_page_of_gpa(g).unwrap()).collect();
        assert!(h.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(m.check_invariants());
    }

    #[test]
    fn zero_pages_is_an_error() {
        assert_eq!(
            build_translation(FragmentationProfile::Fragmented { shuffle: 0.5 }, 0, 1),
            Err(MemError::EmptyGuest)
        );
        let mut cfg = TranslationConfig::new(FragmentationProfile::Contiguous, 8);
        cfg.host_factor = 2;
        assert!(matches!(cfg.build(1), Err(MemError::Capacity { .. })));
    }

    #[test]
    fn full_shuffle_splits_gpa_colors() {
        let m = build_translation(FragmentationProfile::Fragmented { shuffle: 1.0 }, 1024, 7).unwrap();
        let mut spans: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for gpa in 0..1024u64 {
            let hpa = m.hpa_page_of_gpa(gpa).unwrap();
            spans.entry(gpa & 15).or_default().insert(hpa & 15);
        }
        assert!(spans.values().any(|s| s.len() >= 2));
    }

    #[test]
    fn translate_identity_and_composition() {
        let mut cfg = TranslationConfig::new(FragmentationProfile::Contiguous, 16);
        cfg.gva_identity = true;
        let m = cfg.build(3).unwrap();
        let gpa = m.translate(Address::gva(0x1040), Space::Gpa).unwrap();
        assert_eq!(gpa, Address::gpa(0x1040));
        let hpa = m.translate(Address::gva(0x2a3c), Space::Hpa).unwrap();
        assert_eq!(hpa.page_offset(), 0xa3c);
        assert_eq!(hpa.page_number(), m.hpa_page_of_gpa(2).unwrap());
        assert!(matches!(
            m.translate(Address::gva(16 << 12), Space::Hpa),
            Err(MemError::Fault(_))
        ));
        assert!(matches!(
            m.translate(Address::hpa(0), Space::Gva),
            Err(MemError::Direction { .. })
        ));
    }

    #[test]
    fn remap_changes_exact_page_count() {
        let m = contiguous(1000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let next = m.remapped(&RemapEvent::new(0.0, 0.5), &mut rng).unwrap();
        let changed = (0..1000)
            .filter(|&g| m.hpa_page_of_gpa(g) != next.hpa_page_of_gpa(g))
            .count();
        assert_eq!(changed, 500);
        assert!(next.check_invariants());

        let all = m.remapped(&RemapEvent::new(0.0, 1.0), &mut rng).unwrap();
        assert!((0..1000).all(|g| m.hpa_page_of_gpa(g) != all.hpa_page_of_gpa(g)));
        assert!(m.remapped(&RemapEvent::new(0.0, 0.0), &mut rng).is_err());
    }

    #[test]
    fn biased_remap_skews_colors() {
        let m = contiguous(1024, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bias = vec![1.0; 32];
        bias[7] = 40.0;
        let ev = RemapEvent {
            at_ms: 0.0,
            fraction: 1.0,
            color_bias: Some(bias),
        };
        let next = m.remapped(&ev, &mut rng).unwrap();
        let mut hist = [0usize; 32];
        for g in 0..1024 {
            hist[(next.hpa_page_of_gpa(g).unwrap() & 31) as usize] += 1;
        }
        let max = *hist.iter().max().unwrap();
        assert_eq!(hist[7], max);
        assert!(hist[7] > 1024 / 32 * 2);
    }

    #[test]
    fn restricted_host_colors() {
        let mut cfg = TranslationConfig::new(FragmentationProfile::Fragmented { shuffle: 1.0 }, 512);
        cfg.host_l2_colors = Some((0..8).collect());
        let m = cfg.build(1).unwrap();
        assert!((0..512).all(|g| m.hpa_page_of_gpa(g).unwrap() & 15 < 8));
    }

    #[test]
    fn oracle_colors_from_hpa_bits() {
        let g = CacheGeometry::skylake_sp();
        assert_eq!(g.color_of(Level::L2, 0xf000), 15);
        assert_eq!(g.color_of(Level::Llc, 0x1_0000), 16);
        assert_eq!(g.color_of(Level::L2, 0x1_0000), 0);
        let m = contiguous(64, 8);
        let a = oracle_color(&m, &g, Address::gva(0x3000), Level::Llc).unwrap();
        let b = oracle_color(&m, &g, Address::gva(0x3fc0), Level::Llc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_format() {
        let m = contiguous(3, 1);
        let text = m.dump();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let h0 = m.hpa_page_of_gpa(0).unwrap();
        assert_eq!(lines[0], format!("0 {h0}"));
    }

    proptest! {
        #[test]
        fn round_trip_and_offset_preserved(seed in 0u64..1000, n in 1usize..300, shuffle in 0.0f64..=1.0, off in 0u64..4096) {
            let m = build_translation(FragmentationProfile::Fragmented { shuffle }, n, seed).unwrap();
            prop_assert!(m.check_invariants());
            for page in [0, n as u64 / 2, n as u64 - 1] {
                let gva = Address::gva((page << 12) | off);
                let hpa = m.translate(gva, Space::Hpa).unwrap();
                prop_assert_eq!(hpa.page_offset(), off);
                prop_assert_eq!(m.gva_page_of_hpa(hpa.page_number()), Some(page));
                prop_assert_eq!(m.gva_to_hpa(gva.value), Some(hpa.value));
            }
        }

        #[test]
        fn contiguous_preserves_color_classes(seed in 0u64..500) {
            let m = contiguous(512, seed);
            let mut classes: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
            for gpa in 0..512u64 {
                classes.entry(gpa & 31).or_default().insert(m.hpa_page_of_gpa(gpa).unwrap() & 31);
            }
            prop_assert!(classes.values().all(|s| s.len() == 1));
        }

        #[test]
        fn color_oracle_is_bit_extraction(hpa in any::<u64>()) {
            let g = CacheGeometry::skylake_sp();
            prop_assert_eq!(g.color_of(Level::L2, hpa) as u64, (hpa >> 12) & 0xf);
            prop_assert_eq!(g.color_of(Level::Llc, hpa) as u64, (hpa >> 12) & 0x1f);
        }

        #[test]
        fn remap_keeps_injectivity(seed in 0u64..200, frac in 0.01f64..=1.0) {
            let mut m = contiguous(256, seed);
            let before = m.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let changed = m.apply_remap(&RemapEvent::new(0.0, frac), &mut rng).unwrap();
            prop_assert!(m.check_invariants());
            let set: BTreeSet<u64> = changed.iter().copied().collect();
            for g in 0..256u64 {
                let moved = before.hpa_page_of_gpa(g) != m.hpa_page_of_gpa(g);
                prop_assert_eq!(moved, set.contains(&g));
            }
        }
    }
}
