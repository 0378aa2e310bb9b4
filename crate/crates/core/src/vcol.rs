//! Virtual page coloring: L2 color filters, their per-offset replicas,
//! parallel page classification, and colored free lists.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;

use crate::addr::{LINE_SIZE, PAGE_SHIFT};
use crate::error::Result;
use crate::evset::{self, build_from_pool, pool_size, test_eviction, CandidatePool, Ctx, EvictionSet};
use crate::geometry::Level;
use crate::machine::Machine;
use crate::timing::LatencyClass;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum VcolError {
    #[error("only {found} of {expected} color filters could be built")]
    PartialPalette { found: usize, expected: usize },
    #[error("{0} filters do not fit in one page's line offsets")]
    TooManyFilters(usize),
    #[error("refill budget must be at least one page")]
    EmptyBudget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColorFilter {
    pub color: u32,
    /// Minimal L2 set at page offset 0.
    pub base: EvictionSet,
}

impl ColorFilter {
    /// Offset this filter probes at during parallel classification.
    pub fn slot_offset(&self) -> u64 {
        self.color as u64 * LINE_SIZE
    }

    pub fn replica(&self, offset: u64) -> Result<Vec<u64>> {
        shift_filter(self, offset)
    }
}

pub fn shift_filter(filter: &ColorFilter, offset: u64) -> Result<Vec<u64>> {
    Ok(filter.base.shifted(offset)?.members)
}

/// One minimal L2 set per reachable color, all at page offset 0. Virtual
/// color ids are assigned in discovery order. A pool that misses a color is
/// released and retried once with a larger scale.
pub fn build_color_filters(m: &mut Machine, ctx: &mut Ctx) -> Result<Vec<ColorFilter>> {
    let expected = m.geometry().colors(Level::L2);
    let mut found = 0;
    for attempt in 0..2 {
        let n = pool_size(m.geometry(), Level::L2, ctx.cfg.scale * (attempt + 1));
        let pages = m.alloc_pages(n)?;
        let pool = CandidatePool::from_pages(Level::L2, 0, &pages)?;
        let report = build_from_pool(m, ctx, &pool, expected)?;
        found = report.sets.len();
        let used: std::collections::BTreeSet<u64> = if found == expected {
            report
                .sets
                .iter()
                .flat_map(|s| s.members.iter().map(|g| g >> PAGE_SHIFT))
                .collect()
        } else {
            Default::default()
        };
        for p in pages.into_iter().filter(|p| !used.contains(p)) {
            m.free_page(p);
        }
        if found == expected {
            return Ok(report
                .sets
                .into_iter()
                .enumerate()
                .map(|(i, mut base)| {
                    base.color = Some(i as u32);
                    ColorFilter {
                        color: i as u32,
                        base,
                    }
                })
                .collect());
        }
    }
    Err(VcolError::PartialPalette { found, expected }.into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassifyStats {
    pub pages: u64,
    pub parallel: u64,
    pub retries: u64,
    pub sequential: u64,
    pub uncolored: u64,
}

const PARALLEL_RETRIES: usize = 2;

/// Probe the page at every filter's slot offset at once; `Some` only when
/// exactly one probe was evicted.
fn classify_once(m: &mut Machine, ctx: &Ctx, page: u64, replicas: &[(u32, Vec<u64>)]) -> Result<Option<u32>> {
    let base = page << PAGE_SHIFT;
    let probes: Vec<u64> = replicas
        .iter()
        .map(|(c, _)| base | (*c as u64 * LINE_SIZE))
        .collect();
    m.warm_timer(ctx.vcpu);
    m.batch_load(ctx.vcpu, &probes)?;
    for _ in 0..ctx.cfg.rounds.max(1) {
        for (_, r) in replicas {
            m.batch_load(ctx.vcpu, r)?;
        }
    }
    let mut hit = None;
    for (i, &p) in probes.iter().enumerate() {
        match m.timed_load(ctx.vcpu, p)? {
            None => return Ok(None),
            Some(LatencyClass::L2OrFaster) => {}
            Some(_) => {
                if hit.is_some() {
                    return Ok(None);
                }
                hit = Some(replicas[i].0);
            }
        }
    }
    Ok(hit)
}

/// Test the page against each filter in turn at offset 0.
pub fn classify_page_sequential(m: &mut Machine, ctx: &mut Ctx, page: u64, filters: &[ColorFilter]) -> Result<Option<u32>> {
    let target = page << PAGE_SHIFT;
    let mut hit = None;
    for f in filters {
        if f.base.members.contains(&target) {
            return Ok(Some(f.color));
        }
        if test_eviction(m, ctx, Level::L2, &f.base.members, target)? {
            if hit.is_some() {
                return Ok(None);
            }
            hit = Some(f.color);
        }
    }
    Ok(hit)
}

/// Color filtering for many pages with precomputed replicas.
pub struct Classifier {
    replicas: Vec<(u32, Vec<u64>)>,
    filters: Vec<ColorFilter>,
    pub stats: ClassifyStats,
}

impl Classifier {
    pub fn new(filters: &[ColorFilter]) -> Result<Self> {
        let max = (1u64 << PAGE_SHIFT) / LINE_SIZE;
        if filters.len() as u64 > max {
            return Err(VcolError::TooManyFilters(filters.len()).into());
        }
        let replicas = filters
            .iter()
            .map(|f| Ok((f.color, f.replica(f.slot_offset())?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            replicas,
            filters: filters.to_vec(),
            stats: ClassifyStats::default(),
        })
    }

    pub fn filters(&self) -> &[ColorFilter] {
        &self.filters
    }

    /// Parallel test with up to two retries, then the sequential fallback;
    /// `None` leaves the page uncolored.
    pub fn classify(&mut self, m: &mut Machine, ctx: &mut Ctx, page: u64) -> Result<Option<u32>> {
        self.stats.pages += 1;
        if let Some(f) = self
            .filters
            .iter()
            .find(|f| f.base.members.iter().any(|g| g >> PAGE_SHIFT == page))
        {
            // A filter's own page cannot be probed against itself.
            self.stats.sequential += 1;
            return Ok(Some(f.color));
        }
        for attempt in 0..=PARALLEL_RETRIES {
            if attempt > 0 {
                self.stats.retries += 1;
            }
            if let Some(c) = classify_once(m, ctx, page, &self.replicas)? {
                self.stats.parallel += 1;
                return Ok(Some(c));
            }
        }
        self.stats.sequential += 1;
        let c = classify_page_sequential(m, ctx, page, &self.filters)?;
        if c.is_none() {
            self.stats.uncolored += 1;
        }
        Ok(c)
    }
}

pub fn classify_page_parallel(m: &mut Machine, ctx: &mut Ctx, page: u64, filters: &[ColorFilter]) -> Result<Option<u32>> {
    Classifier::new(filters)?.classify(m, ctx, page)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ColoredFreeLists {
    lists: Vec<VecDeque<u64>>,
    uncolored: Vec<u64>,
}

impl ColoredFreeLists {
    pub fn new(colors: usize) -> Self {
        Self {
            lists: vec![VecDeque::new(); colors],
            uncolored: Vec::new(),
        }
    }

    pub fn colors(&self) -> usize {
        self.lists.len()
    }

    pub fn insert(&mut self, color: u32, page: u64) {
        self.lists[color as usize].push_back(page);
    }

    pub fn insert_uncolored(&mut self, page: u64) {
        self.uncolored.push(page);
    }

    pub fn pop(&mut self, color: u32) -> Option<u64> {
        self.lists.get_mut(color as usize)?.pop_front()
    }

    pub fn pop_uncolored(&mut self) -> Option<u64> {
        self.uncolored.pop()
    }

    pub fn len(&self, color: u32) -> usize {
        self.lists.get(color as usize).map_or(0, VecDeque::len)
    }

    pub fn uncolored_len(&self) -> usize {
        self.uncolored.len()
    }

    pub fn total(&self) -> usize {
        self.lists.iter().map(VecDeque::len).sum()
    }

    pub fn histogram(&self) -> Vec<usize> {
        self.lists.iter().map(VecDeque::len).collect()
    }

    /// Every (page, color) currently listed.
    pub fn assignments(&self) -> Vec<(u64, u32)> {
        let mut out = Vec::with_capacity(self.total());
        for (c, l) in self.lists.iter().enumerate() {
            out.extend(l.iter().map(|&p| (p, c as u32)));
        }
        out
    }

    /// `color,page_gva` lines.
    pub fn dump(&self) -> String {
        let mut s = String::from("color,page_gva\n");
        for (p, c) in self.assignments() {
            let _ = writeln!(s, "{c},{:#x}", p << PAGE_SHIFT);
        }
        s
    }

    pub fn is_consistent(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.lists
            .iter()
            .flatten()
            .chain(self.uncolored.iter())
            .all(|&p| seen.insert(p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefillReport {
    pub added: Vec<usize>,
    pub uncolored: usize,
    pub stats: ClassifyStats,
}

/// Allocate `budget` fresh pages, classify each, and file it.
pub fn refill_lists(
    m: &mut Machine,
    ctx: &mut Ctx,
    lists: &mut ColoredFreeLists,
    classifier: &mut Classifier,
    budget: usize,
) -> Result<RefillReport> {
    if budget == 0 {
        return Err(VcolError::EmptyBudget.into());
    }
    let before = classifier.stats;
    let mut added = vec![0; lists.colors()];
    let mut uncolored = 0;
    for _ in 0..budget {
        let page = m.alloc_page()?;
        match classifier.classify(m, ctx, page)? {
            Some(c) if (c as usize) < lists.colors() => {
                lists.insert(c, page);
                added[c as usize] += 1;
            }
            _ => {
                lists.insert_uncolored(page);
                uncolored += 1;
            }
        }
    }
    let s = classifier.stats;
    Ok(RefillReport {
        added,
        uncolored,
        stats: ClassifyStats {
            pages: s.pages - before.pages,
            parallel: s.parallel - before.parallel,
            retries: s.retries - before.retries,
            sequential: s.sequential - before.sequential,
            uncolored: s.uncolored - before.uncolored,
        },
    })
}

/// Virtual color against oracle L2 color, `table[virtual][oracle]`.
pub fn contingency(m: &Machine, assignments: &[(u64, u32)], colors: usize) -> Result<Vec<Vec<usize>>> {
    let mut t = vec![vec![0usize; m.geometry().colors(Level::L2)]; colors];
    for &(page, c) in assignments {
        let o = m.oracle_color(page << PAGE_SHIFT, Level::L2)?;
        t[c as usize][o as usize] += 1;
    }
    Ok(t)
}

/// Every non-empty row and column holds exactly one non-zero cell.
pub fn is_permutation(table: &[Vec<usize>]) -> bool {
    let cols = table.first().map_or(0, Vec::len);
    let row_ok = table.iter().all(|r| r.iter().filter(|&&x| x > 0).count() <= 1);
    let col_ok = (0..cols).all(|j| table.iter().filter(|r| r[j] > 0).count() <= 1);
    row_ok && col_ok
}

/// Share of pages whose virtual color is the most common one among pages
/// with the same GPA-derived color.
pub fn gpa_color_overlap(m: &Machine, assignments: &[(u64, u32)]) -> Result<f64> {
    if assignments.is_empty() {
        return Ok(1.0);
    }
    let colors = m.geometry().colors(Level::L2) as u64;
    let mut groups: BTreeMap<u64, BTreeMap<u32, usize>> = BTreeMap::new();
    for &(page, c) in assignments {
        let gpa = m
            .map()
            .gpa_page_of_gva(page)
            .ok_or(crate::mem::MemError::Fault(crate::addr::Address::gva(page << PAGE_SHIFT)))?;
        *groups.entry(gpa % colors).or_default().entry(c).or_default() += 1;
    }
    let modal: usize = groups.values().map(|g| g.values().copied().max().unwrap_or(0)).sum();
    Ok(modal as f64 / assignments.len() as f64)
}

pub fn histogram_csv(hist: &[usize]) -> String {
    let mut s = String::from("color,pages\n");
    for (c, n) in hist.iter().enumerate() {
        let _ = writeln!(s, "{c},{n}");
    }
    s
}

/// Pages grouped by virtual color, ready for LLC set construction.
pub fn color_groups(lists: &ColoredFreeLists) -> Vec<evset::ColorGroup> {
    let mut by: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (p, c) in lists.assignments() {
        by.entry(c).or_default().push(p);
    }
    by.into_iter()
        .map(|(color, pages)| evset::ColorGroup { color, pages })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evset::EvsetConfig;
    use crate::geometry::CacheGeometry;
    use crate::machine::MachineConfig;
    use crate::mem::{FragmentationProfile, TranslationConfig};

    fn machine(profile: FragmentationProfile, pages: usize, colors: Option<Vec<u32>>, seed: u64) -> Machine {
        let mut t = TranslationConfig::new(profile, pages);
        t.host_l2_colors = colors;
        Machine::new(MachineConfig::new(CacheGeometry::skylake_sp(), t, seed)).unwrap()
    }

    fn shuffled() -> FragmentationProfile {
        FragmentationProfile::Fragmented { shuffle: 1.0 }
    }

    #[test]
    fn sixteen_filters_without_duplicates() {
        let mut m = machine(shuffled(), 4096, None, 1);
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 1);
        let filters = build_color_filters(&mut m, &mut ctx).unwrap();
        assert_eq!(filters.len(), 16);
        let oracle: std::collections::BTreeSet<u32> = filters
            .iter()
            .map(|f| m.oracle_color(f.base.members[0], Level::L2).unwrap())
            .collect();
        assert_eq!(oracle.len(), 16);
        for f in &filters {
            assert_eq!(f.base.len(), 16);
            assert!(evset::oracle_congruent(&m, &f.base).unwrap());
        }
    }

    #[test]
    fn restricted_host_colors_give_partial_palette() {
        let mut m = machine(shuffled(), 4096, Some((0..8).collect()), 2);
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 2);
        let e = build_color_filters(&mut m, &mut ctx).unwrap_err();
        assert!(matches!(
            e,
            crate::Error::Vcol(VcolError::PartialPalette { found: 8, expected: 16 })
        ));
    }

    #[test]
    fn single_color_geometry() {
        let g = CacheGeometry {
            l2_ways: 4,
            l2_sets: 64,
            ..CacheGeometry::desk()
        };
        let mut m = Machine::new(MachineConfig::new(g, TranslationConfig::new(shuffled(), 512), 3)).unwrap();
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 3);
        assert_eq!(build_color_filters(&mut m, &mut ctx).unwrap().len(), 1);
    }

    #[test]
    fn replicas_shift_line_bits_only() {
        let mut m = machine(shuffled(), 4096, None, 4);
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 4);
        let filters = build_color_filters(&mut m, &mut ctx).unwrap();
        let f = &filters[3];
        assert_eq!(f.replica(0).unwrap(), f.base.members);
        let r = f.replica(0x40).unwrap();
        for (a, b) in f.base.members.iter().zip(&r) {
            assert_eq!(b - a, 0x40);
        }
        assert!(f.replica(0x20).is_err());
        // A page of the filter's color is evicted at the shifted offset.
        let target = loop {
            let p = m.alloc_page().unwrap();
            if m.oracle_color(p << 12, Level::L2).unwrap() == m.oracle_color(f.base.members[0], Level::L2).unwrap() {
                break (p << 12) | 0x40;
            }
        };
        assert!(test_eviction(&mut m, &mut ctx, Level::L2, &r, target).unwrap());
    }

    #[test]
    fn parallel_agrees_with_sequential_and_oracle() {
        let mut m = machine(shuffled(), 8192, None, 5);
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 5);
        let filters = build_color_filters(&mut m, &mut ctx).unwrap();
        let mut cls = Classifier::new(&filters).unwrap();
        let mut assignments = Vec::new();
        for _ in 0..300 {
            let p = m.alloc_page().unwrap();
            let a = cls.classify(&mut m, &mut ctx, p).unwrap().unwrap();
            let b = classify_page_sequential(&mut m, &mut ctx, p, &filters).unwrap().unwrap();
            assert_eq!(a, b);
            assignments.push((p, a));
        }
        let t = contingency(&m, &assignments, 16).unwrap();
        assert!(is_permutation(&t));
        assert_eq!(cls.stats.uncolored, 0);
    }

    #[test]
    fn replicas_touch_disjoint_l2_sets() {
        let mut m = machine(shuffled(), 4096, None, 6);
        let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 6);
        let filters = build_color_filters(&mut m, &mut ctx).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for f in &filters {
            let sets: std::collections::BTreeSet<usize> = f
                .replica(f.slot_offset())
                .unwrap()
                .iter()
                .map(|&g| m.oracle_l2_set(g).unwrap())
                .collect();
            assert_eq!(sets.len(), 1);
            assert!(seen.insert(*sets.iter().next().unwrap()));
        }
    }

    #[test]
    fn overlap_bounds() {
        let m = machine(FragmentationProfile::Contiguous, 1024, None, 7);
        let oracle: Vec<(u64, u32)> = (0..1024)
            .map(|p| (p, m.oracle_color(p << 12, Level::L2).unwrap()))
            .collect();
        assert_eq!(gpa_color_overlap(&m, &oracle).unwrap(), 1.0);
        let m = machine(shuffled(), 1024, None, 7);
        let oracle: Vec<(u64, u32)> = (0..1024)
            .map(|p| (p, m.oracle_color(p << 12, Level::L2).unwrap()))
            .collect();
        assert!(gpa_color_overlap(&m, &oracle).unwrap() < 0.5);
    }

    #[test]
    fn free_lists_bookkeeping() {
        let mut l = ColoredFreeLists::new(4);
        l.insert(1, 10);
        l.insert(1, 11);
        l.insert(3, 12);
        l.insert_uncolored(13);
        assert_eq!(l.histogram(), vec![0, 2, 0, 1]);
        assert_eq!(l.pop(1), Some(10));
        assert_eq!(l.pop(0), None);
        assert!(l.is_consistent());
        assert_eq!(l.dump(), "color,page_gva\n1,0xb000\n3,0xc000\n");
    }
}
