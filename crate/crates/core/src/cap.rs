//! Color-aware page-cache allocation: pages for file data come from the most
//! contended virtual color first, so streaming reads pile into a zone that
//! is already polluted instead of spreading over everyone's.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::addr::{LINES_PER_PAGE, LINE_SHIFT, PAGE_SHIFT};
use crate::cache::{ActorId, HitLevel};
use crate::cas::tier_domains;
use crate::error::Result;
use crate::machine::Machine;
use crate::vcol::ColoredFreeLists;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapConfig {
    /// Page-cache budget in pages.
    pub capacity: usize,
    pub tiers: usize,
    pub min_gap: f64,
    /// Consecutive demotions of the allocation color before reclaiming.
    pub recolor_after: usize,
    /// Follow the contention ranking; off means fixed color-id order.
    pub ranking: bool,
}

impl Default for CapConfig {
    fn default() -> Self {
        Self {
            capacity: 16,
            tiers: 2,
            min_gap: 0.5,
            recolor_after: 3,
            ranking: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColorRanking {
    /// Colors, most contended first; ties by color id.
    pub order: Vec<u32>,
    /// Tier per color, higher is hotter.
    pub tier: Vec<usize>,
}

impl ColorRanking {
    pub fn uniform(colors: usize) -> Self {
        Self {
            order: (0..colors as u32).collect(),
            tier: vec![0; colors],
        }
    }

    pub fn hottest(&self) -> Option<u32> {
        self.order.first().copied()
    }
}

pub fn rank_colors(rates: &[f64], tiers: usize, min_gap: f64) -> ColorRanking {
    let mut order: Vec<u32> = (0..rates.len() as u32).collect();
    order.sort_by(|&a, &b| rates[b as usize].total_cmp(&rates[a as usize]).then(a.cmp(&b)));
    ColorRanking {
        order,
        tier: tier_domains(rates, tiers, min_gap),
    }
}

/// Per-color rates from aggregates keyed by color; missing colors read 0.
pub fn color_rates(by_color: &BTreeMap<u32, f64>, colors: usize) -> Vec<f64> {
    (0..colors as u32)
        .map(|c| by_color.get(&c).copied().unwrap_or(0.0))
        .collect()
}

/// Tracks whether the color being allocated from keeps ranking below the
/// current hottest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecolorTracker {
    pub current: Option<u32>,
    pub streak: usize,
    pub reclaims: usize,
}

impl RecolorTracker {
    /// Observe one interval's ranking; true when a reclaim is due.
    pub fn maybe_recolor(&mut self, ranking: &ColorRanking, after: usize) -> bool {
        let Some(top) = ranking.hottest() else {
            return false;
        };
        let Some(cur) = self.current else {
            self.current = Some(top);
            return false;
        };
        if ranking.tier[cur as usize] < ranking.tier[top as usize] {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= after.max(1) {
            self.current = Some(top);
            self.streak = 0;
            self.reclaims += 1;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CachedPage {
    pub gva_page: u64,
    pub color: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ActorCounters {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PageCache {
    cfg: CapConfig,
    ranking: ColorRanking,
    pages: BTreeMap<u64, CachedPage>,
    fifo: VecDeque<u64>,
    pos: usize,
    pub counters: BTreeMap<ActorId, ActorCounters>,
    pub uncolored_fallbacks: u64,
    pub last_color: Option<u32>,
}

impl PageCache {
    pub fn new(cfg: CapConfig, colors: usize) -> Self {
        Self {
            cfg,
            ranking: ColorRanking::uniform(colors),
            pages: BTreeMap::new(),
            fifo: VecDeque::new(),
            pos: 0,
            counters: BTreeMap::new(),
            uncolored_fallbacks: 0,
            last_color: None,
        }
    }

    pub fn config(&self) -> &CapConfig {
        &self.cfg
    }

    pub fn ranking(&self) -> &ColorRanking {
        &self.ranking
    }

    /// Adopt a new ranking; allocation restarts from its hottest color.
    pub fn set_ranking(&mut self, ranking: ColorRanking) {
        if self.cfg.ranking && ranking.order != self.ranking.order {
            self.ranking = ranking;
            self.pos = 0;
        }
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn cached(&self, file_page: u64) -> Option<CachedPage> {
        self.pages.get(&file_page).copied()
    }

    pub fn current_color(&self) -> Option<u32> {
        self.ranking.order.get(self.pos).copied()
    }

    /// Take a page from the current color, moving down the ranking as lists
    /// run dry; with every list empty, fall back to `fallback`.
    pub fn alloc_page_cache(
        &mut self,
        lists: &mut ColoredFreeLists,
        fallback: impl FnOnce() -> Result<u64>,
    ) -> Result<CachedPage> {
        while self.pos < self.ranking.order.len() {
            let c = self.ranking.order[self.pos];
            if let Some(p) = lists.pop(c) {
                self.last_color = Some(c);
                return Ok(CachedPage {
                    gva_page: p,
                    color: Some(c),
                });
            }
            self.pos += 1;
        }
        self.uncolored_fallbacks += 1;
        self.last_color = None;
        let p = match lists.pop_uncolored() {
            Some(p) => p,
            None => fallback()?,
        };
        Ok(CachedPage { gva_page: p, color: None })
    }

    fn release(page: CachedPage, lists: &mut ColoredFreeLists) {
        match page.color {
            Some(c) => lists.insert(c, page.gva_page),
            None => lists.insert_uncolored(page.gva_page),
        }
    }

    /// Drop every cached page back onto its list.
    pub fn reclaim(&mut self, lists: &mut ColoredFreeLists) -> usize {
        let n = self.pages.len();
        for f in self.fifo.drain(..) {
            if let Some(p) = self.pages.remove(&f) {
                Self::release(p, lists);
            }
        }
        self.pos = 0;
        n
    }

    /// Read one file page as `actor`. A miss allocates a page
    /// (evicting the oldest cached page at capacity) and streams its lines
    /// through the caches. Returns whether it hit.
    pub fn access_file(
        &mut self,
        m: &mut Machine,
        lists: &mut ColoredFreeLists,
        actor: ActorId,
        file_page: u64,
    ) -> Result<bool> {
        let ctr = self.counters.entry(actor).or_default();
        if self.pages.contains_key(&file_page) {
            ctr.hits += 1;
            return Ok(true);
        }
        ctr.misses += 1;
        if self.pages.len() >= self.cfg.capacity.max(1) {
            if let Some(old) = self.fifo.pop_front() {
                if let Some(p) = self.pages.remove(&old) {
                    Self::release(p, lists);
                }
            }
        }
        let page = self.alloc_page_cache(lists, || m.alloc_page())?;
        self.pages.insert(file_page, page);
        self.fifo.push_back(file_page);
        let base = page.gva_page << PAGE_SHIFT;
        for i in 0..LINES_PER_PAGE {
            m.load_as(actor, base | (i << LINE_SHIFT), false)?;
        }
        Ok(false)
    }

    pub fn csv_row(&self, interval: usize, actor: ActorId) -> String {
        let c = self.counters.get(&actor).copied().unwrap_or_default();
        format!(
            "{interval},{actor},{},{},{}",
            c.hits,
            c.misses,
            self.last_color.map_or(String::new(), |c| c.to_string())
        )
    }
}

pub const CAP_CSV_HEADER: &str = "interval,actor,hits,misses,alloc_color";

/// Sequential file reader: one page per step, wrapping at the file end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScanActor {
    pub actor: ActorId,
    pub file_pages: u64,
    pub next: u64,
}

impl ScanActor {
    pub fn step(&mut self, m: &mut Machine, cache: &mut PageCache, lists: &mut ColoredFreeLists) -> Result<bool> {
        let hit = cache.access_file(m, lists, self.actor, self.next)?;
        self.next = (self.next + 1) % self.file_pages.max(1);
        Ok(hit)
    }
}

/// Loops over a fixed working set, counting accesses served from memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReuseActor {
    pub actor: ActorId,
    pub lines: Vec<u64>,
    pub next: usize,
    pub accesses: u64,
    pub misses: u64,
}

impl ReuseActor {
    pub fn new(actor: ActorId, pages: &[u64]) -> Self {
        let lines = pages
            .iter()
            .flat_map(|&p| (0..LINES_PER_PAGE).map(move |i| (p << PAGE_SHIFT) | (i << LINE_SHIFT)))
            .collect();
        Self {
            actor,
            lines,
            next: 0,
            accesses: 0,
            misses: 0,
        }
    }

    /// One pass over the working set.
    pub fn pass(&mut self, m: &mut Machine) -> Result<u64> {
        let mut missed = 0;
        for i in 0..self.lines.len() {
            let g = self.lines[(self.next + i) % self.lines.len()];
            if m.load_as(self.actor, g, false)? == HitLevel::Memory {
                missed += 1;
            }
        }
        self.accesses += self.lines.len() as u64;
        self.misses += missed;
        Ok(missed)
    }

    pub fn miss_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.misses as f64 / self.accesses as f64
        }
    }
}

/// Exact two-sided sign test p-value for `wins` successes out of `n`
/// untied pairs.
pub fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins);
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

pub fn cap_csv(rows: &[String]) -> String {
    let mut s = String::from(CAP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    s
}
