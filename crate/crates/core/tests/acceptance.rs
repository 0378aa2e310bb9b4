//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use vcache::cas::SchedPolicy;
use vcache::evset::{build_parallel, pool_size, ColorGroup, Ctx, EvictionSet, EvsetConfig};
use vcache::experiments as ex;
use vcache::geometry::{CacheGeometry, Level, Replacement};
use vcache::machine::{Machine, MachineConfig};
use vcache::mem::{FragmentationProfile, TranslationConfig};
use vcache::scenario::{Scenario, BUNDLED};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

/// Exact 1 - C(n,f)/C(2n,f): a partition has two rows of n slices each;
/// coverage is 1/2 when every drawn set lands in the same row.
fn coverage_oracle(n: u128, f: u128) -> f64 {
    fn choose(n: u128, k: u128) -> u128 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }
    let one_row = 2 * choose(n, f);
    let all = choose(2 * n, f);
    1.0 - 0.5 * one_row as f64 / all as f64
}

fn coverage_law() -> Check {
    let table = [(2, 0.7564), (3, 0.8846), (4, 0.9470), (5, 0.9764), (6, 0.9899)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (f, expected) in table {
        let oracle = coverage_oracle(20, f as u128);
        if (oracle - expected).abs() > 5e-5 {
            return Err(format!("oracle f={f} gives {oracle:.5}, table {expected}"));
        }
        let p = ex::CoverageParams {
            f,
            runs: 1000,
            offsets_per_run: 4,
            slices: 20,
            workers: 10,
        };
        let (o, _) = ex::coverage(&p, 0xc0 + f as u64).map_err(err)?;
        let hit = (o.coverage - expected).abs() <= 0.015 && (o.theoretical - oracle).abs() < 1e-12 && o.duplicate_sets == 0;
        ok &= hit;
        parts.push(format!("f={f} {:.2}% (want {:.2}±1.5)", 100.0 * o.coverage, 100.0 * expected));
    }
    ensure(ok, parts.join(", "))
}

fn associativity() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in [Replacement::Lru, Replacement::Plru, Replacement::Random] {
        for mask in [3, 5, 8, 11] {
            let p = ex::AssocParams {
                mask,
                runs: 10,
                replacement: r,
                ..ex::AssocParams::default()
            };
            let o = ex::associativity(&p, 17 + mask as u64).map_err(err)?;
            let hit = o.per_run.len() == 10 && o.modal == mask && (o.mean - mask as f64).abs() <= 1.0;
            ok &= hit;
            if !hit || mask == 3 {
                parts.push(format!("{r:?}/{mask}: {:.2}±{:.2} mode {}", o.mean, o.std, o.modal));
            }
        }
    }
    ensure(ok, parts.join(", "))
}

fn color_identification() -> Check {
    let p = ex::ColorIdParams {
        pages: 10_000,
        host_colors: None,
    };
    let (o, _) = ex::color_identification(&CacheGeometry::skylake_sp(), FragmentationProfile::Fragmented { shuffle: 1.0 }, &p, 3)
        .map_err(err)?;
    let ok = o.classified >= 10_000 && o.permutation && o.accuracy == 1.0 && o.filters == 16 && o.distinct_filter_colors == 16;
    ensure(
        ok,
        format!(
            "{} pages, accuracy {:.4}, permutation {}, {} filters / {} colors",
            o.classified, o.accuracy, o.permutation, o.filters, o.distinct_filter_colors
        ),
    )
}

fn manual_flush() -> Check {
    let ks = [2, 4, 6, 8, 11];
    let (o, _) = ex::manual_flush(&ks, 4).map_err(err)?;
    ensure(
        o.set_size == 11 && o.detected == ks,
        format!("set of {}, flushed {:?}, detected {:?}", o.set_size, ks, o.detected),
    )
}

fn window_behavior() -> Check {
    let (curves, _) = ex::window_sweep(&ex::default_profiles(), &ex::default_windows(), 5).map_err(err)?;
    let sat = |c: &ex::SweepCurve| c.saturation_ms.unwrap_or(f64::INFINITY);
    let heaviest = curves.iter().max_by(|a, b| a.rate.total_cmp(&b.rate)).unwrap();
    let monotone = curves.iter().all(ex::SweepCurve::monotone_to_saturation);
    let earliest = sat(heaviest).is_finite() && curves.iter().filter(|c| c.profile != heaviest.profile).all(|c| sat(heaviest) < sat(c));

    let (trace, _) = ex::window_adjust(12, 4500.0, 5).map_err(err)?;
    let mut rule = true;
    let (mut shrinks, mut resets) = (0, 0);
    for &(w, next, full, evicted) in &trace.cycles {
        let sets_full = full > 0 && evicted > 0;
        if next < w {
            rule &= sets_full && (next - (w - 1.0).max(1.0)).abs() < 1e-9;
            shrinks += 1;
        } else if evicted == 0 {
            rule &= next == 7.0;
            resets += usize::from(w < 7.0);
        }
    }
    let windows: Vec<f64> = trace.cycles.iter().map(|c| c.0).collect();
    let sats: Vec<String> = curves
        .iter()
        .map(|c| format!("{} {}", c.profile, c.saturation_ms.map_or("-".into(), |s| format!("{s}ms"))))
        .collect();
    ensure(
        monotone && earliest && rule && shrinks >= 3 && resets >= 1,
        format!("saturation [{}], windows {windows:?}", sats.join(", ")),
    )
}

fn self_eviction() -> Check {
    let o = ex::self_eviction(Replacement::Lru, &[0x0, 0x400, 0x800, 0xc00], 10, 6).map_err(err)?;
    ensure(
        o.sets > 0 && o.clean_sets == o.sets && o.evicted_lines == 0,
        format!("{}/{} sets clean over {} cycles", o.clean_sets, o.sets, o.cycles),
    )
}

fn cas_steering() -> Check {
    let s = Scenario::parse(vcache::scenario::bundled("cas_steering").unwrap()).map_err(err)?;
    let b = s.run().map_err(err)?;
    let cas = b.metric("residency_polluted_cas").and_then(|v| v.as_f64()).unwrap_or(1.0);
    let base = b.metric("residency_polluted_baseline").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let p = ex::CasParams {
        alternate: true,
        intervals: 20,
        ..ex::CasParams::default()
    };
    let p = ex::CasParams {
        sched: vcache::cas::SchedConfig {
            domains: 2,
            ..p.sched.clone()
        },
        ..p
    };
    let (alt, _) = ex::cas_pipeline(&p, SchedPolicy::Cas, 7).map_err(err)?;
    ensure(
        cas <= 0.20 && base >= 0.40 && alt.report.tier_changes == 0,
        format!(
            "polluted-domain residency cas {:.1}% vs baseline {:.1}%, alternating tier changes {}",
            100.0 * cas,
            100.0 * base,
            alt.report.tier_changes
        ),
    )
}

fn cap_policy() -> Check {
    let p = ex::CapParams::default();
    let seeds: Vec<u64> = (1..=10).collect();
    let (abs, _) = ex::cap_absorption(&p, &seeds).map_err(err)?;
    let ranked: u64 = abs.pairs.iter().map(|x| x.1).sum();
    let unranked: u64 = abs.pairs.iter().map(|x| x.2).sum();

    let intervals = 14;
    let rp = ex::CapParams { intervals, ..p.clone() };
    let (o, _) = ex::cap_pipeline(&rp, &ex::recolor_script(5, 9, intervals), 1).map_err(err)?;
    let after = rp.cap.recolor_after;
    let switch = intervals / 2 + 1;
    let reclaims: Vec<usize> = o.intervals.iter().filter(|i| i.reclaimed).map(|i| i.interval).collect();
    let rule = reclaims.iter().all(|&k| k + 1 >= after && (k + 1 - after..=k).all(|j| o.intervals[j].demoted));
    let only_lasting = !reclaims.is_empty() && reclaims.iter().all(|&k| k >= switch);
    ensure(
        abs.confined && o.confined() && abs.wins == seeds.len() && abs.p_value < 0.05 && after == 3 && rule && only_lasting,
        format!(
            "confined {}, misses ranked {ranked} vs unranked {unranked}, wins {}/{} p={:.4}, reclaims at {reclaims:?}",
            abs.confined && o.confined(),
            abs.wins,
            seeds.len(),
            abs.p_value
        ),
    )
}

fn fragmentation() -> Check {
    let p = ex::FragParams::default();
    let (o, _) = ex::fragmentation(&p, 9).map_err(err)?;
    ensure(
        p.pages >= 512 && o.contiguous == 1.0 && o.shuffled < 0.9 && o.staged_decreasing(),
        format!(
            "contiguous {:.3}, shuffled {:.3}, staged {:?}",
            o.contiguous,
            o.shuffled,
            o.staged.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn sorted_sets(sets: &[EvictionSet]) -> BTreeSet<(u64, Vec<u64>)> {
    sets.iter()
        .map(|s| {
            let mut m = s.members.clone();
            m.sort_unstable();
            (s.offset, m)
        })
        .collect()
}

fn parallel_sets(workers: usize) -> vcache::Result<BTreeSet<(u64, Vec<u64>)>> {
    let g = ex::coverage_geometry(20);
    let n = pool_size(&g, Level::Llc, 3);
    let mut m = Machine::new(MachineConfig::new(
        g,
        TranslationConfig::new(FragmentationProfile::Fragmented { shuffle: 1.0 }, n + 64),
        11,
    ))?;
    let pages = m.alloc_pages(n)?;
    let ctx = Ctx::new(&m, 0, EvsetConfig::default(), 11);
    let r = build_parallel(&mut m, &ctx, 4, &[ColorGroup { color: 0, pages }], &[0x0, 0x40, 0x80, 0xc0], workers, 11)?;
    Ok(sorted_sets(&r.sets))
}

fn determinism() -> Check {
    let mut differing = Vec::new();
    for (name, text) in BUNDLED {
        let s = Scenario::parse(text).map_err(err)?;
        let a = s.run().map_err(err)?;
        let b = s.run().map_err(err)?;
        if a.files != b.files {
            differing.push(*name);
        }
    }
    let one = parallel_sets(1).map_err(err)?;
    let many = parallel_sets(8).map_err(err)?;
    let g = CacheGeometry::skylake_sp();
    let l2 = pool_size(&g, Level::L2, 3);
    let llc = pool_size(&g, Level::Llc, 3);
    // C * ways * (rows reachable from one page offset) * slices
    let rows = |sets: usize| sets * 64 / 4096;
    let l2_oracle = 3 * g.l2_ways * rows(g.l2_sets);
    let llc_oracle = 3 * g.llc_ways * rows(g.llc_sets) * g.slices;
    ensure(
        differing.is_empty() && !one.is_empty() && one == many && l2 == 768 && llc == 21_120 && l2 == l2_oracle && llc == llc_oracle,
        format!(
            "{} scenarios repeat bit-identically (differing: {differing:?}), parallel 1 vs 8 workers {} sets equal {}, pool {l2}/{llc}",
            BUNDLED.len(),
            one.len(),
            one == many
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("coverage law", coverage_law),
        ("associativity probing", associativity),
        ("color identification", color_identification),
        ("manual-flush probe accuracy", manual_flush),
        ("window behavior", window_behavior),
        ("no self-eviction", self_eviction),
        ("cas steering and hysteresis", cas_steering),
        ("cap confinement, absorption, recolor", cap_policy),
        ("fragmentation skew", fragmentation),
        ("determinism and equivalence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS {:>2} {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
