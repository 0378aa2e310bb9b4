use std::collections::BTreeMap;

use proptest::prelude::*;
use vcache::cap::{rank_colors, sign_test};
use vcache::cas::tier_domains;
use vcache::evset::{build_all_at_offset, oracle_congruent, test_eviction, Ctx, EvsetConfig};
use vcache::experiments as ex;
use vcache::geometry::{CacheGeometry, Level};
use vcache::machine::{Machine, MachineConfig};
use vcache::mem::{FragmentationProfile, TranslationConfig};
use vcache::tenant::{to_ms, TenantWorkload};
use vcache::vscan::{ContentionMonitor, MonitorConfig};

fn desk_machine(pages: usize, seed: u64) -> Machine {
    let g = CacheGeometry {
        llc_sets: 256,
        ..CacheGeometry::desk()
    };
    let t = TranslationConfig::new(FragmentationProfile::Fragmented { shuffle: 1.0 }, pages);
    Machine::new(MachineConfig::new(g, t, seed)).unwrap()
}

#[test]
fn minimal_sets_are_minimal_and_congruent() {
    let mut m = desk_machine(4096, 21);
    let mut ctx = Ctx::new(&m, 0, EvsetConfig::default(), 21);
    let n = vcache::evset::pool_size(m.geometry(), Level::Llc, 3);
    let pages = m.alloc_pages(n).unwrap();
    let r = build_all_at_offset(&mut m, &mut ctx, Level::Llc, 0x80, &pages, None).unwrap();
    assert!(!r.sets.is_empty());
    let ways = m.geometry().llc_ways;
    for s in r.sets.iter().filter(|s| s.minimal).take(8) {
        assert!(oracle_congruent(&m, s).unwrap());
        assert_eq!(s.len(), ways);
        let target = s.target.expect("pruned sets keep their target");
        assert!(test_eviction(&mut m, &mut ctx, Level::Llc, &s.members, target).unwrap());
        for i in 0..s.len() {
            let mut rest = s.members.clone();
            rest.remove(i);
            assert!(!test_eviction(&mut m, &mut ctx, Level::Llc, &rest, target).unwrap());
        }
    }
}

#[test]
fn one_set_represents_its_row() {
    let g = ex::monitor_geometry();
    let t = TranslationConfig::new(FragmentationProfile::Fragmented { shuffle: 1.0 }, 4096);
    let mut m = Machine::new(MachineConfig::new(g.clone(), t, 8)).unwrap();
    let sets = ex::monitor_sets(&mut m, 0, &[0x0], EvsetConfig::default(), 8).unwrap();
    let rows: Vec<usize> = sets.iter().map(|s| m.oracle_llc_set(s.members[0]).unwrap().1).collect();
    let start = to_ms(m.now());
    m.add_tenant(TenantWorkload::polluter(700.0).between(start, None)).unwrap();
    let cfg = MonitorConfig {
        fixed_window: true,
        ..MonitorConfig::default()
    };
    let mut mon = ContentionMonitor::new(&m, cfg, sets).unwrap();
    let mut per_set = vec![0.0; rows.len()];
    for r in mon.run(&mut m, 6).unwrap() {
        for o in &r.sets {
            per_set[o.id] += o.evicted as f64;
        }
    }
    let mut by_row: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (id, &row) in rows.iter().enumerate() {
        by_row.entry(row).or_default().push(per_set[id]);
    }
    let mut checked = 0;
    for xs in by_row.values().filter(|xs| xs.len() > 1) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean > 0.0);
        for x in xs {
            assert!((x - mean).abs() <= 0.2 * mean, "{x} vs row mean {mean}");
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn cap_never_leaves_dirty_lines() {
    let p = ex::CapParams {
        intervals: 4,
        ..ex::CapParams::default()
    };
    let schedule = [ex::PoisonPhase { color: 5, from: 0, to: 5 }];
    let (o, _) = ex::cap_pipeline(&p, &schedule, 3).unwrap();
    assert_eq!(o.dirty_lines, 0);
    assert!(o.confined());
}

#[test]
fn scenario_artifacts_are_rectangular_csv() {
    for name in ["manual_flush", "window_adjust", "fragmentation", "color_id", "cap_recolor", "cas_steering"] {
        let s = vcache::scenario::Scenario::parse(vcache::scenario::bundled(name).unwrap()).unwrap();
        let b = s.run().unwrap();
        for (file, text) in b.files.iter().filter(|(f, _)| f.ends_with(".csv")) {
            let mut lines = text.lines();
            let header = lines.next().unwrap();
            if header.ends_with("...") {
                continue;
            }
            let cols = header.split(',').count();
            for l in lines {
                assert_eq!(l.split(',').count(), cols, "{name}/{file}: {l}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tiers_are_monotone_in_rate(rates in prop::collection::vec(0.0f64..50.0, 1..12), tiers in 1usize..5, gap in 0.0f64..5.0) {
        let t = tier_domains(&rates, tiers, gap);
        prop_assert_eq!(t.len(), rates.len());
        prop_assert!(t.iter().all(|&x| x < tiers));
        for i in 0..rates.len() {
            for j in 0..rates.len() {
                if rates[i] > rates[j] {
                    prop_assert!(t[i] >= t[j]);
                }
                if rates[i] == rates[j] {
                    prop_assert_eq!(t[i], t[j]);
                }
            }
        }
    }

    #[test]
    fn ranking_orders_hottest_first(rates in prop::collection::vec(0.0f64..50.0, 1..16)) {
        let r = rank_colors(&rates, 3, 0.5);
        let mut seen = r.order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..rates.len() as u32).collect::<Vec<_>>());
        for w in r.order.windows(2) {
            prop_assert!(rates[w[0] as usize] >= rates[w[1] as usize]);
        }
    }

    #[test]
    fn sign_test_is_symmetric_and_bounded(n in 1usize..40, k in 0usize..40) {
        let k = k.min(n);
        let p = sign_test(k, n);
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert!((p - sign_test(n - k, n)).abs() < 1e-12);
    }

    #[test]
    fn slice_hash_stays_in_range(hpa in any::<u64>(), slices in 1usize..32) {
        let g = CacheGeometry { slices, ..CacheGeometry::skylake_sp() };
        prop_assert!(g.slice_of(hpa) < slices);
        prop_assert_eq!(g.slice_of(hpa), g.slice_of(hpa | 0x3f));
    }
}
