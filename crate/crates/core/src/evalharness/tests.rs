use super::*;
use proptest::prelude::*;

fn rec(sample: usize, run: usize, predicted: f64, reference: f64) -> EvalRecord {
    EvalRecord {
        sample,
        run,
        predicted,
        reference,
    }
}

/// Predictions laid out as `grid[n][m]` with one reference per sample.
fn to_records(grid: &[Vec<f64>], refs: &[f64]) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (n, row) in grid.iter().enumerate() {
        for (m, &p) in row.iter().enumerate() {
            out.push(rec(n + 1, m + 1, p, refs[n]));
        }
    }
    out
}

fn oracle(grid: &[Vec<f64>], refs: &[f64]) -> (f64, f64, f64) {
    let n = grid.len();
    let m = grid[0].len();
    let mut abs_sum = 0.0;
    let mut signed_sum = 0.0;
    let mut worst = 0.0;
    for i in 0..n {
        for j in 0..m {
            let d = grid[i][j] - refs[i];
            abs_sum += d.abs();
            signed_sum += d;
            if d.abs() > worst {
                worst = d.abs();
            }
        }
    }
    let count = (n * m) as f64;
    (abs_sum / count, worst, signed_sum / count)
}

fn grid_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=45, 1usize..=3).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(prop::collection::vec(13.35f64..=42.0, m), n),
            prop::collection::vec(13.35f64..=42.0, n),
        )
    })
}

#[test]
fn identity_gives_zero_error() {
    let r = vec![rec(1, 1, 20.0, 20.0), rec(2, 1, 30.0, 30.0)];
    assert_eq!(mae(&r).unwrap(), 0.0);
    assert_eq!(max_ae(&r).unwrap(), 0.0);
    assert_eq!(bias(&r).unwrap(), 0.0);
}

#[test]
fn symmetric_errors() {
    let r = vec![rec(1, 1, 5.0, 4.0), rec(2, 1, 3.0, 4.0)];
    let s = summarize(&r).unwrap();
    assert_eq!((s.mae, s.bias, s.max_ae), (1.0, 0.0, 1.0));
    assert_eq!((s.n, s.m), (2, 1));
    assert!(s.below_mcid);
}

#[test]
fn constant_error_cases() {
    let all_two: Vec<_> = (1..=4).map(|n| rec(n, 1, 22.0, 20.0)).collect();
    assert_eq!(max_ae(&all_two).unwrap(), 2.0);
    let plus_one: Vec<_> = (1..=4).map(|n| rec(n, 1, 21.0, 20.0)).collect();
    assert_eq!(bias(&plus_one).unwrap(), 1.0);
    let minus: Vec<_> = (1..=4).map(|n| rec(n, 1, 30.0 - 3.34, 30.0)).collect();
    assert!((bias(&minus).unwrap() + 3.34).abs() < 1e-12);
    let mut spike: Vec<_> = (1..=5).map(|n| rec(n, 1, 20.0, 20.0)).collect();
    spike[2].predicted = 27.7;
    assert!((max_ae(&spike).unwrap() - 7.7).abs() < 1e-12);
}

#[test]
fn layout_errors() {
    assert_eq!(mae(&[]), Err(EvalError::EmptyRecords));
    let ragged = vec![rec(1, 1, 1.0, 1.0), rec(1, 2, 1.0, 1.0), rec(2, 1, 1.0, 1.0)];
    assert!(matches!(mae(&ragged), Err(EvalError::RaggedRuns { sample: 2, .. })));
    let dup = vec![rec(1, 1, 1.0, 1.0), rec(1, 1, 2.0, 1.0)];
    assert_eq!(bias(&dup), Err(EvalError::DuplicateRecord { sample: 1, run: 1 }));
    let drift = vec![rec(1, 1, 1.0, 1.0), rec(1, 2, 1.0, 2.0)];
    assert_eq!(max_ae(&drift), Err(EvalError::InconsistentReference { sample: 1 }));
}

#[test]
fn mcid_boundary_and_table_values() {
    for v in [9.18, 3.15, 2.35, 2.41, 2.25] {
        assert!(!mcid_gate(v, MCID), "{v}");
    }
    for v in [2.05, 1.94] {
        assert!(mcid_gate(v, MCID), "{v}");
    }
}

#[test]
fn percent_reduction_examples() {
    assert_eq!(percent_reduction(2.0, 1.0).unwrap(), 50.0);
    assert!((percent_reduction(1.94, 1.58).unwrap() - 18.56).abs() < 0.01);
    assert_eq!(percent_reduction(1.7, 1.7).unwrap(), 0.0);
    assert_eq!(percent_reduction(0.0, 1.0), Err(EvalError::NonPositiveBase(0.0)));
}

#[test]
fn long_returns_whole_pool_in_order() {
    let pool = ObservationPool::canonical();
    assert_eq!(sample_observations(&pool, ObservationCategory::Long, 7), pool.notes());
}

#[test]
fn pool_size_is_enforced() {
    let notes = ObservationPool::canonical().notes()[..4].to_vec();
    assert_eq!(ObservationPool::new(notes), Err(EvalError::PoolSizeInvalid(4)));
}

#[test]
fn seeded_short_draw_is_reproducible() {
    let pool = ObservationPool::canonical();
    let a = sample_observations(&pool, ObservationCategory::Short, 42);
    assert_eq!(a, sample_observations(&pool, ObservationCategory::Short, 42));
    assert!((1..=2).contains(&a.len()));
}

/// Inclusion probability for size k drawn uniformly from [lo, hi] out of 5,
/// computed by enumerating every subset.
fn enumerated_inclusion(lo: usize, hi: usize) -> f64 {
    let mut total = 0.0;
    for k in lo..=hi {
        let subsets: Vec<u32> = (0u32..32).filter(|s| s.count_ones() as usize == k).collect();
        let containing = subsets.iter().filter(|s| *s & 1 == 1).count();
        total += containing as f64 / subsets.len() as f64;
    }
    total / (hi - lo + 1) as f64
}

#[test]
fn inclusion_frequencies_match_analytic() {
    let pool = ObservationPool::canonical();
    for cat in ObservationCategory::ALL {
        let (lo, hi) = cat.size_range();
        let expected = enumerated_inclusion(lo, hi);
        assert!((inclusion_probability(cat) - expected).abs() < 1e-12);
        let mut hits = [0usize; OBSERVATION_POOL_SIZE];
        for seed in 0..1000u64 {
            let draw = sample_observations(&pool, cat, seed);
            assert!((lo..=hi).contains(&draw.len()), "{cat:?} size {}", draw.len());
            for note in &draw {
                let i = pool.notes().iter().position(|p| p == note).unwrap();
                hits[i] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / 1000.0;
            assert!((freq - expected).abs() <= 0.05, "{cat:?} freq {freq} expected {expected}");
        }
    }
}

fn table3_bucket(mae: f64, max_ae: f64, bias: f64) -> Vec<EvalRecord> {
    records_with_metrics(45, 3, mae, max_ae, bias, 27.0).unwrap()
}

#[test]
fn fixture_builder_hits_targets() {
    for (a, x, b) in [(3.80, 9.50, -3.34), (2.33, 6.75, -1.53), (2.05, 6.75, 0.38), (9.18, 20.0, 9.18)] {
        let r = table3_bucket(a, x, b);
        let s = summarize(&r).unwrap();
        assert_eq!((s.n, s.m), (45, 3));
        assert!((s.mae - a).abs() < 1e-9, "{} vs {a}", s.mae);
        assert!((s.max_ae - x).abs() < 1e-9);
        assert!((s.bias - b).abs() < 1e-9);
    }
    assert!(records_with_metrics(2, 1, 1.0, 0.5, 0.0, 20.0).is_err());
}

#[test]
fn ablation_rows_follow_canonical_order_and_echo_fixture() {
    let mut results = BTreeMap::new();
    results.insert("RTD".to_string(), table3_bucket(2.05, 6.75, 0.38));
    results.insert("R".to_string(), table3_bucket(3.80, 9.50, -3.34));
    results.insert("RT".to_string(), table3_bucket(2.85, 8.50, -1.27));
    results.insert("RD".to_string(), table3_bucket(2.33, 6.75, -1.53));
    let rows = ablation_table(&results);
    let labels: Vec<_> = rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(labels, ["R", "R+D", "R+T", "R+T+D"]);
    let maes: Vec<_> = rows.iter().map(|r| format!("{:.2}", r.summary.unwrap().mae)).collect();
    assert_eq!(maes, ["3.80", "2.33", "2.85", "2.05"]);
    assert_eq!(rows.iter().filter(|r| r.best).count(), 1);
    assert!(rows[3].best);
    let md = ablation_markdown(&rows);
    assert!(md.contains("| R+T+D (best) | 2.05 | 6.75 | 0.38 | yes |"), "{md}");
    assert!(md.contains("| R | 3.80 | 9.50 | -3.34 | no |"));
    let csv = ablation_csv(&rows);
    assert!(csv.lines().nth(1).unwrap().starts_with("R,45,3,3.80,9.50,-3.34,false,false"));
}

#[test]
fn missing_and_empty_buckets_warn() {
    let mut results = BTreeMap::new();
    results.insert("R".to_string(), vec![rec(1, 1, 22.0, 20.0)]);
    results.insert("RT".to_string(), vec![]);
    let rows = ablation_table(&results);
    assert!(rows[0].summary.is_some() && rows[0].best);
    assert_eq!(rows[1].warning.as_deref(), Some("missing configuration"));
    assert_eq!(rows[2].warning.as_deref(), Some("no records"));
    assert!(ablation_markdown(&rows).contains("| R+D | - | - | - | missing configuration |"));
}

#[test]
fn records_csv_round_trip() {
    let text = "sample,run,predicted,reference\n1,1,5,4\n2,1,3,4\n";
    let records = read_records(text.as_bytes()).unwrap();
    assert_eq!(mae(&records).unwrap(), 1.0);
    let mut out = Vec::new();
    write_records(&mut out, &records).unwrap();
    assert_eq!(read_records(out.as_slice()).unwrap(), records);
    assert!(matches!(read_records("sample,run\n1,x\n".as_bytes()), Err(EvalError::Csv(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force((grid, refs) in grid_strategy()) {
        let records = to_records(&grid, &refs);
        let (o_mae, o_max, o_bias) = oracle(&grid, &refs);
        prop_assert!((mae(&records).unwrap() - o_mae).abs() < 1e-12);
        prop_assert!((max_ae(&records).unwrap() - o_max).abs() < 1e-12);
        prop_assert!((bias(&records).unwrap() - o_bias).abs() < 1e-12);
    }

    #[test]
    fn metric_ordering_invariants((grid, refs) in grid_strategy()) {
        let s = summarize(&to_records(&grid, &refs)).unwrap();
        prop_assert!(s.mae >= 0.0);
        prop_assert!(s.max_ae >= s.mae - 1e-12);
        prop_assert!(s.bias.abs() <= s.mae + 1e-12);
        prop_assert_eq!(s.below_mcid, s.mae < 2.25);
    }

    #[test]
    fn equal_same_sign_errors_give_bias_equal_mae(n in 1usize..20, e in 0.0f64..10.0) {
        let r: Vec<_> = (1..=n).map(|i| rec(i, 1, 20.0 + e, 20.0)).collect();
        prop_assert!((bias(&r).unwrap() - mae(&r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant((grid, refs) in grid_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let records = to_records(&grid, &refs);
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((mae(&records).unwrap() - mae(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert_eq!(max_ae(&records).unwrap(), max_ae(&shuffled).unwrap());
        prop_assert!((bias(&records).unwrap() - bias(&shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mcid_gate_is_monotone(a in 0.0f64..10.0, d in 0.0f64..10.0) {
        if !mcid_gate(a, MCID) {
            prop_assert!(!mcid_gate(a + d, MCID));
        }
    }

    #[test]
    fn sampling_is_bounded_and_reproducible(seed in any::<u64>()) {
        let pool = ObservationPool::canonical();
        for cat in ObservationCategory::ALL {
            let a = sample_observations(&pool, cat, seed);
            prop_assert!(a.len() <= OBSERVATION_POOL_SIZE);
            prop_assert_eq!(&a, &sample_observations(&pool, cat, seed));
        }
    }
}
