use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttpp::data::{gen_synthetic, BayesOracle, DurationLaw, FeatureSequence, SyntheticConfig};
use ttpp::metrics::{
    accuracy, average_precision, calibrated_ap, calibrated_ap_weighted, evaluate_horizons, Anticipator,
    BayesAnticipator, Metric, OracleAnticipator, RandomAnticipator, ReportRow, ReportTable, ScoredFrames,
};
use ttpp::model::{Model, ModelConfig};
use ttpp::numerics::Tensor;
use ttpp::Error;

/// Recomputes TP and FP from scratch at every positive's cut-off. Rank of `i`
/// is the number of frames strictly ahead of it under (score desc, index asc).
fn brute_force(scores: &[f64], labels: &[bool], w: Option<f64>) -> Option<f64> {
    let n = scores.len();
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return None;
    }
    let w = w.unwrap_or((n - p) as f64 / p as f64);
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut total = 0.0;
    for i in (0..n).filter(|&i| labels[i]) {
        let cut: Vec<usize> = (0..n).filter(|&j| j == i || ahead(j, i)).collect();
        let tp = cut.iter().filter(|&&j| labels[j]).count() as f64;
        let fp = cut.len() as f64 - tp;
        total += if fp == 0.0 { 1.0 } else { tp / (tp + fp / w) };
    }
    Some(total / p as f64)
}

fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=64);
    let levels = rng.random_range(2..40);
    let pos_rate = rng.random_range(0.05..0.95);
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    let labels = (0..n).map(|_| rng.random_bool(pos_rate)).collect();
    (scores, labels)
}

fn frames(scores: &[f64], labels: &[u8]) -> ScoredFrames {
    ScoredFrames::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
}

#[test]
fn both_metrics_match_brute_force_oracle() {
    let mut checked = 0;
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_instance(&mut rng);
        let f = ScoredFrames::new(scores.clone(), labels.clone()).unwrap();
        match (calibrated_ap(&f), brute_force(&scores, &labels, None)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}"),
            (None, None) => continue,
            other => panic!("seed {seed}: {other:?}"),
        }
        let ap = average_precision(&f).unwrap();
        let oracle = brute_force(&scores, &labels, Some(1.0)).unwrap();
        assert!((ap - oracle).abs() < 1e-12, "seed {seed}: {ap} vs {oracle}");
        checked += 1;
    }
    assert!(checked >= 100);
}

#[test]
fn hand_cases() {
    assert_eq!(
        calibrated_ap(&frames(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])),
        Some(5.0 / 6.0)
    );
    assert_eq!(calibrated_ap(&frames(&[0.5, 0.5], &[1, 0])), Some(1.0));
    assert_eq!(calibrated_ap(&frames(&[0.5, 0.5], &[0, 1])), Some(0.5));
    assert_eq!(
        calibrated_ap(&frames(&[0.9, 0.8, 0.3, 0.2, 0.1], &[1, 1, 0, 0, 0])),
        Some(1.0)
    );
    assert_eq!(
        average_precision(&frames(&[0.9, 0.5, 0.4, 0.3, 0.2], &[1, 0, 0, 0, 0])),
        Some(1.0)
    );
}

#[test]
fn calibration_rewards_rare_positives() {
    // One negative ahead of the single positive among nine negatives: w = 9,
    // cPrec = 1 / (1 + 1/9) = 0.9 while plain precision is 0.5.
    let mut scores = vec![0.9, 0.8];
    scores.extend([0.1; 8]);
    let mut labels = vec![0, 1];
    labels.extend([0; 8]);
    let f = frames(&scores, &labels);
    assert!((calibrated_ap(&f).unwrap() - 0.9).abs() < 1e-15);
    assert_eq!(average_precision(&f), Some(0.5));
}

#[test]
fn rejects_nan_and_mismatched_lengths() {
    assert!(ScoredFrames::new(vec![0.1, f64::NAN], vec![true, false]).is_err());
    assert!(ScoredFrames::new(vec![0.1], vec![true, false]).is_err());
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
    assert!(matches!(accuracy(&[], &[]), Err(Error::Contract(_))));
    assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Dimension { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ranking_only_dependence(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=64);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let base = ScoredFrames::new(scores.clone(), labels.clone()).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| 3.0 * x - 7.0, |x| x * x * x];
        for t in transforms {
            let moved = ScoredFrames::new(scores.iter().map(|&s| t(s)).collect(), labels.clone()).unwrap();
            prop_assert_eq!(calibrated_ap(&moved), calibrated_ap(&base));
            prop_assert_eq!(average_precision(&moved), average_precision(&base));
        }
    }

    #[test]
    fn unit_weight_equals_plain_ap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_instance(&mut rng);
        let f = ScoredFrames::new(scores, labels).unwrap();
        prop_assert_eq!(calibrated_ap_weighted(&f, 1.0), average_precision(&f));
    }

    #[test]
    fn values_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_instance(&mut rng);
        let f = ScoredFrames::new(scores, labels).unwrap();
        for v in [calibrated_ap(&f), average_precision(&f)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn labelled(id: &str, labels: Vec<usize>, classes: usize) -> FeatureSequence {
    let n = labels.len();
    FeatureSequence::new(id, Tensor::zeros(n, 2), labels, classes).unwrap()
}

fn balanced_two_class(seed: u64, n_seqs: usize, length: usize) -> Vec<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_seqs)
        .map(|i| {
            labelled(
                &format!("b{i}"),
                (0..length).map(|_| rng.random_range(1..3)).collect(),
                3,
            )
        })
        .collect()
}

#[test]
fn single_horizon_gives_single_column() {
    let seqs = balanced_two_class(1, 2, 20);
    let oracle = OracleAnticipator {
        seq_len: 4,
        horizon: 1,
        num_classes: 3,
    };
    let r = evaluate_horizons(&oracle, &seqs, Metric::MAP).unwrap();
    assert_eq!(r.horizons.len(), 1);
    let table = ReportTable::from_report("oracle", &r);
    assert_eq!(table.to_csv().lines().next().unwrap(), "method,0.25s,Avg");
}

#[test]
fn oracle_scores_are_perfect() {
    let cfg = SyntheticConfig::random(5, 4, DurationLaw::Geometric { mean: 3.0 }, 0.1, 2).unwrap();
    let seqs = gen_synthetic(&cfg, 4, 40).unwrap();
    let oracle = OracleAnticipator {
        seq_len: 8,
        horizon: 8,
        num_classes: 5,
    };
    for metric in Metric::ALL {
        let r = evaluate_horizons(&oracle, &seqs, metric).unwrap();
        assert_eq!(r.horizons.len(), 8);
        for h in &r.horizons {
            assert_eq!(h.value, 1.0, "{metric}");
        }
        assert_eq!(r.average(), 1.0);
    }
}

#[test]
fn anchors_respect_observation_length() {
    // Length 10, T = 4: anchors t = 3..=8, so horizon 1 scores chunks 4..=9
    // and horizon 3 scores chunks 6..=9.
    let seqs = vec![labelled("v", vec![1; 10], 2)];
    let oracle = OracleAnticipator {
        seq_len: 4,
        horizon: 3,
        num_classes: 2,
    };
    let r = evaluate_horizons(&oracle, &seqs, Metric::ACC).unwrap();
    let counts: Vec<usize> = r.horizons.iter().map(|h| h.positions).collect();
    assert_eq!(counts, vec![6, 5, 4]);
}

#[test]
fn background_is_excluded_from_ap_but_not_accuracy() {
    let seqs = vec![labelled("v", vec![0, 0, 1, 0, 1, 0, 0, 1], 2)];
    let oracle = OracleAnticipator {
        seq_len: 2,
        horizon: 1,
        num_classes: 2,
    };
    let r = evaluate_horizons(&oracle, &seqs, Metric::CAP).unwrap();
    assert_eq!(r.horizons[0].per_class[0], None);
    assert_eq!(r.horizons[0].per_class[1], Some(1.0));
}

#[test]
fn nothing_to_score_is_an_error() {
    let seqs = vec![labelled("v", vec![1; 4], 2)];
    let oracle = OracleAnticipator {
        seq_len: 4,
        horizon: 2,
        num_classes: 2,
    };
    assert!(matches!(
        evaluate_horizons(&oracle, &seqs, Metric::MAP),
        Err(Error::EmptyReport)
    ));
    assert!(matches!(
        evaluate_horizons(&oracle, &[], Metric::ACC),
        Err(Error::EmptyReport)
    ));
    // Only background present: no action class has a positive.
    let seqs = vec![labelled("v", vec![0; 12], 2)];
    assert!(matches!(
        evaluate_horizons(&oracle, &seqs, Metric::MAP),
        Err(Error::EmptyReport)
    ));
}

/// E[AP] for a uniformly random ranking of `n` items with `p` positives:
/// `H_n/n + (p−1)/(n−1)·(1 − H_n/n)`.
fn expected_random_ap(n: usize, p: usize) -> f64 {
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let a = h / n as f64;
    if n == 1 {
        return 1.0;
    }
    a + (p as f64 - 1.0) / (n as f64 - 1.0) * (1.0 - a)
}

#[test]
fn random_scores_match_analytic_map() {
    let (big_t, l) = (4, 3);
    let mut diffs = Vec::new();
    for seed in 0..20u64 {
        let seqs = balanced_two_class(100 + seed, 3, 30);
        let random = RandomAnticipator {
            seq_len: big_t,
            horizon: l,
            num_classes: 3,
            seed,
        };
        let r = evaluate_horizons(&random, &seqs, Metric::MAP).unwrap();
        for tau in 1..=l {
            let truth: Vec<usize> = seqs
                .iter()
                .flat_map(|s| (big_t - 1..s.len() - tau).map(move |t| s.labels()[t + tau]))
                .collect();
            let n = truth.len();
            let expected: f64 = (1..3)
                .map(|c| expected_random_ap(n, truth.iter().filter(|&&y| y == c).count()))
                .sum::<f64>()
                / 2.0;
            diffs.push(r.horizons[tau - 1].value - expected);
        }
    }
    let k = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / k;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / k.sqrt(), "mean deviation {mean}, sd {sd}");
}

#[test]
fn random_anticipator_is_reproducible() {
    let seqs = balanced_two_class(5, 1, 12);
    let a = RandomAnticipator {
        seq_len: 4,
        horizon: 2,
        num_classes: 3,
        seed: 1,
    };
    assert_eq!(a.anticipate(&seqs[0], 5).unwrap(), a.anticipate(&seqs[0], 5).unwrap());
    assert_ne!(a.anticipate(&seqs[0], 5).unwrap(), a.anticipate(&seqs[0], 6).unwrap());
}

#[test]
fn bayes_anticipator_beats_chance() {
    let law = DurationLaw::Uniform { min: 2, max: 6 };
    let cfg = SyntheticConfig::random(4, 4, law, 0.5, 3).unwrap();
    let seqs = gen_synthetic(&cfg, 10, 60).unwrap();
    let bayes = BayesAnticipator {
        oracle: BayesOracle::new(&cfg).unwrap(),
        seq_len: 4,
        horizon: 4,
    };
    let random = RandomAnticipator {
        seq_len: 4,
        horizon: 4,
        num_classes: 4,
        seed: 3,
    };
    let b = evaluate_horizons(&bayes, &seqs, Metric::ACC).unwrap();
    let r = evaluate_horizons(&random, &seqs, Metric::ACC).unwrap();
    assert!(b.average() > r.average() + 0.2, "{} vs {}", b.average(), r.average());
    assert!(b.horizons[0].value > 0.7, "{}", b.horizons[0].value);
}

#[test]
fn model_anticipator_produces_distributions() {
    let mc = ModelConfig {
        d_model: 8,
        n_heads: 2,
        num_classes: 3,
        seq_len: 4,
        horizon: 2,
        ..ModelConfig::default()
    };
    let cfg = SyntheticConfig::random(3, 8, DurationLaw::Geometric { mean: 3.0 }, 0.1, 4).unwrap();
    let seqs = gen_synthetic(&cfg, 2, 15).unwrap();
    let m = Model::new(mc, 4).unwrap();
    let batch = m.anticipate_batch(&seqs[0], &[3, 7, 12]).unwrap();
    assert_eq!(batch[1], m.anticipate(&seqs[0], 7).unwrap());
    for p in &batch {
        assert_eq!(p.shape(), &[2, 3]);
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(m.anticipate(&seqs[0], 2).is_err());
    let r = evaluate_horizons(&m, &seqs, Metric::CAP).unwrap();
    assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn report_csv_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut table = ReportTable::new(8, 0.25);
    for name in ["TTM-PPM", "LSTM-LSTM", "TTM-PPM (w/o FP)", "odd, \"quoted\" name"] {
        let values: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let avg = values.iter().sum::<f64>() / 8.0;
        table
            .push(ReportRow {
                method: name.into(),
                values,
                avg,
            })
            .unwrap();
    }
    let text = table.to_csv();
    assert_eq!(
        text.lines().next().unwrap(),
        "method,0.25s,0.5s,0.75s,1.0s,1.25s,1.5s,1.75s,2.0s,Avg"
    );
    let back = ReportTable::parse_csv(&text).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.to_csv(), text);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    table.write_csv(&path).unwrap();
    assert_eq!(ReportTable::read_csv(&path).unwrap(), table);
    assert!(table
        .push(ReportRow {
            method: "short".into(),
            values: vec![0.0],
            avg: 0.0
        })
        .is_err());
}

#[test]
fn corrupted_reports_are_named_errors() {
    let good = "method,0.25s,Avg\nA,0.5,0.5\n";
    assert!(ReportTable::parse_csv(good).is_ok());
    for bad in [
        "",
        "name,0.25s,Avg\nA,0.5,0.5\n",
        "method,0.25s,Average\nA,0.5,0.5\n",
        "method,0.25s,Avg\nA,zero,0.5\n",
    ] {
        assert!(
            matches!(ReportTable::parse_csv(bad), Err(Error::Parse { .. })),
            "{bad:?}"
        );
    }
    match ReportTable::parse_csv("method,0.25s,Avg\nA,0.5,0.5\nB,0.5\n") {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 27),
        other => panic!("{other:?}"),
    }
}
