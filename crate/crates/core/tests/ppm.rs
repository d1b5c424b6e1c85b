use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttpp::numerics::{grad_check_params, Graph, Mode, ParamId, ParamSet, Tensor, LAYER_NORM_EPS};
use ttpp::ppm::{self, BlockParams, FeatureFeedback, PpmParams, Rollout};
use ttpp::Error;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..x.len()).map(|k| x[k] * w.get(k, j)).sum())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Eval-mode block recomputed layer by layer from raw parameter values.
fn oracle_block(x: &[f64], ps: &ParamSet, b: &BlockParams) -> Vec<f64> {
    let h: Vec<f64> = row_times(x, ps.value(b.fc1_w))
        .iter()
        .zip(ps.value(b.fc1_b).data())
        .map(|(v, bias)| (v + bias).max(0.0))
        .collect();
    let o: Vec<f64> = row_times(&h, ps.value(b.fc2_w))
        .iter()
        .zip(ps.value(b.fc2_b).data())
        .map(|(v, bias)| v + bias)
        .collect();
    let n = o.len() as f64;
    let mean = o.iter().sum::<f64>() / n;
    let var = o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let gain = ps.value(b.ln_gain).data();
    let bias = ps.value(b.ln_bias).data();
    o.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[i] + bias[i])
        .collect()
}

struct Fixture {
    ps: ParamSet,
    ppm: PpmParams,
    classifier: ParamId,
    d: usize,
    c: usize,
}

fn fixture(d: usize, c: usize, seed: u64) -> Fixture {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classifier = ps.add_weight("classifier", d, c, &mut rng).unwrap();
    let ppm = PpmParams::new(&mut ps, "ppm", d, c, classifier, 0.1, &mut rng).unwrap();
    // Non-trivial LayerNorm affine parameters so the oracle exercises them.
    for id in [
        ppm.initial.ln_gain,
        ppm.initial.ln_bias,
        ppm.progressive.ln_gain,
        ppm.progressive.ln_bias,
    ] {
        *ps.value_mut(id) = random(1, d, &mut rng);
    }
    Fixture {
        ps,
        ppm,
        classifier,
        d,
        c,
    }
}

fn run(fx: &Fixture, ps: &ParamSet, s: &Tensor, f: &Tensor, l: usize, feedback: FeatureFeedback) -> Rollout {
    let mut g = Graph::eval(ps);
    let (vs, vf) = (g.input(s.clone()), g.input(f.clone()));
    let out = ppm::rollout_with(&mut g, vs, vf, &fx.ppm, l, feedback).unwrap();
    out.extract(&g, 0)
}

#[test]
fn zero_weights_or_zero_feature_classify_uniformly() {
    let mut ps = ParamSet::new();
    let wc = ps.add("wc", Tensor::zeros(4, 5)).unwrap();
    let mut g = Graph::eval(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = g.input(random(1, 4, &mut rng));
    let p = ppm::classify(&mut g, f, wc).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let mut ps = ParamSet::new();
    let wc = ps.add_weight("wc", 4, 5, &mut rng).unwrap();
    let mut g = Graph::eval(&ps);
    let f = g.input(Tensor::zeros(1, 4));
    let p = ppm::classify(&mut g, f, wc).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn classify_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    let w = random(6, 4, &mut rng);
    let wc = ps.add("wc", w.clone()).unwrap();
    let f = random(1, 6, &mut rng);
    let mut g = Graph::eval(&ps);
    let vf = g.input(f.clone());
    let p = ppm::classify(&mut g, vf, wc).unwrap();
    let expect = softmax(&row_times(f.row(0), &w));
    for (a, b) in g.value(p).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_block_emits_the_norm_bias() {
    for d in [8, 16, 32] {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let b = BlockParams::new(&mut ps, "b", 2 * d + 3, d, &mut rng).unwrap();
        let bias = random(1, d, &mut rng);
        for id in [b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b, b.ln_gain] {
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = Tensor::new(shape.clone(), vec![0.0; shape.iter().product()]).unwrap();
        }
        *ps.value_mut(b.ln_bias) = bias.clone();
        let mut g = Graph::eval(&ps);
        let x = g.input(random(1, 2 * d + 3, &mut rng));
        let y = ppm::prediction_block(&mut g, x, &b, 0.1).unwrap();
        assert_eq!(g.shape(y), &[1, d]);
        assert_eq!(g.value(y), &bias);
    }
}

#[test]
fn block_matches_layer_by_layer_oracle() {
    let fx = fixture(8, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(1, 2 * 8 + 3, &mut rng).scaled(2.0);
    let mut g = Graph::eval(&fx.ps);
    let vx = g.input(x.clone());
    let y = ppm::prediction_block(&mut g, vx, &fx.ppm.initial, 0.1).unwrap();
    let expect = oracle_block(x.row(0), &fx.ps, &fx.ppm.initial);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn block_rejects_wrong_width() {
    let fx = fixture(8, 3, 4);
    let mut g = Graph::eval(&fx.ps);
    let x = g.input(Tensor::zeros(1, 18));
    assert!(matches!(
        ppm::prediction_block(&mut g, x, &fx.ppm.initial, 0.0),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn one_step_rollout_never_touches_the_progressive_block() {
    let fx = fixture(8, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, f) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
    let base = run(&fx, &fx.ps, &s, &f, 1, FeatureFeedback::Full);
    assert_eq!(base.horizon(), 1);
    assert_eq!(base.features.shape(), &[1, 8]);

    let mut ps = fx.ps.clone();
    ps.value_mut(fx.ppm.progressive.fc1_w).data_mut()[0] += 1.0;
    assert_eq!(run(&fx, &ps, &s, &f, 1, FeatureFeedback::Full), base);
    assert_eq!(run(&fx, &fx.ps, &s, &f, 1, FeatureFeedback::NoFeature), base);

    // The backward pass agrees: no gradient reaches the progressive block.
    let mut g = Graph::eval(&fx.ps);
    let (vs, vf) = (g.input(s), g.input(f));
    let out = ppm::rollout(&mut g, vs, vf, &fx.ppm, 1).unwrap();
    let total = g.sum(out.probs[0]);
    let grads = g.backward(total).unwrap();
    assert!(grads.param(fx.ppm.progressive.fc1_w).is_none());
}

#[test]
fn zero_parameters_give_uniform_predictions() {
    let fx = fixture(8, 4, 6);
    let mut ps = fx.ps.clone();
    for p in ps.iter_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = run(
        &fx,
        &ps,
        &random(1, 8, &mut rng),
        &random(1, 8, &mut rng),
        4,
        FeatureFeedback::Full,
    );
    assert_eq!(out.probs.shape(), &[4, 4]);
    assert!(out.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn three_steps_match_a_manual_unroll() {
    let fx = fixture(8, 3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s, f) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
    let out = run(&fx, &fx.ps, &s, &f, 3, FeatureFeedback::Full);

    let wc = fx.ps.value(fx.classifier);
    let cat = |a: &[f64], b: &[f64], c: &[f64]| [a, b, c].concat();
    let p_t = softmax(&row_times(f.row(0), wc));
    let f1 = oracle_block(&cat(s.row(0), f.row(0), &p_t), &fx.ps, &fx.ppm.initial);
    let p1 = softmax(&row_times(&f1, wc));
    let f2 = oracle_block(&cat(s.row(0), &f1, &p1), &fx.ps, &fx.ppm.progressive);
    let p2 = softmax(&row_times(&f2, wc));
    let f3 = oracle_block(&cat(s.row(0), &f2, &p2), &fx.ps, &fx.ppm.progressive);
    let p3 = softmax(&row_times(&f3, wc));

    let features = Tensor::from_rows(&[f1, f2, f3]).unwrap();
    let probs = Tensor::from_rows(&[p1, p2, p3]).unwrap();
    assert!(out.features.max_abs_diff(&features) < 1e-10);
    assert!(out.probs.max_abs_diff(&probs) < 1e-10);
}

#[test]
fn feature_slot_is_zero_from_step_two_without_feedback() {
    let fx = fixture(8, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (s, f) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
    let out = run(&fx, &fx.ps, &s, &f, 2, FeatureFeedback::NoFeature);
    let full = run(&fx, &fx.ps, &s, &f, 2, FeatureFeedback::Full);
    assert_eq!(out.features.row(0), full.features.row(0));

    let wc = fx.ps.value(fx.classifier);
    let p1 = softmax(&row_times(out.features.row(0), wc));
    let input = [s.row(0), &[0.0; 8][..], &p1].concat();
    assert_eq!(input[8..16].iter().filter(|&&v| v == 0.0).count(), fx.d);
    let f2 = oracle_block(&input, &fx.ps, &fx.ppm.progressive);
    for (a, b) in out.features.row(1).iter().zip(&f2) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!(out.features.max_abs_diff(&full.features) > 1e-6);
}

#[test]
fn progressive_weights_are_shared_across_later_steps() {
    let fx = fixture(8, 3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, f) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
    let base = run(&fx, &fx.ps, &s, &f, 4, FeatureFeedback::Full);

    let mut ps = fx.ps.clone();
    ps.value_mut(fx.ppm.progressive.fc2_b).data_mut()[5] += 0.5;
    let moved = run(&fx, &ps, &s, &f, 4, FeatureFeedback::Full);
    assert_eq!(moved.features.row(0), base.features.row(0));
    for i in 1..4 {
        assert_ne!(moved.features.row(i), base.features.row(i), "step {}", i + 1);
    }

    let mut ps = fx.ps.clone();
    ps.value_mut(fx.ppm.initial.fc2_b).data_mut()[5] += 0.5;
    let moved = run(&fx, &ps, &s, &f, 4, FeatureFeedback::Full);
    for i in 0..4 {
        assert_ne!(moved.features.row(i), base.features.row(i), "step {}", i + 1);
    }
}

#[test]
fn zero_horizon_is_rejected() {
    let fx = fixture(4, 2, 10);
    let mut g = Graph::eval(&fx.ps);
    let s = g.input(Tensor::zeros(1, 4));
    assert!(matches!(
        ppm::rollout(&mut g, s, s, &fx.ppm, 0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ppm::rollout_without_features(&mut g, s, s, &fx.ppm, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn rollout_passes_grad_check_through_four_steps() {
    let mut fx = fixture(6, 3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = fx.ps.add("s", random(1, 6, &mut rng)).unwrap();
    let f = fx.ps.add("f", random(1, 6, &mut rng)).unwrap();
    let mix_f = random(4, 6, &mut rng);
    let mix_p = random(4, 3, &mut rng);
    let ppm_params = fx.ppm.clone();
    let err = grad_check_params(&fx.ps, Mode::Train, 42, |g| {
        let (vs, vf) = (g.param(s), g.param(f));
        let out = ppm::rollout(g, vs, vf, &ppm_params, 4)?;
        let feats = g.concat_rows(&out.features)?;
        let probs = g.concat_rows(&out.probs)?;
        let (mf, mp) = (g.input(mix_f.clone()), g.input(mix_p.clone()));
        let a = g.mul(feats, mf)?;
        let b = g.mul(probs, mp)?;
        let (a, b) = (g.sum(a), g.sum(b));
        g.add(a, b)
    })
    .unwrap();
    assert!(err < 1e-4, "rollout grad error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probabilities_stay_on_the_simplex(seed in any::<u64>(), l in 1usize..6, train in any::<bool>(), scale in 0.1f64..20.0) {
        let fx = fixture(8, 5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if train { Mode::Train } else { Mode::Eval };
        let mut g = Graph::with_mode(&fx.ps, mode, seed);
        let s = g.input(random(3, 8, &mut rng).scaled(scale));
        let f = g.input(random(3, 8, &mut rng).scaled(scale));
        let out = ppm::rollout(&mut g, s, f, &fx.ppm, l).unwrap();
        for p in &out.probs {
            let p = g.value(*p);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
            for r in 0..p.rows() {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for f in &out.features {
            prop_assert!(g.value(*f).is_finite());
        }
    }

    #[test]
    fn rollout_is_deterministic(seed in any::<u64>(), graph_seed in any::<u64>()) {
        let fx = fixture(8, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, f) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
        let once = |mode| {
            let mut g = Graph::with_mode(&fx.ps, mode, graph_seed);
            let (vs, vf) = (g.input(s.clone()), g.input(f.clone()));
            let out = ppm::rollout(&mut g, vs, vf, &fx.ppm, 3).unwrap();
            out.extract(&g, 0)
        };
        prop_assert_eq!(once(Mode::Eval), once(Mode::Eval));
        prop_assert_eq!(once(Mode::Train), once(Mode::Train));
    }
}

#[test]
fn counts_follow_the_block_formula() {
    let fx = fixture(8, 3, 12);
    let scalars: usize = fx
        .ps
        .iter()
        .filter(|p| p.name.starts_with("ppm."))
        .map(|p| p.value.len())
        .sum();
    assert_eq!(scalars, PpmParams::count(8, 3));
    assert_eq!(fx.c, 3);
    // in·h + h + h·d + d + 2d with in = 19, h = 4
    assert_eq!(BlockParams::count(19, 8), 19 * 4 + 4 + 4 * 8 + 8 + 16);
}
