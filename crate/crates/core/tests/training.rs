use forkseq::autodiff::{ParamStore, Tape};
use forkseq::decoder::{DecoderSpec, ForecastGrid};
use forkseq::encoders::EncoderFamily;
use forkseq::model::{Forecaster, LinearAr, ModelSpec, MqForecaster};
use forkseq::panel::{standard_scale, synthesize_panel};
use forkseq::theory::{ar_fcd_gradients, derive_seed, frozen_gradient_variance, loglog_fit, AblationData};
use forkseq::training::{
    fs_loss, fs_loss_var, lr_at, pinball, train, train_model, ws_loss_var, FcdSelection, Optimizer, Scheme,
    TrainConfig, TrainData, WsSampler,
};
use forkseq::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(seed: u64, b: usize, t: usize, h: usize, q: &[f64]) -> (ForecastGrid, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..b).map(|i| format!("s{i}")).collect();
    let mut g = ForecastGrid::zeros(ids, vec![1; b], t, h, q.to_vec());
    for v in &mut g.values {
        *v = rng.random_range(-3.0..3.0);
    }
    let targets = (0..b * t * h).map(|_| rng.random_range(-3.0..3.0)).collect();
    (g, targets)
}

/// Pinball mean by explicit loops over (b, t, h, q).
fn brute_force_loss(g: &ForecastGrid, y: &[f64], mask: &[bool], q: &[f64]) -> f64 {
    let [nb, nt, nh, nq] = g.shape();
    let (mut total, mut n) = (0.0, 0.0);
    for b in 0..nb {
        for t in 0..nt {
            for h in 0..nh {
                let i = (b * nt + t) * nh + h;
                if !mask[i] {
                    continue;
                }
                for k in 0..nq {
                    let d = y[i] - g.get(b, t, h, k);
                    total += if d >= 0.0 { q[k] * d } else { (q[k] - 1.0) * d };
                    n += 1.0;
                }
            }
        }
    }
    total / n
}

#[test]
fn fs_loss_matches_brute_force_with_half_masked() {
    let q = [0.1, 0.5, 0.9];
    let (g, y) = random_grid(1, 3, 7, 4, &q);
    let mask: Vec<bool> = (0..y.len()).map(|i| i % 2 == 0).collect();
    let got = fs_loss(&g, &y, &mask, &q).unwrap();
    let want = brute_force_loss(&g, &y, &mask, &q);
    assert!((got - want).abs() < 1e-12, "{got} {want}");
}

#[test]
fn pinball_examples() {
    assert_eq!(pinball(1.0, 0.0, 0.5), 0.5);
    assert!((pinball(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
    assert_eq!(pinball(-4.0, -4.0, 0.2), 0.0);
}

#[test]
fn perfect_median_forecasts_have_zero_loss() {
    let (mut g, y) = random_grid(2, 2, 5, 3, &[0.5]);
    g.values.copy_from_slice(&y);
    assert_eq!(fs_loss(&g, &y, &vec![true; y.len()], &[0.5]).unwrap(), 0.0);
}

#[test]
fn schedule_defaults() {
    let cfg = TrainConfig::new(Scheme::Fs, ModelSpec::new(EncoderFamily::Cnn, 18));
    assert_eq!((cfg.batch_size, cfg.max_steps, cfg.lr_step), (8, 30_000, 10_000));
    assert_eq!(cfg.optimizer, Optimizer::Sgd);
    assert_eq!(lr_at(0, &cfg), 0.001);
    assert!((lr_at(10_000, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_at(29_999, &cfg) - 1e-5).abs() < 1e-18);
}

fn ramp_data(len: usize, train_end: usize, h: usize) -> TrainData {
    TrainData {
        series: vec![(1..=len).map(|i| i as f64).collect()],
        train_end: vec![train_end],
        static_covs: vec![None],
        horizon: h,
    }
}

#[test]
fn ws_valid_fcds_and_errors() {
    let d = ramp_data(100, 100, 18);
    let s = WsSampler::new(&d, 48).unwrap();
    let fcds: Vec<usize> = s.pairs().iter().map(|p| p.1).collect();
    assert_eq!(fcds, (48..=82).collect::<Vec<_>>());
    // Window ends at the FCD, targets follow it.
    let ex = s.example(&d, 0, 82);
    assert_eq!(ex.window.first(), Some(&35.0));
    assert_eq!(ex.window.last(), Some(&82.0));
    assert_eq!(ex.target, (83..=100).map(f64::from).collect::<Vec<_>>());
    assert!(matches!(WsSampler::new(&ramp_data(100, 40, 18), 48), Err(Error::Sampler(_))));
}

/// Noiseless AR(2) with intercept and zero pre-sample values: every
/// multi-step target is an exact affine function of the zero-padded lags.
fn noiseless_ar(len: usize, start: f64) -> Vec<f64> {
    let mut x: Vec<f64> = Vec::with_capacity(len);
    for t in 0..len {
        let l1 = if t >= 1 { x[t - 1] } else { 0.0 };
        let l2 = if t >= 2 { x[t - 2] } else { 0.0 };
        x.push(start + 0.5 * l1 - 0.3 * l2);
    }
    x
}

#[test]
fn linear_ar_fits_noiseless_ar_data() {
    let one = TrainData {
        series: vec![noiseless_ar(80, 0.5)],
        train_end: vec![80],
        static_covs: vec![None],
        horizon: 3,
    };
    let (model, mut store) = LinearAr::new(2, 3, &[0.5], 0).unwrap();
    let mut cfg = TrainConfig::new(Scheme::Fs, ModelSpec::new(EncoderFamily::Mlp, 3));
    cfg.batch_size = 1;
    cfg.lr0 = 0.2;
    cfg.lr_step = 5000;
    cfg.lr_decay = 0.3;
    cfg.max_steps = 20_000;
    let traj = train_model(&model, &mut store, &one, &cfg).unwrap();
    let last = traj.final_loss().unwrap();
    assert!(last < 1e-3, "final loss {last}");
    assert!(traj.records[0].loss > 0.1);
}

fn small_spec(family: EncoderFamily, h: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(family, h);
    spec.encoder.hidden = 8;
    spec.encoder.conv_channels = 6;
    spec.encoder.heads = 2;
    spec.encoder.attn_layers = 1;
    spec.encoder.dropout = 0.1;
    spec.decoder = DecoderSpec {
        agnostic_dim: 8,
        specific_dim: 2,
        quantiles: vec![0.1, 0.5, 0.9],
        ..DecoderSpec::new(h)
    };
    spec
}

#[test]
fn training_is_deterministic() {
    let raw = synthesize_panel(6, 60, 4, 1.0, 2);
    let (panel, _) = standard_scale(&raw, &raw.splits().unwrap()).unwrap();
    for (family, scheme) in [(EncoderFamily::Transformer, Scheme::Fs), (EncoderFamily::Cnn, Scheme::Ws)] {
        let mut cfg = TrainConfig::new(scheme, small_spec(family, panel.horizon()));
        cfg.max_steps = 15;
        cfg.batch_size = 3;
        cfg.window_length = Some(10);
        cfg.optimizer = Optimizer::adam();
        let (_, a, ta) = train(&panel, &cfg).unwrap();
        let (_, b, tb) = train(&panel, &cfg).unwrap();
        assert_eq!(ta, tb);
        let bits = |s: &ParamStore| s.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(ta.records.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(ta.records.iter().all(|r| r.lr == lr_at(r.step, &cfg)));
    }
}

#[test]
fn divergence_returns_partial_trajectory() {
    let data = ramp_data(40, 30, 2);
    let (model, mut store) = LinearAr::new(1, 2, &[0.5], 0).unwrap();
    let mut cfg = TrainConfig::new(Scheme::Fs, ModelSpec::new(EncoderFamily::Mlp, 2));
    cfg.lr0 = 1e306;
    cfg.max_steps = 50;
    match train_model(&model, &mut store, &data, &cfg) {
        Err(Error::Divergence { step, trajectory }) => {
            assert!(step > 0 && step < 50);
            assert_eq!(trajectory.len(), step);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn gradient(store: &mut ParamStore, f: impl FnOnce(&mut Tape, &ParamStore) -> forkseq::Result<forkseq::autodiff::Var>) -> Vec<f64> {
    store.zero_grads();
    let mut tape = Tape::new();
    let l = f(&mut tape, store).unwrap();
    tape.backward(l, store).unwrap();
    store.flat_grads()
}

/// Frozen model: averaging WS gradients over all valid windows reproduces the
/// FS gradient over the same FCDs, exactly by enumeration and within 2% by
/// Monte Carlo.
#[test]
fn ws_gradient_is_unbiased_for_fs_gradient() {
    let raw = synthesize_panel(3, 40, 4, 1.0, 5);
    let data = TrainData::from_panel(&raw, &raw.splits().unwrap()).unwrap();
    let h = data.horizon;
    let window = 6;
    let sampler = WsSampler::new(&data, window).unwrap();
    let sel = FcdSelection {
        min_fcd: window,
        full_horizon: true,
    };
    let all: Vec<usize> = (0..data.len()).collect();

    // Small encoder-decoder, exact enumeration.
    let mut spec = small_spec(EncoderFamily::Cnn, h);
    spec.encoder.conv_dilations = vec![1, 2];
    let (model, mut store) = MqForecaster::new(spec, 3).unwrap();
    assert!(model.receptive_field().unwrap() <= window);
    let fs = gradient(&mut store, |t, s| fs_loss_var(&model, t, s, &data, &all, sel));
    let mut mean = vec![0.0; fs.len()];
    for &(b, t) in sampler.pairs() {
        let ex = sampler.example(&data, b, t);
        let g = gradient(&mut store, |tp, s| ws_loss_var(&model, tp, s, &data, &[ex]));
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / sampler.pairs().len() as f64;
        }
    }
    let scale = fs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let worst = fs.iter().zip(&mean).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(worst <= 1e-10 * scale.max(1.0), "{worst}");

    // Linear AR, 10^4 single-window draws, per-coordinate relative error.
    let (ar, mut ar_store) = LinearAr::new(3, h, &[0.5], 0).unwrap();
    let sampler = WsSampler::new(&data, ar.lags()).unwrap();
    let sel = FcdSelection {
        min_fcd: ar.lags(),
        full_horizon: true,
    };
    let fs = gradient(&mut ar_store, |t, s| fs_loss_var(&ar, t, s, &data, &all, sel));
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mc = vec![0.0; fs.len()];
    for _ in 0..draws {
        let batch = sampler.sample(&data, 1, &mut rng);
        let g = gradient(&mut ar_store, |t, s| ws_loss_var(&ar, t, s, &data, &batch));
        for (m, v) in mc.iter_mut().zip(g) {
            *m += v / draws as f64;
        }
    }
    for (i, (a, b)) in fs.iter().zip(&mc).enumerate() {
        assert!(a.abs() > 0.0);
        let rel = (a - b).abs() / a.abs();
        assert!(rel < 0.02, "coordinate {i}: fs {a} ws {b} rel {rel}");
    }
}

#[test]
fn fs_gradient_variance_decays_inversely_with_fcd_count() {
    let raw = synthesize_panel(40, 145, 12, 1.0, 8);
    let data = AblationData {
        series: raw.series.iter().map(|s| s.values.clone()).collect(),
    };
    let (model, store) = LinearAr::new(12, 1, &[0.5], 0).unwrap();
    let per_fcd = ar_fcd_gradients(&model, &store, &data, 0.5);
    let sizes = [2, 4, 8, 16, 33, 66, 132];
    let var = frozen_gradient_variance(&per_fcd, &sizes, 2000, derive_seed(8, 1)).unwrap();
    let pts: Vec<(f64, f64)> = var.iter().map(|&(k, v)| (k as f64, v)).collect();
    let fit = loglog_fit(&pts).unwrap();
    assert!((fit.slope + 1.0).abs() <= 0.15, "{pts:?} slope {}", fit.slope);
}

/// Per-FCD analytic AR gradients average to the tape gradient of the pooled loss.
#[test]
fn analytic_ar_gradients_match_tape() {
    let raw = synthesize_panel(2, 30, 4, 1.0, 1);
    let data = AblationData {
        series: raw.series.iter().map(|s| s.values.clone()).collect(),
    };
    let (model, mut store) = LinearAr::new(2, 1, &[0.3], 0).unwrap();
    model.set_theta(&mut store, 0, 0, 0, 0.4);
    model.set_theta(&mut store, 2, 0, 0, 0.2);
    let per_fcd = ar_fcd_gradients(&model, &store, &data, 0.3);
    let n = per_fcd.len() as f64;
    let train = TrainData {
        series: data.series.clone(),
        train_end: vec![30, 30],
        static_covs: vec![None, None],
        horizon: 1,
    };
    let sel = FcdSelection {
        min_fcd: model.lags(),
        full_horizon: true,
    };
    let tape_grad = gradient(&mut store, |t, s| fs_loss_var(&model, t, s, &train, &[0, 1], sel));
    // Store order: theta rows for y_{t-p}..y_t, then the intercept.
    let mut mean = vec![0.0; 4];
    for g in &per_fcd {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / n;
        }
    }
    let expect = [mean[2], mean[1], mean[0], mean[3]];
    for (a, b) in tape_grad.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{tape_grad:?} {expect:?}");
    }
}

/// Full train loss (all series, all FCDs) along an SGD run of a small CNN,
/// sampled every `every` steps. Each step is a one-step `train_model` call
/// with its own seed, which is exact for plain SGD at constant lr.
fn full_loss_curve(data: &TrainData, scheme: Scheme, batch: usize, steps: usize, every: usize, seed: u64) -> Vec<f64> {
    let mut spec = ModelSpec::new(EncoderFamily::Cnn, data.horizon);
    spec.encoder.conv_channels = 8;
    spec.decoder = DecoderSpec {
        agnostic_dim: 16,
        specific_dim: 4,
        quantiles: vec![0.5],
        ..DecoderSpec::new(data.horizon)
    };
    let (model, mut store) = MqForecaster::new(spec.clone(), seed).unwrap();
    let mut cfg = TrainConfig::new(scheme, spec);
    cfg.batch_size = batch;
    cfg.lr0 = 0.05;
    cfg.max_steps = 1;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    for step in 0..steps {
        if step % every == 0 {
            let mut tape = Tape::inference();
            let l = fs_loss_var(&model, &mut tape, &store, data, &all, FcdSelection::default()).unwrap();
            curve.push(tape.value(l).item());
        }
        cfg.seed = derive_seed(seed, step as u64);
        train_model(&model, &mut store, data, &cfg).unwrap();
    }
    curve
}

/// FS with one series per step against WS with two windows per step, full
/// train loss averaged over two seeds.
#[test]
fn fs_reaches_loss_thresholds_before_ws() {
    let raw = synthesize_panel(50, 150, 12, 1.0, 3);
    let splits = raw.splits().unwrap();
    let (panel, _) = standard_scale(&raw, &splits).unwrap();
    let data = TrainData::from_panel(&panel, &splits).unwrap();
    let mean_curve = |scheme: Scheme, batch: usize| {
        let a = full_loss_curve(&data, scheme, batch, 600, 20, 1);
        let b = full_loss_curve(&data, scheme, batch, 600, 20, 2);
        a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect::<Vec<_>>()
    };
    let fs = mean_curve(Scheme::Fs, 1);
    let ws = mean_curve(Scheme::Ws, 2);
    let first_below = |c: &[f64], th: f64| c.iter().position(|&l| l <= th);
    let lo = fs.iter().chain(&ws).cloned().fold(f64::INFINITY, f64::min);
    let hi = fs[0];
    let mut checked = 0;
    for i in 1..40 {
        let th = lo + (hi - lo) * i as f64 / 40.0;
        if let (Some(f), Some(w)) = (first_below(&fs, th), first_below(&ws, th)) {
            assert!(f <= w, "threshold {th}: fs {f}, ws {w}\n{fs:?}\n{ws:?}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "{checked}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn targets_outside_the_mask_do_not_matter(seed in 0u64..10_000, flip in 0usize..60, v in -100.0f64..100.0) {
        let q = [0.2, 0.5];
        let (g, mut y) = random_grid(seed, 2, 5, 6, &q);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut mask: Vec<bool> = (0..y.len()).map(|_| rng.random_bool(0.5)).collect();
        mask[0] = true;
        let i = 1 + flip % (y.len() - 1);
        mask[i] = false;
        let before = fs_loss(&g, &y, &mask, &q).unwrap();
        y[i] = v;
        prop_assert_eq!(before.to_bits(), fs_loss(&g, &y, &mask, &q).unwrap().to_bits());
        prop_assert!((before - brute_force_loss(&g, &y, &mask, &q)).abs() < 1e-12);
    }
}
