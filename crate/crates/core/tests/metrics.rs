mod common;

use common::{naive_fs_loss, naive_mae, naive_scrps, naive_sqpc, random_grid};
use forkseq::decoder::ForecastGrid;
use forkseq::metrics::{crps_from_quantiles, mae, scrps, sqpc, sqpc_with, SqpcNormalization};
use forkseq::training::fs_loss;
use forkseq::Error;
use proptest::prelude::*;

fn grid(values: Vec<f64>, n_fcd: usize, h: usize, quantiles: Vec<f64>) -> ForecastGrid {
    let mut g = ForecastGrid::zeros(vec!["a".into()], vec![1], n_fcd, h, quantiles);
    g.values = values;
    g
}

#[test]
fn crps_examples() {
    let q = [0.1, 0.5, 0.9];
    assert_eq!(crps_from_quantiles(4.0, &[4.0; 3], &q), 0.0);
    assert_eq!(crps_from_quantiles(2.0, &[0.0], &[0.5]), 2.0);
}

#[test]
fn sqpc_single_term() {
    // (t=1,h=2) = 1 and (t=2,h=1) = 3 target the same date.
    let g = grid(vec![0.0, 1.0, 3.0, 0.0], 2, 2, vec![0.5]);
    let v = sqpc(&g, 0.5).unwrap();
    assert!((v.value - 100.0).abs() < 1e-12);
    assert_eq!(v.n_terms, 1);
    let z = grid(vec![0.0; 4], 2, 2, vec![0.5]);
    assert_eq!(sqpc(&z, 0.5).unwrap().value, 0.0);
    // The literal normalization divides by B T H = 4.
    let lit = sqpc_with(&g, 0.5, SqpcNormalization::Literal).unwrap();
    assert!((lit.value - 25.0).abs() < 1e-12);
}

#[test]
fn sqpc_zero_for_time_invariant_forecasts() {
    let (t_len, h_len) = (6, 4);
    let mut g = grid(vec![0.0; t_len * h_len], t_len, h_len, vec![0.5]);
    for t in 0..t_len {
        for h in 0..h_len {
            // Value depends only on the target date.
            g.set(0, t, h, 0, ((t + h) as f64).sin() + 3.0);
        }
    }
    assert!(sqpc(&g, 0.5).unwrap().value.abs() < 1e-12);
}

#[test]
fn sqpc_undefined_cases() {
    let g = grid(vec![1.0; 3], 1, 3, vec![0.5]);
    assert!(matches!(sqpc(&g, 0.5), Err(Error::UndefinedMetric(_))));
    let g = grid(vec![1.0; 4], 2, 2, vec![0.5]);
    assert!(matches!(sqpc(&g, 0.9), Err(Error::UndefinedMetric(_))));
}

#[test]
fn mae_and_scrps_examples() {
    let g = grid(vec![1.0, 1.0], 1, 2, vec![0.5]);
    let y = [0.0, 2.0];
    let m = [true, true];
    assert_eq!(mae(&y, &g, &m).unwrap().value, 1.0);
    let perfect = grid(vec![0.0, 2.0], 1, 2, vec![0.5]);
    assert_eq!(mae(&y, &perfect, &m).unwrap().value, 0.0);
    assert_eq!(scrps(&y, &perfect, &m).unwrap().value, 0.0);
    assert!(matches!(scrps(&[0.0, 0.0], &g, &m), Err(Error::UndefinedMetric(_))));
    assert!(matches!(mae(&y, &g, &[false, false]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(mae(&y, &g, &[true]), Err(Error::Shape(_))));
}

#[test]
fn metrics_match_naive_oracles() {
    for seed in 0..100 {
        let (g, y, m) = random_grid(seed);
        let s = scrps(&y, &g, &m).unwrap().value;
        assert!((s - naive_scrps(&g, &y, &m)).abs() < 1e-12, "seed {seed}");
        let a = mae(&y, &g, &m).unwrap().value;
        assert!((a - naive_mae(&g, &y, &m)).abs() < 1e-12, "seed {seed}");
        let qi = g.quantile_index(0.5).unwrap();
        let p = sqpc(&g, 0.5).unwrap().value;
        assert!((p - naive_sqpc(&g, qi)).abs() < 1e-12, "seed {seed}");
        assert!((0.0..=200.0).contains(&p));
        let l = fs_loss(&g, &y, &m, &g.quantiles.clone()).unwrap();
        assert!((l - naive_fs_loss(&g, &y, &m)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn mae_equals_crps_of_a_single_median() {
    for seed in 0..20 {
        let (mut g, y, m) = random_grid(seed);
        let qi = g.quantile_index(0.5).unwrap();
        let nq = g.num_quantiles();
        g.values = g.values.iter().skip(qi).step_by(nq).copied().collect();
        g.quantiles = vec![0.5];
        let a = mae(&y, &g, &m).unwrap().value;
        let den: f64 = y.iter().zip(&m).filter(|p| *p.1).map(|p| p.0.abs()).sum();
        let s = scrps(&y, &g, &m).unwrap().value * den;
        let n = m.iter().filter(|&&b| b).count() as f64;
        assert!((a - s / n).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scrps_is_scale_invariant(seed in 0u64..10_000, c in 1e-3f64..1e3) {
        let (g, y, m) = random_grid(seed);
        let base = scrps(&y, &g, &m).unwrap().value;
        let mut gc = g.clone();
        gc.values.iter_mut().for_each(|v| *v *= c);
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let scaled = scrps(&yc, &gc, &m).unwrap().value;
        prop_assert!((base - scaled).abs() < 1e-12, "{} vs {}", base, scaled);
    }

    #[test]
    fn sqpc_bounded_and_symmetric(seed in 0u64..10_000) {
        let (g, _, _) = random_grid(seed);
        let qi = g.quantile_index(0.5).unwrap();
        let v = sqpc(&g, 0.5).unwrap().value;
        prop_assert!((0.0..=200.0).contains(&v));
        // Swap the two members of every term: reversing the FCD and horizon
        // axes maps (t+1, h) to (t', h'+1) and back.
        let (b_n, t_n, h_n) = (g.num_series(), g.n_fcd, g.horizon);
        let mut r = g.clone();
        for b in 0..b_n {
            for t in 0..t_n {
                for h in 0..h_n {
                    r.set(b, t_n - 1 - t, h_n - 1 - h, qi, g.get(b, t, h, qi));
                }
            }
        }
        let w = sqpc(&r, 0.5).unwrap().value;
        prop_assert!((v - w).abs() < 1e-9, "{} vs {}", v, w);
    }
}
