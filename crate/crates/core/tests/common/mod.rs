//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use forkseq::decoder::ForecastGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_grid(seed: u64) -> (ForecastGrid, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..4);
    let t = rng.random_range(2..7);
    let h = rng.random_range(2..6);
    let quantiles: Vec<f64> = match rng.random_range(0..3) {
        0 => vec![0.5],
        1 => vec![0.1, 0.5, 0.9],
        _ => (1..10).map(|i| i as f64 / 10.0).collect(),
    };
    let mut grid = ForecastGrid::zeros(
        (0..b).map(|i| format!("s{i}")).collect(),
        (0..b).map(|_| rng.random_range(1..20)).collect(),
        t,
        h,
        quantiles,
    );
    for v in &mut grid.values {
        *v = rng.random_range(-5.0..20.0);
    }
    let n = b * t * h;
    let targets = (0..n).map(|_| rng.random_range(-5.0..20.0)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    mask[0] = true;
    (grid, targets, mask)
}

fn pin(y: f64, p: f64, q: f64) -> f64 {
    if y >= p {
        q * (y - p)
    } else {
        (1.0 - q) * (p - y)
    }
}

fn idx(g: &ForecastGrid, b: usize, t: usize, h: usize) -> usize {
    (b * g.n_fcd + t) * g.horizon + h
}

pub fn naive_scrps(g: &ForecastGrid, y: &[f64], m: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for b in 0..g.num_series() {
        for t in 0..g.n_fcd {
            for h in 0..g.horizon {
                let i = idx(g, b, t, h);
                if !m[i] {
                    continue;
                }
                let mut s = 0.0;
                for (qi, &q) in g.quantiles.iter().enumerate() {
                    s += pin(y[i], g.get(b, t, h, qi), q);
                }
                num += 2.0 * s / g.quantiles.len() as f64;
                den += y[i].abs();
            }
        }
    }
    num / den
}

pub fn naive_mae(g: &ForecastGrid, y: &[f64], m: &[bool]) -> f64 {
    let qi = g.quantiles.iter().position(|&q| q == 0.5).unwrap();
    let (mut s, mut n) = (0.0, 0.0);
    for b in 0..g.num_series() {
        for t in 0..g.n_fcd {
            for h in 0..g.horizon {
                let i = idx(g, b, t, h);
                if m[i] {
                    s += (y[i] - g.get(b, t, h, qi)).abs();
                    n += 1.0;
                }
            }
        }
    }
    s / n
}

pub fn naive_sqpc(g: &ForecastGrid, qi: usize) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for b in 0..g.num_series() {
        for t in 0..g.n_fcd - 1 {
            for h in 0..g.horizon - 1 {
                let a = g.get(b, t + 1, h, qi);
                let c = g.get(b, t, h + 1, qi);
                if a != 0.0 || c != 0.0 {
                    s += (a - c).abs() / (a.abs() + c.abs());
                }
                n += 1.0;
            }
        }
    }
    200.0 * s / n
}

pub fn naive_fs_loss(g: &ForecastGrid, y: &[f64], m: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for b in 0..g.num_series() {
        for t in 0..g.n_fcd {
            for h in 0..g.horizon {
                let i = idx(g, b, t, h);
                if !m[i] {
                    continue;
                }
                for (qi, &q) in g.quantiles.iter().enumerate() {
                    s += pin(y[i], g.get(b, t, h, qi), q);
                    n += 1.0;
                }
            }
        }
    }
    s / n
}

/// Every `(t, h)` with `t + h = tau`, `h >= eta` in the `T x H` box, by brute force.
pub fn naive_available_set(tau: usize, eta: usize, t_len: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 1..=t_len {
        for h in 1..=horizon {
            if t + h == tau && h >= eta {
                out.push((t, h));
            }
        }
    }
    out
}
