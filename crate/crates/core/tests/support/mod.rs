//! Brute-force oracles shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use warpsynth::deform::Mask;
use warpsynth::Tensor;

/// Flow of the analytic Gaussian velocity field by forward Euler.
pub fn euler_flow(mu: (f64, f64), sigma: (f64, f64), m: (f64, f64), start: (f64, f64), steps: usize) -> (f64, f64) {
    let (mut r, mut c) = start;
    let dt = 1.0 / steps as f64;
    for _ in 0..steps {
        let d2 = (r - mu.0).powi(2) + (c - mu.1).powi(2);
        let vr = m.0 * (-0.5 * d2 / (sigma.0 * sigma.0)).exp();
        let vc = m.1 * (-0.5 * d2 / (sigma.1 * sigma.1)).exp();
        r += dt * vr;
        c += dt * vc;
    }
    (r, c)
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[c, n, n], |_| rng.gen_range(0.0..255.0))
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Mask {
    let (r0, c0) = (rng.gen_range(0..n / 4), rng.gen_range(0..n / 4));
    let holes: Vec<(usize, usize)> = (0..3).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    Mask::from_fn(n, n, |r, c| r >= r0 && c >= c0 && !holes.contains(&(r, c)))
}

pub fn oracle_psnr(a: &Tensor, b: &Tensor, m: &Mask, max: f64) -> f64 {
    let [c, h, w] = a.shape()[..] else { unreachable!() };
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if m.get(r, col) {
                    let i = (ch * h + r) * w + col;
                    sum += (a.data()[i] - b.data()[i]).powi(2);
                    n += 1;
                }
            }
        }
    }
    10.0 * (max * max / (sum / n as f64)).log10()
}

pub fn oracle_ssim(a: &Tensor, b: &Tensor, m: &Mask, max: f64) -> f64 {
    let [c, h, w] = a.shape()[..] else { unreachable!() };
    let (c1, c2) = ((0.01 * max) * (0.01 * max), (0.03 * max) * (0.03 * max));
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        for r in 0..=h - 7 {
            for col in 0..=w - 7 {
                let cells: Vec<usize> = (r..r + 7)
                    .flat_map(|i| (col..col + 7).map(move |j| (i, j)))
                    .filter(|&(i, j)| m.get(i, j))
                    .map(|(i, j)| (ch * h + i) * w + j)
                    .collect();
                if cells.len() < 49 {
                    continue;
                }
                let xs: Vec<f64> = cells.iter().map(|&i| a.data()[i]).collect();
                let ys: Vec<f64> = cells.iter().map(|&i| b.data()[i]).collect();
                let mx = xs.iter().sum::<f64>() / 49.0;
                let my = ys.iter().sum::<f64>() / 49.0;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / 49.0;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / 49.0;
                let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 49.0;
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn oracle_nmi(a: &Tensor, b: &Tensor, m: &Mask, bins: usize) -> f64 {
    let [c, h, w] = a.shape()[..] else { unreachable!() };
    let mut pairs = Vec::new();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if m.get(r, col) {
                    let i = (ch * h + r) * w + col;
                    pairs.push((a.data()[i], b.data()[i]));
                }
            }
        }
    }
    let lo_hi = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let v: Vec<f64> = pairs.iter().map(f).collect();
        (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(f64::MIN, f64::max))
    };
    let (la, ha) = lo_hi(&|p| p.0);
    let (lb, hb) = lo_hi(&|p| p.1);
    let bin = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64).floor().min(bins as f64 - 1.0) as usize
        } else {
            0
        }
    };
    let mut joint = std::collections::HashMap::new();
    let mut ma = std::collections::HashMap::new();
    let mut mb = std::collections::HashMap::new();
    for &(x, y) in &pairs {
        let (i, j) = (bin(x, la, ha), bin(y, lb, hb));
        *joint.entry((i, j)).or_insert(0usize) += 1;
        *ma.entry(i).or_insert(0usize) += 1;
        *mb.entry(j).or_insert(0usize) += 1;
    }
    let n = pairs.len() as f64;
    let h = |counts: Vec<usize>| counts.into_iter().map(|k| k as f64 / n).map(|p| -p * p.ln()).sum::<f64>();
    let hab = h(joint.into_values().collect());
    (h(ma.into_values().collect()) + h(mb.into_values().collect())) / hab
}

pub fn oracle_mde(a: &Tensor, b: &Tensor, m: &Mask) -> f64 {
    let [_, h, w] = a.shape()[..] else { unreachable!() };
    let (mut sum, mut n) = (0.0, 0);
    for r in 0..h {
        for c in 0..w {
            if m.get(r, c) {
                let q = r * w + c;
                let dr = a.data()[q] - b.data()[q];
                let dc = a.data()[h * w + q] - b.data()[h * w + q];
                sum += (dr * dr + dc * dc).sqrt();
                n += 1;
            }
        }
    }
    sum / n as f64
}
