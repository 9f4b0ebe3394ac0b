use rand::Rng;

use super::Var;
use crate::error::{shape_err, Result};

/// Power-iteration state for normalizing one weight by its largest singular value.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm {
    /// Left singular vector estimate, unit length, one entry per output row.
    pub u: Vec<f64>,
    pub sigma: f64,
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|a| *a /= n);
}

impl SpectralNorm {
    pub fn new<R: Rng>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_in_place(&mut u);
        SpectralNorm { u, sigma: 1.0 }
    }

    /// Runs one power iteration on `w` viewed as `[rows, rest]` and returns `w / sigma`.
    ///
    /// With `update == false` the stored estimate is reused unchanged.
    /// Sigma enters the tape as a constant.
    pub fn normalize<'t>(&mut self, w: Var<'t>, update: bool) -> Result<Var<'t>> {
        let wv = w.value();
        let rows = self.u.len();
        if rows == 0 || wv.shape().first() != Some(&rows) {
            return shape_err(format!("spectral state has {rows} rows, weight {:?}", wv.shape()));
        }
        if update {
            let cols = wv.len() / rows;
            let data = wv.data();
            let mut v: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| data[i * cols + j] * self.u[i]).sum()).collect();
            normalize_in_place(&mut v);
            let mut wv_prod: Vec<f64> =
                (0..rows).map(|i| data[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let sigma = wv_prod.iter().map(|a| a * a).sum::<f64>().sqrt();
            normalize_in_place(&mut wv_prod);
            self.u = wv_prod;
            self.sigma = sigma.max(1e-12);
        }
        Ok(w.scale(1.0 / self.sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_top_singular(t: &Tensor) -> f64 {
        let (r, c) = (t.shape()[0], t.len() / t.shape()[0]);
        nalgebra::DMatrix::from_row_slice(r, c, t.data()).singular_values().max()
    }

    fn warmed(w: &Tensor, iters: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sn = SpectralNorm::new(w.shape()[0], &mut rng);
        let tape = Tape::new();
        let mut out = None;
        for _ in 0..iters {
            out = Some(sn.normalize(tape.constant(w.clone()), true).unwrap().value());
        }
        (*out.unwrap()).clone()
    }

    #[test]
    fn diagonal_is_divided_by_largest_entry() {
        let w = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let out = warmed(&w, 30);
        assert!((out.data()[0] - 1.0).abs() < 1e-6 && (out.data()[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn unit_rank_one_is_unchanged() {
        let a = [0.6, 0.8];
        let b = [1.0 / 3.0_f64.sqrt(); 3];
        let w = Tensor::from_fn(&[2, 3], |k| a[k / 3] * b[k % 3]);
        assert!((exact_top_singular(&w) - 1.0).abs() < 1e-12);
        let out = warmed(&w, 3);
        for (x, y) in out.data().iter().zip(w.data()) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn random_square_ends_near_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let out = warmed(&w, 20);
        let s = exact_top_singular(&out);
        assert!(s <= 1.0 + 1e-2, "normalized spectral norm {s}");
    }

    #[test]
    fn sigma_is_constant_for_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sn = SpectralNorm::new(2, &mut rng);
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let y = sn.normalize(w, true).unwrap();
        tape.backward(y.sum()).unwrap();
        let g = tape.grad(w).unwrap();
        assert!(g.data().iter().all(|&x| (x - 1.0 / sn.sigma).abs() < 1e-15));
    }
}
