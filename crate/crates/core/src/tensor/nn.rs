use super::tape::{GradBuf, Op};
use super::{Tensor, Var};
use crate::error::{shape_err, Result};

impl<'t> Var<'t> {
    /// `w * x + b` for `x: [N_in]`, `w: [N_out, N_in]`, `b: [N_out]`.
    pub fn dense(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let [n_out, n_in] = wv.shape()[..] else {
            return shape_err(format!("dense weight must be 2D, got {:?}", wv.shape()));
        };
        if xv.shape() != [n_in] || bv.shape() != [n_out] {
            return shape_err(format!("dense {:?} x {:?} + {:?}", wv.shape(), xv.shape(), bv.shape()));
        }
        let out = Tensor::from_fn(&[n_out], |o| {
            let row = &wv.data()[o * n_in..(o + 1) * n_in];
            row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>() + bv.data()[o]
        });
        Ok(self.tape.push(out, Op::Dense { x: self.id, w: w.id, b: b.id }, &[self.id, w.id, b.id]))
    }

    /// Per-channel spatial mean, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let v = self.value();
        let (c, h, w) = v.chw()?;
        let n = h * w;
        let out = Tensor::from_fn(&[c], |ch| v.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64);
        Ok(self.tape.push(out, Op::GlobalAvgPool(self.id), &[self.id]))
    }

    /// Group normalization of `[C,H,W]` followed by a per-channel affine map.
    pub fn group_norm(self, groups: usize, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let (c, h, w) = xv.chw()?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if gv.shape() != [c] || bv.shape() != [c] {
            return shape_err(format!("group norm affine {:?}/{:?} for {c} channels", gv.shape(), bv.shape()));
        }
        let hw = h * w;
        let per_group = c / groups * hw;
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let mut out = vec![0.0; xv.len()];
        for g in 0..groups {
            let span = g * per_group..(g + 1) * per_group;
            let xs = &xv.data()[span.clone()];
            let m = xs.iter().sum::<f64>() / per_group as f64;
            let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per_group as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (i, idx) in span.enumerate() {
                let ch = idx / hw;
                out[idx] = (xs[i] - m) * r * gv.data()[ch] + bv.data()[ch];
            }
            mean.push(m);
            rstd.push(r);
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        let op = Op::GroupNorm { x: self.id, gamma: gamma.id, beta: beta.id, groups, mean, rstd };
        Ok(self.tape.push(out, op, &[self.id, gamma.id, beta.id]))
    }
}

pub(crate) fn dense_backward(grads: &mut GradBuf<'_>, g: &Tensor, x: usize, w: usize, b: usize) {
    let (xv, wv) = (grads.value(x), grads.value(w));
    let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
    if grads.wants(x) {
        let dx = Tensor::from_fn(&[n_in], |i| (0..n_out).map(|o| wv.data()[o * n_in + i] * g.data()[o]).sum());
        grads.add(x, dx);
    }
    if grads.wants(w) {
        let dw = Tensor::from_fn(&[n_out, n_in], |k| g.data()[k / n_in] * xv.data()[k % n_in]);
        grads.add(w, dw);
    }
    grads.add(b, g.clone());
}

pub(crate) fn gap_backward(grads: &mut GradBuf<'_>, g: &Tensor, x: usize) {
    let xv = grads.value(x);
    let n = xv.shape()[1] * xv.shape()[2];
    let dx = Tensor::from_fn(xv.shape(), |i| g.data()[i / n] / n as f64);
    grads.add(x, dx);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    grads: &mut GradBuf<'_>,
    g: &Tensor,
    x: usize,
    gamma: usize,
    beta: usize,
    groups: usize,
    mean: &[f64],
    rstd: &[f64],
) {
    let (xv, gv) = (grads.value(x), grads.value(gamma));
    let c = xv.shape()[0];
    let hw = xv.len() / c;
    let per_group = c / groups * hw;
    let xhat = |idx: usize| (xv.data()[idx] - mean[idx / per_group]) * rstd[idx / per_group];
    if grads.wants(gamma) {
        let dg = Tensor::from_fn(&[c], |ch| (ch * hw..(ch + 1) * hw).map(|i| g.data()[i] * xhat(i)).sum());
        grads.add(gamma, dg);
    }
    if grads.wants(beta) {
        let db = Tensor::from_fn(&[c], |ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum());
        grads.add(beta, db);
    }
    if grads.wants(x) {
        let mut dx = vec![0.0; xv.len()];
        for (grp, &rs) in rstd.iter().enumerate() {
            let span = grp * per_group..(grp + 1) * per_group;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in span.clone() {
                let d = g.data()[i] * gv.data()[i / hw];
                sum_d += d;
                sum_dx += d * xhat(i);
            }
            let n = per_group as f64;
            for i in span {
                let d = g.data()[i] * gv.data()[i / hw];
                dx[i] = rs * (d - sum_d / n - xhat(i) * sum_dx / n);
            }
        }
        grads.add(x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
    }
}
