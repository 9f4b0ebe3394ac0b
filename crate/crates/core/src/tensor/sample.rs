//! Bilinear resampling and closed-form affine coordinate maps.
//!
//! Affine maps are stored as 6-vectors `[a00, a01, a10, a11, b0, b1]` acting on
//! `(row, col)` pixel coordinates: `src = A * p + b`.

use super::tape::{GradBuf, Op};
use super::{Tensor, Var};
use crate::error::{shape_err, Result};

/// Value read at interpolation corners outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Zero, for images.
    Zero,
    /// For 2-channel coordinate maps: the displacement of the nearest border
    /// pixel added to the corner's own `(row, col)` position.
    Extend,
}

struct Corners {
    idx: [(isize, isize); 4],
    w: [f64; 4],
    fr: f64,
    fc: f64,
}

fn corners(r: f64, c: f64) -> Corners {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (i, j) = (r0 as isize, c0 as isize);
    Corners {
        idx: [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)],
        w: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
        fr,
        fc,
    }
}

#[inline]
fn inside(i: isize, j: isize, h: usize, w: usize) -> bool {
    i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w
}

/// Flat index of the pixel a corner reads from, if any.
#[inline]
fn source_index(ch: usize, h: usize, w: usize, (i, j): (isize, isize), fill: Fill) -> Option<usize> {
    if inside(i, j, h, w) {
        return Some((ch * h + i as usize) * w + j as usize);
    }
    match fill {
        Fill::Zero => None,
        Fill::Extend => {
            let ic = i.clamp(0, h as isize - 1) as usize;
            let jc = j.clamp(0, w as isize - 1) as usize;
            Some((ch * h + ic) * w + jc)
        }
    }
}

#[inline]
fn corner_value(img: &[f64], ch: usize, h: usize, w: usize, (i, j): (isize, isize), fill: Fill) -> f64 {
    match (source_index(ch, h, w, (i, j), fill), fill) {
        (None, _) => 0.0,
        (Some(idx), Fill::Zero) => img[idx],
        (Some(idx), Fill::Extend) => {
            let shift = if ch == 0 { i - i.clamp(0, h as isize - 1) } else { j - j.clamp(0, w as isize - 1) };
            img[idx] + shift as f64
        }
    }
}

/// `true` iff every corner carrying positive interpolation weight lies in
/// `[0,h) x [0,w)` and passes `valid`.
pub(crate) fn strict_corner_check(r: f64, c: f64, h: usize, w: usize, valid: impl Fn(usize, usize) -> bool) -> bool {
    if !r.is_finite() || !c.is_finite() {
        return false;
    }
    let k = corners(r, c);
    k.idx.iter().zip(&k.w).all(|(&(i, j), &wt)| wt <= 0.0 || (inside(i, j, h, w) && valid(i as usize, j as usize)))
}

/// `true` iff every positively weighted corner that lies inside `[0,h) x [0,w)`
/// passes `valid`; corners outside are accepted.
pub(crate) fn lenient_corner_check(r: f64, c: f64, h: usize, w: usize, valid: impl Fn(usize, usize) -> bool) -> bool {
    if !r.is_finite() || !c.is_finite() {
        return false;
    }
    let k = corners(r, c);
    k.idx.iter().zip(&k.w).all(|(&(i, j), &wt)| wt <= 0.0 || !inside(i, j, h, w) || valid(i as usize, j as usize))
}

fn affine_parts(p: &[f64]) -> ([[f64; 2]; 2], [f64; 2]) {
    ([[p[0], p[1]], [p[2], p[3]]], [p[4], p[5]])
}

impl<'t> Var<'t> {
    /// Samples a `[C,H,W]` image at `[2,H',W']` pixel coordinates `(row, col)`.
    pub fn bilinear_sample(self, coords: Var<'t>, fill: Fill) -> Result<Var<'t>> {
        let (img, cv) = (self.value(), coords.value());
        let (c, h, w) = img.chw()?;
        let (two, ho, wo) = cv.chw()?;
        if two != 2 {
            return shape_err(format!("coordinates must be [2,H,W], got {:?}", cv.shape()));
        }
        if fill == Fill::Extend && c != 2 {
            return shape_err("extend fill needs a 2-channel coordinate map");
        }
        let p = ho * wo;
        let mut out = vec![0.0; c * p];
        for q in 0..p {
            let (r, cc) = (cv.data()[q], cv.data()[p + q]);
            if !r.is_finite() || !cc.is_finite() {
                continue;
            }
            let k = corners(r, cc);
            for ch in 0..c {
                let mut acc = 0.0;
                for n in 0..4 {
                    if k.w[n] != 0.0 {
                        acc += k.w[n] * corner_value(img.data(), ch, h, w, k.idx[n], fill);
                    }
                }
                out[ch * p + q] = acc;
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        let op = Op::Bilinear { image: self.id, coords: coords.id, fill };
        Ok(self.tape.push(out, op, &[self.id, coords.id]))
    }

    /// Evaluates the affine map `self: [6]` at every point of `coords: [2,H,W]`.
    pub fn affine_apply(self, coords: Var<'t>) -> Result<Var<'t>> {
        let (pv, cv) = (self.value(), coords.value());
        if pv.len() != 6 {
            return shape_err(format!("affine parameters must have 6 entries, got {:?}", pv.shape()));
        }
        let (two, h, w) = cv.chw()?;
        if two != 2 {
            return shape_err(format!("coordinates must be [2,H,W], got {:?}", cv.shape()));
        }
        let (a, b) = affine_parts(pv.data());
        let p = h * w;
        let mut out = vec![0.0; 2 * p];
        for q in 0..p {
            let (r, c) = (cv.data()[q], cv.data()[p + q]);
            out[q] = a[0][0] * r + a[0][1] * c + b[0];
            out[p + q] = a[1][0] * r + a[1][1] * c + b[1];
        }
        let out = Tensor::new(vec![2, h, w], out)?;
        Ok(self.tape.push(out, Op::AffineApply { params: self.id, coords: coords.id }, &[self.id, coords.id]))
    }

    /// Affine map `x -> inner(outer(x))`, with `self` the outer map.
    pub fn affine_compose(self, inner: Var<'t>) -> Result<Var<'t>> {
        let (pv, qv) = (self.value(), inner.value());
        if pv.len() != 6 || qv.len() != 6 {
            return shape_err("affine parameters must have 6 entries");
        }
        let (ap, bp) = affine_parts(pv.data());
        let (aq, bq) = affine_parts(qv.data());
        let mut out = [0.0; 6];
        for i in 0..2 {
            for j in 0..2 {
                out[i * 2 + j] = aq[i][0] * ap[0][j] + aq[i][1] * ap[1][j];
            }
            out[4 + i] = aq[i][0] * bp[0] + aq[i][1] * bp[1] + bq[i];
        }
        let out = Tensor::new(vec![6], out.to_vec())?;
        Ok(self.tape.push(out, Op::AffineCompose { outer: self.id, inner: inner.id }, &[self.id, inner.id]))
    }

    /// Source-lookup affine map of the rigid motion `self = [angle, dy, dx]`:
    /// content rotated by `angle` about `center`, then translated by `(dy, dx)`.
    pub fn rigid_affine(self, center: (f64, f64)) -> Result<Var<'t>> {
        let pv = self.value();
        if pv.len() != 3 {
            return shape_err(format!("rigid parameters must be [angle, dy, dx], got {:?}", pv.shape()));
        }
        let out = rigid_params_to_affine(pv.data()[0], (pv.data()[1], pv.data()[2]), center);
        let out = Tensor::new(vec![6], out.to_vec())?;
        Ok(self.tape.push(out, Op::RigidAffine { params: self.id, center }, &[self.id]))
    }
}

pub(crate) fn rigid_params_to_affine(angle: f64, t: (f64, f64), center: (f64, f64)) -> [f64; 6] {
    let (s, c) = angle.sin_cos();
    let a = [[c, s], [-s, c]];
    let (py, px) = (center.0 + t.0, center.1 + t.1);
    [
        a[0][0],
        a[0][1],
        a[1][0],
        a[1][1],
        center.0 - (a[0][0] * py + a[0][1] * px),
        center.1 - (a[1][0] * py + a[1][1] * px),
    ]
}

pub(crate) fn bilinear_backward(grads: &mut GradBuf<'_>, g: &Tensor, image: usize, coords: usize, fill: Fill) {
    let (img, cv) = (grads.value(image), grads.value(coords));
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let p = cv.len() / 2;
    let want_img = grads.wants(image);
    let want_coords = grads.wants(coords);
    let mut d_img = if want_img { vec![0.0; img.len()] } else { Vec::new() };
    let mut d_coords = if want_coords { vec![0.0; cv.len()] } else { Vec::new() };
    for q in 0..p {
        let (r, cc) = (cv.data()[q], cv.data()[p + q]);
        if !r.is_finite() || !cc.is_finite() {
            continue;
        }
        let k = corners(r, cc);
        let (mut dr, mut dc) = (0.0, 0.0);
        for ch in 0..c {
            let go = g.data()[ch * p + q];
            if go == 0.0 {
                continue;
            }
            if want_img {
                for n in 0..4 {
                    if k.w[n] != 0.0 {
                        if let Some(idx) = source_index(ch, h, w, k.idx[n], fill) {
                            d_img[idx] += k.w[n] * go;
                        }
                    }
                }
            }
            if want_coords {
                let v: [f64; 4] = std::array::from_fn(|n| corner_value(img.data(), ch, h, w, k.idx[n], fill));
                dr += go * ((1.0 - k.fc) * (v[2] - v[0]) + k.fc * (v[3] - v[1]));
                dc += go * ((1.0 - k.fr) * (v[1] - v[0]) + k.fr * (v[3] - v[2]));
            }
        }
        if want_coords {
            d_coords[q] = dr;
            d_coords[p + q] = dc;
        }
    }
    if want_img {
        grads.add(image, Tensor::new(img.shape().to_vec(), d_img).expect("shape"));
    }
    if want_coords {
        grads.add(coords, Tensor::new(cv.shape().to_vec(), d_coords).expect("shape"));
    }
}

pub(crate) fn affine_apply_backward(grads: &mut GradBuf<'_>, g: &Tensor, params: usize, coords: usize) {
    let (pv, cv) = (grads.value(params), grads.value(coords));
    let (a, _) = affine_parts(pv.data());
    let p = cv.len() / 2;
    if grads.wants(coords) {
        let mut d = vec![0.0; cv.len()];
        for q in 0..p {
            let (g0, g1) = (g.data()[q], g.data()[p + q]);
            d[q] = a[0][0] * g0 + a[1][0] * g1;
            d[p + q] = a[0][1] * g0 + a[1][1] * g1;
        }
        grads.add(coords, Tensor::new(cv.shape().to_vec(), d).expect("shape"));
    }
    if grads.wants(params) {
        let mut d = [0.0; 6];
        for q in 0..p {
            let (r, c) = (cv.data()[q], cv.data()[p + q]);
            let (g0, g1) = (g.data()[q], g.data()[p + q]);
            d[0] += g0 * r;
            d[1] += g0 * c;
            d[2] += g1 * r;
            d[3] += g1 * c;
            d[4] += g0;
            d[5] += g1;
        }
        grads.add(params, Tensor::new(pv.shape().to_vec(), d.to_vec()).expect("shape"));
    }
}

pub(crate) fn affine_compose_backward(grads: &mut GradBuf<'_>, g: &Tensor, outer: usize, inner: usize) {
    let (pv, qv) = (grads.value(outer), grads.value(inner));
    let (ap, bp) = affine_parts(pv.data());
    let (aq, _) = affine_parts(qv.data());
    let (ga, gb) = affine_parts(g.data());
    if grads.wants(outer) {
        let mut d = [0.0; 6];
        for i in 0..2 {
            for j in 0..2 {
                // A = Aq Ap  =>  dAp = Aq^T gA ; b = Aq bp + bq  =>  dbp = Aq^T gb
                d[i * 2 + j] = aq[0][i] * ga[0][j] + aq[1][i] * ga[1][j];
            }
            d[4 + i] = aq[0][i] * gb[0] + aq[1][i] * gb[1];
        }
        grads.add(outer, Tensor::new(pv.shape().to_vec(), d.to_vec()).expect("shape"));
    }
    if grads.wants(inner) {
        let mut d = [0.0; 6];
        for i in 0..2 {
            for j in 0..2 {
                d[i * 2 + j] = ga[i][0] * ap[j][0] + ga[i][1] * ap[j][1] + gb[i] * bp[j];
            }
            d[4 + i] = gb[i];
        }
        grads.add(inner, Tensor::new(qv.shape().to_vec(), d.to_vec()).expect("shape"));
    }
}

pub(crate) fn rigid_affine_backward(grads: &mut GradBuf<'_>, g: &Tensor, params: usize, center: (f64, f64)) {
    let pv = grads.value(params);
    let (theta, t) = (pv.data()[0], (pv.data()[1], pv.data()[2]));
    let (s, c) = theta.sin_cos();
    let a = [[c, s], [-s, c]];
    let da = [[-s, c], [-c, -s]];
    let shifted = [center.0 + t.0, center.1 + t.1];
    let (ga, gb) = affine_parts(g.data());
    let mut d_theta = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            d_theta += ga[i][j] * da[i][j];
        }
        d_theta -= gb[i] * (da[i][0] * shifted[0] + da[i][1] * shifted[1]);
    }
    let d_t = [-(gb[0] * a[0][0] + gb[1] * a[1][0]), -(gb[0] * a[0][1] + gb[1] * a[1][1])];
    grads.add(params, Tensor::new(vec![3], vec![d_theta, d_t[0], d_t[1]]).expect("shape"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[2, h, w], |i| {
            let q = i % (h * w);
            if i < h * w {
                (q / w) as f64
            } else {
                (q % w) as f64
            }
        })
    }

    #[test]
    fn integer_grid_copies_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let img = Tensor::from_fn(&[3, 5, 4], |_| rng.gen_range(0.0..1.0));
        let out = tape.constant(img.clone()).bilinear_sample(tape.constant(grid(5, 4)), Fill::Zero).unwrap();
        assert_eq!(*out.value(), img);
    }

    #[test]
    fn center_of_two_by_two_is_mean() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let at = tape.constant(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap());
        assert_eq!(img.bilinear_sample(at, Fill::Zero).unwrap().item(), 3.0);
    }

    #[test]
    fn outside_reads_zero_or_extends_displacement() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::full(&[2, 2, 2], 5.0));
        let at = tape.constant(Tensor::new(vec![2, 1, 1], vec![-3.0, 10.0]).unwrap());
        assert_eq!(img.bilinear_sample(at, Fill::Zero).unwrap().value().data(), &[0.0, 0.0]);
        assert_eq!(img.bilinear_sample(at, Fill::Extend).unwrap().value().data(), &[2.0, 14.0]);
        let id = tape.constant(grid(2, 2));
        let off = tape.constant(Tensor::new(vec![2, 1, 1], vec![-2.5, 3.25]).unwrap());
        assert_eq!(id.bilinear_sample(off, Fill::Extend).unwrap().value().data(), &[-2.5, 3.25]);
    }

    #[test]
    fn gradient_wrt_coordinates_and_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn(&[2, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let coords = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(-0.7..5.7)).map(|v| {
            // keep away from integer kinks
            let f = v - v.floor();
            if !(0.05..=0.95).contains(&f) {
                v + 0.3
            } else {
                v
            }
        });
        let probe = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        for fill in [Fill::Zero, Fill::Extend] {
            let r = grad_check(
                |tape, c| {
                    let out = tape.constant(img.clone()).bilinear_sample(c, fill)?;
                    Ok(out.mul(tape.constant(probe.clone()))?.sum())
                },
                &coords,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{fill:?}: {r:?}");
        }
        for fill in [Fill::Zero, Fill::Extend] {
            let r = grad_check(
                |tape, i| {
                    let out = i.bilinear_sample(tape.constant(coords.clone()), fill)?;
                    Ok(out.mul(tape.constant(probe.clone()))?.sum())
                },
                &img,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{fill:?}: {r:?}");
        }
    }

    #[test]
    fn rigid_translation_convention() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap());
        let a = p.rigid_affine((2.0, 2.0)).unwrap().value();
        assert_eq!(a.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        let tape = Tape::new();
        let center = (3.5, 3.5);
        let q = tape.constant(Tensor::new(vec![3], vec![std::f64::consts::FRAC_PI_2, 0.0, 0.0]).unwrap());
        let h = tape.constant(Tensor::new(vec![3], vec![std::f64::consts::PI, 0.0, 0.0]).unwrap());
        let qa = q.rigid_affine(center).unwrap();
        let twice = qa.affine_compose(qa).unwrap().value();
        let half = h.rigid_affine(center).unwrap().value();
        for (a, b) in twice.data().iter().zip(half.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pv = Tensor::from_fn(&[6], |_| rng.gen_range(-1.0..1.0));
        let qv = Tensor::from_fn(&[6], |_| rng.gen_range(-1.0..1.0));
        let cv = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let probe = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let f = |which: usize| {
            let (pv, qv, cv, probe) = (pv.clone(), qv.clone(), cv.clone(), probe.clone());
            crate::tensor::gradcheck::scalar_fn(move |tape, v| {
                let p = if which == 0 { v } else { tape.constant(pv.clone()) };
                let q = if which == 1 { v } else { tape.constant(qv.clone()) };
                let c = if which == 2 { v } else { tape.constant(cv.clone()) };
                let out = p.affine_compose(q)?.affine_apply(c)?;
                Ok(out.mul(tape.constant(probe.clone()))?.sum())
            })
        };
        for (which, t) in [(0, &pv), (1, &qv), (2, &cv)] {
            let r = grad_check(f(which), t, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-7, "arg {which}: {r:?}");
        }
        let rigid = Tensor::new(vec![3], vec![0.3, 1.5, -0.7]).unwrap();
        let r = grad_check(
            |tape, v| {
                let out = v.rigid_affine((4.0, 2.5))?.affine_apply(tape.constant(cv.clone()))?;
                Ok(out.mul(tape.constant(probe.clone()))?.sum())
            },
            &rigid,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }
}
