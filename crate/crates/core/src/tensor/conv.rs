//! 2D convolution and its transpose via im2col + GEMM.

use super::gemm::{gemm, Mat};
use super::tape::{GradBuf, Op};
use super::{Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return shape_err("kernel and stride must be positive");
    }
    let padded = n + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return shape_err(format!(
            "extent {n} with kernel {k}, stride {stride}, padding {pad} gives a non-integral output"
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let (k, p) = (g.kernel, g.out_h * g.out_w);
    let mut cols = vec![0.0; g.patch_rows() * p];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[oy * g.out_w + ox] = x[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let (k, p) = (g.kernel, g.out_h * g.out_w);
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            x[dst_row + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn bias_shape_ok(b: &Tensor, n: usize) -> bool {
    b.len() == n && b.shape().len() == 1
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(Geometry, usize)> {
    let (c, h, wd) = x.chw()?;
    let [co, ci, kh, kw] = w.shape()[..] else {
        return shape_err(format!("conv weight must be [Cout,Cin,k,k], got {:?}", w.shape()));
    };
    if ci != c || kh != kw {
        return shape_err(format!("conv weight {:?} for input {:?}", w.shape(), x.shape()));
    }
    let out_h = out_extent(h, kh, stride, pad)?;
    let out_w = out_extent(wd, kw, stride, pad)?;
    let g = Geometry { channels: c, height: h, width: wd, kernel: kh, stride, pad, out_h, out_w };
    Ok((g, co))
}

/// Geometry of the conv2d whose adjoint is the transposed conv: it maps the
/// transposed conv's output image back to its input grid.
fn transpose_geometry(x: &Tensor, w: &Tensor, stride: usize) -> Result<(Geometry, usize)> {
    let (c, h, wd) = x.chw()?;
    let [ci, co, kh, kw] = w.shape()[..] else {
        return shape_err(format!("transposed conv weight must be [Cin,Cout,k,k], got {:?}", w.shape()));
    };
    if ci != c || kh != kw {
        return shape_err(format!("transposed conv weight {:?} for input {:?}", w.shape(), x.shape()));
    }
    if stride == 0 || kh == 0 {
        return shape_err(format!("unsupported transposed conv: kernel {kh}, stride {stride}"));
    }
    let g = Geometry {
        channels: co,
        height: (h - 1) * stride + kh,
        width: (wd - 1) * stride + kw,
        kernel: kh,
        stride,
        pad: 0,
        out_h: h,
        out_w: wd,
    };
    Ok((g, ci))
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[Cin,H,W]` with `[Cout,Cin,k,k]` weights, zero padding.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (g, co) = conv_geometry(&xv, &wv, stride, pad)?;
        if !bias_shape_ok(&bv, co) {
            return shape_err(format!("conv bias {:?} for {co} output channels", bv.shape()));
        }
        let p = g.out_h * g.out_w;
        let mut out = vec![0.0; co * p];
        for (o, &bias) in out.chunks_mut(p).zip(bv.data()) {
            o.fill(bias);
        }
        if g.is_pointwise() {
            gemm(Mat::new(wv.data(), co, g.patch_rows()), Mat::new(xv.data(), g.patch_rows(), p), 1.0, &mut out);
        } else {
            let cols = im2col(xv.data(), &g);
            gemm(Mat::new(wv.data(), co, g.patch_rows()), Mat::new(&cols, g.patch_rows(), p), 1.0, &mut out);
        }
        let out = Tensor::new(vec![co, g.out_h, g.out_w], out)?;
        let op = Op::Conv2d { x: self.id, w: w.id, b: b.id, stride, pad };
        Ok(self.tape.push(out, op, &[self.id, w.id, b.id]))
    }

    /// Transposed convolution with `[Cin,Cout,k,k]` weights and no padding;
    /// the exact adjoint of `conv2d` with the same weights.
    pub fn conv_transpose2d(self, w: Var<'t>, b: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (g, ci) = transpose_geometry(&xv, &wv, stride)?;
        if !bias_shape_ok(&bv, g.channels) {
            return shape_err(format!("transposed conv bias {:?} for {} channels", bv.shape(), g.channels));
        }
        let p = g.out_h * g.out_w;
        let mut cols = vec![0.0; g.patch_rows() * p];
        gemm(Mat::t(wv.data(), ci, g.patch_rows()), Mat::new(xv.data(), ci, p), 0.0, &mut cols);
        let mut out = col2im(&cols, &g);
        let hw = g.height * g.width;
        for (o, &bias) in out.chunks_mut(hw).zip(bv.data()) {
            o.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::new(vec![g.channels, g.height, g.width], out)?;
        let op = Op::ConvTranspose2d { x: self.id, w: w.id, b: b.id, stride };
        Ok(self.tape.push(out, op, &[self.id, w.id, b.id]))
    }
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let n = g.len() / channels;
    Tensor::from_fn(&[channels], |c| g.data()[c * n..(c + 1) * n].iter().sum())
}

pub(crate) fn conv2d_backward(
    grads: &mut GradBuf<'_>,
    g: &Tensor,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
) {
    let (xv, wv) = (grads.value(x), grads.value(w));
    let (geo, co) = conv_geometry(xv, wv, stride, pad).expect("geometry validated in forward");
    let (rows, p) = (geo.patch_rows(), geo.out_h * geo.out_w);
    if grads.wants(b) {
        grads.add(b, channel_sums(g, co));
    }
    let want_x = grads.wants(x);
    let want_w = grads.wants(w);
    if !want_x && !want_w {
        return;
    }
    let owned_cols;
    let cols: &[f64] = if geo.is_pointwise() {
        xv.data()
    } else if want_w {
        owned_cols = im2col(xv.data(), &geo);
        &owned_cols
    } else {
        &[]
    };
    if want_w {
        let mut dw = vec![0.0; co * rows];
        gemm(Mat::new(g.data(), co, p), Mat::t(cols, rows, p), 0.0, &mut dw);
        grads.add(w, Tensor::new(wv.shape().to_vec(), dw).expect("weight shape"));
    }
    if want_x {
        let mut dcols = vec![0.0; rows * p];
        gemm(Mat::t(wv.data(), co, rows), Mat::new(g.data(), co, p), 0.0, &mut dcols);
        let dx = if geo.is_pointwise() { dcols } else { col2im(&dcols, &geo) };
        grads.add(x, Tensor::new(xv.shape().to_vec(), dx).expect("input shape"));
    }
}

pub(crate) fn conv_transpose2d_backward(
    grads: &mut GradBuf<'_>,
    g: &Tensor,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
) {
    let (xv, wv) = (grads.value(x), grads.value(w));
    let (geo, ci) = transpose_geometry(xv, wv, stride).expect("geometry validated in forward");
    let (rows, p) = (geo.patch_rows(), geo.out_h * geo.out_w);
    if grads.wants(b) {
        grads.add(b, channel_sums(g, geo.channels));
    }
    if !grads.wants(x) && !grads.wants(w) {
        return;
    }
    let dcols = im2col(g.data(), &geo);
    if grads.wants(w) {
        let mut dw = vec![0.0; ci * rows];
        gemm(Mat::new(xv.data(), ci, p), Mat::t(&dcols, rows, p), 0.0, &mut dw);
        grads.add(w, Tensor::new(wv.shape().to_vec(), dw).expect("weight shape"));
    }
    if grads.wants(x) {
        let mut dx = vec![0.0; ci * p];
        gemm(Mat::new(wv.data(), ci, rows), Mat::new(&dcols, rows, p), 0.0, &mut dx);
        grads.add(x, Tensor::new(xv.shape().to_vec(), dx).expect("input shape"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_all_ones_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 5], 2.0));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 5, 5]);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.data()[r * 5 + c], 18.0);
            }
        }
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let xv = random(&[1, 4, 6], &mut rng);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(*x.conv2d(w, b, 1, 0).unwrap().value(), xv);
    }

    #[test]
    fn non_integral_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(x.conv2d(w, b, 2, 0).is_err());
        let w3 = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(x.conv2d(w3, b, 1, 1).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 8, 6], &mut rng));
        let w = tape.constant(random(&[4, 3, 2, 2], &mut rng));
        let zero_out = tape.constant(Tensor::zeros(&[4]));
        let zero_in = tape.constant(Tensor::zeros(&[3]));
        let y = tape.constant(random(&[4, 4, 3], &mut rng));
        let lhs = x.conv2d(w, zero_out, 2, 0).unwrap().value().dot(&y.value());
        let back = y.conv_transpose2d(w, zero_in, 2).unwrap().value();
        assert_eq!(back.shape(), &[3, 8, 6]);
        let rhs = x.value().dot(&back);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn single_pixel_transpose_copies_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1], 1.0));
        let w = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv_transpose2d(w, b, 2).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_gradients_all_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv = random(&[2, 5, 5], &mut rng);
        let wv = random(&[3, 2, 3, 3], &mut rng);
        let bv = random(&[3], &mut rng);
        let probe = random(&[3, 5, 5], &mut rng);
        let f = |which: usize| {
            let (xv, wv, bv, probe) = (xv.clone(), wv.clone(), bv.clone(), probe.clone());
            crate::tensor::gradcheck::scalar_fn(move |tape, v| {
                let x = if which == 0 { v } else { tape.constant(xv.clone()) };
                let w = if which == 1 { v } else { tape.constant(wv.clone()) };
                let b = if which == 2 { v } else { tape.constant(bv.clone()) };
                let y = x.conv2d(w, b, 1, 1)?;
                Ok(y.mul(tape.constant(probe.clone()))?.sum())
            })
        };
        for (which, t) in [(0, &xv), (1, &wv), (2, &bv)] {
            let r = grad_check(f(which), t, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-5, "arg {which}: {r:?}");
        }
    }

    #[test]
    fn strided_and_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xv = random(&[2, 4, 4], &mut rng);
        let wv = random(&[2, 3, 2, 2], &mut rng);
        let bv = random(&[3], &mut rng);
        let probe = random(&[3, 8, 8], &mut rng);
        for which in 0..3 {
            let target = [&xv, &wv, &bv][which];
            let r = grad_check(
                |tape, v| {
                    let x = if which == 0 { v } else { tape.constant(xv.clone()) };
                    let w = if which == 1 { v } else { tape.constant(wv.clone()) };
                    let b = if which == 2 { v } else { tape.constant(bv.clone()) };
                    let y = x.conv_transpose2d(w, b, 2)?;
                    Ok(y.mul(tape.constant(probe.clone()))?.sum())
                },
                target,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "transpose arg {which}: {r:?}");
        }
        let wd = random(&[3, 2, 2, 2], &mut rng);
        let r = grad_check(
            |tape, v| {
                let y = v.conv2d(tape.constant(wd.clone()), tape.constant(Tensor::zeros(&[3])), 2, 0)?;
                Ok(y.square().sum())
            },
            &xv,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
