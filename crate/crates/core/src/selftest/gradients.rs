//! Central-difference checks of every differentiable op and loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::sample_seed;
use crate::deform::{
    compose, jacobian_field, rigid_to_deformation, second_derivative_field, svf_exp, warp, Affine, Deformation, Image,
    Mask, Svf,
};
use crate::error::Result;
use crate::losses::{
    adversarial_inputs, adversarial_losses, commutation_loss, elastic_cross_sim, masked_l1, nonrigidity, reg_cross,
    reg_intra, rigid_cross_sim, similarity_default, similarity_equivariance, total_loss, AdvMode, LossTerms,
    LossWeights, Objective, RigidityWeights,
};
use crate::networks::{rigid_head, Encoder, EncoderSpec, Unet, UnetSpec};
use crate::tensor::{grad_check, Fill, SpectralNorm, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Largest accepted relative error of any case.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Worst relative error of one case over every seed it ran with.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub seeds: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADIENT_TOLERANCE
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

fn check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    Ok(grad_check(f, x, STEP)?.max_rel_err)
}

/// Deterministic weights of magnitude in `[0.5, 1.5)` and mixed sign, so no
/// output coordinate is projected away.
fn weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let m = 0.5 + (i as f64 * 0.618_033_988_749_895 + 0.3).fract();
        if i % 3 == 0 {
            -m
        } else {
            m
        }
    })
}

/// Scalar `sum(out * weights)`.
fn project(out: Var<'_>) -> Result<Var<'_>> {
    let w = weights(&out.shape());
    Ok(out.mul(out.tape().constant(w))?.sum())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with `|v|` in `[0.1, 1.5)` and a random sign, clear of kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.1..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

fn chw(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6)]
}

/// Grid plus a smooth random displacement of up to `amp` pixels; no coordinate
/// lands within 0.05 of an integer, where bilinear interpolation has kinks.
fn coords(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> Tensor {
    let (a, b) = (rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0));
    let (pa, pb) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let p = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let (ch, q) = (i / p, i % p);
        let (r, c) = ((q / w) as f64, (q % w) as f64);
        let base = if ch == 0 { r } else { c };
        let v = base + amp * (a * r + pa).sin() * (b * c + pb).cos() + if ch == 0 { 0.31 } else { -0.27 };
        let f = v - v.floor();
        if f < 0.05 {
            v + 0.1
        } else if f > 0.95 {
            v - 0.1
        } else {
            v
        }
    })
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> Tensor {
    let g = crate::deform::grid(h, w);
    let c = coords(rng, h, w, amp);
    Tensor::from_fn(&[2, h, w], |i| c.data()[i] - g.data()[i])
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut m = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.8));
    if m.count() == 0 {
        m = Mask::full(h, w);
    }
    m
}

fn unary(x: Tensor, op: for<'t> fn(Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    check(move |_, v| project(op(v)?), &x)
}

/// Random small shape filled by [`off_zero`].
fn signed(rng: &mut ChaCha8Rng) -> Tensor {
    let s = chw(rng);
    off_zero(rng, &s)
}

fn elementwise_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("abs", |r| unary(signed(r), |v| Ok(v.abs()))),
        ("log", |r| {
            let s = chw(r);
            unary(uniform(r, &s, 0.3, 2.0), |v| Ok(v.log()))
        }),
        ("exp", |r| {
            let s = chw(r);
            unary(uniform(r, &s, -1.5, 1.5), |v| Ok(v.exp()))
        }),
        ("tanh", |r| {
            let s = chw(r);
            unary(uniform(r, &s, -2.0, 2.0), |v| Ok(v.tanh()))
        }),
        ("sigmoid", |r| {
            let s = chw(r);
            unary(uniform(r, &s, -3.0, 3.0), |v| Ok(v.sigmoid()))
        }),
        ("square", |r| {
            let s = chw(r);
            unary(uniform(r, &s, -1.5, 1.5), |v| Ok(v.square()))
        }),
        ("sqrt", |r| {
            let s = chw(r);
            unary(uniform(r, &s, 0.3, 2.0), |v| Ok(v.sqrt()))
        }),
        ("leaky_relu", |r| unary(signed(r), |v| Ok(v.leaky_relu(0.2)))),
        ("relu", |r| unary(signed(r), |v| Ok(v.relu()))),
        ("clamp", |r| {
            // Half the entries saturate; none sits near a bound.
            let s = chw(r);
            let x = Tensor::from_fn(&s, |_| {
                let m = if r.gen_bool(0.5) { r.gen_range(0.0..0.4) } else { r.gen_range(0.6..1.5) };
                m * if r.gen_bool(0.5) { 1.0 } else { -1.0 }
            });
            unary(x, |v| Ok(v.clamp(-0.5, 0.5)))
        }),
        ("neg", |r| unary(signed(r), |v| Ok(v.neg()))),
        ("scale", |r| unary(signed(r), |v| Ok(v.scale(-1.7)))),
        ("offset", |r| unary(signed(r), |v| Ok(v.offset(0.3).square()))),
        ("sum", |r| unary(signed(r), |v| Ok(v.square().sum()))),
        ("mean", |r| unary(signed(r), |v| Ok(v.square().mean()))),
        ("add", |r| binary(r, |a, b| a.add(b))),
        ("sub", |r| binary(r, |a, b| a.sub(b))),
        ("mul", |r| binary(r, |a, b| a.mul(b))),
        ("concat", |r| {
            let s = chw(r);
            let (pre, post) = (off_zero(r, &[1, s[1], s[2]]), off_zero(r, &[2, s[1], s[2]]));
            check(
                move |t, v| project(Var::concat(&[t.constant(pre.clone()), v, t.constant(post.clone())])?.square()),
                &off_zero(r, &s),
            )
        }),
        ("narrow", |r| {
            let s = [r.gen_range(2..=4), r.gen_range(3..=5), r.gen_range(3..=5)];
            let start = r.gen_range(0..s[0] - 1);
            check(move |_, v| project(v.square().narrow(start, s[0] - start - 1)?), &off_zero(r, &s))
        }),
        ("reshape", |r| {
            let s = chw(r);
            check(move |_, v| project(v.reshape(&[s[0] * s[1], s[2]])?.square()), &off_zero(r, &s))
        }),
        ("crop", |r| {
            let s = chw(r);
            let (top, left) = (r.gen_range(0..2), r.gen_range(0..2));
            check(move |_, v| project(v.square().crop(top, left, s[1] - 2, s[2] - 2)?), &off_zero(r, &s))
        }),
    ]
}

/// Checks `op(a, b)` with respect to each operand in turn.
fn binary(rng: &mut ChaCha8Rng, op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    let s = chw(rng);
    let (a, b) = (off_zero(rng, &s), off_zero(rng, &s));
    let (a2, b2) = (a.clone(), b.clone());
    let left = check(move |t, v| project(op(v, t.constant(b2.clone()))?), &a)?;
    let right = check(move |t, v| project(op(t.constant(a2.clone()), v)?), &b)?;
    Ok(left.max(right))
}

/// Checks `op` with respect to each of its three tensor arguments in turn.
fn ternary(args: [Tensor; 3], op: for<'t> fn(Var<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let fixed = args.clone();
        let err = check(
            move |t, v| {
                let pick = |i: usize| if i == which { v } else { t.constant(fixed[i].clone()) };
                project(op(pick(0), pick(1), pick(2))?)
            },
            &args[which],
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn nn_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("dense", |r| {
            let (i, o) = (r.gen_range(2..=6), r.gen_range(1..=4));
            ternary([off_zero(r, &[i]), off_zero(r, &[o, i]), off_zero(r, &[o])], |x, w, b| x.dense(w, b))
        }),
        ("global_avg_pool", |r| unary(signed(r), |v| v.square().global_avg_pool())),
        ("group_norm", |r| {
            let groups = r.gen_range(1..=2);
            let c = groups * r.gen_range(1..=2);
            let s = [c, r.gen_range(3..=5), r.gen_range(3..=5)];
            let args = [uniform(r, &s, -1.0, 1.0), off_zero(r, &[c]), off_zero(r, &[c])];
            let mut worst: f64 = 0.0;
            for which in 0..3 {
                let fixed = args.clone();
                let err = check(
                    move |t, v| {
                        let pick = |i: usize| if i == which { v } else { t.constant(fixed[i].clone()) };
                        project(pick(0).group_norm(groups, pick(1), pick(2), 1e-5)?)
                    },
                    &args[which],
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
        ("conv2d", |r| {
            let (ci, co, k) = (r.gen_range(1..=3), r.gen_range(1..=3), [1, 3][r.gen_range(0..2)]);
            let (stride, pad) = (r.gen_range(1..=2), if k == 3 { r.gen_range(0..=1) } else { 0 });
            // Extents the stride divides exactly.
            let mut extent = || stride * r.gen_range(2..=4) + k - 2 * pad;
            let s = [ci, extent(), extent()];
            let args = [off_zero(r, &s), off_zero(r, &[co, ci, k, k]), off_zero(r, &[co])];
            let mut worst: f64 = 0.0;
            for which in 0..3 {
                let fixed = args.clone();
                let err = check(
                    move |t, v| {
                        let pick = |i: usize| if i == which { v } else { t.constant(fixed[i].clone()) };
                        project(pick(0).conv2d(pick(1), pick(2), stride, pad)?)
                    },
                    &args[which],
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
        ("conv_transpose2d", |r| {
            let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let s = [ci, r.gen_range(2..=4), r.gen_range(2..=4)];
            let args = [off_zero(r, &s), off_zero(r, &[ci, co, 2, 2]), off_zero(r, &[co])];
            ternary(args, |x, w, b| x.conv_transpose2d(w, b, 2))
        }),
        ("spectral_normalize", |r| {
            let (o, i) = (r.gen_range(1..=4), r.gen_range(2..=6));
            let mut sn = SpectralNorm::new(o, r);
            let w0 = off_zero(r, &[o, i]);
            let tape = Tape::new();
            sn.normalize(tape.constant(w0.clone()), true)?;
            check(move |_, v| project(sn.clone().normalize(v, false)?), &w0)
        }),
    ]
}

fn sample_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("bilinear_sample", |r| {
            let s = chw(r);
            let (img, c) = (off_zero(r, &s), coords(r, s[1], s[2], 1.5));
            let (img2, c2) = (img.clone(), c.clone());
            let a = check(move |t, v| project(v.bilinear_sample(t.constant(c2.clone()), Fill::Zero)?), &img)?;
            let b = check(move |t, v| project(t.constant(img2.clone()).bilinear_sample(v, Fill::Zero)?), &c)?;
            Ok(a.max(b))
        }),
        ("bilinear_sample_extend", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            let (field, c) = (coords(r, h, w, 0.8), coords(r, h, w, 2.0));
            let (f2, c2) = (field.clone(), c.clone());
            let a = check(move |t, v| project(v.bilinear_sample(t.constant(c2.clone()), Fill::Extend)?), &field)?;
            let b = check(move |t, v| project(t.constant(f2.clone()).bilinear_sample(v, Fill::Extend)?), &c)?;
            Ok(a.max(b))
        }),
        ("affine_apply", |r| {
            let (h, w) = (r.gen_range(2..=5), r.gen_range(2..=5));
            let (p, c) = (off_zero(r, &[6]), uniform(r, &[2, h, w], -3.0, 3.0));
            let (p2, c2) = (p.clone(), c.clone());
            let a = check(move |t, v| project(v.affine_apply(t.constant(c2.clone()))?), &p)?;
            let b = check(move |t, v| project(t.constant(p2.clone()).affine_apply(v)?), &c)?;
            Ok(a.max(b))
        }),
        ("affine_compose", |r| binary_shaped(r, &[6], |a, b| a.affine_compose(b))),
        ("rigid_affine", |r| {
            let center = (r.gen_range(0.0..5.0), r.gen_range(0.0..5.0));
            check(move |_, v| project(v.rigid_affine(center)?), &uniform(r, &[3], -2.0, 2.0))
        }),
    ]
}

fn binary_shaped(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let (a, b) = (off_zero(rng, shape), off_zero(rng, shape));
    let (a2, b2) = (a.clone(), b.clone());
    let left = check(move |t, v| project(op(v, t.constant(b2.clone()))?), &a)?;
    let right = check(move |t, v| project(op(t.constant(a2.clone()), v)?), &b)?;
    Ok(left.max(right))
}

fn dense<'t>(v: Var<'t>) -> Result<Deformation<'t>> {
    let (h, w) = (v.shape()[1], v.shape()[2]);
    Deformation::dense(v, Mask::full(h, w))
}

fn deform_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("compose_dense", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            let (outer, inner) = (coords(r, h, w, 1.0), coords(r, h, w, 1.0));
            let (o2, i2) = (outer.clone(), inner.clone());
            let a =
                check(move |t, v| project(compose(&dense(v)?, &dense(t.constant(i2.clone()))?)?.coords()?), &outer)?;
            let b =
                check(move |t, v| project(compose(&dense(t.constant(o2.clone()))?, &dense(v)?)?.coords()?), &inner)?;
            Ok(a.max(b))
        }),
        ("compose_affine", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            let (outer, params) = (coords(r, h, w, 1.0), off_zero(r, &[6]));
            let (o2, p2) = (outer.clone(), params.clone());
            let a = check(
                move |t, v| {
                    project(compose(&dense(v)?, &Deformation::affine(t.constant(p2.clone()), h, w)?)?.coords()?)
                },
                &outer,
            )?;
            let b = check(
                move |t, v| {
                    project(compose(&dense(t.constant(o2.clone()))?, &Deformation::affine(v, h, w)?)?.coords()?)
                },
                &params,
            )?;
            Ok(a.max(b))
        }),
        ("warp", |r| {
            let s = chw(r);
            let (img, c) = (off_zero(r, &s), coords(r, s[1], s[2], 1.0));
            let (img2, c2) = (img.clone(), c.clone());
            let a = check(move |t, v| project(warp(&Image::full(v)?, &dense(t.constant(c2.clone()))?)?.data), &img)?;
            let b = check(move |t, v| project(warp(&Image::full(t.constant(img2.clone()))?, &dense(v)?)?.data), &c)?;
            Ok(a.max(b))
        }),
        ("displacement", |r| {
            let (h, w) = (r.gen_range(2..=5), r.gen_range(2..=5));
            check(move |_, v| project(dense(v)?.displacement()?.square()), &coords(r, h, w, 1.0))
        }),
        ("svf_exp", |r| {
            let (h, w) = (r.gen_range(4..=7), r.gen_range(4..=7));
            let amp = r.gen_range(0.3..2.0);
            check(move |_, v| project(svf_exp(&Svf::new(v)?)?.coords()?), &smooth_field(r, h, w, amp))
        }),
        ("jacobian_field", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            let spacing = r.gen_range(0.5..2.0);
            check(move |_, v| project(jacobian_field(&dense(v)?, spacing)?), &coords(r, h, w, 1.0))
        }),
        ("second_derivative_field", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            let spacing = r.gen_range(0.5..2.0);
            check(move |_, v| project(second_derivative_field(&dense(v)?, spacing)?), &coords(r, h, w, 1.0))
        }),
        ("rigid_to_deformation", |r| {
            let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
            check(move |_, v| project(rigid_to_deformation(v, h, w)?.coords()?), &uniform(r, &[3], -1.0, 1.0))
        }),
    ]
}

fn image<'t>(tape: &'t Tape, data: &Tensor, mask: &Mask) -> Result<Image<'t>> {
    Image::new(tape.constant(data.clone()), mask.clone())
}

fn loss_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("masked_l1", |r| {
            let s = chw(r);
            let (a, b) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0));
            let (ma, mb) = (random_mask(r, s[1], s[2]), random_mask(r, s[1], s[2]));
            check(move |t, v| Ok(masked_l1(&Image::new(v, ma.clone())?, &image(t, &b, &mb)?)?.value), &a)
        }),
        ("similarity_default", |r| {
            let s = chw(r);
            let (f, y, c) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0), coords(r, s[1], s[2], 1.0));
            let my = random_mask(r, s[1], s[2]);
            let (y2, my2, f2) = (y.clone(), my.clone(), f.clone());
            let a = check(
                move |t, v| {
                    Ok(similarity_default(&Image::full(v)?, &image(t, &y, &my)?, &dense(t.constant(c.clone()))?)?.value)
                },
                &f,
            )?;
            let c2 = coords(r, s[1], s[2], 1.0);
            let b = check(
                move |t, v| {
                    Ok(similarity_default(&image(t, &f2, &Mask::full(s[1], s[2]))?, &image(t, &y2, &my2)?, &dense(v)?)?
                        .value)
                },
                &c2,
            )?;
            Ok(a.max(b))
        }),
        ("similarity_equivariance", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(5..=7), r.gen_range(5..=7)];
            let (f, y, c) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0), coords(r, s[1], s[2], 0.8));
            let angle = r.gen_range(-0.25..0.25);
            let t_inv = Affine::rotation(angle, (s[1], s[2])).inverse().expect("rotation");
            let (f2, y2) = (f.clone(), y.clone());
            let a = check(
                move |t, v| {
                    let inv = Deformation::from_affine(t, &t_inv, s[1], s[2]);
                    Ok(similarity_equivariance(
                        &Image::full(v)?,
                        &image(t, &y, &Mask::full(s[1], s[2]))?,
                        &dense(t.constant(c.clone()))?,
                        &inv,
                    )?
                    .value)
                },
                &f,
            )?;
            let c2 = coords(r, s[1], s[2], 0.8);
            let b = check(
                move |t, v| {
                    let inv = Deformation::from_affine(t, &t_inv, s[1], s[2]);
                    let f_tx = image(t, &f2, &Mask::full(s[1], s[2]))?;
                    Ok(similarity_equivariance(&f_tx, &image(t, &y2, &Mask::full(s[1], s[2]))?, &dense(v)?, &inv)?
                        .value)
                },
                &c2,
            )?;
            Ok(a.max(b))
        }),
        ("commutation", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(5..=7), r.gen_range(5..=7)];
            let (f, g) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0));
            let transform = Affine::rotation(r.gen_range(-0.25..0.25), (s[1], s[2]));
            let (f2, g2) = (f.clone(), g.clone());
            let a = check(
                move |t, v| {
                    let td = Deformation::from_affine(t, &transform, s[1], s[2]);
                    Ok(commutation_loss(&Image::full(v)?, &image(t, &g2, &Mask::full(s[1], s[2]))?, &td)?.value)
                },
                &f,
            )?;
            let b = check(
                move |t, v| {
                    let td = Deformation::from_affine(t, &transform, s[1], s[2]);
                    Ok(commutation_loss(&image(t, &f2, &Mask::full(s[1], s[2]))?, &Image::full(v)?, &td)?.value)
                },
                &g,
            )?;
            Ok(a.max(b))
        }),
        ("rigid_cross_sim", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(6..=8), r.gen_range(6..=8)];
            let (f, y) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0));
            let params =
                Tensor::new(vec![3], vec![r.gen_range(-0.3..0.3), r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)])?;
            check(
                move |t, v| {
                    let full = Mask::full(s[1], s[2]);
                    Ok(rigid_cross_sim(
                        &image(t, &f, &full)?,
                        &image(t, &y, &full)?,
                        &rigid_to_deformation(v, s[1], s[2])?,
                    )?
                    .value)
                },
                &params,
            )
        }),
        ("elastic_cross_sim", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(5..=7), r.gen_range(5..=7)];
            let (f, y) = (uniform(r, &s, 0.0, 1.0), uniform(r, &s, 0.0, 1.0));
            let rigid = Affine::rotation(r.gen_range(-0.2..0.2), (s[1], s[2]));
            check(
                move |t, v| {
                    let full = Mask::full(s[1], s[2]);
                    let rd = Deformation::from_affine(t, &rigid, s[1], s[2]);
                    let d = crate::losses::cross_deformation(&rd, &Svf::new(v)?)?;
                    Ok(elastic_cross_sim(&image(t, &f, &full)?, &image(t, &y, &full)?, &d)?.value)
                },
                &smooth_field(r, s[1], s[2], 0.8),
            )
        }),
        ("nonrigidity", |r| {
            let (h, w) = (r.gen_range(4..=7), r.gen_range(4..=7));
            let weights = RigidityWeights { spacing: r.gen_range(0.5..2.0), ..Default::default() };
            let c = coords(r, h, w, 0.7);
            let mut worst: f64 = 0.0;
            for part in 0..4 {
                let err = check(
                    move |_, v| {
                        let n = nonrigidity(&dense(v)?, &weights)?;
                        Ok([n.affinity, n.orthogonality, n.properness, n.total][part])
                    },
                    &c,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
        ("reg_cross", |r| {
            let (h, w) = (r.gen_range(4..=6), r.gen_range(4..=6));
            check(|_, v| reg_cross(&Svf::new(v)?, &RigidityWeights::default()), &smooth_field(r, h, w, 0.8))
        }),
        ("reg_intra", |r| {
            let (h, w) = (r.gen_range(4..=6), r.gen_range(4..=6));
            let cross = smooth_field(r, h, w, 0.6);
            check(
                move |t, v| {
                    reg_intra(&Svf::new(v)?, &Svf::new(t.constant(cross.clone()))?, &RigidityWeights::default())
                },
                &smooth_field(r, h, w, 0.6),
            )
        }),
        ("adversarial", adversarial_case),
        ("rigid_head", |r| {
            let (angle, shift) = (r.gen_range(0.1..1.0), r.gen_range(1.0..8.0));
            check(move |_, v| project(rigid_head(v, angle, shift)?), &uniform(r, &[3], -2.0, 2.0))
        }),
        ("total_loss", |r| {
            let objective: Objective = "EqSim+Com+EqAdv".parse()?;
            let weights = LossWeights {
                sim: r.gen_range(0.5..2.0),
                reg: r.gen_range(0.05..1.0),
                com: r.gen_range(0.5..2.0),
                adv: r.gen_range(0.01..0.5),
                ..LossWeights::synthetic()
            };
            check(
                move |_, v| {
                    let part = |i: usize| v.narrow(i, 1).map(|p| p.square().sum());
                    let terms = LossTerms {
                        rig_sim: Some(part(0)?),
                        cross_sim: Some(part(1)?),
                        cross_reg: Some(part(2)?),
                        intra_sim: Some(part(3)?),
                        intra_reg: Some(part(4)?),
                        com: Some(part(5)?),
                        adv: Some(part(6)?),
                        sim: None,
                    };
                    Ok(total_loss(&terms, &weights, &objective)?.0)
                },
                &off_zero(r, &[7, 2, 2]),
            )
        }),
    ]
}

/// One convolution, mean pooled to a logit.
fn small_disc<'t>(input: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    input.conv2d(weight, bias, 1, 1)?.tanh().global_avg_pool()?.sum().reshape(&[1])
}

/// Both discriminator-side and generator-side adversarial losses of every mode,
/// against the discriminator weights and the synthesized image.
fn adversarial_case(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (r.gen_range(5..=7), r.gen_range(5..=7));
    let (x, y, f) =
        (uniform(r, &[1, h, w], 0.0, 1.0), uniform(r, &[1, h, w], 0.0, 1.0), uniform(r, &[1, h, w], 0.0, 1.0));
    let (dc, di) = (coords(r, h, w, 0.6), coords(r, h, w, 0.6));
    let transform = Affine::rotation(r.gen_range(-0.25..0.25), (h, w));
    let disc_w = uniform(r, &[1, 2, 3, 3], -0.6, 0.6);
    let mut worst: f64 = 0.0;
    for mode in [AdvMode::EqAdv, AdvMode::DefCondAdv, AdvMode::DefUncondAdv] {
        for (discriminator_side, non_saturating) in [(true, false), (false, false), (false, true)] {
            let c_in = if mode.conditional() { 2 } else { 1 };
            let (x, y, f, dc, di) = (x.clone(), y.clone(), f.clone(), dc.clone(), di.clone());
            let dw = Tensor::from_fn(&[1, c_in, 3, 3], |i| disc_w.data()[i]);
            let target = if discriminator_side { dw.clone() } else { f.clone() };
            let err = check(
                move |t, v| {
                    let full = Mask::full(h, w);
                    let (weight, fake) =
                        if discriminator_side { (v, t.constant(f.clone())) } else { (t.constant(dw.clone()), v) };
                    let f_img = Image::full(fake)?;
                    let td = Deformation::from_affine(t, &transform, h, w);
                    let ti = Deformation::from_affine(t, &transform.inverse().expect("rotation"), h, w);
                    let inputs = adversarial_inputs(
                        mode,
                        &image(t, &x, &full)?,
                        &image(t, &y, &full)?,
                        &f_img,
                        &f_img,
                        &dense(t.constant(dc.clone()))?,
                        &dense(t.constant(di.clone()))?,
                        &td,
                        &ti,
                    )?;
                    let bias = t.constant(Tensor::scalar(0.1).reshape(&[1])?);
                    let losses = adversarial_losses(|input| small_disc(input, weight, bias), &inputs, non_saturating)?;
                    Ok(if discriminator_side { losses.d_loss } else { losses.g_loss })
                },
                &target,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn network_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("unet", |r| {
            let (ci, co) = (r.gen_range(1..=2), r.gen_range(1..=2));
            let spec = UnetSpec { zero_head: false, ..UnetSpec::synthesis(ci, co, &[2, 3]) };
            let net = Unet::new(spec, r)?;
            check(move |t, v| project(net.forward(&net.bind(t, false), v)?), &uniform(r, &[ci, 4, 4], -1.0, 1.0))
        }),
        ("encoder_rigid", |r| {
            let spec = EncoderSpec { zero_head: false, ..EncoderSpec::rigid(2, &[2, 3]) };
            let net = Encoder::new(spec, r)?;
            check(move |t, v| project(net.forward(&net.bind(t, false), v)?), &uniform(r, &[2, 6, 6], -1.0, 1.0))
        }),
        ("encoder_discriminator", |r| {
            let net = Encoder::new(EncoderSpec::discriminator(2, &[2, 3]), r)?;
            check(move |t, v| project(net.forward(&net.bind(t, false), v)?), &uniform(r, &[2, 6, 6], -1.0, 1.0))
        }),
    ]
}

/// Every case, in report order.
pub fn cases() -> Vec<(&'static str, Check)> {
    let mut all = elementwise_cases();
    all.extend(nn_cases());
    all.extend(sample_cases());
    all.extend(deform_cases());
    all.extend(loss_cases());
    all.extend(network_cases());
    all
}

/// Runs every case once per seed in `0..seeds` and keeps the worst error of each.
pub fn gradient_suite(seeds: u64) -> Result<Vec<GradCase>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, run))| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 7, k));
                worst = worst.max(run(&mut rng)?);
            }
            Ok(GradCase { name: name.to_string(), max_rel_err: worst, seeds: seeds as usize })
        })
        .collect()
}
