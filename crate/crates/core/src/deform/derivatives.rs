//! Finite-difference derivatives of coordinate maps.
//!
//! Jacobian entries use forward differences and live on the `(H-1) x (W-1)`
//! grid of pixels with a right and a lower neighbour. Second derivatives use
//! central differences for the pure terms and forward differences for the mixed
//! term and live on the `(H-2) x (W-2)` interior, entry `(i, j)` describing
//! pixel `(i+1, j+1)`.

use super::Deformation;
use crate::error::{shape_err, Result};
use crate::tensor::Var;

fn shifted<'t>(c: Var<'t>, dr: usize, dc: usize, h: usize, w: usize) -> Result<Var<'t>> {
    c.crop(dr, dc, h, w)
}

/// `[4, H-1, W-1]`: `d row/d row`, `d row/d col`, `d col/d row`, `d col/d col`.
pub fn jacobian_field<'t>(d: &Deformation<'t>, spacing: f64) -> Result<Var<'t>> {
    let (h, w) = d.extent();
    if h < 2 || w < 2 {
        return shape_err(format!("jacobian needs an extent of at least 2x2, got {h}x{w}"));
    }
    let c = d.coords()?;
    let (ho, wo) = (h - 1, w - 1);
    let base = shifted(c, 0, 0, ho, wo)?;
    let d_row = shifted(c, 1, 0, ho, wo)?.sub(base)?.scale(1.0 / spacing);
    let d_col = shifted(c, 0, 1, ho, wo)?.sub(base)?.scale(1.0 / spacing);
    Var::concat(&[d_row.narrow(0, 1)?, d_col.narrow(0, 1)?, d_row.narrow(1, 1)?, d_col.narrow(1, 1)?])
}

/// `[6, H-2, W-2]`: for the row then the column component, `rr`, `rc`, `cc`.
pub fn second_derivative_field<'t>(d: &Deformation<'t>, spacing: f64) -> Result<Var<'t>> {
    let (h, w) = d.extent();
    if h < 3 || w < 3 {
        return shape_err(format!("second derivatives need an extent of at least 3x3, got {h}x{w}"));
    }
    let c = d.coords()?;
    let (ho, wo) = (h - 2, w - 2);
    let at = |dr, dc| shifted(c, dr, dc, ho, wo);
    let k = 1.0 / (spacing * spacing);
    let center = at(1, 1)?;
    let rr = at(2, 1)?.add(at(0, 1)?)?.sub(center.scale(2.0))?.scale(k);
    let cc = at(1, 2)?.add(at(1, 0)?)?.sub(center.scale(2.0))?.scale(k);
    let rc = at(2, 2)?.sub(at(2, 1)?)?.sub(at(1, 2)?)?.add(center)?.scale(k);
    Var::concat(&[
        rr.narrow(0, 1)?,
        rc.narrow(0, 1)?,
        cc.narrow(0, 1)?,
        rr.narrow(1, 1)?,
        rc.narrow(1, 1)?,
        cc.narrow(1, 1)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{identity_map, Affine};
    use crate::tensor::{grad_check, Tape, Tensor};

    fn channel_values(t: &Tensor, ch: usize) -> &[f64] {
        let n = t.len() / t.shape()[0];
        &t.data()[ch * n..(ch + 1) * n]
    }

    #[test]
    fn identity_has_unit_jacobian_and_no_curvature() {
        let tape = Tape::new();
        let id = identity_map(&tape, 5, 6);
        let j = jacobian_field(&id, 1.0).unwrap().value();
        assert_eq!(j.shape(), &[4, 4, 5]);
        for (ch, expect) in [1.0, 0.0, 0.0, 1.0].into_iter().enumerate() {
            assert!(channel_values(&j, ch).iter().all(|&v| v == expect));
        }
        let s = second_derivative_field(&id, 1.0).unwrap().value();
        assert_eq!(s.shape(), &[6, 3, 4]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_jacobian_is_its_matrix() {
        let tape = Tape::new();
        let a = Affine { a: [[1.2, -0.3], [0.4, 0.9]], b: [2.0, -1.0] };
        let d = Deformation::from_affine(&tape, &a, 6, 7);
        let j = jacobian_field(&d, 1.0).unwrap().value();
        for (ch, expect) in [1.2, -0.3, 0.4, 0.9].into_iter().enumerate() {
            assert!(channel_values(&j, ch).iter().all(|&v| (v - expect).abs() < 1e-12));
        }
        let s = second_derivative_field(&d, 1.0).unwrap().value();
        assert!(s.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_scaling_determinant() {
        let tape = Tape::new();
        let d = Deformation::from_affine(&tape, &Affine::about([[2.0, 0.0], [0.0, 2.0]], (3.0, 3.0)), 7, 7);
        let j = jacobian_field(&d, 1.0).unwrap().value();
        let n = 36;
        for q in 0..n {
            let det = j.data()[q] * j.data()[3 * n + q] - j.data()[n + q] * j.data()[2 * n + q];
            assert_eq!(det, 4.0);
        }
        let half = jacobian_field(&d, 2.0).unwrap().value();
        assert_eq!(half.data()[0], 1.0);
    }

    #[test]
    fn quadratic_map_curvature() {
        let tape = Tape::new();
        let (h, w) = (5, 5);
        let coords = Tensor::from_fn(&[2, h, w], |i| {
            let q = i % (h * w);
            let (r, c) = ((q / w) as f64, (q % w) as f64);
            if i < h * w {
                r + 0.5 * r * r + r * c
            } else {
                c - 1.5 * c * c
            }
        });
        let d = Deformation::dense(tape.constant(coords), crate::deform::Mask::full(h, w)).unwrap();
        let s = second_derivative_field(&d, 1.0).unwrap().value();
        for (ch, expect) in [1.0, 1.0, 0.0, 0.0, 0.0, -3.0].into_iter().enumerate() {
            assert!(channel_values(&s, ch).iter().all(|&v| (v - expect).abs() < 1e-12), "channel {ch}");
        }
    }

    #[test]
    fn too_small_extent_is_an_error() {
        let tape = Tape::new();
        assert!(jacobian_field(&identity_map(&tape, 1, 5), 1.0).is_err());
        assert!(second_derivative_field(&identity_map(&tape, 2, 5), 1.0).is_err());
    }

    #[test]
    fn derivatives_are_differentiable() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.7).sin() * 3.0);
        let r = grad_check(
            |_, c| {
                let d = Deformation::dense(c, crate::deform::Mask::full(4, 5))?;
                jacobian_field(&d, 1.0)?.square().sum().add(second_derivative_field(&d, 1.0)?.square().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
