use super::masked_mean;
use crate::deform::{compose, jacobian_field, second_derivative_field, svf_exp, Deformation, Mask, Svf};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidityWeights {
    pub affinity: f64,
    pub orthogonality: f64,
    pub properness: f64,
    /// Pixel spacing used by the finite differences.
    pub spacing: f64,
}

impl Default for RigidityWeights {
    fn default() -> Self {
        RigidityWeights { affinity: 1.0, orthogonality: 0.01, properness: 0.1, spacing: 1.0 }
    }
}

/// Unweighted terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct NonRigidity<'t> {
    pub affinity: Var<'t>,
    pub orthogonality: Var<'t>,
    pub properness: Var<'t>,
    pub total: Var<'t>,
}

/// Interior pixels whose 3x3 neighbourhood is valid, as a `(H-2) x (W-2)` grid.
fn interior_valid(mask: &Mask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            out.push((r - 1..=r + 1).all(|i| (c - 1..=c + 1).all(|j| mask.get(i, j))));
        }
    }
    out
}

/// Affinity, orthogonality and properness penalties averaged over valid interior pixels.
///
/// Orthogonality is `|J J^T - I|_F^2` and properness `(det J - 1)^2`.
pub fn nonrigidity<'t>(d: &Deformation<'t>, weights: &RigidityWeights) -> Result<NonRigidity<'t>> {
    let (h, w) = d.extent();
    let second = second_derivative_field(d, weights.spacing)?;
    let jac = jacobian_field(d, weights.spacing)?.crop(1, 1, h - 2, w - 2)?;
    let valid = interior_valid(&d.mask);
    let tape = jac.tape();

    let (hi, wi) = (h - 2, w - 2);
    let mixed_twice = Tensor::from_fn(&[6, hi, wi], |i| if matches!(i / (hi * wi), 1 | 4) { 2.0 } else { 1.0 });
    let curvature = second.square().mul(tape.constant(mixed_twice))?;
    let affinity = masked_mean(curvature, &valid)?.value.scale(6.0);

    let j = |k: usize| jac.narrow(k, 1);
    let (j00, j01, j10, j11) = (j(0)?, j(1)?, j(2)?, j(3)?);
    let diag0 = j00.square().add(j01.square())?.offset(-1.0);
    let off = j00.mul(j10)?.add(j01.mul(j11)?)?;
    let diag1 = j10.square().add(j11.square())?.offset(-1.0);
    let ortho_field = diag0.square().add(off.square().scale(2.0))?.add(diag1.square())?;
    let orthogonality = masked_mean(ortho_field, &valid)?.value;

    let det = j00.mul(j11)?.sub(j01.mul(j10)?)?;
    let properness = masked_mean(det.offset(-1.0).square(), &valid)?.value;

    let total = affinity
        .scale(weights.affinity)
        .add(orthogonality.scale(weights.orthogonality))?
        .add(properness.scale(weights.properness))?;
    Ok(NonRigidity { affinity, orthogonality, properness, total })
}

/// Penalty on the forward and inverse elastic cross-modality deformations.
pub fn reg_cross<'t>(v_cross: &Svf<'t>, weights: &RigidityWeights) -> Result<Var<'t>> {
    let fwd = nonrigidity(&svf_exp(v_cross)?, weights)?.total;
    let inv = nonrigidity(&svf_exp(&v_cross.neg())?, weights)?.total;
    fwd.add(inv)
}

/// Penalty on the concatenated elastic deformation in both directions;
/// the cross-modality field is detached.
pub fn reg_intra<'t>(v_intra: &Svf<'t>, v_cross: &Svf<'t>, weights: &RigidityWeights) -> Result<Var<'t>> {
    let vc = v_cross.detach();
    let fwd = compose(&svf_exp(v_intra)?, &svf_exp(&vc)?)?;
    let inv = compose(&svf_exp(&vc.neg())?, &svf_exp(&v_intra.neg())?)?;
    nonrigidity(&fwd, weights)?.total.add(nonrigidity(&inv, weights)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{gaussian_svf, Affine, RigidParams};
    use crate::tensor::Tape;

    #[test]
    fn rigid_maps_have_zero_penalty() {
        let tape = Tape::new();
        for (angle, t) in [(0.0, (0.0, 0.0)), (0.4, (1.5, -2.0)), (-2.0, (7.0, 3.0))] {
            let a = RigidParams::new(angle, t).to_affine((9, 8));
            let n = nonrigidity(&Deformation::from_affine(&tape, &a, 9, 8), &RigidityWeights::default()).unwrap();
            assert!(n.total.item().abs() < 1e-9, "{}", n.total.item());
        }
    }

    #[test]
    fn uniform_scaling_values() {
        let tape = Tape::new();
        let a = Affine::about([[2.0, 0.0], [0.0, 2.0]], (4.0, 4.0));
        let n = nonrigidity(&Deformation::from_affine(&tape, &a, 9, 9), &RigidityWeights::default()).unwrap();
        assert_eq!(n.affinity.item(), 0.0);
        assert!((n.orthogonality.item() - 18.0).abs() < 1e-9);
        assert!((n.properness.item() - 9.0).abs() < 1e-9);
        assert!((n.total.item() - (0.01 * 18.0 + 0.1 * 9.0)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_map_affinity_counts_mixed_term_twice() {
        let tape = Tape::new();
        let (h, w) = (6, 6);
        // row' = r + 0.5 r^2 + r c : d2/drr = 1, d2/drc = 1
        let coords = Tensor::from_fn(&[2, h, w], |i| {
            let q = i % (h * w);
            let (r, c) = ((q / w) as f64, (q % w) as f64);
            if i < h * w {
                r + 0.5 * r * r + r * c
            } else {
                c
            }
        });
        let d = Deformation::dense(tape.constant(coords), Mask::full(h, w)).unwrap();
        let n = nonrigidity(&d, &RigidityWeights::default()).unwrap();
        assert!((n.affinity.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_neighbourhoods_are_excluded() {
        let tape = Tape::new();
        let a = Affine::about([[2.0, 0.0], [0.0, 2.0]], (3.0, 3.0));
        let d = Deformation::from_affine(&tape, &a, 7, 7).with_mask(Mask::empty(7, 7)).unwrap();
        let n = nonrigidity(&d, &RigidityWeights::default()).unwrap();
        assert_eq!(n.total.item(), 0.0);
    }

    #[test]
    fn regularizers() {
        let tape = Tape::new();
        let (h, w) = (24, 24);
        let zero = Svf::new(tape.constant(Tensor::zeros(&[2, h, w]))).unwrap();
        let weights = RigidityWeights::default();
        assert_eq!(reg_cross(&zero, &weights).unwrap().item(), 0.0);
        assert_eq!(reg_intra(&zero, &zero, &weights).unwrap().item(), 0.0);

        let bump = gaussian_svf((8.0, 14.0), (4.0, 5.0), (1.2, -1.0), h, w).unwrap();
        let v = Svf::new(tape.constant(bump.clone())).unwrap();
        let a = reg_cross(&v, &weights).unwrap().item();
        let b = reg_cross(&v.neg(), &weights).unwrap().item();
        assert!(a > 0.0 && (a - b).abs() < 1e-12);

        let vi = Svf::new(tape.leaf(bump.map(|x| -x))).unwrap();
        let vc = Svf::new(tape.leaf(bump)).unwrap();
        let cancel = reg_intra(&vi, &vc, &weights).unwrap();
        assert!(cancel.item() < 0.05 * a, "{} vs {a}", cancel.item());
        tape.backward(cancel).unwrap();
        assert!(tape.grad(vc.field).is_none());
        assert!(tape.grad(vi.field).is_some());
    }
}
