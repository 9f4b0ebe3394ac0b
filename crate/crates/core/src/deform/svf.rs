use super::{grid, Deformation, Mask};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Fill, Tensor, Var};

/// Upper bound on scaling-and-squaring steps.
pub const MAX_SQUARINGS: usize = 7;

/// Stationary velocity field `[2,H,W]` in pixels per unit time.
#[derive(Clone, Copy, Debug)]
pub struct Svf<'t> {
    pub field: Var<'t>,
}

impl<'t> Svf<'t> {
    pub fn new(field: Var<'t>) -> Result<Self> {
        let v = field.value();
        let (two, _, _) = v.chw()?;
        if two != 2 {
            return shape_err(format!("velocity field must be [2,H,W], got {:?}", v.shape()));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite("velocity field".into()));
        }
        Ok(Svf { field })
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.field.shape();
        (s[1], s[2])
    }

    pub fn neg(&self) -> Svf<'t> {
        Svf { field: self.field.neg() }
    }

    pub fn detach(&self) -> Svf<'t> {
        Svf { field: self.field.detach() }
    }
}

/// `m_i * exp(-|x - mu|^2 / (2 sigma_i^2))` for component `i`, on the `(row, col)` grid.
pub fn gaussian_svf(mu: (f64, f64), sigma: (f64, f64), m: (f64, f64), h: usize, w: usize) -> Result<Tensor> {
    if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
        return arg_err(format!("sigma must be positive, got {sigma:?}"));
    }
    let p = h * w;
    Ok(Tensor::from_fn(&[2, h, w], |i| {
        let (ch, q) = (i / p, i % p);
        let (r, c) = ((q / w) as f64, (q % w) as f64);
        let d2 = (r - mu.0).powi(2) + (c - mu.1).powi(2);
        let (s, amp) = if ch == 0 { (sigma.0, m.0) } else { (sigma.1, m.1) };
        amp * (-0.5 * d2 / (s * s)).exp()
    }))
}

/// Smallest step count bringing the scaled field below half a pixel, capped at [`MAX_SQUARINGS`].
pub fn squarings_for(max_abs: f64) -> usize {
    (0..MAX_SQUARINGS).find(|&k| max_abs / ((1u64 << k) as f64) < 0.5).unwrap_or(MAX_SQUARINGS)
}

/// Scaling and squaring with the step count chosen from the field magnitude.
pub fn svf_exp<'t>(v: &Svf<'t>) -> Result<Deformation<'t>> {
    svf_exp_with(v, squarings_for(v.field.value().max_abs()))
}

/// `phi_0 = id + v / 2^k`, `phi_{n+1} = phi_n o phi_n`; the result carries a full mask.
pub fn svf_exp_with<'t>(v: &Svf<'t>, squarings: usize) -> Result<Deformation<'t>> {
    let (h, w) = v.extent();
    let tape = v.field.tape();
    let mut phi = v.field.scale(1.0 / (1u64 << squarings) as f64).add(tape.constant(grid(h, w)))?;
    for _ in 0..squarings {
        phi = phi.bilinear_sample(phi, Fill::Extend)?;
    }
    Deformation::dense(phi, Mask::full(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{compose, identity_map};
    use crate::tensor::{grad_check, Tape};

    #[test]
    fn gaussian_field_formula() {
        let f = gaussian_svf((3.0, 4.0), (2.0, 1.0), (5.0, -2.0), 8, 9).unwrap();
        let at = |ch: usize, r: usize, c: usize| f.data()[(ch * 8 + r) * 9 + c];
        assert_eq!((at(0, 3, 4), at(1, 3, 4)), (5.0, -2.0));
        assert!((at(0, 5, 4) - 5.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((at(1, 3, 5) + 2.0 * (-0.5f64).exp()).abs() < 1e-12);
        let zero = gaussian_svf((3.0, 4.0), (2.0, 1.0), (0.0, 0.0), 8, 9).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(gaussian_svf((0.0, 0.0), (0.0, 1.0), (1.0, 1.0), 4, 4).is_err());
    }

    #[test]
    fn squaring_count_rule() {
        assert_eq!(squarings_for(0.0), 0);
        assert_eq!(squarings_for(0.49), 0);
        assert_eq!(squarings_for(0.5), 1);
        assert_eq!(squarings_for(3.0), 3);
        assert_eq!(squarings_for(1e6), MAX_SQUARINGS);
    }

    #[test]
    fn zero_field_is_identity() {
        let tape = Tape::new();
        let v = Svf::new(tape.constant(Tensor::zeros(&[2, 5, 6]))).unwrap();
        let d = svf_exp_with(&v, 4).unwrap();
        assert_eq!(*d.coords().unwrap().value(), *identity_map(&tape, 5, 6).coords().unwrap().value());
    }

    #[test]
    fn constant_field_is_a_translation() {
        let tape = Tape::new();
        let (h, w) = (7, 8);
        let v = Svf::new(tape.constant(Tensor::from_fn(&[2, h, w], |i| if i < h * w { 3.0 } else { -2.0 }))).unwrap();
        let d = svf_exp(&v).unwrap().displacement().unwrap().value();
        for (i, &u) in d.data().iter().enumerate() {
            let expected = if i < h * w { 3.0 } else { -2.0 };
            assert!((u - expected).abs() < 1e-12, "{u}");
        }
    }

    #[test]
    fn inverse_field_undoes_the_flow() {
        let tape = Tape::new();
        let (h, w) = (32, 32);
        let v = Svf::new(tape.constant(gaussian_svf((14.0, 18.0), (7.0, 9.0), (4.0, -3.0), h, w).unwrap())).unwrap();
        let there = svf_exp(&v).unwrap();
        let back = svf_exp(&v.neg()).unwrap();
        let res = compose(&there, &back).unwrap().displacement().unwrap().value();
        let p = h * w;
        let mean = (0..p).map(|q| res.data()[q].hypot(res.data()[p + q])).sum::<f64>() / p as f64;
        assert!(mean < 0.05, "round trip error {mean}");
    }

    #[test]
    fn gradient_through_squarings() {
        let field = gaussian_svf((2.0, 3.0), (2.0, 2.5), (1.3, -0.9), 5, 6).unwrap();
        let probe = Tensor::from_fn(&[2, 5, 6], |i| ((i * 7) % 11) as f64 / 11.0 - 0.4);
        let r = grad_check(
            |tape, f| {
                let d = svf_exp_with(&Svf::new(f)?, 2)?;
                Ok(d.coords()?.mul(tape.constant(probe.clone()))?.sum())
            },
            &field,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
