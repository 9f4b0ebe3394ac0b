use rand::Rng;

use super::affine::Affine;
use super::{compose, gaussian_svf, svf_exp, Deformation, RigidParams, Svf};
use crate::error::{arg_err, Result};
use crate::tensor::{Tape, Tensor};

/// Closed interval sampled uniformly; `lo == hi` is a constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn is_constant(&self) -> bool {
        self.lo == self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.is_constant() {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    fn scaled(&self, k: f64) -> Range {
        Range { lo: self.lo * k, hi: self.hi * k }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    LargeRandom,
    SmallRandom,
    LargeConstant,
    SmallConstant,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s.to_ascii_uppercase().as_str() {
            "LR" => Some(Preset::LargeRandom),
            "SR" => Some(Preset::SmallRandom),
            "LC" => Some(Preset::LargeConstant),
            "SC" => Some(Preset::SmallConstant),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Preset::LargeRandom => "LR",
            Preset::SmallRandom => "SR",
            Preset::LargeConstant => "LC",
            Preset::SmallConstant => "SC",
        }
    }
}

/// Rigid plus Gaussian-velocity elastic deformation distribution.
///
/// Pairs are `(row, col)` for translation and `mu`, and per output component for
/// `sigma` and `m`. Rotation is in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimDeformParams {
    pub translation: [Range; 2],
    pub rotation_deg: Range,
    pub mu: [Range; 2],
    pub sigma: [Range; 2],
    pub m: [Range; 2],
}

/// Reference extent the preset amplitudes are given for.
pub const PRESET_SIZE: f64 = 400.0;

impl SimDeformParams {
    pub fn zero() -> Self {
        let z = Range::fixed(0.0);
        SimDeformParams { translation: [z; 2], rotation_deg: z, mu: [z; 2], sigma: [Range::fixed(1.0); 2], m: [z; 2] }
    }

    /// Preset at the reference size of 400 pixels.
    pub fn preset(p: Preset) -> Self {
        let u = Range::new;
        let f = Range::fixed;
        match p {
            Preset::LargeRandom => SimDeformParams {
                translation: [u(-15.0, 15.0); 2],
                rotation_deg: u(-15.0, 15.0),
                mu: [u(0.0, 400.0); 2],
                sigma: [u(40.0, 120.0); 2],
                m: [u(-20.0, 20.0); 2],
            },
            Preset::SmallRandom => SimDeformParams {
                translation: [u(-1.5, 1.5); 2],
                rotation_deg: u(-1.5, 1.5),
                mu: [u(0.0, 400.0); 2],
                sigma: [u(40.0, 120.0); 2],
                m: [u(-2.0, 2.0); 2],
            },
            Preset::LargeConstant => SimDeformParams {
                translation: [f(10.0), f(-10.0)],
                rotation_deg: f(10.0),
                mu: [f(120.0), f(280.0)],
                sigma: [f(60.0), f(80.0)],
                m: [f(20.0), f(-20.0)],
            },
            Preset::SmallConstant => SimDeformParams {
                translation: [f(1.0), f(-1.0)],
                rotation_deg: f(-1.0),
                mu: [f(120.0), f(280.0)],
                sigma: [f(60.0), f(80.0)],
                m: [f(2.0), f(-2.0)],
            },
        }
    }

    /// Preset with pixel amplitudes scaled by `size / 400`; rotations unchanged.
    pub fn preset_for_size(p: Preset, size: usize) -> Self {
        Self::preset(p).scaled(size as f64 / PRESET_SIZE)
    }

    pub fn scaled(&self, k: f64) -> Self {
        let s2 = |r: [Range; 2]| [r[0].scaled(k), r[1].scaled(k)];
        SimDeformParams {
            translation: s2(self.translation),
            rotation_deg: self.rotation_deg,
            mu: s2(self.mu),
            sigma: s2(self.sigma),
            m: s2(self.m),
        }
    }

    pub fn is_constant(&self) -> bool {
        [self.translation, self.mu, self.sigma, self.m].iter().flatten().all(Range::is_constant)
            && self.rotation_deg.is_constant()
    }

    fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|s| !(s.lo > 0.0 && s.hi >= s.lo)) {
            return arg_err(format!("sigma ranges must be positive, got {:?}", self.sigma));
        }
        let all = [self.translation, self.mu, self.sigma, self.m].into_iter().flatten().chain([self.rotation_deg]);
        for r in all {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return arg_err(format!("invalid range {r:?}"));
            }
        }
        Ok(())
    }
}

/// One draw from [`SimDeformParams`] with its ground-truth coordinate maps.
#[derive(Clone, Debug)]
pub struct SimulatedDeformation {
    pub rigid: RigidParams,
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
    pub m: (f64, f64),
    /// `[2,H,W]` coordinates of `p -> exp(v)(rigid(p))`.
    pub forward: Tensor,
    /// `[2,H,W]` coordinates of the inverse map `p -> rigid^-1(exp(-v)(p))`.
    pub inverse: Tensor,
}

impl SimulatedDeformation {
    pub fn to_deformation<'t>(&self, tape: &'t Tape) -> Result<Deformation<'t>> {
        let (h, w) = (self.forward.shape()[1], self.forward.shape()[2]);
        Deformation::dense(tape.constant(self.forward.clone()), super::Mask::full(h, w))
    }
}

/// Rigid motion followed by the exponential of a Gaussian velocity field.
pub fn simulate_deformation<R: Rng>(
    p: &SimDeformParams,
    rng: &mut R,
    h: usize,
    w: usize,
) -> Result<SimulatedDeformation> {
    p.validate()?;
    let translation = (p.translation[0].sample(rng), p.translation[1].sample(rng));
    let angle = p.rotation_deg.sample(rng).to_radians();
    let mu = (p.mu[0].sample(rng), p.mu[1].sample(rng));
    let sigma = (p.sigma[0].sample(rng), p.sigma[1].sample(rng));
    let m = (p.m[0].sample(rng), p.m[1].sample(rng));
    let rigid = RigidParams::new(angle, translation);

    let tape = Tape::new();
    let affine = rigid.to_affine((h, w));
    let r = Deformation::from_affine(&tape, &affine, h, w);
    let r_inv = Deformation::from_affine(&tape, &affine.inverse().unwrap_or(Affine::IDENTITY), h, w);
    let v = Svf::new(tape.constant(gaussian_svf(mu, sigma, m, h, w)?))?;
    let forward = compose(&r, &svf_exp(&v)?)?.coords()?.value();
    let inverse = compose(&svf_exp(&v.neg())?, &r_inv)?.coords()?.value();
    Ok(SimulatedDeformation { rigid, mu, sigma, m, forward: (*forward).clone(), inverse: (*inverse).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_constant_preset_values() {
        let p = SimDeformParams::preset(Preset::SmallConstant);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = simulate_deformation(&p, &mut rng, 40, 40).unwrap();
        assert_eq!(s.rigid.translation, (1.0, -1.0));
        assert!((s.rigid.angle.to_degrees() + 1.0).abs() < 1e-12);
        assert_eq!((s.mu, s.sigma, s.m), ((120.0, 280.0), (60.0, 80.0), (2.0, -2.0)));
        assert!(p.is_constant());
    }

    #[test]
    fn large_random_translation_range() {
        let p = SimDeformParams::preset(Preset::LargeRandom);
        assert_eq!(p.translation, [Range::new(-15.0, 15.0); 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = simulate_deformation(&p, &mut rng, 16, 16).unwrap();
            assert!(s.rigid.translation.0.abs() < 15.0 && s.rigid.translation.1.abs() < 15.0);
        }
        assert!(!p.is_constant());
    }

    #[test]
    fn scaling_keeps_rotation() {
        let p = SimDeformParams::preset_for_size(Preset::LargeConstant, 100);
        assert_eq!(p.translation, [Range::fixed(2.5), Range::fixed(-2.5)]);
        assert_eq!(p.rotation_deg, Range::fixed(10.0));
        assert_eq!(p.m, [Range::fixed(5.0), Range::fixed(-5.0)]);
    }

    #[test]
    fn zero_parameters_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = simulate_deformation(&SimDeformParams::zero(), &mut rng, 9, 11).unwrap();
        assert_eq!(s.forward, grid(9, 11));
        assert_eq!(s.inverse, grid(9, 11));
    }

    #[test]
    fn forward_and_inverse_cancel() {
        let p = SimDeformParams::preset_for_size(Preset::LargeRandom, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = simulate_deformation(&p, &mut rng, 64, 64).unwrap();
        let tape = Tape::new();
        let f = Deformation::dense(tape.constant(s.forward.clone()), super::super::Mask::full(64, 64)).unwrap();
        let i = Deformation::dense(tape.constant(s.inverse.clone()), super::super::Mask::full(64, 64)).unwrap();
        let res = compose(&i, &f).unwrap().displacement().unwrap().value();
        let p = 64 * 64;
        // interior only: the rigid part moves the border out of the field of view
        let mut total = 0.0;
        let mut n = 0;
        for r in 8..56 {
            for c in 8..56 {
                let q = r * 64 + c;
                total += res.data()[q].hypot(res.data()[p + q]);
                n += 1;
            }
        }
        assert!(total / (n as f64) < 0.1, "{}", total / n as f64);
    }

    #[test]
    fn invalid_sigma_is_rejected() {
        let mut p = SimDeformParams::zero();
        p.sigma[0] = Range::fixed(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(simulate_deformation(&p, &mut rng, 4, 4).is_err());
    }
}
