use rand::Rng;

use super::Deformation;
use crate::error::{shape_err, Result};
use crate::tensor::{rigid_params_to_affine, Tensor, Var};

/// Source lookup `src = a * p + b` on `(row, col)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

/// Rotation center of an `h x w` grid.
pub fn image_center((h, w): (usize, usize)) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: [[1.0, 0.0], [0.0, 1.0]], b: [0.0, 0.0] };

    pub fn translation(b0: f64, b1: f64) -> Self {
        Affine { a: Self::IDENTITY.a, b: [b0, b1] }
    }

    /// `src = a * (p - c) + c`.
    pub fn about(a: [[f64; 2]; 2], (c0, c1): (f64, f64)) -> Self {
        Affine { a, b: [c0 - (a[0][0] * c0 + a[0][1] * c1), c1 - (a[1][0] * c0 + a[1][1] * c1)] }
    }

    /// Content rotated by `angle` radians about the image center.
    pub fn rotation(angle: f64, extent: (usize, usize)) -> Self {
        let (s, c) = angle.sin_cos();
        Self::about([[c, s], [-s, c]], image_center(extent))
    }

    /// Content rotated by `k` quarter turns about the image center, with exact entries.
    pub fn quarter_turns(k: u8, extent: (usize, usize)) -> Self {
        let mut m = Self::IDENTITY.a;
        for _ in 0..k % 4 {
            m = mat_mul([[0.0, 1.0], [-1.0, 0.0]], m);
        }
        Self::about(m, image_center(extent))
    }

    pub fn flips(rows: bool, cols: bool, extent: (usize, usize)) -> Self {
        let sign = |f: bool| if f { -1.0 } else { 1.0 };
        Self::about([[sign(rows), 0.0], [0.0, sign(cols)]], image_center(extent))
    }

    pub fn apply(&self, (r, c): (f64, f64)) -> (f64, f64) {
        (self.a[0][0] * r + self.a[0][1] * c + self.b[0], self.a[1][0] * r + self.a[1][1] * c + self.b[1])
    }

    /// `p -> inner(self(p))`.
    pub fn then(&self, inner: &Affine) -> Affine {
        let (b0, b1) = inner.apply((self.b[0], self.b[1]));
        Affine { a: mat_mul(inner.a, self.a), b: [b0, b1] }
    }

    /// Closed-form inverse; `None` for a singular matrix.
    pub fn inverse(&self) -> Option<Affine> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv = if det == 1.0 {
            [[d, -b], [-c, a]]
        } else if det == -1.0 {
            [[-d, b], [c, -a]]
        } else {
            [[d / det, -b / det], [-c / det, a / det]]
        };
        let ib = [-(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]), -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1])];
        Some(Affine { a: inv, b: ib })
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1], self.b[0], self.b[1]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![6], self.to_array().to_vec()).expect("six entries")
    }

    pub fn from_slice(p: &[f64]) -> Result<Affine> {
        match p {
            [a00, a01, a10, a11, b0, b1] => Ok(Affine { a: [[*a00, *a01], [*a10, *a11]], b: [*b0, *b1] }),
            _ => shape_err(format!("affine parameters must have 6 entries, got {}", p.len())),
        }
    }
}

fn mat_mul(x: [[f64; 2]; 2], y: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [x[0][0] * y[0][0] + x[0][1] * y[1][0], x[0][0] * y[0][1] + x[0][1] * y[1][1]],
        [x[1][0] * y[0][0] + x[1][1] * y[1][0], x[1][0] * y[0][1] + x[1][1] * y[1][1]],
    ]
}

/// Rigid motion: content rotated by `angle` about `center`, then shifted by `translation = (dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidParams {
    pub angle: f64,
    pub translation: (f64, f64),
    /// `None` means the image center.
    pub center: Option<(f64, f64)>,
}

impl RigidParams {
    pub fn new(angle: f64, translation: (f64, f64)) -> Self {
        RigidParams { angle, translation, center: None }
    }

    pub fn to_affine(&self, extent: (usize, usize)) -> Affine {
        let center = self.center.unwrap_or_else(|| image_center(extent));
        Affine::from_slice(&rigid_params_to_affine(self.angle, self.translation, center)).expect("six entries")
    }
}

/// Differentiable rigid deformation from `params = [angle, dy, dx]` about the image center.
pub fn rigid_to_deformation<'t>(params: Var<'t>, h: usize, w: usize) -> Result<Deformation<'t>> {
    Deformation::affine(params.rigid_affine(image_center((h, w)))?, h, w)
}

/// Distribution of the transforms used to probe deformation equivariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivarianceConfig {
    /// Small rotations are uniform on `(-max_angle_deg, max_angle_deg)`.
    pub max_angle_deg: f64,
    pub quarter_turns: bool,
    pub flips: bool,
}

impl Default for EquivarianceConfig {
    fn default() -> Self {
        EquivarianceConfig { max_angle_deg: 15.0, quarter_turns: true, flips: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivarianceTransform {
    pub forward: Affine,
    pub inverse: Affine,
    pub angle: f64,
    pub quarter_turns: u8,
    pub flip_rows: bool,
    pub flip_cols: bool,
}

/// Small rotation after a quarter-turn rotation after axis flips, all about the image center.
pub fn sample_equivariance_transform<R: Rng>(
    rng: &mut R,
    cfg: &EquivarianceConfig,
    extent: (usize, usize),
) -> EquivarianceTransform {
    let max = cfg.max_angle_deg.to_radians();
    let angle = if max > 0.0 { rng.gen_range(-max..max) } else { 0.0 };
    let quarter_turns = if cfg.quarter_turns { rng.gen_range(0..4u8) } else { 0 };
    let (flip_rows, flip_cols) = if cfg.flips { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };
    let forward = Affine::flips(flip_rows, flip_cols, extent)
        .then(&Affine::quarter_turns(quarter_turns, extent))
        .then(&Affine::rotation(angle, extent));
    let inverse = Affine::rotation(-angle, extent)
        .then(&Affine::quarter_turns((4 - quarter_turns) % 4, extent))
        .then(&Affine::flips(flip_rows, flip_cols, extent));
    EquivarianceTransform { forward, inverse, angle, quarter_turns, flip_rows, flip_cols }
}
