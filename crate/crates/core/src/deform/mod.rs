//! Deformations as coordinate lookups, image pullback, and validity masks.
//!
//! A deformation maps each output pixel `(row, col)` to the source location the
//! output samples from. Composition `compose(outer, inner)` is the map
//! `p -> inner(outer(p))`, so warping by the composition equals warping by
//! `inner` first and then by `outer`.

mod affine;
mod derivatives;
mod simulate;
mod svf;

pub use affine::{
    image_center, rigid_to_deformation, sample_equivariance_transform, Affine, EquivarianceConfig,
    EquivarianceTransform, RigidParams,
};
pub use derivatives::{jacobian_field, second_derivative_field};
pub use simulate::{simulate_deformation, Preset, Range, SimDeformParams, SimulatedDeformation};
pub use svf::{gaussian_svf, squarings_for, svf_exp, svf_exp_with, Svf, MAX_SQUARINGS};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Fill, Tape, Tensor, Var};

/// Binary validity grid. Never on the tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn full(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![true; h * w] }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Mask { h, w, data: (0..h * w).map(|q| f(q / w, q % w)).collect() }
    }

    /// Nonzero entries of a `[H,W]` or `[1,H,W]` tensor are valid.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return shape_err(format!("mask tensor must be [H,W] or [1,H,W], got {s:?}")),
        };
        Ok(Mask { h, w, data: t.data().iter().map(|&v| v != 0.0).collect() })
    }

    /// `[1,H,W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.h, self.w], |q| if self.data[q] { 1.0 } else { 0.0 })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_extent(other.h, other.w)?;
        Ok(Mask { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect() })
    }

    pub(crate) fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        if (self.h, self.w) != (h, w) {
            return shape_err(format!("extent {}x{} does not match {h}x{w}", self.h, self.w));
        }
        Ok(())
    }

    /// Validity after resampling at `coords: [2,H',W']`: a pixel stays valid only
    /// if every positively weighted corner is in bounds and valid.
    pub fn resample_strict(&self, coords: &Tensor) -> Result<Mask> {
        self.resample(coords, true)
    }

    fn resample(&self, coords: &Tensor, strict: bool) -> Result<Mask> {
        let (two, h, w) = coords.chw()?;
        if two != 2 {
            return shape_err(format!("coordinates must be [2,H,W], got {:?}", coords.shape()));
        }
        let p = h * w;
        let data = (0..p)
            .map(|q| {
                let (r, c) = (coords.data()[q], coords.data()[p + q]);
                if strict {
                    crate::tensor::strict_corner_check(r, c, self.h, self.w, |i, j| self.get(i, j))
                } else {
                    crate::tensor::lenient_corner_check(r, c, self.h, self.w, |i, j| self.get(i, j))
                }
            })
            .collect();
        Ok(Mask { h, w, data })
    }
}

/// Channel-major `[C,H,W]` pixel values on the tape with a validity mask.
#[derive(Clone, Debug)]
pub struct Image<'t> {
    pub data: Var<'t>,
    pub mask: Mask,
}

impl<'t> Image<'t> {
    pub fn new(data: Var<'t>, mask: Mask) -> Result<Self> {
        let (_, h, w) = data.value().chw()?;
        mask.check_extent(h, w)?;
        Ok(Image { data, mask })
    }

    /// Image with every pixel valid.
    pub fn full(data: Var<'t>) -> Result<Self> {
        let (_, h, w) = data.value().chw()?;
        Ok(Image { data, mask: Mask::full(h, w) })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }

    pub fn detach(&self) -> Self {
        Image { data: self.data.detach(), mask: self.mask.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Map<'t> {
    /// `[2,H,W]` absolute source coordinates `(row, col)`.
    Dense(Var<'t>),
    /// `[6]` closed-form affine map, see [`Affine`].
    Affine(Var<'t>),
}

#[derive(Clone, Debug)]
pub struct Deformation<'t> {
    pub map: Map<'t>,
    pub mask: Mask,
}

/// `[2,H,W]` pixel grid: channel 0 holds rows, channel 1 columns.
pub fn grid(h: usize, w: usize) -> Tensor {
    let p = h * w;
    Tensor::from_fn(&[2, h, w], |i| if i < p { (i / w) as f64 } else { ((i - p) % w) as f64 })
}

/// Dense identity map with a full mask.
pub fn identity_map(tape: &Tape, h: usize, w: usize) -> Deformation<'_> {
    Deformation { map: Map::Dense(tape.constant(grid(h, w))), mask: Mask::full(h, w) }
}

impl<'t> Deformation<'t> {
    pub fn dense(coords: Var<'t>, mask: Mask) -> Result<Self> {
        let (two, h, w) = coords.value().chw()?;
        if two != 2 {
            return shape_err(format!("coordinate map must be [2,H,W], got {:?}", coords.shape()));
        }
        mask.check_extent(h, w)?;
        Ok(Deformation { map: Map::Dense(coords), mask })
    }

    /// Affine deformation over an `h x w` grid with a full mask.
    pub fn affine(params: Var<'t>, h: usize, w: usize) -> Result<Self> {
        if params.value().len() != 6 {
            return shape_err(format!("affine parameters must have 6 entries, got {:?}", params.shape()));
        }
        Ok(Deformation { map: Map::Affine(params), mask: Mask::full(h, w) })
    }

    pub fn from_affine(tape: &'t Tape, a: &Affine, h: usize, w: usize) -> Self {
        Deformation { map: Map::Affine(tape.constant(a.to_tensor())), mask: Mask::full(h, w) }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.map, Map::Affine(_))
    }

    pub fn tape(&self) -> &'t Tape {
        match self.map {
            Map::Dense(v) | Map::Affine(v) => v.tape(),
        }
    }

    /// Absolute `[2,H,W]` coordinate map; affine maps are evaluated on the grid.
    pub fn coords(&self) -> Result<Var<'t>> {
        match self.map {
            Map::Dense(v) => Ok(v),
            Map::Affine(a) => {
                let (h, w) = self.extent();
                a.affine_apply(a.tape().constant(grid(h, w)))
            }
        }
    }

    /// `coords - grid`.
    pub fn displacement(&self) -> Result<Var<'t>> {
        let (h, w) = self.extent();
        let c = self.coords()?;
        c.sub(c.tape().constant(grid(h, w)))
    }

    /// Same map with gradient flow cut.
    pub fn detach(&self) -> Self {
        let map = match self.map {
            Map::Dense(v) => Map::Dense(v.detach()),
            Map::Affine(v) => Map::Affine(v.detach()),
        };
        Deformation { map, mask: self.mask.clone() }
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        let (h, w) = self.extent();
        mask.check_extent(h, w)?;
        self.mask = mask;
        Ok(self)
    }
}

/// `p -> inner(outer(p))`.
///
/// Affine inner maps are evaluated in closed form. A dense inner map is
/// interpolated and extended past its border by its border displacement; the
/// result stays valid where `outer` is valid and every in-bounds interpolation
/// corner of `inner` is valid.
pub fn compose<'t>(outer: &Deformation<'t>, inner: &Deformation<'t>) -> Result<Deformation<'t>> {
    let (h, w) = outer.extent();
    inner.mask.check_extent(h, w)?;
    let map = match (outer.map, inner.map) {
        (Map::Affine(a), Map::Affine(b)) => Map::Affine(a.affine_compose(b)?),
        (Map::Dense(o), Map::Affine(b)) => Map::Dense(b.affine_apply(o)?),
        (_, Map::Dense(i)) => Map::Dense(i.bilinear_sample(outer.coords()?, Fill::Extend)?),
    };
    let mask = if inner.mask.is_full() {
        outer.mask.clone()
    } else {
        outer.mask.and(&inner.mask.resample(&outer.coords()?.value(), false)?)?
    };
    Ok(Deformation { map, mask })
}

/// Pullback `img o d`: bilinear samples of `img` at the coordinates of `d`.
///
/// The output mask is `d.mask` restricted to pixels whose positively weighted
/// corners all land inside `img` on valid pixels.
pub fn warp<'t>(img: &Image<'t>, d: &Deformation<'t>) -> Result<Image<'t>> {
    if img.extent() != d.extent() {
        let ((a, b), (c, e)) = (img.extent(), d.extent());
        return Err(Error::Shape(format!("image {a}x{b} warped by deformation {c}x{e}")));
    }
    let coords = d.coords()?;
    let data = img.data.bilinear_sample(coords, Fill::Zero)?;
    let mask = d.mask.and(&img.mask.resample_strict(&coords.value())?)?;
    Ok(Image { data, mask })
}
