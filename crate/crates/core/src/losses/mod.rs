//! Training objectives for synthesis and registration.
//!
//! Which sub-network a term trains is decided by where the inputs are
//! detached, never by filtering parameters: every function here detaches
//! exactly the inputs its term must not update.

mod adversarial;
mod objective;
mod rigidity;

pub use adversarial::{adversarial_inputs, adversarial_losses, AdvInputs, AdvLosses, AdvMode, PROB_EPS};
pub use objective::{total_loss, LossReport, LossTerms, LossWeights, Objective, Similarity};
pub use rigidity::{nonrigidity, reg_cross, reg_intra, NonRigidity, RigidityWeights};

use crate::deform::{compose, svf_exp, warp, Deformation, Image, Mask, Svf};
use crate::error::{shape_err, Result};
use crate::tensor::{Tensor, Var};

/// Scalar loss plus a flag raised when no pixel was comparable.
#[derive(Clone, Copy, Debug)]
pub struct Masked<'t> {
    pub value: Var<'t>,
    pub empty: bool,
}

/// Mean of `field: [C,H,W]` over the pixels where `valid` holds; zero when none do.
pub(crate) fn masked_mean<'t>(field: Var<'t>, valid: &[bool]) -> Result<Masked<'t>> {
    let v = field.value();
    let (c, h, w) = v.chw()?;
    if valid.len() != h * w {
        return shape_err(format!("mask of {} pixels for a {h}x{w} field", valid.len()));
    }
    let count = valid.iter().filter(|&&b| b).count();
    let weight = Tensor::from_fn(&[c, h, w], |i| if valid[i % (h * w)] { 1.0 } else { 0.0 });
    let sum = field.mul(field.tape().constant(weight))?.sum();
    Ok(Masked { value: sum.scale(1.0 / (c * count.max(1)) as f64), empty: count == 0 })
}

/// Mean absolute difference over the intersection of both masks.
pub fn masked_l1<'t>(a: &Image<'t>, b: &Image<'t>) -> Result<Masked<'t>> {
    let both: Mask = a.mask.and(&b.mask)?;
    if a.data.shape() != b.data.shape() {
        return shape_err(format!("l1 between {:?} and {:?}", a.data.shape(), b.data.shape()));
    }
    masked_mean(a.data.sub(b.data)?.abs(), both.as_slice())
}

/// `|d* F(x) - y_ref|` with the reference detached.
pub fn similarity_default<'t>(f_x: &Image<'t>, y_ref: &Image<'t>, d: &Deformation<'t>) -> Result<Masked<'t>> {
    masked_l1(&warp(f_x, d)?, &y_ref.detach())
}

/// `|(d* t^-1)* F(t* x) - y_ref|`: the two deformations are composed before the
/// single resampling of `F(t* x)`.
pub fn similarity_equivariance<'t>(
    f_tx: &Image<'t>,
    y_ref: &Image<'t>,
    d: &Deformation<'t>,
    t_inv: &Deformation<'t>,
) -> Result<Masked<'t>> {
    masked_l1(&warp(f_tx, &compose(d, t_inv)?)?, &y_ref.detach())
}

/// `|t* F(x) - F(t* x)|` from the two network outputs; gradients reach both.
pub fn commutation_loss<'t>(f_x: &Image<'t>, f_tx: &Image<'t>, t: &Deformation<'t>) -> Result<Masked<'t>> {
    masked_l1(&warp(f_x, t)?, f_tx)
}

/// Commutation loss of a network `f` at `x`.
pub fn commutation_loss_of<'t>(
    f: impl Fn(&Image<'t>) -> Result<Image<'t>>,
    x: &Image<'t>,
    t: &Deformation<'t>,
) -> Result<Masked<'t>> {
    commutation_loss(&f(x)?, &f(&warp(x, t)?)?, t)
}

/// `|F(x) - r* y~|` with `F(x)` detached, so only the rigid map is trained.
pub fn rigid_cross_sim<'t>(f_x: &Image<'t>, y_tilde: &Image<'t>, r: &Deformation<'t>) -> Result<Masked<'t>> {
    masked_l1(&f_x.detach(), &warp(y_tilde, r)?)
}

/// `p -> r(exp(v)(p))`: the label is rigidly aligned and then elastically refined.
/// The rigid part is detached.
pub fn cross_deformation<'t>(r: &Deformation<'t>, v_cross: &Svf<'t>) -> Result<Deformation<'t>> {
    compose(&svf_exp(v_cross)?, &r.detach())
}

/// `|F(x) - d_cross* y~|` with `F(x)` detached.
pub fn elastic_cross_sim<'t>(f_x: &Image<'t>, y_tilde: &Image<'t>, d_cross: &Deformation<'t>) -> Result<Masked<'t>> {
    masked_l1(&f_x.detach(), &warp(y_tilde, d_cross)?)
}
