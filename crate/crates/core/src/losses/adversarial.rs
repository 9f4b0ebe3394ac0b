use std::str::FromStr;

use crate::deform::{compose, warp, Deformation, Image};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Discriminator probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AdvMode {
    /// Conditional, with inputs and registered images all moved by the augmentation transform.
    EqAdv,
    /// Conditional on the unmodified input, comparing raw labels and predictions.
    DefCondAdv,
    /// Raw labels against predictions, no input.
    DefUncondAdv,
}

impl FromStr for AdvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EqAdv" => Ok(AdvMode::EqAdv),
            "DefCondAdv" => Ok(AdvMode::DefCondAdv),
            "DefUncondAdv" => Ok(AdvMode::DefUncondAdv),
            _ => Err(Error::Config(format!("unknown adversarial mode `{s}`"))),
        }
    }
}

impl AdvMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdvMode::EqAdv => "EqAdv",
            AdvMode::DefCondAdv => "DefCondAdv",
            AdvMode::DefUncondAdv => "DefUncondAdv",
        }
    }

    pub fn conditional(&self) -> bool {
        !matches!(self, AdvMode::DefUncondAdv)
    }
}

/// What the discriminator sees for one sample.
#[derive(Clone, Debug)]
pub struct AdvInputs<'t> {
    /// `None` for the unconditional mode.
    pub input: Option<Image<'t>>,
    pub real: Image<'t>,
    pub fake: Image<'t>,
}

/// Builds the discriminator inputs of `mode`.
///
/// For [`AdvMode::EqAdv`] the real pair is `(t* x, (t* d_cross)* y~)` with the
/// cross-modality deformation detached, and the fake pair is
/// `(t* x, (t* d_intra* t^-1)* F(t* x))`.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_inputs<'t>(
    mode: AdvMode,
    x: &Image<'t>,
    y_tilde: &Image<'t>,
    f_x: &Image<'t>,
    f_tx: &Image<'t>,
    d_cross: &Deformation<'t>,
    d_intra: &Deformation<'t>,
    t: &Deformation<'t>,
    t_inv: &Deformation<'t>,
) -> Result<AdvInputs<'t>> {
    match mode {
        AdvMode::EqAdv => {
            let real = warp(y_tilde, &compose(t, &d_cross.detach())?)?;
            let fake = warp(f_tx, &compose(t, &compose(d_intra, t_inv)?)?)?;
            Ok(AdvInputs { input: Some(warp(x, t)?), real, fake })
        }
        AdvMode::DefCondAdv => Ok(AdvInputs { input: Some(x.clone()), real: y_tilde.clone(), fake: f_x.clone() }),
        AdvMode::DefUncondAdv => Ok(AdvInputs { input: None, real: y_tilde.clone(), fake: f_x.clone() }),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdvLosses<'t> {
    /// `-[log D(real) + log(1 - D(fake))]` with the fake branch detached.
    pub d_loss: Var<'t>,
    /// `log(1 - D(fake))`, or `-log D(fake)` when non-saturating.
    pub g_loss: Var<'t>,
}

/// Images are multiplied by the intersection of all masks involved before
/// being concatenated over channels and passed to `disc`, which returns a logit.
pub fn adversarial_losses<'t>(
    disc: impl Fn(Var<'t>) -> Result<Var<'t>>,
    inputs: &AdvInputs<'t>,
    non_saturating: bool,
) -> Result<AdvLosses<'t>> {
    let mut mask = inputs.real.mask.and(&inputs.fake.mask)?;
    if let Some(x) = &inputs.input {
        mask = mask.and(&x.mask)?;
    }
    let tape = inputs.real.data.tape();
    let masked = |img: &Image<'t>| -> Result<Var<'t>> {
        let c = img.data.shape()[0];
        let (h, w) = img.extent();
        let m = Tensor::from_fn(&[c, h, w], |i| if mask.as_slice()[i % (h * w)] { 1.0 } else { 0.0 });
        img.data.mul(tape.constant(m))
    };
    let cond = inputs.input.as_ref().map(&masked).transpose()?;
    let pair = |sample: Var<'t>| -> Result<Var<'t>> {
        match cond {
            Some(x) => Var::concat(&[x, sample]),
            None => Ok(sample),
        }
    };
    let prob = |v: Var<'t>| -> Result<Var<'t>> { Ok(disc(v)?.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS).sum()) };

    let real = masked(&inputs.real)?;
    let fake = masked(&inputs.fake)?;
    let p_real = prob(pair(real.detach())?)?;
    let p_fake_d = prob(pair(fake.detach())?)?;
    let d_loss = p_real.log().add(p_fake_d.neg().offset(1.0).log())?.neg();
    let p_fake = prob(pair(fake)?)?;
    let g_loss = if non_saturating { p_fake.log().neg() } else { p_fake.neg().offset(1.0).log() };
    Ok(AdvLosses { d_loss, g_loss })
}
