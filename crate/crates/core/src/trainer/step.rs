use rand::Rng;

use super::config::TrainConfig;
use super::pair::Pair;
use crate::deform::{
    compose, identity_map, rigid_to_deformation, sample_equivariance_transform, svf_exp, warp, Deformation,
    EquivarianceConfig, EquivarianceTransform, Image, Mask, Svf,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_inputs, adversarial_losses, commutation_loss, cross_deformation, elastic_cross_sim, masked_l1,
    reg_cross, reg_intra, rigid_cross_sim, similarity_default, similarity_equivariance, total_loss, AdvMode,
    LossReport, LossTerms, Similarity,
};
use crate::networks::{rigid_head, Bound, ModelBundle, NetworkId};
use crate::tensor::{Adam, Tape, Tensor, Var};

/// Randomness of one step, drawn before any graph is built.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    /// Equivariance probe `t` for the similarity, commutation and adversarial terms.
    pub transform: Option<EquivarianceTransform>,
    /// Input augmentation applied to both images of the pair.
    pub augment: Option<EquivarianceTransform>,
    /// Additive input noise, network units.
    pub noise: Option<Tensor>,
}

impl StepDraws {
    pub fn none() -> Self {
        StepDraws { transform: None, augment: None, noise: None }
    }

    /// Draws in a fixed order: augmentation, probe, noise.
    pub fn sample<R: Rng>(cfg: &TrainConfig, pair: &Pair, rng: &mut R) -> Self {
        let extent = pair.extent();
        let eq = EquivarianceConfig { max_angle_deg: cfg.transform_max_angle_deg, ..Default::default() };
        let obj = &cfg.objective;
        let augment = obj.augment.then(|| sample_equivariance_transform(rng, &eq, extent));
        let probe = obj.similarity == Similarity::Eq || obj.commutation || obj.adversarial == Some(AdvMode::EqAdv);
        let transform = probe.then(|| sample_equivariance_transform(rng, &eq, extent));
        let noise =
            (cfg.noise > 0.0).then(|| Tensor::from_fn(pair.x.shape(), |_| rng.gen_range(-cfg.noise..=cfg.noise)));
        StepDraws { transform, augment, noise }
    }
}

/// Parameters of a bundle placed on one tape.
pub struct Nets<'t> {
    bound: Vec<(NetworkId, Bound<'t>)>,
}

impl<'t> Nets<'t> {
    /// Binds every network; `trainable` decides which become leaves.
    pub fn bind(bundle: &ModelBundle, tape: &'t Tape, trainable: impl Fn(NetworkId) -> bool) -> Self {
        let bound = bundle
            .ids()
            .into_iter()
            .map(|id| {
                let b = match id {
                    NetworkId::F => bundle.f.bind(tape, trainable(id)),
                    NetworkId::HRig => bundle.h_rig.as_ref().expect("listed").bind(tape, trainable(id)),
                    NetworkId::HSvf => bundle.h_svf.as_ref().expect("listed").bind(tape, trainable(id)),
                    NetworkId::GSvf => bundle.g_svf.as_ref().expect("listed").bind(tape, trainable(id)),
                    NetworkId::D => bundle.d.as_ref().expect("listed").bind(tape, trainable(id)),
                };
                (id, b)
            })
            .collect();
        Nets { bound }
    }

    pub fn get(&self, id: NetworkId) -> Result<&Bound<'t>> {
        self.bound
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::InvalidArgument(format!("bundle has no {id} network")))
    }

    /// Gradients of every network, zeros where none arrived.
    pub fn grads(&self) -> Vec<(NetworkId, Vec<Tensor>)> {
        self.bound.iter().map(|(id, b)| (*id, b.grads())).collect()
    }
}

/// Cross- and intra-modality registration of one pair.
pub struct Registration<'t> {
    /// `[angle, dy, dx]`.
    pub rigid: Var<'t>,
    pub r: Deformation<'t>,
    pub v_cross: Svf<'t>,
    pub d_cross: Deformation<'t>,
    /// Label pulled back by the detached cross-modality deformation.
    pub y_reg: Image<'t>,
    pub v_intra: Svf<'t>,
    pub d_intra: Deformation<'t>,
}

fn mask_var<'t>(tape: &'t Tape, m: &Mask) -> Var<'t> {
    tape.constant(m.to_tensor())
}

/// `F(x)`, valid where `x` is.
pub fn synthesize<'t>(bundle: &ModelBundle, nets: &Nets<'t>, x: &Image<'t>) -> Result<Image<'t>> {
    Image::new(bundle.f.forward(nets.get(NetworkId::F)?, x.data)?, x.mask.clone())
}

pub fn register<'t>(
    bundle: &ModelBundle,
    nets: &Nets<'t>,
    x: &Image<'t>,
    y: &Image<'t>,
    f_x: &Image<'t>,
) -> Result<Registration<'t>> {
    let missing = || Error::InvalidArgument("bundle has no registration networks".into());
    let (h_rig, h_svf, g_svf) = match (&bundle.h_rig, &bundle.h_svf, &bundle.g_svf) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(missing()),
    };
    let tape = x.data.tape();
    let (h, w) = x.extent();
    let cross_in = Var::concat(&[x.data, y.data, mask_var(tape, &x.mask), mask_var(tape, &y.mask)])?;
    let max_shift = bundle.spec.max_shift_fraction * h.min(w) as f64;
    let rigid = rigid_head(h_rig.forward(nets.get(NetworkId::HRig)?, cross_in)?, bundle.spec.max_angle, max_shift)?;
    let r = rigid_to_deformation(rigid, h, w)?;

    let y_rig = warp(y, &r.detach())?;
    let svf_in = Var::concat(&[x.data, y_rig.data, mask_var(tape, &x.mask), mask_var(tape, &y_rig.mask)])?;
    let v_cross = Svf::new(h_svf.forward(nets.get(NetworkId::HSvf)?, svf_in)?)?;
    let d_cross = cross_deformation(&r, &v_cross)?;
    let y_reg = warp(y, &d_cross.detach())?.detach();

    let inverse_elastic = svf_exp(&v_cross.detach().neg())?.displacement()?;
    let intra_in =
        Var::concat(&[f_x.data, y_reg.data, inverse_elastic, mask_var(tape, &f_x.mask), mask_var(tape, &y_reg.mask)])?;
    let v_intra = Svf::new(g_svf.forward(nets.get(NetworkId::GSvf)?, intra_in)?)?;
    let d_intra = svf_exp(&v_intra.neg())?;
    Ok(Registration { rigid, r, v_cross, d_cross, y_reg, v_intra, d_intra })
}

/// Input and label after augmentation and input noise.
fn prepared_inputs<'t>(tape: &'t Tape, pair: &Pair, draws: &StepDraws) -> Result<(Image<'t>, Image<'t>)> {
    let (h, w) = pair.extent();
    let xt = match &draws.noise {
        Some(n) => pair.x.data().iter().zip(n.data()).map(|(a, b)| a + b).collect(),
        None => pair.x.data().to_vec(),
    };
    let x = Image::new(tape.constant(Tensor::new(pair.x.shape().to_vec(), xt)?), pair.x_mask.clone())?;
    let y = Image::new(tape.constant(pair.y.clone()), pair.y_mask.clone())?;
    match &draws.augment {
        Some(a) => {
            let d = Deformation::from_affine(tape, &a.forward, h, w);
            Ok((warp(&x, &d)?, warp(&y, &d)?))
        }
        None => Ok((x, y)),
    }
}

/// Everything one step needs from the forward pass.
pub struct StepGraph<'t> {
    pub terms: LossTerms<'t>,
    /// Discriminator loss; present for adversarial objectives.
    pub d_loss: Option<Var<'t>>,
    pub f_x: Image<'t>,
    pub registration: Option<Registration<'t>>,
}

/// Builds the loss graph of one step. With `generator_terms` false only the
/// pieces the discriminator needs are built.
pub fn build_step<'t>(
    bundle: &ModelBundle,
    nets: &Nets<'t>,
    tape: &'t Tape,
    pair: &Pair,
    cfg: &TrainConfig,
    draws: &StepDraws,
    generator_terms: bool,
) -> Result<StepGraph<'t>> {
    let obj = cfg.objective;
    if obj.registration() != bundle.spec.registration || obj.adversarial != bundle.spec.adversarial {
        return Err(Error::Config(format!("objective {obj} does not match the model bundle")));
    }
    let (h, w) = pair.extent();
    let (x, y) = prepared_inputs(tape, pair, draws)?;
    let f_x = synthesize(bundle, nets, &x)?;
    let needs_probe = obj.similarity == Similarity::Eq || obj.commutation || obj.adversarial == Some(AdvMode::EqAdv);
    let probe = match (&draws.transform, needs_probe) {
        (Some(t), true) => {
            let (fwd, inv) =
                (Deformation::from_affine(tape, &t.forward, h, w), Deformation::from_affine(tape, &t.inverse, h, w));
            let f_tx = synthesize(bundle, nets, &warp(&x, &fwd)?)?;
            Some((fwd, inv, f_tx))
        }
        (None, true) => return Err(Error::InvalidArgument(format!("objective {obj} needs an equivariance transform"))),
        _ => None,
    };
    let registration = if obj.registration() { Some(register(bundle, nets, &x, &y, &f_x)?) } else { None };

    let mut terms = LossTerms::default();
    if generator_terms {
        let rig = &cfg.weights.rigidity;
        match &registration {
            None => terms.sim = Some(masked_l1(&f_x, &y.detach())?.value),
            Some(g) => {
                terms.rig_sim = Some(rigid_cross_sim(&f_x, &y, &g.r)?.value);
                terms.cross_sim = Some(elastic_cross_sim(&f_x, &y, &g.d_cross)?.value);
                terms.cross_reg = Some(reg_cross(&g.v_cross, rig)?);
                let intra = match (&obj.similarity, &probe) {
                    (Similarity::Eq, Some((_, inv, f_tx))) => similarity_equivariance(f_tx, &g.y_reg, &g.d_intra, inv)?,
                    _ => similarity_default(&f_x, &g.y_reg, &g.d_intra)?,
                };
                terms.intra_sim = Some(intra.value);
                terms.intra_reg = Some(reg_intra(&g.v_intra, &g.v_cross, rig)?);
            }
        }
        if let (true, Some((fwd, _, f_tx))) = (obj.commutation, &probe) {
            terms.com = Some(commutation_loss(&f_x, f_tx, fwd)?.value);
        }
    }

    let mut d_loss = None;
    if let Some(mode) = obj.adversarial {
        let disc = bundle
            .d
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("adversarial objective without a discriminator".into()))?;
        let d_bound = nets.get(NetworkId::D)?;
        let identity = identity_map(tape, h, w);
        let (d_cross, d_intra) = match &registration {
            Some(g) => (g.d_cross.clone(), g.d_intra.clone()),
            None => (identity.clone(), identity.clone()),
        };
        let (t, t_inv, f_tx) = match &probe {
            Some((a, b, c)) => (a.clone(), b.clone(), c.clone()),
            None => (identity.clone(), identity, f_x.clone()),
        };
        let inputs = adversarial_inputs(mode, &x, &y, &f_x, &f_tx, &d_cross, &d_intra, &t, &t_inv)?;
        let adv = adversarial_losses(|v| disc.forward(d_bound, v), &inputs, cfg.non_saturating)?;
        if generator_terms {
            terms.adv = Some(adv.g_loss);
        }
        d_loss = Some(adv.d_loss);
    }
    Ok(StepGraph { terms, d_loss, f_x, registration })
}

/// Adam optimizers: one per generator-side network at the main rate, one for `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub main: Vec<(NetworkId, Adam)>,
    pub disc: Option<Adam>,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, cfg: &TrainConfig) -> Self {
        let main = bundle
            .ids()
            .into_iter()
            .filter(|&id| id != NetworkId::D)
            .map(|id| (id, Adam::new(cfg.lr_main, bundle.params(id).expect("listed").tensors())))
            .collect();
        let disc = bundle.d.as_ref().map(|d| Adam::new(cfg.lr_disc, d.params.tensors()));
        Optimizers { main, disc }
    }
}

fn check_grads(grads: &[(NetworkId, Vec<Tensor>)]) -> Result<()> {
    for (id, gs) in grads {
        if gs.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {id}")));
        }
    }
    Ok(())
}

/// One generator-side update: a single backward of the weighted total and an
/// Adam step on every network except `D`, which is bound as a constant.
pub fn generator_step(
    bundle: &mut ModelBundle,
    opt: &mut Optimizers,
    pair: &Pair,
    cfg: &TrainConfig,
    draws: &StepDraws,
) -> Result<LossReport> {
    let tape = Tape::new();
    let (report, grads) = {
        let nets = Nets::bind(bundle, &tape, |id| id != NetworkId::D);
        let graph = build_step(bundle, &nets, &tape, pair, cfg, draws, true)?;
        let (total, report) = total_loss(&graph.terms, &cfg.weights, &cfg.objective)?;
        tape.backward(total)?;
        (report, nets.grads())
    };
    check_grads(&grads)?;
    for (id, adam) in &mut opt.main {
        let (_, g) = grads.iter().find(|(i, _)| i == id).expect("bound network");
        adam.step(bundle.params_mut(*id).expect("listed").tensors_mut(), g)?;
    }
    Ok(report)
}

/// One discriminator update on detached generator outputs, followed by a
/// power iteration of its spectral normalization.
pub fn discriminator_step(
    bundle: &mut ModelBundle,
    opt: &mut Optimizers,
    pair: &Pair,
    cfg: &TrainConfig,
    draws: &StepDraws,
) -> Result<f64> {
    let tape = Tape::new();
    let (value, grads) = {
        let nets = Nets::bind(bundle, &tape, |id| id == NetworkId::D);
        let graph = build_step(bundle, &nets, &tape, pair, cfg, draws, false)?;
        let d_loss = graph
            .d_loss
            .ok_or_else(|| Error::InvalidArgument(format!("objective {} has no discriminator", cfg.objective)))?;
        let value = d_loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {value}")));
        }
        tape.backward(d_loss)?;
        (value, nets.get(NetworkId::D)?.grads())
    };
    check_grads(&[(NetworkId::D, grads.clone())])?;
    let adam = opt.disc.as_mut().ok_or_else(|| Error::InvalidArgument("no discriminator optimizer".into()))?;
    let d = bundle.d.as_mut().expect("optimizer implies a discriminator");
    adam.step(d.params.tensors_mut(), &grads)?;
    d.power_iteration()?;
    Ok(value)
}

/// Network outputs for one pair, without gradients.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Network units.
    pub f_x: Tensor,
    pub mask: Mask,
    /// Coordinate maps `[2,H,W]`; absent without registration.
    pub d_cross: Option<Tensor>,
    pub d_intra: Option<Tensor>,
    /// Label-to-input map `p -> d_cross(exp(v_intra)(p))`, compared against the true deformation.
    pub overall: Option<Tensor>,
    pub rigid: Option<[f64; 3]>,
    /// Validation `L1` of this pair; `None` when no pixel was comparable.
    pub score: Option<f64>,
}

pub fn predict(bundle: &ModelBundle, pair: &Pair) -> Result<Prediction> {
    let tape = Tape::new();
    let nets = Nets::bind(bundle, &tape, |_| false);
    let x = Image::new(tape.constant(pair.x.clone()), pair.x_mask.clone())?;
    let y = Image::new(tape.constant(pair.y.clone()), pair.y_mask.clone())?;
    let f_x = synthesize(bundle, &nets, &x)?;
    let mut out = Prediction {
        f_x: (*f_x.data.value()).clone(),
        mask: f_x.mask.clone(),
        d_cross: None,
        d_intra: None,
        overall: None,
        rigid: None,
        score: None,
    };
    let score = if bundle.spec.registration {
        let g = register(bundle, &nets, &x, &y, &f_x)?;
        let overall = compose(&svf_exp(&g.v_intra)?, &g.d_cross)?;
        out.d_cross = Some((*g.d_cross.coords()?.value()).clone());
        out.d_intra = Some((*g.d_intra.coords()?.value()).clone());
        out.overall = Some((*overall.coords()?.value()).clone());
        let r = g.rigid.value();
        out.rigid = Some([r.data()[0], r.data()[1], r.data()[2]]);
        masked_l1(&warp(&f_x, &g.d_intra)?, &warp(&y, &g.d_cross)?)?
    } else {
        masked_l1(&f_x, &y)?
    };
    out.score = (!score.empty).then(|| score.value.item());
    Ok(out)
}

/// Mean validation `L1` over `pairs`: prediction against registered label with
/// registration, prediction against label without it.
pub fn validation_score(bundle: &ModelBundle, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let scores = pairs.iter().map(|p| predict(bundle, p).map(|q| q.score)).collect::<Result<Vec<_>>>()?;
    let valid: Vec<f64> = scores.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::EmptyMask("no validation pair had comparable pixels".into()));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Pixels whose true source coordinate lies on the grid.
pub fn truth_mask(d_true: &Tensor) -> Result<Mask> {
    let (_, h, w) = d_true.chw()?;
    let p = h * w;
    let (hi_r, hi_c) = ((h - 1) as f64, (w - 1) as f64);
    Ok(Mask::from_fn(h, w, |r, c| {
        let q = r * w + c;
        let (a, b) = (d_true.data()[q], d_true.data()[p + q]);
        (0.0..=hi_r).contains(&a) && (0.0..=hi_c).contains(&b)
    }))
}
