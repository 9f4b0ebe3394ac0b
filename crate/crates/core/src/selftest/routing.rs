//! Which networks each loss term reaches through backpropagation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{make_pair, procedural_image, LoadedSample};
use crate::deform::{Preset, SimDeformParams};
use crate::error::{Error, Result};
use crate::losses::{AdvMode, Objective};
use crate::networks::{ModelBundle, NetworkId};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{build_step, Nets, Pair, StepDraws, TrainConfig, Trainer};

/// Configurations covered by the routing suite.
pub const ROUTING_CONFIGS: [&str; 12] = [
    "EqSim+Com",
    "DefSim+Com",
    "EqSim",
    "DefSim",
    "DefSim+Aug",
    "NoReg+Aug",
    "EqSim+Com+EqAdv",
    "DefSim+Com+EqAdv",
    "EqSim+EqAdv",
    "DefSim+DefUncondAdv",
    "DefSim+DefUncondAdv+Aug",
    "NoReg+DefCondAdv+Aug",
];

/// Networks a term is allowed to update.
pub fn allowed(term: &str) -> Result<BTreeSet<NetworkId>> {
    use NetworkId::*;
    let ids: &[NetworkId] = match term {
        "sim" => &[F],
        "rig_sim" => &[HRig],
        "cross_sim" | "cross_reg" => &[HSvf],
        "intra_sim" | "intra_reg" | "com" => &[GSvf, F],
        "adv" => &[GSvf, F, D],
        "d_loss" => &[D],
        _ => return Err(Error::InvalidArgument(format!("unknown loss term `{term}`"))),
    };
    Ok(ids.iter().copied().collect())
}

/// Networks a term actually depends on under `objective`; always a subset of [`allowed`].
pub fn expected(term: &str, objective: &Objective) -> Result<BTreeSet<NetworkId>> {
    use NetworkId::*;
    let ids: &[NetworkId] = match term {
        "com" => &[F],
        "adv" if objective.adversarial == Some(AdvMode::EqAdv) => &[GSvf, F, D],
        "adv" => &[F, D],
        _ => return allowed(term),
    };
    Ok(ids.iter().copied().collect())
}

/// Outcome of one backward pass of one term.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteCheck {
    pub config: String,
    pub term: String,
    pub reached: BTreeSet<NetworkId>,
    pub expected: BTreeSet<NetworkId>,
    pub allowed: BTreeSet<NetworkId>,
}

impl RouteCheck {
    /// Every network outside the allowed set got exactly zero gradient and
    /// every expected network got some.
    pub fn passed(&self) -> bool {
        self.reached.is_subset(&self.allowed) && self.reached == self.expected
    }
}

/// Replaces zero-initialized output heads with small random weights, so that
/// gradients can pass through them.
pub fn wake_heads(bundle: &mut ModelBundle, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in bundle.ids() {
        let p = bundle.params_mut(id).ok_or_else(|| Error::InvalidArgument(format!("no {id} network")))?;
        let names = p.names().to_vec();
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            if name.starts_with("head.") && t.max_abs() == 0.0 {
                *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.05..0.05));
            }
        }
    }
    Ok(())
}

/// A 32x32 pair under large random deformation.
pub fn routing_pair(seed: u64) -> Result<Pair> {
    let n = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = make_pair(
        procedural_image(&mut rng, n, n)?,
        &SimDeformParams::preset_for_size(Preset::LargeRandom, n),
        &mut rng,
    )?;
    Ok(Pair::from_sample(&LoadedSample {
        x: s.x,
        y_tilde: s.y_tilde,
        y_mask: s.y_mask,
        y_true: s.y_true,
        d_true: s.deformation.inverse,
    }))
}

/// Backpropagates every generator term and the discriminator loss of `config`
/// separately, with every network trainable, and records which received gradient.
pub fn route_config(config: &str, pair: &Pair, seed: u64) -> Result<Vec<RouteCheck>> {
    let cfg = TrainConfig::parse(&format!(
        "objective = {config}\nunet_features = 4,8\nencoder_features = 4,8\nseed = {seed}"
    ))?;
    let mut trainer = Trainer::new(cfg.clone(), pair.x.shape()[0], pair.y.shape()[0])?;
    wake_heads(&mut trainer.bundle, seed)?;
    let bundle = &trainer.bundle;
    let draws = StepDraws::sample(&cfg, pair, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut terms: Vec<&str> = cfg.objective.required_terms();
    if cfg.objective.adversarial.is_some() {
        terms.push("d_loss");
    }
    terms
        .into_iter()
        .map(|term| {
            let tape = Tape::new();
            let nets = Nets::bind(bundle, &tape, |_| true);
            let graph = build_step(bundle, &nets, &tape, pair, &cfg, &draws, true)?;
            let t = &graph.terms;
            let var = match term {
                "sim" => t.sim,
                "rig_sim" => t.rig_sim,
                "cross_sim" => t.cross_sim,
                "cross_reg" => t.cross_reg,
                "intra_sim" => t.intra_sim,
                "intra_reg" => t.intra_reg,
                "com" => t.com,
                "adv" => t.adv,
                _ => graph.d_loss,
            }
            .ok_or_else(|| Error::InvalidArgument(format!("{config} built no `{term}` term")))?;
            tape.backward(var)?;
            let reached = bundle.ids().into_iter().filter(|&id| nets.get(id).is_ok_and(|b| b.has_grad())).collect();
            Ok(RouteCheck {
                config: config.to_string(),
                term: term.to_string(),
                reached,
                expected: expected(term, &cfg.objective)?,
                allowed: allowed(term)?,
            })
        })
        .collect()
}

/// [`route_config`] over every entry of [`ROUTING_CONFIGS`].
pub fn routing_suite(seed: u64) -> Result<Vec<RouteCheck>> {
    let pair = routing_pair(seed)?;
    let mut out = Vec::new();
    for config in ROUTING_CONFIGS {
        out.extend(route_config(config, &pair, seed)?);
    }
    Ok(out)
}
