use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{AdvMode, RigidityWeights};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// How the prediction is compared with the registered label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Similarity {
    /// Through the augmentation transform and its inverse.
    Eq,
    /// Directly, after intra-modality registration.
    Def,
    /// Plain L1 against the unregistered label; no registration networks.
    NoReg,
}

/// A training configuration such as `EqSim+Com+EqAdv` or `NoReg+Aug`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Objective {
    pub similarity: Similarity,
    pub commutation: bool,
    pub adversarial: Option<AdvMode>,
    /// Input augmentation with the equivariance transform distribution.
    pub augment: bool,
}

impl Objective {
    pub fn registration(&self) -> bool {
        self.similarity != Similarity::NoReg
    }

    /// Whether the equivariance transform has to be sampled at every step.
    pub fn uses_transform(&self) -> bool {
        self.similarity == Similarity::Eq
            || self.commutation
            || self.augment
            || self.adversarial == Some(AdvMode::EqAdv)
    }

    /// Names of the terms [`total_loss`] requires.
    pub fn required_terms(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.registration() {
            names.extend(["rig_sim", "cross_sim", "cross_reg", "intra_sim", "intra_reg"]);
        } else {
            names.push("sim");
        }
        if self.commutation {
            names.push("com");
        }
        if self.adversarial.is_some() {
            names.push("adv");
        }
        names
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut similarity = None;
        let (mut commutation, mut augment, mut adversarial) = (false, false, None);
        for token in s.split('+').map(str::trim) {
            let dup = || Error::Config(format!("`{token}` repeated or conflicting in `{s}`"));
            match token {
                "EqSim" | "DefSim" | "NoReg" => {
                    if similarity.is_some() {
                        return Err(dup());
                    }
                    similarity = Some(match token {
                        "EqSim" => Similarity::Eq,
                        "DefSim" => Similarity::Def,
                        _ => Similarity::NoReg,
                    });
                }
                "Com" if !commutation => commutation = true,
                "Aug" if !augment => augment = true,
                "EqAdv" | "DefCondAdv" | "DefUncondAdv" if adversarial.is_none() => adversarial = Some(token.parse()?),
                "Com" | "Aug" | "EqAdv" | "DefCondAdv" | "DefUncondAdv" => return Err(dup()),
                _ => return Err(Error::Config(format!("unknown objective component `{token}` in `{s}`"))),
            }
        }
        let similarity =
            similarity.ok_or_else(|| Error::Config(format!("`{s}` names no similarity (EqSim, DefSim or NoReg)")))?;
        if similarity == Similarity::NoReg && adversarial == Some(AdvMode::EqAdv) {
            return Err(Error::Config(
                "EqAdv needs the registration networks and cannot be combined with NoReg".into(),
            ));
        }
        Ok(Objective { similarity, commutation, adversarial, augment })
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec![match self.similarity {
            Similarity::Eq => "EqSim",
            Similarity::Def => "DefSim",
            Similarity::NoReg => "NoReg",
        }];
        if self.commutation {
            parts.push("Com");
        }
        if let Some(a) = self.adversarial {
            parts.push(a.name());
        }
        if self.augment {
            parts.push("Aug");
        }
        f.write_str(&parts.join("+"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Every similarity term, registration similarities included.
    pub sim: f64,
    pub com: f64,
    pub adv: f64,
    /// Both deformation regularizers.
    pub reg: f64,
    pub rigidity: RigidityWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sim: 1.0, com: 1.0, adv: 1e-4, reg: 1.0, rigidity: RigidityWeights::default() }
    }
}

impl LossWeights {
    /// Weights of the synthetic experiment, which regularizes ten times less.
    pub fn synthetic() -> Self {
        LossWeights { reg: 0.1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rigidity;
        let all = [self.sim, self.com, self.adv, self.reg, r.affinity, r.orthogonality, r.properness];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if !(r.spacing > 0.0) {
            return Err(Error::Config(format!("pixel spacing must be positive, got {}", r.spacing)));
        }
        Ok(())
    }
}

/// Unweighted generator-side terms of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms<'t> {
    /// Plain L1 of the registration-free baseline.
    pub sim: Option<Var<'t>>,
    pub rig_sim: Option<Var<'t>>,
    pub cross_sim: Option<Var<'t>>,
    pub cross_reg: Option<Var<'t>>,
    pub intra_sim: Option<Var<'t>>,
    pub intra_reg: Option<Var<'t>>,
    pub com: Option<Var<'t>>,
    /// Generator side of the adversarial loss.
    pub adv: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    fn named(&self) -> [(&'static str, Option<Var<'t>>); 8] {
        [
            ("sim", self.sim),
            ("rig_sim", self.rig_sim),
            ("cross_sim", self.cross_sim),
            ("cross_reg", self.cross_reg),
            ("intra_sim", self.intra_sim),
            ("intra_reg", self.intra_reg),
            ("com", self.com),
            ("adv", self.adv),
        ]
    }
}

/// Per-term values and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// Flat JSON object: every term, then `total`.
    pub fn to_json(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut map: serde_json::Map<_, _> = self.terms.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
        map.insert("total".into(), self.total.into());
        map
    }
}

fn weight_of(name: &str, w: &LossWeights) -> f64 {
    match name {
        "cross_reg" | "intra_reg" => w.reg,
        "com" => w.com,
        "adv" => w.adv,
        _ => w.sim,
    }
}

/// Weighted sum of the terms `objective` requires. Terms it does not use are
/// ignored; a missing required term is an error.
pub fn total_loss<'t>(
    terms: &LossTerms<'t>,
    weights: &LossWeights,
    objective: &Objective,
) -> Result<(Var<'t>, LossReport)> {
    let required = objective.required_terms();
    let named = terms.named();
    let mut total: Option<Var<'t>> = None;
    let mut report = LossReport::default();
    for name in required {
        let v = named
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidArgument(format!("objective {objective} needs the `{name}` term")))?;
        let weighted = v.scale(weight_of(name, weights));
        total = Some(match total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
        report.terms.insert(name.to_string(), v.item());
    }
    let total = total.expect("every objective requires a similarity term");
    report.total = total.item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss: {:?}", report.terms)));
    }
    Ok((total, report))
}
