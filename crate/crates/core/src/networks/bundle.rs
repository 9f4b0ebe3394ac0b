use std::fmt;

use rand::Rng;

use super::{Encoder, EncoderSpec, ParamSet, TensorStore, Unet, UnetSpec};
use crate::error::{arg_err, Result};
use crate::losses::AdvMode;
use crate::tensor::{SpectralNorm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetworkId {
    /// Synthesis.
    F,
    /// Rigid cross-modality registration.
    HRig,
    /// Elastic cross-modality registration.
    HSvf,
    /// Intra-modality registration.
    GSvf,
    /// Discriminator.
    D,
}

impl NetworkId {
    pub const ALL: [NetworkId; 5] = [NetworkId::F, NetworkId::HRig, NetworkId::HSvf, NetworkId::GSvf, NetworkId::D];

    pub fn name(&self) -> &'static str {
        match self {
            NetworkId::F => "F",
            NetworkId::HRig => "H_rig",
            NetworkId::HSvf => "H_svf",
            NetworkId::GSvf => "G_svf",
            NetworkId::D => "D",
        }
    }
}

impl fmt::Display for NetworkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes and roles of the networks of one training configuration.
///
/// Channel contracts, with one validity-mask channel per image:
/// `H_rig` and `H_svf` see input, label and both masks; `G_svf` sees the
/// prediction, the registered label, the inverse elastic displacement and both
/// masks; `D` sees input and sample when conditional, else the sample alone.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BundleSpec {
    pub input_channels: usize,
    pub label_channels: usize,
    pub unet_features: Vec<usize>,
    pub encoder_features: Vec<usize>,
    pub registration: bool,
    pub adversarial: Option<AdvMode>,
    /// Largest rigid rotation, radians.
    pub max_angle: f64,
    /// Largest rigid shift as a fraction of the image size.
    pub max_shift_fraction: f64,
}

impl BundleSpec {
    pub fn new(input_channels: usize, label_channels: usize, registration: bool, adversarial: Option<AdvMode>) -> Self {
        BundleSpec {
            input_channels,
            label_channels,
            unet_features: vec![16, 32, 64, 64],
            encoder_features: vec![16, 32, 64, 64],
            registration,
            adversarial,
            max_angle: 30f64.to_radians(),
            max_shift_fraction: 0.25,
        }
    }

    pub fn cross_inputs(&self) -> usize {
        self.input_channels + self.label_channels + 2
    }

    pub fn intra_inputs(&self) -> usize {
        2 * self.label_channels + 4
    }

    pub fn disc_inputs(&self) -> Option<usize> {
        self.adversarial.map(|m| {
            if m.conditional() {
                self.input_channels + self.label_channels
            } else {
                self.label_channels
            }
        })
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        let u = 1 << (self.unet_features.len().max(1) - 1);
        let e = 1 << (self.encoder_features.len().max(1) - 1);
        u.max(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub f: Unet,
    pub h_rig: Option<Encoder>,
    pub h_svf: Option<Unet>,
    pub g_svf: Option<Unet>,
    pub d: Option<Encoder>,
}

impl ModelBundle {
    pub fn new<R: Rng>(spec: BundleSpec, rng: &mut R) -> Result<Self> {
        if !(spec.max_angle >= 0.0 && spec.max_shift_fraction >= 0.0) {
            return arg_err(format!("rigid bounds must be non-negative: {spec:?}"));
        }
        let f = Unet::new(UnetSpec::synthesis(spec.input_channels, spec.label_channels, &spec.unet_features), rng)?;
        let (h_rig, h_svf, g_svf) = if spec.registration {
            (
                Some(Encoder::new(EncoderSpec::rigid(spec.cross_inputs(), &spec.encoder_features), rng)?),
                Some(Unet::new(UnetSpec::velocity(spec.cross_inputs(), &spec.unet_features), rng)?),
                Some(Unet::new(UnetSpec::velocity(spec.intra_inputs(), &spec.unet_features), rng)?),
            )
        } else {
            (None, None, None)
        };
        let d = match spec.disc_inputs() {
            Some(c) => Some(Encoder::new(EncoderSpec::discriminator(c, &spec.encoder_features), rng)?),
            None => None,
        };
        Ok(ModelBundle { spec, f, h_rig, h_svf, g_svf, d })
    }

    /// Networks present in this bundle, in [`NetworkId::ALL`] order.
    pub fn ids(&self) -> Vec<NetworkId> {
        NetworkId::ALL.into_iter().filter(|&id| self.params(id).is_some()).collect()
    }

    pub fn params(&self, id: NetworkId) -> Option<&ParamSet> {
        match id {
            NetworkId::F => Some(&self.f.params),
            NetworkId::HRig => self.h_rig.as_ref().map(|n| &n.params),
            NetworkId::HSvf => self.h_svf.as_ref().map(|n| &n.params),
            NetworkId::GSvf => self.g_svf.as_ref().map(|n| &n.params),
            NetworkId::D => self.d.as_ref().map(|n| &n.params),
        }
    }

    pub fn params_mut(&mut self, id: NetworkId) -> Option<&mut ParamSet> {
        match id {
            NetworkId::F => Some(&mut self.f.params),
            NetworkId::HRig => self.h_rig.as_mut().map(|n| &mut n.params),
            NetworkId::HSvf => self.h_svf.as_mut().map(|n| &mut n.params),
            NetworkId::GSvf => self.g_svf.as_mut().map(|n| &mut n.params),
            NetworkId::D => self.d.as_mut().map(|n| &mut n.params),
        }
    }

    /// Every parameter and the discriminator's power-iteration state.
    pub fn save_to(&self, store: &mut TensorStore) -> Result<()> {
        for id in self.ids() {
            store.insert_params(id.name(), self.params(id).expect("listed network"))?;
        }
        if let Some(d) = &self.d {
            for (i, sn) in d.spectral.iter().enumerate() {
                store.insert(format!("D.sn{i}.u"), Tensor::new(vec![sn.u.len()], sn.u.clone())?)?;
                store.insert(format!("D.sn{i}.sigma"), Tensor::scalar(sn.sigma))?;
            }
        }
        Ok(())
    }

    /// Restores what [`ModelBundle::save_to`] wrote into a bundle built from the same spec.
    pub fn load_from(&mut self, store: &TensorStore) -> Result<()> {
        for id in self.ids() {
            store.load_params(id.name(), self.params_mut(id).expect("listed network"))?;
        }
        if let Some(d) = &mut self.d {
            for (i, sn) in d.spectral.iter_mut().enumerate() {
                let u = store.require(&format!("D.sn{i}.u"))?;
                if u.len() != sn.u.len() {
                    return arg_err(format!("spectral state {i} has {} entries, expected {}", u.len(), sn.u.len()));
                }
                *sn = SpectralNorm { u: u.data().to_vec(), sigma: store.require(&format!("D.sn{i}.sigma"))?.item() };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(registration: bool, adv: Option<AdvMode>) -> BundleSpec {
        BundleSpec {
            unet_features: vec![4, 8],
            encoder_features: vec![4, 8],
            ..BundleSpec::new(3, 3, registration, adv)
        }
    }

    #[test]
    fn roles_follow_the_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ModelBundle::new(small(false, None), &mut rng).unwrap();
        assert_eq!(b.ids(), vec![NetworkId::F]);
        let b = ModelBundle::new(small(true, Some(AdvMode::EqAdv)), &mut rng).unwrap();
        assert_eq!(b.ids(), NetworkId::ALL.to_vec());
        assert_eq!(b.d.as_ref().unwrap().spec.in_channels, 6);
        assert_eq!(b.g_svf.as_ref().unwrap().spec.in_channels, 10);
        assert_eq!(b.h_rig.as_ref().unwrap().spec.in_channels, 8);
        let b = ModelBundle::new(small(false, Some(AdvMode::DefUncondAdv)), &mut rng).unwrap();
        assert_eq!(b.d.as_ref().unwrap().spec.in_channels, 3);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(true, Some(AdvMode::DefCondAdv));
        let a = ModelBundle::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut b = ModelBundle::new(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        let mut s = TensorStore::default();
        a.save_to(&mut s).unwrap();
        s.save(&dir.path().join("m")).unwrap();
        b.load_from(&TensorStore::load(&dir.path().join("m")).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
