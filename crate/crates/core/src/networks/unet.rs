use rand::Rng;

use super::{norm_groups, push_conv, push_norm, Activation, Bound, Cursor, Norm, ParamSet, GROUP_NORM_EPS};
use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feature count per resolution, finest first; the decoder mirrors it.
    pub features: Vec<usize>,
    pub norm: Norm,
    pub activation: Activation,
    /// Zero the output convolution so the initial output is exactly zero.
    pub zero_head: bool,
}

impl UnetSpec {
    /// Synthesis network: group norm and leaky ReLU.
    pub fn synthesis(in_channels: usize, out_channels: usize, features: &[usize]) -> Self {
        UnetSpec {
            in_channels,
            out_channels,
            features: features.to_vec(),
            norm: Norm::Group,
            activation: Activation::Leaky(0.01),
            zero_head: false,
        }
    }

    /// Velocity-field network: no normalization, ReLU, two zero-initialized outputs.
    pub fn velocity(in_channels: usize, features: &[usize]) -> Self {
        UnetSpec {
            in_channels,
            out_channels: 2,
            features: features.to_vec(),
            norm: Norm::None,
            activation: Activation::Relu,
            zero_head: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.features.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unet {
    pub spec: UnetSpec,
    pub params: ParamSet,
}

impl Unet {
    pub fn new<R: Rng>(spec: UnetSpec, rng: &mut R) -> Result<Self> {
        if spec.levels() < 2 || spec.features.contains(&0) || spec.in_channels == 0 || spec.out_channels == 0 {
            return shape_err(format!("U-Net needs at least two non-empty levels: {spec:?}"));
        }
        let mut p = ParamSet::default();
        let f = &spec.features;
        let norm = |p: &mut ParamSet, name: &str, c: usize| {
            if spec.norm == Norm::Group {
                push_norm(p, name, c);
            }
        };
        let mut cin = spec.in_channels;
        for (i, &c) in f.iter().enumerate() {
            push_conv(&mut p, rng, &format!("enc{i}a"), cin, c, 3);
            norm(&mut p, &format!("enc{i}a.norm"), c);
            push_conv(&mut p, rng, &format!("enc{i}b"), c, c, 3);
            norm(&mut p, &format!("enc{i}b.norm"), c);
            if i + 1 < f.len() {
                push_conv(&mut p, rng, &format!("down{i}"), c, c, 2);
            }
            cin = c;
        }
        for i in (0..f.len() - 1).rev() {
            let c = f[i];
            let w = super::he_uniform(rng, &[f[i + 1], c, 2, 2], f[i + 1] * 4);
            p.push(format!("up{i}.w"), w);
            p.push(format!("up{i}.b"), crate::tensor::Tensor::zeros(&[c]));
            push_conv(&mut p, rng, &format!("dec{i}a"), 2 * c, c, 3);
            norm(&mut p, &format!("dec{i}a.norm"), c);
            push_conv(&mut p, rng, &format!("dec{i}b"), c, c, 3);
            norm(&mut p, &format!("dec{i}b.norm"), c);
        }
        push_conv(&mut p, rng, "head", f[0], spec.out_channels, 1);
        if spec.zero_head {
            let n = p.len();
            for t in &mut p.tensors_mut()[n - 2..] {
                t.data_mut().fill(0.0);
            }
        }
        Ok(Unet { spec, params: p })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.params.bind(tape, trainable)
    }

    fn conv_norm_act<'t>(&self, x: Var<'t>, c: &mut Cursor<'_, 't>) -> Result<Var<'t>> {
        let y = x.conv2d(c.take()?, c.take()?, 1, 1)?;
        let y = match self.spec.norm {
            Norm::Group => {
                let ch = y.shape()[0];
                y.group_norm(norm_groups(ch), c.take()?, c.take()?, GROUP_NORM_EPS)?
            }
            Norm::None => y,
        };
        Ok(self.spec.activation.apply(y))
    }

    /// `[in_channels,H,W] -> [out_channels,H,W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let k = self.spec.divisor();
        if shape.len() != 3
            || shape[0] != self.spec.in_channels
            || !shape[1].is_multiple_of(k)
            || !shape[2].is_multiple_of(k)
        {
            return shape_err(format!(
                "U-Net expects [{}, H, W] with H, W multiples of {k}, got {shape:?}",
                self.spec.in_channels
            ));
        }
        let mut c = p.cursor();
        let levels = self.spec.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for i in 0..levels {
            h = self.conv_norm_act(h, &mut c)?;
            h = self.conv_norm_act(h, &mut c)?;
            if i + 1 < levels {
                skips.push(h);
                h = self.spec.activation.apply(h.conv2d(c.take()?, c.take()?, 2, 0)?);
            }
        }
        for skip in skips.into_iter().rev() {
            let up = self.spec.activation.apply(h.conv_transpose2d(c.take()?, c.take()?, 2)?);
            h = Var::concat(&[skip, up])?;
            h = self.conv_norm_act(h, &mut c)?;
            h = self.conv_norm_act(h, &mut c)?;
        }
        let out = h.conv2d(c.take()?, c.take()?, 1, 0)?;
        c.finish()?;
        Ok(out)
    }
}
