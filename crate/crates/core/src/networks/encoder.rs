use rand::Rng;

use super::{he_uniform, push_conv, Activation, Bound, Cursor, ParamSet};
use crate::error::{shape_err, Result};
use crate::tensor::{SpectralNorm, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    /// Channels supplied by the caller, excluding coordinate channels.
    pub in_channels: usize,
    /// Feature count per stage; stages after the first start with a stride-2 downsampling.
    pub features: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
    /// Prepend normalized row and column coordinates as two extra channels.
    pub coord_input: bool,
    /// Start with a zero dense head, so the initial output is zero.
    pub zero_head: bool,
}

impl EncoderSpec {
    /// Rigid registration encoder: coordinates in, `(angle, dy, dx)` out, identity at start.
    pub fn rigid(in_channels: usize, features: &[usize]) -> Self {
        EncoderSpec {
            in_channels,
            features: features.to_vec(),
            out_dim: 3,
            activation: Activation::Leaky(0.01),
            spectral_norm: false,
            coord_input: true,
            zero_head: true,
        }
    }

    /// Discriminator: spectrally normalized, one logit out.
    pub fn discriminator(in_channels: usize, features: &[usize]) -> Self {
        EncoderSpec {
            in_channels,
            features: features.to_vec(),
            out_dim: 1,
            activation: Activation::Leaky(0.2),
            spectral_norm: true,
            coord_input: false,
            zero_head: false,
        }
    }

    fn total_in(&self) -> usize {
        self.in_channels + if self.coord_input { 2 } else { 0 }
    }

    pub fn divisor(&self) -> usize {
        1 << (self.features.len() - 1)
    }
}

/// Row and column coordinates scaled to `[-1, 1]`, as `[2,H,W]`.
pub fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let scale = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    Tensor::from_fn(&[2, h, w], |i| {
        let q = i % (h * w);
        if i < h * w {
            scale(q / w, h)
        } else {
            scale(q % w, w)
        }
    })
}

/// Residual encoder ending in global average pooling and a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: ParamSet,
    /// One entry per weight tensor when spectrally normalized, in parameter order.
    pub spectral: Vec<SpectralNorm>,
}

impl Encoder {
    pub fn new<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        if spec.features.is_empty() || spec.features.contains(&0) || spec.out_dim == 0 || spec.in_channels == 0 {
            return shape_err(format!("invalid encoder spec {spec:?}"));
        }
        let mut p = ParamSet::default();
        let f = &spec.features;
        push_conv(&mut p, rng, "stem", spec.total_in(), f[0], 3);
        let mut cin = f[0];
        for (i, &c) in f.iter().enumerate() {
            if i > 0 {
                push_conv(&mut p, rng, &format!("down{i}"), cin, cin, 2);
            }
            push_conv(&mut p, rng, &format!("block{i}.a"), cin, c, 3);
            push_conv(&mut p, rng, &format!("block{i}.b"), c, c, 3);
            if cin != c {
                push_conv(&mut p, rng, &format!("block{i}.proj"), cin, c, 1);
            }
            cin = c;
        }
        let head = he_uniform(rng, &[spec.out_dim, cin], cin);
        p.push("head.w", if spec.zero_head { Tensor::zeros(head.shape()) } else { head });
        p.push("head.b", Tensor::zeros(&[spec.out_dim]));
        let spectral = if spec.spectral_norm {
            p.tensors().iter().filter(|t| t.shape().len() > 1).map(|t| SpectralNorm::new(t.shape()[0], rng)).collect()
        } else {
            Vec::new()
        };
        let mut enc = Encoder { spec, params: p, spectral };
        if enc.spec.spectral_norm {
            for _ in 0..8 {
                enc.power_iteration()?;
            }
        }
        Ok(enc)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.params.bind(tape, trainable)
    }

    /// One power iteration per weight on the current values.
    pub fn power_iteration(&mut self) -> Result<()> {
        let tape = Tape::new();
        let weights = self.params.tensors().iter().filter(|t| t.shape().len() > 1);
        for (sn, w) in self.spectral.iter_mut().zip(weights) {
            sn.normalize(tape.constant(w.clone()), true)?;
        }
        Ok(())
    }

    /// Weights divided by their stored largest singular value; the divisor is a constant.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        let mut sigmas = self.spectral.iter().map(|s| s.sigma);
        self.params
            .tensors()
            .iter()
            .map(|t| {
                if t.shape().len() > 1 && self.spec.spectral_norm {
                    let s = sigmas.next().unwrap_or(1.0);
                    t.map(|v| v / s)
                } else {
                    t.clone()
                }
            })
            .collect()
    }

    fn weight<'t>(&self, c: &mut Cursor<'_, 't>, k: &mut usize) -> Result<Var<'t>> {
        let w = c.take()?;
        if !self.spec.spectral_norm {
            return Ok(w);
        }
        let sigma = self.spectral[*k].sigma;
        *k += 1;
        Ok(w.scale(1.0 / sigma))
    }

    /// `[in_channels,H,W] -> [out_dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let k = self.spec.divisor();
        if shape.len() != 3
            || shape[0] != self.spec.in_channels
            || !shape[1].is_multiple_of(k)
            || !shape[2].is_multiple_of(k)
            || shape[1] < 2 * k
            || shape[2] < 2 * k
        {
            return shape_err(format!(
                "encoder expects [{}, H, W] with H, W multiples of {k} and at least {}, got {shape:?}",
                self.spec.in_channels,
                2 * k
            ));
        }
        let tape = x.tape();
        let x = if self.spec.coord_input {
            Var::concat(&[tape.constant(coordinate_channels(shape[1], shape[2])), x])?
        } else {
            x
        };
        let act = self.spec.activation;
        let mut c = p.cursor();
        let mut sn = 0;
        let mut h = act.apply(x.conv2d(self.weight(&mut c, &mut sn)?, c.take()?, 1, 1)?);
        let mut cin = self.spec.features[0];
        for (i, &ch) in self.spec.features.iter().enumerate() {
            if i > 0 {
                h = act.apply(h.conv2d(self.weight(&mut c, &mut sn)?, c.take()?, 2, 0)?);
            }
            let a = act.apply(h.conv2d(self.weight(&mut c, &mut sn)?, c.take()?, 1, 1)?);
            let b = a.conv2d(self.weight(&mut c, &mut sn)?, c.take()?, 1, 1)?;
            let shortcut = if cin != ch { h.conv2d(self.weight(&mut c, &mut sn)?, c.take()?, 1, 0)? } else { h };
            h = act.apply(b.add(shortcut)?);
            cin = ch;
        }
        let out = h.global_avg_pool()?.dense(self.weight(&mut c, &mut sn)?, c.take()?)?;
        c.finish()?;
        Ok(out)
    }
}

/// Bounded rigid parameters `[angle, dy, dx]` from raw encoder output:
/// `max_angle * tanh(raw_0)` and `max_shift * tanh(raw_{1,2})`.
pub fn rigid_head<'t>(raw: Var<'t>, max_angle: f64, max_shift: f64) -> Result<Var<'t>> {
    if raw.shape() != [3] {
        return shape_err(format!("rigid head expects 3 raw outputs, got {:?}", raw.shape()));
    }
    let scale = Tensor::new(vec![3], vec![max_angle, max_shift, max_shift])?;
    raw.tanh().mul(raw.tape().constant(scale))
}
