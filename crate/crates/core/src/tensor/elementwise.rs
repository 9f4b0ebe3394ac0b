use super::tape::Op;
use super::{Tensor, Var};
use crate::error::{shape_err, Result};

/// Pointwise nonlinearity recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Abs,
    Log,
    Exp,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    LeakyRelu(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Abs => x.abs(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    pub(crate) fn backward(self, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .zip(&g.data)
            .map(|((&x, &y), &g)| {
                g * match self {
                    Unary::Abs => {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::Log => 1.0 / x,
                    Unary::Exp => y,
                    Unary::Tanh => 1.0 - y * y,
                    Unary::Sigmoid => y * (1.0 - y),
                    Unary::Square => 2.0 * x,
                    Unary::Sqrt => 0.5 / y,
                    // x == 0 takes the negative branch
                    Unary::LeakyRelu(slope) => {
                        if x > 0.0 {
                            1.0
                        } else {
                            slope
                        }
                    }
                    Unary::Clamp(lo, hi) => {
                        if x >= lo && x <= hi {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect();
        Tensor { shape: x.shape.clone(), data }
    }
}

/// Elementwise product where either side may be a single element.
pub(crate) fn mul_broadcast(a: &Tensor, b: &Tensor) -> Tensor {
    binary_values(a, b, |x, y| x * y)
}

fn binary_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.len() == b.len() {
        let shape = if a.shape.len() >= b.shape.len() { a.shape.clone() } else { b.shape.clone() };
        Tensor { shape, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
    } else if b.len() == 1 {
        let y = b.data[0];
        Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() }
    } else {
        let x = a.data[0];
        Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(x, y)).collect() }
    }
}

fn check_broadcast(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape == b.shape || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        shape_err(format!("{what}: {:?} vs {:?}", a.shape, b.shape))
    }
}

pub(crate) fn crop_backward(shape: &[usize], g: &Tensor, top: usize, left: usize) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (g.shape[1], g.shape[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..gh {
            let src = (ch * gh + r) * gw;
            let dst = (ch * h + r + top) * w + left;
            out.data[dst..dst + gw].copy_from_slice(&g.data[src..src + gw]);
        }
    }
    out
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_broadcast(&a, &b, what)?;
        let out = binary_values(&a, &b, f);
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// `k * self` for a constant `k`.
    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v * k);
        self.tape.push(out, Op::Scale(self.id, k), &[self.id])
    }

    /// `self + c` for a constant `c`.
    pub fn offset(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, Op::Offset(self.id), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    fn unary(self, u: Unary) -> Var<'t> {
        let out = self.value().map(|v| u.forward(v));
        self.tape.push(out, Op::Unary(self.id, u), &[self.id])
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    /// `x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.tape.push(out, Op::Mean(self.id), &[self.id])
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape.is_empty() || v.shape[1..] != tail[..] {
                return shape_err(format!("concat: {:?} vs trailing {:?}", v.shape, tail));
            }
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(Tensor { shape, data }, Op::Concat(ids.clone()), &ids))
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape.is_empty() || start + len > v.shape[0] {
            return shape_err(format!("narrow {start}+{len} out of {:?}", v.shape));
        }
        let inner: usize = v.shape[1..].iter().product();
        let mut shape = v.shape.clone();
        shape[0] = len;
        let data = v.data[start * inner..(start + len) * inner].to_vec();
        Ok(self.tape.push(Tensor { shape, data }, Op::Narrow { x: self.id, start }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of a `[C,H,W]` tensor.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (c, hh, ww) = v.chw()?;
        if top + h > hh || left + w > ww {
            return shape_err(format!("crop {h}x{w}@({top},{left}) out of {hh}x{ww}"));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                let s = (ch * hh + r + top) * ww + left;
                data.extend_from_slice(&v.data[s..s + w]);
            }
        }
        let out = Tensor { shape: vec![c, h, w], data };
        Ok(self.tape.push(out, Op::Crop { x: self.id, top, left }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    #[test]
    fn mean_of_small_vector() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        assert_eq!(x.mean().item(), 3.0);
    }

    #[test]
    fn abs_value_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.5));
        let y = x.abs();
        assert_eq!(y.item(), 2.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), -1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(a.add(b).is_err());
        assert!(a.mul(b).is_err());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = a.mul(s).unwrap().sum();
        assert_eq!(y.item(), 12.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(s).unwrap().item(), 6.0);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
        assert_eq!(x.leaky_relu(0.01).value().data(), &[-0.02, 3.0]);
        assert_eq!(x.relu().value().data(), &[0.0, 3.0]);
    }

    #[test]
    fn leaky_relu_at_zero_uses_negative_slope() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.leaky_relu(0.01);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.01);
    }

    #[test]
    fn mean_abs_difference_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0));
        let report = grad_check(
            |tape, x| {
                let b = tape.constant(b.clone());
                Ok(x.sub(b)?.abs().mean())
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let x = Tensor::new(vec![5], vec![0.3, 0.7, 1.1, 1.9, 2.4]).unwrap();
        let report = grad_check(
            |_, x| {
                let a = x.log().add(x.exp())?;
                let b = x.tanh().mul(x.sigmoid())?;
                let c = x.sqrt().add(x.square())?.add(x.offset(-1.0).leaky_relu(0.2))?;
                Ok(a.add(b)?.add(c)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn concat_narrow_crop_route_gradients() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let report = grad_check(
            |tape, x| {
                let y = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| i as f64));
                let cat = Var::concat(&[x, y])?;
                let part = cat.narrow(1, 2)?.crop(1, 1, 2, 2)?;
                Ok(part.square().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
