use rand::Rng;

use crate::datagen::LoadedSample;
use crate::deform::Mask;
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Stored images span `[0, INTENSITY_RANGE]`; networks see them divided by it.
pub const INTENSITY_RANGE: f64 = 255.0;

/// Draws per patch before the pair is skipped.
pub const MAX_PATCH_RETRIES: usize = 100;

/// Input/label pair in network units.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x: Tensor,
    pub x_mask: Mask,
    /// The misaligned label.
    pub y: Tensor,
    pub y_mask: Mask,
}

impl Pair {
    pub fn from_sample(s: &LoadedSample) -> Self {
        let (h, w) = (s.y_mask.height(), s.y_mask.width());
        Pair {
            x: s.x.map(|v| v / INTENSITY_RANGE),
            x_mask: Mask::full(h, w),
            y: s.y_tilde.map(|v| v / INTENSITY_RANGE),
            y_mask: s.y_mask.clone(),
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.x_mask.height(), self.x_mask.width())
    }

    /// The `size x size` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Pair> {
        let (h, w) = self.extent();
        if top + size > h || left + size > w {
            return arg_err(format!("window {size}@({top},{left}) outside {h}x{w}"));
        }
        let crop_t = |t: &Tensor| {
            let c = t.shape()[0];
            Tensor::from_fn(&[c, size, size], |i| {
                let (ch, q) = (i / (size * size), i % (size * size));
                t.data()[(ch * h + top + q / size) * w + left + q % size]
            })
        };
        let crop_m = |m: &Mask| Mask::from_fn(size, size, |r, c| m.get(top + r, left + c));
        Ok(Pair { x: crop_t(&self.x), x_mask: crop_m(&self.x_mask), y: crop_t(&self.y), y_mask: crop_m(&self.y_mask) })
    }
}

/// Valid-pixel counts of every `size x size` window, indexed by top-left corner.
struct WindowCounts {
    table: Vec<usize>,
    w: usize,
}

impl WindowCounts {
    fn new(m: &Mask) -> Self {
        let (h, w) = (m.height(), m.width());
        let mut table = vec![0; (h + 1) * (w + 1)];
        for r in 0..h {
            for c in 0..w {
                table[(r + 1) * (w + 1) + c + 1] =
                    m.get(r, c) as usize + table[r * (w + 1) + c + 1] + table[(r + 1) * (w + 1) + c]
                        - table[r * (w + 1) + c];
            }
        }
        WindowCounts { table, w }
    }

    fn count(&self, top: usize, left: usize, size: usize) -> usize {
        let s = self.w + 1;
        let (b, r) = (top + size, left + size);
        self.table[b * s + r] + self.table[top * s + left] - self.table[top * s + r] - self.table[b * s + left]
    }
}

/// Uniformly drawn window whose valid fraction of `mask` is at least
/// `threshold`; `None` after `retries` rejected draws.
pub fn sample_window<R: Rng>(
    mask: &Mask,
    size: usize,
    threshold: f64,
    retries: usize,
    rng: &mut R,
) -> Result<Option<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    if size == 0 || size > h || size > w {
        return arg_err(format!("patch size {size} does not fit {h}x{w}"));
    }
    let counts = WindowCounts::new(mask);
    let needed = threshold * (size * size) as f64;
    for _ in 0..retries {
        let (top, left) = (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size));
        if counts.count(top, left, size) as f64 >= needed {
            return Ok(Some((top, left)));
        }
    }
    Ok(None)
}

/// Random training patch of `pair`, judged by the input mask; `None` means skip.
pub fn sample_patch<R: Rng>(pair: &Pair, size: usize, threshold: f64, rng: &mut R) -> Result<Option<Pair>> {
    match sample_window(&pair.x_mask, size, threshold, MAX_PATCH_RETRIES, rng)? {
        Some((top, left)) => pair.crop(top, left, size).map(Some),
        None => Ok(None),
    }
}
