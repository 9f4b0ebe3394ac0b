//! Mask-aware evaluation metrics: PSNR, SSIM, NMI and mean deformation error.
//!
//! Images are `[C,H,W]` tensors compared over a validity mask; deformations are
//! `[2,H,W]` coordinate maps in pixels.

use std::fmt::Write as _;

use crate::deform::Mask;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Finite stand-in for the infinite PSNR of identical images in aggregates.
pub const PSNR_SENTINEL: f64 = 999.0;
pub const SSIM_WINDOW: usize = 7;
pub const DEFAULT_NMI_BINS: usize = 64;

fn check_pair(a: &Tensor, b: &Tensor, valid: &Mask) -> Result<(usize, usize, usize)> {
    let (c, h, w) = a.chw()?;
    if a.shape() != b.shape() {
        return shape_err(format!("comparing {:?} with {:?}", a.shape(), b.shape()));
    }
    if (valid.height(), valid.width()) != (h, w) {
        return shape_err(format!("{}x{} mask for {h}x{w} images", valid.height(), valid.width()));
    }
    Ok((c, h, w))
}

fn empty(what: &str) -> Error {
    Error::EmptyMask(format!("{what}: no valid pixel"))
}

/// `10 log10(max^2 / MSE)` over valid pixels; `+inf` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor, valid: &Mask, max_val: f64) -> Result<f64> {
    let (c, h, w) = check_pair(a, b, valid)?;
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("PSNR peak must be positive, got {max_val}")));
    }
    let n = valid.count();
    if n == 0 {
        return Err(empty("PSNR"));
    }
    let p = h * w;
    let sq: f64 = (0..c)
        .flat_map(|ch| (0..p).filter(|&q| valid.as_slice()[q]).map(move |q| ch * p + q))
        .map(|i| (a.data()[i] - b.data()[i]).powi(2))
        .sum();
    let mse = sq / (c * n) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() })
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += values(r, c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let at = |r: usize, c: usize| s[r * (w + 1) + c];
    at(r + k, c + k) - at(r, c + k) - at(r + k, c) + at(r, c)
}

/// Mean SSIM over all 7x7 windows lying entirely in the valid region, averaged over channels.
/// Window statistics use population (1/N) moments.
pub fn ssim(a: &Tensor, b: &Tensor, valid: &Mask, max_val: f64) -> Result<f64> {
    let (ch, h, w) = check_pair(a, b, valid)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return shape_err(format!("SSIM needs at least {k}x{k} pixels, got {h}x{w}"));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let invalid = integral(|r, c| if valid.get(r, c) { 0.0 } else { 1.0 }, h, w);
    let windows: Vec<(usize, usize)> = (0..=h - k)
        .flat_map(|r| (0..=w - k).map(move |c| (r, c)))
        .filter(|&(r, c)| window_sum(&invalid, w, r, c, k) == 0.0)
        .collect();
    if windows.is_empty() {
        return Err(empty("SSIM (no complete window)"));
    }
    let n = (k * k) as f64;
    let p = h * w;
    let mut total = 0.0;
    for c in 0..ch {
        let x = &a.data()[c * p..(c + 1) * p];
        let y = &b.data()[c * p..(c + 1) * p];
        let sx = integral(|r, q| x[r * w + q], h, w);
        let sy = integral(|r, q| y[r * w + q], h, w);
        let sxx = integral(|r, q| x[r * w + q] * x[r * w + q], h, w);
        let syy = integral(|r, q| y[r * w + q] * y[r * w + q], h, w);
        let sxy = integral(|r, q| x[r * w + q] * y[r * w + q], h, w);
        for &(r, q) in &windows {
            let mx = window_sum(&sx, w, r, q, k) / n;
            let my = window_sum(&sy, w, r, q, k) / n;
            let vx = window_sum(&sxx, w, r, q, k) / n - mx * mx;
            let vy = window_sum(&syy, w, r, q, k) / n - my * my;
            let cov = window_sum(&sxy, w, r, q, k) / n - mx * my;
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ch * windows.len()) as f64)
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&k| k > 0).map(|k| k as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `(H(a) + H(b)) / H(a, b)` from a joint histogram of co-located values in
/// every channel; bins span each image's valid range. Defined as 1 when both
/// images are constant.
pub fn nmi(a: &Tensor, b: &Tensor, valid: &Mask, bins: usize) -> Result<f64> {
    let (c, h, w) = check_pair(a, b, valid)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("NMI needs at least one bin".into()));
    }
    let p = h * w;
    let idx: Vec<usize> =
        (0..c).flat_map(|ch| (0..p).filter(|&q| valid.as_slice()[q]).map(move |q| ch * p + q)).collect();
    if idx.len() < 2 {
        return Err(empty("NMI (fewer than two samples)"));
    }
    let range = |t: &Tensor| {
        idx.iter().map(|&i| t.data()[i]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let ((alo, ahi), (blo, bhi)) = (range(a), range(b));
    let mut joint = vec![0usize; bins * bins];
    for &i in &idx {
        joint[bin_index(a.data()[i], alo, ahi, bins) * bins + bin_index(b.data()[i], blo, bhi, bins)] += 1;
    }
    let n = idx.len() as f64;
    let ha = entropy((0..bins).map(|i| joint[i * bins..(i + 1) * bins].iter().sum()), n);
    let hb = entropy((0..bins).map(|j| (0..bins).map(|i| joint[i * bins + j]).sum()), n);
    let hab = entropy(joint.iter().copied(), n);
    Ok(if hab == 0.0 { 1.0 } else { (ha + hb) / hab })
}

/// Mean Euclidean distance between two coordinate maps over valid pixels.
pub fn mde(pred: &Tensor, truth: &Tensor, valid: &Mask) -> Result<f64> {
    let (two, h, w) = check_pair(pred, truth, valid)?;
    if two != 2 {
        return shape_err(format!("MDE compares [2,H,W] coordinate maps, got {:?}", pred.shape()));
    }
    let n = valid.count();
    if n == 0 {
        return Err(empty("MDE"));
    }
    let p = h * w;
    let (a, b) = (pred.data(), truth.data());
    let sum: f64 = (0..p).filter(|&q| valid.as_slice()[q]).map(|q| (a[q] - b[q]).hypot(a[p + q] - b[p + q])).sum();
    Ok(sum / n as f64)
}

/// Metrics of one evaluated image.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nmi: f64,
    pub mde: Option<f64>,
}

/// Per-image metrics of one model configuration plus their means.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub config: String,
    pub images: Vec<(String, ImageMetrics)>,
}

impl MetricReport {
    pub fn new(config: impl Into<String>) -> Self {
        MetricReport { config: config.into(), images: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, m: ImageMetrics) {
        self.images.push((id.into(), m));
    }

    /// Means over images, with PSNR capped at [`PSNR_SENTINEL`]; MDE only when every image has one.
    pub fn aggregate(&self) -> Option<ImageMetrics> {
        if self.images.is_empty() {
            return None;
        }
        let n = self.images.len() as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| self.images.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let mde =
            self.images.iter().map(|(_, m)| m.mde).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
        Some(ImageMetrics {
            psnr: mean(&|m| m.psnr.min(PSNR_SENTINEL)),
            ssim: mean(&|m| m.ssim),
            nmi: mean(&|m| m.nmi),
            mde,
        })
    }

    /// `image,psnr,ssim,nmi,mde` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr,ssim,nmi,mde\n");
        let row = |out: &mut String, id: &str, m: &ImageMetrics| {
            let mde = m.mde.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{id},{},{},{},{mde}", m.psnr.min(PSNR_SENTINEL), m.ssim, m.nmi);
        };
        for (id, m) in &self.images {
            row(&mut out, id, m);
        }
        if let Some(m) = self.aggregate() {
            row(&mut out, "mean", &m);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "images": self.images.iter().map(|(id, m)| serde_json::json!({"image": id, "metrics": m})).collect::<Vec<_>>(),
            "mean": self.aggregate(),
        })
    }
}

/// One aggregate row per configuration under the fixed header `config,psnr,ssim,nmi,mde`.
pub fn summary_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("config,psnr,ssim,nmi,mde\n");
    for r in reports {
        if let Some(m) = r.aggregate() {
            let mde = m.mde.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{mde}", r.config, m.psnr, m.ssim, m.nmi);
        }
    }
    out
}
