use std::thread;

use super::pair::{Pair, INTENSITY_RANGE};
use super::step::{predict, truth_mask};
use crate::datagen::LoadedSample;
use crate::error::{Error, Result};
use crate::metrics::{mde, nmi, psnr, ssim, ImageMetrics, DEFAULT_NMI_BINS};
use crate::networks::ModelBundle;

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "WARPSYNTH_THREADS";

/// Worker count from [`THREADS_ENV`], else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Prediction against the aligned ground-truth label, in stored intensity units.
pub fn evaluate_sample(bundle: &ModelBundle, s: &LoadedSample) -> Result<ImageMetrics> {
    let p = predict(bundle, &Pair::from_sample(s))?;
    let f = p.f_x.map(|v| v * INTENSITY_RANGE);
    let mde = match &p.overall {
        Some(o) => Some(mde(o, &s.d_true, &truth_mask(&s.d_true)?)?),
        None => None,
    };
    Ok(ImageMetrics {
        psnr: psnr(&f, &s.y_true, &p.mask, INTENSITY_RANGE)?,
        ssim: ssim(&f, &s.y_true, &p.mask, INTENSITY_RANGE)?,
        nmi: nmi(&f, &s.y_true, &p.mask, DEFAULT_NMI_BINS)?,
        mde,
    })
}

/// Metrics of every sample, in order, spread over `threads` workers.
pub fn evaluate(bundle: &ModelBundle, samples: &[LoadedSample], threads: usize) -> Result<Vec<ImageMetrics>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = samples.len().div_ceil(threads.max(1));
    thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|s| evaluate_sample(bundle, s)).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::InvalidArgument("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}
