//! Synthetic cross-modality data: procedural colour images whose label
//! modality is the same image with its channels rotated, moved by a simulated
//! rigid-plus-elastic deformation.

mod io;

pub use io::{read_array, read_expecting, read_mask, read_pnm, write_array, write_mask, write_pnm, ArrayKind};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{simulate_deformation, warp, Image, Mask, Preset, SimDeformParams, SimulatedDeformation};
use crate::error::{arg_err, Error, Result};
use crate::tensor::{Fill, Tape, Tensor};

pub const MIN_PROCEDURAL_SIZE: usize = 32;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth per-channel gradients, 5 to 20 soft-edged coloured ellipses and
/// rectangles, and mild uniform texture noise, clamped to `[0,255]`.
pub fn procedural_image<R: Rng>(rng: &mut R, h: usize, w: usize) -> Result<Tensor> {
    if h < MIN_PROCEDURAL_SIZE || w < MIN_PROCEDURAL_SIZE {
        return arg_err(format!(
            "procedural images need at least {MIN_PROCEDURAL_SIZE}x{MIN_PROCEDURAL_SIZE}, got {h}x{w}"
        ));
    }
    let p = h * w;
    let mut img = vec![0.0; 3 * p];
    for ch in 0..3 {
        let base = rng.gen_range(60.0..196.0);
        let (gr, gc) = (rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
        let (amp, fr, fc, phase) =
            (rng.gen_range(0.0..25.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.3));
        for q in 0..p {
            let (r, c) = ((q / w) as f64 / h as f64, (q % w) as f64 / w as f64);
            img[ch * p + q] =
                base + gr * (r - 0.5) + gc * (c - 0.5) + amp * (fr * r * 6.3 + fc * c * 6.3 + phase).sin();
        }
    }
    let size = h.min(w) as f64;
    for _ in 0..rng.gen_range(5..=20) {
        let (cr, cc) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ra, rb) = (rng.gen_range(0.05..0.25) * size, rng.gen_range(0.05..0.25) * size);
        let colour = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        let soft = rng.gen_range(0.7..3.0);
        let ellipse = rng.gen_bool(0.5);
        for q in 0..p {
            let (dr, dc) = (((q / w) as f64 - cr) / ra, ((q % w) as f64 - cc) / rb);
            let signed = if ellipse { dr.hypot(dc) - 1.0 } else { dr.abs().max(dc.abs()) - 1.0 } * ra.min(rb);
            let alpha = sigmoid(-signed / soft);
            for (ch, &col) in colour.iter().enumerate() {
                let v = &mut img[ch * p + q];
                *v = *v * (1.0 - alpha) + col * alpha;
            }
        }
    }
    for v in &mut img {
        *v = (*v + rng.gen_range(-4.0..4.0)).clamp(0.0, 255.0);
    }
    Tensor::new(vec![3, h, w], img)
}

/// Channel rotation `(R,G,B) -> (G,B,R)`; applying it three times is the identity.
pub fn swap_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c != 3 {
        return arg_err(format!("channel swap needs 3 channels, got {c}"));
    }
    let p = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| x.data()[((i / p + 1) % 3) * p + i % p]))
}

/// One generated training triple and its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Tensor,
    /// Aligned label `swap(x)`.
    pub y_true: Tensor,
    /// `swap(x)` pulled back by the simulated forward map.
    pub y_tilde: Tensor,
    pub y_mask: Mask,
    pub deformation: SimulatedDeformation,
}

pub fn make_pair<R: Rng>(x: Tensor, params: &SimDeformParams, rng: &mut R) -> Result<Sample> {
    let (_, h, w) = x.chw()?;
    let y_true = swap_channels(&x)?;
    let deformation = simulate_deformation(params, rng, h, w)?;
    let tape = Tape::new();
    let warped = warp(&Image::full(tape.constant(y_true.clone()))?, &deformation.to_deformation(&tape)?)?;
    Ok(Sample { x, y_true, y_tilde: (*warped.data.value()).clone(), y_mask: warped.mask, deformation })
}

/// Deterministic seed of one sample, distinct across splits.
pub fn sample_seed(seed: u64, split: usize, index: usize) -> u64 {
    let mut z = seed ^ ((split as u64 + 1) << 48) ^ index as u64;
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    /// Preset code: LR, SR, LC or SC.
    pub preset: String,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Binary PPM sources used instead of procedural images, centre-cropped and resized.
    pub image_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { preset: "SC".into(), size: 96, train: 200, val: 20, test: 50, seed: 0, image_dir: None }
    }
}

impl DatasetConfig {
    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.preset).ok_or_else(|| Error::Config(format!("unknown preset `{}`", self.preset)))
    }

    fn counts(&self) -> [usize; 3] {
        [self.train, self.val, self.test]
    }
}

/// Paths, relative to the manifest directory, of one sample's arrays.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleFiles {
    pub x: String,
    pub y_tilde: String,
    pub y_mask: String,
    pub y_true: String,
    /// Coordinates of the map taking input positions to label positions.
    pub d_true: String,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub splits: BTreeMap<String, Vec<SampleFiles>>,
}

/// Arrays of one sample in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub x: Tensor,
    pub y_tilde: Tensor,
    pub y_mask: Mask,
    pub y_true: Tensor,
    pub d_true: Tensor,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        for (split, n) in SPLITS.iter().zip(m.config.counts()) {
            if m.split(split).len() != n {
                return Err(Error::Format(format!(
                    "split {split} lists {} samples, config says {n}",
                    m.split(split).len()
                )));
            }
        }
        Ok(m)
    }

    pub fn split(&self, name: &str) -> &[SampleFiles] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load_sample(root: &Path, f: &SampleFiles) -> Result<LoadedSample> {
        Ok(LoadedSample {
            x: read_expecting(&root.join(&f.x), ArrayKind::Image)?,
            y_tilde: read_expecting(&root.join(&f.y_tilde), ArrayKind::Image)?,
            y_mask: read_mask(&root.join(&f.y_mask))?,
            y_true: read_expecting(&root.join(&f.y_true), ArrayKind::Image)?,
            d_true: read_expecting(&root.join(&f.d_true), ArrayKind::Deformation)?,
        })
    }

    pub fn load_split(&self, root: &Path, name: &str) -> Result<Vec<LoadedSample>> {
        self.split(name).iter().map(|f| Self::load_sample(root, f)).collect()
    }
}

/// Centre crop to a square and bilinear resize to `size`.
fn fit_source(img: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    let img = if c == 1 { Tensor::from_fn(&[3, h, w], |i| img.data()[i % (h * w)]) } else { img.clone() };
    let side = h.min(w);
    let (top, left) = ((h - side) as f64 / 2.0, (w - side) as f64 / 2.0);
    let step = if size > 1 { (side - 1) as f64 / (size - 1) as f64 } else { 0.0 };
    let coords = Tensor::from_fn(&[2, size, size], |i| {
        let q = i % (size * size);
        if i < size * size {
            top + (q / size) as f64 * step
        } else {
            left + (q % size) as f64 * step
        }
    });
    let tape = Tape::new();
    let out = tape.constant(img).bilinear_sample(tape.constant(coords), Fill::Extend)?;
    Ok((*out.value()).clone())
}

fn source_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .ppm or .pgm images in {}", dir.display())));
    }
    Ok(files)
}

/// Writes every sample, then `manifest.json`. On failure the files written so far are removed.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let params = SimDeformParams::preset_for_size(cfg.preset()?, cfg.size);
    let sources = cfg.image_dir.as_deref().map(source_images).transpose()?;
    fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<DatasetManifest> {
        let mut splits = BTreeMap::new();
        for (s, (&name, n)) in SPLITS.iter().zip(cfg.counts()).enumerate() {
            let dir = out.join(name);
            fs::create_dir_all(&dir)?;
            let mut files = Vec::with_capacity(n);
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, s, i));
                let x = match &sources {
                    Some(list) => fit_source(&read_pnm(&list[(i + s * 7919) % list.len()])?, cfg.size)?,
                    None => procedural_image(&mut rng, cfg.size, cfg.size)?,
                };
                let sample = make_pair(x, &params, &mut rng)?;
                let rel = |suffix: &str| format!("{name}/{i:05}_{suffix}.wsb");
                let entry = SampleFiles {
                    x: rel("x"),
                    y_tilde: rel("y"),
                    y_mask: rel("ymask"),
                    y_true: rel("ytrue"),
                    d_true: rel("dtrue"),
                };
                let mut put = |rel: &str, kind: ArrayKind, t: &Tensor| -> Result<()> {
                    let path = out.join(rel);
                    written.push(path.clone());
                    write_array(&path, kind, t)
                };
                put(&entry.x, ArrayKind::Image, &sample.x)?;
                put(&entry.y_tilde, ArrayKind::Image, &sample.y_tilde)?;
                put(&entry.y_mask, ArrayKind::Mask, &sample.y_mask.to_tensor())?;
                put(&entry.y_true, ArrayKind::Image, &sample.y_true)?;
                put(&entry.d_true, ArrayKind::Deformation, &sample.deformation.inverse)?;
                files.push(entry);
            }
            splits.insert(name.to_string(), files);
        }
        let manifest = DatasetManifest { config: cfg.clone(), splits };
        let path = out.join(MANIFEST_NAME);
        written.push(path.clone());
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}
