//! Alternating generator/discriminator optimization with validation-based
//! epoch selection and resumable checkpoints.
//!
//! One step trains on one pair. The discriminator, when present, takes its
//! step after the generator side on a fresh forward pass.

mod checkpoint;
mod config;
mod eval;
mod pair;
mod step;

pub use checkpoint::{load_bundle, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{parse_override, parse_pairs, Profile, TrainConfig, CONFIG_KEYS};
pub use eval::{evaluate, evaluate_sample, worker_count, THREADS_ENV};
pub use pair::{sample_patch, sample_window, Pair, INTENSITY_RANGE, MAX_PATCH_RETRIES};
pub use step::{
    build_step, discriminator_step, generator_step, predict, register, synthesize, truth_mask, validation_score, Nets,
    Optimizers, Prediction, Registration, StepDraws, StepGraph,
};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_seed, DatasetManifest, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::mde;
use crate::networks::{BundleSpec, ModelBundle};
use crate::tensor::Tensor;

/// Epochs considered by [`select_best_epoch`].
pub const SELECTION_WINDOW: usize = 6;

/// Split index used to derive per-epoch shuffle seeds.
const SHUFFLE_STREAM: usize = 3;

/// 1-based index of the lowest score among the last [`SELECTION_WINDOW`]
/// epochs; ties go to the earlier epoch.
pub fn select_best_epoch(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no epochs recorded".into()));
    }
    let start = scores.len().saturating_sub(SELECTION_WINDOW);
    let mut best = start;
    for i in start + 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub val_score: f64,
    pub val_mde: Option<f64>,
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub report: LossReport,
    pub d_loss: Option<f64>,
}

impl StepRecord {
    /// `{"step", "epoch", <terms>, "total", ["d_loss"]}` on one line.
    pub fn to_json_line(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("step".into(), self.step.into());
        map.insert("epoch".into(), self.epoch.into());
        map.extend(self.report.to_json());
        if let Some(d) = self.d_loss {
            map.insert("d_loss".into(), d.into());
        }
        serde_json::Value::Object(map).to_string()
    }
}

/// Running sums of the epoch in progress.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochProgress {
    pub loss_sum: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// Complete training state; a checkpoint stores all of it.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    pub opt: Optimizers,
    pub rng: ChaCha8Rng,
    /// Finished epochs.
    pub epoch: usize,
    /// Pairs consumed in the epoch in progress.
    pub cursor: usize,
    /// Finished steps.
    pub step: u64,
    pub progress: EpochProgress,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, input_channels: usize, label_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let obj = cfg.objective;
        let spec = BundleSpec {
            unet_features: cfg.unet_features.clone(),
            encoder_features: cfg.encoder_features.clone(),
            ..BundleSpec::new(input_channels, label_channels, obj.registration(), obj.adversarial)
        };
        let bundle = ModelBundle::new(spec, &mut rng)?;
        let opt = Optimizers::new(&bundle, &cfg);
        Ok(Trainer {
            cfg,
            bundle,
            opt,
            rng,
            epoch: 0,
            cursor: 0,
            step: 0,
            progress: EpochProgress::default(),
            history: Vec::new(),
        })
    }

    /// Visiting order of `n` training pairs in the current epoch; independent of the step stream.
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, SHUFFLE_STREAM, self.epoch)));
        order
    }

    /// Generator step, then discriminator step when adversarial. `None` when
    /// no patch of `pair` qualified.
    pub fn train_pair(&mut self, pair: &Pair) -> Result<Option<StepRecord>> {
        let patch = if self.cfg.patch_size > 0 {
            match sample_patch(pair, self.cfg.patch_size, self.cfg.valid_fraction_threshold, &mut self.rng)? {
                Some(p) => p,
                None => return Ok(None),
            }
        } else {
            pair.clone()
        };
        let draws = StepDraws::sample(&self.cfg, &patch, &mut self.rng);
        let report = generator_step(&mut self.bundle, &mut self.opt, &patch, &self.cfg, &draws)?;
        let d_loss = match self.cfg.objective.adversarial {
            Some(_) => {
                let draws = StepDraws::sample(&self.cfg, &patch, &mut self.rng);
                Some(discriminator_step(&mut self.bundle, &mut self.opt, &patch, &self.cfg, &draws)?)
            }
            None => None,
        };
        self.step += 1;
        Ok(Some(StepRecord { step: self.step, epoch: self.epoch + 1, report, d_loss }))
    }

    /// Continues the current epoch for at most `max_steps` pairs (all when
    /// `None`). Returns whether the epoch's pairs are exhausted.
    pub fn run_epoch(
        &mut self,
        train: &[Pair],
        max_steps: Option<usize>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<bool> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let order = self.epoch_order(train.len());
        let mut taken = 0;
        while self.cursor < order.len() {
            if max_steps.is_some_and(|m| taken >= m) {
                return Ok(false);
            }
            let record = self.train_pair(&train[order[self.cursor]])?;
            self.cursor += 1;
            taken += 1;
            match record {
                Some(r) => {
                    self.progress.loss_sum += r.report.total;
                    self.progress.steps += 1;
                    on_step(&r)?;
                }
                None => self.progress.skipped += 1,
            }
        }
        Ok(true)
    }

    /// Validates, records the epoch and resets the epoch counters.
    pub fn finish_epoch(&mut self, val: &[Pair], truths: Option<&[Tensor]>) -> Result<EpochRecord> {
        let (val_score, val_mde) = validate(&self.bundle, val, truths)?;
        let p = self.progress;
        let record = EpochRecord {
            epoch: self.epoch + 1,
            val_score,
            val_mde,
            mean_loss: if p.steps > 0 { p.loss_sum / p.steps as f64 } else { f64::NAN },
            steps: p.steps,
            skipped: p.skipped,
        };
        self.history.push(record.clone());
        self.epoch += 1;
        self.cursor = 0;
        self.progress = EpochProgress::default();
        Ok(record)
    }
}

/// Validation score and, given true deformations, mean deformation error.
pub fn validate(bundle: &ModelBundle, val: &[Pair], truths: Option<&[Tensor]>) -> Result<(f64, Option<f64>)> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    if truths.is_some_and(|t| t.len() != val.len()) {
        return Err(Error::InvalidArgument("one true deformation per validation pair is required".into()));
    }
    let (mut scores, mut errors) = (Vec::new(), Vec::new());
    for (i, pair) in val.iter().enumerate() {
        let p = predict(bundle, pair)?;
        scores.extend(p.score);
        if let (Some(all), Some(overall)) = (truths, &p.overall) {
            errors.push(mde(overall, &all[i], &truth_mask(&all[i])?)?);
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyMask("no validation pair had comparable pixels".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&scores), (!errors.is_empty()).then(|| mean(&errors))))
}

/// Pairs of a generated dataset in network units.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    /// True deformations of the validation pairs.
    pub val_truth: Vec<Tensor>,
}

impl TrainData {
    /// Loads the train and validation splits; `train_limit` 0 keeps all pairs.
    pub fn load(root: &Path, train_limit: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_NAME))?;
        let mut train = manifest.split("train").to_vec();
        if train_limit > 0 {
            train.truncate(train_limit);
        }
        let train = train
            .iter()
            .map(|f| DatasetManifest::load_sample(root, f).map(|s| Pair::from_sample(&s)))
            .collect::<Result<_>>()?;
        let val_samples = manifest.load_split(root, "val")?;
        Ok(TrainData {
            train,
            val: val_samples.iter().map(Pair::from_sample).collect(),
            val_truth: val_samples.into_iter().map(|s| s.d_true).collect(),
        })
    }

    pub fn channels(&self) -> Result<(usize, usize)> {
        let p = self.train.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
        Ok((p.x.shape()[0], p.y.shape()[0]))
    }
}

/// Files of a training run below its output directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.root.join("epochs.jsonl")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints").join("last")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch:04}"))
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }

    pub fn failure_dump(&self) -> PathBuf {
        self.root.join("checkpoints").join("nonfinite")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best: PathBuf,
}

/// Keeps only the lines of `path` whose step does not exceed `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Full training run into `out`. With `resume` a previous run's last
/// checkpoint is continued and its logs are cut back to that point.
pub fn train(cfg: &TrainConfig, data: &TrainData, out: &Path, resume: bool) -> Result<TrainOutcome> {
    let layout = RunLayout::new(out);
    fs::create_dir_all(layout.last().parent().expect("checkpoint directory"))?;
    fs::write(layout.config(), cfg.to_text())?;
    let (cin, cout) = data.channels()?;
    let mut trainer = if resume && layout.last().with_extension("manifest").exists() {
        let t = load_checkpoint(cfg.clone(), &layout.last())?;
        truncate_log(&layout.loss_log(), t.step)?;
        let kept: Vec<String> = t.history.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        fs::write(layout.epoch_log(), kept.iter().map(|l| format!("{l}\n")).collect::<String>())?;
        t
    } else {
        fs::write(layout.loss_log(), "")?;
        fs::write(layout.epoch_log(), "")?;
        Trainer::new(cfg.clone(), cin, cout)?
    };
    let mut log = OpenOptions::new().append(true).open(layout.loss_log())?;
    let mut epochs = OpenOptions::new().append(true).open(layout.epoch_log())?;

    while trainer.epoch < cfg.epochs {
        let ran = trainer.run_epoch(&data.train, None, |r| {
            writeln!(log, "{}", r.to_json_line())?;
            Ok(())
        });
        if let Err(e) = ran {
            if matches!(e, Error::NonFinite(_)) {
                // Non-finite values abort before the offending update is applied.
                save_checkpoint(&trainer, &layout.failure_dump())?;
            }
            return Err(e);
        }
        log.flush()?;
        let record = trainer.finish_epoch(&data.val, Some(&data.val_truth))?;
        writeln!(epochs, "{}", serde_json::to_string(&record)?)?;
        save_checkpoint(&trainer, &layout.epoch_checkpoint(record.epoch))?;
        save_checkpoint(&trainer, &layout.last())?;
        if record.epoch > SELECTION_WINDOW {
            for ext in ["manifest", "bin"] {
                let stale = layout.epoch_checkpoint(record.epoch - SELECTION_WINDOW).with_extension(ext);
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
    }
    let scores: Vec<f64> = trainer.history.iter().map(|r| r.val_score).collect();
    let best_epoch = select_best_epoch(&scores)?;
    for ext in ["manifest", "bin"] {
        fs::copy(layout.epoch_checkpoint(best_epoch).with_extension(ext), layout.best().with_extension(ext))?;
    }
    Ok(TrainOutcome { history: trainer.history, best_epoch, best: layout.best() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_epoch_window_and_ties() {
        assert_eq!(select_best_epoch(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4]).unwrap(), 7);
        let mut s = vec![0.1, 9.0, 9.0, 9.0, 5.0, 4.0, 6.0, 3.0, 7.0, 8.0];
        assert_eq!(select_best_epoch(&s).unwrap(), 8);
        s[7] = 9.5;
        assert_eq!(select_best_epoch(&s).unwrap(), 6);
        assert_eq!(select_best_epoch(&[3.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0]).unwrap(), 4);
        assert_eq!(select_best_epoch(&[2.0]).unwrap(), 1);
        assert!(select_best_epoch(&[]).is_err());
    }

    #[test]
    fn step_record_json() {
        let mut report = LossReport::default();
        report.terms.insert("sim".into(), 0.5);
        report.total = 0.5;
        let r = StepRecord { step: 3, epoch: 1, report, d_loss: Some(1.25) };
        assert_eq!(r.to_json_line(), r#"{"d_loss":1.25,"epoch":1,"sim":0.5,"step":3,"total":0.5}"#);
    }
}
