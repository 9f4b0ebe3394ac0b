use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EpochProgress, EpochRecord, Optimizers, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::networks::{BundleSpec, ModelBundle, NetworkId, TensorStore};
use crate::tensor::{Adam, Tensor};

pub const CHECKPOINT_FORMAT: &str = "warpsynth-checkpoint-1";

const HISTORY_COLUMNS: usize = 6;

fn parse_meta<T: std::str::FromStr>(store: &TensorStore, key: &str) -> Result<T> {
    let v = store.meta_value(key)?;
    v.parse().map_err(|_| Error::Format(format!("metadata `{key}` has bad value `{v}`")))
}

fn save_adam(store: &mut TensorStore, prefix: &str, adam: &Adam) -> Result<()> {
    store.meta.insert(format!("{prefix}.step"), adam.state.step.to_string());
    for (i, (m, v)) in adam.state.m.iter().zip(&adam.state.v).enumerate() {
        store.insert(format!("{prefix}.m.{i}"), m.clone())?;
        store.insert(format!("{prefix}.v.{i}"), v.clone())?;
    }
    Ok(())
}

fn load_adam(store: &TensorStore, prefix: &str, adam: &mut Adam) -> Result<()> {
    adam.state.step = parse_meta(store, &format!("{prefix}.step"))?;
    for i in 0..adam.state.m.len() {
        for (slot, kind) in [(&mut adam.state.m[i], "m"), (&mut adam.state.v[i], "v")] {
            let t = store.require(&format!("{prefix}.{kind}.{i}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{prefix}.{kind}.{i} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Writes parameters, optimizer moments, the step stream position and the
/// epoch history to `base.manifest` / `base.bin`.
pub fn save_checkpoint(t: &Trainer, base: &Path) -> Result<()> {
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut store = TensorStore::default();
    let meta = &mut store.meta;
    meta.insert("format".into(), CHECKPOINT_FORMAT.into());
    meta.insert("bundle".into(), serde_json::to_string(&t.bundle.spec)?);
    meta.insert("objective".into(), t.cfg.objective.to_string());
    meta.insert("epoch".into(), t.epoch.to_string());
    meta.insert("cursor".into(), t.cursor.to_string());
    meta.insert("step".into(), t.step.to_string());
    meta.insert("progress.steps".into(), t.progress.steps.to_string());
    meta.insert("progress.skipped".into(), t.progress.skipped.to_string());
    meta.insert("rng.seed".into(), hex(&t.rng.get_seed()));
    meta.insert("rng.stream".into(), t.rng.get_stream().to_string());
    meta.insert("rng.word_pos".into(), t.rng.get_word_pos().to_string());
    store.insert("progress.loss_sum", Tensor::scalar(t.progress.loss_sum))?;
    let rows: Vec<f64> = t
        .history
        .iter()
        .flat_map(|r| {
            [r.epoch as f64, r.val_score, r.val_mde.unwrap_or(f64::NAN), r.mean_loss, r.steps as f64, r.skipped as f64]
        })
        .collect();
    store.insert("history", Tensor::new(vec![t.history.len(), HISTORY_COLUMNS], rows)?)?;
    t.bundle.save_to(&mut store)?;
    for (id, adam) in &t.opt.main {
        save_adam(&mut store, &format!("adam.{id}"), adam)?;
    }
    if let Some(adam) = &t.opt.disc {
        save_adam(&mut store, "adam.D", adam)?;
    }
    store.save(base)
}

fn read_spec(store: &TensorStore) -> Result<BundleSpec> {
    if store.meta_value("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a {CHECKPOINT_FORMAT} checkpoint")));
    }
    Ok(serde_json::from_str(store.meta_value("bundle")?)?)
}

/// Model parameters only, for evaluation and inference.
pub fn load_bundle(base: &Path) -> Result<ModelBundle> {
    let store = TensorStore::load(base)?;
    let spec = read_spec(&store)?;
    let mut bundle = ModelBundle::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    bundle.load_from(&store)?;
    Ok(bundle)
}

/// Restores a [`Trainer`] saved by [`save_checkpoint`]; `cfg` must describe the same models.
pub fn load_checkpoint(cfg: TrainConfig, base: &Path) -> Result<Trainer> {
    let store = TensorStore::load(base)?;
    let spec = read_spec(&store)?;
    let mut t = Trainer::new(cfg, spec.input_channels, spec.label_channels)?;
    if t.bundle.spec != spec {
        return Err(Error::Config(format!(
            "checkpoint models {spec:?} differ from the configured {:?}",
            t.bundle.spec
        )));
    }
    t.bundle.load_from(&store)?;
    t.opt = Optimizers::new(&t.bundle, &t.cfg);
    for (id, adam) in &mut t.opt.main {
        load_adam(&store, &format!("adam.{id}"), adam)?;
    }
    if let Some(adam) = &mut t.opt.disc {
        load_adam(&store, &format!("adam.{}", NetworkId::D), adam)?;
    }
    t.epoch = parse_meta(&store, "epoch")?;
    t.cursor = parse_meta(&store, "cursor")?;
    t.step = parse_meta(&store, "step")?;
    t.progress = EpochProgress {
        loss_sum: store.require("progress.loss_sum")?.item(),
        steps: parse_meta(&store, "progress.steps")?,
        skipped: parse_meta(&store, "progress.skipped")?,
    };
    let mut rng = ChaCha8Rng::from_seed(unhex(store.meta_value("rng.seed")?)?);
    rng.set_stream(parse_meta(&store, "rng.stream")?);
    rng.set_word_pos(parse_meta(&store, "rng.word_pos")?);
    t.rng = rng;
    let h = store.require("history")?;
    t.history = h
        .data()
        .chunks_exact(HISTORY_COLUMNS)
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            val_score: r[1],
            val_mde: (!r[2].is_nan()).then_some(r[2]),
            mean_loss: r[3],
            steps: r[4] as usize,
            skipped: r[5] as usize,
        })
        .collect();
    Ok(t)
}
