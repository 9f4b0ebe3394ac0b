use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use warpsynth::datagen::{
    generate_dataset, read_expecting, read_mask, read_pnm, write_array, write_pnm, ArrayKind, DatasetConfig,
    DatasetManifest, MANIFEST_NAME,
};
use warpsynth::deform::Mask;
use warpsynth::metrics::{summary_csv, MetricReport};
use warpsynth::networks::TensorStore;
use warpsynth::selftest;
use warpsynth::trainer::{
    evaluate, load_bundle, parse_override, parse_pairs, predict, train, worker_count, Pair, TrainConfig, TrainData,
    INTENSITY_RANGE,
};
use warpsynth::Tensor;

/// Name of the resolved-config snapshot written into every output directory.
const SNAPSHOT: &str = "config.txt";

#[derive(Parser)]
#[command(name = "warpsynth", version, about = "Registration-aware cross-modality image synthesis")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Writes a synthetic dataset with a manifest.
    GenData(Common),
    /// Trains a model configuration on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Scores checkpoints on a dataset split.
    Eval(Common),
    /// Writes the synthesis and both registration maps for one input.
    Infer(Common),
    /// Runs the finite-difference gradient suite.
    Gradcheck(Common),
    /// Runs the gradient, routing and property suites.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Single evaluation worker regardless of WARPSYNTH_THREADS.
    #[arg(long)]
    deterministic: bool,
}

/// Rejected configuration; maps to exit code 1.
#[derive(Debug)]
struct BadConfig(String);

impl std::fmt::Display for BadConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadConfig {}

fn bad_config(msg: impl Into<String>) -> anyhow::Error {
    BadConfig(msg.into()).into()
}

enum Outcome {
    Passed,
    ToleranceViolated,
}

impl Common {
    /// Config file pairs, then overrides, then `--seed`.
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| bad_config(format!("cannot read config {}: {e}", path.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        for s in &self.set {
            pairs.push(parse_override(s)?);
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        Ok(pairs)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| bad_config("`--out` is required"))
    }

    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            worker_count()
        }
    }
}

/// Resolved values of a verb with a fixed key set.
struct Settings {
    values: Vec<(&'static str, String)>,
}

impl Settings {
    /// `keys` lists every accepted key with its default; unknown keys are rejected.
    fn resolve(keys: &[(&'static str, &str)], pairs: &[(String, String)]) -> Result<Self> {
        let mut values: Vec<(&'static str, String)> = keys.iter().map(|&(k, v)| (k, v.to_string())).collect();
        for (k, v) in pairs {
            let slot = values
                .iter_mut()
                .find(|(key, _)| key == k)
                .ok_or_else(|| bad_config(format!("unknown config key `{k}`")))?;
            slot.1 = v.clone();
        }
        Ok(Settings { values })
    }

    fn str(&self, key: &str) -> &str {
        self.values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str()).expect("declared key")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| bad_config(format!("`{key}` has bad value `{v}`")))
    }

    fn required(&self, key: &str) -> Result<&str> {
        match self.str(key) {
            "" => Err(bad_config(format!("`{key}` must be set"))),
            v => Ok(v),
        }
    }

    fn optional(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|v| !v.is_empty())
    }

    fn to_text(&self) -> String {
        self.values.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT), self.to_text())?;
        Ok(())
    }
}

fn gen_data(c: &Common) -> Result<Outcome> {
    let defaults = DatasetConfig::default();
    let (size, train, val, test, seed) = (
        defaults.size.to_string(),
        defaults.train.to_string(),
        defaults.val.to_string(),
        defaults.test.to_string(),
        defaults.seed.to_string(),
    );
    let s = Settings::resolve(
        &[
            ("preset", &defaults.preset),
            ("size", &size),
            ("train", &train),
            ("val", &val),
            ("test", &test),
            ("seed", &seed),
            ("image_dir", ""),
        ],
        &c.pairs()?,
    )?;
    let cfg = DatasetConfig {
        preset: s.str("preset").to_string(),
        size: s.parse("size")?,
        train: s.parse("train")?,
        val: s.parse("val")?,
        test: s.parse("test")?,
        seed: s.parse("seed")?,
        image_dir: s.optional("image_dir").map(PathBuf::from),
    };
    cfg.preset()?;
    let out = c.out()?;
    s.snapshot(out)?;
    let m = generate_dataset(&cfg, out)?;
    println!(
        "wrote {} train, {} val, {} test pairs to {}",
        m.split("train").len(),
        m.split("val").len(),
        m.split("test").len(),
        out.display()
    );
    Ok(Outcome::Passed)
}

fn train_verb(c: &Common, resume: bool) -> Result<Outcome> {
    let cfg = TrainConfig::from_pairs(&c.pairs()?)?;
    let data_dir = cfg.data.clone().ok_or_else(|| bad_config("`data` must be set"))?;
    let out = c.out()?;
    let data = TrainData::load(&data_dir, cfg.train_limit)?;
    let outcome = train(&cfg, &data, out, resume)?;
    for r in &outcome.history {
        let mde = r.val_mde.map(|v| format!(" val_mde {v:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.6}  val {:.6}{mde}  steps {} skipped {}",
            r.epoch, r.mean_loss, r.val_score, r.steps, r.skipped
        );
    }
    println!("best epoch {} -> {}", outcome.best_epoch, outcome.best.display());
    Ok(Outcome::Passed)
}

/// `label=path` or a bare path labelled by the objective stored in the checkpoint.
fn checkpoint_label(entry: &str) -> Result<(String, PathBuf)> {
    if let Some((label, path)) = entry.split_once('=') {
        return Ok((label.trim().to_string(), PathBuf::from(path.trim())));
    }
    let path = PathBuf::from(entry);
    let store = TensorStore::load(&path)?;
    Ok((store.meta_value("objective")?.to_string(), path))
}

fn eval(c: &Common) -> Result<Outcome> {
    let s = Settings::resolve(&[("data", ""), ("split", "test"), ("checkpoints", "")], &c.pairs()?)?;
    let root = PathBuf::from(s.required("data")?);
    let split = s.str("split");
    let entries: Vec<&str> = s.required("checkpoints")?.split(',').map(str::trim).filter(|e| !e.is_empty()).collect();
    let out = c.out()?;
    s.snapshot(out)?;

    let manifest = DatasetManifest::load(&root.join(MANIFEST_NAME))?;
    let files = manifest.split(split);
    if files.is_empty() {
        return Err(bad_config(format!("split `{split}` of {} is empty", root.display())));
    }
    let samples = manifest.load_split(&root, split)?;
    let threads = c.threads();
    let mut reports = Vec::new();
    for entry in entries {
        let (label, path) = checkpoint_label(entry)?;
        let bundle = load_bundle(&path).with_context(|| format!("loading {}", path.display()))?;
        let mut report = MetricReport::new(label.clone());
        for (f, m) in files.iter().zip(evaluate(&bundle, &samples, threads)?) {
            let id = Path::new(&f.x).file_stem().and_then(|s| s.to_str()).unwrap_or(&f.x).to_string();
            report.push(id, m);
        }
        fs::write(out.join(format!("{label}.csv")), report.to_csv())?;
        reports.push(report);
    }
    let summary = summary_csv(&reports);
    fs::write(out.join("summary.csv"), &summary)?;
    let json: Vec<_> = reports.iter().map(MetricReport::to_json).collect();
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json)?)?;
    print!("{summary}");
    Ok(Outcome::Passed)
}

/// PPM/PGM files hold `[0,255]` intensities; anything else must be a flat image array.
fn read_image(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let t = if matches!(ext, "ppm" | "pgm") { read_pnm(path)? } else { read_expecting(path, ArrayKind::Image)? };
    Ok(t)
}

fn infer(c: &Common) -> Result<Outcome> {
    let s = Settings::resolve(
        &[("checkpoint", ""), ("input", ""), ("label", ""), ("label_mask", ""), ("format", "both")],
        &c.pairs()?,
    )?;
    let format = s.str("format");
    let (ppm, flat) = match format {
        "ppm" => (true, false),
        "array" => (false, true),
        "both" => (true, true),
        _ => return Err(bad_config(format!("`format` must be ppm, array or both, got `{format}`"))),
    };
    let bundle = load_bundle(Path::new(s.required("checkpoint")?))?;
    let x = read_image(Path::new(s.required("input")?))?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let y = match s.optional("label") {
        Some(p) => read_image(Path::new(p))?,
        None if bundle.spec.registration => {
            return Err(bad_config("this checkpoint registers labels; `label` must be set"))
        }
        None => Tensor::from_fn(&[bundle.spec.label_channels, h, w], |_| 0.0),
    };
    let y_mask = match s.optional("label_mask") {
        Some(p) => read_mask(Path::new(p))?,
        None => Mask::full(h, w),
    };
    let out = c.out()?;
    s.snapshot(out)?;

    let pair =
        Pair { x: x.map(|v| v / INTENSITY_RANGE), x_mask: Mask::full(h, w), y: y.map(|v| v / INTENSITY_RANGE), y_mask };
    let p = predict(&bundle, &pair)?;
    let synthesis = p.f_x.map(|v| v * INTENSITY_RANGE);
    if flat {
        write_array(&out.join("synthesis.wsb"), ArrayKind::Image, &synthesis)?;
    }
    if ppm {
        let name = if synthesis.shape()[0] == 1 { "synthesis.pgm" } else { "synthesis.ppm" };
        write_pnm(&out.join(name), &synthesis)?;
    }
    for (name, d) in [("d_cross", &p.d_cross), ("d_intra", &p.d_intra)] {
        if let Some(d) = d {
            write_array(&out.join(format!("{name}.wsb")), ArrayKind::Deformation, d)?;
        }
    }
    if let Some([angle, ty, tx]) = p.rigid {
        println!("rigid angle {angle:.6} rad, shift ({ty:.4}, {tx:.4}) px");
    }
    println!("wrote outputs to {}", out.display());
    Ok(Outcome::Passed)
}

fn gradient_report(seeds: u64) -> Result<(String, bool)> {
    let cases = selftest::gradient_suite(seeds)?;
    let mut text = String::new();
    let mut worst: f64 = 0.0;
    for case in &cases {
        worst = worst.max(case.max_rel_err);
        let flag = if case.passed() { "ok  " } else { "FAIL" };
        let _ = writeln!(text, "{flag} {:<36} {:.3e}", case.name, case.max_rel_err);
    }
    let passed = cases.iter().all(selftest::GradCase::passed);
    let _ = writeln!(
        text,
        "{} cases x {seeds} seeds, max rel. error {worst:.3e} (tolerance {:.0e})",
        cases.len(),
        selftest::GRADIENT_TOLERANCE
    );
    Ok((text, passed))
}

fn finish(c: &Common, s: &Settings, report_name: &str, text: &str, passed: bool) -> Result<Outcome> {
    print!("{text}");
    if let Some(out) = &c.out {
        s.snapshot(out)?;
        fs::write(out.join(report_name), text)?;
    }
    Ok(if passed { Outcome::Passed } else { Outcome::ToleranceViolated })
}

fn gradcheck(c: &Common) -> Result<Outcome> {
    let s = Settings::resolve(&[("seeds", "20")], &c.pairs()?)?;
    let (text, passed) = gradient_report(s.parse("seeds")?)?;
    finish(c, &s, "gradcheck.txt", &text, passed)
}

fn selftest_verb(c: &Common) -> Result<Outcome> {
    let s = Settings::resolve(&[("seed", "0"), ("gradient_seeds", "20")], &c.pairs()?)?;
    let seed: u64 = s.parse("seed")?;
    let (mut text, mut passed) = gradient_report(s.parse("gradient_seeds")?)?;

    let routes = selftest::routing_suite(seed)?;
    for r in &routes {
        let flag = if r.passed() { "ok  " } else { "FAIL" };
        let _ =
            writeln!(text, "{flag} route {} {}: reached {:?}, expected {:?}", r.config, r.term, r.reached, r.expected);
    }
    passed &= routes.iter().all(selftest::RouteCheck::passed);

    let checks = [
        selftest::diffeomorphism_suite(seed)?,
        selftest::rigidity_suite(seed)?,
        selftest::metric_identity_suite(seed)?,
        selftest::equivariance_suite(seed)?,
        selftest::selection_suite()?,
    ];
    for p in &checks {
        let flag = if p.passed { "ok  " } else { "FAIL" };
        let _ = writeln!(text, "{flag} {}: {}", p.name, p.detail);
    }
    passed &= checks.iter().all(|p| p.passed);
    let _ = writeln!(text, "{}", if passed { "all suites passed" } else { "some suites failed" });
    finish(c, &s, "selftest.txt", &text, passed)
}

fn run(cli: Cli) -> Result<Outcome> {
    match &cli.verb {
        Verb::GenData(c) => gen_data(c),
        Verb::Train { common, resume } => train_verb(common, *resume),
        Verb::Eval(c) => eval(c),
        Verb::Infer(c) => infer(c),
        Verb::Gradcheck(c) => gradcheck(c),
        Verb::Selftest(c) => selftest_verb(c),
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<BadConfig>() || matches!(e.downcast_ref::<warpsynth::Error>(), Some(warpsynth::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceViolated) => ExitCode::from(3),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 1 } else { 2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn settings_reject_unknown_keys_by_name() {
        let err = Settings::resolve(&[("a", "1")], &[("b".into(), "2".into())]).err().unwrap();
        assert!(is_config_error(&err));
        assert!(err.to_string().contains("`b`"));
    }

    #[test]
    fn settings_snapshot_round_trips() {
        let s = Settings::resolve(&[("a", "1"), ("b", "")], &[("b".into(), "x y".into())]).unwrap();
        let again = Settings::resolve(&[("a", "9"), ("b", "")], &parse_pairs(&s.to_text()).unwrap()).unwrap();
        assert_eq!(again.values, s.values);
    }

    #[test]
    fn library_config_errors_are_classified() {
        let err: anyhow::Error = warpsynth::Error::Config("x".into()).into();
        assert!(is_config_error(&err));
        let err = anyhow!(warpsynth::Error::NonFinite("loss".into())).context("training");
        assert!(!is_config_error(&err));
    }
}
