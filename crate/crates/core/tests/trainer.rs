use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use warpsynth::datagen::{generate_dataset, make_pair, procedural_image, DatasetConfig, LoadedSample};
use warpsynth::deform::{grid, Mask, Preset, SimDeformParams};
use warpsynth::networks::{ModelBundle, NetworkId};
use warpsynth::selftest::wake_heads;
use warpsynth::trainer::{
    build_step, discriminator_step, generator_step, load_bundle, load_checkpoint, predict, sample_window,
    save_checkpoint, train, validation_score, Nets, Pair, StepDraws, TrainConfig, TrainData, Trainer,
};
use warpsynth::{Tape, Tensor};

const N: usize = 32;

fn sample(seed: u64, preset: Preset) -> LoadedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s =
        make_pair(procedural_image(&mut rng, N, N).unwrap(), &SimDeformParams::preset_for_size(preset, N), &mut rng)
            .unwrap();
    LoadedSample { x: s.x, y_tilde: s.y_tilde, y_mask: s.y_mask, y_true: s.y_true, d_true: s.deformation.inverse }
}

fn pair(seed: u64) -> Pair {
    Pair::from_sample(&sample(seed, Preset::LargeRandom))
}

fn config(objective: &str) -> TrainConfig {
    TrainConfig::parse(&format!("objective = {objective}\nunet_features = 4,8\nencoder_features = 4,8\nseed = 3"))
        .unwrap()
}

#[test]
fn patch_acceptance_matches_window_count_oracle() {
    // Left half valid; a window is accepted when at least `threshold` of it is valid.
    let (h, w, size, threshold) = (20, 40, 10, 0.6);
    let mask = Mask::from_fn(h, w, |_, c| c < w / 2);
    let lefts = w - size + 1;
    let accepted_lefts =
        (0..lefts).filter(|&l| ((w / 2).saturating_sub(l).min(size) as f64) / size as f64 >= threshold).count();
    let p = accepted_lefts as f64 / lefts as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let hits = (0..draws).filter(|_| sample_window(&mask, size, threshold, 1, &mut rng).unwrap().is_some()).count();
    let sigma = (p * (1.0 - p) / draws as f64).sqrt();
    let freq = hits as f64 / draws as f64;
    assert!((freq - p).abs() < 3.0 * sigma, "frequency {freq} vs {p} (sigma {sigma})");
}

#[test]
fn noreg_loss_is_plain_l1_against_the_label() {
    let cfg = config("NoReg");
    let mut t = Trainer::new(cfg.clone(), 3, 3).unwrap();
    let p = pair(1);
    let pred = predict(&t.bundle, &p).unwrap();
    let both = p.y_mask.and(&pred.mask).unwrap();
    let mut sum = 0.0;
    for ch in 0..3 {
        for q in 0..N * N {
            if both.as_slice()[q] {
                sum += (pred.f_x.data()[ch * N * N + q] - p.y.data()[ch * N * N + q]).abs();
            }
        }
    }
    let expected = sum / (3 * both.count()) as f64;
    let report = generator_step(&mut t.bundle, &mut t.opt, &p, &cfg, &StepDraws::none()).unwrap();
    assert_eq!(report.terms.keys().collect::<Vec<_>>(), ["sim"]);
    assert!((report.total - expected).abs() < 1e-12, "{} vs {expected}", report.total);
    assert!((pred.score.unwrap() - expected).abs() < 1e-12);
}

#[test]
fn zero_initialized_heads_start_at_identity() {
    let t = Trainer::new(config("EqSim+Com"), 3, 3).unwrap();
    let pred = predict(&t.bundle, &pair(2)).unwrap();
    let id = grid(N, N);
    assert_eq!(pred.d_cross.unwrap(), id);
    assert_eq!(pred.d_intra.unwrap(), id);
    assert_eq!(pred.overall.unwrap(), id);
    assert_eq!(pred.rigid.unwrap(), [0.0; 3]);
}

#[test]
fn first_losses_are_finite_and_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for obj in ["EqSim", "DefSim+Com", "EqSim+Com+EqAdv", "DefSim+DefCondAdv+Aug", "DefSim+DefUncondAdv", "NoReg+Aug"] {
        let cfg = config(obj);
        let mut t = Trainer::new(cfg.clone(), 3, 3).unwrap();
        let p = pair(5);
        let draws = StepDraws::sample(&cfg, &p, &mut rng);
        let report = generator_step(&mut t.bundle, &mut t.opt, &p, &cfg, &draws).unwrap();
        assert!(report.total.is_finite() && report.total > 0.0, "{obj}: {report:?}");
        assert_eq!(report.terms.len(), cfg.objective.required_terms().len());
        if cfg.objective.adversarial.is_some() {
            let d = discriminator_step(&mut t.bundle, &mut t.opt, &p, &cfg, &StepDraws::sample(&cfg, &p, &mut rng))
                .unwrap();
            assert!((d - 2.0 * 2f64.ln()).abs() < 0.5, "{obj}: discriminator loss {d}");
        }
    }
}

fn snapshot(bundle: &ModelBundle, ids: &[NetworkId]) -> Vec<Vec<Tensor>> {
    ids.iter().map(|&id| bundle.params(id).unwrap().tensors().to_vec()).collect()
}

#[test]
fn turn_taking_freezes_the_other_side() {
    let cfg = config("EqSim+Com+EqAdv");
    let mut t = Trainer::new(cfg.clone(), 3, 3).unwrap();
    wake_heads(&mut t.bundle, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = pair(7);
    let gen = [NetworkId::F, NetworkId::HRig, NetworkId::HSvf, NetworkId::GSvf];
    let (g0, d0) = (snapshot(&t.bundle, &gen), snapshot(&t.bundle, &[NetworkId::D]));
    generator_step(&mut t.bundle, &mut t.opt, &p, &cfg, &StepDraws::sample(&cfg, &p, &mut rng)).unwrap();
    let (g1, d1) = (snapshot(&t.bundle, &gen), snapshot(&t.bundle, &[NetworkId::D]));
    assert_eq!(d0, d1);
    for (a, b) in g0.iter().zip(&g1) {
        assert_ne!(a, b);
    }
    let sigma = t.bundle.d.as_ref().unwrap().spectral[0].sigma;
    discriminator_step(&mut t.bundle, &mut t.opt, &p, &cfg, &StepDraws::sample(&cfg, &p, &mut rng)).unwrap();
    assert_eq!(snapshot(&t.bundle, &gen), g1);
    assert_ne!(snapshot(&t.bundle, &[NetworkId::D]), d1);
    assert_ne!(t.bundle.d.as_ref().unwrap().spectral[0].sigma, sigma);
}

#[test]
fn generator_backward_leaves_discriminator_gradients_zero() {
    let cfg = config("DefSim+Com+DefCondAdv");
    let mut t = Trainer::new(cfg.clone(), 3, 3).unwrap();
    wake_heads(&mut t.bundle, 2).unwrap();
    let p = pair(8);
    let draws = StepDraws::sample(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(1));
    let tape = Tape::new();
    let nets = Nets::bind(&t.bundle, &tape, |_| true);
    let graph = build_step(&t.bundle, &nets, &tape, &p, &cfg, &draws, true).unwrap();
    let (total, _) = warpsynth::losses::total_loss(&graph.terms, &cfg.weights, &cfg.objective).unwrap();
    // Without the adversarial term nothing may reach D.
    let no_adv = total.sub(graph.terms.adv.unwrap().scale(cfg.weights.adv)).unwrap();
    tape.backward(no_adv).unwrap();
    assert!(!nets.get(NetworkId::D).unwrap().has_grad());
    assert!(nets.get(NetworkId::F).unwrap().has_grad());
    tape.zero_grad();
    tape.backward(graph.d_loss.unwrap()).unwrap();
    for id in [NetworkId::F, NetworkId::HRig, NetworkId::HSvf, NetworkId::GSvf] {
        assert!(!nets.get(id).unwrap().has_grad(), "{id}");
    }
    assert!(nets.get(NetworkId::D).unwrap().has_grad());
}

#[test]
fn augmentation_uses_the_probe_distribution() {
    let cfg = config("EqSim+Aug");
    let p = pair(9);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut hist_a, mut hist_t) = ([0usize; 4], [0usize; 4]);
    let (mut ang_a, mut ang_t, mut flips_a, mut flips_t) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..4000 {
        let d = StepDraws::sample(&cfg, &p, &mut rng);
        let (a, t) = (d.augment.unwrap(), d.transform.unwrap());
        hist_a[a.quarter_turns as usize] += 1;
        hist_t[t.quarter_turns as usize] += 1;
        ang_a += a.angle.abs() / 4000.0;
        ang_t += t.angle.abs() / 4000.0;
        flips_a += a.flip_rows as usize + a.flip_cols as usize;
        flips_t += t.flip_rows as usize + t.flip_cols as usize;
        assert!(a.angle.abs() <= 15f64.to_radians());
    }
    for k in 0..4 {
        assert!((hist_a[k] as f64 - hist_t[k] as f64).abs() < 150.0, "{hist_a:?} {hist_t:?}");
    }
    assert!((ang_a - ang_t).abs() < 0.01 && (ang_a - 7.5f64.to_radians()).abs() < 0.01);
    assert!((flips_a as f64 - flips_t as f64).abs() < 250.0);
}

#[test]
fn validation_score_rules() {
    let t = Trainer::new(config("DefSim"), 3, 3).unwrap();
    let p = pair(10);
    // A label equal to the prediction scores zero while both registrations are identities.
    let perfect = Pair { y: predict(&t.bundle, &p).unwrap().f_x, y_mask: Mask::full(N, N), ..p.clone() };
    assert_eq!(validation_score(&t.bundle, std::slice::from_ref(&perfect)).unwrap(), 0.0);
    let a = validation_score(&t.bundle, &[p.clone(), perfect.clone()]).unwrap();
    assert_eq!(a, validation_score(&t.bundle, &[p.clone(), perfect]).unwrap());
    assert!(validation_score(&t.bundle, &[]).is_err());

    // Without registration the score ignores deformations, even when one would help.
    let noreg = Trainer::new(config("NoReg"), 3, 3).unwrap();
    let pred = predict(&noreg.bundle, &p).unwrap();
    assert!(pred.overall.is_none());
    assert_eq!(validation_score(&noreg.bundle, std::slice::from_ref(&p)).unwrap(), pred.score.unwrap());
}

fn run_steps(t: &mut Trainer, data: &[Pair], steps: usize) -> Vec<String> {
    let mut lines = Vec::new();
    while lines.len() < steps {
        let done = t
            .run_epoch(data, Some(steps - lines.len()), |r| {
                lines.push(r.to_json_line());
                Ok(())
            })
            .unwrap();
        if done {
            t.finish_epoch(&data[..1], None).unwrap();
        }
    }
    lines
}

#[test]
fn fixed_seed_runs_are_bit_identical_and_resume_exactly() {
    let cfg = config("EqSim+Com+EqAdv+Aug");
    let data: Vec<Pair> = (0..3).map(|i| pair(20 + i)).collect();
    let mut a = Trainer::new(cfg.clone(), 3, 3).unwrap();
    let mut b = Trainer::new(cfg.clone(), 3, 3).unwrap();
    let la = run_steps(&mut a, &data, 3);
    assert_eq!(la, run_steps(&mut b, &data, 3));

    // Interrupt mid-epoch, reload, and compare the next steps with an uninterrupted run.
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("ckpt");
    let mut c = Trainer::new(cfg.clone(), 3, 3).unwrap();
    run_steps(&mut c, &data, 2);
    save_checkpoint(&c, &base).unwrap();
    let mut resumed = load_checkpoint(cfg.clone(), &base).unwrap();
    assert_eq!((resumed.cursor, resumed.step), (2, 2));
    let tail = run_steps(&mut resumed, &data, 3);
    let full = run_steps(&mut c, &data, 3);
    assert_eq!(tail, full);
    assert_eq!(resumed.history, c.history);
    assert!(load_checkpoint(config("EqSim"), &base).is_err());
}

#[test]
fn train_writes_logs_and_the_selected_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let ds = DatasetConfig { preset: "SC".into(), size: N, train: 4, val: 2, test: 1, seed: 2, image_dir: None };
    generate_dataset(&ds, &data_dir).unwrap();
    let data = TrainData::load(&data_dir, 3).unwrap();
    assert_eq!((data.train.len(), data.val.len()), (3, 2));
    let cfg = TrainConfig { epochs: 2, ..config("DefSim+Com") };
    let out = dir.path().join("run");
    let outcome = train(&cfg, &data, &out, false).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.history.iter().all(|r| r.val_mde.is_some() && r.steps == 3));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert_eq!(TrainConfig::parse(&std::fs::read_to_string(out.join("config.txt")).unwrap()).unwrap(), cfg);
    let best = load_bundle(&outcome.best).unwrap();
    let expected = outcome.history[outcome.best_epoch - 1].val_score;
    assert_eq!(validation_score(&best, &data.val).unwrap(), expected);

    // Resuming a finished run with more epochs continues from its last checkpoint.
    let more = TrainConfig { epochs: 3, ..cfg };
    let again = train(&more, &data, &out, true).unwrap();
    assert_eq!(again.history[..2], outcome.history[..]);
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 9);
}
