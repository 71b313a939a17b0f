use std::collections::BTreeMap;

use stsn::harness::{
    ablate, dual_train, emit_report, evaluate, evaluate_with, learning_rate, pretrain_reconstruction, replicas, train,
    Ablation, Checkpoint, MetricsLog, Prediction, Regime, Scorer, TrainConfig, TrainOptions, Trainer,
};
use stsn::image::read_pgm;
use stsn::matrixgen::{generate_set, MatrixProblem, ProblemType};
use stsn::model::Stsn;
use stsn::Error;

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("image_size", "48"),
        ("encoder_channels", "4"),
        ("decoder_channels", "4"),
        ("decoder_layers", "1"),
        ("slots", "3"),
        ("slot_dim", "8"),
        ("layers", "1"),
        ("heads", "2"),
        ("head_dim", "4"),
        ("mlp_dim", "16"),
        ("dropout", "0"),
        ("batch_size", "2"),
        ("warmup_steps", "2"),
        ("lr", "1e-3"),
        ("epochs", "2"),
        ("seed", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn problems(t: ProblemType, n: usize, offset: u64) -> Vec<MatrixProblem> {
    generate_set(&[t], offset, n, 77, 48).unwrap()
}

fn quiet() -> TrainOptions {
    TrainOptions { eval_every: 0, ..TrainOptions::new() }
}

// ---- learning rate and configuration -----------------------------------------

#[test]
fn warmup_endpoints() {
    assert_eq!(learning_rate(4e-4, 75_000, 0), 0.0);
    assert_eq!(learning_rate(4e-4, 75_000, 75_000), 4e-4);
    assert_eq!(learning_rate(4e-4, 75_000, 200_000), 4e-4);
    assert!((learning_rate(4e-4, 75_000, 37_500) - 2e-4).abs() < 1e-18);
    assert_eq!(learning_rate(4e-4, 0, 0), 4e-4);
}

#[test]
fn defaults_follow_the_training_table() {
    let c = TrainConfig::default();
    assert_eq!((c.batch_size, c.lr, c.warmup_steps, c.layers, c.dropout), (16, 4e-4, 75_000, 6, 0.1));
    assert_eq!(c.lambda, 1000.0);
    assert_eq!(c.regime, Regime::Standard);
    assert!(c.ablations().is_empty());
}

#[test]
fn key_value_and_json_configs() {
    let kv = TrainConfig::parse("# desk run\nlambda = 1\n\nslots=4  # fewer\nregime = dual_train\nno_tcn = true\n").unwrap();
    assert_eq!((kv.lambda, kv.slots, kv.regime, kv.no_tcn), (1.0, 4, Regime::DualTrain, true));
    let json = TrainConfig::parse(r#"{"lambda": 1, "slots": 4, "regime": "dual_train", "no_tcn": true}"#).unwrap();
    assert_eq!(json, kv);
    assert!(matches!(TrainConfig::parse("slotz = 4"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("slots = many"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse(r#"{"slotz": 4}"#), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("no equals sign"), Err(Error::Config(_))));
}

#[test]
fn every_field_is_settable() {
    let base = TrainConfig::default();
    let map = match serde_json::to_value(&base).unwrap() {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    };
    for (key, value) in map {
        let text = match &value {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        let mut c = TrainConfig::default();
        c.set(&key, &text).unwrap_or_else(|e| panic!("{key}: {e}"));
        assert_eq!(c, base, "{key}");
    }
}

#[test]
fn precedence_is_file_then_env_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "seed = 3\nlr = 0.1\n").unwrap();
    let only_file = TrainConfig::resolve(Some(&path), None, &[]).unwrap();
    assert_eq!((only_file.seed, only_file.lr), (3, 0.1));
    let env = TrainConfig::resolve(Some(&path), Some("5"), &[]).unwrap();
    assert_eq!((env.seed, env.lr), (5, 0.1));
    let flags = [("seed".to_string(), "9".to_string()), ("lr".to_string(), "0.2".to_string())];
    let flag = TrainConfig::resolve(Some(&path), Some("5"), &flags).unwrap();
    assert_eq!((flag.seed, flag.lr), (9, 0.2));
    assert!(TrainConfig::resolve(Some(&path), Some("five"), &[]).is_err());
    assert!(TrainConfig::resolve(None, None, &[("batch_size".into(), "0".into())]).is_err());
}

#[test]
fn architecture_hash_ignores_optimisation_settings() {
    let a = tiny();
    let mut b = a.clone();
    b.set("lr", "0.5").unwrap();
    b.set("dropout", "0.3").unwrap();
    b.set("seed", "11").unwrap();
    assert_eq!(a.architecture_hash(), b.architecture_hash());
    assert_ne!(a.architecture_hash(), a.clone().with(Ablation::NoTcn).architecture_hash());
    let mut c = a.clone();
    c.set("slots", "4").unwrap();
    assert_ne!(a.architecture_hash(), c.architecture_hash());
}

// ---- training ---------------------------------------------------------------

#[test]
fn logged_loss_decomposes_and_runs_repeat_exactly() {
    let data = problems(ProblemType::Count, 4, 0);
    let val = problems(ProblemType::Count, 2, 100);
    let opts = TrainOptions::new();
    let a = train(&tiny(), &data, &val, &opts).unwrap();
    let b = train(&tiny(), &data, &val, &opts).unwrap();
    assert_eq!(a.log.steps.len(), 4);
    assert_eq!(a.log.epochs.len(), 2);
    assert!(a.log.epochs.iter().all(|e| e.val_accuracy.is_some()));
    assert!(a.log.max_decomposition_error() <= 1e-5, "{}", a.log.max_decomposition_error());
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.log.steps[0].lr, learning_rate(1e-3, 2, 1));
    assert_eq!(a.log.steps[3].lr, 1e-3);

    let mut other = tiny();
    other.set("seed", "6").unwrap();
    let c = train(&other, &data, &val, &opts).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn dual_training_with_no_extra_set_is_plain_training() {
    let data = problems(ProblemType::Logic, 4, 0);
    let a = train(&tiny(), &data, &[], &quiet()).unwrap();
    let b = dual_train(&tiny(), &data, &[], &[], &quiet()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
}

#[test]
fn extra_batches_reach_only_the_perceptual_branch() {
    let mut cfg = tiny();
    cfg.set("epochs", "1").unwrap();
    cfg.set("batch_size", "3").unwrap();
    let data = problems(ProblemType::Location, 3, 0);
    let extra = problems(ProblemType::Count, 3, 50);
    let plain = train(&cfg, &data, &[], &quiet()).unwrap();
    let dual = dual_train(&cfg, &data, &extra, &[], &quiet()).unwrap();
    let (mut reasoner, mut perceptual_changed) = (0, 0);
    for (id, name, t) in plain.last.params.iter() {
        let other = dual.last.params.get(id);
        if Stsn::is_perceptual(name) {
            perceptual_changed += (t.data() != other.data()) as usize;
        } else {
            assert_eq!(t.data(), other.data(), "{name}");
            reasoner += 1;
        }
    }
    assert!(reasoner > 0);
    assert!(perceptual_changed > 0);

    // One step mixing both batches: λ·(recon_task + recon_extra)/2 + task.
    let s = &dual.log.steps[0];
    assert_eq!(dual.log.steps.len(), 1);
    assert!((s.total - (cfg.lambda * s.recon + s.task)).abs() <= 1e-5 * s.total.abs().max(1.0), "{s:?}");
    let p = &plain.log.steps[0];
    assert_eq!(p.task, s.task);
    assert_ne!(p.recon, s.recon);
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let mut cfg = tiny();
    cfg.set("lambda", "1e300").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { dump_dir: Some(dir.path().to_path_buf()), ..quiet() };
    let err = train(&cfg, &problems(ProblemType::Count, 2, 0), &[], &opts).err().expect("training must abort");
    let msg = match err {
        Error::Numeric(m) => m,
        e => panic!("unexpected error {e}"),
    };
    assert!(msg.contains("non-finite loss at step 0"), "{msg}");
    let dump = std::fs::read_to_string(dir.path().join("nonfinite_step0.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert!(v["param_norms"].as_object().unwrap().contains_key("encoder.conv0.w"));

    // Without a dump directory the diagnostics travel in the message.
    let err = train(&cfg, &problems(ProblemType::Count, 2, 0), &[], &quiet()).err().unwrap();
    assert!(err.to_string().contains("param_norms"));
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(matches!(train(&tiny(), &[], &[], &quiet()), Err(Error::Contract(_))));
}

// ---- pretraining --------------------------------------------------------------

#[test]
fn pretraining_feeds_fine_tuning() {
    let mut cfg = tiny();
    cfg.set("epochs", "6").unwrap();
    let images = problems(ProblemType::Location, 4, 0);
    let (ckpt, log) = pretrain_reconstruction(&cfg, &images).unwrap();
    assert_eq!(log.lambda, 1.0);
    assert!(log.steps.iter().all(|s| s.task == 0.0 && s.total == s.recon));
    let first = log.epochs[0].mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(last < first, "reconstruction loss {first} -> {last}");
    assert!(ckpt.optimizer.is_none());
    assert!(ckpt.params.iter().all(|(_, n, _)| Stsn::is_perceptual(n)));

    let fresh = Trainer::new(cfg.clone()).unwrap();
    let mut tuned = Trainer::new(cfg.clone()).unwrap();
    let copied = tuned.load_perceptual(&ckpt).unwrap();
    assert_eq!(copied, ckpt.params.len());
    for (id, name, t) in tuned.store.iter() {
        if Stsn::is_perceptual(name) {
            assert_eq!(t.data(), ckpt.params.get(ckpt.params.find(name).unwrap()).data());
        } else {
            assert_eq!(t.data(), fresh.store.get(id).data(), "{name} must stay freshly initialised");
        }
    }

    let mut wrong = cfg.clone();
    wrong.set("slot_dim", "12").unwrap();
    assert!(Trainer::new(wrong).unwrap().load_perceptual(&ckpt).is_err());

    let opts = TrainOptions { init: Some(ckpt), ..quiet() };
    let mut short = cfg.clone();
    short.set("epochs", "1").unwrap();
    assert!(train(&short, &images, &[], &opts).is_ok());
}

// ---- checkpoints and evaluation ---------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = problems(ProblemType::Count, 4, 0);
    let out = train(&tiny(), &data, &[], &quiet()).unwrap();
    let bytes = out.last.to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    out.last.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let back = Checkpoint::load(&path, Some(&tiny())).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.step, 4);
    assert_eq!(back.config, out.last.config);

    let before = evaluate(&out.last, None, &data).unwrap();
    let after = evaluate(&back, Some(&tiny()), &data).unwrap();
    assert_eq!(before, after);

    // Resuming continues from the same optimiser state.
    let t = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(t.step, 4);
    assert_eq!(t.adam.step(), out.last.optimizer.as_ref().unwrap().step());
}

#[test]
fn mismatched_architecture_is_refused() {
    let ckpt = Trainer::new(tiny()).unwrap().checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    let mut other = tiny();
    other.set("slots", "4").unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes, Some(&other)), Err(Error::Config(_))));
    assert!(matches!(evaluate(&ckpt, Some(&other), &problems(ProblemType::Count, 1, 0)), Err(Error::Config(_))));
    let mut seed_only = tiny();
    seed_only.set("seed", "123").unwrap();
    assert!(Checkpoint::from_bytes(&bytes, Some(&seed_only)).is_ok());
}

#[test]
fn corrupt_checkpoints_are_errors() {
    let bytes = Trainer::new(tiny()).unwrap().checkpoint().to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], None), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long, None), Err(Error::Format(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic, None), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version, None), Err(Error::Format(_))));
    let mut hash = bytes.clone();
    hash[12] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&hash, None), Err(Error::Format(_))));
    assert!(Checkpoint::from_bytes(b"", None).is_err());
}

struct Oracle;

impl Scorer for Oracle {
    fn predict(&mut self, _: usize, p: &MatrixProblem) -> stsn::Result<Prediction> {
        let scores = (0..p.candidates.len()).map(|i| if i == p.answer { 1.0 } else { 0.0 }).collect();
        Ok(Prediction { scores, recon: None })
    }
}

struct First;

impl Scorer for First {
    fn predict(&mut self, _: usize, p: &MatrixProblem) -> stsn::Result<Prediction> {
        Ok(Prediction { scores: vec![0.0; p.candidates.len()], recon: Some(0.5) })
    }
}

#[test]
fn perfect_scorer_scores_everything() {
    let mut data = problems(ProblemType::Logic, 5, 0);
    data.extend(problems(ProblemType::Count, 3, 0));
    let r = evaluate_with(&mut Oracle, &data).unwrap();
    assert_eq!(r.accuracy(), 1.0);
    assert_eq!(r.total(), 8);
    assert_eq!(r.per_type["logic"], (5, 5));
    assert_eq!(r.per_type["count"], (3, 3));
    assert_eq!(r.mean_recon, None);
}

#[test]
fn per_type_breakdown_matches_overall() {
    let mut data = problems(ProblemType::Logic, 20, 0);
    data.extend(problems(ProblemType::Location, 12, 0));
    data.extend(problems(ProblemType::Count, 8, 0));
    let r = evaluate_with(&mut First, &data).unwrap();
    let expected_correct = data.iter().filter(|p| p.answer == 0).count();
    assert_eq!(r.accuracy(), expected_correct as f64 / 40.0);
    let weighted: f64 = ProblemType::ALL
        .iter()
        .map(|&t| r.type_accuracy(t).unwrap() * r.per_type[t.name()].1 as f64)
        .sum::<f64>()
        / r.total() as f64;
    assert!((weighted - r.accuracy()).abs() < 1e-12);
    assert_eq!(r.mean_recon, Some(0.5));
}

#[test]
fn untrained_model_is_at_chance() {
    let mut cfg = tiny();
    cfg.set("encoder_channels", "2").unwrap();
    cfg.set("decoder_channels", "2").unwrap();
    cfg.set("slots", "2").unwrap();
    let mut data = Vec::new();
    for t in ProblemType::ALL {
        data.extend(problems(t, 700, 1000));
    }
    let r = Trainer::new(cfg).unwrap().evaluate(&data).unwrap();
    let n = r.total() as f64;
    let sd = (0.125 * 0.875 / n).sqrt();
    println!("untrained accuracy {:.4} on {} problems", r.accuracy(), r.total());
    assert!((r.accuracy() - 0.125).abs() <= 3.0 * sd, "{} vs 0.125 ± {}", r.accuracy(), 3.0 * sd);
}

#[test]
fn evaluation_is_repeatable() {
    let t = Trainer::new(tiny()).unwrap();
    let data = problems(ProblemType::Location, 3, 0);
    assert_eq!(t.evaluate(&data).unwrap(), t.evaluate(&data).unwrap());
}

// ---- ablations and replicas ---------------------------------------------------------

#[test]
fn ablate_takes_exactly_one_new_flag() {
    let d = problems(ProblemType::Count, 2, 0);
    let err = |flags: &[Ablation], cfg: &TrainConfig| ablate(cfg, flags, &d, &[], &d, &quiet()).err().unwrap();
    assert!(matches!(err(&[], &tiny()), Error::Config(_)));
    assert!(matches!(err(&[Ablation::NoTcn, Ablation::NoDropout], &tiny()), Error::Config(_)));
    assert!(matches!(err(&[Ablation::NoTcn], &tiny().with(Ablation::NoTcn)), Error::Config(_)));
}

#[test]
fn no_dropout_on_a_dropout_free_config_changes_nothing() {
    let d = problems(ProblemType::Count, 2, 0);
    let mut cfg = tiny();
    cfg.set("epochs", "1").unwrap();
    let runs = ablate(&cfg, &[Ablation::NoDropout], &d, &[], &d, &quiet()).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!((runs[0].name.as_str(), runs[1].name.as_str()), ("baseline", "no_dropout"));
    assert_eq!(runs[0].log.steps, runs[1].log.steps);
    assert_eq!(runs[0].test, runs[1].test);
    assert!(runs[1].log.test_accuracy.contains_key("count"));
}

#[test]
fn ablation_flags_reshape_the_model() {
    let cfg = tiny();
    let one = Trainer::new(cfg.clone().with(Ablation::NoSlotAttention)).unwrap();
    assert_eq!(one.model.config.effective_slots(), 1);
    assert_eq!(cfg.clone().with(Ablation::SmallTransformerL4).model_config().layers, 4);
    let mut drop = cfg.clone();
    drop.set("dropout", "0.1").unwrap();
    assert_eq!(drop.clone().with(Ablation::NoDropout).model_config().dropout, 0.0);
    assert!(!cfg.clone().with(Ablation::NoAugmentations).augment());
    assert!(cfg.clone().with(Ablation::NoTcn).model_config().no_tcn);
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        assert_eq!(cfg.clone().with(a).ablations(), vec![a]);
    }
    assert!("no_such".parse::<Ablation>().is_err());
}

#[test]
fn replicas_report_best_and_mean() {
    let mut cfg = tiny();
    cfg.set("seed", "10").unwrap();
    let s = replicas(&cfg, 3, |c| Ok(c.seed as f64 / 100.0)).unwrap();
    assert_eq!(s.seeds, vec![10, 11, 12]);
    assert_eq!(s.max, 0.12);
    assert!((s.mean - 0.11).abs() < 1e-12);
    assert!(replicas(&cfg, 0, |_| Ok(0.0)).is_err());
}

// ---- metrics and reports ------------------------------------------------------------

#[test]
fn metrics_round_trip_through_json() {
    let out = train(&tiny(), &problems(ProblemType::Count, 2, 0), &[], &quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let mut log = out.log.clone();
    log.test_accuracy = BTreeMap::from([("count".to_string(), 0.5)]);
    log.save_json(&path).unwrap();
    assert_eq!(MetricsLog::load_json(&path).unwrap(), log);
    std::fs::write(&path, "{").unwrap();
    assert!(MetricsLog::load_json(&path).is_err());
}

#[test]
fn report_has_one_csv_row_per_step_and_k_plus_two_columns() {
    let data = problems(ProblemType::Location, 3, 0);
    let out = train(&tiny(), &data, &[], &quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(dir.path(), &out.log, &out.last, &data[..2]).unwrap();
    assert_eq!(written.len(), 3 + 2 + 1);

    let steps = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), out.log.steps.len() + 1);
    assert!(steps.starts_with("step,epoch,lr,recon,task,total"));
    let epochs = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), out.log.epochs.len() + 1);

    let (w, h, px) = read_pgm(&dir.path().join("slots_000.pgm")).unwrap();
    assert_eq!((w, h), ((3 + 2) * 48, 16 * 48));
    // First column is the original panel.
    let first = &data[0].images[0];
    let max_diff = (0..48 * 48)
        .map(|p| (px[(p / 48) * w + p % 48] - first.data[p]).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff <= 0.5 / 255.0 + 1e-6, "{max_diff}");

    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    for key in ["steps logged", "final loss", "sample acc", "mean best IoU", "unused slot mass"] {
        assert!(summary.contains(key), "{key} missing from\n{summary}");
    }
}

#[test]
fn report_surfaces_io_failures() {
    let out = Trainer::new(tiny()).unwrap().checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not_a_dir");
    std::fs::write(&file, "x").unwrap();
    assert!(matches!(emit_report(&file, &MetricsLog::new(1.0), &out, &[]), Err(Error::Io(_))));
}
