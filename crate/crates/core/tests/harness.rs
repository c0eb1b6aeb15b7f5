use robustlat::dataset::{self, load_images};
use robustlat::error::Error;
use robustlat::harness::*;
use robustlat::pfid::PfidReport;
use robustlat::toytok::TrainState;
use std::path::{Path, PathBuf};

fn config(out: &Path) -> ExperimentConfig {
    let text = r#"{
        "version": 1, "seed": 3, "output_dir": "",
        "dataset": {"side": 8, "num_classes": 2, "per_class": 6},
        "tokenizer": {"patch": 4, "latent_dim": 2, "hidden": 6, "codebook_size": 8,
                      "context": 1, "codebook_init": "data", "codebook_init_sample": 4},
        "train": {"steps": 24, "batch_size": 4, "learning_rate": 0.2, "eval_every": 5,
                  "dead_code_patience": 6,
                  "perturbation": {"alpha": 1.0, "beta": 0.5, "delta": 4, "final_scale": 0.5, "shape": "linear"}},
        "pfid": {"k_ref": 8, "deltas": [2, 3, 4], "sample_count": 10, "feature_dim": 6},
        "ablation": {"seeds": 1},
        "analysis": {"usage_thresholds": [1, 2], "elbow_ks": [2, 3, 4], "elbow_sample": 40,
                     "lipschitz_samples": 16, "lipschitz_delta": 3}
    }"#;
    let mut cfg = ExperimentConfig::from_json(text).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn names(dir: &Path) -> Vec<String> {
    list_files(dir).unwrap().into_iter().map(|(n, _)| n).collect()
}

fn setup() -> (tempfile::TempDir, ExperimentConfig, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let corpus = gen_data(&cfg).unwrap();
    (tmp, cfg, corpus)
}

#[test]
fn gen_data_is_reproducible_and_complete() {
    let (_tmp, cfg, corpus) = setup();
    let first = read(&corpus.join(MANIFEST_FILE));
    let files = names(&corpus);
    assert_eq!(files.iter().filter(|n| n.ends_with(".png")).count(), 12);
    assert!(files.contains(&dataset::MANIFEST_FILE.to_string()));
    assert_eq!(gen_data(&cfg).unwrap(), corpus);
    assert_eq!(read(&corpus.join(MANIFEST_FILE)), first);

    let other = tempfile::tempdir().unwrap();
    let moved = gen_data(&config(other.path())).unwrap();
    assert_eq!(read(&moved.join(MANIFEST_FILE)), first);
    assert!(validate(&corpus).unwrap().is_empty());
}

#[test]
fn validate_names_a_corrupted_png() {
    let (_tmp, _cfg, corpus) = setup();
    let victim = corpus.join("class_1_idx_2.png");
    let mut bytes = read(&victim);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    assert_eq!(
        validate(&corpus).unwrap(),
        vec![Mismatch::Changed("class_1_idx_2.png".into())]
    );
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let (_tmp, mut cfg, corpus) = setup();
    cfg.train.steps = 0;
    let dir = train(&cfg, &Options::default()).unwrap();
    let (_, set) = load_images(&corpus).unwrap();
    let init = TrainState::fresh(init_model(&cfg, &cfg.seeds(), &set.images).unwrap());
    assert_eq!(read(&dir.join(CHECKPOINT_FILE)), init.to_bytes());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (_tmp, cfg, _corpus) = setup();
    let full = train(&cfg, &Options::default()).unwrap();
    let half = train(
        &cfg,
        &Options {
            stop_at: Some(11),
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(full, half);
    let half_ckpt = half.join(CHECKPOINT_FILE);
    assert_eq!(TrainState::load(&half_ckpt).unwrap().step, 11);
    let resumed = train(
        &cfg,
        &Options {
            checkpoint: Some(half_ckpt),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(read(&resumed.join(CHECKPOINT_FILE)), read(&full.join(CHECKPOINT_FILE)));
    // resuming does not touch the run it resumed from
    assert!(validate(&half).unwrap().is_empty());
}

#[test]
fn eval_is_reproducible_and_consistent_with_its_csv() {
    let (_tmp, cfg, corpus) = setup();
    train(&cfg, &Options::default()).unwrap();
    let a = eval(&cfg, &Options::default()).unwrap();
    let first = read(&a.join("pfid.json"));
    let b = eval(&cfg, &Options::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(read(&b.join("pfid.json")), first);

    let report: PfidReport = serde_json::from_slice(&first).unwrap();
    let rows = PfidReport::read_csv(&a.join("pfid.csv")).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.beta == 1.0));
    let mean = rows.iter().map(|r| r.fid).sum::<f64>() / 15.0;
    assert!((mean - report.pfid).abs() <= 1e-12 * mean.max(1.0));
    assert!(validate(&corpus).unwrap().is_empty());
}

#[test]
fn single_cell_ablation_reduces_to_train_and_eval() {
    let (_tmp, cfg, _corpus) = setup();
    let t = train(&cfg, &Options::default()).unwrap();
    let e = eval(&cfg, &Options::default()).unwrap();
    let a = ablate(&cfg, &Options::default()).unwrap();
    let cell = a.join("cells").join("base-s0");
    assert_eq!(read(&cell.join(CHECKPOINT_FILE)), read(&t.join(CHECKPOINT_FILE)));
    assert_eq!(read(&cell.join("report.json")), read(&t.join("report.json")));
    assert_eq!(read(&cell.join("pfid.json")), read(&e.join("pfid.json")));
    assert!(validate(&a).unwrap().is_empty());
}

#[test]
fn ablation_records_failures_and_continues() {
    let (_tmp, mut cfg, _corpus) = setup();
    cfg.ablation = AblationSection {
        seeds: 2,
        variants: vec![
            Variant {
                name: "baseline".into(),
                beta: 0.0,
                alpha: None,
                final_scale: None,
                learning_rate: None,
            },
            Variant {
                name: "diverge".into(),
                beta: 0.5,
                alpha: None,
                final_scale: None,
                learning_rate: Some(1e6),
            },
        ],
    };
    let dir = ablate(&cfg, &Options::default()).unwrap();
    let mut r = csv::Reader::from_path(dir.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let status = &row[5];
        match &row[0] {
            "baseline" => {
                assert_eq!(status, "ok");
                assert!(row[2].parse::<f64>().unwrap() >= 0.0);
            }
            _ => {
                assert_eq!(status, "numerical");
                assert_eq!(&row[3], "");
            }
        }
    }
    let err: serde_json::Value = serde_json::from_slice(&read(&dir.join("cells/diverge-s1").join(ERROR_FILE))).unwrap();
    assert_eq!(err["kind"], "numerical");
    assert_eq!(err["exit_code"], 4);
    let summary: serde_json::Value = serde_json::from_slice(&read(&dir.join("summary.json"))).unwrap();
    assert_eq!(summary["variants"][0]["cells_ok"], 2);
    assert_eq!(summary["variants"][1]["cells_ok"], 0);
    assert!(summary["variants"][1]["mean_pfid"].is_null());
}

#[test]
fn divergent_training_writes_a_diagnostic_and_exits_numerically() {
    let (tmp, mut cfg, _corpus) = setup();
    cfg.train.learning_rate = 1e6;
    let err = train(&cfg, &Options::default()).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert_eq!(exit_code(&err), 4);
    let run = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train-"))
        .unwrap();
    let diag: serde_json::Value = serde_json::from_slice(&read(&run.join(ERROR_FILE))).unwrap();
    assert_eq!(diag["kind"], "numerical");
    assert!(!run.join(CHECKPOINT_FILE).exists());
    assert!(validate(&run).unwrap().is_empty());
}

#[test]
fn analyze_exports_reparse() {
    let (_tmp, cfg, corpus) = setup();
    train(&cfg, &Options::default()).unwrap();
    let dir = analyze(&cfg, &Options::default()).unwrap();
    let files = names(&dir);
    for f in [
        "usage.csv",
        "elbow.csv",
        "projection.csv",
        "lipschitz.json",
        "analysis.json",
        "usage.svg",
        "elbow.svg",
        "projection.svg",
    ] {
        assert!(files.contains(&f.to_string()), "{f} missing from {files:?}");
    }
    let mut r = csv::Reader::from_path(dir.join("usage.csv")).unwrap();
    let counts: Vec<u64> = r.records().map(|x| x.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(counts.len(), 8);
    assert_eq!(counts.iter().sum::<u64>(), 12 * 4);
    let mut r = csv::Reader::from_path(dir.join("elbow.csv")).unwrap();
    let sse: Vec<f64> = r.records().map(|x| x.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(sse.len(), 3);
    assert!(sse.windows(2).all(|w| w[1] <= w[0]));
    let mut r = csv::Reader::from_path(dir.join("projection.csv")).unwrap();
    assert_eq!(r.records().count(), 8);
    let a: serde_json::Value = serde_json::from_slice(&read(&dir.join("analysis.json"))).unwrap();
    let g = a["usage_gini"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&g));
    assert!(validate(&dir).unwrap().is_empty());
    assert!(validate(&corpus).unwrap().is_empty());
}

#[test]
fn analyze_on_an_empty_corpus_fails_without_output() {
    let (tmp, cfg, _corpus) = setup();
    train(&cfg, &Options::default()).unwrap();
    let empty = tmp.path().join("empty-corpus");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(
        empty.join(dataset::MANIFEST_FILE),
        r#"{"version": 1, "spec": null, "items": []}"#,
    )
    .unwrap();
    let ckpt = default_checkpoint(&cfg, &Options::default()).unwrap();
    let err = analyze(
        &cfg,
        &Options {
            corpus: Some(empty),
            checkpoint: Some(ckpt),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(exit_code(&err), 3);
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("analyze-"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn missing_inputs_and_bad_configs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let err = train(&cfg, &Options::default()).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    assert!(err.to_string().contains("gen-data"));

    gen_data(&cfg).unwrap();
    let err = eval(&cfg, &Options::default()).unwrap_err();
    assert_eq!(exit_code(&err), 3);

    let err =
        ExperimentConfig::from_json(r#"{"version": 1, "seed": 1, "output_dir": "x", "datasets": {}}"#).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    let path = tmp.path().join("nope.json");
    assert_eq!(exit_code(&ExperimentConfig::load(&path).unwrap_err()), 2);
}

#[test]
fn baseline_and_perturbed_training_emit_comparable_reports() {
    let (_tmp, mut cfg, _corpus) = setup();
    let robust = train(&cfg, &Options::default()).unwrap();
    cfg.train.perturbation = PerturbationSection::default();
    let baseline = train(&cfg, &Options::default()).unwrap();
    let load = |d: &Path| -> serde_json::Value { serde_json::from_slice(&read(&d.join("report.json"))).unwrap() };
    let (r, b) = (load(&robust), load(&baseline));
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&r), keys(&b));
    assert_eq!(b["tokens_replaced"], 0);
    assert!(r["tokens_replaced"].as_u64().unwrap() > 0);
    assert!(!read(&robust.join("loss.csv")).is_empty());
}

#[test]
fn checkpoint_of_another_architecture_is_a_config_error() {
    let (_tmp, cfg, _corpus) = setup();
    let t = train(&cfg, &Options::default()).unwrap();
    let mut other = cfg.clone();
    other.tokenizer.hidden = 5;
    let err = eval(
        &other,
        &Options {
            checkpoint: Some(t.join(CHECKPOINT_FILE)),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(exit_code(&err), 2);
}
