use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use domcal::synth::random_visual;
use domcal::{write_bundle, Bundle, GalleryIndex, Grid, TextBundle};
use domcal_cli::{
    cmd_eval, cmd_gen_fixtures, cmd_index, cmd_inspect, cmd_retrieve, read_results, FixtureSpec,
    RunConfig, EXIT_IO, EXIT_VALIDATION,
};
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gallery_of(dir: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let v = random_visual(&mut rng, &format!("img{i}"), Grid::new(3, 3), 6, 4);
        write_bundle(&Bundle::Visual(v), dir.join(format!("img{i}"))).unwrap();
    }
}

fn fixtures(dir: &Path, items: usize, distractors: usize) {
    let cfg = RunConfig {
        out: Some(dir.to_path_buf()),
        seed: 5,
        ..Default::default()
    };
    cmd_gen_fixtures(FixtureSpec { items, distractors }, &cfg).unwrap();
}

fn scenario_cfg(root: &Path, out: &str) -> RunConfig {
    RunConfig {
        gallery: Some(root.join("gallery")),
        queries: Some(root.join("queries")),
        relevance: Some(root.join("relevance.json")),
        index: Some(root.join(out).join("index.json")),
        out: Some(root.join(out)),
        ..Default::default()
    }
}

#[test]
fn index_has_one_entry_per_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    gallery_of(&tmp.path().join("g"), 3, 1);
    let cfg = RunConfig {
        gallery: Some(tmp.path().join("g")),
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    let summary = cmd_index(&cfg).unwrap();
    assert_eq!(summary.count, 3);
    let index = GalleryIndex::load(tmp.path().join("out/index.json")).unwrap();
    assert_eq!(index.entries.len(), 3);
    assert!(tmp.path().join("out/index_summary.json").exists());
    let echoed: RunConfig =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/run_config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn disabled_visual_stage_keeps_recomputed_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path(), 6, 3);
    let cfg = RunConfig {
        disable_cve: true,
        ..scenario_cfg(tmp.path(), "off")
    };
    let summary = cmd_index(&cfg).unwrap();
    assert_eq!(summary.images_with_dominant, 0);
    let index = GalleryIndex::load(cfg.index.as_ref().unwrap()).unwrap();
    for e in &index.entries {
        assert_eq!(e.calibrated, e.recomputed);
    }
}

#[test]
fn single_spiked_bundle_is_the_only_one_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path(), 5, 1);
    let summary = cmd_index(&scenario_cfg(tmp.path(), "idx")).unwrap();
    assert_eq!(summary.count, 5);
    assert_eq!(summary.images_with_dominant, 1);
    let index = GalleryIndex::load(tmp.path().join("idx/index.json")).unwrap();
    let flagged: Vec<&str> = index
        .entries
        .iter()
        .filter(|e| !e.dominant_tokens.is_empty())
        .map(|e| e.image_id.as_str())
        .collect();
    assert_eq!(flagged, ["img000"]);
}

#[test]
fn full_lambda_matches_disabled_text_stage() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path(), 12, 3);
    cmd_index(&scenario_cfg(tmp.path(), "idx")).unwrap();
    let run = |out: &str, lambda: f64, disable_dcc: bool| {
        let cfg = RunConfig {
            index: Some(tmp.path().join("idx/index.json")),
            lambda,
            disable_dcc,
            ..scenario_cfg(tmp.path(), out)
        };
        read_results(&cmd_retrieve(&cfg).unwrap()).unwrap()
    };
    let fused = run("fused", 1.0, false);
    let base = run("base", 0.5, true);
    assert_eq!(fused.len(), 12);
    for (f, b) in fused.iter().zip(&base) {
        assert_eq!(f.ids().collect::<Vec<_>>(), b.ids().collect::<Vec<_>>());
        for (x, y) in f.entries.iter().zip(&b.entries) {
            assert_eq!(x.fused_score, y.base_sim);
        }
    }
}

#[test]
fn eval_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path(), 8, 2);
    let cfg = scenario_cfg(tmp.path(), "run");
    cmd_index(&cfg).unwrap();
    let results = cmd_retrieve(&cfg).unwrap();
    let metrics = cmd_eval(&results, &cfg).unwrap();
    assert_eq!(metrics.num_queries, 8);
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(written["recall@1"], metrics.recall_at_1);
    assert_eq!(written["mAP"], metrics.map);
}

#[test]
fn retrieve_rejects_mismatched_joint_space() {
    let tmp = tempfile::tempdir().unwrap();
    gallery_of(&tmp.path().join("g"), 2, 3);
    fixtures(&tmp.path().join("fx"), 4, 1);
    let cfg = RunConfig {
        gallery: Some(tmp.path().join("g")),
        queries: Some(tmp.path().join("fx/queries")),
        index: Some(tmp.path().join("out/index.json")),
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    cmd_index(&cfg).unwrap();
    let err = cmd_retrieve(&cfg).unwrap_err();
    assert_eq!(err.code, EXIT_VALIDATION);
    assert!(err.to_string().contains("dimension"), "{err}");
}

fn read_grid(path: PathBuf) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn inspect_uniform_visual_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut v = random_visual(&mut rng, "tiny", Grid::new(2, 2), 5, 3);
    v.cls_attention = array![0.25, 0.25, 0.25, 0.25];
    write_bundle(&Bundle::Visual(v), tmp.path().join("tiny")).unwrap();
    let cfg = RunConfig {
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    cmd_inspect(&tmp.path().join("tiny"), None, &cfg).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(
        read_grid(out.join("attention.csv")),
        vec![vec![0.25, 0.25], vec![0.25, 0.25]]
    );
    assert_eq!(
        read_grid(out.join("lc.csv")),
        vec![vec![0.0, 0.0], vec![0.0, 0.0]]
    );
    assert_eq!(
        read_grid(out.join("gate.csv")),
        vec![vec![1.0, 1.0], vec![1.0, 1.0]]
    );
    let pgm = fs::read(out.join("lc.pgm")).unwrap();
    assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
    assert_eq!(&pgm[11..], &[0, 0, 0, 0]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("visual_report.json")).unwrap()).unwrap();
    assert_eq!(report["dominant"], serde_json::json!([]));
}

#[test]
fn inspect_text_lists_high_attention_token_as_general() {
    let tmp = tempfile::tempdir().unwrap();
    let t = TextBundle {
        query_id: "q".into(),
        token_embeddings: Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.5),
        token_strings: vec!["teddy".into(), "on".into(), "the".into(), "sofa".into()],
        eot_attention: array![[0.7, 0.1, 0.1, 0.1]],
        eot_norms: array![2.0],
        eot_joint: array![1.0, 0.0, 0.0],
        text_projection: Array2::eye(3),
        provenance: None,
    };
    write_bundle(&Bundle::Text(t), tmp.path().join("q")).unwrap();
    let cfg = RunConfig {
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    cmd_inspect(&tmp.path().join("q"), None, &cfg).unwrap();
    let dump: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("out/text_subspaces.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(dump["general_tokens"], serde_json::json!(["teddy"]));
    assert_eq!(
        dump["discriminative_tokens"],
        serde_json::json!(["on", "the", "sofa"])
    );
    assert_eq!(dump["detail_share"], 0.75);
    let threshold = dump["attention_threshold"].as_f64().unwrap();
    assert!((threshold - 0.25).abs() < 1e-7);
}

#[test]
fn inspect_with_query_anchor() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path(), 4, 1);
    let cfg = RunConfig {
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    let q = tmp.path().join("queries/q000");
    cmd_inspect(&tmp.path().join("gallery/img000"), Some(&q), &cfg).unwrap();
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("out/visual_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["anchor"], "query");
    assert_eq!(read_grid(tmp.path().join("out/mask.csv")).len(), 7);
}

#[test]
fn skip_bad_drops_corrupt_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g");
    gallery_of(&g, 3, 4);
    fs::write(g.join("img1/manifest.json"), "{").unwrap();
    let cfg = RunConfig {
        gallery: Some(g),
        out: Some(tmp.path().join("out")),
        ..Default::default()
    };
    let err = cmd_index(&cfg).unwrap_err();
    assert_eq!(err.code, EXIT_VALIDATION);
    let summary = cmd_index(&RunConfig {
        skip_bad: true,
        ..cfg
    })
    .unwrap();
    assert_eq!(summary.count, 2);
    assert_eq!(summary.skipped.len(), 1);
}

fn domcal(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_domcal"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let fx = format!("{root}/fx");
    let ok = domcal(&[
        "gen-fixtures",
        "--out",
        &fx,
        "--items",
        "6",
        "--distractors",
        "2",
        "--seed",
        "3",
    ]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );

    let out = format!("{root}/run");
    let ok = domcal(&[
        "index",
        "--gallery",
        &format!("{fx}/gallery"),
        "--out",
        &out,
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(summary["images_with_dominant"], 2);

    let index = format!("{out}/index.json");
    let ok = domcal(&[
        "retrieve",
        "--queries",
        &format!("{fx}/queries"),
        "--index",
        &index,
        "--out",
        &out,
        "--threads",
        "2",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let ok = domcal(&[
        "eval",
        "--results",
        &format!("{out}/results.jsonl"),
        "--relevance",
        &format!("{fx}/relevance.json"),
    ]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("R@1"));

    let bad = domcal(&[
        "index",
        "--gallery",
        &format!("{fx}/gallery"),
        "--out",
        &out,
        "--eta",
        "1.5",
    ]);
    assert_eq!(bad.status.code(), Some(EXIT_VALIDATION));
    let bad = domcal(&[
        "index",
        "--gallery",
        &format!("{fx}/gallery"),
        "--out",
        &out,
        "--vis-threshold",
        "max",
    ]);
    assert_ne!(bad.status.code(), Some(0));
    let missing = domcal(&[
        "index",
        "--gallery",
        &format!("{root}/nowhere"),
        "--out",
        &out,
    ]);
    assert_eq!(missing.status.code(), Some(EXIT_IO));
    let missing = domcal(&[
        "eval",
        "--results",
        &format!("{root}/nowhere.jsonl"),
        "--relevance",
        &format!("{fx}/relevance.json"),
    ]);
    assert_eq!(missing.status.code(), Some(EXIT_IO));
}

#[test]
fn binary_config_file_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gallery_of(&root.join("g"), 2, 6);
    let config = root.join("run.toml");
    fs::write(&config, "eta = 0.4\ntopk = 7\nvis_threshold = \"median\"\n").unwrap();
    let out = root.join("out");
    let status = domcal(&[
        "index",
        "--config",
        config.to_str().unwrap(),
        "--gallery",
        root.join("g").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--topk",
        "9",
    ]);
    assert_eq!(
        status.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let echoed: RunConfig =
        serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed.eta, 0.4);
    assert_eq!(echoed.topk, 9);
    assert_eq!(echoed.vis_threshold, domcal::ThresholdStrategy::Median);
    assert_eq!(echoed.lambda, 0.5);
}

#[test]
fn config_rejects_bad_values() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "lambda = -0.1\n").unwrap();
    let err = RunConfig::resolve(Some(&config), Default::default()).unwrap_err();
    assert_eq!(err.code, EXIT_VALIDATION);
    let err =
        RunConfig::resolve(Some(&tmp.path().join("absent.toml")), Default::default()).unwrap_err();
    assert_eq!(err.code, EXIT_IO);
}
