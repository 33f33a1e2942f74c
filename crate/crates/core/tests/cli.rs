mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use indivaid::cli::{EmbeddingFile, RunManifest};
use indivaid::datasets::{scan_dataset, DatasetSummary, Split};
use indivaid::evalmetrics::{rank_gallery, ReportFile};
use indivaid::synthetic::FixtureSpec;
use indivaid::train::TrainConfig;

use common::*;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_indivaid"))
        .args(args)
        .output()
        .expect("spawn indivaid")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output, code: i32, kind: &str, needle: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let line = err.lines().find(|l| l.starts_with("error: ")).expect("error line");
    assert!(line.starts_with(&format!("error: {kind}: ")), "{line}");
    assert!(line.contains(needle), "{line} lacks {needle}");
    let rest = &line[format!("error: {kind}: ").len()..];
    for prefix in ["invalid input:", "dataset structure:", "config:", "missing artifact:", "shape mismatch:"] {
        assert!(!rest.starts_with(prefix), "{line} repeats its kind");
    }
    assert_eq!(err.lines().filter(|l| l.starts_with("error")).count(), 1);
}

/// Small fixture plus a config file that trains on it in a few seconds.
fn small_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    fixture(&data, &FixtureSpec::small());
    let mut c = TrainConfig::toy(1);
    c.encoder.image_size = 64;
    c.epochs = 3;
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, c.to_toml_string().unwrap()).unwrap();
    (data, cfg)
}

#[test]
fn prepare_writes_stable_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fixture(&data, &FixtureSpec::small());
    let out = dir.path().join("summary.json");
    let o = bin(&["prepare", "--root", &s(&data), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(&out).unwrap();
    let summary: DatasetSummary = serde_json::from_slice(&first).unwrap();
    assert_eq!(summary.train_ids, 5);
    assert_eq!(summary.train_images, 20);
    assert!(o.status.success());
    bin(&["prepare", "--root", &s(&data), "--out", &s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.outputs, vec![out]);
}

#[test]
fn prepare_on_empty_root_names_missing_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["prepare", "--root", &s(dir.path()), "--out", &s(&dir.path().join("x.json"))]);
    assert_one_line_error(&o, 2, "structural", "train");
}

#[test]
fn zero_shot_mode_cannot_train() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--stage", "1", "--mode", "clip_zs", "--data", &s(dir.path()), "--out", &s(dir.path())]);
    assert_one_line_error(&o, 2, "invalid", "zero-shot mode has no training");
}

#[test]
fn stage_two_without_stage_one_names_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let out = dir.path().join("run");
    let o = bin(&["train", "--stage", "2", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out)]);
    assert_one_line_error(&o, 2, "missing_artifact", "stage1/checkpoint/meta.json");
}

#[test]
fn invalid_config_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--stage", "1", "--toy", "--tau=-1", "--data", "/nonexistent", "--out", &s(dir.path())]);
    assert_one_line_error(&o, 2, "config", "tau");
    let o = bin(&["train", "--stage", "3", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_needs_checkpoint_outside_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["eval", "--data", &s(dir.path()), "--out", &s(&dir.path().join("r.json"))]);
    assert_one_line_error(&o, 2, "invalid", "--checkpoint");
}

#[test]
fn stage_one_checkpoint_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let mut metas = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = bin(&["train", "--stage", "1", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = out.join("stage1/checkpoint");
        metas.push(std::fs::read(ckpt.join("meta.json")).unwrap());
        assert!(out.join("stage1/train_log.jsonl").is_file());
        assert!(out.join("stage1/manifest.json").is_file());
    }
    assert_eq!(metas[0], metas[1]);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let mut sums = Vec::new();
    for seed in ["0", "1"] {
        let out = dir.path().join(seed);
        let o = bin(&["train", "--stage", "1", "--config", &s(&cfg), "--seed", seed, "--data", &s(&data), "--out", &s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let meta = indivaid::train::Model::read_meta(&out.join("stage1/checkpoint")).unwrap();
        sums.push(meta.checksums["prompt"].clone());
    }
    assert_ne!(sums[0], sums[1]);
}

#[test]
fn resume_continues_to_the_configured_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let out = dir.path().join("run");
    let base = ["train", "--stage", "1", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out)].map(String::from);
    let mut short: Vec<String> = base.to_vec();
    short.extend(["--epochs".into(), "1".into()]);
    assert!(bin(&short.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    let mut resume = base.to_vec();
    resume.push("--resume".into());
    let o = bin(&resume.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = indivaid::train::Model::read_meta(&out.join("stage1/checkpoint")).unwrap();
    assert_eq!(meta.epochs_completed, 3);
    assert_eq!(meta.stage, 1);
}

fn write_list(path: &Path, files: &[PathBuf]) {
    let text: Vec<String> = files.iter().map(|p| s(p)).collect();
    std::fs::write(path, text.join("\n")).unwrap();
}

#[test]
fn full_pipeline_embed_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = fixture(&data, &FixtureSpec::standard());
    let out = dir.path().join("run");
    for stage in ["1", "2"] {
        let o = bin(&["train", "--stage", stage, "--toy", "--data", &s(&data), "--out", &s(&out)]);
        assert!(o.status.success(), "stage {stage}: {}", stderr(&o));
    }
    let ckpt = out.join("stage2/checkpoint");

    // provenance chain: stage two points back at stage one
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("stage2/manifest.json")).unwrap()).unwrap();
    let upstream = manifest.upstream.expect("stage-one manifest");
    assert!(upstream.checkpoint_paths.iter().any(|p| p.ends_with("stage1/checkpoint")));
    assert_eq!(manifest.seed, 0);

    let report_path = dir.path().join("report.json");
    let o = bin(&["eval", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--out", &s(&report_path), "--runs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("runs=1"));
    let report: ReportFile = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.runs.n, 1);
    let cmc: Vec<f64> = ["1", "5", "10"].iter().map(|k| report.cmc[*k]).collect();
    assert!(cmc.windows(2).all(|w| w[0] <= w[1]));

    let zs_path = dir.path().join("zs.json");
    let o = bin(&["eval", "--mode", "clip_zs", "--toy", "--data", &s(&data), "--out", &s(&zs_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let zs: ReportFile = serde_json::from_str(&std::fs::read_to_string(&zs_path).unwrap()).unwrap();
    assert!(report.map > zs.map, "trained {} vs zero-shot {}", report.map, zs.map);

    // embed gallery and query, then rank
    let paths = |split| -> Vec<PathBuf> { ds.split(split).map(|r| r.path.clone()).collect() };
    let (gal, qry) = (paths(Split::Gallery), paths(Split::Query));
    let (gl, ql) = (dir.path().join("gallery.txt"), dir.path().join("query.txt"));
    write_list(&gl, &gal);
    write_list(&ql, &qry);
    let (ge, qe) = (dir.path().join("g.bin"), dir.path().join("q.bin"));
    for (list, emb) in [(&gl, &ge), (&ql, &qe)] {
        let o = bin(&["embed", "--checkpoint", &s(&ckpt), "--list", &s(list), "--out", &s(emb)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let g = EmbeddingFile::read(&ge).unwrap();
    let q = EmbeddingFile::read(&qe).unwrap();
    assert_eq!(g.vectors.len(), gal.len());
    let ranks = dir.path().join("ranks.csv");
    let o = bin(&["rank", "--query", &s(&qe), "--gallery", &s(&ge), "--top", "100", "--out", &s(&ranks)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(&ranks).unwrap();
    let rows: Vec<indivaid::cli::RankRow> = reader.deserialize().map(Result::unwrap).collect();
    // top beyond the gallery size returns the whole gallery for each query
    assert_eq!(rows.len(), qry.len() * gal.len());
    let expected = rank_gallery(&q.vectors, &g.vectors).unwrap();
    for r in &expected {
        let mine: Vec<&PathBuf> = rows
            .iter()
            .filter(|row| row.query == q.paths[r.query_index])
            .map(|row| &row.gallery)
            .collect();
        let theirs: Vec<&PathBuf> = r.ordered_gallery.iter().map(|&i| &g.paths[i]).collect();
        assert_eq!(mine, theirs);
    }
    assert!(scan_dataset(&data).is_ok());
}

#[test]
fn embed_is_unit_norm_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = fixture(&data, &FixtureSpec::small());
    let img = s(&ds.records[0].path);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for out in [&a, &b] {
        let o = bin(&["embed", "--mode", "clip_zs", "--toy", &img, "--out", &s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let f = EmbeddingFile::read(&a).unwrap();
    assert_eq!(f.vectors.len(), 1);
    let norm = f.vectors[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() <= 1e-5);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn embed_skips_unreadable_and_fails_when_none_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = fixture(&data, &FixtureSpec::small());
    let bogus = dir.path().join("broken.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    let out = dir.path().join("e.bin");
    let o = bin(&["embed", "--mode", "clip_zs", "--toy", &s(&bogus), &s(&ds.records[0].path), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.png"));
    assert_eq!(EmbeddingFile::read(&out).unwrap().vectors.len(), 1);

    let o = bin(&["embed", "--mode", "clip_zs", "--toy", &s(&bogus), "--out", &s(&out)]);
    assert_one_line_error(&o, 2, "invalid", "could be read");
}

fn write_embeddings(path: &Path, names: &[&str], vectors: Vec<Vec<f64>>) {
    EmbeddingFile {
        paths: names.iter().map(PathBuf::from).collect(),
        vectors,
    }
    .write(path)
    .unwrap();
}

#[test]
fn rank_puts_exact_duplicate_first() {
    let dir = tempfile::tempdir().unwrap();
    let (q, g, out) = (dir.path().join("q.bin"), dir.path().join("g.bin"), dir.path().join("r.csv"));
    let v = vec![0.6, 0.8, 0.0];
    write_embeddings(&q, &["q0"], vec![v.clone()]);
    write_embeddings(&g, &["g0", "g1", "g2"], vec![vec![1.0, 0.0, 0.0], v, vec![0.0, 0.0, 1.0]]);
    let o = bin(&["rank", "--query", &s(&q), "--gallery", &s(&g), "--top", "1", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<indivaid::cli::RankRow> = csv::Reader::from_path(&out).unwrap().deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].gallery, PathBuf::from("g1"));
    assert!((rows[0].score - 1.0).abs() < 1e-12);
}

#[test]
fn rank_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (q, g) = (dir.path().join("q.bin"), dir.path().join("g.bin"));
    write_embeddings(&q, &["q"], vec![vec![1.0, 0.0]]);
    write_embeddings(&g, &["g"], vec![vec![1.0, 0.0, 0.0]]);
    let o = bin(&["rank", "--query", &s(&q), "--gallery", &s(&g), "--out", &s(&dir.path().join("r.csv"))]);
    assert_one_line_error(&o, 2, "shape", "dim");
}

#[test]
fn corrupted_embedding_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.bin");
    write_embeddings(&p, &["a"], vec![vec![1.0, 0.0]]);
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    assert!(EmbeddingFile::read(&p).unwrap_err().to_string().contains("checksum"));
}
