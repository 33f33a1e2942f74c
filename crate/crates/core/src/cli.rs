//! `indivaid` command line: prepare, train, eval, embed, rank.
//!
//! Every command exits 0 on success. Failures print one line,
//! `error: <kind>: <message>`, and exit 2 for bad input or 1 otherwise.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_image, scan_dataset, DatasetSummary};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::evalmetrics::rank_gallery;
use crate::losses::LossFlags;
use crate::train::{
    embed_images, evaluate_encoders, parse_loss_flags, run_baseline, run_stage1, run_stage2, Mode, Model,
    RunOutputs, TrainConfig, TrainData,
};

#[derive(Debug, Parser)]
#[command(name = "indivaid", version, about = "Individual animal re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a dataset and write per-split counts as JSON.
    Prepare {
        /// Dataset directory or manifest CSV.
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train(TrainArgs),
    /// Score a checkpoint (or the zero-shot encoder) on gallery/query.
    Eval(EvalArgs),
    /// Write unit-norm image features to a binary file.
    Embed(EmbedArgs),
    /// Rank gallery embeddings for each query embedding.
    Rank {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `TrainConfig` fields settable from the command line. Unset flags keep the
/// config-file (or preset) value.
#[allow(non_snake_case)]
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    /// TOML file holding a `TrainConfig`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small-backend preset instead of the full-scale defaults.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub species: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "stage1_lr", alias = "stage1-lr")]
    pub stage1_lr: Option<f64>,
    #[arg(long = "stage2_lr_start", alias = "stage2-lr-start")]
    pub stage2_lr_start: Option<f64>,
    #[arg(long = "stage2_lr_peak", alias = "stage2-lr-peak")]
    pub stage2_lr_peak: Option<f64>,
    #[arg(long = "warmup_epochs", alias = "warmup-epochs")]
    pub warmup_epochs: Option<usize>,
    #[arg(long = "decay_factor", alias = "decay-factor")]
    pub decay_factor: Option<f64>,
    /// Comma-separated epochs.
    #[arg(long = "decay_epochs", alias = "decay-epochs", value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "I")]
    pub I: Option<usize>,
    #[arg(long = "K")]
    pub K: Option<usize>,
    /// Comma-separated subset of id,tri,i2t,t2i,i2tce.
    #[arg(long = "loss_flags", alias = "loss-flags", value_parser = parse_flags_arg)]
    pub loss_flags: Option<LossFlags>,
    #[arg(long = "stage1_batch_size", alias = "stage1-batch-size")]
    pub stage1_batch_size: Option<usize>,
    #[arg(long = "per_identity_context", alias = "per-identity-context")]
    pub per_identity_context: bool,
    #[arg(long = "embed_dim", alias = "embed-dim")]
    pub embed_dim: Option<usize>,
}

fn parse_flags_arg(s: &str) -> std::result::Result<LossFlags, String> {
    parse_loss_flags(s).map_err(|e| e.to_string())
}

impl ConfigOverrides {
    /// Base config for `stage`, with every set flag applied and validated.
    pub fn resolve(&self, stage: u8) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None if self.toy => TrainConfig::toy(stage),
            None => TrainConfig::default(),
        };
        c.stage = stage;
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone();
                }
            )*};
        }
        set!(
            seed, mode, species, epochs, stage1_lr, stage2_lr_start, stage2_lr_peak, warmup_epochs,
            decay_factor, decay_epochs, tau, epsilon, I, K, loss_flags, stage1_batch_size
        );
        if self.per_identity_context {
            c.per_identity_context = true;
        }
        if let Some(d) = self.embed_dim {
            c.encoder.embed_dim = d;
            c.encoder.word_dim = d;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Dataset directory or manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; stage N writes `<out>/stageN/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-one checkpoint for stage two (default `<out>/stage1/checkpoint`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from the checkpoint already in `<out>/stageN/`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; not needed with `--mode clip_zs`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Also write per-query AP as CSV.
    #[arg(long = "per_query", alias = "per-query")]
    pub per_query: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text file with one image path per line.
    #[arg(long)]
    pub list: Option<PathBuf>,
    /// Image paths.
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

/// Provenance written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: Option<String>,
    pub dataset_root: Option<PathBuf>,
    /// Checkpoints read and written by the command.
    pub checkpoint_paths: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub version: String,
    /// Manifest of the run that produced the input checkpoint, if any.
    pub upstream: Option<Box<RunManifest>>,
}

thread_local! {
    static COMMAND_LINE: std::cell::RefCell<Vec<String>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn start(seed: u64) -> Self {
        Self {
            command: COMMAND_LINE.with(|c| c.borrow().clone()),
            config_hash: None,
            dataset_root: None,
            checkpoint_paths: Vec::new(),
            outputs: Vec::new(),
            seed,
            started_at: now(),
            finished_at: 0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            upstream: None,
        }
    }

    /// Manifest of the run that wrote `checkpoint`, looked up one level up.
    pub fn of_checkpoint(checkpoint: &Path) -> Option<Self> {
        let path = checkpoint.parent()?.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = now();
        write_json(path, &self)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// `report.json` -> `report.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{MANIFEST_FILE}"))
}

pub fn cmd_prepare(root: &Path, out: &Path) -> Result<DatasetSummary> {
    let mut manifest = RunManifest::start(0);
    let ds = scan_dataset(root)?;
    let summary = DatasetSummary::from_dataset(&ds);
    write_json(out, &summary)?;
    manifest.dataset_root = Some(ds.root.clone());
    manifest.outputs.push(out.to_path_buf());
    manifest.finish(&sidecar(out))?;
    Ok(summary)
}

/// Runs one stage and returns the checkpoint directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let config = args.config.resolve(args.stage)?;
    if config.mode == Mode::ClipZs {
        return Err(Error::invalid("zero-shot mode has no training"));
    }
    if config.mode == Mode::ClipFt && args.stage == 1 {
        return Err(Error::invalid("clip_ft mode has no stage one; use --stage 2"));
    }
    let stage_dir = args.out.join(format!("stage{}", args.stage));
    let ckpt = stage_dir.join("checkpoint");
    let mut manifest = RunManifest::start(config.seed);
    manifest.config_hash = Some(config.hash()?);

    let init = if args.resume {
        Some(ckpt.clone())
    } else if args.stage == 2 && config.mode == Mode::Indivaid {
        Some(args.init.clone().unwrap_or_else(|| args.out.join("stage1").join("checkpoint")))
    } else {
        None
    };
    // fail on a missing prerequisite before touching the data
    if let Some(dir) = &init {
        Model::read_meta(dir)?;
    }

    let ds = scan_dataset(&args.data)?;
    let data = TrainData::load(&ds, config.encoder.image_size)?;
    let mut model = match &init {
        Some(dir) => {
            let m = Model::load(dir)?;
            if m.encoders.config() != &config.encoder {
                return Err(Error::Shape {
                    expected: format!("{:?}", m.encoders.config()),
                    got: format!("{:?}", config.encoder),
                });
            }
            manifest.checkpoint_paths.push(dir.clone());
            manifest.upstream = RunManifest::of_checkpoint(dir).map(Box::new);
            m
        }
        None => Model::init(&config, data.identities.clone())?,
    };
    if args.resume && model.stage != args.stage {
        return Err(Error::invalid(format!(
            "{} holds a stage-{} checkpoint, cannot resume stage {}",
            ckpt.display(),
            model.stage,
            args.stage
        )));
    }

    let outputs = RunOutputs {
        checkpoint_dir: Some(ckpt.clone()),
        log_path: Some(stage_dir.join("train_log.jsonl")),
    };
    let report = match (config.mode, args.stage) {
        (Mode::Indivaid, 1) => run_stage1(&config, &data, &mut model, &outputs)?,
        (Mode::Indivaid, _) => run_stage2(&config, &data, &mut model, &outputs)?,
        _ => run_baseline(&config, &data, &mut model, &outputs)?.unwrap_or_default(),
    };
    let report_path = stage_dir.join("train_report.json");
    let mut summary = report;
    summary.log.clear();
    write_json(&report_path, &summary)?;

    manifest.dataset_root = Some(ds.root.clone());
    manifest.checkpoint_paths.push(ckpt.clone());
    manifest.outputs.extend([report_path, stage_dir.join("train_log.jsonl")]);
    manifest.finish(&stage_dir.join(MANIFEST_FILE))?;
    Ok(ckpt)
}

/// Encoders for eval/embed: the checkpoint's, or fresh ones for `clip_zs`.
fn encoders_for(checkpoint: Option<&Path>, overrides: &ConfigOverrides) -> Result<(Encoders, Option<String>, u64)> {
    let config_given = overrides.config.is_some() || overrides.embed_dim.is_some() || overrides.toy;
    let config = overrides.resolve(1)?;
    match checkpoint {
        Some(dir) => {
            let model = Model::load(dir)?;
            if config_given && model.encoders.config().embed_dim != config.encoder.embed_dim {
                return Err(Error::Shape {
                    expected: format!("embed_dim {}", config.encoder.embed_dim),
                    got: format!("checkpoint embed_dim {}", model.encoders.config().embed_dim),
                });
            }
            Ok((model.encoders, Some(model.config_hash), model.seed))
        }
        None if config.mode == Mode::ClipZs => {
            Ok((Encoders::new(config.encoder.clone())?, Some(config.hash()?), config.seed))
        }
        None => Err(Error::invalid("--checkpoint is required unless --mode clip_zs")),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<crate::evalmetrics::ReportFile> {
    if args.runs == 0 {
        return Err(Error::invalid("--runs must be >= 1"));
    }
    if args.runs > 1 {
        log::warn!("evaluation of a fixed checkpoint is deterministic; using runs=1");
    }
    let (encoders, hash, seed) = encoders_for(args.checkpoint.as_deref(), &args.config)?;
    let mut manifest = RunManifest::start(seed);
    manifest.config_hash = hash;
    let ds = scan_dataset(&args.data)?;
    let report = evaluate_encoders(&encoders, &ds)?;
    report.write_json(&args.out)?;
    manifest.outputs.push(args.out.clone());
    if let Some(csv) = &args.per_query {
        ensure_parent(csv)?;
        report.write_per_query_csv(csv)?;
        manifest.outputs.push(csv.clone());
    }
    manifest.dataset_root = Some(ds.root.clone());
    if let Some(dir) = &args.checkpoint {
        manifest.checkpoint_paths.push(dir.clone());
        manifest.upstream = RunManifest::of_checkpoint(dir).map(Box::new);
    }
    manifest.finish(&sidecar(&args.out))?;
    Ok(report.to_file())
}

/// JSON header of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    /// SHA-256 of the value bytes.
    pub checksum: String,
    pub dtype: String,
    pub paths: Vec<PathBuf>,
}

/// Unit-norm vectors plus the image each came from.
///
/// On disk: little-endian `u64` header length, the JSON header, then
/// `count × dim` little-endian `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub paths: Vec<PathBuf>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingFile {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    fn value_bytes(&self) -> Vec<u8> {
        self.vectors
            .iter()
            .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = self.value_bytes();
        let header = EmbeddingHeader {
            dim: self.dim(),
            count: self.vectors.len(),
            checksum: hex::encode(Sha256::digest(&body)),
            dtype: "f64".into(),
            paths: self.paths.clone(),
        };
        let head = serde_json::to_vec(&header)?;
        ensure_parent(path)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        f.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&head).map_err(io)?;
        f.write_all(&body).map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().expect("8 bytes");
        let head_len = u64::from_le_bytes(len_bytes) as usize;
        let head = bytes.get(8..8 + head_len).ok_or_else(|| bad("truncated header"))?;
        let header: EmbeddingHeader = serde_json::from_slice(head)?;
        let body = &bytes[8 + head_len..];
        if header.dtype != "f64" || body.len() != header.count * header.dim * 8 || header.paths.len() != header.count {
            return Err(bad("header does not match the payload"));
        }
        if hex::encode(Sha256::digest(body)) != header.checksum {
            return Err(bad("checksum mismatch"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let vectors = if header.dim == 0 {
            vec![Vec::new(); header.count]
        } else {
            values.chunks(header.dim).map(<[f64]>::to_vec).collect()
        };
        Ok(Self {
            paths: header.paths,
            vectors,
        })
    }
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<EmbeddingFile> {
    let mut paths = args.images.clone();
    if let Some(list) = &args.list {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        paths.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(PathBuf::from));
    }
    if paths.is_empty() {
        return Err(Error::invalid("no images given"));
    }
    let (encoders, hash, seed) = encoders_for(args.checkpoint.as_deref(), &args.config)?;
    let size = encoders.config().image_size;
    let mut ok_paths = Vec::new();
    let mut images = Vec::new();
    for p in &paths {
        match load_image(p, size) {
            Ok(img) => {
                ok_paths.push(p.clone());
                images.push(img);
            }
            Err(e) => log::warn!("skipping unreadable image: {e}"),
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(format!("none of the {} images could be read", paths.len())));
    }
    let vectors = embed_images(&encoders, &images)?
        .into_iter()
        .map(|f| f.values)
        .collect();
    let file = EmbeddingFile {
        paths: ok_paths,
        vectors,
    };
    file.write(&args.out)?;
    let mut manifest = RunManifest::start(seed);
    manifest.config_hash = hash;
    if let Some(dir) = &args.checkpoint {
        manifest.checkpoint_paths.push(dir.clone());
        manifest.upstream = RunManifest::of_checkpoint(dir).map(Box::new);
    }
    manifest.outputs.push(args.out.clone());
    manifest.finish(&sidecar(&args.out))?;
    Ok(file)
}

/// One output row of `rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub query: PathBuf,
    pub rank: usize,
    pub gallery: PathBuf,
    pub score: f64,
}

pub fn cmd_rank(query: &Path, gallery: &Path, top: usize, out: &Path) -> Result<Vec<RankRow>> {
    if top == 0 {
        return Err(Error::invalid("--top must be >= 1"));
    }
    let q = EmbeddingFile::read(query)?;
    let g = EmbeddingFile::read(gallery)?;
    if q.dim() != g.dim() {
        return Err(Error::Shape {
            expected: format!("gallery dim {}", g.dim()),
            got: format!("query dim {}", q.dim()),
        });
    }
    let rankings = rank_gallery(&q.vectors, &g.vectors)?;
    let mut rows = Vec::new();
    for r in &rankings {
        for (pos, (&gi, &score)) in r.ordered_gallery.iter().zip(&r.scores).take(top).enumerate() {
            rows.push(RankRow {
                query: q.paths[r.query_index].clone(),
                rank: pos + 1,
                gallery: g.paths[gi].clone(),
                score,
            });
        }
    }
    ensure_parent(out)?;
    let mut w = csv::Writer::from_path(out)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::start(0);
    manifest.outputs.push(out.to_path_buf());
    manifest.finish(&sidecar(out))?;
    Ok(rows)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { root, out } => {
            let s = cmd_prepare(root, out)?;
            println!("{} train ids, {} images", s.train_ids, s.total_images);
        }
        Command::Train(args) => {
            let ckpt = cmd_train(args)?;
            println!("{}", ckpt.display());
        }
        Command::Eval(args) => {
            let r = cmd_eval(args)?;
            let top1 = r.cmc.get("1").copied().unwrap_or(f64::NAN);
            println!("mAP {:.4} top1 {:.4}", r.map, top1);
        }
        Command::Embed(args) => {
            let f = cmd_embed(args)?;
            println!("{} vectors of dim {}", f.vectors.len(), f.dim());
        }
        Command::Rank { query, gallery, top, out } => {
            let rows = cmd_rank(query, gallery, *top, out)?;
            println!("{} rows", rows.len());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    COMMAND_LINE.with(|c| *c.borrow_mut() = args.iter().map(|a| a.to_string_lossy().into_owned()).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}
