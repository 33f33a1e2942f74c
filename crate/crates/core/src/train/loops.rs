use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{lr_stage1, Stage2Schedule};
use super::{Model, Mode, TrainConfig};
use crate::datasets::{augment, load_image, make_batches, Dataset, DecodedImage, ImageRecord, Split};
use crate::desc_merge::{AttentionParams, DescriptionBank};
use crate::encoders::{Encoders, FeatureVector};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, MetricsReport};
use crate::losses::{stage1_loss, stage2_loss, LossBreakdown, LossFlags, LossTerm, SimilarityMatrix, Stage2Batch};
use crate::prompt_gen::{PromptState, INIT_PHRASE};

const AUGMENT_SALT: u64 = 0x6175_6773;
const SHUFFLE_SALT: u64 = 0x7368_7566;
const SAMPLER_SALT: u64 = 0x706b_7362;
const ENCODE_CHUNK: usize = 64;

/// Decoded train images with their class ids, in record order.
pub struct TrainData {
    pub records: Vec<ImageRecord>,
    pub images: Vec<DecodedImage>,
    pub labels: Vec<usize>,
    pub identities: Vec<String>,
}

impl TrainData {
    pub fn load(dataset: &Dataset, image_size: usize) -> Result<Self> {
        let records = dataset.split_records(Split::Train);
        let images = load_images(&records, image_size)?;
        let labels = records.iter().map(|r| r.identity).collect();
        Ok(Self {
            records,
            images,
            labels,
            identities: dataset.train_index.labels().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn load_images(records: &[ImageRecord], image_size: usize) -> Result<Vec<DecodedImage>> {
    records
        .par_iter()
        .map(|r| load_image(&r.path, image_size))
        .collect()
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
    pub logit_scale: f64,
}

/// Where a run writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    /// Rewritten at the end of every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(BufWriter::new(file))))
    }

    fn write(&mut self, entry: &StepLog) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, entry)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    /// Full-train-set objective before and after the run.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub epoch_mean_loss: Vec<f64>,
    pub log: Vec<StepLog>,
}

fn check_finite(br: &LossBreakdown, step: usize) -> Result<()> {
    if br.l_total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        detail: serde_json::to_string(br)?,
    })
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Frozen image features of every train image (`n × embed_dim`).
pub fn frozen_features(encoders: &Encoders, images: &[DecodedImage]) -> Result<Tensor> {
    let chunks = images
        .chunks(ENCODE_CHUNK)
        .map(|c| encoders.encode_images(c, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&chunks, 0)?)
}

/// Stage-One objective for one batch of cached image features.
pub fn stage1_batch_loss(
    prompt: &PromptState,
    encoders: &Encoders,
    features: &Tensor,
    labels: &[usize],
    scale: &Tensor,
) -> Result<(Tensor, LossBreakdown)> {
    let desc = prompt.describe_batch(features, labels, encoders)?;
    let s = SimilarityMatrix::new(features, &desc, scale)?;
    let loss = stage1_loss(&s)?;
    let l_total = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((
        loss,
        LossBreakdown {
            l_total,
            ..LossBreakdown::default()
        },
    ))
}

fn sequential_batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn stage1_full_loss(model: &Model, features: &Tensor, labels: &[usize], batch: usize) -> Result<f64> {
    let prompt = model.prompt.as_ref().expect("checked by caller");
    let scale = model.temperature.scale(false)?;
    let batches = sequential_batches(labels.len(), batch);
    let mut total = 0.0;
    for b in &batches {
        let y: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
        let (_, br) = stage1_batch_loss(prompt, &model.encoders, &rows(features, b)?, &y, &scale)?;
        total += br.l_total;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Trains the prompt learner against frozen encoders.
pub fn run_stage1(config: &TrainConfig, data: &TrainData, model: &mut Model, out: &RunOutputs) -> Result<TrainReport> {
    config.validate()?;
    if config.mode != Mode::Indivaid {
        return Err(Error::invalid(format!("mode {} has no stage one", config.mode)));
    }
    let prompt_ids = model
        .prompt
        .as_ref()
        .ok_or_else(|| Error::invalid("stage one needs an initialized prompt learner"))?
        .num_identities();
    if prompt_ids != data.identities.len() {
        return Err(Error::invalid(format!(
            "prompt learner has {prompt_ids} identities, dataset has {}",
            data.identities.len()
        )));
    }
    if data.len() < 2 {
        return Err(Error::invalid("stage one needs at least two train images"));
    }
    let start_epoch = if model.stage == 1 { model.epochs_completed } else { 0 };
    let features = frozen_features(&model.encoders, &data.images)?;
    let batch = config.stage1_batch_size.min(data.len());
    let steps_per_epoch = sequential_batches(data.len(), batch).len();
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let scale = model.temperature.scale(false)?;

    let mut report = TrainReport {
        initial_loss: Some(stage1_full_loss(model, &features, &data.labels, batch)?),
        ..TrainReport::default()
    };
    let mut sink = LogSink::open(out.log_path.as_deref(), start_epoch > 0)?;
    let vars = model.prompt.as_ref().expect("checked").params().vars();
    let mut opt = AdamW::new(vars, adam(config.stage1_lr))?;
    let mut step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT ^ epoch_mix(epoch));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
            let lr = lr_stage1(step, total_steps, config.stage1_lr)?;
            opt.set_learning_rate(lr);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let prompt = model.prompt.as_ref().expect("checked");
            let (loss, br) = stage1_batch_loss(prompt, &model.encoders, &rows(&features, chunk)?, &y, &scale)?;
            check_finite(&br, step)?;
            opt.backward_step(&loss)?;
            let entry = StepLog {
                stage: 1,
                epoch,
                step,
                losses: br,
                lr,
                logit_scale: model.temperature.value()?,
            };
            sink.write(&entry)?;
            epoch_sum += entry.losses.l_total;
            epoch_steps += 1;
            report.log.push(entry);
            step += 1;
        }
        report.epoch_mean_loss.push(epoch_sum / epoch_steps.max(1) as f64);
        model.stage = 1;
        model.epochs_completed = epoch + 1;
        if let Some(dir) = &out.checkpoint_dir {
            model.save(dir)?;
        }
    }
    sink.flush()?;
    model.stage = 1;
    model.config_hash = config.hash()?;
    report.steps = step;
    report.epochs = config.epochs;
    report.final_loss = Some(stage1_full_loss(model, &features, &data.labels, batch)?);
    if let Some(dir) = &out.checkpoint_dir {
        model.save(dir)?;
    }
    Ok(report)
}

fn epoch_mix(epoch: usize) -> u64 {
    (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn adam(lr: f64) -> ParamsAdamW {
    ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    }
}

/// Description features a Stage-Two batch is scored against.
pub enum Descriptions<'a> {
    /// Attention merge over the cached per-image descriptions.
    Merged {
        bank: &'a DescriptionBank,
        attention: &'a AttentionParams,
    },
    /// Precomputed `N × D` rows.
    Fixed(&'a Tensor),
}

impl Descriptions<'_> {
    pub fn tensor(&self) -> Result<Tensor> {
        match self {
            Descriptions::Merged { bank, attention } => attention.merged_descriptions(bank),
            Descriptions::Fixed(t) => Ok((*t).clone()),
        }
    }
}

/// Stage-Two objective for one batch of (already augmented) images.
#[allow(clippy::too_many_arguments)]
pub fn stage2_batch_loss(
    model: &Model,
    images: &[DecodedImage],
    labels: &[usize],
    descriptions: &Descriptions<'_>,
    flags: &LossFlags,
    tau: f64,
    epsilon: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let features = model.encoders.encode_images(images, true)?;
    let desc = descriptions.tensor()?;
    let logits = if flags.contains(&LossTerm::Id) {
        let head = model
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("identity loss needs a classifier head"))?;
        Some(head.logits(&features)?)
    } else {
        None
    };
    let scale = model.temperature.scale(true)?;
    let batch = Stage2Batch {
        features: &features,
        labels,
        id_logits: logits.as_ref(),
        descriptions: &desc,
        scale: &scale,
    };
    stage2_loss(&batch, flags, tau, epsilon)
}

/// Encoding of the literal sentence "A photo of a <species>." for every
/// identity (`N × D`).
pub fn literal_descriptions(encoders: &Encoders, species: &str, n: usize) -> Result<Tensor> {
    let special = encoders.special_tokens();
    let l = encoders.config().context_length;
    let mut ids = vec![special.start];
    ids.extend(encoders.tokenize(&format!("{INIT_PHRASE} {species}."))?);
    let eos = ids.len();
    ids.push(special.end);
    if ids.len() > l {
        return Err(Error::Config(format!(
            "literal prompt needs {} tokens, context_length is {l}",
            ids.len()
        )));
    }
    ids.resize(l, special.pad);
    let emb = encoders.word_embed(&ids)?;
    let t = encoders.encode_text(&emb, eos)?;
    let row = t.to_tensor(encoders.dtype(), encoders.device())?;
    Ok(row.unsqueeze(0)?.repeat((n, 1))?)
}

/// Per-image description cache built with the frozen generator.
pub fn build_bank(model: &Model, data: &TrainData) -> Result<DescriptionBank> {
    let prompt = model
        .prompt
        .as_ref()
        .ok_or_else(|| Error::invalid("description bank needs a trained prompt learner"))?;
    let features = frozen_features(&model.encoders, &data.images)?;
    DescriptionBank::build(&features, &data.labels, prompt, &model.encoders, ENCODE_CHUNK)
}

fn stage2_loop(
    config: &TrainConfig,
    data: &TrainData,
    model: &mut Model,
    out: &RunOutputs,
    bank: Option<&DescriptionBank>,
    fixed: Option<&Tensor>,
) -> Result<TrainReport> {
    let start_epoch = if model.stage == 2 { model.epochs_completed } else { 0 };
    let schedule = Stage2Schedule::from_config(config);
    let mut vars = model.encoders.image_params().vars();
    vars.extend(model.temperature.params().vars());
    if let Some(c) = &model.classifier {
        vars.extend(c.params().vars());
    }
    if bank.is_some() {
        if let Some(a) = &model.attention {
            vars.extend(a.params().vars());
        }
    }
    let mut opt = AdamW::new(vars, adam(schedule.lr(start_epoch)))?;
    let mut sink = LogSink::open(out.log_path.as_deref(), start_epoch > 0)?;
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in start_epoch..config.epochs {
        let lr = schedule.lr(epoch);
        opt.set_learning_rate(lr);
        let plan = make_batches(
            &data.records,
            config.I,
            config.K,
            config.seed ^ SAMPLER_SALT ^ epoch_mix(epoch),
        )?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ AUGMENT_SALT ^ epoch_mix(epoch));
        let mut epoch_sum = 0.0;
        for batch in &plan.batches {
            let images: Vec<DecodedImage> = batch
                .iter()
                .map(|&i| augment(&data.images[i], &config.augment, &mut aug_rng))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let desc = match (bank, fixed, &model.attention) {
                (Some(bank), _, Some(attention)) => Descriptions::Merged { bank, attention },
                (None, Some(t), _) => Descriptions::Fixed(t),
                _ => return Err(Error::invalid("stage two has no description source")),
            };
            let (loss, br) = stage2_batch_loss(model, &images, &labels, &desc, &config.loss_flags, config.tau, config.epsilon)?;
            check_finite(&br, step)?;
            opt.backward_step(&loss)?;
            let entry = StepLog {
                stage: 2,
                epoch,
                step,
                losses: br,
                lr,
                logit_scale: model.temperature.value()?,
            };
            sink.write(&entry)?;
            epoch_sum += entry.losses.l_total;
            report.log.push(entry);
            step += 1;
        }
        report.epoch_mean_loss.push(epoch_sum / plan.batches.len().max(1) as f64);
        model.stage = 2;
        model.epochs_completed = epoch + 1;
        if let Some(dir) = &out.checkpoint_dir {
            model.save(dir)?;
        }
    }
    sink.flush()?;
    model.stage = 2;
    model.config_hash = config.hash()?;
    report.steps = step;
    report.epochs = config.epochs;
    if let Some(dir) = &out.checkpoint_dir {
        model.save(dir)?;
    }
    Ok(report)
}

fn check_identities(model: &Model, data: &TrainData) -> Result<()> {
    if model.identities != data.identities {
        return Err(Error::invalid(format!(
            "model was built for {} train identities that differ from the dataset's {}",
            model.num_identities(),
            data.identities.len()
        )));
    }
    Ok(())
}

/// Fine-tunes the image encoder against attention-merged descriptions from
/// the (frozen) Stage-One generator.
pub fn run_stage2(config: &TrainConfig, data: &TrainData, model: &mut Model, out: &RunOutputs) -> Result<TrainReport> {
    config.validate()?;
    if config.mode != Mode::Indivaid {
        return Err(Error::invalid(format!(
            "mode {} goes through run_baseline",
            config.mode
        )));
    }
    if model.prompt.is_none() || model.stage == 0 {
        return Err(Error::invalid("stage two needs a stage-one checkpoint"));
    }
    check_identities(model, data)?;
    let bank = build_bank(model, data)?;
    model.ensure_stage2_heads(config.seed)?;
    stage2_loop(config, data, model, out, Some(&bank), None)
}

/// Baselines: `clip_zs` trains nothing; `clip_ft` runs the Stage-Two loop
/// with the literal species sentence as every identity's description.
pub fn run_baseline(config: &TrainConfig, data: &TrainData, model: &mut Model, out: &RunOutputs) -> Result<Option<TrainReport>> {
    config.validate()?;
    match config.mode {
        Mode::Indivaid => Err(Error::invalid("indivaid mode is not a baseline")),
        Mode::ClipZs => Ok(None),
        Mode::ClipFt => {
            check_identities(model, data)?;
            let fixed = literal_descriptions(&model.encoders, &config.species, model.num_identities())?;
            model.ensure_stage2_heads(config.seed)?;
            stage2_loop(config, data, model, out, None, Some(&fixed)).map(Some)
        }
    }
}

/// Unit-norm frozen image features, one per record.
pub fn embed_images(encoders: &Encoders, images: &[DecodedImage]) -> Result<Vec<FeatureVector>> {
    let feats = frozen_features(encoders, images)?;
    feats
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| FeatureVector::new(r).normalize())
        .collect()
}

/// Embeds gallery and query images and scores retrieval.
pub fn evaluate_encoders(encoders: &Encoders, dataset: &Dataset) -> Result<MetricsReport> {
    let size = encoders.config().image_size;
    let gallery = dataset.split_records(Split::Gallery);
    let query = dataset.split_records(Split::Query);
    if gallery.is_empty() || query.is_empty() {
        return Err(Error::Structural("gallery and query splits must both be non-empty".into()));
    }
    let g = embed_images(encoders, &load_images(&gallery, size)?)?;
    let q = embed_images(encoders, &load_images(&query, size)?)?;
    let gl: Vec<usize> = gallery.iter().map(|r| r.identity).collect();
    let ql: Vec<usize> = query.iter().map(|r| r.identity).collect();
    let values = |v: Vec<FeatureVector>| v.into_iter().map(|f| f.values).collect::<Vec<_>>();
    evaluate(&values(q), &ql, &values(g), &gl)
}
