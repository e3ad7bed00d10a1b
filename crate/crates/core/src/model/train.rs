//! Mini-batch AdamW training with BCE loss.
//!
//! Every random draw comes from a generator derived from `(seed, purpose,
//! epoch[, index])`, so a run resumed from a checkpoint after epoch `e`
//! continues exactly as an uninterrupted run would.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{AideConfig, SemanticSource};
use super::embedding::EmbeddingTable;
use super::params::{Gradients, ModelParams};
use super::pipeline::{model_backward, model_forward, PreparedInput, Preprocessor};
use crate::data::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::imageio::{load_image, RgbImage};
use crate::nn::{adamw_step, bce_with_logits};
use crate::perturb::{apply_augment, draw_augment};
use crate::seeding::stream_rng;

const INIT_STREAM: u64 = 0x494E_4954;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474D;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint's parameters, optimizer state and epoch.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (defaults to `cfg.epochs`).
    pub stop_after: Option<usize>,
    /// Parameters whose name starts with any of these prefixes are not updated.
    pub frozen: Vec<String>,
}

/// One labelled training image held in memory.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub label: Label,
    pub image: RgbImage,
}

/// Table dimension the semantic projection consumes, `None` for the tiny encoder.
pub fn semantic_input_dim(cfg: &AideConfig, table: Option<&EmbeddingTable>) -> Result<Option<usize>> {
    match (cfg.semantic_source, table) {
        (SemanticSource::TinyEncoder, _) => Ok(None),
        (SemanticSource::EmbeddedTable, Some(t)) => Ok(Some(t.dim())),
        (SemanticSource::EmbeddedTable, None) if !cfg.ablation.uses_semantic() => Ok(Some(cfg.semantic_dim)),
        (SemanticSource::EmbeddedTable, None) => {
            Err(Error::Config("embedded_table mode requires an embedding table".into()))
        }
    }
}

/// Freshly initialized checkpoint at epoch 0.
pub fn init_checkpoint(cfg: &AideConfig, table: Option<&EmbeddingTable>) -> Result<Checkpoint> {
    cfg.validate()?;
    let sdim = semantic_input_dim(cfg, table)?;
    let mut rng = stream_rng(cfg.seed, &[INIT_STREAM]);
    let params = ModelParams::init(cfg.encoder_dim, cfg.semantic_dim, cfg.fusion_hidden, sdim, &mut rng);
    Ok(Checkpoint {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs_completed: 0,
        epoch_losses: Vec::new(),
        semantic_input_dim: sdim,
        params,
    })
}

/// Loads the train split of a manifest.
pub fn load_train_examples(manifest: &DatasetManifest) -> Result<Vec<TrainExample>> {
    let train = manifest.split(Split::Train);
    train
        .records
        .par_iter()
        .map(|r| {
            Ok(TrainExample {
                id: r.id.clone(),
                label: r.label,
                image: load_image(train.resolve(r))?,
            })
        })
        .collect()
}

pub fn train_model(manifest: &DatasetManifest, cfg: &AideConfig, table: Option<&EmbeddingTable>) -> Result<Checkpoint> {
    train_with(manifest, cfg, table, &TrainOptions::default())
}

pub fn train_with(
    manifest: &DatasetManifest,
    cfg: &AideConfig,
    table: Option<&EmbeddingTable>,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let examples = load_train_examples(manifest)?;
    train_examples(&examples, cfg, table, opts)
}

fn same_model_config(a: &AideConfig, b: &AideConfig) -> bool {
    let strip = |c: &AideConfig| AideConfig { epochs: 0, ..c.clone() };
    strip(a) == strip(b)
}

pub fn train_examples(
    examples: &[TrainExample],
    cfg: &AideConfig,
    table: Option<&EmbeddingTable>,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    let fakes = examples.iter().filter(|e| e.label == Label::Fake).count();
    if fakes == 0 || fakes == examples.len() {
        return Err(Error::Training(format!(
            "training split has a single class ({} examples, {fakes} fake)",
            examples.len()
        )));
    }
    let mut ckpt = match &opts.resume {
        Some(c) => {
            if !same_model_config(&c.config, cfg) {
                return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
            }
            let mut c = c.clone();
            c.config.epochs = cfg.epochs;
            c
        }
        None => init_checkpoint(cfg, table)?,
    };
    ckpt.check_table(table)?;
    let pre = Preprocessor::new(cfg)?;
    let cached: Vec<PreparedInput> = examples
        .par_iter()
        .map(|e| pre.prepare(&e.image, &e.id, table))
        .collect::<Result<_>>()?;
    let adam = cfg.adamw();
    let end = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let n = examples.len();
    for epoch in ckpt.epochs_completed..end {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let params = &ckpt.params;
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
                    let draw = draw_augment(&mut rng, cfg.augment_prob);
                    let augmented;
                    let input = if draw.jpeg_qf.is_none() && draw.blur_sigma.is_none() {
                        &cached[i]
                    } else {
                        let img = apply_augment(&examples[i].image, &draw)?;
                        augmented = pre.prepare(&img, &examples[i].id, table)?;
                        &augmented
                    };
                    let trace = model_forward(params, input, cfg)?;
                    let (loss, dlogit) = bce_with_logits(trace.logit, examples[i].label.target());
                    let mut grads = params.zero_grads();
                    model_backward(params, &trace, dlogit, cfg, &mut grads)?;
                    Ok((loss, grads))
                })
                .collect();
            let mut total: Option<Gradients> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                match &mut total {
                    Some(t) => t.add_assign(&g),
                    None => total = Some(g),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Optimizer(format!(
                    "non-finite loss in epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += batch_loss;
            let mut grads = total.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            for ((name, p), (_, g)) in ckpt.params.named_mut().into_iter().zip(grads.named()) {
                if opts.frozen.iter().any(|f| name.starts_with(f.as_str())) {
                    continue;
                }
                p.grad = g.clone();
                adamw_step(p, &adam).map_err(|e| Error::Optimizer(format!("epoch {epoch}, batch {b}, {name}: {e}")))?;
            }
        }
        let mean = epoch_loss / n as f64;
        log::info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        ckpt.epoch_losses.push(mean);
        ckpt.epochs_completed = epoch + 1;
    }
    Ok(ckpt)
}
