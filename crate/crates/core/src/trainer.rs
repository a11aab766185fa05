//! Two-stage optimization loop.
//!
//! Stage 1 trains the generative model and its inference machinery, with the
//! per-batch objective picked by model family: the subset-mixture bound, the
//! product-posterior alignment objective, or the unrolled refinement loss.
//! Stage 2 freezes everything except the per-modality alignment encoders and
//! distills a fixed source posterior into them by forward KL, selecting the
//! epoch with the lowest validation KL.
//!
//! Every stochastic choice (initialization, batch order, sampling noise)
//! flows from one root seed through labeled streams, so identical
//! configurations reproduce bit-identical checkpoints and reports.

use rand_chacha::ChaCha8Rng;

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::gaussian::{poe, uniform_subset_weights, DiagGaussian, GaussNodes};
use crate::graph::{Graph, NodeId};
use crate::model::{encode_batch, Arch, EncoderKind, ModelParams, ParamNodes};
use crate::objectives::{gb_alignment_kl_loss, gb_alignment_objective, gb_mopoe_elbo};
use crate::optim::AdamState;
use crate::refiner::{build_refinement_training_loss, refine_batch, RefineOptions};
use crate::rng::{standard_normal_tensor, stream, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Mixture,
    Alignment,
    Proposed,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(Family::Mixture),
            "alignment" => Ok(Family::Alignment),
            "proposed" => Ok(Family::Proposed),
            other => Err(Error::invalid(format!(
                "unknown family {} (expected mixture | alignment | proposed)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Mixture => "mixture",
            Family::Alignment => "alignment",
            Family::Proposed => "proposed",
        }
    }

    pub fn has_stage2(&self) -> bool {
        !matches!(self, Family::Mixture)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub family: Family,
    pub arch: Arch,
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub clip_norm: Option<f64>,
    /// Refinement steps (proposed family).
    pub t_steps: usize,
    /// Subset weights for the mixture bound; `None` means uniform.
    pub subset_weights: Option<Vec<f64>>,
    /// Per-modality alignment KL weights; `None` means uniform.
    pub pi: Option<Vec<f64>>,
    /// Per-modality reconstruction weights; `None` keeps the per-unit default.
    pub betas: Option<Vec<f64>>,
    /// Pin the decoder to the dataset's linear generative process and freeze
    /// it (linear-Gaussian datasets only). Forces unit reconstruction
    /// weights so bounds are genuine log-likelihood bounds.
    pub oracle_decoder: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(family: Family, arch: Arch, seed: u64) -> Self {
        TrainConfig {
            family,
            arch,
            lr: 0.0002,
            gamma: 0.98,
            batch: 64,
            epochs_stage1: 20,
            epochs_stage2: 20,
            clip_norm: Some(10.0),
            t_steps: 8,
            subset_weights: None,
            pi: None,
            betas: None,
            oracle_decoder: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch losses plus the selected epoch. Wall-clock is informational and
/// deliberately excluded from the CSV so reports are reproducible.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub selected_epoch: usize,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
        }
        out
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
    pub rng_state: RngState,
}

fn shuffled(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut out = indices.to_vec();
    out.shuffle(rng);
    out
}

fn stage1_trainable(config: &TrainConfig) -> impl Fn(&str) -> bool + '_ {
    let freeze_decoder = config.oracle_decoder;
    move |name: &str| {
        if freeze_decoder && name.starts_with("dec.") {
            return false;
        }
        true
    }
}

/// One stage-1 loss evaluation over a batch: returns the scalar loss and, if
/// requested, the named gradients.
fn stage1_batch<'p>(
    config: &TrainConfig,
    params: &'p ModelParams,
    xs: &[Tensor],
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor>>)> {
    let m = params.modalities.len();
    let batch = xs[0].shape()[0];
    let d = params.arch.latent_dim;
    let trainable = stage1_trainable(config);

    match config.family {
        Family::Mixture => {
            let weights = config
                .subset_weights
                .clone()
                .unwrap_or_else(|| uniform_subset_weights(m));
            let mut g = Graph::new();
            let mut pn = ParamNodes::new(params, trainable);
            let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let noises: Vec<NodeId> = (0..(1usize << m) - 1)
                .map(|_| g.constant(standard_normal_tensor(rng, &[batch, d])))
                .collect();
            let rows = gb_mopoe_elbo(&mut g, &mut pn, params, &xns, &weights, &noises)?;
            let neg = g.neg(rows);
            let loss = g.mean(neg);
            let value = g.eval(loss)?.item()?;
            let grads = if with_grads {
                let gr = g.backward(loss)?;
                Some(pn.named_grads(&gr))
            } else {
                None
            };
            Ok((value, grads))
        }
        Family::Alignment => {
            let pi = config.pi.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]);
            let mut g = Graph::new();
            let mut pn = ParamNodes::new(params, trainable);
            let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let noise = g.constant(standard_normal_tensor(rng, &[batch, d]));
            let built = gb_alignment_objective(&mut g, &mut pn, params, &xns, &pi, noise)?;
            let neg = g.neg(built.objective);
            let loss = g.mean(neg);
            let value = g.eval(loss)?.item()?;
            let grads = if with_grads {
                let gr = g.backward(loss)?;
                Some(pn.named_grads(&gr))
            } else {
                None
            };
            Ok((value, grads))
        }
        Family::Proposed => {
            let mut built = build_refinement_training_loss(
                params,
                xs,
                config.t_steps,
                rng,
                trainable,
                &RefineOptions::default(),
            )?;
            let value = built.graph.eval(built.loss)?.item()?;
            let grads = if with_grads {
                let gr = built.graph.backward(built.loss)?;
                Some(built.pn.named_grads(&gr))
            } else {
                None
            };
            Ok((value, grads))
        }
    }
}

fn mean_loss_over(
    config: &TrainConfig,
    params: &ModelParams,
    data: &MultimodalDataset,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(config.batch.max(1)) {
        let xs = data.batch(chunk);
        let (loss, _) = stage1_batch(config, params, &xs, rng, false)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

fn validate_config(config: &TrainConfig, data: &MultimodalDataset) -> Result<()> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("dataset must have train and validation items"));
    }
    if config.oracle_decoder && data.oracle.is_none() {
        return Err(Error::invalid(
            "oracle decoder requested but the dataset has no analytic oracle",
        ));
    }
    if config.family == Family::Proposed && config.t_steps == 0 {
        return Err(Error::invalid("proposed family needs at least one refinement step"));
    }
    Ok(())
}

fn init_params(config: &TrainConfig, data: &MultimodalDataset) -> Result<ModelParams> {
    let mut arch = config.arch.clone();
    if config.oracle_decoder {
        arch.linear_decoder = true;
    }
    let mut init_rng = stream(config.seed, "init", &[]);
    let mut params = ModelParams::init(
        data.modalities.clone(),
        arch,
        config.family == Family::Alignment,
        config.family == Family::Proposed,
        &mut init_rng,
    )?;
    if let Some(betas) = &config.betas {
        if betas.len() != params.modalities.len() {
            return Err(Error::invalid("betas must have one entry per modality"));
        }
        params.betas = betas.clone();
    }
    if config.oracle_decoder {
        let oracle = data.oracle.as_ref().expect("validated");
        params.betas = vec![1.0; params.modalities.len()];
        for (m, a) in oracle.loadings.iter().enumerate() {
            let (dim, d) = (a.shape()[0], a.shape()[1]);
            let mut wt = vec![0.0; d * dim];
            for r in 0..dim {
                for c in 0..d {
                    wt[c * dim + r] = a.at(r, c);
                }
            }
            params.set(
                format!("dec.head.{}.w", params.modalities[m].name),
                Tensor::new(vec![d, dim], wt)?,
            );
        }
    }
    Ok(params)
}

/// Stage 1: train the family objective, track per-epoch train/validation
/// losses, and return the parameters from the best-validation epoch.
pub fn train_stage1(config: &TrainConfig, data: &MultimodalDataset) -> Result<TrainOutcome> {
    validate_config(config, data)?;
    let start = std::time::Instant::now();
    let mut params = init_params(config, data)?;
    let mut opt = AdamState::new(config.lr, config.gamma)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut main_rng = stream(config.seed, "stage1", &[]);

    for epoch in 0..config.epochs_stage1 {
        let mut shuffle_rng = stream(config.seed, "shuffle-s1", &[epoch as u64]);
        let order = shuffled(&data.train, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut items = 0usize;
        let mut applied = 0usize;
        for chunk in order.chunks(config.batch) {
            let xs = data.batch(chunk);
            match stage1_batch(config, &params, &xs, &mut main_rng, true) {
                Ok((loss, Some(grads))) if loss.is_finite() => {
                    epoch_loss += loss * chunk.len() as f64;
                    items += chunk.len();
                    if opt.step(&mut params, &grads, config.clip_norm)?
                        == crate::optim::StepOutcome::Applied
                    {
                        applied += 1;
                    }
                }
                Ok(_) => {}
                Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if applied == 0 {
            return Err(Error::Divergence(format!(
                "no finite batch in stage-1 epoch {} ({} gradient skips so far)",
                epoch, opt.skipped
            )));
        }
        let train_loss = epoch_loss / items.max(1) as f64;
        let mut val_rng = stream(config.seed, "val-s1", &[epoch as u64]);
        let val_loss = mean_loss_over(config, &params, data, &data.val, &mut val_rng)?;
        rows.push(ReportRow {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: train_loss,
        });
        rows.push(ReportRow {
            epoch,
            split: "val".into(),
            metric: "loss".into(),
            value: val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
        opt.schedule_epoch();
    }

    let (_, selected_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        report: TrainReport {
            rows,
            selected_epoch,
            seed: config.seed,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        rng_state: RngState::capture(&main_rng),
    })
}

/// Precompute the stage-2 distillation sources for the given items: per
/// modality, the refined posterior (proposed) or the full product posterior
/// (alignment; identical across modalities).
fn stage2_sources(
    config: &TrainConfig,
    params: &ModelParams,
    data: &MultimodalDataset,
    indices: &[usize],
) -> Result<Vec<Vec<DiagGaussian>>> {
    let m_count = params.modalities.len();
    let mut per_modality: Vec<Vec<DiagGaussian>> = vec![Vec::with_capacity(indices.len()); m_count];
    match config.family {
        Family::Proposed => {
            for (ci, chunk) in indices.chunks(256).enumerate() {
                let xs = data.batch(chunk);
                for m in 0..m_count {
                    let mut rng =
                        stream(config.seed, "stage2-source", &[m as u64, ci as u64]);
                    let refined = refine_batch(params, m, &xs, config.t_steps, &mut rng)?;
                    per_modality[m].extend(refined);
                }
            }
        }
        Family::Alignment => {
            let experts: Vec<Vec<DiagGaussian>> = (0..m_count)
                .map(|m| {
                    let full = data.batch(indices);
                    encode_batch(params, EncoderKind::Amortized, m, &full[m])
                })
                .collect::<Result<_>>()?;
            for i in 0..indices.len() {
                let row: Vec<DiagGaussian> =
                    (0..m_count).map(|m| experts[m][i].clone()).collect();
                let fused = poe(&row, true)?;
                for m in 0..m_count {
                    per_modality[m].push(fused.clone());
                }
            }
        }
        Family::Mixture => {
            return Err(Error::invalid("the mixture family has no alignment stage"));
        }
    }
    Ok(per_modality)
}

fn distill_loss(
    params: &ModelParams,
    xs: &[Tensor],
    sources: &[(Tensor, Tensor)],
    with_grads: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor>>)> {
    let mut g = Graph::new();
    let mut pn = ParamNodes::new(params, |name: &str| name.starts_with("lam."));
    let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let refined: Vec<GaussNodes> = sources
        .iter()
        .map(|(mean, ls)| GaussNodes {
            mean: g.constant(mean.clone()),
            log_std: g.constant(ls.clone()),
        })
        .collect();
    let rows = gb_alignment_kl_loss(&mut g, &mut pn, params, &xns, &refined)?;
    let loss = g.mean(rows);
    let value = g.eval(loss)?.item()?;
    let grads = if with_grads {
        let gr = g.backward(loss)?;
        Some(pn.named_grads(&gr))
    } else {
        None
    };
    Ok((value, grads))
}

fn source_batch(sources: &[Vec<DiagGaussian>], positions: &[usize], d: usize) -> Vec<(Tensor, Tensor)> {
    sources
        .iter()
        .map(|per_item| {
            let mut mean = Vec::with_capacity(positions.len() * d);
            let mut ls = Vec::with_capacity(positions.len() * d);
            for &p in positions {
                mean.extend_from_slice(per_item[p].mean());
                ls.extend_from_slice(per_item[p].log_std());
            }
            (
                Tensor::new(vec![positions.len(), d], mean).unwrap(),
                Tensor::new(vec![positions.len(), d], ls).unwrap(),
            )
        })
        .collect()
}

/// Stage 2: freeze everything but the alignment encoders and distill the
/// family's source posterior into them. The selected epoch minimizes the
/// validation KL between source and alignment encoders.
pub fn train_stage2(
    config: &TrainConfig,
    stage1_params: &ModelParams,
    data: &MultimodalDataset,
) -> Result<TrainOutcome> {
    validate_config(config, data)?;
    if !config.family.has_stage2() {
        return Err(Error::invalid("the mixture family has no alignment stage"));
    }
    if config.family == Family::Proposed && !stage1_params.has_refiner() {
        return Err(Error::invalid(
            "stage-1 checkpoint has no refinement parameters for the proposed family",
        ));
    }
    let start = std::time::Instant::now();
    let mut params = stage1_params.clone();
    if !params.has_alignment_encoders() {
        params.clone_encoders_to_alignment();
    }
    let frozen_digest = params.digest_where(|name| !name.starts_with("lam."));
    let d = params.arch.latent_dim;

    let train_sources = stage2_sources(config, stage1_params, data, &data.train)?;
    let val_sources = stage2_sources(config, stage1_params, data, &data.val)?;

    let mut opt = AdamState::new(config.lr, config.gamma)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    let val_positions: Vec<usize> = (0..data.val.len()).collect();
    for epoch in 0..config.epochs_stage2 {
        let mut shuffle_rng = stream(config.seed, "shuffle-s2", &[epoch as u64]);
        let positions: Vec<usize> = (0..data.train.len()).collect();
        let order = shuffled(&positions, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut items = 0usize;
        let mut applied = 0usize;
        for chunk in order.chunks(config.batch) {
            let item_ids: Vec<usize> = chunk.iter().map(|&p| data.train[p]).collect();
            let xs = data.batch(&item_ids);
            let srcs = source_batch(&train_sources, chunk, d);
            match distill_loss(&params, &xs, &srcs, true) {
                Ok((loss, Some(grads))) if loss.is_finite() => {
                    epoch_loss += loss * chunk.len() as f64;
                    items += chunk.len();
                    if opt.step(&mut params, &grads, config.clip_norm)?
                        == crate::optim::StepOutcome::Applied
                    {
                        applied += 1;
                    }
                }
                Ok(_) => {}
                Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if applied == 0 {
            return Err(Error::Divergence(format!(
                "no finite batch in stage-2 epoch {}",
                epoch
            )));
        }

        let mut val_loss = 0.0;
        let mut val_items = 0usize;
        for chunk in val_positions.chunks(config.batch) {
            let item_ids: Vec<usize> = chunk.iter().map(|&p| data.val[p]).collect();
            let xs = data.batch(&item_ids);
            let srcs = source_batch(&val_sources, chunk, d);
            let (loss, _) = distill_loss(&params, &xs, &srcs, false)?;
            val_loss += loss * chunk.len() as f64;
            val_items += chunk.len();
        }
        let val_loss = val_loss / val_items.max(1) as f64;

        rows.push(ReportRow {
            epoch,
            split: "train".into(),
            metric: "distill_kl".into(),
            value: epoch_loss / items.max(1) as f64,
        });
        rows.push(ReportRow {
            epoch,
            split: "val".into(),
            metric: "distill_kl".into(),
            value: val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
        opt.schedule_epoch();
    }

    let (_, selected_epoch, best_params) = best.expect("at least one epoch ran");
    if best_params.digest_where(|name| !name.starts_with("lam.")) != frozen_digest {
        return Err(Error::invalid(
            "stage 2 modified frozen parameters; this is a bug",
        ));
    }
    Ok(TrainOutcome {
        params: best_params,
        report: TrainReport {
            rows,
            selected_epoch,
            seed: config.seed,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        rng_state: RngState::capture(&stream(config.seed, "stage2", &[])),
    })
}
