//! Training objectives: the multimodal evidence lower bound, the
//! subset-mixture bound, the posterior-alignment objective, the refinement
//! loss, the distillation KL, and the exact information-loss gap on discrete
//! joints.
//!
//! Each objective exists as a batched graph builder (for training and
//! gradient checks) and as a value-level function over a single item (the
//! form the contracts and oracle tests are written against). Expectations
//! during training use a single reparameterized sample; evaluation-time
//! multi-sample estimates use antithetic noise pairs, which cancel the
//! odd-order sampling noise and make stationarity checks at analytic optima
//! exact to roundoff.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{
    gb_kl, gb_kl_prior, gb_poe, gb_sample, gb_standard, subset_masks, DiagGaussian, GaussNodes,
};
use crate::graph::{Graph, NodeId};
use crate::model::{
    gb_decode_log_lik, gb_encode, EncoderKind, ModelParams, ParamNodes,
};
use crate::rng::standard_normal_vec;
use crate::tensor::Tensor;

/// One evidence-bound evaluation, split into its terms (all nats).
/// `total` is computed as `reconstruction - kl`, so the identity is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    /// Weighted per-modality reconstruction terms, ascending modality index.
    pub per_modality: Vec<(usize, f64)>,
}

/// Graph nodes of one evidence-bound evaluation; `(batch,)` rows.
pub struct GbElbo {
    pub recon: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
    pub per_modality: Vec<(usize, NodeId)>,
}

/// Single-sample evidence bound for posterior statistics `q` (shape
/// `(batch, latent)`), reconstructing the modalities in `recon_subset`.
pub fn gb_elbo(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    q: GaussNodes,
    xs: &[NodeId],
    recon_subset: &[usize],
    noise: NodeId,
) -> Result<GbElbo> {
    let z = gb_sample(g, q, noise)?;
    let (recon, per_modality) = gb_decode_log_lik(g, pn, params, z, xs, recon_subset)?;
    let kl = gb_kl_prior(g, q)?;
    let nkl = g.neg(kl);
    let total = g.add(recon, nkl)?;
    Ok(GbElbo {
        recon,
        kl,
        total,
        per_modality,
    })
}

fn eval_breakdown(g: &mut Graph, nodes: &GbElbo, row: usize) -> Result<ElboBreakdown> {
    let recon = g.eval(nodes.recon)?.data()[row];
    let kl = g.eval(nodes.kl)?.data()[row];
    let total = g.eval(nodes.total)?.data()[row];
    let mut per_modality = Vec::with_capacity(nodes.per_modality.len());
    for &(mi, id) in &nodes.per_modality {
        per_modality.push((mi, g.eval(id)?.data()[row]));
    }
    Ok(ElboBreakdown {
        reconstruction: recon,
        kl,
        total,
        per_modality,
    })
}

fn const_stats(g: &mut Graph, q: &DiagGaussian) -> GaussNodes {
    GaussNodes {
        mean: g.constant(crate::model::one_row(q.mean())),
        log_std: g.constant(crate::model::one_row(q.log_std())),
    }
}

fn const_rows(g: &mut Graph, xs: &[Vec<f64>]) -> Vec<NodeId> {
    xs.iter().map(|x| g.constant(crate::model::one_row(x))).collect()
}

/// Single-sample evidence bound for one item: expected reconstruction of the
/// subset minus the KL of `q` from the standard prior. The KL term equals
/// [`crate::gaussian::kl_diag`] against the prior bit for bit.
pub fn elbo(
    params: &ModelParams,
    xs: &[Vec<f64>],
    q: &DiagGaussian,
    recon_subset: &[usize],
    noise: &[f64],
) -> Result<ElboBreakdown> {
    if q.dim() != params.arch.latent_dim {
        return Err(Error::shape(format!(
            "posterior dim {} vs latent dim {}",
            q.dim(),
            params.arch.latent_dim
        )));
    }
    if noise.len() != q.dim() {
        return Err(Error::shape("noise dim must match latent dim"));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let qn = const_stats(&mut g, q);
    let xns = const_rows(&mut g, xs);
    let nn = g.constant(crate::model::one_row(noise));
    let nodes = gb_elbo(&mut g, &mut pn, params, qn, &xns, recon_subset, nn)?;
    eval_breakdown(&mut g, &nodes, 0)
}

/// Noise matrix of `k` rows where consecutive rows are antithetic pairs.
pub fn antithetic_noise(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(k * dim);
    let mut row = 0;
    while row + 1 < k {
        let n = standard_normal_vec(rng, dim);
        data.extend_from_slice(&n);
        data.extend(n.iter().map(|v| -v));
        row += 2;
    }
    if row < k {
        data.extend(standard_normal_vec(rng, dim));
    }
    Tensor::new(vec![k, dim], data).unwrap()
}

/// `k`-sample evidence bound with antithetic pairs; the KL term stays closed
/// form, only the reconstruction expectation is averaged over samples.
pub fn elbo_multi_sample(
    params: &ModelParams,
    xs: &[Vec<f64>],
    q: &DiagGaussian,
    recon_subset: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ElboBreakdown> {
    if k == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let d = q.dim();
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let mean_v = g.constant(Tensor::vector(q.mean().to_vec()));
    let ls_v = g.constant(Tensor::vector(q.log_std().to_vec()));
    let mean_b = g.broadcast(mean_v, &[k, d])?;
    let ls_b = g.broadcast(ls_v, &[k, d])?;
    let noise = antithetic_noise(rng, k, d);
    let nn = g.constant(noise);
    let z = gb_sample(
        &mut g,
        GaussNodes {
            mean: mean_b,
            log_std: ls_b,
        },
        nn,
    )?;
    let xns: Vec<NodeId> = xs
        .iter()
        .map(|x| {
            let v = g.constant(Tensor::vector(x.clone()));
            g.broadcast(v, &[k, x.len()])
        })
        .collect::<Result<_>>()?;
    let (recon_rows, per_rows) = gb_decode_log_lik(&mut g, &mut pn, params, z, &xns, recon_subset)?;
    let recon_mean = g.mean(recon_rows);
    let qv = GaussNodes {
        mean: mean_v,
        log_std: ls_v,
    };
    let prior = gb_standard(&mut g, &[d]);
    let kl = gb_kl(&mut g, qv, prior)?;
    let nkl = g.neg(kl);
    let total = g.add(recon_mean, nkl)?;

    let mut per_modality = Vec::with_capacity(per_rows.len());
    for &(mi, id) in &per_rows {
        let m = g.mean(id);
        per_modality.push((mi, m));
    }
    let reconstruction = g.eval(recon_mean)?.item()?;
    let kl_v = g.eval(kl)?.item()?;
    let total_v = g.eval(total)?.item()?;
    let mut pm = Vec::with_capacity(per_modality.len());
    for (mi, id) in per_modality {
        pm.push((mi, g.eval(id)?.item()?));
    }
    Ok(ElboBreakdown {
        reconstruction,
        kl: kl_v,
        total: total_v,
        per_modality: pm,
    })
}

fn validate_subset_weights(m: usize, weights: &[f64]) -> Result<()> {
    let n = (1usize << m) - 1;
    if weights.len() != n {
        return Err(Error::invalid(format!(
            "expected {} subset weights for {} modalities, got {}",
            n,
            m,
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "subset weights must be non-negative and sum to 1, got sum {}",
            sum
        )));
    }
    Ok(())
}

fn validate_simplex(label: &str, m: usize, w: &[f64]) -> Result<()> {
    if w.len() != m {
        return Err(Error::invalid(format!(
            "{} must have one entry per modality ({}), got {}",
            label,
            m,
            w.len()
        )));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| *v < 0.0 || *v > 1.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{} must lie in the simplex, got sum {}",
            label, sum
        )));
    }
    Ok(())
}

/// Subset-mixture bound, batched: per subset `S` of modalities, fuse that
/// subset's encoders with the prior, sample, reconstruct ALL modalities, and
/// weight the subset bounds. Returns per-item `(batch,)` rows.
///
/// `noises` supplies one `(batch, latent)` noise node per nonempty subset in
/// [`subset_masks`] order.
pub fn gb_mopoe_elbo(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    xs: &[NodeId],
    weights: &[f64],
    noises: &[NodeId],
) -> Result<NodeId> {
    let m = params.modalities.len();
    validate_subset_weights(m, weights)?;
    let masks = subset_masks(m);
    if noises.len() != masks.len() {
        return Err(Error::invalid("one noise node per subset required"));
    }
    let experts: Vec<GaussNodes> = (0..m)
        .map(|k| gb_encode(g, pn, EncoderKind::Amortized, &params.modalities[k], xs[k]))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..m).collect();
    let mut total: Option<NodeId> = None;
    for (si, &mask) in masks.iter().enumerate() {
        let members: Vec<GaussNodes> = (0..m)
            .filter(|k| mask & (1 << k) != 0)
            .map(|k| experts[k])
            .collect();
        let fused = gb_poe(g, &members, true)?;
        let nodes = gb_elbo(g, pn, params, fused, xs, &all, noises[si])?;
        let weighted = g.scale(nodes.total, weights[si])?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.unwrap())
}

/// Subset-mixture bound for one item; fresh noise per subset from `rng`.
pub fn mopoe_elbo(
    params: &ModelParams,
    xs: &[Vec<f64>],
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let m = params.modalities.len();
    validate_subset_weights(m, weights)?;
    let d = params.arch.latent_dim;
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xns = const_rows(&mut g, xs);
    let noises: Vec<NodeId> = subset_masks(m)
        .iter()
        .map(|_| g.constant(crate::model::one_row(&standard_normal_vec(rng, d))))
        .collect();
    let rows = gb_mopoe_elbo(&mut g, &mut pn, params, &xns, weights, &noises)?;
    Ok(g.eval(rows)?.data()[0])
}

/// Nodes of the alignment objective (maximized): full-modality product
/// posterior bound minus weighted KLs from it to each alignment encoder.
pub struct GbAlignment {
    pub objective: NodeId,
    pub elbo_total: NodeId,
    pub kl_terms: Vec<NodeId>,
}

pub fn gb_alignment_objective(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    xs: &[NodeId],
    pi: &[f64],
    noise: NodeId,
) -> Result<GbAlignment> {
    let m = params.modalities.len();
    validate_simplex("pi", m, pi)?;
    let experts: Vec<GaussNodes> = (0..m)
        .map(|k| gb_encode(g, pn, EncoderKind::Amortized, &params.modalities[k], xs[k]))
        .collect::<Result<_>>()?;
    let fused = gb_poe(g, &experts, true)?;
    let all: Vec<usize> = (0..m).collect();
    let nodes = gb_elbo(g, pn, params, fused, xs, &all, noise)?;
    let mut objective = nodes.total;
    let mut kl_terms = Vec::with_capacity(m);
    for k in 0..m {
        let lam = gb_encode(g, pn, EncoderKind::Alignment, &params.modalities[k], xs[k])?;
        let kl = gb_kl(g, fused, lam)?;
        kl_terms.push(kl);
        let weighted = g.scale(kl, pi[k])?;
        let neg = g.neg(weighted);
        objective = g.add(objective, neg)?;
    }
    Ok(GbAlignment {
        objective,
        elbo_total: nodes.total,
        kl_terms,
    })
}

/// Alignment objective for one item.
pub fn alignment_objective(
    params: &ModelParams,
    xs: &[Vec<f64>],
    pi: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !params.has_alignment_encoders() {
        return Err(Error::invalid("model has no alignment encoders"));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xns = const_rows(&mut g, xs);
    let noise = standard_normal_vec(rng, params.arch.latent_dim);
    let nn = g.constant(crate::model::one_row(&noise));
    let built = gb_alignment_objective(&mut g, &mut pn, params, &xns, pi, nn)?;
    Ok(g.eval(built.objective)?.data()[0])
}

/// Refinement loss at a posterior state: the all-modality single-sample
/// evidence bound whose gradients with respect to the state statistics drive
/// the refinement network. Identical to [`elbo`] with the full subset.
pub fn refinement_loss(
    params: &ModelParams,
    xs: &[Vec<f64>],
    q_t: &DiagGaussian,
    noise: &[f64],
) -> Result<ElboBreakdown> {
    if xs.len() != params.modalities.len() {
        return Err(Error::invalid(format!(
            "refinement loss needs all {} modalities, got {}",
            params.modalities.len(),
            xs.len()
        )));
    }
    let all: Vec<usize> = (0..params.modalities.len()).collect();
    elbo(params, xs, q_t, &all, noise)
}

/// Distillation loss nodes: sum over modalities of
/// `KL[refined_m || alignment_m(x_m)]` with the refined statistics constant.
pub fn gb_alignment_kl_loss(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    xs: &[NodeId],
    refined: &[GaussNodes],
) -> Result<NodeId> {
    let m = params.modalities.len();
    if refined.len() != m {
        return Err(Error::invalid(format!(
            "need one refined posterior per modality ({}), got {}",
            m,
            refined.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for k in 0..m {
        let lam = gb_encode(g, pn, EncoderKind::Alignment, &params.modalities[k], xs[k])?;
        let kl = gb_kl(g, refined[k], lam)?;
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    Ok(total.unwrap())
}

/// Distillation loss for one item; gradients flow only into the alignment
/// encoders because the refined statistics enter as constants.
pub fn alignment_kl_loss(
    params: &ModelParams,
    xs: &[Vec<f64>],
    refined: &[DiagGaussian],
) -> Result<f64> {
    if !params.has_alignment_encoders() {
        return Err(Error::invalid("model has no alignment encoders"));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xns = const_rows(&mut g, xs);
    let refined_nodes: Vec<GaussNodes> = refined.iter().map(|q| const_stats(&mut g, q)).collect();
    let root = gb_alignment_kl_loss(&mut g, &mut pn, params, &xns, &refined_nodes)?;
    Ok(g.eval(root)?.data()[0])
}

// ---- discrete information gap ------------------------------------------------

/// Finite joint distribution over the modalities' alphabets, row-major with
/// modality 0 as the slowest axis.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    alphabet: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(alphabet: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let cells: usize = alphabet.iter().product();
        if alphabet.is_empty() || cells == 0 {
            return Err(Error::invalid("joint needs at least one modality and cell"));
        }
        if probs.len() != cells {
            return Err(Error::invalid(format!(
                "alphabet implies {} cells, got {}",
                cells,
                probs.len()
            )));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("joint probabilities must be non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("joint must sum to 1, got {}", sum)));
        }
        Ok(DiscreteJoint { alphabet, probs })
    }

    pub fn modalities(&self) -> usize {
        self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[usize] {
        &self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn cell_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (a, &i) in self.alphabet.iter().zip(idx) {
            flat = flat * a + i;
        }
        flat
    }

    pub fn prob(&self, idx: &[usize]) -> f64 {
        self.probs[self.cell_index(idx)]
    }

    /// Marginal probability table over the modalities in `mask`.
    pub fn marginal(&self, mask: u32) -> Vec<f64> {
        let m = self.modalities();
        let kept: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let size: usize = kept.iter().map(|&k| self.alphabet[k]).product();
        let mut out = vec![0.0; size.max(1)];
        let mut idx = vec![0usize; m];
        for (flat, &p) in self.probs.iter().enumerate() {
            let mut rem = flat;
            for k in (0..m).rev() {
                idx[k] = rem % self.alphabet[k];
                rem /= self.alphabet[k];
            }
            let mut key = 0;
            for &k in &kept {
                key = key * self.alphabet[k] + idx[k];
            }
            out[key] += p;
        }
        out
    }

    fn entropy_of(table: &[f64]) -> f64 {
        table
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// Entropy (nats) of the marginal over `mask`; the full mask gives the
    /// joint entropy.
    pub fn marginal_entropy(&self, mask: u32) -> f64 {
        Self::entropy_of(&self.marginal(mask))
    }
}

/// Weighted conditional entropy of the missing modalities given the observed
/// subset: `sum_S w_S * H(X_complement | X_S)`, computed exactly via the
/// chain rule `H(X_comp | X_S) = H(X_all) - H(X_S)`. The full subset
/// contributes zero.
pub fn delta_gap(joint: &DiscreteJoint, weights: &[f64]) -> Result<f64> {
    let m = joint.modalities();
    validate_subset_weights(m, weights)?;
    let masks = subset_masks(m);
    let full_mask = (1u32 << m) - 1;
    let h_full = joint.marginal_entropy(full_mask);
    let mut delta = 0.0;
    for (si, &mask) in masks.iter().enumerate() {
        let cond = if mask == full_mask {
            0.0
        } else {
            h_full - joint.marginal_entropy(mask)
        };
        delta += weights[si] * cond;
    }
    Ok(delta)
}
