//! Diagonal-Gaussian algebra: densities, closed-form KL, reparameterized
//! sampling, and the product/mixture aggregation rules used to fuse
//! per-modality posteriors.
//!
//! Everything exists twice: as plain value-level functions on
//! [`DiagGaussian`], and as graph compositions over `(mean, log_std)` node
//! pairs for use inside differentiable objectives. The two paths follow the
//! same arithmetic sequence step for step, so their results agree bitwise,
//! which the objective tests rely on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::standard_normal_vec;

/// Bounds applied to every produced log-standard-deviation, preventing
/// precision overflow in products of experts.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 10.0;

/// Diagonal Gaussian given by mean and log-standard-deviation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Log-std entries are clamped to `[-10, 10]`; non-finite statistics are
    /// rejected.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape(format!(
                "mean dim {} vs log_std dim {}",
                mean.len(),
                log_std.len()
            )));
        }
        if !mean.iter().chain(log_std.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian statistics".into()));
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self, i: usize) -> f64 {
        self.log_std[i].exp()
    }

    pub fn var(&self, i: usize) -> f64 {
        (self.log_std[i] + self.log_std[i]).exp()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        for i in 0..self.dim() {
            let s = self.std(i);
            let u = (z[i] - self.mean[i]) / s;
            total += -0.5 * (u * u + ln_2pi) - self.log_std[i];
        }
        total
    }
}

/// `KL[q || p]` in nats, closed form:
/// sum_i log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2.
///
/// The arithmetic mirrors [`gb_kl`] exactly; identical statistics give
/// exactly zero.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape(format!("kl dims {} vs {}", q.dim(), p.dim())));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let dls = p.log_std[i] + (-q.log_std[i]);
        let du = -dls;
        let ratio = (du + du).exp();
        let prec_p = (-(p.log_std[i] + p.log_std[i])).exp();
        let dmu = q.mean[i] + (-p.mean[i]);
        let dmu2 = dmu * dmu;
        let quad = dmu2 * prec_p;
        let inner = ratio + quad;
        let half = inner * 0.5;
        let term = (dls + half) + (-0.5);
        total += term;
    }
    Ok(total)
}

/// Reparameterized sample `z = mean + exp(log_std) * noise`.
pub fn sample_reparam(d: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != d.dim() {
        return Err(Error::shape(format!(
            "noise dim {} vs gaussian dim {}",
            noise.len(),
            d.dim()
        )));
    }
    Ok((0..d.dim())
        .map(|i| d.mean[i] + d.log_std[i].exp() * noise[i])
        .collect())
}

/// Precision-additive product-of-experts fusion. With the flag set, one unit
/// standard-normal prior factor joins the product. Summation runs in a
/// canonical content order, so the moments are bitwise independent of the
/// order experts are listed in. A single expert without the prior is returned
/// unchanged.
pub fn poe(experts: &[DiagGaussian], include_standard_prior: bool) -> Result<DiagGaussian> {
    if experts.is_empty() {
        return Err(Error::invalid("poe of zero experts"));
    }
    let dim = experts[0].dim();
    for e in experts {
        if e.dim() != dim {
            return Err(Error::shape(format!("poe dims {} vs {}", e.dim(), dim)));
        }
    }
    if experts.len() == 1 && !include_standard_prior {
        return Ok(experts[0].clone());
    }

    let key = |e: &DiagGaussian| -> Vec<u64> {
        e.log_std
            .iter()
            .chain(e.mean.iter())
            .map(|v| v.to_bits())
            .collect()
    };
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by_key(|&k| key(&experts[k]));

    let mut mean = vec![0.0; dim];
    let mut log_std = vec![0.0; dim];
    for i in 0..dim {
        let mut prec_total = if include_standard_prior { 1.0 } else { 0.0 };
        let mut num = 0.0;
        for &k in &order {
            let e = &experts[k];
            let prec = (-(e.log_std[i] + e.log_std[i])).exp();
            prec_total += prec;
            num += e.mean[i] * prec;
        }
        let ln_prec = prec_total.ln();
        log_std[i] = -0.5 * ln_prec;
        mean[i] = num * (-ln_prec).exp();
    }
    DiagGaussian::new(mean, log_std)
}

/// Mixture posterior: weighted product-of-experts components, one per
/// nonempty subset of modalities, labeled by subset bitmask.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    components: Vec<(f64, DiagGaussian)>,
    subsets: Vec<u32>,
}

impl MixturePosterior {
    pub fn new(components: Vec<(f64, DiagGaussian)>, subsets: Vec<u32>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture with no components"));
        }
        if components.len() != subsets.len() {
            return Err(Error::invalid("component/subset label count mismatch"));
        }
        let sum: f64 = components.iter().map(|(w, _)| *w).sum();
        if components.iter().any(|(w, _)| *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights must be non-negative and sum to 1, got sum {}",
                sum
            )));
        }
        Ok(MixturePosterior { components, subsets })
    }

    pub fn components(&self) -> &[(f64, DiagGaussian)] {
        &self.components
    }

    pub fn subsets(&self) -> &[u32] {
        &self.subsets
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|(w, c)| w * c.log_density(z).exp())
            .sum()
    }
}

/// Nonempty subsets of `m` modalities in ascending bitmask order; bit `k`
/// marks modality `k`. This ordering is the weight-vector convention
/// everywhere in the crate.
pub fn subset_masks(m: usize) -> Vec<u32> {
    (1..(1u32 << m)).collect()
}

pub fn uniform_subset_weights(m: usize) -> Vec<f64> {
    let n = (1usize << m) - 1;
    vec![1.0 / n as f64; n]
}

/// Mixture-of-products posterior over all nonempty modality subsets. Each
/// component is the product of that subset's experts together with the
/// standard prior. `weights` follow [`subset_masks`] order; `None` means
/// uniform. A mixture with weight only on singleton subsets realizes the
/// plain per-modality mixture.
pub fn mopoe(unimodal: &[DiagGaussian], weights: Option<&[f64]>) -> Result<MixturePosterior> {
    if unimodal.is_empty() {
        return Err(Error::invalid("mopoe with zero modalities"));
    }
    let masks = subset_masks(unimodal.len());
    let uniform = uniform_subset_weights(unimodal.len());
    let w = weights.unwrap_or(&uniform);
    if w.len() != masks.len() {
        return Err(Error::invalid(format!(
            "expected {} subset weights, got {}",
            masks.len(),
            w.len()
        )));
    }
    let mut components = Vec::with_capacity(masks.len());
    for (&mask, &wt) in masks.iter().zip(w) {
        let members: Vec<DiagGaussian> = (0..unimodal.len())
            .filter(|k| mask & (1 << k) != 0)
            .map(|k| unimodal[k].clone())
            .collect();
        components.push((wt, poe(&members, true)?));
    }
    MixturePosterior::new(components, masks)
}

/// Draw a component by weight, then a reparameterized sample from it.
/// Returns the latent and the index of the chosen component.
pub fn mixture_sample(m: &MixturePosterior, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = m.components.len() - 1;
    for (k, (w, _)) in m.components.iter().enumerate() {
        acc += w;
        if u < acc {
            idx = k;
            break;
        }
    }
    let comp = &m.components[idx].1;
    let noise = standard_normal_vec(rng, comp.dim());
    let z = sample_reparam(comp, &noise).expect("dims match by construction");
    (z, idx)
}

// ---- graph-side builders ---------------------------------------------------

/// A Gaussian as a pair of graph nodes. Stats may be rank-1 vectors or
/// rank-2 batches of row vectors.
#[derive(Debug, Clone, Copy)]
pub struct GaussNodes {
    pub mean: NodeId,
    pub log_std: NodeId,
}

/// Standard-normal statistics shaped like `like`.
pub fn gb_standard(g: &mut Graph, like: &[usize]) -> GaussNodes {
    let zeros = crate::tensor::Tensor::zeros(like);
    GaussNodes {
        mean: g.constant(zeros.clone()),
        log_std: g.constant(zeros),
    }
}

/// Closed-form KL as a graph composition; mirrors [`kl_diag`] bit for bit.
/// Rank-1 stats give a scalar node, rank-2 stats a per-row vector.
pub fn gb_kl(g: &mut Graph, q: GaussNodes, p: GaussNodes) -> Result<NodeId> {
    let nls_q = g.neg(q.log_std);
    let dls = g.add(p.log_std, nls_q)?;
    let du = g.neg(dls);
    let du2 = g.add(du, du)?;
    let ratio = g.exp(du2);
    let lsp2 = g.add(p.log_std, p.log_std)?;
    let nlsp2 = g.neg(lsp2);
    let prec_p = g.exp(nlsp2);
    let nmp = g.neg(p.mean);
    let dmu = g.add(q.mean, nmp)?;
    let dmu2 = g.square(dmu);
    let quad = g.mul(dmu2, prec_p)?;
    let inner = g.add(ratio, quad)?;
    let half = g.scale(inner, 0.5)?;
    let a = g.add(dls, half)?;
    let term = g.add_scalar(a, -0.5)?;
    match g.shape_of(term).len() {
        1 => Ok(g.sum(term)),
        2 => g.sum_axis(term, 1),
        r => Err(Error::shape(format!("kl over rank-{} stats", r))),
    }
}

/// KL against the standard prior.
pub fn gb_kl_prior(g: &mut Graph, q: GaussNodes) -> Result<NodeId> {
    let shape = g.shape_of(q.mean).to_vec();
    let p = gb_standard(g, &shape);
    gb_kl(g, q, p)
}

/// Reparameterized sample node `mean + exp(log_std) * noise`.
pub fn gb_sample(g: &mut Graph, q: GaussNodes, noise: NodeId) -> Result<NodeId> {
    let s = g.exp(q.log_std);
    let sn = g.mul(s, noise)?;
    g.add(q.mean, sn)
}

/// Product-of-experts fusion in-graph. Experts are folded in slice order;
/// callers pass them in ascending modality order. Matches the value-level
/// [`poe`] arithmetic (prior precision first, then experts).
pub fn gb_poe(g: &mut Graph, experts: &[GaussNodes], include_prior: bool) -> Result<GaussNodes> {
    if experts.is_empty() {
        return Err(Error::invalid("poe of zero experts"));
    }
    let shape = g.shape_of(experts[0].mean).to_vec();
    let mut prec_total = if include_prior {
        let one = g.scalar(1.0);
        Some(g.broadcast(one, &shape)?)
    } else {
        None
    };
    let mut num: Option<NodeId> = None;
    for e in experts {
        let ls2 = g.add(e.log_std, e.log_std)?;
        let nls2 = g.neg(ls2);
        let prec = g.exp(nls2);
        prec_total = Some(match prec_total {
            Some(t) => g.add(t, prec)?,
            None => prec,
        });
        let mp = g.mul(e.mean, prec)?;
        num = Some(match num {
            Some(n) => g.add(n, mp)?,
            None => mp,
        });
    }
    let prec_total = prec_total.unwrap();
    let ln_prec = g.log(prec_total);
    let half_neg = g.scale(ln_prec, -0.5)?;
    let log_std = g.clamp(half_neg, LOG_STD_MIN, LOG_STD_MAX);
    let nln = g.neg(ln_prec);
    let var = g.exp(nln);
    let mean = g.mul(num.unwrap(), var)?;
    Ok(GaussNodes { mean, log_std })
}
