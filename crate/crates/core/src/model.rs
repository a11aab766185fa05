//! Parametric encoders and decoders over named parameter tensors.
//!
//! Each modality gets an amortized encoder (and optionally an alignment
//! encoder of identical architecture); a shared decoder trunk with
//! per-modality heads forces the latent to carry all-modality information.
//! Encoders are two-hidden-layer perceptrons with ELU and separate mean /
//! log-std heads. All evaluation goes through graph builders, so a "value
//! level" call is just a one-row batched graph evaluated once.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, GaussNodes, LOG_STD_MAX, LOG_STD_MIN};
use crate::graph::{Gradients, Graph, NodeId};
use crate::rng::standard_normal_vec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// Per-unit Bernoulli on decoder logits.
    Bernoulli,
    /// Isotropic Gaussian with fixed standard deviation.
    GaussianFixed(f64),
    /// Categorical over `k` classes; modality vectors are one-hot.
    Categorical(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub likelihood: Likelihood,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize, likelihood: Likelihood) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::invalid(format!("modality {}: dim must be >= 1", name)));
        }
        match likelihood {
            Likelihood::GaussianFixed(s) if s <= 0.0 => {
                return Err(Error::invalid(format!("modality {}: sigma_x must be > 0", name)));
            }
            Likelihood::Categorical(k) if k < 2 => {
                return Err(Error::invalid(format!("modality {}: k must be >= 2", name)));
            }
            Likelihood::Categorical(k) if k != dim => {
                return Err(Error::invalid(format!(
                    "modality {}: categorical dim {} must equal k {}",
                    name, dim, k
                )));
            }
            _ => {}
        }
        Ok(ModalitySpec { name, dim, likelihood })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub latent_dim: usize,
    pub hidden: usize,
    pub refiner_hidden: usize,
    /// Decoder heads map the latent directly (no trunk). Used when the
    /// decoder is pinned to a known linear generative process.
    pub linear_decoder: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            latent_dim: 16,
            hidden: 256,
            refiner_hidden: 128,
            linear_decoder: false,
        }
    }
}

/// Which encoder family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Amortized per-modality encoders (the refinement starting point).
    Amortized,
    /// Alignment encoders trained by posterior distillation.
    Alignment,
}

impl EncoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Amortized => "enc",
            EncoderKind::Alignment => "lam",
        }
    }
}

/// Named parameter collection for encoders, decoders, refiner, and alignment
/// encoders, plus per-modality reconstruction weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub modalities: Vec<ModalitySpec>,
    pub arch: Arch,
    pub betas: Vec<f64>,
    tensors: BTreeMap<String, Tensor>,
}

pub fn scaled_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = standard_normal_vec(rng, rows * cols)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl ModelParams {
    /// Fresh parameters. Hidden-layer weights are scaled-normal draws from
    /// `rng`; biases and the mean / log-std heads start at zero, so every
    /// encoder initially outputs the standard normal. Refiner gate biases
    /// start positive so early updates stay close to the encoder output.
    pub fn init(
        modalities: Vec<ModalitySpec>,
        arch: Arch,
        with_alignment: bool,
        with_refiner: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::invalid("a model needs at least one modality"));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &modalities {
            if !names.insert(m.name.clone()) {
                return Err(Error::invalid(format!("duplicate modality name {}", m.name)));
            }
        }
        let betas = modalities.iter().map(|m| 1.0 / m.dim as f64).collect();
        let mut p = ModelParams {
            modalities,
            arch,
            betas,
            tensors: BTreeMap::new(),
        };
        let (d, h, hr) = (p.arch.latent_dim, p.arch.hidden, p.arch.refiner_hidden);

        let mods = p.modalities.clone();
        for m in &mods {
            p.insert_encoder("enc", m, rng);
        }
        if with_alignment {
            for m in &mods {
                p.insert_encoder("lam", m, rng);
            }
        }

        if !p.arch.linear_decoder {
            p.set("dec.w1".into(), scaled_init(rng, d, h));
            p.set("dec.b1".into(), Tensor::zeros(&[h]));
            p.set("dec.w2".into(), scaled_init(rng, h, h));
            p.set("dec.b2".into(), Tensor::zeros(&[h]));
        }
        let head_in = if p.arch.linear_decoder { d } else { h };
        for m in &mods {
            p.set(format!("dec.head.{}.w", m.name), scaled_init(rng, head_in, m.dim));
            p.set(format!("dec.head.{}.b", m.name), Tensor::zeros(&[m.dim]));
        }

        if with_refiner {
            for m in &mods {
                p.set(format!("ref.x.{}.w", m.name), scaled_init(rng, m.dim, hr));
                p.set(format!("ref.x.{}.b", m.name), Tensor::zeros(&[hr]));
            }
            p.set("ref.grad.w".into(), scaled_init(rng, 4 * d, hr));
            p.set("ref.grad.b".into(), Tensor::zeros(&[hr]));
            for head in ["mu", "ls"] {
                p.set(format!("ref.{}.w", head), scaled_init(rng, 2 * hr, d));
                p.set(format!("ref.{}.b", head), Tensor::zeros(&[d]));
                p.set(format!("ref.gate_{}.w", head), scaled_init(rng, 2 * hr, d));
                p.set(format!("ref.gate_{}.b", head), Tensor::full(&[d], 2.0));
            }
        }
        Ok(p)
    }

    fn insert_encoder(&mut self, prefix: &str, m: &ModalitySpec, rng: &mut ChaCha8Rng) {
        let (d, h) = (self.arch.latent_dim, self.arch.hidden);
        self.set(format!("{}.{}.w1", prefix, m.name), scaled_init(rng, m.dim, h));
        self.set(format!("{}.{}.b1", prefix, m.name), Tensor::zeros(&[h]));
        self.set(format!("{}.{}.w2", prefix, m.name), scaled_init(rng, h, h));
        self.set(format!("{}.{}.b2", prefix, m.name), Tensor::zeros(&[h]));
        self.set(format!("{}.{}.mu.w", prefix, m.name), Tensor::zeros(&[h, d]));
        self.set(format!("{}.{}.mu.b", prefix, m.name), Tensor::zeros(&[d]));
        self.set(format!("{}.{}.ls.w", prefix, m.name), Tensor::zeros(&[h, d]));
        self.set(format!("{}.{}.ls.b", prefix, m.name), Tensor::zeros(&[d]));
    }

    /// Clone the amortized encoders into the alignment slots (fresh
    /// alignment encoders start from the amortized ones).
    pub fn clone_encoders_to_alignment(&mut self) {
        let cloned: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with("enc."))
            .map(|(k, v)| (format!("lam.{}", &k["enc.".len()..]), v.clone()))
            .collect();
        for (k, v) in cloned {
            self.set(k, v);
        }
    }

    pub fn has_alignment_encoders(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("lam."))
    }

    pub fn has_refiner(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("ref."))
    }

    pub fn set(&mut self, name: String, value: Tensor) {
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {}", name)))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown modality {}", name)))
    }

    /// FNV digest over a sorted subset of parameters; used to verify that
    /// frozen tensors stay untouched.
    pub fn digest_where(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for (k, v) in &self.tensors {
            if keep(k) {
                bytes.extend_from_slice(k.as_bytes());
                for x in v.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        crate::rng::fnv1a(&bytes)
    }
}

/// Lazily materializes named parameters as graph leaves, at most once each.
/// Parameters matching the trainable filter become differentiable leaves;
/// the rest are constants.
pub struct ParamNodes<'p> {
    params: &'p ModelParams,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    nodes: BTreeMap<String, NodeId>,
}

impl<'p> ParamNodes<'p> {
    pub fn new(params: &'p ModelParams, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        ParamNodes {
            params,
            trainable: Box::new(trainable),
            nodes: BTreeMap::new(),
        }
    }

    pub fn all_trainable(params: &'p ModelParams) -> Self {
        Self::new(params, |_| true)
    }

    pub fn frozen(params: &'p ModelParams) -> Self {
        Self::new(params, |_| false)
    }

    pub fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let value = self.params.get(name)?.clone();
        let id = if (self.trainable)(name) {
            g.var(value)
        } else {
            g.constant(value)
        };
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients keyed by parameter name, for leaves that received one.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| grads.get(id).map(|t| (name.clone(), t.clone())))
            .collect()
    }

    /// Re-bind one parameter leaf (finite-difference probing).
    pub fn rebind(&self, g: &mut Graph, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .nodes
            .get(name)
            .ok_or_else(|| Error::invalid(format!("parameter {} not in graph", name)))?;
        g.bind(*id, value)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }
}

// ---- graph builders --------------------------------------------------------

/// Encoder perceptron over a `(batch, dim)` input; returns clamped posterior
/// statistics of shape `(batch, latent)`.
pub fn gb_encode(
    g: &mut Graph,
    pn: &mut ParamNodes,
    kind: EncoderKind,
    modality: &ModalitySpec,
    x: NodeId,
) -> Result<GaussNodes> {
    let p = kind.prefix();
    let n = modality.name.as_str();
    let w1 = pn.node(g, &format!("{}.{}.w1", p, n))?;
    let b1 = pn.node(g, &format!("{}.{}.b1", p, n))?;
    let w2 = pn.node(g, &format!("{}.{}.w2", p, n))?;
    let b2 = pn.node(g, &format!("{}.{}.b2", p, n))?;
    let mu_w = pn.node(g, &format!("{}.{}.mu.w", p, n))?;
    let mu_b = pn.node(g, &format!("{}.{}.mu.b", p, n))?;
    let ls_w = pn.node(g, &format!("{}.{}.ls.w", p, n))?;
    let ls_b = pn.node(g, &format!("{}.{}.ls.b", p, n))?;

    let h = g.linear(x, w1, b1)?;
    let h = g.elu(h);
    let h = g.linear(h, w2, b2)?;
    let h = g.elu(h);
    let mean = g.linear(h, mu_w, mu_b)?;
    let ls_raw = g.linear(h, ls_w, ls_b)?;
    let log_std = g.clamp(ls_raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok(GaussNodes { mean, log_std })
}

/// Decoder features for a `(batch, latent)` input: the trunk output, or the
/// latent itself for a linear decoder.
pub fn gb_decode_features(
    g: &mut Graph,
    pn: &mut ParamNodes,
    arch: &Arch,
    z: NodeId,
) -> Result<NodeId> {
    if arch.linear_decoder {
        return Ok(z);
    }
    let w1 = pn.node(g, "dec.w1")?;
    let b1 = pn.node(g, "dec.b1")?;
    let w2 = pn.node(g, "dec.w2")?;
    let b2 = pn.node(g, "dec.b2")?;
    let h = g.linear(z, w1, b1)?;
    let h = g.elu(h);
    let h = g.linear(h, w2, b2)?;
    Ok(g.elu(h))
}

/// Unweighted per-item log-likelihood `(batch,)` of one modality given the
/// decoder head output for it.
pub fn gb_log_lik_term(
    g: &mut Graph,
    spec: &ModalitySpec,
    head_out: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    match spec.likelihood {
        Likelihood::Bernoulli => {
            let sl = g.sigmoid(head_out);
            let log_sl = g.log(sl);
            let neg_logits = g.neg(head_out);
            let snl = g.sigmoid(neg_logits);
            let log_snl = g.log(snl);
            let neg_x = g.neg(x);
            let one_minus_x = g.add_scalar(neg_x, 1.0)?;
            let on = g.mul(x, log_sl)?;
            let off = g.mul(one_minus_x, log_snl)?;
            let per_unit = g.add(on, off)?;
            g.sum_axis(per_unit, 1)
        }
        Likelihood::GaussianFixed(sigma) => {
            let diff = g.sub(x, head_out)?;
            let sq = g.square(diff);
            let ssq = g.sum_axis(sq, 1)?;
            let scaled = g.scale(ssq, -0.5 / (sigma * sigma))?;
            let norm = -(spec.dim as f64) * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
            g.add_scalar(scaled, norm)
        }
        Likelihood::Categorical(_) => {
            let ex = g.exp(head_out);
            let se = g.sum_axis(ex, 1)?;
            let lse = g.log(se);
            let picked = g.mul(head_out, x)?;
            let ly = g.sum_axis(picked, 1)?;
            g.sub(ly, lse)
        }
    }
}

/// Weighted log-likelihood of the modalities in `subset` (indices into
/// `params.modalities`), summed in ascending index order. Returns the total
/// `(batch,)` node and the weighted per-modality terms.
pub fn gb_decode_log_lik(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    z: NodeId,
    xs: &[NodeId],
    subset: &[usize],
) -> Result<(NodeId, Vec<(usize, NodeId)>)> {
    if subset.is_empty() {
        return Err(Error::invalid("decode over an empty modality subset"));
    }
    let mut order = subset.to_vec();
    order.sort_unstable();
    order.dedup();
    let features = gb_decode_features(g, pn, &params.arch, z)?;
    let mut per_modality = Vec::with_capacity(order.len());
    let mut total: Option<NodeId> = None;
    for &mi in &order {
        let spec = params
            .modalities
            .get(mi)
            .ok_or_else(|| Error::invalid(format!("modality index {} out of range", mi)))?;
        let x = *xs
            .get(mi)
            .ok_or_else(|| Error::invalid(format!("modality {} absent from batch", spec.name)))?;
        let hw = pn.node(g, &format!("dec.head.{}.w", spec.name))?;
        let hb = pn.node(g, &format!("dec.head.{}.b", spec.name))?;
        let head_out = g.linear(features, hw, hb)?;
        let ll = gb_log_lik_term(g, spec, head_out, x)?;
        let weighted = g.scale(ll, params.betas[mi])?;
        per_modality.push((mi, weighted));
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok((total.unwrap(), per_modality))
}

// ---- value-level wrappers ---------------------------------------------------

pub(crate) fn one_row(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, x.len()], x.to_vec()).unwrap()
}

/// Posterior statistics of one modality for one input vector.
pub fn encode(
    params: &ModelParams,
    kind: EncoderKind,
    modality: usize,
    x: &[f64],
) -> Result<DiagGaussian> {
    let spec = params
        .modalities
        .get(modality)
        .ok_or_else(|| Error::invalid(format!("modality index {} out of range", modality)))?;
    if x.len() != spec.dim {
        return Err(Error::shape(format!(
            "modality {} expects dim {}, got {}",
            spec.name,
            spec.dim,
            x.len()
        )));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xn = g.constant(one_row(x));
    let q = gb_encode(&mut g, &mut pn, kind, spec, xn)?;
    let mean = g.eval(q.mean)?.data().to_vec();
    let log_std = g.eval(q.log_std)?.data().to_vec();
    DiagGaussian::new(mean, log_std)
}

/// Batched encoding of a `(batch, dim)` matrix.
pub fn encode_batch(
    params: &ModelParams,
    kind: EncoderKind,
    modality: usize,
    xs: &Tensor,
) -> Result<Vec<DiagGaussian>> {
    let spec = &params.modalities[modality];
    if xs.rank() != 2 || xs.shape()[1] != spec.dim {
        return Err(Error::shape(format!(
            "batch for modality {} must be (n, {})",
            spec.name, spec.dim
        )));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xn = g.constant(xs.clone());
    let q = gb_encode(&mut g, &mut pn, kind, spec, xn)?;
    let mean = g.eval(q.mean)?.clone();
    let ls = g.eval(q.log_std)?.clone();
    (0..xs.shape()[0])
        .map(|r| DiagGaussian::new(mean.row(r).to_vec(), ls.row(r).to_vec()))
        .collect()
}

/// Weighted multimodal log-likelihood `sum_m beta_m log p(x_m | z)` over the
/// given modality subset, for a single latent and item.
pub fn decode_log_lik(
    params: &ModelParams,
    z: &[f64],
    xs: &[Vec<f64>],
    subset: &[usize],
) -> Result<f64> {
    if z.len() != params.arch.latent_dim {
        return Err(Error::shape(format!(
            "latent dim {} expected, got {}",
            params.arch.latent_dim,
            z.len()
        )));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let zn = g.constant(one_row(z));
    let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(one_row(x))).collect();
    let (total, _) = gb_decode_log_lik(&mut g, &mut pn, params, zn, &xns, subset)?;
    Ok(g.eval(total)?.data()[0])
}

/// Per-modality decoder output in parameter space for one latent: Bernoulli
/// probabilities, Gaussian means, or categorical class probabilities.
pub fn decode_params(params: &ModelParams, z: &[f64], modality: usize) -> Result<Vec<f64>> {
    let spec = &params.modalities[modality];
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let zn = g.constant(one_row(z));
    let features = gb_decode_features(&mut g, &mut pn, &params.arch, zn)?;
    let hw = pn.node(&mut g, &format!("dec.head.{}.w", spec.name))?;
    let hb = pn.node(&mut g, &format!("dec.head.{}.b", spec.name))?;
    let head = g.linear(features, hw, hb)?;
    let out = match spec.likelihood {
        Likelihood::Bernoulli => {
            let p = g.sigmoid(head);
            g.eval(p)?.data().to_vec()
        }
        Likelihood::GaussianFixed(_) => g.eval(head)?.data().to_vec(),
        Likelihood::Categorical(_) => {
            let logits = g.eval(head)?.data().to_vec();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradient_check;
    use crate::rng::stream;

    fn two_modality_params(seed: u64) -> ModelParams {
        let mods = vec![
            ModalitySpec::new("img", 5, Likelihood::GaussianFixed(0.8)).unwrap(),
            ModalitySpec::new("lbl", 3, Likelihood::Categorical(3)).unwrap(),
        ];
        let arch = Arch {
            latent_dim: 4,
            hidden: 8,
            refiner_hidden: 6,
            linear_decoder: false,
        };
        let mut rng = stream(seed, "params", &[]);
        ModelParams::init(mods, arch, true, true, &mut rng).unwrap()
    }

    #[test]
    fn zero_initialized_heads_give_standard_normal() {
        let p = two_modality_params(1);
        let q = encode(&p, EncoderKind::Amortized, 0, &[0.3, -0.7, 1.1, 0.0, 2.0]).unwrap();
        assert_eq!(q.mean(), &[0.0; 4]);
        assert_eq!(q.log_std(), &[0.0; 4]);
    }

    #[test]
    fn encoding_is_bit_reproducible() {
        let p1 = two_modality_params(7);
        let p2 = two_modality_params(7);
        assert_eq!(p1, p2);
        // Perturb a head so the output is nontrivial, then compare paths.
        let mut p1 = p1;
        let mut rng = stream(8, "head", &[]);
        p1.set("enc.img.mu.w".into(), scaled_init(&mut rng, 8, 4));
        let x = [0.4, 0.1, -0.2, 0.9, -1.3];
        let a = encode(&p1, EncoderKind::Amortized, 0, &x).unwrap();
        let b = encode(&p1, EncoderKind::Amortized, 0, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_mean_gradients_match_finite_differences() {
        let mut p = two_modality_params(3);
        let mut rng = stream(4, "head2", &[]);
        p.set("enc.img.mu.w".into(), scaled_init(&mut rng, 8, 4));
        p.set("enc.img.ls.w".into(), scaled_init(&mut rng, 8, 4));

        let mut g = Graph::new();
        let mut pn = ParamNodes::all_trainable(&p);
        let x = g.constant(one_row(&[0.5, -0.5, 0.2, 0.0, 1.0]));
        let q = gb_encode(&mut g, &mut pn, EncoderKind::Amortized, &p.modalities[0], x).unwrap();
        let root = g.sum(q.mean);
        let leaves: Vec<NodeId> = ["enc.img.w1", "enc.img.b1", "enc.img.w2", "enc.img.mu.w"]
            .iter()
            .map(|n| pn.node_id(n).unwrap())
            .collect();
        let report = gradient_check(&mut g, root, &leaves, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-4, "err {}", report.max_rel_error());
    }

    #[test]
    fn bernoulli_log_lik_is_zero_at_saturated_exact_match() {
        // Logits of +-40 put the per-unit probability exactly at 1 in f64.
        let spec = ModalitySpec::new("bits", 4, Likelihood::Bernoulli).unwrap();
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 4], vec![40.0, -40.0, 40.0, -40.0]).unwrap());
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let ll = gb_log_lik_term(&mut g, &spec, logits, x).unwrap();
        assert_eq!(g.eval(ll).unwrap().data()[0], 0.0);
    }

    #[test]
    fn gaussian_log_lik_is_norm_constant_at_exact_reconstruction() {
        let sigma = 0.7;
        let spec = ModalitySpec::new("v", 3, Likelihood::GaussianFixed(sigma)).unwrap();
        let mut g = Graph::new();
        let xv = vec![0.2, -0.4, 1.0];
        let xhat = g.constant(one_row(&xv));
        let x = g.constant(one_row(&xv));
        let ll = gb_log_lik_term(&mut g, &spec, xhat, x).unwrap();
        let expect = -3.0 * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert_eq!(g.eval(ll).unwrap().data()[0], expect);
    }

    #[test]
    fn categorical_probabilities_sum_to_one() {
        let p = two_modality_params(5);
        let mut rng = stream(6, "catz", &[]);
        let mut p = p;
        p.set("dec.head.lbl.w".into(), scaled_init(&mut rng, 8, 3));
        let z = standard_normal_vec(&mut rng, 4);
        let probs = decode_params(&p, &z, 1).unwrap();
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "sum {}", s);
    }

    #[test]
    fn decode_log_lik_is_additive_over_disjoint_subsets() {
        let mut p = two_modality_params(9);
        let mut rng = stream(10, "addtv", &[]);
        p.set("dec.head.img.w".into(), scaled_init(&mut rng, 8, 5));
        p.set("dec.head.lbl.w".into(), scaled_init(&mut rng, 8, 3));
        let z = standard_normal_vec(&mut rng, 4);
        let xs = vec![standard_normal_vec(&mut rng, 5), vec![0.0, 1.0, 0.0]];
        let both = decode_log_lik(&p, &z, &xs, &[0, 1]).unwrap();
        let a = decode_log_lik(&p, &z, &xs, &[0]).unwrap();
        let b = decode_log_lik(&p, &z, &xs, &[1]).unwrap();
        assert_eq!(both, a + b);
    }

    #[test]
    fn decode_log_lik_matches_straightline_recomputation() {
        let mut p = two_modality_params(11);
        let mut rng = stream(12, "straight", &[]);
        p.set("dec.head.img.w".into(), scaled_init(&mut rng, 8, 5));
        p.set("dec.head.lbl.w".into(), scaled_init(&mut rng, 8, 3));
        let z = standard_normal_vec(&mut rng, 4);
        let xs = vec![standard_normal_vec(&mut rng, 5), vec![0.0, 0.0, 1.0]];
        let got = decode_log_lik(&p, &z, &xs, &[0, 1]).unwrap();

        // Independent straight-line recomputation with plain loops.
        let matvec = |w: &Tensor, b: &Tensor, v: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut out = b.data().to_vec();
            for (r, vr) in v.iter().enumerate().take(rows) {
                for c in 0..cols {
                    out[c] += vr * w.at(r, c);
                }
            }
            out
        };
        let eluv = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .map(|x| if x > 0.0 { x } else { x.exp() - 1.0 })
                .collect()
        };
        let h = eluv(matvec(p.get("dec.w1").unwrap(), p.get("dec.b1").unwrap(), &z));
        let h = eluv(matvec(p.get("dec.w2").unwrap(), p.get("dec.b2").unwrap(), &h));
        let img_out = matvec(
            p.get("dec.head.img.w").unwrap(),
            p.get("dec.head.img.b").unwrap(),
            &h,
        );
        let sigma = 0.8;
        let mut img_ll = -5.0 * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        for (xh, x) in img_out.iter().zip(&xs[0]) {
            img_ll -= (x - xh) * (x - xh) / (2.0 * sigma * sigma);
        }
        let lbl_out = matvec(
            p.get("dec.head.lbl.w").unwrap(),
            p.get("dec.head.lbl.b").unwrap(),
            &h,
        );
        let lse = lbl_out.iter().map(|l| l.exp()).sum::<f64>().ln();
        let lbl_ll = lbl_out[2] - lse;
        let expect = p.betas[0] * img_ll + p.betas[1] * lbl_ll;
        assert!((got - expect).abs() < 1e-10, "{} vs {}", got, expect);
    }

    #[test]
    fn unknown_modality_and_shape_errors() {
        let p = two_modality_params(13);
        assert!(encode(&p, EncoderKind::Amortized, 9, &[0.0]).is_err());
        assert!(encode(&p, EncoderKind::Amortized, 0, &[0.0; 3]).is_err());
        let z = vec![0.0; 4];
        assert!(decode_log_lik(&p, &z, &[vec![0.0; 5]], &[1]).is_err());
    }
}
