//! Evaluation: bound-versus-iteration curves, exact posterior-gap
//! measurement on the analytic testbed, linear probes, cosine similarity,
//! Fréchet distance between Gaussian fits, and cross-modal coherence.
//!
//! Cross-modal generation here is deterministic: the latent is the unimodal
//! posterior mean and decoders emit their parameter-space output (Bernoulli
//! probabilities, Gaussian means, class probabilities). Fréchet scores are
//! computed on raw generated vectors ("frechet_raw" in metric names); no
//! pretrained feature network is involved.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::gaussian::{poe, DiagGaussian};
use crate::model::{decode_params, encode, encode_batch, EncoderKind, ModelParams};
use crate::objectives::elbo_multi_sample;
use crate::refiner::refine_batch_trajectory;
use crate::rng::stream;
use crate::trainer::Family;

/// Mean and covariance fitted to a sample set (unbiased estimator plus a
/// small diagonal shrinkage for positive semidefiniteness).
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

pub const COV_SHRINKAGE: f64 = 1e-6;

impl GaussianFit {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("need at least two samples to fit"));
        }
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            if s.len() != d {
                return Err(Error::shape("inconsistent sample dims"));
            }
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1.0);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] += COV_SHRINKAGE;
        }
        Ok(GaussianFit { mean, cov })
    }

    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape("covariance must be square and match the mean"));
        }
        Ok(GaussianFit { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    // Symmetrize against roundoff, then take the PSD square root by
    // eigendecomposition with negative eigenvalues clipped at zero.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.len();
    let mut scaled = eig.eigenvectors.clone();
    for c in 0..d {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        for r in 0..d {
            scaled[(r, c)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^{1/2} Sb Sa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("fit dims {} vs {}", a.dim(), b.dim())));
    }
    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa_half = sym_sqrt(&a.cov);
    let inner = &sa_half * &b.cov * &sa_half;
    let inner_half = sym_sqrt(&inner);
    let trace = a.cov.trace() + b.cov.trace() - 2.0 * inner_half.trace();
    Ok(mean_sq + trace)
}

/// One-vs-all ridge classifier by normal equations over features with an
/// appended bias column.
#[derive(Debug, Clone)]
pub struct RidgeClassifier {
    weights: DMatrix<f64>, // (d + 1, classes)
    pub classes: usize,
}

impl RidgeClassifier {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, ridge: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("features and labels must align"));
        }
        if ridge < 0.0 {
            return Err(Error::invalid("ridge must be non-negative"));
        }
        let d = features[0].len() + 1;
        let n = features.len();
        let mut x = DMatrix::<f64>::zeros(n, d);
        let mut y = DMatrix::<f64>::zeros(n, classes);
        for (r, f) in features.iter().enumerate() {
            for (c, v) in f.iter().enumerate() {
                x[(r, c)] = *v;
            }
            x[(r, d - 1)] = 1.0;
            if labels[r] >= classes {
                return Err(Error::invalid(format!("label {} out of range", labels[r])));
            }
            y[(r, labels[r])] = 1.0;
        }
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
            Error::invalid(
                "normal matrix is singular; use a ridge penalty greater than zero",
            )
        })?;
        if ridge == 0.0 {
            // Exactly singular Gram matrices can pass factorization on
            // roundoff alone; reject them by pivot ratio.
            let diag = chol.l().diagonal();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            if diag.iter().any(|v| *v < 1e-6 * max) {
                return Err(Error::invalid(
                    "normal matrix is singular; use a ridge penalty greater than zero",
                ));
            }
        }
        let xty = x.transpose() * y;
        let weights = chol.solve(&xty);
        Ok(RidgeClassifier { weights, classes })
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let d = self.weights.nrows();
        let mut x = DVector::<f64>::zeros(d);
        for (i, v) in feature.iter().enumerate() {
            x[i] = *v;
        }
        x[d - 1] = 1.0;
        let scores = self.weights.transpose() * x;
        let mut best = 0;
        for k in 1..self.classes {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / features.len().max(1) as f64
    }
}

/// Ridge-probe accuracy: fit one-vs-all ridge regression on the training
/// latents, report argmax accuracy on the test latents.
pub fn linear_probe(
    train_latents: &[Vec<f64>],
    train_labels: &[usize],
    test_latents: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
    ridge: f64,
) -> Result<f64> {
    let clf = RidgeClassifier::fit(train_latents, train_labels, classes, ridge)?;
    Ok(clf.accuracy(test_latents, test_labels))
}

/// Mean cosine similarity of paired vectors; zero-norm vectors contribute 0.
pub fn cosine_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("paired latent lists must align and be nonempty"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx > 0.0 && ny > 0.0 {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            total += dot / (nx * ny);
        }
    }
    Ok(total / a.len() as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The unimodal inference each family exposes at evaluation time: the
/// prior-fused single expert for the mixture family, the distilled alignment
/// encoder otherwise.
pub fn unimodal_posterior(
    params: &ModelParams,
    family: Family,
    modality: usize,
    x: &[f64],
) -> Result<DiagGaussian> {
    match family {
        Family::Mixture => {
            let expert = encode(params, EncoderKind::Amortized, modality, x)?;
            poe(&[expert], true)
        }
        Family::Alignment | Family::Proposed => {
            if !params.has_alignment_encoders() {
                return Err(Error::invalid(
                    "checkpoint has no alignment encoders; run the alignment stage first",
                ));
            }
            encode(params, EncoderKind::Alignment, modality, x)
        }
    }
}

/// Unimodal latent means for the given items.
pub fn unimodal_latents(
    params: &ModelParams,
    family: Family,
    modality: usize,
    data: &MultimodalDataset,
    items: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let batch = data.batch(items);
    match family {
        Family::Mixture => {
            let experts = encode_batch(params, EncoderKind::Amortized, modality, &batch[modality])?;
            experts
                .into_iter()
                .map(|e| Ok(poe(&[e], true)?.mean().to_vec()))
                .collect()
        }
        Family::Alignment | Family::Proposed => {
            if !params.has_alignment_encoders() {
                return Err(Error::invalid(
                    "checkpoint has no alignment encoders; run the alignment stage first",
                ));
            }
            let qs = encode_batch(params, EncoderKind::Alignment, modality, &batch[modality])?;
            Ok(qs.into_iter().map(|q| q.mean().to_vec()).collect())
        }
    }
}

/// Decode modality `target` from the unimodal posterior mean of `source`,
/// for every given item.
pub fn cross_generate(
    params: &ModelParams,
    family: Family,
    source: usize,
    target: usize,
    data: &MultimodalDataset,
    items: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let latents = unimodal_latents(params, family, source, data, items)?;
    latents
        .iter()
        .map(|z| decode_params(params, z, target))
        .collect()
}

/// Fraction of cross-generated items whose predicted class matches the item
/// label under a classifier pretrained on real target-modality data.
pub fn cross_coherence(
    params: &ModelParams,
    family: Family,
    data: &MultimodalDataset,
    source: usize,
    target: usize,
    classifier: &RidgeClassifier,
    items: &[usize],
) -> Result<f64> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no labels for coherence"))?;
    let generated = cross_generate(params, family, source, target, data, items)?;
    Ok(coherence_of(&generated, &items.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classifier))
}

/// Classification agreement between generated vectors and reference labels.
pub fn coherence_of(generated: &[Vec<f64>], labels: &[usize], classifier: &RidgeClassifier) -> f64 {
    let hits = generated
        .iter()
        .zip(labels)
        .filter(|(g, &l)| classifier.predict(g) == l)
        .count();
    hits as f64 / generated.len().max(1) as f64
}

/// Fréchet distance between Gaussian fits of real target-modality vectors
/// and cross-generated ones, over the same items.
pub fn frechet_cross_modal(
    params: &ModelParams,
    family: Family,
    data: &MultimodalDataset,
    source: usize,
    target: usize,
    items: &[usize],
) -> Result<f64> {
    let real: Vec<Vec<f64>> = items.iter().map(|&i| data.data[target].row(i).to_vec()).collect();
    let generated = cross_generate(params, family, source, target, data, items)?;
    let fit_real = GaussianFit::fit(&real)?;
    let fit_gen = GaussianFit::fit(&generated)?;
    frechet_distance(&fit_real, &fit_gen)
}

/// Mean multi-sample bound after each number of refinement iterations.
/// `curve[i]` is the bound after `i` gated updates, so index 0 is the
/// amortized encoder itself; plots conventionally label that point
/// "iteration 1".
pub fn elbo_vs_t(
    params: &ModelParams,
    data: &MultimodalDataset,
    modality: usize,
    t_max: usize,
    k_samples: usize,
    items: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    if t_max == 0 {
        return Err(Error::invalid("t_max must be >= 1"));
    }
    let all: Vec<usize> = (0..params.modalities.len()).collect();
    let mut sums = vec![0.0; t_max];
    for (ci, chunk) in items.chunks(256).enumerate() {
        let xs = data.batch(chunk);
        let mut rng = stream(seed, "curve-refine", &[modality as u64, ci as u64]);
        let states = refine_batch_trajectory(params, modality, &xs, t_max - 1, &mut rng)?;
        for (si, (mean, ls)) in states.iter().enumerate() {
            for (r, &item) in chunk.iter().enumerate() {
                let q = DiagGaussian::new(mean.row(r).to_vec(), ls.row(r).to_vec())?;
                let mut erng = stream(seed, "curve-elbo", &[modality as u64, item as u64, si as u64]);
                let bd = elbo_multi_sample(params, &data.item(item), &q, &all, k_samples, &mut erng)?;
                sums[si] += bd.total;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / items.len() as f64).collect())
}

/// Mean multi-sample bound of the full product posterior (the alignment
/// source) on the given items, under that checkpoint's own decoder.
pub fn poe_source_elbo(
    params: &ModelParams,
    data: &MultimodalDataset,
    k_samples: usize,
    items: &[usize],
    seed: u64,
) -> Result<f64> {
    let m_count = params.modalities.len();
    let all: Vec<usize> = (0..m_count).collect();
    let batch = data.batch(items);
    let experts: Vec<Vec<DiagGaussian>> = (0..m_count)
        .map(|m| encode_batch(params, EncoderKind::Amortized, m, &batch[m]))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (r, &item) in items.iter().enumerate() {
        let row: Vec<DiagGaussian> = (0..m_count).map(|m| experts[m][r].clone()).collect();
        let fused = poe(&row, true)?;
        let mut erng = stream(seed, "poe-elbo", &[item as u64]);
        let bd = elbo_multi_sample(params, &data.item(item), &fused, &all, k_samples, &mut erng)?;
        total += bd.total;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Per-item KL to the exact posterior at every requested refinement depth.
/// `amortized[i]` is the gap of the raw encoder on item `i`;
/// `refined[j][i]` the gap after `t_values[j]` updates.
pub struct GapCurve {
    pub t_values: Vec<usize>,
    pub amortized: Vec<f64>,
    pub refined: Vec<Vec<f64>>,
}

pub fn amortization_gap_curve(
    params: &ModelParams,
    data: &MultimodalDataset,
    modality: usize,
    t_values: &[usize],
    items: &[usize],
    seed: u64,
) -> Result<GapCurve> {
    let oracle = data
        .oracle
        .as_ref()
        .ok_or_else(|| Error::invalid("amortization gap needs an analytic dataset"))?;
    if t_values.is_empty() {
        return Err(Error::invalid("need at least one refinement depth"));
    }
    let t_max = *t_values.iter().max().unwrap();
    let all: Vec<usize> = (0..params.modalities.len()).collect();
    let mut amortized = Vec::with_capacity(items.len());
    let mut refined = vec![Vec::with_capacity(items.len()); t_values.len()];
    for (ci, chunk) in items.chunks(256).enumerate() {
        let xs = data.batch(chunk);
        let mut rng = stream(seed, "gap-refine", &[modality as u64, ci as u64]);
        let states = refine_batch_trajectory(params, modality, &xs, t_max, &mut rng)?;
        for (r, &item) in chunk.iter().enumerate() {
            let exact = oracle.posterior(&data.item(item), &all)?;
            let (m0, l0) = &states[0];
            let q0 = DiagGaussian::new(m0.row(r).to_vec(), l0.row(r).to_vec())?;
            amortized.push(exact.kl_from_diag(&q0)?);
            for (j, &t) in t_values.iter().enumerate() {
                let (mt, lt) = &states[t];
                let qt = DiagGaussian::new(mt.row(r).to_vec(), lt.row(r).to_vec())?;
                refined[j].push(exact.kl_from_diag(&qt)?);
            }
        }
    }
    Ok(GapCurve {
        t_values: t_values.to_vec(),
        amortized,
        refined,
    })
}

/// Mean amortized-encoder gap and mean refined gap at depth `t` over the
/// given held-out items.
pub fn amortization_gap(
    params: &ModelParams,
    data: &MultimodalDataset,
    modality: usize,
    t: usize,
    items: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    let curve = amortization_gap_curve(params, data, modality, &[t], items, seed)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((mean(&curve.amortized), mean(&curve.refined[0])))
}

// ---- metric rows -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub family: String,
    pub metric: String,
    pub direction: String,
    pub value: f64,
    pub seed: u64,
}

/// Registry mapping metric names to their preferred direction.
pub fn metric_direction(metric: &str) -> Option<&'static str> {
    let base = metric.split('.').next().unwrap_or(metric);
    match base {
        "linear_probe" | "cosine_similarity" | "coherence" | "elbo" | "elbo_at_t" => Some("higher"),
        "frechet_raw" | "amortization_gap" | "amortization_gap_refined" | "distill_kl" => {
            Some("lower")
        }
        _ => None,
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("experiment,family,metric,direction,value,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.experiment, r.family, r.metric, r.direction, r.value, r.seed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_linear_gaussian, LinearGaussianSpec};
    use crate::model::Arch;
    use crate::rng::{standard_normal_vec, stream};
    use crate::trainer::{train_stage1, Family, TrainConfig};

    #[test]
    fn frechet_identical_fits_is_zero() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let a = GaussianFit::from_moments(vec![0.5, -0.5], cov.clone()).unwrap();
        let b = GaussianFit::from_moments(vec![0.5, -0.5], cov).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!(d.abs() < 1e-10, "d {}", d);
    }

    #[test]
    fn frechet_one_dimensional_analytic() {
        let a = GaussianFit::from_moments(vec![0.0], DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let b = GaussianFit::from_moments(vec![3.0], DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 9.0).abs() < 1e-12, "d {}", d);
    }

    #[test]
    fn frechet_commuting_diagonal_closed_form() {
        let mut rng = stream(1, "fd-diag", &[]);
        let d = 4;
        let ma = standard_normal_vec(&mut rng, d);
        let mb = standard_normal_vec(&mut rng, d);
        let sa: Vec<f64> = standard_normal_vec(&mut rng, d).iter().map(|v| v.abs() + 0.3).collect();
        let sb: Vec<f64> = standard_normal_vec(&mut rng, d).iter().map(|v| v.abs() + 0.3).collect();
        let cov_a = DMatrix::from_diagonal(&DVector::from_iterator(d, sa.iter().map(|v| v * v)));
        let cov_b = DMatrix::from_diagonal(&DVector::from_iterator(d, sb.iter().map(|v| v * v)));
        let a = GaussianFit::from_moments(ma.clone(), cov_a).unwrap();
        let b = GaussianFit::from_moments(mb.clone(), cov_b).unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        let expect: f64 = (0..d)
            .map(|i| {
                let dm = ma[i] - mb[i];
                dm * dm + (sa[i] - sb[i]) * (sa[i] - sb[i])
            })
            .sum();
        assert!((got - expect).abs() < 1e-10, "{} vs {}", got, expect);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = stream(2, "fd-sym", &[]);
        for _ in 0..10 {
            let samples_a: Vec<Vec<f64>> =
                (0..40).map(|_| standard_normal_vec(&mut rng, 3)).collect();
            let samples_b: Vec<Vec<f64>> = (0..40)
                .map(|_| standard_normal_vec(&mut rng, 3).iter().map(|v| v * 1.6 + 0.4).collect())
                .collect();
            let a = GaussianFit::fit(&samples_a).unwrap();
            let b = GaussianFit::fit(&samples_b).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
            assert!(ab >= -1e-10);
        }
    }

    #[test]
    fn probe_separates_linearly_separable_clusters() {
        let train: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { -2.0 } else { 2.0 } + 0.01 * i as f64])
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let acc = linear_probe(&train, &labels, &train, &labels, 2, 1e-6).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_on_shuffled_labels_is_at_chance() {
        let mut rng = stream(3, "probe-chance", &[]);
        let n = 3000;
        let k = 4;
        let feats: Vec<Vec<f64>> = (0..n).map(|_| standard_normal_vec(&mut rng, 5)).collect();
        use rand::Rng;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let half = n / 2;
        let acc = linear_probe(
            &feats[..half],
            &labels[..half],
            &feats[half..],
            &labels[half..],
            k,
            1e-3,
        )
        .unwrap();
        let p = 1.0 / k as f64;
        let se = (p * (1.0 - p) / half as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * se, "acc {} vs chance {}", acc, p);
    }

    #[test]
    fn probe_argmax_is_affine_invariant_without_ridge() {
        let mut rng = stream(4, "probe-affine", &[]);
        let n = 200;
        let feats: Vec<Vec<f64>> = (0..n).map(|_| standard_normal_vec(&mut rng, 3)).collect();
        let labels: Vec<usize> = feats
            .iter()
            .map(|f| if f[0] + 0.5 * f[1] > 0.0 { 1 } else { 0 })
            .collect();
        // Invertible affine map.
        let transform = |f: &Vec<f64>| -> Vec<f64> {
            vec![
                2.0 * f[0] - f[1] + 0.3,
                0.5 * f[1] + f[2] - 1.0,
                f[0] - f[2] + 0.7,
            ]
        };
        let feats_t: Vec<Vec<f64>> = feats.iter().map(transform).collect();
        let a = linear_probe(&feats[..150], &labels[..150], &feats[150..], &labels[150..], 2, 0.0)
            .unwrap();
        let b = linear_probe(
            &feats_t[..150],
            &labels[..150],
            &feats_t[150..],
            &labels[150..],
            2,
            0.0,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singular_normal_matrix_suggests_ridge() {
        // Duplicate a feature column so the Gram matrix is singular.
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, i as f64]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        match RidgeClassifier::fit(&feats, &labels, 2, 0.0) {
            Err(Error::Invalid(msg)) => assert!(msg.contains("ridge"), "{}", msg),
            other => panic!("expected singularity error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn cosine_similarity_edge_cases() {
        let a = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let b = vec![vec![1.0, 2.0], vec![1.0, 1.0]];
        // Identical pair contributes 1, zero-norm pair contributes 0.
        assert!((cosine_similarity(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let ortho = cosine_similarity(&vec![vec![1.0, 0.0]], &vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(ortho, 0.0);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn coherence_of_ground_truth_vectors_is_perfect() {
        // Classifier on one-hot label vectors; generated vectors equal to the
        // truth give 100%.
        let k = 4;
        let feats: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let mut v = vec![0.0; k];
                v[i % k] = 1.0;
                v
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % k).collect();
        let clf = RidgeClassifier::fit(&feats, &labels, k, 1e-6).unwrap();
        assert_eq!(coherence_of(&feats, &labels, &clf), 1.0);
    }

    fn gap_testbed() -> (MultimodalDataset, TrainConfig) {
        let spec = LinearGaussianSpec::with_random_loadings(
            2,
            &[4, 3],
            &[0.8, 0.8],
            1.0,
            200,
            60,
        )
        .unwrap();
        let data = gen_linear_gaussian(&spec).unwrap();
        let arch = Arch {
            latent_dim: 2,
            hidden: 12,
            refiner_hidden: 8,
            linear_decoder: false,
        };
        let mut config = TrainConfig::new(Family::Proposed, arch, 61);
        config.oracle_decoder = true;
        config.epochs_stage1 = 2;
        config.batch = 50;
        config.lr = 0.002;
        config.t_steps = 2;
        (data, config)
    }

    #[test]
    fn gap_is_zero_at_exact_posterior_and_positive_otherwise() {
        let (data, _) = gap_testbed();
        let oracle = data.oracle.as_ref().unwrap();
        let xs = data.item(0);
        let exact = oracle.posterior(&xs, &[0, 1]).unwrap();
        // The posterior is generally correlated; its diagonal projection has
        // positive gap, but a diagonal-precision construction is exact.
        let q = exact.to_diag().unwrap();
        let gap = exact.kl_from_diag(&q).unwrap();
        assert!(gap >= 0.0);

        // Untrained posterior has strictly positive gap.
        let rough = DiagGaussian::standard(2);
        assert!(exact.kl_from_diag(&rough).unwrap() > 0.0);
    }

    #[test]
    fn gap_curve_runs_on_a_trained_model() {
        let (data, config) = gap_testbed();
        let out = train_stage1(&config, &data).unwrap();
        let items: Vec<usize> = data.test.iter().take(30).cloned().collect();
        let curve =
            amortization_gap_curve(&out.params, &data, 0, &[1, 2], &items, 62).unwrap();
        assert_eq!(curve.amortized.len(), items.len());
        assert_eq!(curve.refined.len(), 2);
        assert!(curve.amortized.iter().all(|g| *g >= 0.0));
        let (a_mean, r_mean) = amortization_gap(&out.params, &data, 0, 2, &items, 62).unwrap();
        assert!(a_mean >= 0.0 && r_mean >= 0.0);
    }

    #[test]
    fn elbo_curve_first_point_is_amortized_encoder() {
        let (data, config) = gap_testbed();
        let out = train_stage1(&config, &data).unwrap();
        let items: Vec<usize> = data.test.iter().take(10).cloned().collect();
        let curve = elbo_vs_t(&out.params, &data, 0, 1, 8, &items, 63).unwrap();
        assert_eq!(curve.len(), 1);

        // Recompute the amortized point directly.
        let all = vec![0, 1];
        let mut total = 0.0;
        for &item in &items {
            let q = encode(&out.params, EncoderKind::Amortized, 0, &data.item(item)[0]).unwrap();
            let mut erng = stream(63, "curve-elbo", &[0, item as u64, 0]);
            total += elbo_multi_sample(&out.params, &data.item(item), &q, &all, 8, &mut erng)
                .unwrap()
                .total;
        }
        let expect = total / items.len() as f64;
        assert!((curve[0] - expect).abs() < 1e-12, "{} vs {}", curve[0], expect);
    }

    #[test]
    fn metric_direction_registry() {
        assert_eq!(metric_direction("frechet_raw.m0->m1"), Some("lower"));
        assert_eq!(metric_direction("linear_probe.m0"), Some("higher"));
        assert_eq!(metric_direction("coherence.m0->m1"), Some("higher"));
        assert_eq!(metric_direction("amortization_gap"), Some("lower"));
        assert_eq!(metric_direction("nonsense"), None);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricRow {
            experiment: "exp".into(),
            family: "proposed".into(),
            metric: "linear_probe.m0".into(),
            direction: "higher".into(),
            value: 0.93,
            seed: 7,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("experiment,family,metric,direction,value,seed\n"));
        assert!(csv.contains("exp,proposed,linear_probe.m0,higher,0.93,7"));
    }
}
