//! Synthetic multimodal datasets with analytic structure, plus an IDX-format
//! loader for real image/label pairs.
//!
//! The linear-Gaussian generator carries an exact conjugate posterior oracle
//! for any modality subset and the exact marginal likelihood, enabling
//! closed-form measurement of inference quality. The bit-split generator
//! controls shared versus private information directly and emits the exact
//! finite joint distribution for conditional-entropy computations.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::checkpoint::{load_archive, save_archive, Archive, ArchiveHeader};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::model::{Likelihood, ModalitySpec};
use crate::objectives::DiscreteJoint;
use crate::rng::{fnv1a, standard_normal_vec, stream, RngState};
use crate::tensor::Tensor;

/// Columnar multimodal dataset: one `(n, dim)` matrix per modality, an
/// optional class label per item, deterministic train/validation/test
/// splits, and whichever analytic oracle the generator provides.
#[derive(Debug, Clone)]
pub struct MultimodalDataset {
    pub kind: String,
    pub seed: u64,
    pub modalities: Vec<ModalitySpec>,
    pub data: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub n_classes: Option<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub oracle: Option<LinGaussOracle>,
    pub joint: Option<DiscreteJoint>,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data[0].shape()[0]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All modality vectors of one item.
    pub fn item(&self, i: usize) -> Vec<Vec<f64>> {
        self.data.iter().map(|m| m.row(i).to_vec()).collect()
    }

    /// Per-modality `(len(idx), dim)` matrices for the given items.
    pub fn batch(&self, idx: &[usize]) -> Vec<Tensor> {
        self.data
            .iter()
            .map(|m| {
                let dim = m.shape()[1];
                let mut data = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    data.extend_from_slice(m.row(i));
                }
                Tensor::new(vec![idx.len(), dim], data).unwrap()
            })
            .collect()
    }
}

/// 80/10/10 split by hashing `(seed, index)`.
pub fn split_indices(seed: u64, n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        let mut bytes = seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(&(i as u64).to_le_bytes());
        match fnv1a(&bytes) % 10 {
            8 => val.push(i),
            9 => test.push(i),
            _ => train.push(i),
        }
    }
    (train, val, test)
}

// ---- linear-Gaussian testbed -------------------------------------------------

/// `z ~ N(0, I_d)`, `x_m = A_m z + tau_m * noise`.
#[derive(Debug, Clone)]
pub struct LinearGaussianSpec {
    pub latent_dim: usize,
    /// Per-modality `(dim_m, d)` loading matrices.
    pub loadings: Vec<Tensor>,
    pub noise_std: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl LinearGaussianSpec {
    /// Random loadings with entries `N(0, scale^2 / d)`, derived from the
    /// spec seed. A convenient way to build a spec from bare dimensions.
    pub fn with_random_loadings(
        latent_dim: usize,
        dims: &[usize],
        noise_std: &[f64],
        scale: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() != noise_std.len() || dims.is_empty() {
            return Err(Error::invalid("dims and noise_std must align and be nonempty"));
        }
        let mut rng = stream(seed, "lingauss-loadings", &[]);
        let loadings = dims
            .iter()
            .map(|&dim| {
                let s = scale / (latent_dim as f64).sqrt();
                let data = standard_normal_vec(&mut rng, dim * latent_dim)
                    .into_iter()
                    .map(|v| v * s)
                    .collect();
                Tensor::new(vec![dim, latent_dim], data).unwrap()
            })
            .collect();
        let spec = LinearGaussianSpec {
            latent_dim,
            loadings,
            noise_std: noise_std.to_vec(),
            samples,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.loadings.len() != self.noise_std.len() || self.loadings.is_empty() {
            return Err(Error::invalid("loadings and noise_std must align"));
        }
        for (m, a) in self.loadings.iter().enumerate() {
            if a.rank() != 2 || a.shape()[1] != self.latent_dim {
                return Err(Error::shape(format!(
                    "loading {} must be (dim, {})",
                    m, self.latent_dim
                )));
            }
            if self.noise_std[m] <= 0.0 {
                return Err(Error::invalid(format!("noise std {} must be positive", m)));
            }
        }
        Ok(())
    }
}

/// Exact conjugate posterior and marginal likelihood of the linear-Gaussian
/// process.
#[derive(Debug, Clone)]
pub struct LinGaussOracle {
    pub latent_dim: usize,
    pub loadings: Vec<Tensor>,
    pub noise_std: Vec<f64>,
}

/// Full-covariance Gaussian in precision form.
#[derive(Debug, Clone)]
pub struct GaussianFull {
    pub mean: Vec<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianFull {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `KL[q || self]` for a diagonal `q`, closed form.
    pub fn kl_from_diag(&self, q: &DiagGaussian) -> Result<f64> {
        let d = self.dim();
        if q.dim() != d {
            return Err(Error::shape(format!("kl dims {} vs {}", q.dim(), d)));
        }
        let chol = Cholesky::new(self.precision.clone())
            .ok_or_else(|| Error::invalid("posterior precision is not positive definite"))?;
        // ln det Sigma_p = -ln det Lambda
        let ln_det_prec: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let mut trace = 0.0;
        let mut ln_det_q = 0.0;
        for i in 0..d {
            let var_q = q.var(i);
            trace += self.precision[(i, i)] * var_q;
            ln_det_q += 2.0 * q.log_std()[i];
        }
        let dm = DVector::from_iterator(d, (0..d).map(|i| q.mean()[i] - self.mean[i]));
        let quad = (self.precision.clone() * &dm).dot(&dm);
        Ok(0.5 * (trace + quad - d as f64 + (-ln_det_prec) - ln_det_q))
    }

    /// Diagonal view (exact when the precision is diagonal).
    pub fn to_diag(&self) -> Result<DiagGaussian> {
        let d = self.dim();
        let cov = Cholesky::new(self.precision.clone())
            .ok_or_else(|| Error::invalid("precision not positive definite"))?
            .inverse();
        let log_std = (0..d).map(|i| 0.5 * cov[(i, i)].ln()).collect();
        DiagGaussian::new(self.mean.clone(), log_std)
    }
}

impl LinGaussOracle {
    /// Exact `p(z | x_S)` for the modalities in `subset`.
    pub fn posterior(&self, xs: &[Vec<f64>], subset: &[usize]) -> Result<GaussianFull> {
        let d = self.latent_dim;
        let mut precision = DMatrix::<f64>::identity(d, d);
        let mut eta = DVector::<f64>::zeros(d);
        for &m in subset {
            let a = self
                .loadings
                .get(m)
                .ok_or_else(|| Error::invalid(format!("modality {} out of range", m)))?;
            let x = &xs[m];
            let tau2 = self.noise_std[m] * self.noise_std[m];
            let dim = a.shape()[0];
            if x.len() != dim {
                return Err(Error::shape(format!("x_{} has wrong dim", m)));
            }
            for r in 0..dim {
                for i in 0..d {
                    let ari = a.at(r, i);
                    if ari == 0.0 {
                        continue;
                    }
                    eta[i] += ari * x[r] / tau2;
                    for j in 0..d {
                        precision[(i, j)] += ari * a.at(r, j) / tau2;
                    }
                }
            }
        }
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::invalid("posterior precision not positive definite"))?;
        let mean = chol.solve(&eta);
        Ok(GaussianFull {
            mean: mean.iter().cloned().collect(),
            precision,
        })
    }

    /// Exact `log p(x_all)` under the generative process.
    pub fn log_marginal(&self, xs: &[Vec<f64>]) -> Result<f64> {
        let total_dim: usize = self.loadings.iter().map(|a| a.shape()[0]).sum();
        let d = self.latent_dim;
        // Stack loadings and observations.
        let mut a_full = DMatrix::<f64>::zeros(total_dim, d);
        let mut x_full = DVector::<f64>::zeros(total_dim);
        let mut row = 0;
        for (m, a) in self.loadings.iter().enumerate() {
            for r in 0..a.shape()[0] {
                for c in 0..d {
                    a_full[(row, c)] = a.at(r, c);
                }
                x_full[row] = xs[m][r];
                row += 1;
            }
        }
        // Sigma = A A^T + D
        let mut sigma = &a_full * a_full.transpose();
        let mut row = 0;
        for (m, a) in self.loadings.iter().enumerate() {
            for _ in 0..a.shape()[0] {
                sigma[(row, row)] += self.noise_std[m] * self.noise_std[m];
                row += 1;
            }
        }
        let chol = Cholesky::new(sigma)
            .ok_or_else(|| Error::invalid("observation covariance not positive definite"))?;
        let ln_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let solved = chol.solve(&x_full);
        let quad = x_full.dot(&solved);
        Ok(-0.5 * (total_dim as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad))
    }
}

/// Generate the linear-Gaussian dataset and its oracle.
pub fn gen_linear_gaussian(spec: &LinearGaussianSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let d = spec.latent_dim;
    let m_count = spec.loadings.len();
    let mut rng = stream(spec.seed, "lingauss-data", &[]);
    let mut columns: Vec<Vec<f64>> = spec
        .loadings
        .iter()
        .map(|a| Vec::with_capacity(spec.samples * a.shape()[0]))
        .collect();
    for _ in 0..spec.samples {
        let z = standard_normal_vec(&mut rng, d);
        for m in 0..m_count {
            let a = &spec.loadings[m];
            let dim = a.shape()[0];
            let eps = standard_normal_vec(&mut rng, dim);
            for r in 0..dim {
                let mut v = 0.0;
                for c in 0..d {
                    v += a.at(r, c) * z[c];
                }
                columns[m].push(v + spec.noise_std[m] * eps[r]);
            }
        }
    }
    let modalities = (0..m_count)
        .map(|m| {
            ModalitySpec::new(
                format!("m{}", m),
                spec.loadings[m].shape()[0],
                Likelihood::GaussianFixed(spec.noise_std[m]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let data = (0..m_count)
        .map(|m| {
            Tensor::new(
                vec![spec.samples, spec.loadings[m].shape()[0]],
                std::mem::take(&mut columns[m]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val, test) = split_indices(spec.seed, spec.samples);
    Ok(MultimodalDataset {
        kind: "linear_gaussian".into(),
        seed: spec.seed,
        modalities,
        data,
        labels: None,
        n_classes: None,
        train,
        val,
        test,
        oracle: Some(LinGaussOracle {
            latent_dim: d,
            loadings: spec.loadings.clone(),
            noise_std: spec.noise_std.clone(),
        }),
        joint: None,
    })
}

// ---- bit-split testbed ---------------------------------------------------------

/// Shared bits broadcast to every modality, private bits appended per
/// modality. The class label is the shared-bit value.
#[derive(Debug, Clone)]
pub struct BitSplitSpec {
    pub shared_bits: usize,
    pub private_bits: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl BitSplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.private_bits.is_empty() {
            return Err(Error::invalid("bit-split needs at least one modality"));
        }
        let total = self.shared_bits + self.private_bits.iter().sum::<usize>();
        if total > 20 {
            return Err(Error::invalid(format!(
                "bit budget exceeded: shared + private = {} > 20",
                total
            )));
        }
        if self.shared_bits + self.private_bits.iter().max().unwrap() == 0 {
            return Err(Error::invalid("at least one bit required"));
        }
        Ok(())
    }
}

fn bits_to_f64(value: usize, bits: usize) -> Vec<f64> {
    (0..bits).map(|b| ((value >> b) & 1) as f64).collect()
}

/// Generate the bit-split dataset together with its exact joint table.
pub fn gen_bitsplit(spec: &BitSplitSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let m_count = spec.private_bits.len();
    let ks = spec.shared_bits;
    let mut rng = stream(spec.seed, "bitsplit-data", &[]);
    let mut columns: Vec<Vec<f64>> = (0..m_count).map(|_| Vec::new()).collect();
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let shared: usize = if ks == 0 { 0 } else { rng.random_range(0..1usize << ks) };
        labels.push(shared);
        for m in 0..m_count {
            let kp = spec.private_bits[m];
            let private: usize = if kp == 0 { 0 } else { rng.random_range(0..1usize << kp) };
            columns[m].extend(bits_to_f64(shared, ks));
            columns[m].extend(bits_to_f64(private, kp));
        }
    }
    let modalities = (0..m_count)
        .map(|m| {
            ModalitySpec::new(
                format!("m{}", m),
                ks + spec.private_bits[m],
                Likelihood::Bernoulli,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let data = (0..m_count)
        .map(|m| {
            Tensor::new(
                vec![spec.samples, ks + spec.private_bits[m]],
                std::mem::take(&mut columns[m]),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Exact joint: a modality's alphabet index encodes its bit vector
    // little-endian (shared bits in the low positions).
    let alphabet: Vec<usize> = (0..m_count).map(|m| 1usize << (ks + spec.private_bits[m])).collect();
    let cells: usize = alphabet.iter().product();
    if cells > 1 << 24 {
        return Err(Error::invalid("joint table too large for this bit budget"));
    }
    let total_bits = ks + spec.private_bits.iter().sum::<usize>();
    let p_atom = 1.0 / (1u64 << total_bits) as f64;
    let mut probs = vec![0.0; cells];
    let privates_total: usize = spec.private_bits.iter().sum();
    for shared in 0..(1usize << ks) {
        for private_all in 0..(1usize << privates_total) {
            let mut flat = 0usize;
            let mut consumed = 0;
            for m in 0..m_count {
                let kp = spec.private_bits[m];
                let private_m = (private_all >> consumed) & ((1 << kp) - 1);
                consumed += kp;
                let sym = shared | (private_m << ks);
                flat = flat * alphabet[m] + sym;
            }
            probs[flat] += p_atom;
        }
    }
    let joint = DiscreteJoint::new(alphabet, probs)?;

    let (train, val, test) = split_indices(spec.seed, spec.samples);
    Ok(MultimodalDataset {
        kind: "bitsplit".into(),
        seed: spec.seed,
        modalities,
        data,
        labels: Some(labels),
        n_classes: Some(1 << ks),
        train,
        val,
        test,
        oracle: None,
        joint: Some(joint),
    })
}

// ---- IDX loader -----------------------------------------------------------------

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("truncated IDX file reading {} at offset {}", what, offset)))
}

/// Load an IDX image/label pair: images scaled to [0, 1] with a Bernoulli
/// modality spec, labels one-hot over 10 classes.
pub fn load_idx(image_path: &std::path::Path, label_path: &std::path::Path) -> Result<MultimodalDataset> {
    let img_bytes = std::fs::read(image_path)?;
    let lbl_bytes = std::fs::read(label_path)?;

    let img_magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if img_magic != 0x0000_0803 {
        return Err(Error::format(format!(
            "bad image magic {:#010x}, expected 0x00000803",
            img_magic
        )));
    }
    let lbl_magic = read_be_u32(&lbl_bytes, 0, "label magic")?;
    if lbl_magic != 0x0000_0801 {
        return Err(Error::format(format!(
            "bad label magic {:#010x}, expected 0x00000801",
            lbl_magic
        )));
    }
    let n_images = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, "row count")? as usize;
    let cols = read_be_u32(&img_bytes, 12, "column count")? as usize;
    let n_labels = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    if n_images != n_labels {
        return Err(Error::format(format!(
            "image count {} does not match label count {}",
            n_images, n_labels
        )));
    }
    let pix = rows * cols;
    let expect_img = 16 + n_images * pix;
    if img_bytes.len() < expect_img {
        return Err(Error::format(format!(
            "truncated image payload: need {} bytes, have {} (offset {})",
            expect_img,
            img_bytes.len(),
            img_bytes.len()
        )));
    }
    let expect_lbl = 8 + n_labels;
    if lbl_bytes.len() < expect_lbl {
        return Err(Error::format(format!(
            "truncated label payload: need {} bytes, have {} (offset {})",
            expect_lbl,
            lbl_bytes.len(),
            lbl_bytes.len()
        )));
    }

    const K: usize = 10;
    let mut img_data = Vec::with_capacity(n_images * pix);
    for &b in &img_bytes[16..16 + n_images * pix] {
        img_data.push(b as f64 / 255.0);
    }
    let mut lbl_data = vec![0.0; n_labels * K];
    let mut labels = Vec::with_capacity(n_labels);
    for (i, &b) in lbl_bytes[8..8 + n_labels].iter().enumerate() {
        let label = b as usize;
        if label >= K {
            return Err(Error::format(format!("label {} out of range at item {}", label, i)));
        }
        lbl_data[i * K + label] = 1.0;
        labels.push(label);
    }

    let modalities = vec![
        ModalitySpec::new("image", pix, Likelihood::Bernoulli)?,
        ModalitySpec::new("label", K, Likelihood::Categorical(K))?,
    ];
    let seed = fnv1a(&img_bytes[..16.min(img_bytes.len())]);
    let (train, val, test) = split_indices(seed, n_images);
    Ok(MultimodalDataset {
        kind: "idx".into(),
        seed,
        modalities,
        data: vec![
            Tensor::new(vec![n_images, pix], img_data)?,
            Tensor::new(vec![n_labels, K], lbl_data)?,
        ],
        labels: Some(labels),
        n_classes: Some(K),
        train,
        val,
        test,
        oracle: None,
        joint: None,
    })
}

// ---- archive round trip ------------------------------------------------------------

/// Persist a dataset in the tensor-archive container.
pub fn save_dataset(ds: &MultimodalDataset, config_digest: u64, path: &std::path::Path) -> Result<()> {
    let mut meta = Vec::new();
    meta.push(format!("kind = {}", ds.kind));
    meta.push(format!("seed = {}", ds.seed));
    for (i, m) in ds.modalities.iter().enumerate() {
        meta.push(format!("modality.{}.name = {}", i, m.name));
        meta.push(format!("modality.{}.dim = {}", i, m.dim));
        let lik = match &m.likelihood {
            Likelihood::Bernoulli => "bernoulli".to_string(),
            Likelihood::GaussianFixed(s) => format!("gaussian:{}", s),
            Likelihood::Categorical(k) => format!("categorical:{}", k),
        };
        meta.push(format!("modality.{}.likelihood = {}", i, lik));
    }
    if let Some(k) = ds.n_classes {
        meta.push(format!("n_classes = {}", k));
    }
    let mut tensors = std::collections::BTreeMap::new();
    for (i, t) in ds.data.iter().enumerate() {
        tensors.insert(format!("data.{}", i), t.clone());
    }
    if let Some(labels) = &ds.labels {
        tensors.insert(
            "labels".to_string(),
            Tensor::vector(labels.iter().map(|&l| l as f64).collect()),
        );
    }
    if let Some(oracle) = &ds.oracle {
        meta.push(format!("oracle.latent_dim = {}", oracle.latent_dim));
        for (i, a) in oracle.loadings.iter().enumerate() {
            tensors.insert(format!("oracle.loading.{}", i), a.clone());
            meta.push(format!("oracle.noise_std.{} = {}", i, oracle.noise_std[i]));
        }
    }
    if let Some(joint) = &ds.joint {
        meta.push(format!(
            "joint.alphabet = {}",
            joint
                .alphabet()
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        tensors.insert("joint.probs".to_string(), Tensor::vector(joint.probs().to_vec()));
    }
    let header = ArchiveHeader {
        stage: "dataset".to_string(),
        config_digest,
        rng: RngState::capture(&stream(ds.seed, "dataset-archive", &[])),
        meta: meta.join("\n"),
    };
    save_archive(&header, &tensors, path)
}

/// Load a dataset archive written by [`save_dataset`].
pub fn load_dataset(path: &std::path::Path) -> Result<MultimodalDataset> {
    let Archive { header, mut tensors } = load_archive(path)?;
    if header.stage != "dataset" {
        return Err(Error::format(format!(
            "archive stage {} is not a dataset",
            header.stage
        )));
    }
    let kv = crate::checkpoint::parse_flat(&header.meta)?;
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(format!("dataset meta missing {}", key)))
    };
    let kind = get("kind")?.clone();
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::format("dataset meta seed is not an integer"))?;
    let mut modalities = Vec::new();
    let mut data = Vec::new();
    let mut i = 0;
    while kv.contains_key(&format!("modality.{}.name", i)) {
        let name = get(&format!("modality.{}.name", i))?.clone();
        let dim: usize = get(&format!("modality.{}.dim", i))?
            .parse()
            .map_err(|_| Error::format("bad modality dim"))?;
        let lik_str = get(&format!("modality.{}.likelihood", i))?;
        let lik = if lik_str == "bernoulli" {
            Likelihood::Bernoulli
        } else if let Some(v) = lik_str.strip_prefix("gaussian:") {
            Likelihood::GaussianFixed(v.parse().map_err(|_| Error::format("bad sigma"))?)
        } else if let Some(v) = lik_str.strip_prefix("categorical:") {
            Likelihood::Categorical(v.parse().map_err(|_| Error::format("bad k"))?)
        } else {
            return Err(Error::format(format!("unknown likelihood {}", lik_str)));
        };
        modalities.push(ModalitySpec::new(name, dim, lik)?);
        data.push(
            tensors
                .remove(&format!("data.{}", i))
                .ok_or_else(|| Error::format(format!("dataset archive missing data.{}", i)))?,
        );
        i += 1;
    }
    let labels = tensors
        .remove("labels")
        .map(|t| t.data().iter().map(|&v| v as usize).collect::<Vec<_>>());
    let n_classes = kv
        .get("n_classes")
        .map(|v| v.parse::<usize>().map_err(|_| Error::format("bad n_classes")))
        .transpose()?;
    let oracle = if kv.contains_key("oracle.latent_dim") {
        let latent_dim: usize = get("oracle.latent_dim")?
            .parse()
            .map_err(|_| Error::format("bad oracle latent dim"))?;
        let mut loadings = Vec::new();
        let mut noise_std = Vec::new();
        for m in 0..modalities.len() {
            loadings.push(
                tensors
                    .remove(&format!("oracle.loading.{}", m))
                    .ok_or_else(|| Error::format(format!("missing oracle.loading.{}", m)))?,
            );
            noise_std.push(
                get(&format!("oracle.noise_std.{}", m))?
                    .parse()
                    .map_err(|_| Error::format("bad oracle noise std"))?,
            );
        }
        Some(LinGaussOracle {
            latent_dim,
            loadings,
            noise_std,
        })
    } else {
        None
    };
    let joint = if let Some(alpha) = kv.get("joint.alphabet") {
        let alphabet: Vec<usize> = alpha
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| Error::format("bad alphabet")))
            .collect::<Result<_>>()?;
        let probs = tensors
            .remove("joint.probs")
            .ok_or_else(|| Error::format("missing joint.probs"))?;
        Some(DiscreteJoint::new(alphabet, probs.into_data())?)
    } else {
        None
    };
    let n = data.first().map(|t| t.shape()[0]).unwrap_or(0);
    let (train, val, test) = split_indices(seed, n);
    Ok(MultimodalDataset {
        kind,
        seed,
        modalities,
        data,
        labels,
        n_classes,
        train,
        val,
        test,
        oracle,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::uniform_subset_weights;
    use crate::objectives::delta_gap;

    fn small_lingauss(seed: u64) -> LinearGaussianSpec {
        LinearGaussianSpec::with_random_loadings(2, &[3, 2], &[0.7, 0.9], 1.0, 200, seed).unwrap()
    }

    #[test]
    fn huge_noise_posterior_approaches_prior() {
        let spec = LinearGaussianSpec::with_random_loadings(
            2,
            &[3, 2],
            &[1e4, 1e4],
            1.0,
            10,
            42,
        )
        .unwrap();
        let ds = gen_linear_gaussian(&spec).unwrap();
        let oracle = ds.oracle.as_ref().unwrap();
        let xs = ds.item(0);
        let post = oracle.posterior(&xs, &[0, 1]).unwrap();
        for i in 0..2 {
            assert!(post.mean[i].abs() < 1e-2);
            let var = 1.0 / post.precision[(i, i)];
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn scalar_conjugate_case_matches_grid_integration() {
        let oracle = LinGaussOracle {
            latent_dim: 1,
            loadings: vec![Tensor::matrix(1, 1, vec![1.0]).unwrap()],
            noise_std: vec![1.0],
        };
        let xs = vec![vec![2.0]];
        let post = oracle.posterior(&xs, &[0]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-12);
        assert!((post.precision[(0, 0)] - 2.0).abs() < 1e-12);

        // 1-D grid integration of p(x|z)p(z).
        let n = 40_000;
        let lo = -10.0;
        let h = 20.0 / n as f64;
        let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..=n {
            let z = lo + h * k as f64;
            let logp = -0.5 * (z * z) - 0.5 * (2.0 - z) * (2.0 - z);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            let p = w * logp.exp();
            mass += p;
            m1 += p * z;
            m2 += p * z * z;
        }
        let mean = m1 / mass;
        let var = m2 / mass - mean * mean;
        assert!((post.mean[0] - mean).abs() < 1e-6);
        assert!((1.0 / post.precision[(0, 0)] - var).abs() < 1e-6);
    }

    #[test]
    fn full_posterior_precision_dominates_subsets() {
        let spec = small_lingauss(7);
        let ds = gen_linear_gaussian(&spec).unwrap();
        let oracle = ds.oracle.as_ref().unwrap();
        for i in 0..5 {
            let xs = ds.item(i);
            let full = oracle.posterior(&xs, &[0, 1]).unwrap();
            for subset in [vec![0usize], vec![1usize]] {
                let sub = oracle.posterior(&xs, &subset).unwrap();
                for c in 0..2 {
                    assert!(full.precision[(c, c)] >= sub.precision[(c, c)] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_elbo_matches_marginal_likelihood() {
        // Diagonal loadings make the exact posterior exactly diagonal, so a
        // diagonal variational family can represent it and the bound is
        // tight up to sampling error.
        use crate::model::{Arch, ModelParams};
        use crate::objectives::elbo_multi_sample;
        let loadings = vec![
            Tensor::matrix(2, 2, vec![0.9, 0.0, 0.0, 0.4]).unwrap(),
            Tensor::matrix(2, 2, vec![0.3, 0.0, 0.0, 1.1]).unwrap(),
        ];
        let spec = LinearGaussianSpec {
            latent_dim: 2,
            loadings,
            noise_std: vec![0.8, 0.6],
            samples: 5,
            seed: 11,
        };
        let ds = gen_linear_gaussian(&spec).unwrap();
        let oracle = ds.oracle.as_ref().unwrap();

        // Model with the true decoder pinned.
        let arch = Arch {
            latent_dim: 2,
            hidden: 2,
            refiner_hidden: 2,
            linear_decoder: true,
        };
        let mut rng = stream(12, "oracle-elbo", &[]);
        let mut p = ModelParams::init(ds.modalities.clone(), arch, false, false, &mut rng).unwrap();
        p.betas = vec![1.0, 1.0];
        for (m, a) in oracle.loadings.iter().enumerate() {
            // Decoder computes z W, so W = A^T.
            let (dim, d) = (a.shape()[0], a.shape()[1]);
            let mut wt = vec![0.0; d * dim];
            for r in 0..dim {
                for c in 0..d {
                    wt[c * dim + r] = a.at(r, c);
                }
            }
            p.set(
                format!("dec.head.m{}.w", m),
                Tensor::new(vec![d, dim], wt).unwrap(),
            );
        }

        for i in 0..3 {
            let xs = ds.item(i);
            let log_px = oracle.log_marginal(&xs).unwrap();
            let q = oracle.posterior(&xs, &[0, 1]).unwrap().to_diag().unwrap();
            let out = elbo_multi_sample(&p, &xs, &q, &[0, 1], 10_000, &mut rng).unwrap();
            assert!(
                (out.total - log_px).abs() < 0.05,
                "item {}: elbo {} vs log p {}",
                i,
                out.total,
                log_px
            );
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let a = gen_linear_gaussian(&small_lingauss(3)).unwrap();
        let b = gen_linear_gaussian(&small_lingauss(3)).unwrap();
        for (ta, tb) in a.data.iter().zip(&b.data) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = gen_bitsplit(&BitSplitSpec {
            shared_bits: 2,
            private_bits: vec![1, 3],
            samples: 100,
            seed: 5,
        })
        .unwrap();
        let d = gen_bitsplit(&BitSplitSpec {
            shared_bits: 2,
            private_bits: vec![1, 3],
            samples: 100,
            seed: 5,
        })
        .unwrap();
        for (tc, td) in c.data.iter().zip(&d.data) {
            assert_eq!(tc.data(), td.data());
        }
    }

    #[test]
    fn bitsplit_fully_redundant_has_zero_gap() {
        let ds = gen_bitsplit(&BitSplitSpec {
            shared_bits: 2,
            private_bits: vec![0, 0],
            samples: 50,
            seed: 9,
        })
        .unwrap();
        let joint = ds.joint.as_ref().unwrap();
        let gap = delta_gap(joint, &uniform_subset_weights(2)).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn bitsplit_independent_bits_gap() {
        let ds = gen_bitsplit(&BitSplitSpec {
            shared_bits: 0,
            private_bits: vec![1, 1],
            samples: 50,
            seed: 10,
        })
        .unwrap();
        let gap = delta_gap(ds.joint.as_ref().unwrap(), &uniform_subset_weights(2)).unwrap();
        assert!((gap - 2.0 / 3.0 * (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bitsplit_budget_is_enforced() {
        let err = gen_bitsplit(&BitSplitSpec {
            shared_bits: 10,
            private_bits: vec![6, 5],
            samples: 10,
            seed: 1,
        });
        assert!(err.is_err());
    }

    #[test]
    fn bitsplit_marginals_are_uniform_and_frequencies_match() {
        let spec = BitSplitSpec {
            shared_bits: 2,
            private_bits: vec![1, 2],
            samples: 100_000,
            seed: 21,
        };
        let ds = gen_bitsplit(&spec).unwrap();
        let joint = ds.joint.as_ref().unwrap();

        // Exact uniform marginals.
        for (m, &a) in joint.alphabet().iter().enumerate() {
            let marg = joint.marginal(1 << m);
            for p in &marg {
                assert!((p - 1.0 / a as f64).abs() < 1e-15);
            }
        }

        // Empirical joint frequencies within 3 SE of the table.
        let mut counts = vec![0usize; joint.alphabet().iter().product()];
        for i in 0..ds.len() {
            let xs = ds.item(i);
            let mut flat = 0;
            for (m, x) in xs.iter().enumerate() {
                let mut sym = 0usize;
                for (b, &v) in x.iter().enumerate() {
                    if v > 0.5 {
                        sym |= 1 << b;
                    }
                }
                flat = flat * joint.alphabet()[m] + sym;
            }
            counts[flat] += 1;
        }
        let n = ds.len() as f64;
        for (cell, &c) in counts.iter().enumerate() {
            let p = joint.probs()[cell];
            let se = (p * (1.0 - p) / n).sqrt();
            assert!(
                ((c as f64 / n) - p).abs() <= 3.0 * se + 1e-12,
                "cell {}: freq {} vs p {}",
                cell,
                c as f64 / n,
                p
            );
        }
    }

    fn write_idx_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Two 2x2 images.
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 128, 255, 64, 0, 0, 0, 0]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[3, 7]);
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.modalities[0].dim, 4);
        assert_eq!(
            ds.data[0].row(0),
            &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]
        );
        // All-zero image stays all-zero.
        assert_eq!(ds.data[0].row(1), &[0.0; 4]);
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![3, 7]);
        assert_eq!(ds.data[1].row(0)[3], 1.0);
        assert_eq!(ds.data[1].row(0).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn idx_count_mismatch_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path());
        // Patch label count to 3.
        let mut lbl = std::fs::read(&lp).unwrap();
        lbl[4..8].copy_from_slice(&3u32.to_be_bytes());
        let lp2 = dir.path().join("bad_count.idx");
        std::fs::write(&lp2, &lbl).unwrap();
        assert!(matches!(load_idx(&ip, &lp2), Err(Error::Format(_))));

        let ip2 = dir.path().join("bad_magic.idx");
        std::fs::write(&ip2, b"\x00\x00\x09\x03rest").unwrap();
        assert!(matches!(load_idx(&ip2, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_archive_roundtrip() {
        let ds = gen_bitsplit(&BitSplitSpec {
            shared_bits: 2,
            private_bits: vec![1, 2],
            samples: 64,
            seed: 33,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_dataset(&ds, 77, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.kind, ds.kind);
        assert_eq!(loaded.seed, ds.seed);
        for (a, b) in loaded.data.iter().zip(&ds.data) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.train, ds.train);
        assert_eq!(
            loaded.joint.as_ref().unwrap().probs(),
            ds.joint.as_ref().unwrap().probs()
        );

        // Byte-identical re-save.
        let path2 = dir.path().join("ds2.bin");
        save_dataset(&loaded, 77, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let lg = gen_linear_gaussian(&small_lingauss(13)).unwrap();
        let path3 = dir.path().join("lg.bin");
        save_dataset(&lg, 1, &path3).unwrap();
        let lg2 = load_dataset(&path3).unwrap();
        let o1 = lg.oracle.as_ref().unwrap();
        let o2 = lg2.oracle.as_ref().unwrap();
        assert_eq!(o1.loadings[0].data(), o2.loadings[0].data());
        assert_eq!(o1.noise_std, o2.noise_std);
    }

    #[test]
    fn kl_from_diag_is_zero_at_diagonal_posterior() {
        // Diagonal loadings: the exact posterior is diagonal, so converting
        // it to a diagonal Gaussian and measuring the gap gives zero.
        let oracle = LinGaussOracle {
            latent_dim: 2,
            loadings: vec![Tensor::matrix(2, 2, vec![0.9, 0.0, 0.0, 0.4]).unwrap()],
            noise_std: vec![0.8],
        };
        let xs = vec![vec![0.7, -0.2]];
        let post = oracle.posterior(&xs, &[0]).unwrap();
        let diag = post.to_diag().unwrap();
        let gap = post.kl_from_diag(&diag).unwrap();
        assert!(gap.abs() < 1e-12, "gap {}", gap);

        // A perturbed q has positive gap.
        let q = DiagGaussian::new(
            vec![diag.mean()[0] + 0.3, diag.mean()[1]],
            diag.log_std().to_vec(),
        )
        .unwrap();
        assert!(post.kl_from_diag(&q).unwrap() > 0.0);
    }
}
