//! Binary tensor archives: model checkpoints and cached datasets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "MIAI" (4 bytes)
//! version u32
//! stage   u32 length + UTF-8 tag ("stage1", "stage2", "dataset")
//! digest  u64 config digest
//! rng     u32 length + serialized generator state
//! meta    u32 length + UTF-8 flat `key = value` lines
//! count   u64 number of tensor records
//! record  name-length u32, name UTF-8, rank u32, dims u64 each, payload f64
//! ```
//!
//! The magic is checked before anything is allocated; every read error names
//! the byte offset it happened at. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, Likelihood, ModalitySpec, ModelParams};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MIAI";
pub const FORMAT_VERSION: u32 = 1;

/// Everything in an archive besides the tensors themselves.
#[derive(Debug, Clone)]
pub struct ArchiveHeader {
    pub stage: String,
    pub config_digest: u64,
    pub rng: RngState,
    pub meta: String,
}

#[derive(Debug)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(format!(
                "truncated file: failed reading {} at offset {}",
                what, self.offset
            ))),
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 24 {
            return Err(Error::format(format!(
                "{} length {} at offset {} is implausible",
                what, len, self.offset
            )));
        }
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf, what)?;
        String::from_utf8(buf)
            .map_err(|_| Error::format(format!("{} is not UTF-8 at offset {}", what, self.offset)))
    }
}

pub fn save_archive(
    header: &ArchiveHeader,
    tensors: &BTreeMap<String, Tensor>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.stage.len() as u32).to_le_bytes())?;
    w.write_all(header.stage.as_bytes())?;
    w.write_all(&header.config_digest.to_le_bytes())?;
    let rng_bytes = header.rng.to_bytes();
    w.write_all(&(rng_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&rng_bytes)?;
    w.write_all(&(header.meta.len() as u32).to_le_bytes())?;
    w.write_all(header.meta.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));

    // Reject bad magic before any record is allocated.
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported format version {}, expected {}",
            version, FORMAT_VERSION
        )));
    }
    let stage = r.string("stage tag")?;
    let config_digest = r.u64("config digest")?;
    let rng_len = r.u32("rng state length")? as usize;
    let mut rng_bytes = vec![0u8; rng_len];
    r.read_exact(&mut rng_bytes, "rng state")?;
    let rng = RngState::from_bytes(&rng_bytes)?;
    let meta = r.string("meta block")?;

    let count = r.u64("record count")?;
    let mut tensors = BTreeMap::new();
    for k in 0..count {
        let name = r.string(&format!("record {} name", k))?;
        let rank = r.u32(&format!("record {} rank", k))? as usize;
        if rank > 8 {
            return Err(Error::format(format!(
                "record {} rank {} at offset {} is implausible",
                k, rank, r.offset
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u64(&format!("record {} dim {}", k, d))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for i in 0..n {
            r.read_exact(&mut buf, &format!("record {} payload element {}", k, i))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Archive {
        header: ArchiveHeader {
            stage,
            config_digest,
            rng,
            meta,
        },
        tensors,
    })
}

// ---- model checkpoints -------------------------------------------------------

fn likelihood_to_str(l: &Likelihood) -> String {
    match l {
        Likelihood::Bernoulli => "bernoulli".to_string(),
        Likelihood::GaussianFixed(s) => format!("gaussian:{}", s),
        Likelihood::Categorical(k) => format!("categorical:{}", k),
    }
}

fn likelihood_from_str(s: &str) -> Result<Likelihood> {
    if s == "bernoulli" {
        return Ok(Likelihood::Bernoulli);
    }
    if let Some(v) = s.strip_prefix("gaussian:") {
        let sigma: f64 = v
            .parse()
            .map_err(|_| Error::format(format!("bad gaussian sigma {}", v)))?;
        return Ok(Likelihood::GaussianFixed(sigma));
    }
    if let Some(v) = s.strip_prefix("categorical:") {
        let k: usize = v
            .parse()
            .map_err(|_| Error::format(format!("bad categorical k {}", v)))?;
        return Ok(Likelihood::Categorical(k));
    }
    Err(Error::format(format!("unknown likelihood {}", s)))
}

fn model_meta(params: &ModelParams) -> String {
    let mut lines = Vec::new();
    lines.push(format!("arch.latent_dim = {}", params.arch.latent_dim));
    lines.push(format!("arch.hidden = {}", params.arch.hidden));
    lines.push(format!("arch.refiner_hidden = {}", params.arch.refiner_hidden));
    lines.push(format!("arch.linear_decoder = {}", params.arch.linear_decoder));
    for (i, m) in params.modalities.iter().enumerate() {
        lines.push(format!("modality.{}.name = {}", i, m.name));
        lines.push(format!("modality.{}.dim = {}", i, m.dim));
        lines.push(format!(
            "modality.{}.likelihood = {}",
            i,
            likelihood_to_str(&m.likelihood)
        ));
    }
    for (i, b) in params.betas.iter().enumerate() {
        lines.push(format!("beta.{} = {}", i, b));
    }
    lines.join("\n")
}

pub(crate) fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(format!("line {}: expected `key = value`, got `{}`", ln + 1, raw))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_to_model(meta: &str, tensors: BTreeMap<String, Tensor>) -> Result<ModelParams> {
    let kv = parse_flat(meta)?;
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(format!("checkpoint meta missing {}", key)))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(format!("checkpoint meta {} is not an integer", key)))
    };
    let arch = Arch {
        latent_dim: parse_usize("arch.latent_dim")?,
        hidden: parse_usize("arch.hidden")?,
        refiner_hidden: parse_usize("arch.refiner_hidden")?,
        linear_decoder: get("arch.linear_decoder")? == "true",
    };
    let mut modalities = Vec::new();
    let mut i = 0;
    while kv.contains_key(&format!("modality.{}.name", i)) {
        let name = get(&format!("modality.{}.name", i))?.clone();
        let dim = parse_usize(&format!("modality.{}.dim", i))?;
        let lik = likelihood_from_str(get(&format!("modality.{}.likelihood", i))?)?;
        modalities.push(ModalitySpec::new(name, dim, lik)?);
        i += 1;
    }
    if modalities.is_empty() {
        return Err(Error::format("checkpoint meta describes no modalities"));
    }
    let mut betas = Vec::with_capacity(modalities.len());
    for i in 0..modalities.len() {
        let b: f64 = get(&format!("beta.{}", i))?
            .parse()
            .map_err(|_| Error::format(format!("checkpoint meta beta.{} is not a number", i)))?;
        betas.push(b);
    }
    let mut params = ModelParams::init(
        modalities,
        arch,
        false,
        false,
        &mut crate::rng::stream(0, "checkpoint-shell", &[]),
    )?;
    params.betas = betas;
    params.tensors_mut().clear();
    for (k, v) in tensors {
        params.set(k, v);
    }
    Ok(params)
}

pub fn save_checkpoint(
    params: &ModelParams,
    stage: &str,
    config_digest: u64,
    rng: &RngState,
    path: &Path,
) -> Result<()> {
    let header = ArchiveHeader {
        stage: stage.to_string(),
        config_digest,
        rng: rng.clone(),
        meta: model_meta(params),
    };
    save_archive(&header, params.tensors(), path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ArchiveHeader)> {
    let archive = load_archive(path)?;
    let params = meta_to_model(&archive.header.meta, archive.tensors)?;
    Ok((params, archive.header))
}
