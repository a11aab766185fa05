//! Subcommand implementations: dataset generation, two-stage training with
//! manifests, metric evaluation, and report assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use miai_core::checkpoint::{load_checkpoint, save_checkpoint};
use miai_core::data::{
    gen_bitsplit, gen_linear_gaussian, load_dataset, load_idx, save_dataset, BitSplitSpec,
    LinearGaussianSpec, MultimodalDataset,
};
use miai_core::eval::{
    amortization_gap_curve, cosine_similarity, cross_coherence, elbo_vs_t, frechet_cross_modal,
    linear_probe, median, metric_direction, metrics_csv, poe_source_elbo, unimodal_latents,
    MetricRow, RidgeClassifier,
};
use miai_core::model::ModelParams;
use miai_core::rng::fnv1a;
use miai_core::trainer::{train_stage1, train_stage2, Family, TrainOutcome};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{CliError, Result};

pub fn dataset_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("dataset.bin")
}

pub fn stage1_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("stage1.ckpt")
}

pub fn stage2_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("stage2.ckpt")
}

pub fn metrics_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("metrics.csv")
}

pub fn curves_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("curves.csv")
}

/// Thread cap: `MIAI_THREADS` bounds the machine parallelism (min 1).
pub fn thread_cap() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MIAI_THREADS") {
        Ok(v) => v.parse::<usize>().map_or(avail, |n| n.clamp(1, avail.max(1))),
        Err(_) => avail,
    }
}

/// Run boxed jobs on up to `thread_cap()` worker threads and collect the
/// results keyed by job index, so output order never depends on scheduling.
fn run_jobs<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>) -> Vec<T> {
    let threads = thread_cap().min(jobs.len().max(1));
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                match job {
                    Some((idx, f)) => {
                        let out = f();
                        results.lock().unwrap().push((idx, out));
                    }
                    None => break,
                }
            });
        }
    });
    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(idx, _)| *idx);
    collected.into_iter().map(|(_, v)| v).collect()
}

pub fn build_dataset(config: &ExperimentConfig) -> Result<MultimodalDataset> {
    let d = &config.dataset;
    let ds = match d.kind {
        DatasetKind::LinearGaussian => {
            let spec = LinearGaussianSpec::with_random_loadings(
                d.latent_dim,
                &d.modality_dims,
                &d.noise_std,
                d.loading_scale,
                d.samples,
                d.seed,
            )?;
            gen_linear_gaussian(&spec)?
        }
        DatasetKind::BitSplit => {
            let spec = BitSplitSpec {
                shared_bits: d.shared_bits,
                private_bits: d.private_bits.clone(),
                samples: d.samples,
                seed: d.seed,
            };
            gen_bitsplit(&spec)?
        }
        DatasetKind::Idx => {
            let img = d.image_path.as_ref().expect("validated");
            let lbl = d.label_path.as_ref().expect("validated");
            load_idx(img, lbl)?
        }
    };
    Ok(ds)
}

/// Generate and cache the dataset; byte-identical per configuration.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.output.dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {}", config.output.dir.display(), e)))?;
    let ds = build_dataset(config)?;
    let path = dataset_path(config);
    save_dataset(&ds, config.digest(), &path)?;
    Ok(path)
}

fn load_dataset_checked(config: &ExperimentConfig) -> Result<MultimodalDataset> {
    let path = dataset_path(config);
    if !path.exists() {
        return Err(CliError::Io(format!(
            "dataset not found at {}; run gen-data first",
            path.display()
        )));
    }
    let ds = load_dataset(&path)?;
    Ok(ds)
}

fn file_digest(path: &Path) -> Result<u64> {
    Ok(fnv1a(&std::fs::read(path)?))
}

pub struct TrainArtifacts {
    pub stage1: PathBuf,
    pub stage2: Option<PathBuf>,
    pub manifest: PathBuf,
}

/// Run stage 1 (and stage 2 where the family has one), writing checkpoints,
/// per-stage report CSVs, and a manifest of digests. No timestamps anywhere,
/// so reruns with the same configuration are byte-identical.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainArtifacts> {
    let data = load_dataset_checked(config)?;
    let digest = config.digest();
    {
        let archive_digest = miai_core::checkpoint::load_archive(&dataset_path(config))?
            .header
            .config_digest;
        if archive_digest != digest {
            eprintln!(
                "warning: dataset was generated under config digest {:016x}, current is {:016x}",
                archive_digest, digest
            );
        }
    }
    let tc = config.to_train_config();
    let out_dir = &config.output.dir;

    let s1: TrainOutcome = train_stage1(&tc, &data)?;
    let s1_path = stage1_path(config);
    save_checkpoint(&s1.params, "stage1", digest, &s1.rng_state, &s1_path)?;
    std::fs::write(out_dir.join("train_report_stage1.csv"), s1.report.csv())?;

    let mut manifest_lines: BTreeMap<String, String> = BTreeMap::new();
    manifest_lines.insert("config_digest".into(), format!("{:016x}", digest));
    manifest_lines.insert("experiment".into(), config.output.experiment.clone());
    manifest_lines.insert("family".into(), tc.family.as_str().to_string());
    manifest_lines.insert("seed".into(), config.seed().to_string());
    manifest_lines.insert(
        "selected_epoch.stage1".into(),
        s1.report.selected_epoch.to_string(),
    );
    manifest_lines.insert("version.miai".into(), env!("CARGO_PKG_VERSION").to_string());

    let stage2 = if tc.family.has_stage2() {
        let s2 = train_stage2(&tc, &s1.params, &data)?;
        let s2_path = stage2_path(config);
        save_checkpoint(&s2.params, "stage2", digest, &s2.rng_state, &s2_path)?;
        std::fs::write(out_dir.join("train_report_stage2.csv"), s2.report.csv())?;
        manifest_lines.insert(
            "selected_epoch.stage2".into(),
            s2.report.selected_epoch.to_string(),
        );
        Some(s2_path)
    } else {
        None
    };

    for name in [
        "dataset.bin",
        "stage1.ckpt",
        "stage2.ckpt",
        "train_report_stage1.csv",
        "train_report_stage2.csv",
    ] {
        let p = out_dir.join(name);
        if p.exists() {
            manifest_lines.insert(format!("file.{}", name), format!("{:016x}", file_digest(&p)?));
        }
    }
    let manifest = out_dir.join("manifest.txt");
    let text = manifest_lines
        .iter()
        .map(|(k, v)| format!("{} = {}", k, v))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    std::fs::write(&manifest, text)?;

    Ok(TrainArtifacts {
        stage1: s1_path,
        stage2,
        manifest,
    })
}

pub struct EvalArtifacts {
    pub metrics: PathBuf,
    pub curves: Option<PathBuf>,
    pub skipped: Option<PathBuf>,
}

struct SkipRow {
    metric: String,
    reason: String,
}

enum JobOutput {
    Rows(Vec<MetricRow>),
    Skip(SkipRow),
    Failed(String, String),
}

fn cap_items(items: &[usize], cap: usize) -> Vec<usize> {
    if cap == 0 || items.len() <= cap {
        items.to_vec()
    } else {
        items[..cap].to_vec()
    }
}

/// Evaluate every metric applicable to this family and dataset. Metrics that
/// cannot run (missing alignment stage, missing labels) are recorded in
/// `skipped.csv` with a reason; the rest of the run continues.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<EvalArtifacts> {
    let data = load_dataset_checked(config)?;
    let family = config.model.family;
    let experiment = config.output.experiment.clone();
    let seed = config.seed();

    let s1_path = stage1_path(config);
    if !s1_path.exists() {
        return Err(CliError::Io(format!(
            "checkpoint not found at {}; run train first",
            s1_path.display()
        )));
    }
    let (s1_params, s1_header) = load_checkpoint(&s1_path)?;
    if s1_header.config_digest != config.digest() {
        eprintln!(
            "warning: checkpoint config digest {:016x} differs from current {:016x}",
            s1_header.config_digest,
            config.digest()
        );
    }
    let s2 = if stage2_path(config).exists() {
        Some(load_checkpoint(&stage2_path(config))?.0)
    } else {
        None
    };
    // Unimodal metrics read the distilled model when present.
    let eval_params: &ModelParams = s2.as_ref().unwrap_or(&s1_params);
    let lambda_ready = family == Family::Mixture || eval_params.has_alignment_encoders();

    let test_items = cap_items(&data.test, config.eval.items);
    let train_items = cap_items(&data.train, config.eval.items.saturating_mul(4));
    let m_count = data.modalities.len();
    let has_labels = data.labels.is_some() && data.n_classes.is_some();

    let row = |metric: &str, value: f64| -> MetricRow {
        MetricRow {
            experiment: experiment.clone(),
            family: family.as_str().to_string(),
            metric: metric.to_string(),
            direction: metric_direction(metric).unwrap_or("higher").to_string(),
            value,
            seed,
        }
    };
    let row = &row;
    let s1_ref = &s1_params;

    let mut jobs: Vec<Box<dyn FnOnce() -> JobOutput + Send + '_>> = Vec::new();
    let data_ref = &data;
    let test_ref = &test_items;
    let train_ref = &train_items;
    let ridge = config.eval.probe_ridge;
    let k_samples = config.eval.samples;

    // Linear probes per modality.
    for m in 0..m_count {
        let metric = format!("linear_probe.{}", data.modalities[m].name);
        if !lambda_ready {
            jobs.push(Box::new(move || {
                JobOutput::Skip(SkipRow {
                    metric,
                    reason: "needs the alignment stage checkpoint".into(),
                })
            }));
            continue;
        }
        if !has_labels {
            jobs.push(Box::new(move || {
                JobOutput::Skip(SkipRow {
                    metric,
                    reason: "dataset has no labels".into(),
                })
            }));
            continue;
        }
        jobs.push(Box::new(move || {
            let run = || -> miai_core::Result<f64> {
                let labels = data_ref.labels.as_ref().unwrap();
                let classes = data_ref.n_classes.unwrap();
                let tr = unimodal_latents(eval_params, family, m, data_ref, train_ref)?;
                let te = unimodal_latents(eval_params, family, m, data_ref, test_ref)?;
                let tr_l: Vec<usize> = train_ref.iter().map(|&i| labels[i]).collect();
                let te_l: Vec<usize> = test_ref.iter().map(|&i| labels[i]).collect();
                linear_probe(&tr, &tr_l, &te, &te_l, classes, ridge)
            };
            match run() {
                Ok(v) => JobOutput::Rows(vec![row(&metric, v)]),
                Err(e) => JobOutput::Failed(metric, e.to_string()),
            }
        }));
    }

    // Cosine similarity per modality pair.
    for a in 0..m_count {
        for b in (a + 1)..m_count {
            let metric = format!(
                "cosine_similarity.{}-{}",
                data.modalities[a].name, data.modalities[b].name
            );
            if !lambda_ready {
                jobs.push(Box::new(move || {
                    JobOutput::Skip(SkipRow {
                        metric,
                        reason: "needs the alignment stage checkpoint".into(),
                    })
                }));
                continue;
            }
            jobs.push(Box::new(move || {
                let run = || -> miai_core::Result<f64> {
                    let la = unimodal_latents(eval_params, family, a, data_ref, test_ref)?;
                    let lb = unimodal_latents(eval_params, family, b, data_ref, test_ref)?;
                    cosine_similarity(&la, &lb)
                };
                match run() {
                    Ok(v) => JobOutput::Rows(vec![row(&metric, v)]),
                    Err(e) => JobOutput::Failed(metric, e.to_string()),
                }
            }));
        }
    }

    // Cross-modal Fréchet and coherence per ordered pair.
    for s in 0..m_count {
        for t in 0..m_count {
            if s == t {
                continue;
            }
            let fr_metric = format!(
                "frechet_raw.{}->{}",
                data.modalities[s].name, data.modalities[t].name
            );
            let co_metric = format!(
                "coherence.{}->{}",
                data.modalities[s].name, data.modalities[t].name
            );
            if !lambda_ready {
                for metric in [fr_metric, co_metric] {
                    jobs.push(Box::new(move || {
                        JobOutput::Skip(SkipRow {
                            metric,
                            reason: "needs the alignment stage checkpoint".into(),
                        })
                    }));
                }
                continue;
            }
            jobs.push(Box::new(move || {
                match frechet_cross_modal(eval_params, family, data_ref, s, t, test_ref) {
                    Ok(v) => JobOutput::Rows(vec![row(&fr_metric, v)]),
                    Err(e) => JobOutput::Failed(fr_metric, e.to_string()),
                }
            }));
            if has_labels {
                jobs.push(Box::new(move || {
                    let run = || -> miai_core::Result<f64> {
                        let labels = data_ref.labels.as_ref().unwrap();
                        let classes = data_ref.n_classes.unwrap();
                        let feats: Vec<Vec<f64>> = train_ref
                            .iter()
                            .map(|&i| data_ref.data[t].row(i).to_vec())
                            .collect();
                        let labs: Vec<usize> = train_ref.iter().map(|&i| labels[i]).collect();
                        let clf = RidgeClassifier::fit(&feats, &labs, classes, ridge)?;
                        cross_coherence(eval_params, family, data_ref, s, t, &clf, test_ref)
                    };
                    match run() {
                        Ok(v) => JobOutput::Rows(vec![row(&co_metric, v)]),
                        Err(e) => JobOutput::Failed(co_metric, e.to_string()),
                    }
                }));
            } else {
                jobs.push(Box::new(move || {
                    JobOutput::Skip(SkipRow {
                        metric: co_metric,
                        reason: "dataset has no labels".into(),
                    })
                }));
            }
        }
    }

    // Amortization gaps on analytic datasets (proposed family only).
    if family == Family::Proposed && data.oracle.is_some() {
        let depths = config.eval.gap_depths.clone();
        for m in 0..m_count {
            let depths = depths.clone();
            let metric_base = data.modalities[m].name.clone();
            jobs.push(Box::new(move || {
                let t_final = *depths.iter().max().unwrap_or(&1);
                match amortization_gap_curve(s1_ref, data_ref, m, &depths, test_ref, seed) {
                    Ok(curve) => {
                        let mut rows = vec![row(
                            &format!("amortization_gap.{}", metric_base),
                            median(&curve.amortized),
                        )];
                        for (j, &t) in curve.t_values.iter().enumerate() {
                            let name = if t == t_final {
                                format!("amortization_gap_refined.{}", metric_base)
                            } else {
                                format!("amortization_gap_refined.{}.t{}", metric_base, t)
                            };
                            rows.push(row(&name, median(&curve.refined[j])));
                        }
                        JobOutput::Rows(rows)
                    }
                    Err(e) => {
                        JobOutput::Failed(format!("amortization_gap.{}", metric_base), e.to_string())
                    }
                }
            }));
        }
    }

    // The alignment source bound (its own dotted baseline in curve plots).
    if family == Family::Alignment {
        jobs.push(Box::new(move || {
            match poe_source_elbo(s1_ref, data_ref, k_samples, test_ref, seed) {
                Ok(v) => JobOutput::Rows(vec![row("elbo.poe_source", v)]),
                Err(e) => JobOutput::Failed("elbo.poe_source".into(), e.to_string()),
            }
        }));
    }

    let outputs = run_jobs(jobs);
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut skips: Vec<SkipRow> = Vec::new();
    for out in outputs {
        match out {
            JobOutput::Rows(r) => rows.extend(r),
            JobOutput::Skip(s) => skips.push(s),
            JobOutput::Failed(metric, reason) => {
                eprintln!("metric {} failed: {}", metric, reason);
                skips.push(SkipRow {
                    metric,
                    reason: format!("failed: {}", reason),
                });
            }
        }
    }
    rows.sort_by(|a, b| a.metric.cmp(&b.metric));

    let metrics_file = metrics_path(config);
    std::fs::write(&metrics_file, metrics_csv(&rows))?;

    // Bound-versus-iteration curves for the proposed family.
    let curves = if family == Family::Proposed {
        let mut curve_csv = String::from("family,modality,t,elbo\n");
        for m in 0..m_count {
            let curve = elbo_vs_t(
                &s1_params,
                &data,
                m,
                config.eval.curve_t_max,
                k_samples,
                &test_items,
                seed,
            )?;
            for (i, v) in curve.iter().enumerate() {
                // Plot convention: iteration 1 is the amortized encoder.
                curve_csv.push_str(&format!(
                    "{},{},{},{}\n",
                    family.as_str(),
                    data.modalities[m].name,
                    i + 1,
                    v
                ));
            }
        }
        let path = curves_path(config);
        std::fs::write(&path, curve_csv)?;
        Some(path)
    } else {
        None
    };

    let skipped = if skips.is_empty() {
        None
    } else {
        let mut text = String::from("experiment,family,metric,reason\n");
        skips.sort_by(|a, b| a.metric.cmp(&b.metric));
        for s in &skips {
            text.push_str(&format!(
                "{},{},{},{}\n",
                experiment,
                family.as_str(),
                s.metric,
                s.reason
            ));
        }
        let path = config.output.dir.join("skipped.csv");
        std::fs::write(&path, text)?;
        Some(path)
    };

    Ok(EvalArtifacts {
        metrics: metrics_file,
        curves,
        skipped,
    })
}
