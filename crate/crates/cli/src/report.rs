//! Report assembly: merge metrics CSVs from one or more experiments into an
//! aligned comparison table with the best family marked per row, and turn
//! curve CSVs into gnuplot-ready two-column files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMetric {
    pub experiment: String,
    pub family: String,
    pub metric: String,
    pub direction: String,
    pub value: f64,
    pub seed: u64,
}

pub struct ReportInput {
    pub metrics: Vec<ParsedMetric>,
    pub curves: Vec<(String, String, usize, f64)>, // family, modality, t, value
    pub malformed: usize,
    pub duplicates: usize,
}

/// Parse any mix of metrics CSVs and curve CSVs, deduplicating metric rows
/// by (experiment, family, metric, seed) and counting malformed rows.
pub fn read_inputs(paths: &[PathBuf]) -> Result<ReportInput> {
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    let mut malformed = 0usize;
    let mut duplicates = 0usize;
    let mut seen = std::collections::BTreeSet::new();

    for path in paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {}", path.display(), e)))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.starts_with("experiment,family,metric") {
            for line in lines {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 6 {
                    malformed += 1;
                    continue;
                }
                let (value, seed) = match (parts[4].parse::<f64>(), parts[5].parse::<u64>()) {
                    (Ok(v), Ok(s)) => (v, s),
                    _ => {
                        malformed += 1;
                        continue;
                    }
                };
                let key = (
                    parts[0].to_string(),
                    parts[1].to_string(),
                    parts[2].to_string(),
                    seed,
                );
                if !seen.insert(key) {
                    duplicates += 1;
                    continue;
                }
                metrics.push(ParsedMetric {
                    experiment: parts[0].to_string(),
                    family: parts[1].to_string(),
                    metric: parts[2].to_string(),
                    direction: parts[3].to_string(),
                    value,
                    seed,
                });
            }
        } else if header.starts_with("family,modality,t,elbo") {
            for line in lines {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 4 {
                    malformed += 1;
                    continue;
                }
                match (parts[2].parse::<usize>(), parts[3].parse::<f64>()) {
                    (Ok(t), Ok(v)) => {
                        curves.push((parts[0].to_string(), parts[1].to_string(), t, v))
                    }
                    _ => malformed += 1,
                }
            }
        } else {
            return Err(CliError::Config(format!(
                "{}: unrecognized CSV header `{}`",
                path.display(),
                header
            )));
        }
    }
    Ok(ReportInput {
        metrics,
        curves,
        malformed,
        duplicates,
    })
}

/// Aligned text table grouped by metric; one column per family, the best
/// value per row marked with `*` according to the metric's direction.
pub fn comparison_table(metrics: &[ParsedMetric]) -> String {
    let mut families: Vec<String> = metrics.iter().map(|m| m.family.clone()).collect();
    families.sort();
    families.dedup();

    // (experiment, metric) -> family -> (mean value over seeds, direction)
    let mut grouped: BTreeMap<(String, String), BTreeMap<String, (Vec<f64>, String)>> =
        BTreeMap::new();
    for m in metrics {
        grouped
            .entry((m.experiment.clone(), m.metric.clone()))
            .or_default()
            .entry(m.family.clone())
            .or_insert_with(|| (Vec::new(), m.direction.clone()))
            .0
            .push(m.value);
    }

    let col_width = families.iter().map(|f| f.len() + 2).max().unwrap_or(10).max(14);
    let metric_width = grouped
        .keys()
        .map(|(e, m)| e.len() + m.len() + 3)
        .max()
        .unwrap_or(20);

    let mut out = String::new();
    out.push_str(&format!("{:<metric_width$}", "metric"));
    for f in &families {
        out.push_str(&format!("{:>col_width$}", f));
    }
    out.push('\n');
    out.push_str(&"-".repeat(metric_width + col_width * families.len()));
    out.push('\n');

    for ((experiment, metric), per_family) in &grouped {
        let label = format!("{} / {}", experiment, metric);
        out.push_str(&format!("{:<metric_width$}", label));
        let means: BTreeMap<&String, f64> = per_family
            .iter()
            .map(|(f, (vals, _))| (f, vals.iter().sum::<f64>() / vals.len() as f64))
            .collect();
        let direction = per_family
            .values()
            .next()
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| "higher".into());
        let best = means
            .iter()
            .reduce(|a, b| {
                let better = if direction == "lower" { b.1 < a.1 } else { b.1 > a.1 };
                if better {
                    b
                } else {
                    a
                }
            })
            .map(|(f, _)| (*f).clone());
        for f in &families {
            match means.get(f) {
                Some(v) => {
                    let mark = if Some(f) == best.as_ref() { "*" } else { " " };
                    out.push_str(&format!("{:>w$}{}", format!("{:.6}", v), mark, w = col_width - 1));
                }
                None => out.push_str(&format!("{:>col_width$}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// Two-column `t value` files per (family, modality), gnuplot-ready.
pub fn write_curve_files(
    curves: &[(String, String, usize, f64)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut grouped: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for (family, modality, t, v) in curves {
        grouped
            .entry((family.clone(), modality.clone()))
            .or_default()
            .push((*t, *v));
    }
    let mut written = Vec::new();
    for ((family, modality), mut points) in grouped {
        points.sort_by_key(|(t, _)| *t);
        let mut text = String::new();
        for (t, v) in points {
            text.push_str(&format!("{} {}\n", t, v));
        }
        let path = out_dir.join(format!("curve_{}_{}.dat", family, modality));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Assemble the report: table to `report.txt` (and returned), curve files
/// alongside it.
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<String> {
    if inputs.is_empty() {
        return Err(CliError::Config("report needs at least one metrics CSV".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let parsed = read_inputs(inputs)?;
    if parsed.malformed > 0 {
        eprintln!("warning: skipped {} malformed CSV rows", parsed.malformed);
    }
    if parsed.duplicates > 0 {
        eprintln!(
            "note: deduplicated {} repeated metric rows",
            parsed.duplicates
        );
    }
    let table = comparison_table(&parsed.metrics);
    std::fs::write(out_dir.join("report.txt"), &table)?;
    write_curve_files(&parsed.curves, out_dir)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn dedup_and_malformed_counting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write(
            &p,
            "experiment,family,metric,direction,value,seed\n\
             e,mixture,frechet_raw.a->b,lower,2.0,1\n\
             e,mixture,frechet_raw.a->b,lower,2.0,1\n\
             garbage row\n\
             e,proposed,frechet_raw.a->b,lower,1.0,1\n",
        );
        let parsed = read_inputs(&[p]).unwrap();
        assert_eq!(parsed.metrics.len(), 2);
        assert_eq!(parsed.duplicates, 1);
        assert_eq!(parsed.malformed, 1);
    }

    #[test]
    fn table_marks_lower_is_better() {
        let metrics = vec![
            ParsedMetric {
                experiment: "e".into(),
                family: "mixture".into(),
                metric: "frechet_raw.a->b".into(),
                direction: "lower".into(),
                value: 5.0,
                seed: 1,
            },
            ParsedMetric {
                experiment: "e".into(),
                family: "proposed".into(),
                metric: "frechet_raw.a->b".into(),
                direction: "lower".into(),
                value: 2.0,
                seed: 1,
            },
        ];
        let table = comparison_table(&metrics);
        let data_line = table.lines().nth(2).unwrap();
        // The proposed column carries the star.
        assert!(data_line.contains("2.000000*"), "{}", table);
        assert!(!data_line.contains("5.000000*"), "{}", table);
    }

    #[test]
    fn single_family_single_column() {
        let metrics = vec![ParsedMetric {
            experiment: "e".into(),
            family: "mixture".into(),
            metric: "linear_probe.a".into(),
            direction: "higher".into(),
            value: 0.9,
            seed: 1,
        }];
        let table = comparison_table(&metrics);
        assert!(table.lines().next().unwrap().contains("mixture"));
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn curve_files_are_two_column(){
        let dir = tempfile::tempdir().unwrap();
        let curves = vec![
            ("proposed".to_string(), "a".to_string(), 2, -3.0),
            ("proposed".to_string(), "a".to_string(), 1, -4.0),
        ];
        let files = write_curve_files(&curves, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, "1 -4\n2 -3\n");
    }
}
