//! Repeated-seed experiments comparing centralized, federated, hybrid and
//! local training on held-out test blocks.

mod config;
mod report;

pub use config::{parse_kv, DataSource, ExperimentConfig, Mode, PairBy};
pub use report::{BlockValue, Comparison, EvalReport, MethodSummary, MetricRow, MetricSummary, MetricTable};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bttr::{fit, select_k_cv_with, BttrModel, CvMetric, FitConfig, NormStats};
use crate::data::{load_csv, make_synthetic, partition, Dataset, PartitionPlan, SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::fed::{run_federation, TransportConfig};
use crate::metrics::{accuracy, c_index, pearson_r, roc_auc};

/// Metric columns reported for a task.
pub fn metric_names(task: Task) -> Vec<String> {
    match task {
        Task::Regression => vec!["pearson".into()],
        Task::Binary => vec!["auc".into(), "accuracy".into()],
        Task::Survival => vec!["c_index".into()],
    }
}

/// Metrics of `model` on `ds`, in [`metric_names`] order. Undefined metrics
/// (constant predictions, single-class blocks) come back as NaN.
pub fn evaluate(model: &BttrModel, ds: &Dataset) -> Result<Vec<f64>> {
    let pred = model.predict(&ds.x)?;
    let p0 = pred.col(0);
    Ok(match ds.task {
        Task::Regression => {
            let m = ds.y.cols();
            let rs: Vec<f64> = (0..m).map(|c| pearson_r(&pred.col(c), &ds.y.col(c)).unwrap_or(f64::NAN)).collect();
            vec![rs.iter().sum::<f64>() / m as f64]
        }
        Task::Binary => {
            let labels = ds.y.col(0);
            vec![roc_auc(&p0, &labels).unwrap_or(f64::NAN), accuracy(&p0, &labels, 0.5).unwrap_or(f64::NAN)]
        }
        Task::Survival => {
            let risk: Vec<f64> = p0.iter().map(|v| -v).collect();
            vec![c_index(&risk, &ds.y.col(0), &ds.y.col(1)).unwrap_or(f64::NAN)]
        }
    })
}

/// `count` contiguous, non-overlapping ranges covering `0..n`, sizes as
/// even as possible (earlier blocks take the remainder).
pub fn block_ranges(n: usize, count: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / count, n % count);
    let mut at = 0;
    (0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            at += len;
            (at - len, at)
        })
        .collect()
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: MetricTable,
    pub report: EvalReport,
    /// Models trained on the first seed, one per method.
    pub models: Vec<(String, BttrModel)>,
    /// Block budget used on each seed.
    pub blocks_used: Vec<(u64, usize)>,
}

struct Prepared {
    parts: Vec<Dataset>,
    test: Dataset,
}

fn fit_normalized(parts: &[Dataset], stats: &NormStats, cfg: &FitConfig) -> Result<BttrModel> {
    let pooled = Dataset::concat(parts)?;
    let (x, y) = pooled.normalized(stats)?;
    fit(&x, &y, cfg)?.with_normalization(stats.clone())
}

fn fit_federated(
    parts: &[Dataset],
    stats: &NormStats,
    cfg: &FitConfig,
    ecfg: &ExperimentConfig,
) -> Result<BttrModel> {
    let clients = parts.iter().map(|p| p.normalized(stats)).collect::<Result<Vec<_>>>()?;
    let run = run_federation(&clients, cfg, ecfg.transport, &TransportConfig::default())?;
    if !run.server.excluded.is_empty() {
        log::warn!("clients {:?} were excluded from the federated fit", run.server.excluded);
    }
    run.model.with_normalization(stats.clone())
}

/// Loads the configured data; synthetic data is generated with `seed`.
pub fn load_source(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { shape, blocks, snr_db, rank, responses, task } => {
            let mut spec = SyntheticSpec::new(shape.clone(), *blocks, *snr_db, seed);
            spec.block_rank = *rank;
            spec.responses = *responses;
            spec.task = *task;
            Ok(make_synthetic(&spec)?.0)
        }
        DataSource::Csv { path, schema } => load_csv(path, schema),
    }
}

fn prepare(ecfg: &ExperimentConfig, csv: Option<&Dataset>, seed: u64) -> Result<Prepared> {
    let mut ds = match csv {
        Some(ds) => ds.clone(),
        None => load_source(&ecfg.data, seed)?,
    };
    if ecfg.shuffle {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ds = ds.select(&idx)?;
    }
    let n = ds.len();
    let n_test = (n as f64 * ecfg.test_fraction).round() as usize;
    if n_test < ecfg.test_blocks || n_test >= n {
        return Err(Error::Config(format!(
            "field 'test_fraction': {n_test} test rows out of {n} cannot form {} test blocks",
            ecfg.test_blocks
        )));
    }
    let train = ds.slice(0, n - n_test)?;
    let test = ds.slice(n - n_test, n)?;
    let plan = PartitionPlan { scheme: ecfg.partition, client_count: ecfg.clients, seed };
    let parts = partition(&train, &plan)?;
    Ok(Prepared { parts, test })
}

fn hybrid_parts(parts: &[Dataset], pooled: &[usize]) -> Result<Vec<Dataset>> {
    if let Some(bad) = pooled.iter().find(|&&c| c >= parts.len()) {
        return Err(Error::Config(format!("field 'hybrid.pooled': client {bad} does not exist")));
    }
    let first = *pooled.iter().min().expect("validated non-empty");
    let mut ids = pooled.to_vec();
    ids.sort_unstable();
    let merged = Dataset::concat(&ids.iter().map(|&i| parts[i].clone()).collect::<Vec<_>>())?;
    let mut out = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        if i == first {
            out.push(merged.clone());
        } else if !ids.contains(&i) {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn run_seed(ecfg: &ExperimentConfig, csv: Option<&Dataset>, seed: u64) -> Result<(Vec<MetricRow>, Vec<(String, BttrModel)>, usize)> {
    let Prepared { parts, test } = prepare(ecfg, csv, seed)?;
    let pooled = Dataset::concat(&parts)?;
    // Normalisation statistics come from training rows only.
    let stats = pooled.compute_norm_stats()?;

    let mut fcfg = ecfg.fit.clone();
    fcfg.keep_trace = false;
    if ecfg.cv_folds >= 2 {
        let (x, y) = pooled.normalized(&stats)?;
        let metric = if pooled.task == Task::Binary { CvMetric::RocAuc } else { CvMetric::Pearson };
        fcfg.max_blocks = select_k_cv_with(&x, &y, &fcfg, ecfg.cv_folds, metric)?;
        log::info!("seed {seed}: cross-validation chose {} blocks", fcfg.max_blocks);
    }

    let mut models: Vec<(String, BttrModel)> = Vec::new();
    for mode in &ecfg.modes {
        match mode {
            Mode::Centralized => models.push((mode.to_string(), fit_normalized(&parts, &stats, &fcfg)?)),
            Mode::Federated => models.push((mode.to_string(), fit_federated(&parts, &stats, &fcfg, ecfg)?)),
            Mode::Hybrid => {
                let hp = hybrid_parts(&parts, &ecfg.hybrid_pooled)?;
                models.push((mode.to_string(), fit_federated(&hp, &stats, &fcfg, ecfg)?));
            }
            Mode::Local => {
                for (i, p) in parts.iter().enumerate() {
                    // A site on its own only knows its own statistics.
                    let own = p.compute_norm_stats()?;
                    models.push((format!("local-{i}"), fit_normalized(std::slice::from_ref(p), &own, &fcfg)?));
                }
            }
        }
    }

    let mut rows = Vec::new();
    let ranges = block_ranges(test.len(), ecfg.test_blocks);
    for (name, model) in &models {
        for (b, &(lo, hi)) in ranges.iter().enumerate() {
            let values = evaluate(model, &test.slice(lo, hi)?)?;
            rows.push(MetricRow { seed, method: name.clone(), block: b, values });
        }
    }
    Ok((rows, models, fcfg.max_blocks))
}

/// Runs every configured method on `repeats` seeds and assembles the report.
pub fn run_experiment(ecfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    ecfg.validate()?;
    let csv = match &ecfg.data {
        DataSource::Csv { .. } => Some(load_source(&ecfg.data, ecfg.seed)?),
        DataSource::Synthetic { .. } => None,
    };
    let mut table = MetricTable::new(metric_names(ecfg.data.task()));
    let mut first_models = Vec::new();
    let mut blocks_used = Vec::new();
    for r in 0..ecfg.repeats {
        let seed = ecfg.seed.wrapping_add(r as u64);
        let (rows, models, k) = run_seed(ecfg, csv.as_ref(), seed)?;
        table.rows.extend(rows);
        blocks_used.push((seed, k));
        if r == 0 {
            first_models = models;
        }
    }
    let report = EvalReport::from_table(&table, ecfg.pair_by)?;
    Ok(ExperimentOutput { table, report, models: first_models, blocks_used })
}

/// Writes `config.resolved`, `metrics.csv`, `report.json` and one model file
/// per method into `ecfg.out`. Returns the written paths.
pub fn write_outputs(ecfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let dir: &Path = &ecfg.out;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let cfg_path = dir.join("config.resolved");
    std::fs::write(&cfg_path, ecfg.resolved())?;
    written.push(cfg_path);
    let metrics = dir.join("metrics.csv");
    out.table.write_csv(&metrics)?;
    written.push(metrics);
    let report = dir.join("report.json");
    std::fs::write(&report, out.report.to_json()?)?;
    written.push(report);
    for (name, model) in &out.models {
        let path = dir.join(format!("model-{name}.fbttr"));
        model.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(pairs: &[(&str, &str)]) -> ExperimentConfig {
        let mut kv: Vec<(String, String)> = [
            ("synth.shape", "100x5x4"),
            ("synth.snr_db", "30"),
            ("blocks", "2"),
            ("repeats", "2"),
            ("snr_grid", "5,10,20,40"),
            ("tau_grid", "95:100"),
            ("epsilon", "1e-9"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        kv.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        ExperimentConfig::from_pairs(&kv).unwrap()
    }

    fn values(out: &ExperimentOutput, method: &str) -> Vec<f64> {
        out.table.rows.iter().filter(|r| r.method == method).map(|r| r.values[0]).collect()
    }

    #[test]
    fn blocks_cover_the_test_rows() {
        assert_eq!(block_ranges(12, 5), vec![(0, 3), (3, 6), (6, 8), (8, 10), (10, 12)]);
        assert_eq!(block_ranges(10, 5).iter().map(|(a, b)| b - a).sum::<usize>(), 10);
    }

    #[test]
    fn centralized_report_has_five_blocks_per_seed() {
        let out = run_experiment(&quick(&[])).unwrap();
        assert_eq!(out.table.rows.len(), 10);
        let s = out.report.method("centralized").unwrap().metric("pearson").unwrap();
        assert_eq!(s.n, 10);
        assert!(s.mean.unwrap() > 0.9 && s.std.unwrap() >= 0.0);
        assert_eq!(out.blocks_used, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn one_federated_client_matches_centralized() {
        let out = run_experiment(&quick(&[("mode", "centralized,federated"), ("clients", "1")])).unwrap();
        for (a, b) in values(&out, "centralized").iter().zip(values(&out, "federated")) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_pooled_hybrid_is_centralized() {
        let out = run_experiment(&quick(&[
            ("mode", "centralized,hybrid,local"),
            ("clients", "3"),
            ("hybrid.pooled", "2,0,1"),
            ("repeats", "1"),
        ]))
        .unwrap();
        assert_eq!(values(&out, "centralized"), values(&out, "hybrid"));
        assert_eq!(out.report.methods.len(), 5);
        assert!(out.report.method("local-2").is_some());
    }

    #[test]
    fn outputs_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(&[("repeats", "1"), ("cv_folds", "3")]);
        cfg.out = dir.path().join("run");
        let out = run_experiment(&cfg).unwrap();
        let files = write_outputs(&cfg, &out).unwrap();
        assert_eq!(files.len(), 4);
        let back = ExperimentConfig::load(dir.path().join("run/config.resolved"), &[]).unwrap();
        assert_eq!(back, cfg);
        let table = MetricTable::read_csv(dir.path().join("run/metrics.csv")).unwrap();
        assert_eq!(table, out.table);
        let model = BttrModel::load(dir.path().join("run/model-centralized.fbttr")).unwrap();
        assert_eq!(model.to_bytes(), out.models[0].1.to_bytes());
    }
}
