use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PairBy;
use crate::error::{Error, Result};
use crate::metrics::wilcoxon_signed_rank;

/// One evaluated test block: `values[i]` belongs to `MetricTable::metrics[i]`;
/// NaN marks a metric that could not be computed on that block.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub seed: u64,
    pub method: String,
    pub block: usize,
    pub values: Vec<f64>,
}

/// The per-block metrics of a whole experiment (`metrics.csv`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTable {
    pub metrics: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(metrics: Vec<String>) -> MetricTable {
        MetricTable { metrics, rows: Vec::new() }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["seed".to_string(), "method".into(), "block".into()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.seed.to_string(), r.method.clone(), r.block.to_string()];
            // `{:?}` prints the shortest string that parses back to the same f64.
            rec.extend(r.values.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<MetricTable> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.len() < 4 || header[..3] != ["seed", "method", "block"] {
            return Err(Error::Data(format!("{}: expected seed,method,block,<metrics...> columns", path.display())));
        }
        let mut table = MetricTable::new(header[3..].to_vec());
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |what: &str| Error::Data(format!("{}: line {line}: bad {what}", path.display()));
            table.rows.push(MetricRow {
                seed: rec[0].parse().map_err(|_| bad("seed"))?,
                method: rec[1].to_string(),
                block: rec[2].parse().map_err(|_| bad("block"))?,
                values: rec.iter().skip(3).map(|v| v.parse::<f64>().map_err(|_| bad("metric value"))).collect::<Result<_>>()?,
            });
        }
        Ok(table)
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockValue {
    pub seed: u64,
    pub block: usize,
    /// `None` when the metric was undefined on this block.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub values: Vec<BlockValue>,
    pub mean: Option<f64>,
    /// Sample standard deviation.
    pub std: Option<f64>,
    /// Number of defined values.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub metrics: Vec<MetricSummary>,
}

/// Two-tailed signed-rank comparison of `a` against `b` on one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub a: String,
    pub b: String,
    /// Paired units with both values defined.
    pub pairs: usize,
    /// Non-zero differences entering the test.
    pub n: Option<usize>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub exact: Option<bool>,
    /// Why no test result is given.
    pub note: Option<String>,
}

/// Summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pair_by: String,
    pub seeds: Vec<u64>,
    pub test_blocks: usize,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()) } else { None };
    (Some(mean), std)
}

impl EvalReport {
    pub fn from_table(table: &MetricTable, pair_by: PairBy) -> Result<EvalReport> {
        let methods = table.methods();
        let mut seeds: Vec<u64> = table.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut blocks: Vec<usize> = table.rows.iter().map(|r| r.block).collect();
        blocks.sort_unstable();
        blocks.dedup();
        if blocks.len() < 2 {
            return Err(Error::Data("a report needs at least 2 test blocks".into()));
        }
        for r in &table.rows {
            if r.values.len() != table.metrics.len() {
                return Err(Error::Data(format!("row for {} has the wrong number of metrics", r.method)));
            }
        }

        // (method, metric) -> pairing key -> value
        let mut paired: BTreeMap<(usize, usize), BTreeMap<(u64, usize), f64>> = BTreeMap::new();
        let mut summaries = Vec::new();
        for (mi, method) in methods.iter().enumerate() {
            let rows: Vec<&MetricRow> = table.rows.iter().filter(|r| &r.method == method).collect();
            let mut metrics = Vec::new();
            for (k, metric) in table.metrics.iter().enumerate() {
                let values: Vec<BlockValue> = rows
                    .iter()
                    .map(|r| BlockValue { seed: r.seed, block: r.block, value: Some(r.values[k]).filter(|v| v.is_finite()) })
                    .collect();
                let defined: Vec<f64> = values.iter().filter_map(|v| v.value).collect();
                let (mean, std) = mean_std(&defined);
                let units = paired.entry((mi, k)).or_default();
                match pair_by {
                    PairBy::BlockSeed => {
                        for v in &values {
                            if let Some(x) = v.value {
                                units.insert((v.seed, v.block), x);
                            }
                        }
                    }
                    PairBy::Block => {
                        for &b in &blocks {
                            let per_block: Vec<f64> =
                                values.iter().filter(|v| v.block == b).filter_map(|v| v.value).collect();
                            if let (Some(m), _) = mean_std(&per_block) {
                                units.insert((0, b), m);
                            }
                        }
                    }
                }
                metrics.push(MetricSummary { metric: metric.clone(), n: defined.len(), values, mean, std });
            }
            summaries.push(MethodSummary { method: method.clone(), metrics });
        }

        let mut comparisons = Vec::new();
        for (k, metric) in table.metrics.iter().enumerate() {
            for a in 0..methods.len() {
                for b in a + 1..methods.len() {
                    let (ua, ub) = (&paired[&(a, k)], &paired[&(b, k)]);
                    let (xa, xb): (Vec<f64>, Vec<f64>) =
                        ua.iter().filter_map(|(key, va)| ub.get(key).map(|vb| (*va, *vb))).unzip();
                    let mut c = Comparison {
                        metric: metric.clone(),
                        a: methods[a].clone(),
                        b: methods[b].clone(),
                        pairs: xa.len(),
                        n: None,
                        statistic: None,
                        p_value: None,
                        exact: None,
                        note: None,
                    };
                    match wilcoxon_signed_rank(&xa, &xb) {
                        Ok(w) => {
                            c.n = Some(w.n);
                            c.statistic = Some(w.statistic);
                            c.p_value = Some(w.p_value);
                            c.exact = Some(w.exact);
                        }
                        Err(e) => c.note = Some(e.to_string()),
                    }
                    comparisons.push(c);
                }
            }
        }
        Ok(EvalReport { pair_by: pair_by.to_string(), seeds, test_blocks: blocks.len(), methods: summaries, comparisons })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialisation: {e}")))
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report parse: {e}")))
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

impl MethodSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}
