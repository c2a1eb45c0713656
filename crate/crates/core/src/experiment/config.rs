use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bttr::FitConfig;
use crate::data::{CsvSchema, Scheme, Task};
use crate::error::{Error, Result};
use crate::fed::Transport;
use crate::sparse_tucker::HyperGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Centralized,
    Federated,
    Hybrid,
    Local,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centralized" | "centralised" => Ok(Mode::Centralized),
            "federated" => Ok(Mode::Federated),
            "hybrid" => Ok(Mode::Hybrid),
            "local" => Ok(Mode::Local),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Centralized => "centralized",
            Mode::Federated => "federated",
            Mode::Hybrid => "hybrid",
            Mode::Local => "local",
        })
    }
}

/// Unit over which two methods' metrics are paired for the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairBy {
    /// Every (seed, test block) is one pair.
    #[default]
    BlockSeed,
    /// Values are averaged over seeds first; every test block is one pair.
    Block,
}

impl FromStr for PairBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<PairBy> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "block_seed" | "seed_block" => Ok(PairBy::BlockSeed),
            "block" => Ok(PairBy::Block),
            other => Err(Error::Config(format!("unknown pairing unit '{other}'"))),
        }
    }
}

impl fmt::Display for PairBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairBy::BlockSeed => "block_seed",
            PairBy::Block => "block",
        })
    }
}

/// Where the samples come from. Synthetic data is regenerated per seed.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        shape: Vec<usize>,
        blocks: usize,
        snr_db: Option<f64>,
        rank: usize,
        responses: usize,
        task: Task,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl DataSource {
    pub fn task(&self) -> Task {
        match self {
            DataSource::Synthetic { task, .. } => *task,
            DataSource::Csv { schema, .. } => schema.task,
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Methods run on every seed, in report order.
    pub modes: Vec<Mode>,
    pub data: DataSource,
    pub clients: usize,
    pub partition: Scheme,
    /// Client ids merged onto one client in hybrid mode.
    pub hybrid_pooled: Vec<usize>,
    pub seed: u64,
    pub repeats: usize,
    pub fit: FitConfig,
    /// Folds for choosing the block count; 0 uses `fit.max_blocks` as is.
    pub cv_folds: usize,
    pub test_fraction: f64,
    pub test_blocks: usize,
    /// Seeded row shuffle before the train/test split.
    pub shuffle: bool,
    pub pair_by: PairBy,
    pub transport: Transport,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "mode",
    "data",
    "synth.shape",
    "synth.blocks",
    "synth.snr_db",
    "synth.rank",
    "synth.responses",
    "synth.task",
    "csv.path",
    "csv.response",
    "csv.task",
    "csv.event",
    "csv.categorical",
    "csv.site",
    "csv.drop",
    "csv.feature_shape",
    "clients",
    "partition",
    "hybrid.pooled",
    "seed",
    "repeats",
    "blocks",
    "epsilon",
    "snr_grid",
    "tau_grid",
    "cv_folds",
    "test_fraction",
    "test_blocks",
    "shuffle",
    "pair_by",
    "transport",
    "out",
];

const DEFAULTS: &[(&str, &str)] = &[
    ("mode", "centralized"),
    ("data", "synthetic"),
    ("synth.shape", "200x6x5"),
    ("synth.blocks", "2"),
    ("synth.snr_db", "30"),
    ("synth.rank", "1"),
    ("synth.responses", "1"),
    ("synth.task", "regression"),
    ("clients", "4"),
    ("partition", "iid"),
    ("seed", "0"),
    ("repeats", "5"),
    ("blocks", "5"),
    ("epsilon", "1e-6"),
    ("snr_grid", "1:50"),
    ("tau_grid", "90:100"),
    ("cv_folds", "0"),
    ("test_fraction", "0.25"),
    ("test_blocks", "5"),
    ("shuffle", "false"),
    ("pair_by", "block_seed"),
    ("transport", "in_process"),
    ("out", "results"),
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn field_err(key: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("field '{key}': {msg}"))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn parse_dims(key: &str, v: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = v
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().map_err(|_| field_err(key, format!("bad extent in '{v}'"))))
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(field_err(key, "extents must be positive"));
    }
    Ok(dims)
}

/// `a:b` (step 1), `a:b:step`, or a comma-separated list.
fn parse_grid(key: &str, v: &str) -> Result<Vec<f64>> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| field_err(key, format!("'{s}' is not a number")));
    if v.contains(':') {
        let parts: Vec<f64> = v.split(':').map(num).collect::<Result<_>>()?;
        let (lo, hi, step) = match parts[..] {
            [lo, hi] => (lo, hi, 1.0),
            [lo, hi, step] => (lo, hi, step),
            _ => return Err(field_err(key, "ranges are lo:hi or lo:hi:step")),
        };
        if step <= 0.0 || hi < lo {
            return Err(field_err(key, "range must be increasing with a positive step"));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| lo + step * i as f64).collect())
    } else {
        list(v).iter().map(|s| num(s)).collect()
    }
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn req(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| field_err(key, "required"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.req(key)?;
        v.parse::<T>().map_err(|e| field_err(key, format!("'{v}': {e}")))
    }
}

impl ExperimentConfig {
    /// Builds a config from `key = value` pairs on top of the defaults.
    /// Later pairs override earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut map: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown field '{k}'")));
            }
            map.insert(k.clone(), v.clone());
        }
        let f = Fields(map);

        let modes: Vec<Mode> = list(f.req("mode")?)
            .iter()
            .map(|m| m.parse().map_err(|e: Error| field_err("mode", e)))
            .collect::<Result<_>>()?;
        if modes.is_empty() {
            return Err(field_err("mode", "at least one mode is required"));
        }
        let data = match f.req("data")? {
            "synthetic" => {
                let snr_raw = f.req("synth.snr_db")?;
                let snr_db = match snr_raw.to_ascii_lowercase().as_str() {
                    "inf" | "none" | "noiseless" => None,
                    _ => Some(f.parse::<f64>("synth.snr_db")?),
                };
                DataSource::Synthetic {
                    shape: parse_dims("synth.shape", f.req("synth.shape")?)?,
                    blocks: f.parse("synth.blocks")?,
                    snr_db,
                    rank: f.parse("synth.rank")?,
                    responses: f.parse("synth.responses")?,
                    task: f.parse("synth.task")?,
                }
            }
            "csv" => {
                let task: Task = f.parse("csv.task")?;
                let response = list(f.req("csv.response")?);
                let mut schema = CsvSchema::new(String::new(), task);
                schema.response = response;
                schema.event = f.get("csv.event").map(str::to_string);
                schema.categorical = f.get("csv.categorical").map(list).unwrap_or_default();
                schema.site = f.get("csv.site").map(str::to_string);
                schema.drop = f.get("csv.drop").map(list).unwrap_or_default();
                schema.feature_shape =
                    f.get("csv.feature_shape").map(|v| parse_dims("csv.feature_shape", v)).transpose()?;
                DataSource::Csv { path: PathBuf::from(f.req("csv.path")?), schema }
            }
            other => return Err(field_err("data", format!("expected 'synthetic' or 'csv', got '{other}'"))),
        };
        let grid = HyperGrid::new(
            parse_grid("snr_grid", f.req("snr_grid")?)?,
            parse_grid("tau_grid", f.req("tau_grid")?)?,
        )
        .map_err(|e| field_err("snr_grid/tau_grid", e))?;
        let fit = FitConfig::new(f.parse("blocks")?, f.parse("epsilon")?, grid).map_err(|e| field_err("blocks/epsilon", e))?;
        let transport = match f.req("transport")? {
            "in_process" | "inprocess" => Transport::InProcess,
            "tcp" | "tcp_loopback" => Transport::TcpLoopback,
            other => return Err(field_err("transport", format!("expected 'in_process' or 'tcp', got '{other}'"))),
        };
        let hybrid_pooled: Vec<usize> = f
            .get("hybrid.pooled")
            .map(list)
            .unwrap_or_default()
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| field_err("hybrid.pooled", format!("'{s}' is not a client id"))))
            .collect::<Result<_>>()?;

        let cfg = ExperimentConfig {
            modes,
            data,
            clients: f.parse("clients")?,
            partition: f.parse("partition")?,
            hybrid_pooled,
            seed: f.parse("seed")?,
            repeats: f.parse("repeats")?,
            fit,
            cv_folds: f.parse("cv_folds")?,
            test_fraction: f.parse("test_fraction")?,
            test_blocks: f.parse("test_blocks")?,
            shuffle: f.parse("shuffle")?,
            pair_by: f.parse("pair_by")?,
            transport,
            out: PathBuf::from(f.req("out")?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `overrides` on top.
    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut pairs = parse_kv(&text)?;
        pairs.extend_from_slice(overrides);
        ExperimentConfig::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 && self.partition != Scheme::ByColumn {
            return Err(field_err("clients", "must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(field_err("repeats", "must be at least 1"));
        }
        if self.test_blocks < 2 {
            return Err(field_err("test_blocks", "at least 2 test blocks are needed"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(field_err("test_fraction", "must lie strictly between 0 and 1"));
        }
        if self.cv_folds == 1 {
            return Err(field_err("cv_folds", "use 0 to disable or at least 2 folds"));
        }
        if self.modes.contains(&Mode::Hybrid) {
            if self.hybrid_pooled.is_empty() {
                return Err(field_err("hybrid.pooled", "hybrid mode needs the list of pooled client ids"));
            }
            if self.clients != 0 {
                if let Some(bad) = self.hybrid_pooled.iter().find(|&&c| c >= self.clients) {
                    return Err(field_err("hybrid.pooled", format!("client {bad} does not exist")));
                }
            }
            let mut sorted = self.hybrid_pooled.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.hybrid_pooled.len() {
                return Err(field_err("hybrid.pooled", "client ids repeat"));
            }
        }
        if self.partition == Scheme::ByColumn {
            let has_site = matches!(&self.data, DataSource::Csv { schema, .. } if schema.site.is_some());
            if !has_site {
                return Err(field_err("partition", "by_column needs csv.site"));
            }
        }
        Ok(())
    }

    /// The config as `key = value` text that [`parse_kv`] reads back to the
    /// same settings.
    pub fn resolved(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let grid = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let dims = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        let mut lines: Vec<(String, String)> = vec![(
            "mode".into(),
            self.modes.iter().map(Mode::to_string).collect::<Vec<_>>().join(","),
        )];
        match &self.data {
            DataSource::Synthetic { shape, blocks, snr_db, rank, responses, task } => {
                lines.push(("data".into(), "synthetic".into()));
                lines.push(("synth.shape".into(), dims(shape)));
                lines.push(("synth.blocks".into(), blocks.to_string()));
                lines.push(("synth.snr_db".into(), snr_db.map_or("inf".into(), |s| s.to_string())));
                lines.push(("synth.rank".into(), rank.to_string()));
                lines.push(("synth.responses".into(), responses.to_string()));
                lines.push(("synth.task".into(), task.to_string()));
            }
            DataSource::Csv { path, schema } => {
                lines.push(("data".into(), "csv".into()));
                lines.push(("csv.path".into(), path.display().to_string()));
                lines.push(("csv.response".into(), join(&schema.response)));
                lines.push(("csv.task".into(), schema.task.to_string()));
                if let Some(e) = &schema.event {
                    lines.push(("csv.event".into(), e.clone()));
                }
                if !schema.categorical.is_empty() {
                    lines.push(("csv.categorical".into(), join(&schema.categorical)));
                }
                if let Some(s) = &schema.site {
                    lines.push(("csv.site".into(), s.clone()));
                }
                if !schema.drop.is_empty() {
                    lines.push(("csv.drop".into(), join(&schema.drop)));
                }
                if let Some(fs) = &schema.feature_shape {
                    lines.push(("csv.feature_shape".into(), dims(fs)));
                }
            }
        }
        lines.push(("clients".into(), self.clients.to_string()));
        lines.push(("partition".into(), self.partition.to_string()));
        if !self.hybrid_pooled.is_empty() {
            let ids: Vec<String> = self.hybrid_pooled.iter().map(usize::to_string).collect();
            lines.push(("hybrid.pooled".into(), join(&ids)));
        }
        lines.push(("seed".into(), self.seed.to_string()));
        lines.push(("repeats".into(), self.repeats.to_string()));
        lines.push(("blocks".into(), self.fit.max_blocks.to_string()));
        lines.push(("epsilon".into(), format!("{:e}", self.fit.epsilon)));
        lines.push(("snr_grid".into(), grid(self.fit.grid.snr_values())));
        lines.push(("tau_grid".into(), grid(self.fit.grid.tau_values())));
        lines.push(("cv_folds".into(), self.cv_folds.to_string()));
        lines.push(("test_fraction".into(), self.test_fraction.to_string()));
        lines.push(("test_blocks".into(), self.test_blocks.to_string()));
        lines.push(("shuffle".into(), self.shuffle.to_string()));
        lines.push(("pair_by".into(), self.pair_by.to_string()));
        let transport = match self.transport {
            Transport::InProcess => "in_process",
            Transport::TcpLoopback => "tcp",
        };
        lines.push(("transport".into(), transport.into()));
        lines.push(("out".into(), self.out.display().to_string()));
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_resolve_and_round_trip() {
        let cfg = ExperimentConfig::from_pairs(&[]).unwrap();
        assert_eq!(cfg.modes, vec![Mode::Centralized]);
        assert_eq!(cfg.repeats, 5);
        assert_eq!(cfg.fit.grid.cells(), 50 * 11);
        let again = ExperimentConfig::from_pairs(&parse_kv(&cfg.resolved()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn csv_config_round_trips() {
        let cfg = ExperimentConfig::from_pairs(&kv(&[
            ("data", "csv"),
            ("csv.path", "heart.csv"),
            ("csv.response", "target"),
            ("csv.task", "binary"),
            ("csv.site", "center"),
            ("csv.categorical", "cp,thal"),
            ("partition", "by_column"),
            ("mode", "centralized, federated, hybrid"),
            ("hybrid.pooled", "0,2"),
            ("snr_grid", "5,10,20"),
            ("tau_grid", "95:100:2.5"),
        ]))
        .unwrap();
        assert_eq!(cfg.fit.grid.tau_values(), &[95.0, 97.5, 100.0]);
        let again = ExperimentConfig::from_pairs(&parse_kv(&cfg.resolved()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cases: &[(&[(&str, &str)], &str)] = &[
            (&[("clients", "many")], "clients"),
            (&[("mode", "sideways")], "mode"),
            (&[("bogus", "1")], "bogus"),
            (&[("test_blocks", "1")], "test_blocks"),
            (&[("mode", "hybrid")], "hybrid.pooled"),
            (&[("partition", "by_column")], "partition"),
            (&[("snr_grid", "5:1")], "snr_grid"),
            (&[("data", "csv"), ("csv.task", "binary")], "csv.response"),
        ];
        for (pairs, field) in cases {
            let err = ExperimentConfig::from_pairs(&kv(pairs)).unwrap_err();
            assert!(err.is_config(), "{err}");
            assert!(err.to_string().contains(field), "{err} should name {field}");
        }
        assert!(parse_kv("just words").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut pairs = parse_kv("# header\nseed = 3 # trailing\n\nblocks=2\n").unwrap();
        pairs.push(("seed".into(), "9".into()));
        let cfg = ExperimentConfig::from_pairs(&pairs).unwrap();
        assert_eq!((cfg.seed, cfg.fit.max_blocks), (9, 2));
    }
}
