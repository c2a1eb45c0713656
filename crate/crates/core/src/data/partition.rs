use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, Task};
use crate::error::{Error, Result};

const DIRICHLET_ALPHA: f64 = 0.5;
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Seeded shuffle, then contiguous equal chunks.
    Iid,
    /// Per-label Dirichlet allocation of samples to clients.
    LabelSkew,
    /// One client per distinct site label, in sorted label order.
    ByColumn,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "iid" => Ok(Scheme::Iid),
            "label_skew" => Ok(Scheme::LabelSkew),
            "by_column" | "site" => Ok(Scheme::ByColumn),
            other => Err(Error::Config(format!("unknown partition scheme '{other}'"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Iid => "iid",
            Scheme::LabelSkew => "label_skew",
            Scheme::ByColumn => "by_column",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    /// Number of clients; for `ByColumn`, 0 accepts however many sites exist.
    pub client_count: usize,
    pub seed: u64,
}

/// Label bin of every sample: the class for binary data, a quartile of the
/// first response otherwise.
fn label_bins(ds: &Dataset) -> Vec<usize> {
    let first = ds.y.col(0);
    if ds.task == Task::Binary {
        return first.iter().map(|&v| usize::from(v >= 0.5)).collect();
    }
    let mut sorted = first.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cuts: Vec<f64> = (1..4).map(|q| sorted[(q * n / 4).min(n - 1)]).collect();
    first.iter().map(|v| cuts.iter().filter(|c| v >= c).count()).collect()
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Sample indices of every client, each list in increasing order.
pub fn partition_indices(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    let c = plan.client_count;
    if plan.scheme != Scheme::ByColumn && c == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if c > n {
        return Err(Error::Data(format!("{c} clients but only {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut parts = match plan.scheme {
        Scheme::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (n / c, n % c);
            let mut out = Vec::with_capacity(c);
            let mut at = 0;
            for i in 0..c {
                let len = base + usize::from(i < extra);
                out.push(idx[at..at + len].to_vec());
                at += len;
            }
            out
        }
        Scheme::LabelSkew => {
            let bins = label_bins(ds);
            let mut by_bin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, b) in bins.iter().enumerate() {
                by_bin.entry(*b).or_default().push(i);
            }
            let mut attempt = 0;
            loop {
                let mut out = vec![Vec::new(); c];
                for members in by_bin.values() {
                    let mut members = members.clone();
                    members.shuffle(&mut rng);
                    let props = dirichlet(&mut rng, c);
                    let mut cum = 0.0;
                    let mut start = 0;
                    for (j, p) in props.iter().enumerate() {
                        cum += p;
                        let end = if j + 1 == c { members.len() } else { (cum * members.len() as f64).round() as usize };
                        let end = end.clamp(start, members.len());
                        out[j].extend_from_slice(&members[start..end]);
                        start = end;
                    }
                }
                if out.iter().all(|p| !p.is_empty()) {
                    break out;
                }
                attempt += 1;
                if attempt >= MAX_REDRAWS {
                    return Err(Error::Data(format!(
                        "label-skew partition left a client empty after {MAX_REDRAWS} draws"
                    )));
                }
            }
        }
        Scheme::ByColumn => {
            let groups = ds
                .groups
                .as_ref()
                .ok_or_else(|| Error::Config("by_column partitioning needs a site column".into()))?;
            let mut sites: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, g) in groups.iter().enumerate() {
                sites.entry(g.as_str()).or_default().push(i);
            }
            if c != 0 && sites.len() != c {
                return Err(Error::Config(format!("{c} clients requested but the data has {} sites", sites.len())));
            }
            sites.into_values().collect()
        }
    };
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Splits `ds` into client datasets following `plan`.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    partition_indices(ds, plan)?.iter().map(|idx| ds.select(idx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Tensor};
    use proptest::prelude::*;

    fn ds(n: usize, task: Task) -> Dataset {
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let y = Matrix::column((0..n).map(|v| (v % 3 == 0) as u8 as f64).collect()).unwrap();
        Dataset::new(x, y, task).unwrap()
    }

    fn plan(scheme: Scheme, client_count: usize, seed: u64) -> PartitionPlan {
        PartitionPlan { scheme, client_count, seed }
    }

    #[test]
    fn iid_splits_evenly() {
        let parts = partition(&ds(10, Task::Binary), &plan(Scheme::Iid, 2, 1)).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![5, 5]);
        let parts = partition_indices(&ds(10, Task::Binary), &plan(Scheme::Iid, 3, 1)).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn by_column_follows_sites() {
        let mut d = ds(10, Task::Binary);
        let labels = ["b", "a", "c", "d", "a", "a", "b", "d", "c", "a"];
        d.groups = Some(labels.iter().map(|s| s.to_string()).collect());
        let parts = partition(&d, &plan(Scheme::ByColumn, 4, 0)).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 2, 2, 2]);
        assert!(parts[0].groups.as_ref().unwrap().iter().all(|g| g == "a"));
        assert!(partition(&d, &plan(Scheme::ByColumn, 3, 0)).is_err());
        assert_eq!(partition(&d, &plan(Scheme::ByColumn, 0, 0)).unwrap().len(), 4);
        assert!(partition(&ds(4, Task::Binary), &plan(Scheme::ByColumn, 0, 0)).is_err());
    }

    #[test]
    fn errors() {
        assert!(partition(&ds(3, Task::Binary), &plan(Scheme::Iid, 4, 0)).is_err());
        assert!(partition(&ds(3, Task::Binary), &plan(Scheme::Iid, 0, 0)).is_err());
        "bogus".parse::<Scheme>().unwrap_err();
        assert_eq!("LABEL_SKEW".parse::<Scheme>().unwrap(), Scheme::LabelSkew);
    }

    proptest! {
        #[test]
        fn every_scheme_is_a_true_partition(n in 8usize..60, c in 1usize..5, seed in any::<u64>(), skew in any::<bool>()) {
            let scheme = if skew { Scheme::LabelSkew } else { Scheme::Iid };
            let task = if seed % 2 == 0 { Task::Binary } else { Task::Regression };
            let d = ds(n, task);
            let p = plan(scheme, c, seed);
            let parts = match partition_indices(&d, &p) {
                Ok(parts) => parts,
                // Label skew may legitimately fail to fill every client.
                Err(Error::Data(_)) if skew => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            prop_assert_eq!(parts.len(), c);
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(partition_indices(&d, &p).unwrap(), parts);
        }
    }
}
