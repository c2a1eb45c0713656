//! Evaluation metrics and the paired signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the signed-rank null distribution is
/// computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn binary_labels(labels: &[f64]) -> Result<Vec<bool>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0.0 {
                Ok(false)
            } else if l == 1.0 {
                Ok(true)
            } else {
                Err(Error::invalid(format!("label {l} is not 0 or 1")))
            }
        })
        .collect()
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len(), "pearson_r")?;
    if a.len() < 2 {
        return Err(Error::invalid("pearson_r needs at least 2 values"));
    }
    check_finite(a, "pearson_r input")?;
    check_finite(b, "pearson_r input")?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("pearson_r: zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// count one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    same_len(scores.len(), labels.len(), "roc_auc")?;
    check_finite(scores, "roc_auc scores")?;
    let pos = binary_labels(labels)?;
    let n_pos = pos.iter().filter(|&&p| p).count();
    let n_neg = pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes"));
    }
    let ranks = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(&pos).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((r_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    same_len(scores.len(), labels.len(), "accuracy")?;
    if scores.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l >= 0.5))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Harrell's concordance index. A pair is comparable when the shorter time
/// ends in an event; equal risks score one half.
pub fn c_index(risk: &[f64], time: &[f64], event: &[f64]) -> Result<f64> {
    same_len(risk.len(), time.len(), "c_index")?;
    same_len(risk.len(), event.len(), "c_index")?;
    check_finite(risk, "c_index risk")?;
    check_finite(time, "c_index time")?;
    let ev = binary_labels(event)?;
    let (mut num, mut den) = (0.0, 0usize);
    for i in 0..risk.len() {
        if !ev[i] {
            continue;
        }
        for j in 0..risk.len() {
            if time[i] < time[j] {
                den += 1;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::invalid("c_index: no comparable pairs"));
    }
    Ok(num / den as f64)
}

/// Result of a paired signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Signed-rank sum `W+ - W-`; swapping the samples negates it.
    pub statistic: f64,
    /// Two-tailed p-value.
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Two-tailed Wilcoxon signed-rank test of `a - b`.
///
/// Zero differences are dropped and ties get midranks. Up to
/// [`WILCOXON_EXACT_MAX`] non-zero differences the null distribution is exact,
/// otherwise a normal approximation with the tie-corrected variance is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    same_len(a.len(), b.len(), "wilcoxon")?;
    check_finite(a, "wilcoxon input")?;
    check_finite(b, "wilcoxon input")?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::invalid("wilcoxon: all differences are zero"));
    }
    if n < 2 {
        return Err(Error::invalid("wilcoxon needs at least 2 non-zero differences"));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let statistic: f64 = diffs.iter().zip(&ranks).map(|(d, r)| d.signum() * r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // Doubled midranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * statistic).round() as i64;
        let extreme: f64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= observed.abs())
            .map(|(_, c)| c)
            .sum();
        let p = extreme / 2f64.powi(n as i32);
        return Ok(WilcoxonResult { statistic, p_value: p.min(1.0), n, exact: true });
    }

    let var: f64 = ranks.iter().map(|r| r * r).sum();
    let z = statistic.abs() / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(WilcoxonResult { statistic, p_value: p, n, exact: false })
}
