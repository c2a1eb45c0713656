//! Server-side arithmetic: rank harmonisation, block alignment and weighted
//! averaging.

use super::message::{AceReport, HyperAssign};
use crate::bttr::Block;
use crate::error::{Error, Result};
use crate::sparse_tucker::{apply_selection, SparseTuckerResult};
use crate::tensor::{mode_n_product, thin_qr, Matrix, Tensor};

/// Factors whose orthonormality error is at most this are left untouched.
pub const ORTHONORMAL_TOL: f64 = 1e-12;

/// `N_k / Σ N`.
pub fn aggregation_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("no sample counts"));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    Ok(counts.iter().map(|&n| n as f64 / total).collect())
}

/// Plain sample-weighted average of flat parameter vectors.
pub fn fedavg_reference(updates: &[(Vec<f64>, u64)]) -> Result<Vec<f64>> {
    let counts: Vec<u64> = updates.iter().map(|(_, n)| *n).collect();
    let weights = aggregation_weights(&counts)?;
    let len = updates[0].0.len();
    if updates.iter().any(|(v, _)| v.len() != len) {
        return Err(Error::shape("parameter vectors differ in length"));
    }
    let mut out = vec![0.0; len];
    for ((v, _), w) in updates.iter().zip(&weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Target ranks are the elementwise minimum (at least 1) of the reported
/// ranks. Every client keeps its own (SNR, tau).
pub fn harmonize_ranks(reports: &[AceReport], epsilon: f64) -> Result<(Vec<usize>, Vec<HyperAssign>)> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to harmonise"))?;
    if reports.iter().any(|r| r.skip) {
        return Err(Error::invalid("skipped clients take no part in harmonisation"));
    }
    let order = first.ranks.len();
    if order == 0 || reports.iter().any(|r| r.ranks.len() != order) {
        return Err(Error::Protocol("reports disagree on the number of modes".into()));
    }
    let target: Vec<usize> =
        (0..order).map(|i| reports.iter().map(|r| r.ranks[i]).min().unwrap_or(1).max(1)).collect();
    let assignments = reports
        .iter()
        .map(|r| HyperAssign { snr: r.snr, tau: r.tau, target_ranks: target.clone(), epsilon })
        .collect();
    Ok((target, assignments))
}

/// Cuts modes 2..N of a fit down to `target`, keeping the highest-energy core
/// slices of each mode in their original order. Energies are measured on the
/// incoming core for all modes at once.
pub fn truncate_to_ranks(result: &SparseTuckerResult, target: &[usize]) -> Result<SparseTuckerResult> {
    let ranks = result.ranks();
    if target.len() + 1 != ranks.len() {
        return Err(Error::Protocol(format!("{} target ranks for {} feature modes", target.len(), ranks.len() - 1)));
    }
    let mut keep: Vec<Vec<usize>> = vec![(0..ranks[0]).collect()];
    for (i, &r) in target.iter().enumerate() {
        let mode = i + 2;
        if r == 0 || r > ranks[i + 1] {
            return Err(Error::Protocol(format!("target rank {r} for mode {mode} exceeds local rank {}", ranks[i + 1])));
        }
        let energy = result.core.slice_energies(mode);
        let mut order: Vec<usize> = (0..energy.len()).collect();
        order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = order.into_iter().take(r).collect();
        kept.sort_unstable();
        keep.push(kept);
    }
    Ok(apply_selection(result, &keep))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn negate_column(m: &mut Matrix, c: usize) {
    for r in 0..m.rows() {
        m.set(r, c, -m.get(r, c));
    }
}

/// Greedy column matching: repeatedly pairs the reference column and update
/// column with the largest absolute inner product. Returns, for every
/// reference column, the matched update column.
fn greedy_match(inner: &[Vec<f64>]) -> Vec<usize> {
    let r = inner.len();
    let mut perm = vec![usize::MAX; r];
    let mut used = vec![false; r];
    for _ in 0..r {
        let mut best: Option<(usize, usize, f64)> = None;
        for (a, row) in inner.iter().enumerate() {
            if perm[a] != usize::MAX {
                continue;
            }
            for (b, v) in row.iter().enumerate() {
                if used[b] {
                    continue;
                }
                if best.is_none_or(|(_, _, bv)| v.abs() > bv) {
                    best = Some((a, b, v.abs()));
                }
            }
        }
        let (a, b, _) = best.expect("an unmatched pair remains");
        perm[a] = b;
        used[b] = true;
    }
    perm
}

/// Resolves the sign and permutation ambiguity of `update` against
/// `reference`. The represented block is unchanged.
pub fn align_block(update: &Block, reference: &Block) -> Result<Block> {
    check_same_shape(update, reference)?;
    let mut out = update.clone();
    for i in 0..out.factors.len() {
        let mode = i + 2;
        let p = &out.factors[i];
        let rf = &reference.factors[i];
        let cols_p: Vec<Vec<f64>> = (0..p.cols()).map(|c| p.col(c)).collect();
        let inner: Vec<Vec<f64>> =
            (0..rf.cols()).map(|a| cols_p.iter().map(|pc| dot(&rf.col(a), pc)).collect()).collect();
        let perm = greedy_match(&inner);
        if perm.iter().enumerate().any(|(a, &b)| a != b) {
            out.factors[i] = out.factors[i].select_columns(&perm);
            out.core = out.core.select_mode(mode, &perm)?;
            out.weight_core = out.weight_core.select_mode(mode, &perm)?;
        }
        for (a, &b) in perm.iter().enumerate() {
            if inner[a][b] < 0.0 {
                negate_column(&mut out.factors[i], a);
                out.core.negate_slice(mode, a);
                out.weight_core.negate_slice(mode, a);
            }
        }
    }
    if dot(out.q.data(), reference.q.data()) < 0.0 {
        out.q = out.q.scale(-1.0);
        out.d = -out.d;
    }
    if dot(out.weight_core.data(), reference.weight_core.data()) < 0.0 {
        out.weight_core = out.weight_core.scale(-1.0);
        out.core = out.core.scale(-1.0);
        out.d = -out.d;
    }
    Ok(out)
}

fn check_same_shape(a: &Block, b: &Block) -> Result<()> {
    let same = a.core.shape() == b.core.shape()
        && a.weight_core.shape() == b.weight_core.shape()
        && a.q.rows() == b.q.rows()
        && a.q.cols() == b.q.cols()
        && a.factors.len() == b.factors.len()
        && a.factors.iter().zip(&b.factors).all(|(x, y)| x.rows() == y.rows() && x.cols() == y.cols());
    if same {
        Ok(())
    } else {
        Err(Error::Protocol("block updates differ in shape".into()))
    }
}

/// `values[0] + Σ w_k (values[k] - values[0])`: the weighted mean written
/// relative to the first entry, so identical inputs come back unchanged.
pub(crate) fn relative_mean(values: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let base = values[0];
    let mut out = base.to_vec();
    for (v, &w) in values.iter().zip(weights).skip(1) {
        for ((o, x), b) in out.iter_mut().zip(*v).zip(base) {
            *o += w * (x - b);
        }
    }
    out
}

pub(crate) fn mean_tensor(values: &[&Tensor], weights: &[f64]) -> Tensor {
    let data: Vec<&[f64]> = values.iter().map(|t| t.data()).collect();
    Tensor::from_parts(values[0].shape().to_vec(), relative_mean(&data, weights))
}

fn mean_matrix(values: &[&Matrix], weights: &[f64]) -> Matrix {
    let data: Vec<&[f64]> = values.iter().map(|m| m.data()).collect();
    Matrix::from_parts(values[0].rows(), values[0].cols(), relative_mean(&data, weights))
}

pub(crate) fn mean_scalar(values: &[f64], weights: &[f64]) -> f64 {
    let slices: Vec<&[f64]> = values.iter().map(std::slice::from_ref).collect();
    relative_mean(&slices, weights)[0]
}

/// Sample-weighted average of aligned block updates.
///
/// Updates are aligned to the first one, averaged, then the factors are
/// re-orthonormalised (the triangular part is absorbed into both cores) and
/// `q` is rescaled to unit norm with the scale moved into `d`.
pub fn aggregate_block(updates: &[(Block, u64)]) -> Result<Block> {
    let counts: Vec<u64> = updates.iter().map(|(_, n)| *n).collect();
    let weights = aggregation_weights(&counts)?;
    let reference = &updates[0].0;
    let mut aligned = vec![reference.clone()];
    for (b, _) in &updates[1..] {
        aligned.push(align_block(b, reference)?);
    }

    let cores: Vec<&Tensor> = aligned.iter().map(|b| &b.core).collect();
    let wcores: Vec<&Tensor> = aligned.iter().map(|b| &b.weight_core).collect();
    let qs: Vec<&Matrix> = aligned.iter().map(|b| &b.q).collect();
    let ds: Vec<f64> = aligned.iter().map(|b| b.d).collect();
    let mut core = mean_tensor(&cores, &weights);
    let mut weight_core = mean_tensor(&wcores, &weights);
    let mut q = mean_matrix(&qs, &weights);
    let mut d = mean_scalar(&ds, &weights);
    let mut factors = Vec::with_capacity(reference.factors.len());
    for i in 0..reference.factors.len() {
        let ps: Vec<&Matrix> = aligned.iter().map(|b| &b.factors[i]).collect();
        factors.push(mean_matrix(&ps, &weights));
    }

    for (i, p) in factors.iter_mut().enumerate() {
        if p.orthonormality_error() <= ORTHONORMAL_TOL {
            continue;
        }
        let (qf, r) = thin_qr(p)?;
        *p = qf;
        core = mode_n_product(&core, &r, i + 2)?;
        weight_core = mode_n_product(&weight_core, &r, i + 2)?;
    }
    let qn = q.frobenius_norm();
    if qn == 0.0 {
        return Err(Error::Degenerate("averaged loading vector is zero".into()));
    }
    if (qn - 1.0).abs() > ORTHONORMAL_TOL {
        q = q.scale(1.0 / qn);
        d *= qn;
    }
    Ok(Block { core, weight_core, factors, q, d, t: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(ranks: Vec<usize>) -> AceReport {
        AceReport { attempt: 0, skip: false, snr: 10.0, tau: 95.0, bic: 0.0, ranks, e_norm: 1.0, f_norm: 1.0 }
    }

    fn sample_block() -> Block {
        let s = 0.5f64.sqrt();
        Block {
            core: Tensor::new(vec![1, 2, 2], vec![3.0, 0.5, -0.25, 1.0]).unwrap(),
            weight_core: Tensor::new(vec![1, 2, 2], vec![1.0, 0.1, 0.2, -0.3]).unwrap(),
            factors: vec![
                Matrix::new(3, 2, vec![s, 0.0, s, 0.0, 0.0, 1.0]).unwrap(),
                Matrix::new(2, 2, vec![0.6, 0.8, 0.8, -0.6]).unwrap(),
            ],
            q: Matrix::new(2, 1, vec![0.6, 0.8]).unwrap(),
            d: 2.5,
            t: None,
        }
    }

    fn assert_blocks_close(a: &Block, b: &Block, tol: f64) {
        assert!(a.core.max_abs_diff(&b.core) <= tol);
        assert!(a.weight_core.max_abs_diff(&b.weight_core) <= tol);
        for (x, y) in a.factors.iter().zip(&b.factors) {
            assert!(x.max_abs_diff(y) <= tol);
        }
        assert!(a.q.max_abs_diff(&b.q) <= tol);
        assert!((a.d - b.d).abs() <= tol);
    }

    #[test]
    fn harmonisation_takes_elementwise_minimum() {
        let (t, a) = harmonize_ranks(&[report(vec![2, 3]), report(vec![2, 2])], 1e-6).unwrap();
        assert_eq!(t, vec![2, 2]);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].target_ranks, vec![2, 2]);
        let (t, _) = harmonize_ranks(&[report(vec![4, 2])], 1e-6).unwrap();
        assert_eq!(t, vec![4, 2]);
        let (t, _) = harmonize_ranks(&[report(vec![1, 5]), report(vec![4, 1])], 1e-6).unwrap();
        assert_eq!(t, vec![1, 1]);
        assert!(harmonize_ranks(&[], 1e-6).is_err());
        assert!(harmonize_ranks(&[report(vec![1]), report(vec![1, 2])], 1e-6).is_err());
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_reference(&[(vec![1.0, -2.0], 5)]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(fedavg_reference(&[(vec![0.0, 0.0], 1), (vec![2.0, 4.0], 1)]).unwrap(), vec![1.0, 2.0]);
        let a = fedavg_reference(&[(vec![0.3, 1.0], 2), (vec![2.0, 4.0], 2)]).unwrap();
        let b = fedavg_reference(&[(vec![0.3, 1.0], 1), (vec![2.0, 4.0], 1)]).unwrap();
        assert_eq!(a, b);
        assert!(fedavg_reference(&[(vec![0.0], 1), (vec![2.0, 4.0], 1)]).is_err());
        let w = aggregation_weights(&[3, 1, 6]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(aggregation_weights(&[1, 0]).is_err());
    }

    #[test]
    fn identical_updates_aggregate_to_themselves() {
        let b = sample_block();
        let agg = aggregate_block(&[(b.clone(), 1)]).unwrap();
        assert_eq!(agg, b);
        let agg = aggregate_block(&[(b.clone(), 2), (b.clone(), 7), (b.clone(), 1)]).unwrap();
        assert_eq!(agg, b);
    }

    #[test]
    fn scalar_core_d_is_weighted_mean() {
        let mk = |d| Block {
            core: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            weight_core: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            factors: vec![Matrix::new(1, 1, vec![1.0]).unwrap()],
            q: Matrix::new(1, 1, vec![1.0]).unwrap(),
            d,
            t: None,
        };
        let agg = aggregate_block(&[(mk(0.0), 1), (mk(4.0), 3)]).unwrap();
        assert!((agg.d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flipped_column_is_undone_by_alignment() {
        let b = sample_block();
        let mut flipped = b.clone();
        negate_column(&mut flipped.factors[0], 1);
        flipped.core.negate_slice(2, 1);
        flipped.weight_core.negate_slice(2, 1);
        let agg = aggregate_block(&[(b.clone(), 1), (flipped, 1)]).unwrap();
        assert_blocks_close(&agg, &b, 1e-10);
    }

    #[test]
    fn permuted_columns_are_matched() {
        let b = sample_block();
        let mut swapped = b.clone();
        swapped.factors[1] = b.factors[1].select_columns(&[1, 0]);
        swapped.core = b.core.select_mode(3, &[1, 0]).unwrap();
        swapped.weight_core = b.weight_core.select_mode(3, &[1, 0]).unwrap();
        swapped.q = b.q.scale(-1.0);
        swapped.d = -b.d;
        let aligned = align_block(&swapped, &b).unwrap();
        assert_blocks_close(&aligned, &b, 1e-15);
    }

    #[test]
    fn truncation_keeps_high_energy_components_in_order() {
        let core = Tensor::new(vec![1, 3, 2], vec![0.1, 0.0, 5.0, 0.0, 2.0, 1.0]).unwrap();
        let fit = SparseTuckerResult {
            core,
            q: Matrix::new(1, 1, vec![1.0]).unwrap(),
            factors: vec![Matrix::identity(3), Matrix::identity(2)],
            snr: 1.0,
            tau: 90.0,
            converged: true,
            sweeps: 1,
        };
        let cut = truncate_to_ranks(&fit, &[2, 1]).unwrap();
        assert_eq!(cut.core.shape(), &[1, 2, 1]);
        // Mode 2 keeps slices 1 and 2 (energies 25, 5), mode 3 keeps slice 0.
        assert_eq!(cut.core.data(), &[5.0, 2.0]);
        assert_eq!(cut.factors[0], Matrix::identity(3).select_columns(&[1, 2]));
        assert!(truncate_to_ranks(&fit, &[4, 1]).is_err());
        assert!(truncate_to_ranks(&fit, &[1]).is_err());
        assert_eq!(truncate_to_ranks(&fit, &[3, 2]).unwrap(), fit);
    }

    proptest! {
        #[test]
        fn aggregation_preserves_orthonormality(
            noise in proptest::collection::vec(-0.2f64..0.2, 10),
            n1 in 1u64..10, n2 in 1u64..10,
        ) {
            let a = sample_block();
            let mut b = a.clone();
            let p = &a.factors[0];
            let perturbed: Vec<f64> = p.data().iter().zip(&noise).map(|(x, e)| x + e).collect();
            let (qf, _) = thin_qr(&Matrix::new(3, 2, perturbed).unwrap()).unwrap();
            b.factors[0] = qf;
            b.d += noise[7];
            let agg = aggregate_block(&[(a.clone(), n1), (b, n2)]).unwrap();
            for f in &agg.factors {
                prop_assert!(f.orthonormality_error() < 1e-10);
            }
            prop_assert!((agg.q.frobenius_norm() - 1.0).abs() < 1e-12);
        }
    }
}
