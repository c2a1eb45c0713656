//! Sparse Tucker decomposition of the predictor/response cross-covariance
//! tensor and automatic component extraction (ACE).
//!
//! The decomposition starts from a HOOI fit of `C = <X, Y>_(1)` and then
//! alternates three steps per sweep: one HOOI refinement pass over the
//! factors, soft-thresholding of the projected core with a shrinkage level
//! chosen to hit a target reconstruction SNR, and removal of components whose
//! share of the core's absolute mass is below `(100 - tau) / 100`.
//!
//! ACE runs that decomposition over a grid of (SNR, tau) pairs, scores every
//! cell with a BIC and keeps the best block.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    cross_covariance, frobenius_norm, leading_left_singular_vectors, multilinear_product,
    unfold, vec, Matrix, Tensor,
};

/// Per-mode cap on the initial HOOI rank.
pub const INITIAL_RANK_CAP: usize = 10;
/// Residual floor inside [`bic_score`].
pub const BIC_RESIDUAL_FLOOR: f64 = 1e-12;

const HOOI_TOL: f64 = 1e-8;
const HOOI_MAX_SWEEPS: usize = 100;
const SPARSE_TOL: f64 = 1e-6;
const SPARSE_MAX_SWEEPS: usize = 200;
const SNR_TOL_DB: f64 = 0.1;
const BISECTION_MAX_ITERS: usize = 60;

/// Search grid for ACE. Both axes are non-empty and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    snr_values: Vec<f64>,
    tau_values: Vec<f64>,
}

impl HyperGrid {
    pub fn new(snr_values: Vec<f64>, tau_values: Vec<f64>) -> Result<Self> {
        check_axis("snr", &snr_values)?;
        check_axis("tau", &tau_values)?;
        if snr_values.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("snr grid values must be positive"));
        }
        if tau_values.iter().any(|&t| !(0.0..=100.0).contains(&t)) {
            return Err(Error::invalid("tau grid values must lie in [0, 100]"));
        }
        Ok(HyperGrid { snr_values, tau_values })
    }

    /// A grid with a single (SNR, tau) cell.
    pub fn single(snr: f64, tau: f64) -> Result<Self> {
        HyperGrid::new(vec![snr], vec![tau])
    }

    pub fn snr_values(&self) -> &[f64] {
        &self.snr_values
    }

    pub fn tau_values(&self) -> &[f64] {
        &self.tau_values
    }

    pub fn cells(&self) -> usize {
        self.snr_values.len() * self.tau_values.len()
    }
}

impl Default for HyperGrid {
    /// SNR 1..=50 dB and tau 90..=100, both in unit steps.
    fn default() -> Self {
        HyperGrid {
            snr_values: (1..=50).map(f64::from).collect(),
            tau_values: (90..=100).map(f64::from).collect(),
        }
    }
}

fn check_axis(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{name} grid is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} grid")));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

/// Sparse Tucker fit `C ≈ G x_1 q x_2 P2 ... x_N PN`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTuckerResult {
    /// Core tensor, shape `R_1 x R_2 x ... x R_N`.
    pub core: Tensor,
    /// Response-mode loadings, `M x R_1`.
    pub q: Matrix,
    /// Factor matrices for modes 2..N, each `I_n x R_n`.
    pub factors: Vec<Matrix>,
    pub snr: f64,
    pub tau: f64,
    pub converged: bool,
    pub sweeps: usize,
}

impl SparseTuckerResult {
    /// Multilinear ranks for every mode, response mode first.
    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut ops: Vec<(usize, &Matrix)> = vec![(1, &self.q)];
        ops.extend(self.factors.iter().enumerate().map(|(i, p)| (i + 2, p)));
        multilinear_product(&self.core, &ops)
    }

    fn from_all_factors(core: Tensor, mut all: Vec<Matrix>, snr: f64, tau: f64) -> Self {
        let q = all.remove(0);
        SparseTuckerResult { core, q, factors: all, snr, tau, converged: true, sweeps: 0 }
    }

    fn all_factors(&self) -> Vec<Matrix> {
        std::iter::once(self.q.clone()).chain(self.factors.iter().cloned()).collect()
    }
}

/// Initial ranks for a cross-covariance tensor of the given shape: one
/// response component, `min(I_n, 10)` elsewhere, then reduced until every
/// rank is at most the product of the others.
pub fn initial_ranks(shape: &[usize]) -> Vec<usize> {
    let mut ranks: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(n, &ext)| if n == 0 { 1 } else { ext.min(INITIAL_RANK_CAP) })
        .collect();
    make_admissible(&mut ranks);
    ranks
}

fn make_admissible(ranks: &mut [usize]) {
    if ranks.len() < 2 {
        return;
    }
    loop {
        let mut changed = false;
        for n in 0..ranks.len() {
            let others: usize = ranks
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != n)
                .map(|(_, &r)| r)
                .product();
            if ranks[n] > others {
                ranks[n] = others;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

fn transposes(factors: &[Matrix]) -> Vec<Matrix> {
    factors.iter().map(Matrix::transpose).collect()
}

/// `c` projected onto every factor except (optionally) mode `skip` (0-based).
fn project(c: &Tensor, factors_t: &[Matrix], skip: Option<usize>) -> Result<Tensor> {
    let ops: Vec<(usize, &Matrix)> = factors_t
        .iter()
        .enumerate()
        .filter(|&(n, _)| Some(n) != skip)
        .map(|(n, f)| (n + 1, f))
        .collect();
    multilinear_product(c, &ops)
}

/// One ALS pass: each factor becomes the leading subspace of `c` projected
/// on the other factors.
fn hooi_sweep(c: &Tensor, factors: &mut [Matrix], ranks: &[usize]) -> Result<()> {
    for n in 0..factors.len() {
        let ft = transposes(factors);
        let partial = project(c, &ft, Some(n))?;
        factors[n] = leading_left_singular_vectors(&unfold(&partial, n + 1)?, ranks[n])?;
    }
    Ok(())
}

/// HOOI (higher-order orthogonal iteration) Tucker fit of `c` at `max_ranks`.
///
/// Factors start from a truncated HOSVD and are refined until the change of
/// the core norm relative to `‖c‖` drops below 1e-8, or 100 sweeps. The
/// result is unthresholded (`snr = inf`) and unpruned (`tau = 100`).
pub fn hooi_init(c: &Tensor, max_ranks: &[usize]) -> Result<SparseTuckerResult> {
    if max_ranks.len() != c.order() {
        return Err(Error::shape(format!(
            "{} ranks for an order-{} tensor",
            max_ranks.len(),
            c.order()
        )));
    }
    if c.order() < 2 {
        return Err(Error::shape("Tucker fit needs an order-2 tensor or higher"));
    }
    for (n, (&r, &ext)) in max_ranks.iter().zip(c.shape()).enumerate() {
        if ext == 1 && r > 1 {
            return Err(Error::Degenerate(format!(
                "mode {} has extent 1 but rank {r} was requested",
                n + 1
            )));
        }
        if r == 0 || r > ext {
            return Err(Error::invalid(format!(
                "rank {r} is not in 1..={ext} for mode {}",
                n + 1
            )));
        }
    }
    let mut admissible = max_ranks.to_vec();
    make_admissible(&mut admissible);
    if admissible != max_ranks {
        return Err(Error::invalid(format!(
            "ranks {max_ranks:?} are not a valid multilinear rank (each must not exceed the product of the others)"
        )));
    }
    let c_norm = frobenius_norm(c);
    if !c_norm.is_finite() {
        return Err(Error::NonFinite("cross-covariance tensor".into()));
    }
    if c_norm == 0.0 {
        return Err(Error::Degenerate("cannot decompose a zero tensor".into()));
    }

    let mut factors = Vec::with_capacity(c.order());
    for (n, &r) in max_ranks.iter().enumerate() {
        factors.push(leading_left_singular_vectors(&unfold(c, n + 1)?, r)?);
    }
    let mut core = project(c, &transposes(&factors), None)?;
    let mut prev_norm = frobenius_norm(&core);
    for _ in 0..HOOI_MAX_SWEEPS {
        hooi_sweep(c, &mut factors, max_ranks)?;
        core = project(c, &transposes(&factors), None)?;
        let norm = frobenius_norm(&core);
        let change = (norm - prev_norm).abs() / c_norm;
        prev_norm = norm;
        if change < HOOI_TOL {
            break;
        }
    }
    Ok(SparseTuckerResult::from_all_factors(core, factors, f64::INFINITY, 100.0))
}

/// `sgn(g) * max(|g| - lambda, 0)` elementwise.
pub fn soft_threshold(core: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("shrinkage must be non-negative, got {lambda}")));
    }
    let data = core
        .data()
        .iter()
        .map(|&g| g.signum() * (g.abs() - lambda).max(0.0))
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect();
    Ok(Tensor::from_parts(core.shape().to_vec(), data))
}

/// Reconstruction SNR (dB) after shrinking the core by `lambda`.
///
/// With orthonormal factors and `core` the projection of `c`, the squared
/// residual splits into the part of `c` outside the factor subspace
/// (`‖c‖² − ‖core‖²`) plus the shrinkage loss `Σ min(|g|, λ)²`.
fn snr_after_shrinkage(c_sq: f64, outside_sq: f64, core: &[f64], lambda: f64) -> f64 {
    let loss: f64 = core.iter().map(|g| g.abs().min(lambda).powi(2)).sum();
    let resid = outside_sq + loss;
    if resid <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (c_sq / resid).log10()
    }
}

/// Shrinkage level whose reconstruction SNR is within 0.1 dB of `target_snr`.
///
/// `core` must be the projection of `c` onto orthonormal factors. Bisection
/// runs over `[0, max|core|]` (at most 60 steps); if the unshrunk core already
/// sits at or below the target (within tolerance) the answer is 0.
pub fn lambda_from_snr(c: &Tensor, core: &Tensor, target_snr: f64) -> Result<f64> {
    if !target_snr.is_finite() || target_snr <= 0.0 {
        if target_snr == f64::INFINITY {
            return Ok(0.0);
        }
        return Err(Error::invalid(format!("target SNR must be positive, got {target_snr}")));
    }
    let c_sq: f64 = c.data().iter().map(|v| v * v).sum();
    let core_sq: f64 = core.data().iter().map(|v| v * v).sum();
    if !c_sq.is_finite() || !core_sq.is_finite() {
        return Err(Error::NonFinite("lambda search inputs".into()));
    }
    // ‖c‖² − ‖core‖² is only known to about ε‖c‖², which caps the SNR that
    // can be resolved near 156 dB.
    let outside_sq = (c_sq - core_sq).max(c_sq * f64::EPSILON);
    let g = core.data();
    let snr = |lambda: f64| snr_after_shrinkage(c_sq, outside_sq, g, lambda);

    if snr(0.0) <= target_snr + SNR_TOL_DB {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let s = snr(mid);
        if (s - target_snr).abs() <= SNR_TOL_DB {
            return Ok(mid);
        }
        if s > target_snr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Drops components that carry at most `(100 - tau)/100` of the core's
/// absolute mass along their mode.
///
/// Shares are computed for every mode on the incoming core; the
/// highest-share component of each mode always survives. `tau` is clamped to
/// `[0, 100]`.
pub fn prune(result: &SparseTuckerResult, tau: f64) -> SparseTuckerResult {
    let tau = tau.clamp(0.0, 100.0);
    let threshold = (100.0 - tau) / 100.0;
    let core = &result.core;
    let keep: Vec<Vec<usize>> = (1..=core.order())
        .map(|mode| {
            let sums = core.slice_abs_sums(mode);
            let total: f64 = sums.iter().sum();
            let mut kept: Vec<usize> = if total > 0.0 {
                (0..sums.len()).filter(|&r| sums[r] / total > threshold).collect()
            } else {
                Vec::new()
            };
            if kept.is_empty() {
                kept.push(argmax_first(&sums));
            }
            kept
        })
        .collect();
    apply_selection(result, &keep)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Keeps the listed components (0-based, per mode) of core and factors.
pub(crate) fn apply_selection(result: &SparseTuckerResult, keep: &[Vec<usize>]) -> SparseTuckerResult {
    let mut core = result.core.clone();
    let mut all = result.all_factors();
    for (n, kept) in keep.iter().enumerate() {
        if kept.len() == core.shape()[n] && kept.iter().enumerate().all(|(i, &k)| i == k) {
            continue;
        }
        core = core.select_mode(n + 1, kept).expect("indices come from the core shape");
        all[n] = all[n].select_columns(kept);
    }
    let mut out = SparseTuckerResult::from_all_factors(core, all, result.snr, result.tau);
    out.converged = result.converged;
    out.sweeps = result.sweeps;
    out
}

/// Trims ranks that exceed the product of the other ranks, dropping the
/// lowest-mass components first.
fn trim_to_admissible(result: SparseTuckerResult) -> SparseTuckerResult {
    let ranks = result.ranks();
    let mut target = ranks.clone();
    make_admissible(&mut target);
    if target == ranks {
        return result;
    }
    let keep: Vec<Vec<usize>> = (0..ranks.len())
        .map(|n| {
            let sums = result.core.slice_abs_sums(n + 1);
            let mut order: Vec<usize> = (0..sums.len()).collect();
            order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
            let mut kept: Vec<usize> = order.into_iter().take(target[n]).collect();
            kept.sort_unstable();
            kept
        })
        .collect();
    apply_selection(&result, &keep)
}

/// Sparse Tucker decomposition of `<x, y>_(1)` at a fixed (SNR, tau).
pub fn f_mpstd(x: &Tensor, y: &Matrix, snr: f64, tau: f64) -> Result<SparseTuckerResult> {
    let c = cross_covariance(x, y)?;
    let init = hooi_init(&c, &initial_ranks(c.shape()))?;
    refine(&c, &init, snr, tau)
}

/// The sweep loop of [`f_mpstd`], starting from a HOOI fit of `c`.
pub fn refine(c: &Tensor, init: &SparseTuckerResult, snr: f64, tau: f64) -> Result<SparseTuckerResult> {
    if !(0.0..=100.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 100], got {tau}")));
    }
    let mut factors = init.all_factors();
    let mut prev: Option<Tensor> = None;
    let mut converged = false;
    let mut sweeps = 0;
    let mut current = init.clone();

    while sweeps < SPARSE_MAX_SWEEPS {
        let ranks: Vec<usize> = factors.iter().map(Matrix::cols).collect();
        if sweeps > 0 {
            hooi_sweep(c, &mut factors, &ranks)?;
        }
        let core = project(c, &transposes(&factors), None)?;
        let lambda = lambda_from_snr(c, &core, snr)?;
        let shrunk = soft_threshold(&core, lambda)?;
        let candidate = SparseTuckerResult::from_all_factors(shrunk, factors.clone(), snr, tau);
        let pruned = trim_to_admissible(prune(&candidate, tau));
        sweeps += 1;

        let done = match &prev {
            Some(p) if p.shape() == pruned.core.shape() => {
                let scale = frobenius_norm(p);
                let change = frobenius_norm(&pruned.core.sub(p)?);
                change <= SPARSE_TOL * scale || (scale == 0.0 && change == 0.0)
            }
            _ => false,
        };
        factors = pruned.all_factors();
        prev = Some(pruned.core.clone());
        current = pruned;
        if done {
            converged = true;
            break;
        }
    }
    current.converged = converged;
    current.sweeps = sweeps;
    current.snr = snr;
    current.tau = tau;
    Ok(current)
}

/// BIC of a sparse Tucker fit of `c`:
/// `ln(max(‖c − [[G; q, P]]‖, 1e-12) / s) + ln(s)/s · DF`, with `s` the number
/// of core entries and `DF` the number of non-zero core entries.
pub fn bic_score(c: &Tensor, result: &SparseTuckerResult) -> f64 {
    let recon = match result.reconstruct() {
        Ok(r) if r.shape() == c.shape() => r,
        _ => return f64::INFINITY,
    };
    let resid = frobenius_norm(&c.sub(&recon).expect("shapes checked"));
    let s = result.core.len() as f64;
    let df = result.core.data().iter().filter(|&&g| g != 0.0).count() as f64;
    bic_from_parts(resid, s, df)
}

pub(crate) fn bic_from_parts(resid: f64, s: f64, df: f64) -> f64 {
    (resid.max(BIC_RESIDUAL_FLOOR) / s).ln() + s.ln() / s * df
}

/// Unit score vector and predictor core for a set of mode-2..N factors.
#[derive(Debug, Clone)]
pub struct LatentProjection {
    /// `I_1 x 1`, unit Frobenius norm.
    pub t: Matrix,
    /// `x x_1 t^T x_2 P2^T ... x_N PN^T`, leading extent 1.
    pub core_x: Tensor,
    /// Norm of the unnormalised score vector.
    pub scale: f64,
}

/// Computes `t = (x x_2 P2^T ... x_N PN^T)_(1) vec(weight)`, normalises it and
/// projects `x` onto `(t, P2, ..., PN)`.
pub fn latent_projection(x: &Tensor, factors: &[Matrix], weight: &Tensor) -> Result<LatentProjection> {
    if factors.len() + 1 != x.order() {
        return Err(Error::shape(format!(
            "{} factors for an order-{} tensor",
            factors.len(),
            x.order()
        )));
    }
    if weight.shape()[0] != 1 {
        return Err(Error::shape("weight core must have a leading extent of 1"));
    }
    let ft = transposes(factors);
    let ops: Vec<(usize, &Matrix)> = ft.iter().enumerate().map(|(i, f)| (i + 2, f)).collect();
    let reduced = multilinear_product(x, &ops)?;
    if reduced.shape()[1..] != weight.shape()[1..] {
        return Err(Error::shape(format!(
            "weight core {:?} does not match projected shape {:?}",
            weight.shape(),
            reduced.shape()
        )));
    }
    let a = unfold(&reduced, 1)?;
    let w = vec(weight);
    let raw: Vec<f64> = (0..a.rows())
        .map(|r| a.row(r).iter().zip(&w).map(|(p, q)| p * q).sum())
        .collect();
    let scale = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !scale.is_finite() {
        return Err(Error::NonFinite("score vector".into()));
    }
    if scale == 0.0 {
        return Err(Error::Degenerate("score vector is zero".into()));
    }
    let t = Matrix::from_parts(raw.len(), 1, raw.iter().map(|v| v / scale).collect());
    let core_x = crate::tensor::mode_n_product(&reduced, &t.transpose(), 1)?;
    Ok(LatentProjection { t, core_x, scale })
}

/// Output of automatic component extraction.
#[derive(Debug, Clone)]
pub struct AceResult {
    /// `G^(X)`, shape `1 x R_2 x ... x R_N`.
    pub block_core: Tensor,
    /// Sparse core of the cross-covariance fit divided by the norm of the raw
    /// score vector, so that `x_(1) (PN ⊗ ... ⊗ P2) vec(weight_core) = t`.
    pub weight_core: Tensor,
    pub q: Matrix,
    pub t: Matrix,
    pub factors: Vec<Matrix>,
    pub snr_star: f64,
    pub tau_star: f64,
    pub bic: f64,
    /// The selected sparse Tucker fit of the cross-covariance.
    pub sparse: SparseTuckerResult,
}

impl AceResult {
    /// Mode-2..N ranks of the extracted block.
    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::cols).collect()
    }
}

/// Index of the smallest finite score; the earliest wins ties.
fn argmin_first(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if v.is_nan() {
                continue;
            }
            match best {
                Some((_, b)) if v >= b => {}
                _ => best = Some((i, v)),
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Extracts one latent block of `x` maximally correlated with `y`.
///
/// For every SNR the tau with the lowest BIC is kept, then the SNR with the
/// lowest of those BICs; ties go to the smaller SNR and then the smaller tau.
pub fn ace(x: &Tensor, y: &Matrix, grid: &HyperGrid) -> Result<AceResult> {
    let c = cross_covariance(x, y)?;
    let init = hooi_init(&c, &initial_ranks(c.shape()))
        .map_err(|e| Error::AceFailed(format!("initialisation failed: {e}")))?;

    let snrs = grid.snr_values();
    let taus = grid.tau_values();
    let cells: Vec<(usize, usize)> =
        (0..snrs.len()).flat_map(|i| (0..taus.len()).map(move |j| (i, j))).collect();
    let fits: Vec<Option<(SparseTuckerResult, f64)>> = cells
        .par_iter()
        .map(|&(i, j)| {
            refine(&c, &init, snrs[i], taus[j]).ok().map(|r| {
                let bic = bic_score(&c, &r);
                (r, bic)
            })
        })
        .collect();

    let mut per_snr: Vec<Option<f64>> = Vec::with_capacity(snrs.len());
    let mut tau_choice: Vec<usize> = Vec::with_capacity(snrs.len());
    for i in 0..snrs.len() {
        let row: Vec<Option<f64>> = (0..taus.len())
            .map(|j| fits[i * taus.len() + j].as_ref().map(|(_, b)| *b))
            .collect();
        match argmin_first(&row) {
            Some(j) => {
                per_snr.push(row[j]);
                tau_choice.push(j);
            }
            None => {
                per_snr.push(None);
                tau_choice.push(0);
            }
        }
    }
    let i_star = argmin_first(&per_snr)
        .ok_or_else(|| Error::AceFailed("no grid cell produced a decomposition".into()))?;
    let j_star = tau_choice[i_star];
    let (sparse, bic) = fits[i_star * taus.len() + j_star].clone().expect("selected cell exists");

    let proj = latent_projection(x, &sparse.factors, &sparse.core)
        .map_err(|e| Error::AceFailed(format!("score vector: {e}")))?;
    let weight_core = sparse.core.scale(1.0 / proj.scale);
    Ok(AceResult {
        block_core: proj.core_x,
        weight_core,
        q: sparse.q.clone(),
        t: proj.t,
        factors: sparse.factors.clone(),
        snr_star: snrs[i_star],
        tau_star: taus[j_star],
        bic,
        sparse,
    })
}
