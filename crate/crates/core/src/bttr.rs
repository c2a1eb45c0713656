//! Block-term tensor regression.
//!
//! `fit` extracts blocks one at a time from the residuals `(E, F)`: each block
//! is chosen by [`ace`], projected with [`latent_projection`] and deflated out
//! of both residuals. Prediction is linear in the unfolded input:
//! `y = unfold(x, 1) * W * Z`.
//!
//! # Model file
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`. Every
//! array is written as its element count followed by the elements, and every
//! tensor or matrix writes its shape first.
//!
//! ```text
//! magic         8 bytes  "FBTTRv01"
//! input_shape   u32 array
//! responses     u32
//! block count   u32
//! per block:
//!   core          tensor (shape array, data array)
//!   weight_core   tensor
//!   factors       u32 count, then matrices (rows u32, cols u32, data array)
//!   q             matrix
//!   d             f64
//!   has_t         u8, then matrix when 1
//! W             matrix
//! Z             matrix
//! has_norm      u8, then x_mean, x_std, y_mean, y_std arrays when 1
//! has_trace     u8, then u32 count and (e, f) f64 pairs when 1
//! ```

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::metrics::{pearson_r, roc_auc};
use crate::sparse_tucker::{ace, latent_projection, HyperGrid};
use crate::tensor::{multilinear_product, unfold, vec, Matrix, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"FBTTRv01";

/// Tolerance used when comparing cross-validation scores.
pub const CV_TIE_TOL: f64 = 1e-12;

/// One extracted latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `G^(X)`, shape `1 x R_2 x ... x R_N`.
    pub core: Tensor,
    /// Core that maps the unfolded residual onto the score vector:
    /// `t = E_(1) (P_N ⊗ ... ⊗ P_2) vec(weight_core)`.
    pub weight_core: Tensor,
    /// `P^(2) .. P^(N)`, orthonormal columns.
    pub factors: Vec<Matrix>,
    /// `M x 1` unit loading vector.
    pub q: Matrix,
    pub d: f64,
    /// Training score vector; absent in models assembled from remote blocks.
    pub t: Option<Matrix>,
}

impl Block {
    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::cols).collect()
    }

    fn check(&self, input_shape: &[usize], responses: usize) -> Result<()> {
        if self.factors.len() != input_shape.len() {
            return Err(Error::shape("block factor count does not match the input order"));
        }
        let mut core_shape = vec![1];
        for (p, &extent) in self.factors.iter().zip(input_shape) {
            if p.rows() != extent {
                return Err(Error::shape(format!("factor has {} rows, expected {extent}", p.rows())));
            }
            core_shape.push(p.cols());
        }
        if self.core.shape() != core_shape.as_slice() || self.weight_core.shape() != core_shape.as_slice() {
            return Err(Error::shape(format!("block cores must have shape {core_shape:?}")));
        }
        if self.q.rows() != responses || self.q.cols() != 1 {
            return Err(Error::shape(format!("q must be {responses}x1")));
        }
        if !self.d.is_finite() {
            return Err(Error::NonFinite("block coefficient d".into()));
        }
        Ok(())
    }
}

/// Per-feature and per-response standardisation captured on training data.
///
/// Feature statistics are indexed in the memory order of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(rows: usize, cols: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(&data[r * cols..(r + 1) * cols]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / rows as f64).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(data: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let cols = mean.len();
    data.iter().enumerate().map(|(i, v)| (v - mean[i % cols]) / std[i % cols]).collect()
}

impl NormStats {
    /// Statistics of the given training rows. Constant columns get a unit
    /// standard deviation.
    pub fn from_training(x: &Tensor, y: &Matrix) -> Result<NormStats> {
        let n = x.shape()[0];
        if y.rows() != n {
            return Err(Error::shape(format!("{n} samples in x but {} rows in y", y.rows())));
        }
        let f = x.len() / n;
        let (x_mean, x_std) = column_stats(n, f, x.data());
        let (y_mean, y_std) = column_stats(n, y.cols(), y.data());
        Ok(NormStats { x_mean, x_std, y_mean, y_std })
    }

    /// Identity statistics for `features` inputs and `responses` outputs.
    pub fn identity(features: usize, responses: usize) -> NormStats {
        NormStats {
            x_mean: vec![0.0; features],
            x_std: vec![1.0; features],
            y_mean: vec![0.0; responses],
            y_std: vec![1.0; responses],
        }
    }

    pub fn apply_x(&self, x: &Tensor) -> Result<Tensor> {
        let f = x.len() / x.shape()[0];
        if f != self.x_mean.len() {
            return Err(Error::shape(format!("{f} features, statistics cover {}", self.x_mean.len())));
        }
        Tensor::new(x.shape().to_vec(), standardize(x.data(), &self.x_mean, &self.x_std))
    }

    pub fn apply_y(&self, y: &Matrix) -> Result<Matrix> {
        if y.cols() != self.y_mean.len() {
            return Err(Error::shape(format!("{} responses, statistics cover {}", y.cols(), self.y_mean.len())));
        }
        Matrix::new(y.rows(), y.cols(), standardize(y.data(), &self.y_mean, &self.y_std))
    }

    pub fn invert_y(&self, y: &Matrix) -> Result<Matrix> {
        let m = self.y_mean.len();
        if y.cols() != m {
            return Err(Error::shape(format!("{} responses, statistics cover {m}", y.cols())));
        }
        let data = y.data().iter().enumerate().map(|(i, v)| v * self.y_std[i % m] + self.y_mean[i % m]).collect();
        Matrix::new(y.rows(), m, data)
    }
}

/// Settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_blocks: usize,
    /// Extraction stops once either residual norm falls to this value.
    pub epsilon: f64,
    pub grid: HyperGrid,
    /// Keep the per-block residual norms in the model.
    pub keep_trace: bool,
}

impl FitConfig {
    pub fn new(max_blocks: usize, epsilon: f64, grid: HyperGrid) -> Result<FitConfig> {
        let cfg = FitConfig { max_blocks, epsilon, grid, keep_trace: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_blocks == 0 {
            return Err(Error::invalid("max_blocks must be at least 1"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_blocks: 10, epsilon: 1e-8, grid: HyperGrid::default(), keep_trace: true }
    }
}

/// Outcome of projecting residuals onto one block and deflating them.
#[derive(Debug, Clone)]
pub struct Deflation {
    pub block: Block,
    pub e_next: Tensor,
    pub f_next: Matrix,
}

/// Projects `(e, f)` onto the block given by `factors`, `weight_core` and `q`.
///
/// The score is recomputed from `e`, so the returned block carries a weight
/// core rescaled to reproduce the unit-norm score exactly. `d = (f q)^T t`.
pub fn project_block(e: &Tensor, f: &Matrix, factors: &[Matrix], weight_core: &Tensor, q: &Matrix) -> Result<Block> {
    if f.rows() != e.shape()[0] {
        return Err(Error::shape(format!("{} samples in E but {} rows in F", e.shape()[0], f.rows())));
    }
    if q.rows() != f.cols() || q.cols() != 1 {
        return Err(Error::shape(format!("q must be {}x1", f.cols())));
    }
    let proj = latent_projection(e, factors, weight_core)?;
    let weight_core = weight_core.scale(1.0 / proj.scale);
    let t = proj.t;
    let u = f.matmul(q)?;
    let d: f64 = u.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
    Ok(Block { core: proj.core_x, weight_core, factors: factors.to_vec(), q: q.clone(), d, t: Some(t) })
}

/// [`project_block`] followed by removal of the block from both residuals:
/// `E - [[G; t, P_2, ..., P_N]]` and `F - d t q^T`.
pub fn deflate(e: &Tensor, f: &Matrix, factors: &[Matrix], weight_core: &Tensor, q: &Matrix) -> Result<Deflation> {
    let block = project_block(e, f, factors, weight_core, q)?;
    let t = block.t.as_ref().expect("projection sets t");

    let mut ops: Vec<(usize, &Matrix)> = vec![(1, t)];
    ops.extend(factors.iter().enumerate().map(|(i, p)| (i + 2, p)));
    let explained = multilinear_product(&block.core, &ops)?;
    let e_next = e.sub(&explained)?;

    let m = f.cols();
    let mut f_next = f.clone();
    for (r, &tr) in t.data().iter().enumerate() {
        for c in 0..m {
            f_next.set(r, c, f.get(r, c) - block.d * tr * q.get(c, 0));
        }
    }
    Ok(Deflation { block, e_next, f_next })
}

/// `(P_N ⊗ ... ⊗ P_2) vec(core)`, computed without the Kronecker product.
fn expand(core: &Tensor, factors: &[Matrix]) -> Result<Vec<f64>> {
    let ops: Vec<(usize, &Matrix)> = factors.iter().enumerate().map(|(i, p)| (i + 2, p)).collect();
    Ok(vec(&multilinear_product(core, &ops)?))
}

/// Builds `W` and `Z` from an ordered block list.
///
/// `w_k` is the expanded weight core of block `k` corrected for the deflation
/// of earlier blocks, so that `unfold(x, 1) w_k` reproduces `t_k` on the data
/// the blocks were extracted from. For the first block this is exactly
/// `(P_N ⊗ ... ⊗ P_2) vec(weight_core)`. `z_k = d_k q_k^T`.
pub fn assemble(blocks: &[Block], input_shape: &[usize], responses: usize) -> Result<(Matrix, Matrix)> {
    if blocks.is_empty() {
        return Err(Error::invalid("a model needs at least one block"));
    }
    let features: usize = input_shape.iter().product();
    let k = blocks.len();
    let mut ws: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut ps: Vec<Vec<f64>> = Vec::with_capacity(k);
    for b in blocks {
        b.check(input_shape, responses)?;
        let v = expand(&b.weight_core, &b.factors)?;
        let mut w = v.clone();
        for (wj, pj) in ws.iter().zip(&ps) {
            let c: f64 = pj.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, wji) in w.iter_mut().zip(wj) {
                *wi -= c * wji;
            }
        }
        ws.push(w);
        ps.push(expand(&b.core, &b.factors)?);
    }
    let mut w = Matrix::zeros(features, k);
    for (j, col) in ws.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            w.set(i, j, v);
        }
    }
    let mut z = Matrix::zeros(k, responses);
    for (j, b) in blocks.iter().enumerate() {
        for c in 0..responses {
            z.set(j, c, b.d * b.q.get(c, 0));
        }
    }
    Ok((w, z))
}

/// A fitted regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct BttrModel {
    blocks: Vec<Block>,
    w: Matrix,
    z: Matrix,
    input_shape: Vec<usize>,
    responses: usize,
    normalization: Option<NormStats>,
    trace: Option<Vec<(f64, f64)>>,
}

impl BttrModel {
    pub fn from_blocks(blocks: Vec<Block>, input_shape: Vec<usize>, responses: usize) -> Result<BttrModel> {
        let (w, z) = assemble(&blocks, &input_shape, responses)?;
        Ok(BttrModel { blocks, w, z, input_shape, responses, normalization: None, trace: None })
    }

    pub fn with_normalization(mut self, stats: NormStats) -> Result<BttrModel> {
        let features: usize = self.input_shape.iter().product();
        if stats.x_mean.len() != features
            || stats.x_std.len() != features
            || stats.y_mean.len() != self.responses
            || stats.y_std.len() != self.responses
        {
            return Err(Error::shape("normalization statistics do not match the model"));
        }
        self.normalization = Some(stats);
        Ok(self)
    }

    pub fn with_trace(mut self, trace: Vec<(f64, f64)>) -> BttrModel {
        self.trace = Some(trace);
        self
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn normalization(&self) -> Option<&NormStats> {
        self.normalization.as_ref()
    }

    /// The model made of the first `k` blocks (at most all of them).
    pub fn truncated(&self, k: usize) -> Result<BttrModel> {
        if k == 0 {
            return Err(Error::invalid("cannot truncate to 0 blocks"));
        }
        let k = k.min(self.blocks.len());
        let keep: Vec<usize> = (0..k).collect();
        Ok(BttrModel {
            blocks: self.blocks[..k].to_vec(),
            w: self.w.select_columns(&keep),
            z: self.z.select_rows(&keep),
            input_shape: self.input_shape.clone(),
            responses: self.responses,
            normalization: self.normalization.clone(),
            trace: self.trace.as_ref().map(|t| t[..(k + 1).min(t.len())].to_vec()),
        })
    }

    /// `unfold(x, 1) W Z`, with the stored normalisation applied to `x` and
    /// undone on the output.
    pub fn predict(&self, x: &Tensor) -> Result<Matrix> {
        if x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "input has shape {:?}, model expects samples x {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let normalized;
        let x = match &self.normalization {
            Some(stats) => {
                normalized = stats.apply_x(x)?;
                &normalized
            }
            None => x,
        };
        let scores = unfold(x, 1)?.matmul(&self.w)?;
        let y = scores.matmul(&self.z)?;
        match &self.normalization {
            Some(stats) => stats.invert_y(&y),
            None => Ok(y),
        }
    }

    /// `(‖E_k‖, ‖F_k‖)` before the first block and after every block.
    pub fn residual_trace(&self) -> Result<&[(f64, f64)]> {
        self.trace
            .as_deref()
            .ok_or_else(|| Error::invalid("model was fitted without keeping the residual trace"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32s(&self.input_shape);
        w.len_u32(self.responses);
        w.len_u32(self.blocks.len());
        for b in &self.blocks {
            w.tensor(&b.core);
            w.tensor(&b.weight_core);
            w.matrices(&b.factors);
            w.matrix(&b.q);
            w.f64(b.d);
            match &b.t {
                Some(t) => {
                    w.u8(1);
                    w.matrix(t);
                }
                None => w.u8(0),
            }
        }
        w.matrix(&self.w);
        w.matrix(&self.z);
        match &self.normalization {
            Some(s) => {
                w.u8(1);
                w.f64s(&s.x_mean);
                w.f64s(&s.x_std);
                w.f64s(&s.y_mean);
                w.f64s(&s.y_std);
            }
            None => w.u8(0),
        }
        match &self.trace {
            Some(t) => {
                w.u8(1);
                w.len_u32(t.len());
                for &(e, f) in t {
                    w.f64(e);
                    w.f64(f);
                }
            }
            None => w.u8(0),
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BttrModel> {
        let mut r = ByteReader::new(bytes, "model");
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let input_shape = r.u32s()?;
        let responses = r.u32()? as usize;
        let k = r.count()?;
        let mut blocks = Vec::with_capacity(k);
        for _ in 0..k {
            let core = r.tensor()?;
            let weight_core = r.tensor()?;
            let factors = r.matrices()?;
            let q = r.matrix()?;
            let d = r.f64()?;
            let t = match r.u8()? {
                0 => None,
                1 => Some(r.matrix()?),
                v => return Err(Error::ModelFormat(format!("bad flag {v}"))),
            };
            blocks.push(Block { core, weight_core, factors, q, d, t });
        }
        let w = r.matrix()?;
        let z = r.matrix()?;
        let normalization = match r.u8()? {
            0 => None,
            1 => Some(NormStats { x_mean: r.f64s()?, x_std: r.f64s()?, y_mean: r.f64s()?, y_std: r.f64s()? }),
            v => return Err(Error::ModelFormat(format!("bad flag {v}"))),
        };
        let trace = match r.u8()? {
            0 => None,
            1 => {
                let n = r.count()?;
                Some((0..n).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?)
            }
            v => return Err(Error::ModelFormat(format!("bad flag {v}"))),
        };
        r.finish()?;

        let features: usize = input_shape.iter().product();
        if k == 0 || w.rows() != features || w.cols() != k || z.rows() != k || z.cols() != responses {
            return Err(Error::ModelFormat("W/Z shapes disagree with the header".into()));
        }
        for b in &blocks {
            b.check(&input_shape, responses).map_err(|e| Error::ModelFormat(e.to_string()))?;
        }
        let model = BttrModel { blocks, w, z, input_shape, responses, normalization: None, trace };
        match normalization {
            Some(s) => model.with_normalization(s).map_err(|e| Error::ModelFormat(e.to_string())),
            None => Ok(model),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BttrModel> {
        BttrModel::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn check_training_pair(x: &Tensor, y: &Matrix) -> Result<()> {
    if x.order() < 2 {
        return Err(Error::shape("x must have a sample mode and at least one feature mode"));
    }
    if x.shape()[0] != y.rows() {
        return Err(Error::shape(format!("{} samples in x but {} rows in y", x.shape()[0], y.rows())));
    }
    if y.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("y".into()));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x".into()));
    }
    Ok(())
}

/// Fits a model to `x` (samples first) and `y` (samples x responses).
///
/// At least one block is always extracted. Before every later block the loop
/// stops if either residual norm is at most `epsilon`; an extraction failure
/// on a later block ends the model at the blocks found so far.
pub fn fit(x: &Tensor, y: &Matrix, cfg: &FitConfig) -> Result<BttrModel> {
    cfg.validate()?;
    check_training_pair(x, y)?;
    let mut e = x.clone();
    let mut f = y.clone();
    let mut blocks = Vec::new();
    let mut trace = vec![(e.frobenius_norm(), f.frobenius_norm())];
    for k in 0..cfg.max_blocks {
        let (en, fnorm) = *trace.last().expect("trace is never empty");
        if k > 0 && (en <= cfg.epsilon || fnorm <= cfg.epsilon) {
            break;
        }
        let step = ace(&e, &f, &cfg.grid).and_then(|a| deflate(&e, &f, &a.factors, &a.weight_core, &a.q));
        let step = match step {
            Ok(s) => s,
            Err(err) if k == 0 => return Err(err),
            Err(_) => break,
        };
        blocks.push(step.block);
        e = step.e_next;
        f = step.f_next;
        trace.push((e.frobenius_norm(), f.frobenius_norm()));
    }
    let model = BttrModel::from_blocks(blocks, x.shape()[1..].to_vec(), y.cols())?;
    Ok(if cfg.keep_trace { model.with_trace(trace) } else { model })
}

/// Score used to compare numbers of blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvMetric {
    /// Mean Pearson correlation over response columns.
    Pearson,
    /// ROC-AUC of the first response column against 0/1 labels.
    RocAuc,
}

impl CvMetric {
    /// Failed evaluations (constant predictions, single-class folds) score
    /// as an uninformative model.
    pub fn score(self, pred: &Matrix, truth: &Matrix) -> f64 {
        match self {
            CvMetric::Pearson => {
                let m = truth.cols();
                (0..m).map(|c| pearson_r(&pred.col(c), &truth.col(c)).unwrap_or(0.0)).sum::<f64>() / m as f64
            }
            CvMetric::RocAuc => roc_auc(&pred.col(0), &truth.col(0)).unwrap_or(0.5),
        }
    }
}

/// Chooses the number of blocks by contiguous-fold cross-validation on mean
/// validation Pearson correlation.
pub fn select_k_cv(x: &Tensor, y: &Matrix, cfg: &FitConfig, folds: usize) -> Result<usize> {
    select_k_cv_with(x, y, cfg, folds, CvMetric::Pearson)
}

/// [`select_k_cv`] with an explicit metric. Ties within [`CV_TIE_TOL`] go to
/// the smaller block count.
pub fn select_k_cv_with(x: &Tensor, y: &Matrix, cfg: &FitConfig, folds: usize, metric: CvMetric) -> Result<usize> {
    cfg.validate()?;
    check_training_pair(x, y)?;
    let n = x.shape()[0];
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if n < folds {
        return Err(Error::invalid(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut totals = vec![0.0; cfg.max_blocks];
    for fold in 0..folds {
        let (lo, hi) = (fold * n / folds, (fold + 1) * n / folds);
        let val: Vec<usize> = (lo..hi).collect();
        let train: Vec<usize> = (0..lo).chain(hi..n).collect();
        let model = fit(&x.select_mode1(&train)?, &y.select_rows(&train), cfg)?;
        let xv = x.select_mode1(&val)?;
        let yv = y.select_rows(&val);
        for (k, total) in totals.iter_mut().enumerate() {
            let pred = model.truncated(k + 1)?.predict(&xv)?;
            *total += metric.score(&pred, &yv);
        }
    }
    let mut best = 0;
    for k in 1..totals.len() {
        if totals[k] / folds as f64 > totals[best] / folds as f64 + CV_TIE_TOL {
            best = k;
        }
    }
    Ok(best + 1)
}
