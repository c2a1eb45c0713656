use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Task};
use crate::error::{Error, Result};
use crate::tensor::{multilinear_product, thin_qr, Matrix, Tensor};

/// Parameters of a planted-block synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Full shape, samples first.
    pub shape: Vec<usize>,
    pub n_blocks: usize,
    /// Noise level in dB; `None` is noiseless.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
    /// Multilinear rank of every feature mode in every block.
    pub block_rank: usize,
    pub responses: usize,
    /// `Binary` thresholds the first response at zero into 0/1 labels.
    pub task: Task,
}

impl SyntheticSpec {
    pub fn new(shape: Vec<usize>, n_blocks: usize, noise_snr_db: Option<f64>, seed: u64) -> SyntheticSpec {
        SyntheticSpec { shape, n_blocks, noise_snr_db, seed, block_rank: 1, responses: 1, task: Task::Regression }
    }
}

/// The planted structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Orthonormal scores, `N x K`.
    pub t: Matrix,
    /// Per block, the feature-mode factors (modes 2..N).
    pub factors: Vec<Vec<Matrix>>,
    /// Per block, the `1 x R_2 x ... x R_N` core (unit norm times strength).
    pub cores: Vec<Tensor>,
    /// Unit response loadings, `M x K`.
    pub q: Matrix,
    pub d: Vec<f64>,
    /// Noiseless `x` and `y`.
    pub x_clean: Tensor,
    pub y_clean: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let m = Matrix::new(rows, cols, gaussian(rng, rows * cols))?;
    Ok(thin_qr(&m)?.0)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
    v
}

fn noise_sigma(signal: &[f64], snr_db: f64) -> f64 {
    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Generates `x = sum_k G_k x_1 t_k x_2 P_k^(2) ... ` and `y = sum_k t_k d_k q_k^T`
/// plus Gaussian noise. Scores are orthonormal across blocks, and so are the
/// factors of every mode wide enough to hold all blocks side by side.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    let shape = &spec.shape;
    if shape.len() < 2 {
        return Err(Error::Data("synthetic shape needs order >= 2".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Data("synthetic shape has a zero extent".into()));
    }
    let (n, k, r) = (shape[0], spec.n_blocks, spec.block_rank);
    if k == 0 || r == 0 || spec.responses == 0 {
        return Err(Error::Data("blocks, rank and responses must be positive".into()));
    }
    if n < k {
        return Err(Error::Data(format!("{k} orthogonal scores need at least {k} samples, got {n}")));
    }
    if let Some(&i) = shape[1..].iter().find(|&&i| i < r) {
        return Err(Error::Data(format!("rank {r} does not fit a mode of size {i}")));
    }
    if spec.noise_snr_db.is_some_and(|s| !s.is_finite()) {
        return Err(Error::Data("noise SNR must be finite (omit it for noiseless data)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let t = orthonormal(&mut rng, n, k)?;
    // Factors per mode: one draw wide enough for every block when possible.
    let mode_factors: Vec<Vec<Matrix>> = shape[1..]
        .iter()
        .map(|&i| {
            if i >= k * r {
                let all = orthonormal(&mut rng, i, k * r)?;
                Ok((0..k).map(|b| all.select_columns(&(b * r..(b + 1) * r).collect::<Vec<_>>())).collect())
            } else {
                (0..k).map(|_| orthonormal(&mut rng, i, r)).collect()
            }
        })
        .collect::<Result<_>>()?;
    let factors: Vec<Vec<Matrix>> = (0..k).map(|b| mode_factors.iter().map(|m| m[b].clone()).collect()).collect();

    let core_shape: Vec<usize> = std::iter::once(1).chain(std::iter::repeat_n(r, shape.len() - 1)).collect();
    let core_len: usize = core_shape.iter().product();
    let mut cores = Vec::with_capacity(k);
    let mut x_clean = Tensor::zeros(shape.clone())?;
    let mut q_data = vec![0.0; spec.responses * k];
    let mut d = Vec::with_capacity(k);
    let root_n = (n as f64).sqrt();
    for b in 0..k {
        // Decreasing strengths keep the blocks identifiable.
        let strength = root_n * (1.0 - 0.4 * b as f64 / k as f64);
        let core_vals: Vec<f64> = unit(gaussian(&mut rng, core_len)).into_iter().map(|v| v * strength).collect();
        let core = Tensor::new(core_shape.clone(), core_vals)?;
        let tb = Matrix::column(t.col(b))?;
        let mut modes: Vec<(usize, &Matrix)> = vec![(1, &tb)];
        modes.extend(factors[b].iter().enumerate().map(|(m, p)| (m + 2, p)));
        let part = multilinear_product(&core, &modes)?;
        x_clean = Tensor::new(shape.clone(), x_clean.data().iter().zip(part.data()).map(|(a, b)| a + b).collect())?;
        cores.push(core);

        let qb = unit(gaussian(&mut rng, spec.responses));
        for (m, v) in qb.iter().enumerate() {
            q_data[m * k + b] = *v;
        }
        d.push(root_n * (1.0 + 0.5 * (k - 1 - b) as f64));
    }
    let q = Matrix::new(spec.responses, k, q_data)?;
    let mut y_data = vec![0.0; n * spec.responses];
    for i in 0..n {
        for m in 0..spec.responses {
            y_data[i * spec.responses + m] = (0..k).map(|b| t.get(i, b) * d[b] * q.get(m, b)).sum();
        }
    }
    let y_clean = Matrix::new(n, spec.responses, y_data)?;

    let (x, mut y) = match spec.noise_snr_db {
        None => (x_clean.clone(), y_clean.clone()),
        Some(db) => {
            let sx = noise_sigma(x_clean.data(), db);
            let sy = noise_sigma(y_clean.data(), db);
            let nx = gaussian(&mut rng, x_clean.len());
            let ny = gaussian(&mut rng, y_clean.data().len());
            let x = x_clean.data().iter().zip(&nx).map(|(a, e)| a + sx * e).collect();
            let y = y_clean.data().iter().zip(&ny).map(|(a, e)| a + sy * e).collect();
            (Tensor::new(shape.clone(), x)?, Matrix::new(n, spec.responses, y)?)
        }
    };
    let task = match spec.task {
        Task::Regression => Task::Regression,
        Task::Binary => {
            let labels = y.col(0).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            y = Matrix::column(labels)?;
            Task::Binary
        }
        Task::Survival => return Err(Error::Data("synthetic survival data is not supported".into())),
    };
    let ds = Dataset::new(x, y, task)?;
    Ok((ds, GroundTruth { t, factors, cores, q, d, x_clean, y_clean }))
}
