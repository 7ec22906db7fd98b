//! Reference factorizations the reconstruction study compares against:
//! multiplicative-update NMF, greedy Boolean MF, binary-penalty MF, a
//! randomized truncated SVD, and the trivial constant baselines.

use crate::error::{Error, Result};
use crate::matrix::{clip_unit, DenseMatrix};

const NMF_EPS: f64 = 1e-12;

/// Multiplicative-update NMF minimizing the plain squared residual. `W`
/// starts from seeded uniform draws, `H` from a constant, so column `j` of
/// the result depends only on column `j` of `a`; both factors stay
/// nonnegative and the objective never increases across updates.
pub fn nmf(a: &DenseMatrix, k: usize, iters: usize, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    use rand::{Rng, SeedableRng};
    if k == 0 || k > a.rows().min(a.cols()) {
        return Err(Error::invalid(format!(
            "nmf rank {k} outside 1..={}",
            a.rows().min(a.cols())
        )));
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("nmf input must be nonnegative"));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w = DenseMatrix::zeros(a.rows(), k);
    for v in w.data_mut() {
        *v = 0.05 + 0.95 * rng.random::<f64>();
    }
    let mut h = DenseMatrix::filled(k, a.cols(), 0.5);

    for _ in 0..iters {
        // H <- H * (W^T A) / (W^T W H)
        let wt = w.transpose();
        let numer = wt.matmul(a)?;
        let denom = wt.matmul(&w)?.matmul(&h)?;
        for ((hv, &nv), &dv) in h.data_mut().iter_mut().zip(numer.data()).zip(denom.data()) {
            *hv *= nv / (dv + NMF_EPS);
        }
        // W <- W * (A H^T) / (W H H^T)
        let ht = h.transpose();
        let numer = a.matmul(&ht)?;
        let denom = w.matmul(&h.matmul(&ht)?)?;
        for ((wv, &nv), &dv) in w.data_mut().iter_mut().zip(numer.data()).zip(denom.data()) {
            *wv *= nv / (dv + NMF_EPS);
        }
    }
    Ok((w, h))
}

/// Binary factors from the greedy association cover, plus a flag raised when
/// fewer than `k` selections had positive gain and the remaining columns
/// were left all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyBmfResult {
    pub w: DenseMatrix,
    pub h: DenseMatrix,
    pub truncated: bool,
}

/// Boolean product of binary factors: entry 1 when any selected scenario
/// contains the object.
pub fn boolean_product(w: &DenseMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    let mut p = w.matmul(h)?;
    p.map_inplace(|v| if v > 0.0 { 1.0 } else { 0.0 });
    Ok(p)
}

/// Number of cells where the Boolean reconstruction disagrees with `a`.
pub fn boolean_l1_error(a: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix) -> Result<f64> {
    let p = boolean_product(w, h)?;
    Ok(a.sub(&p)?.l1_norm())
}

// Covering a 0 costs more than covering a 1 earns. Equal weights make the
// greedy grab over-broad candidates (the all-ones column wins on the 3x3
// rank-2 cover and strands two errors); the 2:1 penalty is the usual remedy.
const COVER_REWARD: f64 = 1.0;
const COVER_PENALTY: f64 = 2.0;

/// Greedy Boolean factorization. Candidate columns come from row
/// association: candidate `i` contains object `j` when
/// `|instances with i and j| / |instances with i| >= tau`. Each round scores
/// every candidate with its best per-instance assignment and keeps the
/// highest-gain pair; rounds stop early when no candidate helps.
pub fn greedy_bmf(a: &DenseMatrix, k: usize, tau: f64) -> Result<GreedyBmfResult> {
    if !a.is_binary() {
        return Err(Error::invalid("greedy_bmf input must be binary"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("tau must lie in (0, 1]"));
    }
    let (m, n) = a.shape();
    let mut w = DenseMatrix::zeros(m, k);
    let mut h = DenseMatrix::zeros(k, n);
    if k == 0 {
        return Ok(GreedyBmfResult { w, h, truncated: false });
    }

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        let count_i = a.row(i).iter().filter(|&&v| v == 1.0).count();
        if count_i == 0 {
            continue;
        }
        let mut column = vec![0.0; m];
        for (j, slot) in column.iter_mut().enumerate() {
            let both = (0..n)
                .filter(|&c| a[(i, c)] == 1.0 && a[(j, c)] == 1.0)
                .count();
            if both as f64 / count_i as f64 >= tau {
                *slot = 1.0;
            }
        }
        candidates.push(column);
    }

    let mut covered = DenseMatrix::zeros(m, n);
    let mut selected = 0;
    while selected < k {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (ci, cand) in candidates.iter().enumerate() {
            let mut assignment = vec![0.0; n];
            let mut total = 0.0;
            for (j, slot) in assignment.iter_mut().enumerate() {
                let mut gain = 0.0;
                for (i, &present) in cand.iter().enumerate() {
                    if present == 1.0 && covered[(i, j)] == 0.0 {
                        gain += if a[(i, j)] == 1.0 {
                            COVER_REWARD
                        } else {
                            -COVER_PENALTY
                        };
                    }
                }
                if gain > 0.0 {
                    *slot = 1.0;
                    total += gain;
                }
            }
            let better = match &best {
                None => total > 0.0,
                Some((_, _, best_total)) => total > *best_total,
            };
            if better {
                best = Some((ci, assignment, total));
            }
        }
        let Some((ci, assignment, _)) = best else { break };
        for (i, &present) in candidates[ci].iter().enumerate() {
            w[(i, selected)] = present;
        }
        for (j, &on) in assignment.iter().enumerate() {
            h[(selected, j)] = on;
            if on == 1.0 {
                for (i, &present) in candidates[ci].iter().enumerate() {
                    if present == 1.0 {
                        covered[(i, j)] = 1.0;
                    }
                }
            }
        }
        selected += 1;
    }

    Ok(GreedyBmfResult {
        w,
        h,
        truncated: selected < k,
    })
}

/// Stage length for each penalty weight in [`binary_mf`].
const BINARY_MF_STAGE_ITERS: usize = 50;

fn binary_mf_loss(a: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix, lambda: f64) -> Result<f64> {
    let fit = a.sub(&w.matmul(h)?)?.frob_sq();
    let off = |m: &DenseMatrix| {
        m.data()
            .iter()
            .map(|&x| {
                let p = x * (1.0 - x);
                p * p
            })
            .sum::<f64>()
    };
    Ok(fit + lambda * (off(w) + off(h)))
}

fn binary_mf_step(
    factor: &mut DenseMatrix,
    gradient: &DenseMatrix,
    step: &mut f64,
    current: f64,
    eval: impl Fn(&DenseMatrix) -> Result<f64>,
) -> Result<f64> {
    let mut first = true;
    while *step >= 1e-18 {
        let candidate = clip_unit(&factor.zip_map(gradient, |x, g| x - *step * g)?);
        let loss = eval(&candidate)?;
        if loss <= current {
            *factor = candidate;
            if first {
                *step *= 2.0;
            }
            return Ok(loss);
        }
        *step *= 0.5;
        first = false;
    }
    *step = 1e-18;
    Ok(current)
}

/// Continuation scheme from given starting factors: for each `lambda` in the
/// schedule, alternate projected gradient steps on the penalized objective,
/// then round at 0.5. The penalty `x(1-x)` drives entries toward {0,1} as
/// lambda grows, so the final rounding moves them only slightly.
pub fn binary_mf_from(
    a: &DenseMatrix,
    w0: &DenseMatrix,
    h0: &DenseMatrix,
    lambda_schedule: &[f64],
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut w = clip_unit(w0);
    let mut h = clip_unit(h0);
    let mut step_w = 1e-2;
    let mut step_h = 1e-2;
    for &lambda in lambda_schedule {
        let mut loss = binary_mf_loss(a, &w, &h, lambda)?;
        for _ in 0..BINARY_MF_STAGE_ITERS {
            let residual = a.sub(&w.matmul(&h)?)?;
            let penalty = |x: f64| 2.0 * x * (1.0 - x) * (1.0 - 2.0 * x);

            let mut grad_h = w.transpose().matmul(&residual)?;
            grad_h.map_inplace(|v| -2.0 * v);
            let grad_h = grad_h.zip_map(&h.map(|x| lambda * penalty(x)), |g, p| g + p)?;
            loss = binary_mf_step(&mut h, &grad_h, &mut step_h, loss, |cand| {
                binary_mf_loss(a, &w, cand, lambda)
            })?;

            let residual = a.sub(&w.matmul(&h)?)?;
            let mut grad_w = residual.matmul(&h.transpose())?;
            grad_w.map_inplace(|v| -2.0 * v);
            let grad_w = grad_w.zip_map(&w.map(|x| lambda * penalty(x)), |g, p| g + p)?;
            loss = binary_mf_step(&mut w, &grad_w, &mut step_w, loss, |cand| {
                binary_mf_loss(a, cand, &h, lambda)
            })?;
        }
    }
    let round = |m: &DenseMatrix| m.map(|x| if x >= 0.5 { 1.0 } else { 0.0 });
    Ok((round(&w), round(&h)))
}

/// Binary-penalty factorization warm-started from NMF.
pub fn binary_mf(
    a: &DenseMatrix,
    k: usize,
    lambda_schedule: &[f64],
    seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if !a.is_binary() {
        return Err(Error::invalid("binary_mf input must be binary"));
    }
    let (w0, h0) = nmf(a, k, 50, seed)?;
    binary_mf_from(a, &w0, &h0, lambda_schedule)
}

pub const DEFAULT_LAMBDA_SCHEDULE: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const DEFAULT_ASSO_TAU: f64 = 0.6;

/// Rank-`k` factors from randomized subspace iteration.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl TruncatedSvd {
    /// `U diag(S) V^T`.
    pub fn reconstruction(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for c in 0..us.cols() {
                us[(r, c)] *= self.singular_values[c];
            }
        }
        us.matmul(&self.v.transpose()).expect("shapes fixed")
    }
}

const SVD_OVERSAMPLING: usize = 8;

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    let mut spare: Option<f64> = None;
    for v in m.data_mut() {
        *v = spare.take().unwrap_or_else(|| {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            spare = Some(radius * angle.sin());
            radius * angle.cos()
        });
    }
    m
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; near-dependent
/// columns come out zero rather than amplifying noise. Collapse is judged
/// against the column's norm on entry: a residual that small is cancellation
/// error, and normalizing it would manufacture a spurious direction.
fn orthonormalize(m: &mut DenseMatrix) {
    let (rows, cols) = m.shape();
    for c in 0..cols {
        let entry_norm = (0..rows).map(|r| m[(r, c)] * m[(r, c)]).sum::<f64>().sqrt();
        for _ in 0..2 {
            for prev in 0..c {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += m[(r, prev)] * m[(r, c)];
                }
                for r in 0..rows {
                    let correction = dot * m[(r, prev)];
                    m[(r, c)] -= correction;
                }
            }
        }
        let norm = (0..rows).map(|r| m[(r, c)] * m[(r, c)]).sum::<f64>().sqrt();
        if norm > entry_norm * 1e-10 && norm > 1e-300 {
            for r in 0..rows {
                m[(r, c)] /= norm;
            }
        } else {
            for r in 0..rows {
                m[(r, c)] = 0.0;
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix; returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_symmetric_eigen(s: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = s.rows();
    let mut a = s.clone();
    let mut v = DenseMatrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s_ = t * c;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s_ * aiq;
                    a[(i, q)] = s_ * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[(p, i)];
                    let aqi = a[(q, i)];
                    a[(p, i)] = c * api - s_ * aqi;
                    a[(q, i)] = s_ * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s_ * viq;
                    v[(i, q)] = s_ * vip + c * viq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// Rank-`k` approximation via randomized block power iteration: project onto
/// an oversampled random range, alternate with the transpose to sharpen the
/// spectrum, then solve the small problem exactly.
pub fn truncated_svd(
    a: &DenseMatrix,
    k: usize,
    power_iters: usize,
    seed: u64,
) -> Result<TruncatedSvd> {
    let (m, n) = a.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!(
            "svd rank {k} outside 1..={}",
            m.min(n)
        )));
    }
    let sketch = (k + SVD_OVERSAMPLING).min(m.min(n));

    let mut q = a.matmul(&gaussian_matrix(n, sketch, seed))?;
    orthonormalize(&mut q);
    for _ in 0..power_iters {
        let mut z = a.transpose().matmul(&q)?;
        orthonormalize(&mut z);
        q = a.matmul(&z)?;
        orthonormalize(&mut q);
    }

    // B = Q^T A is sketch x n; its row space carries the top spectrum
    let b = q.transpose().matmul(a)?;
    let bbt = b.matmul(&b.transpose())?;
    let (eigvals, eigvecs) = jacobi_symmetric_eigen(&bbt);

    let mut order: Vec<usize> = (0..eigvals.len()).collect();
    order.sort_by(|&x, &y| eigvals[y].partial_cmp(&eigvals[x]).expect("finite eigenvalues"));
    order.truncate(k);

    let mut singular_values = Vec::with_capacity(k);
    let mut u = DenseMatrix::zeros(m, k);
    let mut v = DenseMatrix::zeros(n, k);
    let u_small = q.matmul(&eigvecs)?;
    let vt_unscaled = eigvecs.transpose().matmul(&b)?;
    for (out_col, &idx) in order.iter().enumerate() {
        let sigma = eigvals[idx].max(0.0).sqrt();
        singular_values.push(sigma);
        for r in 0..m {
            u[(r, out_col)] = u_small[(r, idx)];
        }
        if sigma > 1e-150 {
            for r in 0..n {
                v[(r, out_col)] = vt_unscaled[(idx, r)] / sigma;
            }
        }
    }
    Ok(TruncatedSvd {
        u,
        singular_values,
        v,
    })
}

/// Squared-error floors: predicting all zeros and predicting the constant
/// mean.
pub fn trivial_baselines(a: &DenseMatrix) -> (f64, f64) {
    let zeros_error = a.frob_sq();
    let mean = a.mean();
    let mean_error = a.data().iter().map(|&v| (v - mean) * (v - mean)).sum();
    (zeros_error, mean_error)
}
