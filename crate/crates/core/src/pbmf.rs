//! Scenario dictionary learning.
//!
//! The solver factors a binary objects-by-instances matrix `A` into a
//! dictionary `W` (objects by scenarios) and an encoding `H` (scenarios by
//! instances), both box-constrained to `[0,1]`, under a soft-capped product
//! `f(WH) = min(WH, 1 + 0.01 WH)` that behaves like Boolean OR once a scene
//! already contains an object. The objective adds a scenario-overlap penalty
//! on `W`, L1 sparsity on both factors, and optional rarity weights that make
//! misfitting rare objects cost more than misfitting ubiquitous ones.
//!
//! Optimization is alternating projected gradient descent: a block of steps
//! on `H` with `W` fixed, then a block on `W`, each step clipped back to the
//! unit box, with per-factor backtracking so the recorded loss never
//! increases.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    clip_unit, soft_cap, soft_cap_slope_at, DenseMatrix, ObjectSceneMatrix,
};

/// Hyperparameters for [`factorize`] and [`encode`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbmfConfig {
    /// Number of scenarios (columns of the dictionary).
    pub k: usize,
    /// Weight of the scenario-overlap penalty on the dictionary.
    pub alpha1: f64,
    /// Weight of the L1 sparsity penalty on the dictionary.
    pub alpha2: f64,
    /// Weight of the L1 sparsity penalty on the encoding.
    pub alpha3: f64,
    /// Use rarity weights; when false the residual is unweighted.
    pub use_weights: bool,
    pub max_outer_iters: usize,
    /// Gradient steps per factor per outer iteration.
    pub inner_steps: usize,
    /// Initial per-factor step size; adapted by backtracking.
    pub step_size: f64,
    /// Multiplier applied when a step would increase the loss; in (0,1).
    pub backtrack_factor: f64,
    /// Relative loss-change threshold for early stopping.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PbmfConfig {
    fn default() -> Self {
        PbmfConfig {
            k: 25,
            alpha1: 0.1,
            alpha2: 0.01,
            alpha3: 0.01,
            use_weights: true,
            max_outer_iters: 300,
            inner_steps: 10,
            step_size: 1e-2,
            backtrack_factor: 0.5,
            tol: 1e-5,
            seed: 0,
        }
    }
}

impl PbmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha3 < 0.0 {
            return Err(Error::invalid("penalty weights must be nonnegative"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid("backtrack_factor must lie in (0, 1)"));
        }
        if self.tol < 0.0 {
            return Err(Error::invalid("tol must be nonnegative"));
        }
        Ok(())
    }

    /// Copy with all penalties off; the remaining objective is the plain
    /// soft-capped reconstruction error.
    pub fn without_penalties(&self) -> PbmfConfig {
        PbmfConfig {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            ..self.clone()
        }
    }
}

/// A trained dictionary: each column is one scenario's soft object
/// memberships.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModel {
    pub dictionary: DenseMatrix,
    pub object_names: Vec<String>,
    pub config: PbmfConfig,
}

impl ScenarioModel {
    pub fn n_objects(&self) -> usize {
        self.dictionary.rows()
    }

    pub fn k(&self) -> usize {
        self.dictionary.cols()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<ScenarioModel> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: ScenarioModel = serde_json::from_reader(file)?;
        if model.object_names.len() != model.dictionary.rows() {
            return Err(Error::dims(
                "ScenarioModel object names",
                model.dictionary.rows(),
                model.object_names.len(),
            ));
        }
        if !model.dictionary.in_unit_box() {
            return Err(Error::invalid("dictionary entries must lie in [0, 1]"));
        }
        Ok(model)
    }
}

/// Scenario activations per instance, one column per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingMatrix {
    pub matrix: DenseMatrix,
    pub instance_ids: Vec<String>,
}

impl EncodingMatrix {
    pub fn k(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_instances(&self) -> usize {
        self.matrix.cols()
    }

    /// CSV with instance ids as the header row, one row per scenario.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.instance_ids)?;
        for r in 0..self.matrix.rows() {
            writer.write_record(self.matrix.row(r).iter().map(f64::to_string))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<EncodingMatrix> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path.as_ref())?;
        let mut records = reader.records();
        let header = records
            .next()
            .transpose()?
            .ok_or_else(|| Error::invalid("empty encoding CSV"))?;
        let instance_ids: Vec<String> = header.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in records {
            let record = record?;
            let row: std::result::Result<Vec<f64>, _> =
                record.iter().map(|c| c.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| Error::invalid(format!("encoding CSV: {e}")))?);
        }
        let matrix = DenseMatrix::from_rows(&rows)?;
        if matrix.cols() != instance_ids.len() {
            return Err(Error::dims(
                "encoding CSV columns",
                instance_ids.len(),
                matrix.cols(),
            ));
        }
        Ok(EncodingMatrix {
            matrix,
            instance_ids,
        })
    }
}

/// Per-entry residual weights; 1 everywhere an object is absent, at least 1
/// everywhere else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub matrix: DenseMatrix,
}

/// Which weighting rule [`build_weight_matrix_scheme`] applies to present
/// objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `1 + ln(instances / occurrences_of_object)`: rare objects weigh more.
    RarityPerObject,
    /// `1 + ln(instances / objects)`: one constant for every present object.
    DatasetConstant,
}

/// Rarity weights: `max(A_ij * (1 + ln(N / n_i)), 1)` with `n_i` the number
/// of instances containing object `i`.
pub fn build_weight_matrix(a: &ObjectSceneMatrix) -> Result<WeightMatrix> {
    build_weight_matrix_scheme(a, WeightScheme::RarityPerObject)
}

pub fn build_weight_matrix_scheme(
    a: &ObjectSceneMatrix,
    scheme: WeightScheme,
) -> Result<WeightMatrix> {
    let n_instances = a.n_instances() as f64;
    let n_objects = a.n_objects() as f64;
    let mut out = DenseMatrix::filled(a.n_objects(), a.n_instances(), 1.0);
    for i in 0..a.n_objects() {
        let occurrences = a.object_occurrences(i);
        if occurrences == 0 {
            return Err(Error::invalid(format!(
                "object '{}' occurs in no instance; weights are undefined for it",
                a.object_names()[i]
            )));
        }
        let present_weight = match scheme {
            WeightScheme::RarityPerObject => {
                (1.0 + (n_instances / occurrences as f64).ln()).max(1.0)
            }
            WeightScheme::DatasetConstant => (1.0 + (n_instances / n_objects).ln()).max(1.0),
        };
        for j in 0..a.n_instances() {
            if a.matrix()[(i, j)] == 1.0 {
                out[(i, j)] = present_weight;
            }
        }
    }
    Ok(WeightMatrix { matrix: out })
}

/// Weight builder for encoding-time inputs, where some objects may occur in
/// no instance; those objects' rows are all-absent, so every entry is 1 and
/// the occurrence count never divides anything.
fn build_weight_matrix_lenient(a: &ObjectSceneMatrix) -> WeightMatrix {
    let n_instances = a.n_instances() as f64;
    let mut out = DenseMatrix::filled(a.n_objects(), a.n_instances(), 1.0);
    for i in 0..a.n_objects() {
        let occurrences = a.object_occurrences(i);
        if occurrences == 0 {
            continue;
        }
        let present_weight = (1.0 + (n_instances / occurrences as f64).ln()).max(1.0);
        for j in 0..a.n_instances() {
            if a.matrix()[(i, j)] == 1.0 {
                out[(i, j)] = present_weight;
            }
        }
    }
    WeightMatrix { matrix: out }
}

fn uniform_weights(rows: usize, cols: usize) -> WeightMatrix {
    WeightMatrix {
        matrix: DenseMatrix::filled(rows, cols, 1.0),
    }
}

pub(crate) fn weights_for(
    a: &ObjectSceneMatrix,
    cfg: &PbmfConfig,
    lenient: bool,
) -> Result<WeightMatrix> {
    if !cfg.use_weights {
        Ok(uniform_weights(a.n_objects(), a.n_instances()))
    } else if lenient {
        Ok(build_weight_matrix_lenient(a))
    } else {
        build_weight_matrix(a)
    }
}

/// Full objective on raw matrices, no shape checks beyond what the products
/// force. `omega` must match `a`'s shape.
pub fn pbmf_loss_dense(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &DenseMatrix,
    cfg: &PbmfConfig,
) -> Result<f64> {
    let product = w.matmul(h)?;
    let mut fit = 0.0;
    for ((&av, &pv), &ov) in a.data().iter().zip(product.data()).zip(omega.data()) {
        let r = ov * (av - soft_cap(pv));
        fit += r * r;
    }
    Ok(fit + regularizer_terms(w, h, cfg))
}

fn regularizer_terms(w: &DenseMatrix, h: &DenseMatrix, cfg: &PbmfConfig) -> f64 {
    let mut total = 0.0;
    if cfg.alpha1 > 0.0 {
        total += cfg.alpha1 * overlap_penalty(w);
    }
    if cfg.alpha2 > 0.0 {
        total += cfg.alpha2 * w.l1_norm();
    }
    if cfg.alpha3 > 0.0 {
        total += cfg.alpha3 * h.l1_norm();
    }
    total
}

/// Squared Frobenius norm of the off-diagonal of `W^T W`; zero exactly when
/// scenario columns share no objects.
pub fn overlap_penalty(w: &DenseMatrix) -> f64 {
    let gram = w.transpose().matmul(w).expect("square gram");
    let mut total = 0.0;
    for q in 0..gram.rows() {
        for r in 0..gram.cols() {
            if q != r {
                total += gram[(q, r)] * gram[(q, r)];
            }
        }
    }
    total
}

/// Full objective with dimension checks against the named matrix.
pub fn pbmf_loss(
    a: &ObjectSceneMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &WeightMatrix,
    cfg: &PbmfConfig,
) -> Result<f64> {
    check_factor_shapes(a, w, h, omega)?;
    pbmf_loss_dense(a.matrix(), w, h, &omega.matrix, cfg)
}

fn check_factor_shapes(
    a: &ObjectSceneMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &WeightMatrix,
) -> Result<()> {
    if w.rows() != a.n_objects() {
        return Err(Error::dims("dictionary rows", a.n_objects(), w.rows()));
    }
    if h.cols() != a.n_instances() {
        return Err(Error::dims("encoding columns", a.n_instances(), h.cols()));
    }
    if w.cols() != h.rows() {
        return Err(Error::dims("scenario count", w.cols(), h.rows()));
    }
    if omega.matrix.shape() != a.matrix().shape() {
        return Err(Error::dims(
            "weight matrix shape",
            format!("{:?}", a.matrix().shape()),
            format!("{:?}", omega.matrix.shape()),
        ));
    }
    Ok(())
}

/// Weighted residual pushed through the soft cap's slope:
/// `Omega∘Omega∘(A − f(WH))∘f'(WH)`. Both gradients are linear in it.
pub(crate) fn weighted_residual(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &DenseMatrix,
) -> Result<DenseMatrix> {
    let mut product = w.matmul(h)?;
    for ((pv, &av), &ov) in product
        .data_mut()
        .iter_mut()
        .zip(a.data())
        .zip(omega.data())
    {
        let slope = soft_cap_slope_at(*pv);
        *pv = ov * ov * (av - soft_cap(*pv)) * slope;
    }
    Ok(product)
}

/// Gradients of the full objective on raw matrices.
///
/// With `R` the weighted residual above: the fit part is `-2 R H^T` for `W`
/// and `-2 W^T R` for `H`; the overlap penalty adds
/// `4 alpha1 W (W^T W − diag)`, and each L1 term adds its constant weight
/// (entries are nonnegative, so the subgradient is +1).
pub fn pbmf_gradients_dense(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &DenseMatrix,
    cfg: &PbmfConfig,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let r = weighted_residual(a, w, h, omega)?;

    let mut grad_w = r.matmul(&h.transpose())?;
    grad_w.map_inplace(|v| -2.0 * v);
    if cfg.alpha1 > 0.0 {
        let mut gram = w.transpose().matmul(w)?;
        for q in 0..gram.rows() {
            gram[(q, q)] = 0.0;
        }
        let overlap_grad = w.matmul(&gram)?;
        grad_w = grad_w.zip_map(&overlap_grad, |g, o| g + 4.0 * cfg.alpha1 * o)?;
    }
    if cfg.alpha2 > 0.0 {
        grad_w.map_inplace(|v| v + cfg.alpha2);
    }

    let mut grad_h = w.transpose().matmul(&r)?;
    grad_h.map_inplace(|v| -2.0 * v);
    if cfg.alpha3 > 0.0 {
        grad_h.map_inplace(|v| v + cfg.alpha3);
    }

    Ok((grad_w, grad_h))
}

pub fn pbmf_gradients(
    a: &ObjectSceneMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &WeightMatrix,
    cfg: &PbmfConfig,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_factor_shapes(a, w, h, omega)?;
    pbmf_gradients_dense(a.matrix(), w, h, &omega.matrix, cfg)
}

const NMF_WARM_START_ITERS: usize = 100;

/// Warm start for [`factorize`]: an unconstrained nonnegative factorization,
/// rebalanced so each dictionary column peaks at 1, then clipped into the
/// unit box. Deterministic given the seed, and independent of instance
/// ordering.
pub fn initialize_factors(
    a: &ObjectSceneMatrix,
    cfg: &PbmfConfig,
) -> Result<(DenseMatrix, DenseMatrix)> {
    cfg.validate()?;
    if cfg.k > a.n_objects().min(a.n_instances()) {
        return Err(Error::invalid(format!(
            "k = {} exceeds min(objects, instances) = {}",
            cfg.k,
            a.n_objects().min(a.n_instances())
        )));
    }
    if a.matrix().sum() == 0.0 {
        return Err(Error::invalid("cannot initialize from an all-zero matrix"));
    }
    let (mut w, mut h) =
        crate::baselines::nmf(a.matrix(), cfg.k, NMF_WARM_START_ITERS, cfg.seed)?;
    rebalance_columns(&mut w, &mut h);
    Ok((clip_unit(&w), clip_unit(&h)))
}

/// Divides each `W` column by its max and multiplies the matching `H` row by
/// the same value; leaves the product unchanged.
fn rebalance_columns(w: &mut DenseMatrix, h: &mut DenseMatrix) {
    for q in 0..w.cols() {
        let mut peak = 0.0f64;
        for r in 0..w.rows() {
            peak = peak.max(w[(r, q)]);
        }
        if peak <= 0.0 {
            continue;
        }
        for r in 0..w.rows() {
            w[(r, q)] /= peak;
        }
        for c in 0..h.cols() {
            h[(q, c)] *= peak;
        }
    }
}

struct FactorStepper {
    step: f64,
    backtrack: f64,
}

/// Step-size floor below which a factor update is abandoned for this block.
const STEP_FLOOR: f64 = 1e-18;
/// Step-size ceiling; growth on accepted steps stops here.
const STEP_CEIL: f64 = 1e6;

impl FactorStepper {
    fn new(cfg: &PbmfConfig) -> Self {
        FactorStepper {
            step: cfg.step_size,
            backtrack: cfg.backtrack_factor,
        }
    }

    /// One projected step with backtracking. Returns the new loss, leaving
    /// `factor` untouched when no step size small enough avoids an increase.
    fn step(
        &mut self,
        factor: &mut DenseMatrix,
        gradient: &DenseMatrix,
        current_loss: f64,
        eval: impl Fn(&DenseMatrix) -> Result<f64>,
    ) -> Result<f64> {
        let mut first_try = true;
        while self.step >= STEP_FLOOR {
            let candidate = clip_unit(&factor.zip_map(gradient, |x, g| x - self.step * g)?);
            debug_assert!(candidate.in_unit_box());
            let candidate_loss = eval(&candidate)?;
            if candidate_loss <= current_loss {
                *factor = candidate;
                if first_try && self.step < STEP_CEIL {
                    self.step /= self.backtrack;
                }
                return Ok(candidate_loss);
            }
            self.step *= self.backtrack;
            first_try = false;
        }
        self.step = STEP_FLOOR;
        Ok(current_loss)
    }
}

fn ensure_finite(loss: f64, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { iteration })
    }
}

/// Squared weighted residual of one instance column under the current
/// factors.
fn column_residual(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &DenseMatrix,
    j: usize,
) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let mut p = 0.0;
        for q in 0..w.cols() {
            p += w[(i, q)] * h[(q, j)];
        }
        let r = omega[(i, j)] * (a[(i, j)] - soft_cap(p));
        total += r * r;
    }
    total
}

fn worst_reconstructed_instance(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: &DenseMatrix,
) -> usize {
    let mut worst = 0;
    let mut worst_residual = f64::NEG_INFINITY;
    for j in 0..a.cols() {
        let r = column_residual(a, w, h, omega, j);
        if r > worst_residual {
            worst_residual = r;
            worst = j;
        }
    }
    worst
}

fn zero_columns(w: &DenseMatrix) -> Vec<usize> {
    (0..w.cols())
        .filter(|&q| (0..w.rows()).all(|r| w[(r, q)] == 0.0))
        .collect()
}

/// Learns a scenario dictionary and instance encodings.
///
/// Alternates `inner_steps` projected-gradient steps on the encoding with
/// the dictionary fixed, then the same on the dictionary, recording the loss
/// once per outer iteration. Backtracking keeps the recorded sequence
/// non-increasing; iteration stops when the relative change drops below
/// `tol` or `max_outer_iters` is reached.
pub fn factorize(
    a: &ObjectSceneMatrix,
    cfg: &PbmfConfig,
) -> Result<(ScenarioModel, EncodingMatrix, Vec<f64>)> {
    cfg.validate()?;
    let omega = weights_for(a, cfg, false)?;
    let (mut w, mut h) = initialize_factors(a, cfg)?;
    let am = a.matrix();
    let om = &omega.matrix;

    let mut loss = ensure_finite(pbmf_loss_dense(am, &w, &h, om, cfg)?, 0)?;
    let mut history = vec![loss];
    let mut w_stepper = FactorStepper::new(cfg);
    let mut h_stepper = FactorStepper::new(cfg);

    for outer in 1..=cfg.max_outer_iters {
        for _ in 0..cfg.inner_steps {
            let (_, grad_h) = pbmf_gradients_dense(am, &w, &h, om, cfg)?;
            loss = h_stepper.step(&mut h, &grad_h, loss, |cand| {
                pbmf_loss_dense(am, &w, cand, om, cfg)
            })?;
        }
        for _ in 0..cfg.inner_steps {
            let (grad_w, _) = pbmf_gradients_dense(am, &w, &h, om, cfg)?;
            loss = w_stepper.step(&mut w, &grad_w, loss, |cand| {
                pbmf_loss_dense(am, cand, &h, om, cfg)
            })?;
        }

        // A dictionary column can collapse to zero under the L1 pull. Reseed
        // it from the worst-fit instance and give the factors one update pair
        // to absorb the change; keep the result only if it does not undo the
        // progress recorded so far, so the loss history stays non-increasing.
        let dead = zero_columns(&w);
        if !dead.is_empty() {
            let snapshot = (w.clone(), h.clone(), loss);
            let profile = am.column(worst_reconstructed_instance(am, &w, &h, om));
            for &q in &dead {
                w.set_column(q, &profile);
            }
            let mut reseeded_loss = pbmf_loss_dense(am, &w, &h, om, cfg)?;
            for _ in 0..cfg.inner_steps {
                let (_, grad_h) = pbmf_gradients_dense(am, &w, &h, om, cfg)?;
                reseeded_loss = h_stepper.step(&mut h, &grad_h, reseeded_loss, |cand| {
                    pbmf_loss_dense(am, &w, cand, om, cfg)
                })?;
            }
            for _ in 0..cfg.inner_steps {
                let (grad_w, _) = pbmf_gradients_dense(am, &w, &h, om, cfg)?;
                reseeded_loss = w_stepper.step(&mut w, &grad_w, reseeded_loss, |cand| {
                    pbmf_loss_dense(am, cand, &h, om, cfg)
                })?;
            }
            if reseeded_loss <= snapshot.2 {
                loss = reseeded_loss;
            } else {
                (w, h, loss) = snapshot;
            }
        }

        loss = ensure_finite(loss, outer)?;
        let previous = *history.last().expect("seeded with initial loss");
        history.push(loss);
        if (previous - loss).abs() <= cfg.tol * previous.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    // Columns still dead at the end get a vanishing copy of the worst-fit
    // instance profile: enough to satisfy "every scenario names at least one
    // object", too small to move the loss.
    let dead = zero_columns(&w);
    if !dead.is_empty() {
        let profile = am.column(worst_reconstructed_instance(am, &w, &h, om));
        let faint: Vec<f64> = profile.iter().map(|v| v * 1e-6).collect();
        for &q in &dead {
            if faint.iter().any(|&v| v > 0.0) {
                w.set_column(q, &faint);
            } else {
                w[(0, q)] = 1e-6;
            }
        }
    }

    Ok((
        ScenarioModel {
            dictionary: w,
            object_names: a.object_names().to_vec(),
            config: cfg.clone(),
        },
        EncodingMatrix {
            matrix: h,
            instance_ids: a.instance_ids().to_vec(),
        },
        history,
    ))
}

/// Runs [`factorize`] under `restarts` consecutive seeds starting at
/// `cfg.seed` and keeps the run with the lowest final loss. The objective is
/// not convex, so different warm starts land in different basins; a handful
/// of restarts reliably finds the good ones on small problems.
pub fn factorize_best_of(
    a: &ObjectSceneMatrix,
    cfg: &PbmfConfig,
    restarts: usize,
) -> Result<(ScenarioModel, EncodingMatrix, Vec<f64>)> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best: Option<(ScenarioModel, EncodingMatrix, Vec<f64>)> = None;
    for offset in 0..restarts {
        let run_cfg = PbmfConfig {
            seed: cfg.seed.wrapping_add(offset as u64),
            ..cfg.clone()
        };
        let run = factorize(a, &run_cfg)?;
        let keep = match &best {
            None => true,
            Some((_, _, history)) => {
                run.2.last().expect("history never empty")
                    < history.last().expect("history never empty")
            }
        };
        if keep {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Infers encodings for new instances with the dictionary held fixed; same
/// objective, stopping rules, and step control as [`factorize`], applied to
/// the encoding block only.
pub fn encode(a_new: &ObjectSceneMatrix, model: &ScenarioModel) -> Result<EncodingMatrix> {
    if a_new.object_names() != model.object_names {
        let offending = a_new
            .object_names()
            .iter()
            .zip(&model.object_names)
            .find(|(new, trained)| new != trained)
            .map(|(new, _)| new.clone())
            .unwrap_or_else(|| format!("{} objects, model has {}", a_new.n_objects(), model.n_objects()));
        return Err(Error::invalid(format!(
            "object set does not match the model (first mismatch: '{offending}')"
        )));
    }
    let cfg = &model.config;
    cfg.validate()?;
    let omega = weights_for(a_new, cfg, true)?;
    let am = a_new.matrix();
    let om = &omega.matrix;
    let w = &model.dictionary;

    let mut h = DenseMatrix::filled(model.k(), a_new.n_instances(), 0.5);
    let mut loss = ensure_finite(pbmf_loss_dense(am, w, &h, om, cfg)?, 0)?;
    let mut previous = loss;
    let mut stepper = FactorStepper::new(cfg);

    for outer in 1..=cfg.max_outer_iters {
        for _ in 0..cfg.inner_steps {
            let (_, grad_h) = pbmf_gradients_dense(am, w, &h, om, cfg)?;
            loss = stepper.step(&mut h, &grad_h, loss, |cand| {
                pbmf_loss_dense(am, w, cand, om, cfg)
            })?;
        }
        loss = ensure_finite(loss, outer)?;
        if (previous - loss).abs() <= cfg.tol * previous.max(f64::MIN_POSITIVE) {
            break;
        }
        previous = loss;
    }

    Ok(EncodingMatrix {
        matrix: h,
        instance_ids: a_new.instance_ids().to_vec(),
    })
}

/// Writes `iteration,loss` rows, iteration 0 being the loss at
/// initialization.
pub fn write_loss_history(history: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "iteration,loss")?;
    for (i, loss) in history.iter().enumerate() {
        writeln!(file, "{i},{loss}")?;
    }
    Ok(())
}
