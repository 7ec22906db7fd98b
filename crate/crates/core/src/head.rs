//! Scenario heads: affine-plus-sigmoid encoders that map per-instance
//! feature vectors straight to scenario activations.
//!
//! `train_head` fits the head against the same weighted reconstruction
//! objective the factorization minimizes, so a trained head replaces the
//! iterative `encode` solve with one forward pass over new features.
//! `joint_finetune` continues that fit with a cross-entropy term added,
//! pulling head, dictionary, and classifier toward each other. Both run
//! the same engine; the finetune with a zero classification weight is
//! bit-identical to plain head training.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, SceneClassifier};
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, ObjectSceneMatrix, clip_unit};
use crate::pbmf::{self, EncodingMatrix, PbmfConfig, ScenarioModel};

/// Sigmoid outputs are pulled this far inside the unit interval so that
/// activations stay strictly between 0 and 1 in floating point even for
/// saturated logits.
const SIGMOID_CLAMP: f64 = 1e-12;

const LR_FLOOR: f64 = 1e-12;
const LR_CEIL: f64 = 1e3;
const LR_BACKTRACK: f64 = 0.5;

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
}

/// Per-instance feature vectors, stored feature-major: one column per
/// instance, aligned with `instance_ids`. The binary object rows of an
/// `ObjectSceneMatrix` are the default feature choice, but any finite
/// real features fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    matrix: DenseMatrix,
    instance_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(matrix: DenseMatrix, instance_ids: Vec<String>) -> Result<FeatureMatrix> {
        if matrix.cols() != instance_ids.len() {
            return Err(Error::dims(
                "feature columns vs instance ids",
                matrix.cols(),
                instance_ids.len(),
            ));
        }
        if !matrix.is_finite() {
            return Err(Error::invalid("feature matrix contains non-finite entries"));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &instance_ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate instance id '{id}'")));
            }
        }
        Ok(FeatureMatrix {
            matrix,
            instance_ids,
        })
    }

    /// Uses the raw object indicators of a scene matrix as features.
    pub fn from_object_matrix(a: &ObjectSceneMatrix) -> FeatureMatrix {
        FeatureMatrix {
            matrix: a.matrix().clone(),
            instance_ids: a.instance_ids().to_vec(),
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_instances(&self) -> usize {
        self.matrix.cols()
    }

    /// Layout matches the scene-matrix CSV: instance ids across the
    /// header, one feature per row, feature label in the first column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, ",{}", self.instance_ids.join(","))?;
        for r in 0..self.matrix.rows() {
            let values = self
                .matrix
                .row(r)
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            writeln!(file, "f{r},{values}")?;
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
        let file = BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::invalid("empty feature CSV"))?;
        let instance_ids: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let _label = fields.next();
            let row: std::result::Result<Vec<f64>, _> =
                fields.map(|c| c.trim().parse::<f64>()).collect();
            match row {
                Ok(row) => rows.push(row),
                Err(e) => {
                    return Err(Error::MalformedRecord {
                        path: path.as_ref().display().to_string(),
                        line: idx + 2,
                        message: e.to_string(),
                    });
                }
            }
        }
        FeatureMatrix::new(DenseMatrix::from_rows(&rows)?, instance_ids)
    }
}

/// Affine map plus sigmoid: activations are `sigmoid(weights * x + bias)`.
/// `weights` is scenarios by features, `bias` one entry per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHead {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ScenarioHead {
    /// All-zero head: every activation starts at one half.
    pub fn zeros(k: usize, feature_dim: usize) -> ScenarioHead {
        ScenarioHead {
            weights: DenseMatrix::zeros(k, feature_dim),
            bias: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<ScenarioHead> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let head: ScenarioHead = serde_json::from_reader(file)?;
        if head.bias.len() != head.weights.rows() {
            return Err(Error::dims(
                "head bias length",
                head.weights.rows(),
                head.bias.len(),
            ));
        }
        Ok(head)
    }

    /// Activations for raw feature columns, scenarios by instances.
    fn forward_dense(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = self.weights.matmul(x)?;
        for q in 0..z.rows() {
            let b = self.bias[q];
            for j in 0..z.cols() {
                let v = sigmoid(z[(q, j)] + b);
                z[(q, j)] = v;
            }
        }
        Ok(z)
    }
}

/// Runs the head over a feature matrix. Every activation is strictly
/// inside (0, 1).
pub fn head_forward(head: &ScenarioHead, x: &FeatureMatrix) -> Result<EncodingMatrix> {
    if head.feature_dim() != x.feature_dim() {
        return Err(Error::dims(
            "head feature dimension",
            head.feature_dim(),
            x.feature_dim(),
        ));
    }
    let matrix = head.forward_dense(x.matrix())?;
    debug_assert!(matrix.data().iter().all(|&v| v > 0.0 && v < 1.0));
    Ok(EncodingMatrix {
        matrix,
        instance_ids: x.instance_ids().to_vec(),
    })
}

/// Mini-batch training schedule shared by head training and joint
/// finetuning. Learning rates are starting points; each epoch backtracks
/// them until the full objective does not increase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Step size for head (and, in finetuning, classifier) parameters.
    pub head_lr: f64,
    /// A dictionary update runs after every this many batch iterations.
    /// Zero disables dictionary updates entirely.
    pub dict_update_period: usize,
    /// Step size for the projected dictionary updates.
    pub dict_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the cross-entropy term during joint finetuning. At zero
    /// the classifier is left untouched to the bit.
    pub lambda_ce: f64,
    /// Seeds the one-time shuffle that fixes batch membership.
    pub seed: u64,
    /// Alternative objective: regress activations onto the encoding the
    /// iterative solver produces, instead of minimizing reconstruction
    /// loss. Dictionary updates do not apply in this mode.
    pub regress_to_encoding: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            head_lr: 0.05,
            dict_update_period: 4,
            dict_lr: 0.02,
            epochs: 60,
            batch_size: 32,
            lambda_ce: 1.0,
            seed: 0,
            regress_to_encoding: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_lr.is_finite() && self.head_lr > 0.0) {
            return Err(Error::invalid("head_lr must be positive and finite"));
        }
        if !(self.dict_lr.is_finite() && self.dict_lr > 0.0) {
            return Err(Error::invalid("dict_lr must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lambda_ce.is_finite() && self.lambda_ce >= 0.0) {
            return Err(Error::invalid("lambda_ce must be non-negative and finite"));
        }
        Ok(())
    }
}

/// One fixed slice of the training set. Columns were drawn once from a
/// seeded shuffle and reused every epoch, so epoch losses are comparable.
struct Batch {
    a: DenseMatrix,
    x: DenseMatrix,
    omega: DenseMatrix,
    regression_target: Option<DenseMatrix>,
    class_targets: Vec<usize>,
}

struct TrainState {
    head: ScenarioHead,
    w: DenseMatrix,
    clf: Option<SceneClassifier>,
}

impl Clone for TrainState {
    fn clone(&self) -> Self {
        TrainState {
            head: self.head.clone(),
            w: self.w.clone(),
            clf: self.clf.clone(),
        }
    }
}

fn prepare_batches(
    a: &ObjectSceneMatrix,
    x: &FeatureMatrix,
    omega: Option<&DenseMatrix>,
    regression_target: Option<&DenseMatrix>,
    class_targets: Option<&[usize]>,
    batch_size: usize,
    seed: u64,
) -> Vec<Batch> {
    let n = a.n_instances();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch {
            a: a.matrix().select_columns(chunk),
            x: x.matrix().select_columns(chunk),
            omega: omega
                .map(|o| o.select_columns(chunk))
                .unwrap_or_else(|| DenseMatrix::zeros(0, 0)),
            regression_target: regression_target.map(|t| t.select_columns(chunk)),
            class_targets: class_targets
                .map(|t| chunk.iter().map(|&j| t[j]).collect())
                .unwrap_or_default(),
        })
        .collect()
}

/// Full objective at the current parameters, accumulated batch by batch
/// so the complete activation matrix is never materialized. Dictionary
/// regularizers are counted once.
fn total_loss(
    batches: &[Batch],
    state: &TrainState,
    cfg: &PbmfConfig,
    lambda_ce: f64,
    n_total: usize,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut fit_cfg = cfg.clone();
    fit_cfg.alpha1 = 0.0;
    fit_cfg.alpha2 = 0.0;
    for batch in batches {
        let hhat = state.head.forward_dense(&batch.x)?;
        if let Some(target) = &batch.regression_target {
            loss += hhat.sub(target)?.frob_sq();
            continue;
        }
        loss += pbmf::pbmf_loss_dense(&batch.a, &state.w, &hhat, &batch.omega, &fit_cfg)?;
        if lambda_ce > 0.0 {
            if let Some(clf) = &state.clf {
                let logits = clf.weights.matmul(&hhat)?;
                for (j, &target) in batch.class_targets.iter().enumerate() {
                    let col: Vec<f64> = (0..clf.n_classes())
                        .map(|c| logits[(c, j)] + clf.bias[c])
                        .collect();
                    let probs = classifier::softmax(&col);
                    loss -= lambda_ce * probs[target].max(f64::MIN_POSITIVE).ln() / n_total as f64;
                }
            }
        }
    }
    if batches.iter().all(|b| b.regression_target.is_none()) {
        loss += cfg.alpha1 * pbmf::overlap_penalty(&state.w) + cfg.alpha2 * state.w.l1_norm();
    }
    Ok(loss)
}

/// Gradients of the full objective with respect to head parameters (and
/// classifier parameters when the cross-entropy term is active),
/// evaluated on one batch.
fn head_gradients(
    batch: &Batch,
    state: &TrainState,
    cfg: &PbmfConfig,
    lambda_ce: f64,
    n_total: usize,
) -> Result<HeadGradients> {
    let hhat = state.head.forward_dense(&batch.x)?;

    let mut grad_h;
    let mut clf_grads = None;
    if let Some(target) = &batch.regression_target {
        grad_h = hhat.sub(target)?.map(|v| 2.0 * v);
    } else {
        let r = pbmf::weighted_residual(&batch.a, &state.w, &hhat, &batch.omega)?;
        grad_h = state
            .w
            .transpose()
            .matmul(&r)?
            .map(|v| -2.0 * v + cfg.alpha3);
        if lambda_ce > 0.0 {
            if let Some(clf) = &state.clf {
                let logits = clf.weights.matmul(&hhat)?;
                let mut g_logits = DenseMatrix::zeros(clf.n_classes(), hhat.cols());
                for (j, &target) in batch.class_targets.iter().enumerate() {
                    let col: Vec<f64> = (0..clf.n_classes())
                        .map(|c| logits[(c, j)] + clf.bias[c])
                        .collect();
                    let probs = classifier::softmax(&col);
                    for c in 0..clf.n_classes() {
                        let y = if c == target { 1.0 } else { 0.0 };
                        g_logits[(c, j)] = lambda_ce * (probs[c] - y) / n_total as f64;
                    }
                }
                grad_h = grad_h.zip_map(&clf.weights.transpose().matmul(&g_logits)?, |a, b| a + b)?;
                let grad_v = g_logits.matmul(&hhat.transpose())?;
                let grad_bias = (0..clf.n_classes()).map(|c| g_logits.row(c).iter().sum()).collect();
                clf_grads = Some((grad_v, grad_bias));
            }
        }
    }

    let delta = grad_h.zip_map(&hhat, |g, h| g * h * (1.0 - h))?;
    let grad_weights = delta.matmul(&batch.x.transpose())?;
    let grad_bias = (0..delta.rows()).map(|q| delta.row(q).iter().sum()).collect();
    Ok(HeadGradients {
        weights: grad_weights,
        bias: grad_bias,
        classifier: clf_grads,
    })
}

struct HeadGradients {
    weights: DenseMatrix,
    bias: Vec<f64>,
    classifier: Option<(DenseMatrix, Vec<f64>)>,
}

/// Reconstruction gradient for the dictionary at fixed head parameters,
/// summed over the batches without ever forming the full activation
/// matrix. Equals the full-batch gradient because the fit term is a sum
/// over instances; regularizer terms are added once at the end.
fn dict_gradient(batches: &[Batch], state: &TrainState, cfg: &PbmfConfig) -> Result<DenseMatrix> {
    let mut fit_cfg = cfg.clone();
    fit_cfg.alpha1 = 0.0;
    fit_cfg.alpha2 = 0.0;
    fit_cfg.alpha3 = 0.0;
    let mut grad = DenseMatrix::zeros(state.w.rows(), state.w.cols());
    for batch in batches {
        let hhat = state.head.forward_dense(&batch.x)?;
        let (gw, _) = pbmf::pbmf_gradients_dense(&batch.a, &state.w, &hhat, &batch.omega, &fit_cfg)?;
        grad = grad.zip_map(&gw, |a, b| a + b)?;
    }
    let mut gram = state.w.transpose().matmul(&state.w)?;
    for q in 0..gram.rows() {
        gram[(q, q)] = 0.0;
    }
    let reg = state.w.matmul(&gram)?;
    grad.zip_map(&reg, |g, r| g + 4.0 * cfg.alpha1 * r + cfg.alpha2)
}

fn apply_head_step(state: &mut TrainState, grads: &HeadGradients, lr: f64) -> Result<()> {
    state.head.weights = state.head.weights.zip_map(&grads.weights, |w, g| w - lr * g)?;
    for (b, g) in state.head.bias.iter_mut().zip(&grads.bias) {
        *b -= lr * g;
    }
    if let Some((grad_v, grad_bias)) = &grads.classifier {
        let clf = state.clf.as_mut().expect("classifier gradients without classifier");
        clf.weights = clf.weights.zip_map(grad_v, |w, g| w - lr * g)?;
        for (b, g) in clf.bias.iter_mut().zip(grad_bias) {
            *b -= lr * g;
        }
    }
    Ok(())
}

fn run_epoch(
    batches: &[Batch],
    state: &mut TrainState,
    cfg: &PbmfConfig,
    sched: &TrainSchedule,
    lambda_ce: f64,
    n_total: usize,
    lr_head: f64,
    lr_dict: f64,
    counter: &mut usize,
    regression: bool,
) -> Result<()> {
    for batch in batches {
        let grads = head_gradients(batch, state, cfg, lambda_ce, n_total)?;
        apply_head_step(state, &grads, lr_head)?;
        *counter += 1;
        if !regression
            && sched.dict_update_period > 0
            && *counter % sched.dict_update_period == 0
        {
            let grad = dict_gradient(batches, state, cfg)?;
            state.w = clip_unit(&state.w.zip_map(&grad, |w, g| w - lr_dict * g)?);
            debug_assert!(state.w.in_unit_box());
        }
    }
    Ok(())
}

/// Shared engine. Epochs are accepted only if the full objective did not
/// increase; otherwise both learning rates are halved and the epoch is
/// rerun from its snapshot. The recorded history is therefore
/// non-increasing, one entry per epoch after the initial loss.
fn run_training(
    batches: &[Batch],
    mut state: TrainState,
    cfg: &PbmfConfig,
    sched: &TrainSchedule,
    lambda_ce: f64,
    n_total: usize,
    regression: bool,
) -> Result<(TrainState, Vec<f64>)> {
    let mut history = vec![total_loss(batches, &state, cfg, lambda_ce, n_total)?];
    if !history[0].is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut lr_head = sched.head_lr;
    let mut lr_dict = sched.dict_lr;
    let mut counter = 0usize;
    'epochs: for _ in 0..sched.epochs {
        let epoch_start = *history.last().expect("seeded history");
        let mut first_try = true;
        loop {
            let snapshot = state.clone();
            let saved_counter = counter;
            run_epoch(
                batches, &mut state, cfg, sched, lambda_ce, n_total, lr_head, lr_dict,
                &mut counter, regression,
            )?;
            let end = total_loss(batches, &state, cfg, lambda_ce, n_total)?;
            if !end.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: history.len(),
                });
            }
            if end <= epoch_start {
                history.push(end);
                if first_try {
                    lr_head = (lr_head / LR_BACKTRACK).min(LR_CEIL);
                    lr_dict = (lr_dict / LR_BACKTRACK).min(LR_CEIL);
                }
                continue 'epochs;
            }
            state = snapshot;
            counter = saved_counter;
            lr_head *= LR_BACKTRACK;
            lr_dict *= LR_BACKTRACK;
            first_try = false;
            if lr_head < LR_FLOOR && lr_dict < LR_FLOOR {
                // No step at any rate improves the objective: converged.
                history.push(epoch_start);
                break 'epochs;
            }
        }
    }
    Ok((state, history))
}

fn check_alignment(a: &ObjectSceneMatrix, x: &FeatureMatrix, model: &ScenarioModel) -> Result<()> {
    if a.instance_ids() != x.instance_ids() {
        return Err(Error::invalid(
            "feature matrix instances do not match scene matrix instances",
        ));
    }
    if a.object_names() != model.object_names.as_slice() {
        return Err(Error::invalid(
            "scene matrix objects do not match model objects",
        ));
    }
    Ok(())
}

/// Trains a fresh head (zero initialized) against the model's dictionary
/// and configuration. Returns the head, the model with its possibly
/// updated dictionary, and the per-epoch loss history, starting at the
/// initial loss.
pub fn train_head(
    a: &ObjectSceneMatrix,
    x: &FeatureMatrix,
    model: &ScenarioModel,
    sched: &TrainSchedule,
) -> Result<(ScenarioHead, ScenarioModel, Vec<f64>)> {
    sched.validate()?;
    check_alignment(a, x, model)?;
    let cfg = &model.config;

    let (omega, target);
    if sched.regress_to_encoding {
        omega = None;
        target = Some(pbmf::encode(a, model)?.matrix);
    } else {
        omega = Some(pbmf::weights_for(a, cfg, false)?.matrix);
        target = None;
    }
    let batches = prepare_batches(
        a,
        x,
        omega.as_ref(),
        target.as_ref(),
        None,
        sched.batch_size,
        sched.seed,
    );
    let state = TrainState {
        head: ScenarioHead::zeros(model.k(), x.feature_dim()),
        w: model.dictionary.clone(),
        clf: None,
    };
    let (state, history) = run_training(
        &batches,
        state,
        cfg,
        sched,
        0.0,
        a.n_instances(),
        sched.regress_to_encoding,
    )?;
    let model_out = ScenarioModel {
        dictionary: state.w,
        object_names: model.object_names.clone(),
        config: cfg.clone(),
    };
    Ok((state.head, model_out, history))
}

/// Continues training head, dictionary, and classifier against the
/// combined objective: reconstruction loss plus `lambda_ce` times the
/// mean cross-entropy of the classifier on head activations. With
/// `lambda_ce` zero the classifier comes back bit-identical and the rest
/// behaves exactly like `train_head` resumed from the given head.
pub fn joint_finetune(
    a: &ObjectSceneMatrix,
    x: &FeatureMatrix,
    labels: &[String],
    model: &ScenarioModel,
    head: &ScenarioHead,
    clf: &SceneClassifier,
    sched: &TrainSchedule,
) -> Result<(ScenarioHead, ScenarioModel, SceneClassifier, Vec<f64>)> {
    sched.validate()?;
    check_alignment(a, x, model)?;
    if sched.regress_to_encoding {
        return Err(Error::invalid(
            "regression head training does not support joint finetuning",
        ));
    }
    if head.k() != model.k() {
        return Err(Error::dims("head scenario count", model.k(), head.k()));
    }
    if head.feature_dim() != x.feature_dim() {
        return Err(Error::dims(
            "head feature dimension",
            x.feature_dim(),
            head.feature_dim(),
        ));
    }
    if clf.k() != model.k() {
        return Err(Error::dims("classifier scenario count", model.k(), clf.k()));
    }
    if labels.len() != a.n_instances() {
        return Err(Error::dims("label count", a.n_instances(), labels.len()));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| clf.class_index(l))
        .collect::<Result<_>>()?;

    let cfg = &model.config;
    let omega = pbmf::weights_for(a, cfg, false)?.matrix;
    let batches = prepare_batches(
        a,
        x,
        Some(&omega),
        None,
        Some(&targets),
        sched.batch_size,
        sched.seed,
    );
    let state = TrainState {
        head: head.clone(),
        w: model.dictionary.clone(),
        clf: Some(clf.clone()),
    };
    let (state, history) = run_training(
        &batches,
        state,
        cfg,
        sched,
        sched.lambda_ce,
        a.n_instances(),
        false,
    )?;
    let model_out = ScenarioModel {
        dictionary: state.w,
        object_names: model.object_names.clone(),
        config: cfg.clone(),
    };
    let clf_out = state.clf.expect("classifier survives training");
    Ok((state.head, model_out, clf_out, history))
}

/// Fraction of activation entries within 0.25 of either 0 or 1. Trained
/// heads tend to push this high; it is reported, not enforced.
pub fn encoding_bimodality(h: &DenseMatrix) -> f64 {
    if h.data().is_empty() {
        return 0.0;
    }
    let near = h
        .data()
        .iter()
        .filter(|&&v| v <= 0.25 || v >= 0.75)
        .count();
    near as f64 / h.data().len() as f64
}
