//! Metrics shared by the experiments: reconstruction error under the three
//! product conventions, ranking metrics (average precision, macro-AUPRC,
//! PR curves), and classification accuracy.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{soft_cap, DenseMatrix};

/// How factor products are turned into a reconstruction before comparing
/// against the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductKind {
    /// Plain matrix product.
    Real,
    /// Soft-capped product `min(WH, 1 + 0.01 WH)`.
    PseudoBoolean,
    /// Saturating product `min(WH, 1)`; Boolean OR for binary factors.
    Boolean,
}

impl std::str::FromStr for ProductKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ProductKind> {
        match s {
            "real" => Ok(ProductKind::Real),
            "pseudo_boolean" => Ok(ProductKind::PseudoBoolean),
            "boolean" => Ok(ProductKind::Boolean),
            other => Err(Error::invalid(format!(
                "unknown product kind '{other}' (expected real, pseudo_boolean, or boolean)"
            ))),
        }
    }
}

/// Squared Frobenius norm of the (optionally weighted) residual between `a`
/// and the chosen product of the factors.
pub fn reconstruction_error(
    a: &DenseMatrix,
    w: &DenseMatrix,
    h: &DenseMatrix,
    omega: Option<&DenseMatrix>,
    kind: ProductKind,
) -> Result<f64> {
    let mut recon = w.matmul(h)?;
    match kind {
        ProductKind::Real => {}
        ProductKind::PseudoBoolean => recon.map_inplace(soft_cap),
        ProductKind::Boolean => recon.map_inplace(|v| v.min(1.0)),
    }
    if recon.shape() != a.shape() {
        return Err(Error::dims(
            "reconstruction shape",
            format!("{:?}", a.shape()),
            format!("{:?}", recon.shape()),
        ));
    }
    if let Some(om) = omega {
        if om.shape() != a.shape() {
            return Err(Error::dims(
                "weight shape",
                format!("{:?}", a.shape()),
                format!("{:?}", om.shape()),
            ));
        }
    }
    let mut total = 0.0;
    for (idx, (&av, &rv)) in a.data().iter().zip(recon.data()).enumerate() {
        let weight = omega.map_or(1.0, |om| om.data()[idx]);
        let r = weight * (av - rv);
        total += r * r;
    }
    Ok(total)
}

fn ranking_order(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: ties keep input order
    order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).expect("finite scores"));
    Ok(order)
}

fn validate_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Step-wise average precision of the ranking by descending score: the mean
/// over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("average_precision", scores.len(), labels.len()));
    }
    validate_labels(labels)?;
    let positives = labels.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 {
        return Err(Error::invalid("average_precision needs at least one positive"));
    }
    let order = ranking_order(scores)?;
    let mut true_positives = 0usize;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            true_positives += 1;
            total += true_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Precision-recall pairs at every rank of the descending-score ordering.
pub fn pr_curve(scores: &[f64], labels: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::dims("pr_curve", scores.len(), labels.len()));
    }
    validate_labels(labels)?;
    let positives = labels.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 {
        return Err(Error::invalid("pr_curve needs at least one positive"));
    }
    let order = ranking_order(scores)?;
    let mut true_positives = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            true_positives += 1;
        }
        points.push((
            true_positives as f64 / positives as f64,
            true_positives as f64 / (rank0 + 1) as f64,
        ));
    }
    Ok(points)
}

pub fn write_pr_curve(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "recall,precision")?;
    for (recall, precision) in points {
        writeln!(file, "{recall},{precision}")?;
    }
    Ok(())
}

/// Macro-AUPRC over object rows, with the rows that had no positives (and
/// were therefore excluded from the mean) reported by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuprc {
    pub value: f64,
    pub evaluated_objects: usize,
    pub skipped_objects: Vec<usize>,
}

/// Mean of [`average_precision`] over rows of the score matrix against the
/// matching rows of the binary label matrix.
pub fn macro_auprc(score_matrix: &DenseMatrix, label_matrix: &DenseMatrix) -> Result<MacroAuprc> {
    if score_matrix.shape() != label_matrix.shape() {
        return Err(Error::dims(
            "macro_auprc",
            format!("{:?}", label_matrix.shape()),
            format!("{:?}", score_matrix.shape()),
        ));
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = Vec::new();
    for i in 0..score_matrix.rows() {
        let labels = label_matrix.row(i);
        if labels.iter().all(|&v| v == 0.0) {
            skipped.push(i);
            continue;
        }
        total += average_precision(score_matrix.row(i), labels)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::invalid("no object row has a positive label"));
    }
    Ok(MacroAuprc {
        value: total / evaluated as f64,
        evaluated_objects: evaluated,
        skipped_objects: skipped,
    })
}

/// Fraction of positions where the two sequences agree exactly.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("accuracy", labels.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy over an empty set is undefined"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}
