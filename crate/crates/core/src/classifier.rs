//! Scene classification over scenario encodings: multinomial logistic
//! regression, per-class scenario influence scores, and instance
//! explanations naming the scenarios and member objects behind a
//! prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::pbmf::{EncodingMatrix, ScenarioModel};

/// Linear classifier over encodings; one weight row and bias per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClassifier {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
}

impl SceneClassifier {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn k(&self) -> usize {
        self.weights.cols()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownName {
                kind: "class",
                name: name.to_string(),
            })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<SceneClassifier> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let clf: SceneClassifier = serde_json::from_reader(file)?;
        if clf.bias.len() != clf.weights.rows() || clf.class_names.len() != clf.weights.rows() {
            return Err(Error::dims(
                "classifier class count",
                clf.weights.rows(),
                clf.class_names.len(),
            ));
        }
        Ok(clf)
    }
}

/// Numerically safe softmax; subtracts the max before exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Lowest index among the maxima.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy plus `l2 * ||V||_F^2`, with gradients for the weights
/// and bias. `targets` holds each column's class index.
fn ce_loss_and_grads(
    v: &DenseMatrix,
    bias: &[f64],
    h: &DenseMatrix,
    targets: &[usize],
    l2: f64,
) -> Result<(f64, DenseMatrix, Vec<f64>)> {
    let n = h.cols();
    let classes = v.rows();
    let mut logits = v.matmul(h)?;
    for c in 0..classes {
        for j in 0..n {
            logits[(c, j)] += bias[c];
        }
    }

    let mut loss = 0.0;
    // grad of mean CE w.r.t. logits: (softmax - onehot) / n
    let mut grad_logits = DenseMatrix::zeros(classes, n);
    for j in 0..n {
        let column: Vec<f64> = (0..classes).map(|c| logits[(c, j)]).collect();
        let probs = softmax(&column);
        loss -= probs[targets[j]].max(f64::MIN_POSITIVE).ln();
        for c in 0..classes {
            let indicator = if c == targets[j] { 1.0 } else { 0.0 };
            grad_logits[(c, j)] = (probs[c] - indicator) / n as f64;
        }
    }
    loss /= n as f64;
    loss += l2 * v.frob_sq();

    let mut grad_v = grad_logits.matmul(&h.transpose())?;
    grad_v = grad_v.zip_map(v, |g, w| g + 2.0 * l2 * w)?;
    let grad_b: Vec<f64> = (0..classes)
        .map(|c| (0..n).map(|j| grad_logits[(c, j)]).sum())
        .collect();
    Ok((loss, grad_v, grad_b))
}

/// Trains the classifier by gradient descent with backtracking; parameters
/// start at zero, class names are the sorted distinct labels, so the result
/// is deterministic.
pub fn fit(
    h: &EncodingMatrix,
    labels: &[String],
    l2: f64,
    iters: usize,
    lr: f64,
    _seed: u64,
) -> Result<SceneClassifier> {
    if labels.len() != h.n_instances() {
        return Err(Error::dims("classifier labels", h.n_instances(), labels.len()));
    }
    if l2 < 0.0 {
        return Err(Error::invalid("l2 must be nonnegative"));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut class_names: Vec<String> = labels.to_vec();
    class_names.sort();
    class_names.dedup();
    if class_names.len() < 2 {
        return Err(Error::invalid("classifier needs at least 2 classes"));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).expect("from labels"))
        .collect();

    let k = h.k();
    let classes = class_names.len();
    let mut v = DenseMatrix::zeros(classes, k);
    let mut bias = vec![0.0; classes];
    let mut step = lr;
    let (mut loss, mut grad_v, mut grad_b) = ce_loss_and_grads(&v, &bias, &h.matrix, &targets, l2)?;
    for _ in 0..iters {
        let mut accepted = false;
        while step >= 1e-18 {
            let cand_v = v.zip_map(&grad_v, |x, g| x - step * g)?;
            let cand_b: Vec<f64> = bias
                .iter()
                .zip(&grad_b)
                .map(|(x, g)| x - step * g)
                .collect();
            let (cand_loss, cand_gv, cand_gb) =
                ce_loss_and_grads(&cand_v, &cand_b, &h.matrix, &targets, l2)?;
            if cand_loss <= loss {
                v = cand_v;
                bias = cand_b;
                loss = cand_loss;
                grad_v = cand_gv;
                grad_b = cand_gb;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    Ok(SceneClassifier {
        weights: v,
        bias,
        class_names,
    })
}

/// Class probabilities and the argmax class (lowest index on ties).
pub fn predict(clf: &SceneClassifier, h_col: &[f64]) -> Result<(String, Vec<f64>)> {
    if h_col.len() != clf.k() {
        return Err(Error::dims("encoding length", clf.k(), h_col.len()));
    }
    let logits: Vec<f64> = (0..clf.n_classes())
        .map(|c| {
            clf.bias[c]
                + h_col
                    .iter()
                    .enumerate()
                    .map(|(q, &hv)| clf.weights[(c, q)] * hv)
                    .sum::<f64>()
        })
        .collect();
    let probs = softmax(&logits);
    let class = clf.class_names[argmax_first(&probs)].clone();
    Ok((class, probs))
}

/// The trained weight tying a scenario to a class; positive values vote for
/// the class when the scenario is active.
pub fn influence(clf: &SceneClassifier, class: &str, scenario_index: usize) -> Result<f64> {
    let class_idx = clf.class_index(class)?;
    if scenario_index >= clf.k() {
        return Err(Error::invalid(format!(
            "scenario index {scenario_index} out of range for k = {}",
            clf.k()
        )));
    }
    Ok(clf.weights[(class_idx, scenario_index)])
}

/// Objects listed for a scenario in explanations must exceed this dictionary
/// weight.
pub const OBJECT_MEMBERSHIP_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberObject {
    pub object_name: String,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioContribution {
    pub scenario_index: usize,
    pub encoding_coefficient: f64,
    pub influence_score: f64,
    pub member_objects: Vec<MemberObject>,
}

/// Why an instance was classified the way it was: the prediction itself plus
/// the strongest scenarios, each with its class influence and member
/// objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub predicted_class: String,
    pub class_probabilities: Vec<f64>,
    pub top_scenarios: Vec<ScenarioContribution>,
}

pub fn explain(
    clf: &SceneClassifier,
    model: &ScenarioModel,
    h_col: &[f64],
    top_n: usize,
) -> Result<Explanation> {
    explain_with_threshold(clf, model, h_col, top_n, OBJECT_MEMBERSHIP_THRESHOLD)
}

pub fn explain_with_threshold(
    clf: &SceneClassifier,
    model: &ScenarioModel,
    h_col: &[f64],
    top_n: usize,
    membership_threshold: f64,
) -> Result<Explanation> {
    if top_n > clf.k() {
        return Err(Error::invalid(format!(
            "top_n = {top_n} exceeds scenario count {}",
            clf.k()
        )));
    }
    if model.k() != clf.k() {
        return Err(Error::dims("model scenario count", clf.k(), model.k()));
    }
    let (predicted_class, class_probabilities) = predict(clf, h_col)?;

    let mut order: Vec<usize> = (0..h_col.len()).collect();
    order.sort_by(|&x, &y| h_col[y].partial_cmp(&h_col[x]).expect("finite encoding"));
    order.truncate(top_n);

    let mut top_scenarios = Vec::with_capacity(top_n);
    for q in order {
        let mut member_objects: Vec<MemberObject> = (0..model.n_objects())
            .filter(|&i| model.dictionary[(i, q)] > membership_threshold)
            .map(|i| MemberObject {
                object_name: model.object_names[i].clone(),
                importance: model.dictionary[(i, q)],
            })
            .collect();
        member_objects.sort_by(|a, b| {
            b.importance
                .partial_cmp(&a.importance)
                .expect("finite weights")
        });
        top_scenarios.push(ScenarioContribution {
            scenario_index: q,
            encoding_coefficient: h_col[q],
            influence_score: influence(clf, &predicted_class, q)?,
            member_objects,
        });
    }
    Ok(Explanation {
        predicted_class,
        class_probabilities,
        top_scenarios,
    })
}

/// Plain-text rendering of an explanation, one scenario per stanza.
pub fn render_explanation(explanation: &Explanation) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let confidence = explanation
        .class_probabilities
        .iter()
        .fold(f64::NEG_INFINITY, |m, &p| m.max(p));
    let _ = writeln!(
        out,
        "predicted class: {} (p = {confidence:.3})",
        explanation.predicted_class
    );
    for contribution in &explanation.top_scenarios {
        let _ = writeln!(
            out,
            "scenario {}: activation {:.3}, influence {:+.3}",
            contribution.scenario_index,
            contribution.encoding_coefficient,
            contribution.influence_score
        );
        for member in &contribution.member_objects {
            let _ = writeln!(out, "  {} ({:.2})", member.object_name, member.importance);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pbmf::PbmfConfig;

    fn encoding(data: &[Vec<f64>]) -> EncodingMatrix {
        let matrix = DenseMatrix::from_rows(data).unwrap();
        let ids = (0..matrix.cols()).map(|j| format!("i{j}")).collect();
        EncodingMatrix {
            matrix,
            instance_ids: ids,
        }
    }

    fn separable_fixture() -> (EncodingMatrix, Vec<String>) {
        // class a activates scenario 0, class b scenario 1
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        for j in 0..20 {
            if j % 2 == 0 {
                cols.push(vec![0.9, 0.05]);
                labels.push("a".to_string());
            } else {
                cols.push(vec![0.1, 0.95]);
                labels.push("b".to_string());
            }
        }
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|q| cols.iter().map(|c| c[q]).collect())
            .collect();
        (encoding(&rows), labels)
    }

    #[test]
    fn fit_separates_disjoint_classes() {
        let (h, labels) = separable_fixture();
        let clf = fit(&h, &labels, 1e-4, 300, 0.5, 0).unwrap();
        let mut hits = 0;
        for j in 0..h.n_instances() {
            let (class, probs) = predict(&clf, &h.matrix.column(j)).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if class == labels[j] {
                hits += 1;
            }
        }
        assert!(hits as f64 / labels.len() as f64 >= 0.99);
    }

    #[test]
    fn fit_is_deterministic() {
        let (h, labels) = separable_fixture();
        let one = fit(&h, &labels, 1e-4, 100, 0.5, 0).unwrap();
        let two = fit(&h, &labels, 1e-4, 100, 0.5, 99).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn fit_large_l2_flattens() {
        let (h, labels) = separable_fixture();
        let clf = fit(&h, &labels, 1e6, 200, 0.5, 0).unwrap();
        assert!(clf.weights.frob_sq().sqrt() <= 0.01);
        let (_, probs) = predict(&clf, &h.matrix.column(0)).unwrap();
        for &p in &probs {
            assert!((p - 0.5).abs() <= 0.01);
        }
    }

    #[test]
    fn fit_rejects_single_class() {
        let (h, _) = separable_fixture();
        let labels = vec!["only".to_string(); h.n_instances()];
        assert!(fit(&h, &labels, 1e-4, 10, 0.5, 0).is_err());
    }

    #[test]
    fn fit_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let k = 4;
        let n = 20;
        let classes = 3;
        let mut h = DenseMatrix::zeros(k, n);
        for v in h.data_mut() {
            *v = rng.random::<f64>();
        }
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut v = DenseMatrix::zeros(classes, k);
        for val in v.data_mut() {
            *val = rng.random::<f64>() - 0.5;
        }
        let bias: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() - 0.5).collect();
        let l2 = 1e-3;

        let (_, grad_v, grad_b) = ce_loss_and_grads(&v, &bias, &h, &targets, l2).unwrap();
        let step = 1e-6;
        for r in 0..classes {
            for c in 0..k {
                let mut plus = v.clone();
                plus[(r, c)] += step;
                let mut minus = v.clone();
                minus[(r, c)] -= step;
                let (lp, _, _) = ce_loss_and_grads(&plus, &bias, &h, &targets, l2).unwrap();
                let (lm, _, _) = ce_loss_and_grads(&minus, &bias, &h, &targets, l2).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let analytic = grad_v[(r, c)];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "V({r},{c}): analytic {analytic} vs numeric {numeric}"
                );
            }
            let mut plus = bias.clone();
            plus[r] += step;
            let mut minus = bias.clone();
            minus[r] -= step;
            let (lp, _, _) = ce_loss_and_grads(&v, &plus, &h, &targets, l2).unwrap();
            let (lm, _, _) = ce_loss_and_grads(&v, &minus, &h, &targets, l2).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let denom = grad_b[r].abs().max(numeric.abs()).max(1e-8);
            assert!((numeric - grad_b[r]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn predict_uniform_at_zero_parameters() {
        let clf = SceneClassifier {
            weights: DenseMatrix::zeros(3, 2),
            bias: vec![0.0; 3],
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let (class, probs) = predict(&clf, &[0.4, 0.6]).unwrap();
        assert_eq!(class, "a");
        for &p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_shift_invariant() {
        let clf = SceneClassifier {
            weights: DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![0.2, 0.8]]).unwrap(),
            bias: vec![0.1, -0.3],
            class_names: vec!["a".into(), "b".into()],
        };
        let shifted = SceneClassifier {
            bias: clf.bias.iter().map(|b| b + 7.5).collect(),
            ..clf.clone()
        };
        let (c1, p1) = predict(&clf, &[0.3, 0.9]).unwrap();
        let (c2, p2) = predict(&shifted, &[0.3, 0.9]).unwrap();
        assert_eq!(c1, c2);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let classes = 3;
        let k = 5;
        let mut weights = DenseMatrix::zeros(classes, k);
        for v in weights.data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let bias: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
        let clf = SceneClassifier {
            weights: weights.clone(),
            bias: bias.clone(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let h: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let (_, probs) = predict(&clf, &h).unwrap();

        let logits: Vec<f64> = (0..classes)
            .map(|c| {
                let mut z = bias[c];
                for (q, &hv) in h.iter().enumerate() {
                    z += weights[(c, q)] * hv;
                }
                z
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (p, e) in probs.iter().zip(&exps) {
            assert!((p - e / total).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_rejects_wrong_length() {
        let clf = SceneClassifier {
            weights: DenseMatrix::zeros(2, 3),
            bias: vec![0.0; 2],
            class_names: vec!["a".into(), "b".into()],
        };
        assert!(predict(&clf, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn influence_contract() {
        let zero = SceneClassifier {
            weights: DenseMatrix::zeros(2, 3),
            bias: vec![0.0; 2],
            class_names: vec!["a".into(), "b".into()],
        };
        for q in 0..3 {
            assert_eq!(influence(&zero, "a", q).unwrap(), 0.0);
        }
        assert!(influence(&zero, "missing", 0).is_err());
        assert!(influence(&zero, "a", 3).is_err());

        // scenario 0 only ever fires for class a
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        for j in 0..30 {
            if j % 3 == 0 {
                cols.push(vec![0.95, 0.0, 0.5]);
                labels.push("a".to_string());
            } else if j % 3 == 1 {
                cols.push(vec![0.0, 0.9, 0.5]);
                labels.push("b".to_string());
            } else {
                cols.push(vec![0.0, 0.1, 0.9]);
                labels.push("c".to_string());
            }
        }
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|q| cols.iter().map(|c| c[q]).collect())
            .collect();
        let h = encoding(&rows);
        let clf = fit(&h, &labels, 1e-4, 300, 0.5, 0).unwrap();
        let a_influence = influence(&clf, "a", 0).unwrap();
        for other in ["b", "c"] {
            assert!(
                a_influence > influence(&clf, other, 0).unwrap(),
                "scenario 0 should point at class a"
            );
        }
    }

    fn small_model(k: usize) -> ScenarioModel {
        ScenarioModel {
            dictionary: DenseMatrix::from_rows(&[
                vec![0.9, 0.1],
                vec![0.6, 0.05],
                vec![0.15, 0.8],
            ])
            .unwrap(),
            object_names: vec!["bed".into(), "lamp".into(), "desk".into()],
            config: PbmfConfig {
                k,
                ..PbmfConfig::default()
            },
        }
    }

    #[test]
    fn explain_contract() {
        let clf = SceneClassifier {
            weights: DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            class_names: vec!["bedroom".into(), "office".into()],
        };
        let model = small_model(2);

        // one-hot encoding puts that scenario first
        let explanation = explain(&clf, &model, &[0.0, 1.0], 2).unwrap();
        assert_eq!(explanation.top_scenarios[0].scenario_index, 1);
        assert_eq!(explanation.predicted_class, "office");
        assert!((explanation.class_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        // members above threshold, sorted by dictionary weight
        let first = explain(&clf, &model, &[1.0, 0.0], 1).unwrap();
        let members = &first.top_scenarios[0].member_objects;
        assert_eq!(members.len(), 2);
        assert_eq!(members[0].object_name, "bed");
        assert_eq!(members[1].object_name, "lamp");
        assert!(members[0].importance >= members[1].importance);

        // influence of the listed scenario matches the weight table
        assert_eq!(
            first.top_scenarios[0].influence_score,
            influence(&clf, "bedroom", 0).unwrap()
        );

        assert!(explain(&clf, &model, &[1.0, 0.0], 3).is_err());

        let text = render_explanation(&first);
        assert!(text.contains("bedroom"));
        assert!(text.contains("bed"));
    }

    #[test]
    fn classifier_round_trip() {
        let clf = SceneClassifier {
            weights: DenseMatrix::from_rows(&[vec![0.25, -1.5], vec![0.75, 2.0]]).unwrap(),
            bias: vec![0.125, -0.0625],
            class_names: vec!["x".into(), "y".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        clf.save_json(&path).unwrap();
        assert_eq!(SceneClassifier::load_json(&path).unwrap(), clf);
    }
}
