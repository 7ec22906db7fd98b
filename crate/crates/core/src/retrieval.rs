//! Content index over scenario encodings: conjunctive queries mixing
//! scene classes, scenarios, and objects, pairwise instance comparison,
//! and the query-generation plus NDCG protocol used to score retrieval.
//!
//! The index stores one record per instance with its predicted class,
//! class probabilities, encoding, and reconstructed object scores.
//! Execution is a linear scan; records are immutable after build, so
//! concurrent readers are safe.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, SceneClassifier};
use crate::error::{Error, Result};
use crate::head::{FeatureMatrix, ScenarioHead, head_forward};
use crate::matrix::{ObjectSceneMatrix, pseudo_boolean_product};
use crate::pbmf::ScenarioModel;

/// Activation and object-score cutoffs used when a query term asks
/// whether a scenario or object "is present". Encodings are close to
/// binary, so the midpoint is the natural default for both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexThresholds {
    pub scenario_theta: f64,
    pub object_theta: f64,
}

impl Default for IndexThresholds {
    fn default() -> Self {
        IndexThresholds {
            scenario_theta: 0.5,
            object_theta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub instance_id: String,
    pub predicted_class: String,
    /// Aligned with the index's class names.
    pub class_probabilities: Vec<f64>,
    /// Scenario activations, length k.
    pub encoding: Vec<f64>,
    /// Reconstructed per-object presence scores, length = object count.
    pub object_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentIndex {
    records: Vec<IndexRecord>,
    object_names: Vec<String>,
    class_names: Vec<String>,
    thresholds: IndexThresholds,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    thresholds: IndexThresholds,
    object_names: Vec<String>,
    class_names: Vec<String>,
}

impl ContentIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn thresholds(&self) -> IndexThresholds {
        self.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: IndexThresholds) {
        self.thresholds = thresholds;
    }

    fn record(&self, id: &str) -> Result<&IndexRecord> {
        self.records
            .iter()
            .find(|r| r.instance_id == id)
            .ok_or_else(|| Error::UnknownName {
                kind: "instance",
                name: id.to_string(),
            })
    }

    /// One record per line. The first line carries thresholds and the
    /// object and class vocabularies.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let meta = IndexMeta {
            thresholds: self.thresholds,
            object_names: self.object_names.clone(),
            class_names: self.class_names.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&meta)?)?;
        for record in &self.records {
            writeln!(file, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<ContentIndex> {
        let file = BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut lines = file.lines();
        let meta_line = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::invalid("empty index file"))?;
        let meta: IndexMeta =
            serde_json::from_str(&meta_line).map_err(|e| Error::MalformedRecord {
                path: path.as_ref().display().to_string(),
                line: 1,
                message: e.to_string(),
            })?;
        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: IndexRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.as_ref().display().to_string(),
                    line: idx + 2,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        let index = ContentIndex {
            records,
            object_names: meta.object_names,
            class_names: meta.class_names,
            thresholds: meta.thresholds,
        };
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for record in &self.records {
            if !seen.insert(&record.instance_id) {
                return Err(Error::invalid(format!(
                    "duplicate instance id '{}' in index",
                    record.instance_id
                )));
            }
            if record.object_scores.len() != self.object_names.len() {
                return Err(Error::dims(
                    "object score length",
                    self.object_names.len(),
                    record.object_scores.len(),
                ));
            }
            if record.class_probabilities.len() != self.class_names.len() {
                return Err(Error::dims(
                    "class probability length",
                    self.class_names.len(),
                    record.class_probabilities.len(),
                ));
            }
            if record.encoding.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "encoding outside [0,1] for instance '{}'",
                    record.instance_id
                )));
            }
            if record.object_scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite object score for instance '{}'",
                    record.instance_id
                )));
            }
        }
        Ok(())
    }
}

/// Builds the index by running the head over the features and the
/// classifier over the resulting encodings. Object scores come from the
/// capped dictionary product on each encoding column.
pub fn build_index(
    model: &ScenarioModel,
    head: &ScenarioHead,
    clf: &SceneClassifier,
    x: &FeatureMatrix,
    ids: &[String],
) -> Result<ContentIndex> {
    if head.k() != model.k() {
        return Err(Error::dims("head scenario count", model.k(), head.k()));
    }
    if clf.k() != model.k() {
        return Err(Error::dims("classifier scenario count", model.k(), clf.k()));
    }
    if ids.len() != x.n_instances() {
        return Err(Error::dims("instance id count", x.n_instances(), ids.len()));
    }
    let encoding = head_forward(head, x)?;
    let scores = pseudo_boolean_product(&model.dictionary, &encoding.matrix)?;
    let mut records = Vec::with_capacity(ids.len());
    for (j, id) in ids.iter().enumerate() {
        let h_col = encoding.matrix.column(j);
        let (predicted_class, class_probabilities) = classifier::predict(clf, &h_col)?;
        records.push(IndexRecord {
            instance_id: id.clone(),
            predicted_class,
            class_probabilities,
            encoding: h_col,
            object_scores: scores.column(j),
        });
    }
    let index = ContentIndex {
        records,
        object_names: model.object_names.clone(),
        class_names: clf.class_names.clone(),
        thresholds: IndexThresholds::default(),
    };
    index.validate()?;
    Ok(index)
}

/// Conjunctive query. The class set is one term satisfied by any listed
/// class; every scenario and object listed is its own term.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub classes: Vec<String>,
    pub required_scenarios: Vec<usize>,
    pub required_objects: Vec<String>,
    pub excluded_objects: Vec<String>,
}

impl Query {
    pub fn total_terms(&self) -> usize {
        let class_term = usize::from(!self.classes.is_empty());
        class_term
            + self.required_scenarios.len()
            + self.required_objects.len()
            + self.excluded_objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_terms() == 0 {
            return Err(Error::EmptyQuery);
        }
        let required: BTreeSet<&String> = self.required_objects.iter().collect();
        if let Some(overlap) = self.excluded_objects.iter().find(|o| required.contains(o)) {
            return Err(Error::invalid(format!(
                "object '{overlap}' is both required and excluded"
            )));
        }
        Ok(())
    }
}

fn name_position(names: &[String], name: &str, kind: &'static str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::UnknownName {
            kind,
            name: name.to_string(),
        })
}

/// Fraction of query terms a record satisfies under the index thresholds.
fn record_score(index: &ContentIndex, record: &IndexRecord, q: &Query) -> Result<f64> {
    let mut matched = 0usize;
    if !q.classes.is_empty() {
        for class in &q.classes {
            name_position(&index.class_names, class, "class")?;
        }
        if q.classes.iter().any(|c| c == &record.predicted_class) {
            matched += 1;
        }
    }
    for &s in &q.required_scenarios {
        if s >= record.encoding.len() {
            return Err(Error::invalid(format!(
                "scenario index {s} out of range (k = {})",
                record.encoding.len()
            )));
        }
        if record.encoding[s] >= index.thresholds.scenario_theta {
            matched += 1;
        }
    }
    for obj in &q.required_objects {
        let i = name_position(&index.object_names, obj, "object")?;
        if record.object_scores[i] >= index.thresholds.object_theta {
            matched += 1;
        }
    }
    for obj in &q.excluded_objects {
        let i = name_position(&index.object_names, obj, "object")?;
        if record.object_scores[i] < index.thresholds.object_theta {
            matched += 1;
        }
    }
    Ok(matched as f64 / q.total_terms() as f64)
}

/// Scores every record and returns the best `top_k` as (id, score),
/// ties broken by the probability of the queried class, then id.
pub fn execute(index: &ContentIndex, q: &Query, top_k: usize) -> Result<Vec<(String, f64)>> {
    q.validate()?;
    let mut scored: Vec<(usize, f64, f64)> = Vec::with_capacity(index.len());
    for (pos, record) in index.records.iter().enumerate() {
        let score = record_score(index, record, q)?;
        let tie_prob = q
            .classes
            .iter()
            .map(|c| {
                name_position(&index.class_names, c, "class")
                    .map(|i| record.class_probabilities[i])
            })
            .try_fold(0.0_f64, |best, p| p.map(|p| best.max(p)))?;
        scored.push((pos, score, tie_prob));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(b.2.partial_cmp(&a.2).expect("finite probabilities"))
            .then_with(|| {
                index.records[a.0]
                    .instance_id
                    .cmp(&index.records[b.0].instance_id)
            })
    });
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .map(|(pos, score, _)| (index.records[pos].instance_id.clone(), score))
        .collect())
}

/// High-level diff of two indexed instances: scenarios active in both,
/// in only one, and the two predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub shared_scenarios: Vec<usize>,
    pub only_a: Vec<usize>,
    pub only_b: Vec<usize>,
    pub class_a: String,
    pub class_b: String,
}

pub fn compare(index: &ContentIndex, id_a: &str, id_b: &str) -> Result<ComparisonReport> {
    let a = index.record(id_a)?;
    let b = index.record(id_b)?;
    let theta = index.thresholds.scenario_theta;
    let mut shared = Vec::new();
    let mut only_a = Vec::new();
    let mut only_b = Vec::new();
    for s in 0..a.encoding.len().min(b.encoding.len()) {
        let in_a = a.encoding[s] >= theta;
        let in_b = b.encoding[s] >= theta;
        match (in_a, in_b) {
            (true, true) => shared.push(s),
            (true, false) => only_a.push(s),
            (false, true) => only_b.push(s),
            (false, false) => {}
        }
    }
    Ok(ComparisonReport {
        shared_scenarios: shared,
        only_a,
        only_b,
        class_a: a.predicted_class.clone(),
        class_b: b.predicted_class.clone(),
    })
}

const QUERY_RETRIES: usize = 50;

/// Samples queries in the shape class + two co-present objects + one
/// absent-but-co-occurring object. Each returned query is guaranteed at
/// least one test instance satisfying all four terms under the
/// ground-truth annotations. Impossible draws are retried a bounded
/// number of times, so fewer than `n` queries may come back.
pub fn generate_queries(
    a_test: &ObjectSceneMatrix,
    labels: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<Query>> {
    if labels.len() != a_test.n_instances() {
        return Err(Error::dims(
            "label count",
            a_test.n_instances(),
            labels.len(),
        ));
    }
    let classes: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return Err(Error::invalid("no labeled instances to draw queries from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..QUERY_RETRIES {
            if let Some(q) = try_draw_query(a_test, labels, &classes, &mut rng) {
                found = Some(q);
                break;
            }
        }
        if let Some(q) = found {
            queries.push(q);
        }
    }
    Ok(queries)
}

fn try_draw_query(
    a_test: &ObjectSceneMatrix,
    labels: &[String],
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Option<Query> {
    let class = &classes[rng.random_range(0..classes.len())];
    let members: Vec<usize> = (0..a_test.n_instances())
        .filter(|&j| &labels[j] == class)
        .collect();
    if members.is_empty() {
        return None;
    }
    let j = members[rng.random_range(0..members.len())];
    let present: Vec<usize> = (0..a_test.n_objects())
        .filter(|&i| a_test.matrix()[(i, j)] == 1.0)
        .collect();
    if present.len() < 2 {
        return None;
    }
    let o1 = present[rng.random_range(0..present.len())];
    let o2 = loop {
        let cand = present[rng.random_range(0..present.len())];
        if cand != o1 {
            break cand;
        }
    };

    // Instances of the class containing both objects; one of them must
    // lack the excluded object for the query to have a perfect match.
    let witness: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&jj| a_test.matrix()[(o1, jj)] == 1.0 && a_test.matrix()[(o2, jj)] == 1.0)
        .collect();

    // Rank candidate exclusions by how often they co-occur with the pair
    // across the whole test set.
    let mut co_counts: Vec<(usize, usize)> = Vec::new();
    for i in 0..a_test.n_objects() {
        if i == o1 || i == o2 {
            continue;
        }
        let count = (0..a_test.n_instances())
            .filter(|&jj| {
                a_test.matrix()[(o1, jj)] == 1.0
                    && a_test.matrix()[(o2, jj)] == 1.0
                    && a_test.matrix()[(i, jj)] == 1.0
            })
            .count();
        if count > 0 {
            co_counts.push((i, count));
        }
    }
    co_counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    co_counts.truncate(10);
    let viable: Vec<usize> = co_counts
        .iter()
        .map(|&(i, _)| i)
        .filter(|&i| witness.iter().any(|&jj| a_test.matrix()[(i, jj)] == 0.0))
        .collect();
    if viable.is_empty() {
        return None;
    }
    let o3 = viable[rng.random_range(0..viable.len())];
    let names = a_test.object_names();
    Some(Query {
        classes: vec![class.clone()],
        required_scenarios: Vec::new(),
        required_objects: vec![names[o1].clone(), names[o2].clone()],
        excluded_objects: vec![names[o3].clone()],
    })
}

/// Fraction of query terms a test instance satisfies under ground-truth
/// annotations. Scenario terms have no annotation to check against.
pub fn ground_truth_relevance(
    q: &Query,
    a_test: &ObjectSceneMatrix,
    labels: &[String],
    instance: usize,
) -> Result<f64> {
    if !q.required_scenarios.is_empty() {
        return Err(Error::invalid(
            "scenario terms have no ground-truth annotation",
        ));
    }
    q.validate()?;
    let mut matched = 0usize;
    if !q.classes.is_empty() && q.classes.iter().any(|c| c == &labels[instance]) {
        matched += 1;
    }
    for obj in &q.required_objects {
        let i = name_position(a_test.object_names(), obj, "object")?;
        if a_test.matrix()[(i, instance)] == 1.0 {
            matched += 1;
        }
    }
    for obj in &q.excluded_objects {
        let i = name_position(a_test.object_names(), obj, "object")?;
        if a_test.matrix()[(i, instance)] == 0.0 {
            matched += 1;
        }
    }
    Ok(matched as f64 / q.total_terms() as f64)
}

fn dcg(relevances: &[f64]) -> f64 {
    relevances
        .iter()
        .enumerate()
        .map(|(idx, rel)| rel / ((idx + 2) as f64).log2())
        .sum()
}

/// Mean NDCG at `k` over the queries. Per query, returned instances are
/// scored by ground-truth relevance; the ideal ranking draws from the
/// entire annotated corpus.
pub fn evaluate_ndcg(
    index: &ContentIndex,
    queries: &[Query],
    a_test: &ObjectSceneMatrix,
    labels: &[String],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    if labels.len() != a_test.n_instances() {
        return Err(Error::dims(
            "label count",
            a_test.n_instances(),
            labels.len(),
        ));
    }
    let column_of: HashMap<&str, usize> = a_test
        .instance_ids()
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    let mut total = 0.0;
    for q in queries {
        let results = execute(index, q, k)?;
        let mut gains = Vec::with_capacity(results.len());
        for (id, _) in &results {
            let &j = column_of
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownName {
                    kind: "instance",
                    name: id.clone(),
                })?;
            gains.push(ground_truth_relevance(q, a_test, labels, j)?);
        }
        let mut ideal: Vec<f64> = (0..a_test.n_instances())
            .map(|j| ground_truth_relevance(q, a_test, labels, j))
            .collect::<Result<_>>()?;
        ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite relevance"));
        ideal.truncate(k);
        let idcg = dcg(&ideal);
        total += if idcg > 0.0 { dcg(&gains) / idcg } else { 0.0 };
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use crate::pbmf::PbmfConfig;

    fn toy_index() -> ContentIndex {
        let records = vec![
            IndexRecord {
                instance_id: "s0".into(),
                predicted_class: "kitchen".into(),
                class_probabilities: vec![0.9, 0.1],
                encoding: vec![0.95, 0.05],
                object_scores: vec![1.0, 0.9, 0.1],
            },
            IndexRecord {
                instance_id: "s1".into(),
                predicted_class: "kitchen".into(),
                class_probabilities: vec![0.6, 0.4],
                encoding: vec![0.9, 0.8],
                object_scores: vec![0.9, 0.2, 0.8],
            },
            IndexRecord {
                instance_id: "s2".into(),
                predicted_class: "office".into(),
                class_probabilities: vec![0.2, 0.8],
                encoding: vec![0.1, 0.9],
                object_scores: vec![0.1, 0.3, 0.95],
            },
        ];
        ContentIndex {
            records,
            object_names: vec!["sink".into(), "stove".into(), "desk".into()],
            class_names: vec!["kitchen".into(), "office".into()],
            thresholds: IndexThresholds::default(),
        }
    }

    #[test]
    fn empty_feature_set_builds_empty_index() {
        let model = ScenarioModel {
            dictionary: DenseMatrix::from_vec(2, 1, vec![0.9, 0.8]).unwrap(),
            object_names: vec!["a".into(), "b".into()],
            config: PbmfConfig {
                k: 1,
                ..PbmfConfig::default()
            },
        };
        let head = ScenarioHead::zeros(1, 2);
        let clf = SceneClassifier {
            weights: DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            class_names: vec!["x".into(), "y".into()],
        };
        let x = FeatureMatrix::new(DenseMatrix::zeros(2, 0), Vec::new()).unwrap();
        let index = build_index(&model, &head, &clf, &x, &[]).unwrap();
        assert!(index.is_empty());
    }

    #[test]
    fn built_index_scores_match_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 4;
        let k = 2;
        let n = 6;
        let mut dict = DenseMatrix::zeros(m, k);
        for v in dict.data_mut() {
            *v = rng.random::<f64>();
        }
        let model = ScenarioModel {
            dictionary: dict.clone(),
            object_names: (0..m).map(|i| format!("o{i}")).collect(),
            config: PbmfConfig {
                k,
                ..PbmfConfig::default()
            },
        };
        let mut head = ScenarioHead::zeros(k, m);
        for v in head.weights.data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let clf = SceneClassifier {
            weights: DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            class_names: vec!["c0".into(), "c1".into()],
        };
        let mut feats = DenseMatrix::zeros(m, n);
        for v in feats.data_mut() {
            *v = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        }
        let ids: Vec<String> = (0..n).map(|j| format!("s{j}")).collect();
        let x = FeatureMatrix::new(feats, ids.clone()).unwrap();
        let index = build_index(&model, &head, &clf, &x, &ids).unwrap();
        assert_eq!(index.len(), n);

        let enc = head_forward(&head, &x).unwrap();
        for (j, record) in index.records().iter().enumerate() {
            for i in 0..m {
                // Plain loops, independent of the matrix helpers.
                let mut dot = 0.0;
                for q in 0..k {
                    dot += dict[(i, q)] * enc.matrix[(q, j)];
                }
                let capped = dot.min(1.0 + 0.01 * dot);
                assert!(
                    (record.object_scores[i] - capped).abs() < 1e-12,
                    "score mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn empty_query_is_rejected() {
        let index = toy_index();
        let err = execute(&index, &Query::default(), 5).unwrap_err();
        assert!(matches!(err, Error::EmptyQuery));
    }

    #[test]
    fn overlapping_required_and_excluded_objects_are_rejected() {
        let q = Query {
            required_objects: vec!["sink".into()],
            excluded_objects: vec!["sink".into()],
            ..Query::default()
        };
        assert!(q.validate().is_err());
    }

    #[test]
    fn unknown_names_are_rejected() {
        let index = toy_index();
        let q = Query {
            classes: vec!["garage".into()],
            ..Query::default()
        };
        assert!(matches!(
            execute(&index, &q, 5),
            Err(Error::UnknownName { kind: "class", .. })
        ));
        let q = Query {
            required_objects: vec!["bathtub".into()],
            ..Query::default()
        };
        assert!(matches!(
            execute(&index, &q, 5),
            Err(Error::UnknownName { kind: "object", .. })
        ));
    }

    #[test]
    fn full_match_outranks_partial_matches() {
        let index = toy_index();
        let q = Query {
            classes: vec!["kitchen".into()],
            required_objects: vec!["sink".into(), "stove".into()],
            excluded_objects: vec!["desk".into()],
            ..Query::default()
        };
        let results = execute(&index, &q, 3).unwrap();
        // s0: all four terms. s1: desk score 0.8 fails exclusion, stove
        // 0.2 fails requirement → 2/4. s2: wrong class, sink low → 1/4.
        assert_eq!(results[0], ("s0".to_string(), 1.0));
        assert!(results[1].1 < 1.0);
        let valid = [0.0, 0.25, 0.5, 0.75, 1.0];
        for (_, score) in &results {
            assert!(valid.iter().any(|v| (v - score).abs() < 1e-12));
        }
    }

    #[test]
    fn ties_break_by_queried_class_probability_then_id() {
        let mut index = toy_index();
        // Make s1 equal in score to s2 on a class-only query for office.
        index.records[1].predicted_class = "office".into();
        let q = Query {
            classes: vec!["office".into()],
            ..Query::default()
        };
        let results = execute(&index, &q, 3).unwrap();
        // Both s1 and s2 match; s2 has the higher office probability.
        assert_eq!(results[0].0, "s2");
        assert_eq!(results[1].0, "s1");
        assert_eq!(results[2].0, "s0");
    }

    #[test]
    fn execute_matches_naive_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = 6;
        let k = 3;
        let n_classes = 2;
        let mut records = Vec::new();
        for j in 0..40 {
            let probs: Vec<f64> = {
                let raw: Vec<f64> = (0..n_classes).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            };
            let class = if probs[0] >= probs[1] { "c0" } else { "c1" };
            records.push(IndexRecord {
                instance_id: format!("s{j:02}"),
                predicted_class: class.into(),
                class_probabilities: probs,
                encoding: (0..k).map(|_| rng.random::<f64>()).collect(),
                object_scores: (0..m).map(|_| rng.random::<f64>() * 1.2).collect(),
            });
        }
        let index = ContentIndex {
            records,
            object_names: (0..m).map(|i| format!("o{i}")).collect(),
            class_names: vec!["c0".into(), "c1".into()],
            thresholds: IndexThresholds::default(),
        };

        for _ in 0..50 {
            let mut q = Query::default();
            if rng.random::<f64>() < 0.7 {
                q.classes = vec![if rng.random::<f64>() < 0.5 { "c0" } else { "c1" }.into()];
            }
            if rng.random::<f64>() < 0.5 {
                q.required_scenarios = vec![rng.random_range(0..k)];
            }
            let o1 = rng.random_range(0..m);
            let o2 = (o1 + 1 + rng.random_range(0..m - 1)) % m;
            q.required_objects = vec![format!("o{o1}")];
            if rng.random::<f64>() < 0.5 {
                q.excluded_objects = vec![format!("o{o2}")];
            }

            let got = execute(&index, &q, index.len()).unwrap();

            // Naive per-record loop.
            let total = q.total_terms() as f64;
            let mut expected: Vec<(String, f64, f64)> = index
                .records()
                .iter()
                .map(|r| {
                    let mut hits = 0.0;
                    if !q.classes.is_empty() && q.classes.contains(&r.predicted_class) {
                        hits += 1.0;
                    }
                    for &s in &q.required_scenarios {
                        if r.encoding[s] >= 0.5 {
                            hits += 1.0;
                        }
                    }
                    for o in &q.required_objects {
                        let i: usize = o[1..].parse().unwrap();
                        if r.object_scores[i] >= 0.5 {
                            hits += 1.0;
                        }
                    }
                    for o in &q.excluded_objects {
                        let i: usize = o[1..].parse().unwrap();
                        if r.object_scores[i] < 0.5 {
                            hits += 1.0;
                        }
                    }
                    let prob = q
                        .classes
                        .iter()
                        .map(|c| r.class_probabilities[if c == "c0" { 0 } else { 1 }])
                        .fold(0.0_f64, f64::max);
                    (r.instance_id.clone(), hits / total, prob)
                })
                .collect();
            expected.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then(b.2.partial_cmp(&a.2).unwrap())
                    .then(a.0.cmp(&b.0))
            });
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.0, e.0);
                assert_eq!(g.1, e.1);
            }
        }
    }

    fn planted_test_corpus() -> (ObjectSceneMatrix, Vec<String>) {
        // Class "kitchen" scenes carry objects 0..3 and often 3..5;
        // class "office" scenes carry 5..8.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = 8;
        let n = 60;
        let mut data = DenseMatrix::zeros(m, n);
        let mut labels = Vec::new();
        for j in 0..n {
            if j % 2 == 0 {
                labels.push("kitchen".to_string());
                for i in 0..3 {
                    data[(i, j)] = 1.0;
                }
                if rng.random::<f64>() < 0.6 {
                    data[(3, j)] = 1.0;
                    data[(4, j)] = 1.0;
                }
            } else {
                labels.push("office".to_string());
                for i in 5..8 {
                    data[(i, j)] = 1.0;
                }
                if rng.random::<f64>() < 0.3 {
                    data[(4, j)] = 1.0;
                }
            }
        }
        let names = (0..m).map(|i| format!("o{i}")).collect();
        let ids = (0..n).map(|j| format!("t{j:02}")).collect();
        (ObjectSceneMatrix::new(data, names, ids).unwrap(), labels)
    }

    #[test]
    fn generated_queries_are_deterministic_and_satisfiable() {
        let (a, labels) = planted_test_corpus();
        let qs1 = generate_queries(&a, &labels, 20, 42).unwrap();
        let qs2 = generate_queries(&a, &labels, 20, 42).unwrap();
        assert_eq!(qs1, qs2);
        assert!(!qs1.is_empty());
        for q in &qs1 {
            assert_eq!(q.classes.len(), 1);
            assert_eq!(q.required_objects.len(), 2);
            assert_eq!(q.excluded_objects.len(), 1);
            let perfect = (0..a.n_instances())
                .any(|j| ground_truth_relevance(q, &a, &labels, j).unwrap() == 1.0);
            assert!(perfect, "query without a perfect witness: {q:?}");
        }
    }

    #[test]
    fn ndcg_is_one_for_ideal_ordering_and_constant_relevance() {
        let (a, labels) = planted_test_corpus();
        // Build an index whose object scores equal the annotations and
        // whose predictions equal the labels: execute then returns an
        // ideal ordering for any annotation-backed query.
        let records: Vec<IndexRecord> = (0..a.n_instances())
            .map(|j| IndexRecord {
                instance_id: a.instance_ids()[j].clone(),
                predicted_class: labels[j].clone(),
                class_probabilities: if labels[j] == "kitchen" {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                },
                encoding: vec![0.5],
                object_scores: a.matrix().column(j),
            })
            .collect();
        let index = ContentIndex {
            records,
            object_names: a.object_names().to_vec(),
            class_names: vec!["kitchen".into(), "office".into()],
            thresholds: IndexThresholds::default(),
        };
        let queries = generate_queries(&a, &labels, 10, 7).unwrap();
        let ndcg = evaluate_ndcg(&index, &queries, &a, &labels, 5).unwrap();
        assert!(
            (ndcg - 1.0).abs() < 1e-12,
            "oracle index should reach NDCG 1.0, got {ndcg}"
        );

        // Constant relevance: a class-only query over a corpus where
        // every instance has that class.
        let all_kitchen: Vec<String> = vec!["kitchen".into(); a.n_instances()];
        let q = Query {
            classes: vec!["kitchen".into()],
            ..Query::default()
        };
        let ndcg = evaluate_ndcg(&index, &[q], &a, &all_kitchen, 5).unwrap();
        assert!((ndcg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_rejects_scenario_terms() {
        let (a, labels) = planted_test_corpus();
        let index = toy_index();
        let q = Query {
            required_scenarios: vec![0],
            ..Query::default()
        };
        assert!(evaluate_ndcg(&index, &[q], &a, &labels, 5).is_err());
    }

    #[test]
    fn compare_is_symmetric_and_empty_on_self() {
        let index = toy_index();
        let self_cmp = compare(&index, "s1", "s1").unwrap();
        assert!(self_cmp.only_a.is_empty() && self_cmp.only_b.is_empty());
        assert_eq!(self_cmp.shared_scenarios, vec![0, 1]);

        let ab = compare(&index, "s0", "s2").unwrap();
        let ba = compare(&index, "s2", "s0").unwrap();
        assert_eq!(ab.only_a, ba.only_b);
        assert_eq!(ab.only_b, ba.only_a);
        assert_eq!(ab.shared_scenarios, ba.shared_scenarios);
        // s0 activates scenario 0 only, s2 scenario 1 only.
        assert!(ab.shared_scenarios.is_empty());
        assert_eq!(ab.only_a, vec![0]);
        assert_eq!(ab.only_b, vec![1]);
        assert_eq!(ab.class_a, "kitchen");
        assert_eq!(ab.class_b, "office");

        assert!(compare(&index, "s0", "missing").is_err());
    }

    #[test]
    fn index_jsonl_round_trip() {
        let index = toy_index();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        index.write_jsonl(&path).unwrap();
        let back = ContentIndex::read_jsonl(&path).unwrap();
        assert_eq!(back, index);
    }

    #[test]
    fn duplicate_ids_fail_validation() {
        let mut index = toy_index();
        index.records[1].instance_id = "s0".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        index.write_jsonl(&path).unwrap();
        assert!(ContentIndex::read_jsonl(&path).is_err());
    }
}
