//! End-to-end orchestration: dataset → factorization → head →
//! classifier → joint finetune → content index, with every artifact
//! persisted and a deterministic JSON report.
//!
//! Configuration is a flat key = value text file; unknown keys are
//! errors so typos surface instead of silently using defaults.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{self, SceneClassifier};
use crate::dataset::{self, DatasetConfig, SplitData};
use crate::error::{Error, Result};
use crate::eval;
use crate::head::{self, FeatureMatrix, ScenarioHead, TrainSchedule};
use crate::matrix::{DenseMatrix, pseudo_boolean_product};
use crate::pbmf::{self, EncodingMatrix, PbmfConfig};
use crate::retrieval::{self, IndexThresholds};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// JSON-lines dataset path.
    pub dataset: String,
    /// Directory that receives every artifact and the report.
    pub out_dir: String,
    pub data: DatasetConfig,
    pub pbmf: PbmfConfig,
    /// Factorization restarts; the best final loss wins.
    pub restarts: usize,
    pub schedule: TrainSchedule,
    pub classifier_l2: f64,
    pub classifier_iters: usize,
    pub classifier_lr: f64,
    pub classifier_seed: u64,
    pub thresholds: IndexThresholds,
    pub n_queries: usize,
    pub query_seed: u64,
    pub ndcg_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: String::new(),
            out_dir: String::new(),
            data: DatasetConfig::default(),
            pbmf: PbmfConfig::default(),
            restarts: 1,
            schedule: TrainSchedule::default(),
            classifier_l2: 1e-4,
            classifier_iters: 300,
            classifier_lr: 0.5,
            classifier_seed: 0,
            thresholds: IndexThresholds::default(),
            n_queries: 100,
            query_seed: 1,
            ndcg_k: 5,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{value}'")))
}

impl PipelineConfig {
    /// Applies one key = value pair. Keys mirror the CLI flags.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),

            "min_object_frequency" => self.data.min_object_frequency = parse_as(key, value)?,
            "split_seed" => self.data.split_seed = parse_as(key, value)?,
            "train_per_class" => self.data.train_per_class = parse_as(key, value)?,
            "test_per_class" => self.data.test_per_class = parse_as(key, value)?,

            "k" => self.pbmf.k = parse_as(key, value)?,
            "alpha1" => self.pbmf.alpha1 = parse_as(key, value)?,
            "alpha2" => self.pbmf.alpha2 = parse_as(key, value)?,
            "alpha3" => self.pbmf.alpha3 = parse_as(key, value)?,
            "use_weights" => self.pbmf.use_weights = parse_as(key, value)?,
            "max_outer_iters" => self.pbmf.max_outer_iters = parse_as(key, value)?,
            "inner_steps" => self.pbmf.inner_steps = parse_as(key, value)?,
            "step_size" => self.pbmf.step_size = parse_as(key, value)?,
            "backtrack_factor" => self.pbmf.backtrack_factor = parse_as(key, value)?,
            "tol" => self.pbmf.tol = parse_as(key, value)?,
            "seed" => self.pbmf.seed = parse_as(key, value)?,
            "restarts" => self.restarts = parse_as(key, value)?,

            "head_lr" => self.schedule.head_lr = parse_as(key, value)?,
            "dict_update_period" => self.schedule.dict_update_period = parse_as(key, value)?,
            "dict_lr" => self.schedule.dict_lr = parse_as(key, value)?,
            "epochs" => self.schedule.epochs = parse_as(key, value)?,
            "batch_size" => self.schedule.batch_size = parse_as(key, value)?,
            "lambda_ce" => self.schedule.lambda_ce = parse_as(key, value)?,
            "head_seed" => self.schedule.seed = parse_as(key, value)?,
            "regress_to_encoding" => self.schedule.regress_to_encoding = parse_as(key, value)?,

            "classifier_l2" => self.classifier_l2 = parse_as(key, value)?,
            "classifier_iters" => self.classifier_iters = parse_as(key, value)?,
            "classifier_lr" => self.classifier_lr = parse_as(key, value)?,
            "classifier_seed" => self.classifier_seed = parse_as(key, value)?,

            "scenario_theta" => self.thresholds.scenario_theta = parse_as(key, value)?,
            "object_theta" => self.thresholds.object_theta = parse_as(key, value)?,
            "n_queries" => self.n_queries = parse_as(key, value)?,
            "query_seed" => self.query_seed = parse_as(key, value)?,
            "ndcg_k" => self.ndcg_k = parse_as(key, value)?,

            other => {
                return Err(Error::invalid(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", idx + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        PipelineConfig::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBlock {
    pub vocabulary_size: usize,
    pub train_instances: usize,
    pub test_instances: usize,
    pub unannotated_train: usize,
    pub unannotated_test: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationBlock {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    /// Fraction of training activations within 0.25 of 0 or 1.
    pub bimodality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBlock {
    pub classes: Vec<String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_accuracy_after_finetune: f64,
    pub finetune_initial_loss: f64,
    pub finetune_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectsBlock {
    pub macro_auprc: f64,
    pub evaluated_objects: usize,
    pub skipped_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBlock {
    pub requested_queries: usize,
    pub generated_queries: usize,
    pub ndcg_k: usize,
    pub mean_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub dataset: DatasetBlock,
    pub factorization: FactorizationBlock,
    pub head: HeadBlock,
    pub classifier: ClassifierBlock,
    pub objects: ObjectsBlock,
    pub retrieval: RetrievalBlock,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        let mut out = serde_json::to_string_pretty(self)?;
        out.push('\n');
        Ok(out)
    }
}

fn features_of(split: &SplitData) -> FeatureMatrix {
    split
        .features
        .clone()
        .unwrap_or_else(|| FeatureMatrix::from_object_matrix(&split.annotated))
}

/// Appends encodings of unannotated instances that carry features of the
/// right dimension; everything else is left out.
fn classifier_training_set(
    base: &EncodingMatrix,
    base_labels: &[String],
    head: &ScenarioHead,
    unannotated: &[dataset::AnnotatedInstance],
) -> Result<(EncodingMatrix, Vec<String>)> {
    let usable: Vec<&dataset::AnnotatedInstance> = unannotated
        .iter()
        .filter(|i| {
            i.features
                .as_ref()
                .is_some_and(|f| f.len() == head.feature_dim())
        })
        .collect();
    if usable.is_empty() {
        return Ok((base.clone(), base_labels.to_vec()));
    }
    let mut feats = DenseMatrix::zeros(head.feature_dim(), usable.len());
    let mut ids = Vec::with_capacity(usable.len());
    let mut labels = base_labels.to_vec();
    for (j, instance) in usable.iter().enumerate() {
        feats.set_column(j, instance.features.as_ref().expect("filtered"));
        ids.push(instance.id.clone());
        labels.push(instance.scene_class.clone());
    }
    let extra = head::head_forward(head, &FeatureMatrix::new(feats, ids)?)?;

    let k = base.matrix.rows();
    let total = base.matrix.cols() + extra.matrix.cols();
    let mut combined = DenseMatrix::zeros(k, total);
    let mut combined_ids = Vec::with_capacity(total);
    for j in 0..base.matrix.cols() {
        combined.set_column(j, &base.matrix.column(j));
    }
    for j in 0..extra.matrix.cols() {
        combined.set_column(base.matrix.cols() + j, &extra.matrix.column(j));
    }
    combined_ids.extend_from_slice(&base.instance_ids);
    combined_ids.extend_from_slice(&extra.instance_ids);
    Ok((
        EncodingMatrix {
            matrix: combined,
            instance_ids: combined_ids,
        },
        labels,
    ))
}

fn predictions_of(
    clf: &SceneClassifier,
    encoding: &EncodingMatrix,
) -> Result<Vec<String>> {
    (0..encoding.matrix.cols())
        .map(|j| classifier::predict(clf, &encoding.matrix.column(j)).map(|(c, _)| c))
        .collect()
}

fn write_predictions(
    path: impl AsRef<Path>,
    ids: &[String],
    labels: &[String],
    predictions: &[String],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "instance_id,label,predicted")?;
    for ((id, label), pred) in ids.iter().zip(labels).zip(predictions) {
        writeln!(file, "{id},{label},{pred}")?;
    }
    Ok(())
}

/// Squared reconstruction errors of one method under both norms: plain,
/// and with residuals scaled by the rarity weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyErrors {
    pub error: f64,
    pub weighted_error: f64,
}

/// Squared reconstruction errors of the standard model ladder on one
/// matrix: the all-mean baseline, truncated SVD, NMF, and the
/// factorization without penalties, with penalties but uniform weights,
/// and in full. Real-valued products for SVD and NMF, the capped
/// product for the rest. Each entry reports the unweighted norm, which
/// keeps the methods comparable, next to the rarity-weighted norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconStudyReport {
    pub k: usize,
    pub all_mean: StudyErrors,
    pub svd: StudyErrors,
    pub nmf: StudyErrors,
    pub pbmf_basic: StudyErrors,
    pub pbmf_full_uniform: StudyErrors,
    pub pbmf_full_weighted: StudyErrors,
}

impl ReconStudyReport {
    /// `(method, errors)` rows in ladder order, for tabular output.
    pub fn rows(&self) -> [(&'static str, StudyErrors); 6] {
        [
            ("all_mean", self.all_mean),
            ("svd", self.svd),
            ("nmf", self.nmf),
            ("pbmf_basic", self.pbmf_basic),
            ("pbmf_full_uniform", self.pbmf_full_uniform),
            ("pbmf_full_weighted", self.pbmf_full_weighted),
        ]
    }
}

const STUDY_SVD_POWER_ITERS: usize = 4;

pub fn reconstruction_study(
    a: &crate::matrix::ObjectSceneMatrix,
    cfg: &PbmfConfig,
    restarts: usize,
) -> Result<ReconStudyReport> {
    use crate::baselines;
    use crate::eval::ProductKind;

    let omega = pbmf::build_weight_matrix(a)?.matrix;
    let weighted_of = |recon: &DenseMatrix| -> f64 {
        a.matrix()
            .data()
            .iter()
            .zip(recon.data())
            .zip(omega.data())
            .map(|((&av, &rv), &w)| {
                let r = w * (av - rv);
                r * r
            })
            .sum()
    };

    let mean = a.matrix().mean();
    let (_, all_mean) = baselines::trivial_baselines(a.matrix());
    let all_mean = StudyErrors {
        error: all_mean,
        weighted_error: a
            .matrix()
            .data()
            .iter()
            .zip(omega.data())
            .map(|(&av, &w)| {
                let r = w * (av - mean);
                r * r
            })
            .sum(),
    };

    let svd = baselines::truncated_svd(a.matrix(), cfg.k, STUDY_SVD_POWER_ITERS, cfg.seed)?;
    let svd_recon = svd.reconstruction();
    let svd = StudyErrors {
        error: a.matrix().sub(&svd_recon)?.frob_sq(),
        weighted_error: weighted_of(&svd_recon),
    };

    let (nw, nh) = baselines::nmf(a.matrix(), cfg.k, cfg.max_outer_iters, cfg.seed)?;
    let nmf = StudyErrors {
        error: eval::reconstruction_error(a.matrix(), &nw, &nh, None, ProductKind::Real)?,
        weighted_error: weighted_of(&nw.matmul(&nh)?),
    };

    let pbmf_err = |run_cfg: &PbmfConfig| -> Result<StudyErrors> {
        let (model, encoding, _) = pbmf::factorize_best_of(a, run_cfg, restarts)?;
        let mut recon = model.dictionary.matmul(&encoding.matrix)?;
        recon.map_inplace(crate::matrix::soft_cap);
        Ok(StudyErrors {
            error: a.matrix().sub(&recon)?.frob_sq(),
            weighted_error: weighted_of(&recon),
        })
    };
    let pbmf_basic = pbmf_err(&PbmfConfig {
        alpha1: 0.0,
        alpha2: 0.0,
        alpha3: 0.0,
        use_weights: false,
        ..cfg.clone()
    })?;
    let pbmf_full_uniform = pbmf_err(&PbmfConfig {
        use_weights: false,
        ..cfg.clone()
    })?;
    let pbmf_full_weighted = pbmf_err(&PbmfConfig {
        use_weights: true,
        ..cfg.clone()
    })?;

    Ok(ReconStudyReport {
        k: cfg.k,
        all_mean,
        svd,
        nmf,
        pbmf_basic,
        pbmf_full_uniform,
        pbmf_full_weighted,
    })
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    if cfg.dataset.is_empty() {
        return Err(Error::invalid("config key 'dataset' is required"));
    }
    if cfg.out_dir.is_empty() {
        return Err(Error::invalid("config key 'out_dir' is required"));
    }
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;

    // Phase 0: ingest and split.
    let loaded =
        dataset::load_dataset(&cfg.dataset, &cfg.data).map_err(Error::in_phase("dataset"))?;
    let a_train = &loaded.train.annotated;
    let a_test = &loaded.test.annotated;
    let x_train = features_of(&loaded.train);
    let x_test = features_of(&loaded.test);

    // Phase 1: scenario dictionary.
    let (model, train_encoding, fact_history) =
        pbmf::factorize_best_of(a_train, &cfg.pbmf, cfg.restarts)
            .map_err(Error::in_phase("factorize"))?;
    model
        .save_json(out.join("model_factorized.json"))
        .map_err(Error::in_phase("factorize"))?;
    train_encoding
        .write_csv(out.join("train_encoding.csv"))
        .map_err(Error::in_phase("factorize"))?;
    pbmf::write_loss_history(&fact_history, out.join("factorize_loss.csv"))
        .map_err(Error::in_phase("factorize"))?;

    // Phase 2: scenario head.
    let (head, model, head_history) = head::train_head(a_train, &x_train, &model, &cfg.schedule)
        .map_err(Error::in_phase("train_head"))?;
    head.save_json(out.join("head_pretrained.json"))
        .map_err(Error::in_phase("train_head"))?;
    model
        .save_json(out.join("model_head.json"))
        .map_err(Error::in_phase("train_head"))?;
    pbmf::write_loss_history(&head_history, out.join("head_loss.csv"))
        .map_err(Error::in_phase("train_head"))?;
    let enc_train = head::head_forward(&head, &x_train).map_err(Error::in_phase("train_head"))?;
    let bimodality = head::encoding_bimodality(&enc_train.matrix);

    // Phase 3: scene classifier on head activations.
    let (clf_encoding, clf_labels) = classifier_training_set(
        &enc_train,
        &loaded.train.labels,
        &head,
        &loaded.train.unannotated,
    )
    .map_err(Error::in_phase("train_classifier"))?;
    let clf = classifier::fit(
        &clf_encoding,
        &clf_labels,
        cfg.classifier_l2,
        cfg.classifier_iters,
        cfg.classifier_lr,
        cfg.classifier_seed,
    )
    .map_err(Error::in_phase("train_classifier"))?;
    clf.save_json(out.join("classifier_pretrained.json"))
        .map_err(Error::in_phase("train_classifier"))?;
    let train_predictions =
        predictions_of(&clf, &clf_encoding).map_err(Error::in_phase("train_classifier"))?;
    let train_accuracy = eval::accuracy(&train_predictions, &clf_labels)
        .map_err(Error::in_phase("train_classifier"))?;
    let enc_test = head::head_forward(&head, &x_test).map_err(Error::in_phase("train_classifier"))?;
    let test_predictions =
        predictions_of(&clf, &enc_test).map_err(Error::in_phase("train_classifier"))?;
    let test_accuracy = eval::accuracy(&test_predictions, &loaded.test.labels)
        .map_err(Error::in_phase("train_classifier"))?;

    // Phase 4: joint finetune over the annotated training instances.
    let (head, model, clf, finetune_history) = head::joint_finetune(
        a_train,
        &x_train,
        &loaded.train.labels,
        &model,
        &head,
        &clf,
        &cfg.schedule,
    )
    .map_err(Error::in_phase("joint_finetune"))?;
    head.save_json(out.join("head.json"))
        .map_err(Error::in_phase("joint_finetune"))?;
    model
        .save_json(out.join("model.json"))
        .map_err(Error::in_phase("joint_finetune"))?;
    clf.save_json(out.join("classifier.json"))
        .map_err(Error::in_phase("joint_finetune"))?;
    pbmf::write_loss_history(&finetune_history, out.join("finetune_loss.csv"))
        .map_err(Error::in_phase("joint_finetune"))?;

    let enc_test_final =
        head::head_forward(&head, &x_test).map_err(Error::in_phase("joint_finetune"))?;
    let final_predictions =
        predictions_of(&clf, &enc_test_final).map_err(Error::in_phase("joint_finetune"))?;
    let test_accuracy_after = eval::accuracy(&final_predictions, &loaded.test.labels)
        .map_err(Error::in_phase("joint_finetune"))?;
    write_predictions(
        out.join("predictions.csv"),
        a_test.instance_ids(),
        &loaded.test.labels,
        &final_predictions,
    )
    .map_err(Error::in_phase("joint_finetune"))?;

    // Phase 5: content index over the held-out split.
    let mut index = retrieval::build_index(
        &model,
        &head,
        &clf,
        &x_test,
        &a_test.instance_ids().to_vec(),
    )
    .map_err(Error::in_phase("build_index"))?;
    index.set_thresholds(cfg.thresholds);
    index
        .write_jsonl(out.join("index.jsonl"))
        .map_err(Error::in_phase("build_index"))?;

    // Phase 6: held-out metrics.
    let object_scores = pseudo_boolean_product(&model.dictionary, &enc_test_final.matrix)
        .map_err(Error::in_phase("evaluate"))?;
    let auprc = eval::macro_auprc(&object_scores, a_test.matrix())
        .map_err(Error::in_phase("evaluate"))?;
    let queries =
        retrieval::generate_queries(a_test, &loaded.test.labels, cfg.n_queries, cfg.query_seed)
            .map_err(Error::in_phase("evaluate"))?;
    let mean_ndcg = if queries.is_empty() {
        0.0
    } else {
        retrieval::evaluate_ndcg(&index, &queries, a_test, &loaded.test.labels, cfg.ndcg_k)
            .map_err(Error::in_phase("evaluate"))?
    };

    let report = PipelineReport {
        dataset: DatasetBlock {
            vocabulary_size: loaded.vocabulary.len(),
            train_instances: a_train.n_instances(),
            test_instances: a_test.n_instances(),
            unannotated_train: loaded.train.unannotated.len(),
            unannotated_test: loaded.test.unannotated.len(),
            warnings: loaded.warnings.clone(),
        },
        factorization: FactorizationBlock {
            initial_loss: fact_history[0],
            final_loss: *fact_history.last().expect("non-empty history"),
            iterations: fact_history.len() - 1,
        },
        head: HeadBlock {
            initial_loss: head_history[0],
            final_loss: *head_history.last().expect("non-empty history"),
            epochs: head_history.len() - 1,
            bimodality,
        },
        classifier: ClassifierBlock {
            classes: clf.class_names.clone(),
            train_accuracy,
            test_accuracy,
            test_accuracy_after_finetune: test_accuracy_after,
            finetune_initial_loss: finetune_history[0],
            finetune_final_loss: *finetune_history.last().expect("non-empty history"),
        },
        objects: ObjectsBlock {
            macro_auprc: auprc.value,
            evaluated_objects: auprc.evaluated_objects,
            skipped_objects: auprc.skipped_objects.len(),
        },
        retrieval: RetrievalBlock {
            requested_queries: cfg.n_queries,
            generated_queries: queries.len(),
            ndcg_k: cfg.ndcg_k,
            mean_ndcg,
        },
    };
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    Ok(report)
}
