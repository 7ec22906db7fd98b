//! Command-line front end. Subcommands compose the library phases:
//! generate or ingest data, factorize, train the head and classifier,
//! fine-tune, index, then query and evaluate. Configuration flags mirror
//! the flat key=value config file and override it.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scenarios::classifier::{self, SceneClassifier};
use scenarios::head::{self, FeatureMatrix, ScenarioHead};
use scenarios::matrix::{soft_cap, ObjectSceneMatrix};
use scenarios::pbmf::{self, EncodingMatrix, ScenarioModel};
use scenarios::pipeline::{self, PipelineConfig};
use scenarios::retrieval::{self, ContentIndex};
use scenarios::synth::{synth, SynthSpec};
use scenarios::{eval, Error, Result};

#[derive(Parser)]
#[command(
    name = "scenarios",
    version,
    about = "Scenario learning from binary object-scene data: factorization, \
             scene classification with explanations, object recovery, and \
             content-based retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted scenarios.
    Synth(SynthArgs),
    /// Learn the scenario dictionary and training encodings.
    Factorize(FactorizeArgs),
    /// Compare reconstruction error against baselines over a rank sweep.
    ReconStudy(ReconStudyArgs),
    /// Produce encodings, from a matrix and model or from features and a head.
    Encode(EncodeArgs),
    /// Train the scenario head against a frozen-at-entry dictionary.
    TrainHead(TrainHeadArgs),
    /// Fit the scene classifier on fixed encodings.
    TrainClassifier(TrainClassifierArgs),
    /// Fine-tune head, dictionary, and classifier together.
    JointFinetune(JointFinetuneArgs),
    /// Run every phase from a dataset to a report.
    Pipeline(PipelineArgs),
    /// Explain one instance's predicted class by scenario influence.
    Explain(ExplainArgs),
    /// Build the retrieval index over instance features.
    Index(IndexArgs),
    /// Run one boolean query against an index.
    Query(QueryArgs),
    /// Contrast the scenario content of two indexed instances.
    Compare(CompareArgs),
    /// Score multi-object recovery against ground-truth presence.
    EvalObjects(EvalObjectsArgs),
    /// Score retrieval ranking quality over generated queries.
    EvalRetrieval(EvalRetrievalArgs),
}

macro_rules! config_overlay {
    ($(($field:ident, $ty:ty, $help:expr)),* $(,)?) => {
        /// Every flag mirrors a config-file key; explicit flags win.
        #[derive(Args, Debug, Default, Clone)]
        struct ConfigOverlay {
            /// Flat key=value config file.
            #[arg(long)]
            config: Option<String>,
            $(
                #[arg(long, help = $help)]
                $field: Option<$ty>,
            )*
        }

        impl ConfigOverlay {
            fn resolve(&self) -> Result<PipelineConfig> {
                let mut cfg = match &self.config {
                    Some(path) => PipelineConfig::from_file(path)?,
                    None => PipelineConfig::default(),
                };
                $(
                    if let Some(value) = &self.$field {
                        cfg.apply(stringify!($field), &value.to_string())?;
                    }
                )*
                Ok(cfg)
            }
        }
    };
}

config_overlay![
    (dataset, String, "JSON-lines dataset path"),
    (out_dir, String, "directory that receives artifacts"),
    (min_object_frequency, f64, "vocabulary frequency floor"),
    (split_seed, u64, "train/test split seed"),
    (train_per_class, usize, "training instances per class"),
    (test_per_class, usize, "test instances per class"),
    (k, usize, "number of scenarios"),
    (alpha1, f64, "dictionary overlap penalty"),
    (alpha2, f64, "dictionary sparsity penalty"),
    (alpha3, f64, "encoding sparsity penalty"),
    (use_weights, bool, "weight residuals by object rarity"),
    (max_outer_iters, usize, "factorization outer iteration cap"),
    (inner_steps, usize, "projected-gradient steps per factor"),
    (step_size, f64, "initial factorization step size"),
    (backtrack_factor, f64, "step shrink factor on loss increase"),
    (tol, f64, "relative loss change stopping threshold"),
    (seed, u64, "factorization seed"),
    (restarts, usize, "factorization restarts, best loss wins"),
    (head_lr, f64, "head learning rate"),
    (dict_update_period, usize, "batches between dictionary updates, 0 disables"),
    (dict_lr, f64, "dictionary learning rate during head training"),
    (epochs, usize, "head training epochs"),
    (batch_size, usize, "head training batch size"),
    (lambda_ce, f64, "classification loss weight in fine-tuning"),
    (head_seed, u64, "head training shuffle seed"),
    (regress_to_encoding, bool, "train the head by regression onto fixed encodings"),
    (classifier_l2, f64, "classifier weight decay"),
    (classifier_iters, usize, "classifier gradient iterations"),
    (classifier_lr, f64, "classifier learning rate"),
    (classifier_seed, u64, "classifier seed"),
    (scenario_theta, f64, "scenario presence threshold for queries"),
    (object_theta, f64, "object presence threshold for queries"),
    (n_queries, usize, "generated query count for evaluation"),
    (query_seed, u64, "query generation seed"),
    (ndcg_k, usize, "ranking cutoff for NDCG"),
];

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving dataset.jsonl, matrix.csv, labels.csv, and
    /// the planted ground truth.
    #[arg(long)]
    out_dir: String,
    #[arg(long)]
    n_objects: Option<usize>,
    #[arg(long)]
    n_scenarios: Option<usize>,
    #[arg(long)]
    objects_per_scenario: Option<usize>,
    #[arg(long)]
    scenarios_per_instance: Option<usize>,
    #[arg(long)]
    n_instances: Option<usize>,
    /// Probability an absent object is flipped on.
    #[arg(long)]
    flip_noise: Option<f64>,
    /// Probability a present object is dropped.
    #[arg(long)]
    missing_object_rate: Option<f64>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct FactorizeArgs {
    /// Labeled object-scene CSV.
    #[arg(long)]
    matrix: String,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ReconStudyArgs {
    #[arg(long)]
    matrix: String,
    /// Ranks to sweep; defaults to the configured k.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[command(flatten)]
    overlay: ConfigOverlay,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Object-scene CSV: the input for --model, or the indicator-feature
    /// source for --head when --features is absent.
    #[arg(long)]
    matrix: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Feature CSV for the --head route.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    matrix: String,
    /// Defaults to object-presence indicators from the matrix.
    #[arg(long)]
    features: Option<String>,
    /// Factorized model JSON.
    #[arg(long)]
    model: String,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Encoding CSV the classifier trains on.
    #[arg(long)]
    encoding: String,
    /// CSV of instance_id,label rows.
    #[arg(long)]
    labels: String,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct JointFinetuneArgs {
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    model: String,
    #[arg(long)]
    head: String,
    #[arg(long)]
    classifier: String,
    #[arg(long)]
    labels: String,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Instance to explain; must appear in the encoding.
    instance_id: String,
    #[arg(long)]
    model: String,
    #[arg(long)]
    classifier: String,
    #[arg(long)]
    encoding: String,
    /// Scenarios to report, capped at k.
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    head: String,
    #[arg(long)]
    classifier: String,
    /// Feature CSV; --matrix supplies indicator features instead.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    matrix: Option<String>,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: String,
    /// Scene classes; any match satisfies the single class term.
    #[arg(long = "class", value_delimiter = ',')]
    classes: Vec<String>,
    /// Scenario indices that must be active.
    #[arg(long = "has-scenario", value_delimiter = ',')]
    has_scenario: Vec<usize>,
    /// Objects that must be present.
    #[arg(long = "has-object", value_delimiter = ',')]
    has_object: Vec<String>,
    /// Objects that must be absent.
    #[arg(long = "not-object", value_delimiter = ',')]
    not_object: Vec<String>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    instance_a: String,
    instance_b: String,
    #[arg(long)]
    index: String,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalObjectsArgs {
    /// Ground-truth object-scene CSV.
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    model: String,
    /// Encodings aligned with the matrix instances.
    #[arg(long)]
    encoding: String,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    #[arg(long)]
    index: String,
    /// Ground-truth object-scene CSV for the indexed instances.
    #[arg(long)]
    matrix: String,
    /// CSV of instance_id,label rows.
    #[arg(long)]
    labels: String,
    #[command(flatten)]
    overlay: ConfigOverlay,
    #[arg(long)]
    out: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Factorize(args) => cmd_factorize(args),
        Command::ReconStudy(args) => cmd_recon_study(args),
        Command::Encode(args) => cmd_encode(args),
        Command::TrainHead(args) => cmd_train_head(args),
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::JointFinetune(args) => cmd_joint_finetune(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Index(args) => cmd_index(args),
        Command::Query(args) => cmd_query(args),
        Command::Compare(args) => cmd_compare(args),
        Command::EvalObjects(args) => cmd_eval_objects(args),
        Command::EvalRetrieval(args) => cmd_eval_retrieval(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn emit_text(text: &str, out: Option<&str>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit(value: &serde_json::Value, out: Option<&str>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(&text, out)
}

/// Artifact-writing commands refuse to guess a location.
fn artifact_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    if cfg.out_dir.is_empty() {
        return Err(Error::invalid(
            "out_dir is required; pass --out-dir or set it in the config file",
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(PathBuf::from(&cfg.out_dir))
}

fn read_labels_csv(path: &str) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if number == 0 || line.is_empty() {
            continue;
        }
        let Some((id, label)) = line.split_once(',') else {
            return Err(Error::MalformedRecord {
                path: path.to_string(),
                line: number + 1,
                message: "expected instance_id,label".to_string(),
            });
        };
        rows.push((id.to_string(), label.to_string()));
    }
    Ok(rows)
}

/// Labels reordered to match `ids`; every id must be labeled.
fn labels_for(ids: &[String], rows: &[(String, String)]) -> Result<Vec<String>> {
    let map: HashMap<&str, &str> = rows
        .iter()
        .map(|(id, label)| (id.as_str(), label.as_str()))
        .collect();
    ids.iter()
        .map(|id| {
            map.get(id.as_str())
                .map(|label| label.to_string())
                .ok_or_else(|| Error::UnknownName {
                    kind: "instance",
                    name: id.clone(),
                })
        })
        .collect()
}

fn features_or_indicators(
    features: Option<&str>,
    a: &ObjectSceneMatrix,
) -> Result<FeatureMatrix> {
    match features {
        Some(path) => FeatureMatrix::read_csv(path),
        None => Ok(FeatureMatrix::from_object_matrix(a)),
    }
}

fn features_from(features: Option<&str>, matrix: Option<&str>) -> Result<FeatureMatrix> {
    match (features, matrix) {
        (Some(path), _) => FeatureMatrix::read_csv(path),
        (None, Some(path)) => Ok(FeatureMatrix::from_object_matrix(
            &ObjectSceneMatrix::read_csv(path)?,
        )),
        (None, None) => Err(Error::invalid("pass --features or --matrix")),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = args.n_objects {
        spec.n_objects = v;
    }
    if let Some(v) = args.n_scenarios {
        spec.n_scenarios = v;
    }
    if let Some(v) = args.objects_per_scenario {
        spec.objects_per_scenario = v;
    }
    if let Some(v) = args.scenarios_per_instance {
        spec.scenarios_per_instance = v;
    }
    if let Some(v) = args.n_instances {
        spec.n_instances = v;
    }
    if let Some(v) = args.flip_noise {
        spec.flip_noise = v;
    }
    if let Some(v) = args.missing_object_rate {
        spec.missing_object_rate = v;
    }
    if let Some(v) = args.n_classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let data = synth(&spec)?;
    data.save(&args.out_dir)?;
    emit(
        &json!({
            "out_dir": args.out_dir,
            "n_objects": spec.n_objects,
            "n_scenarios": spec.n_scenarios,
            "n_instances": spec.n_instances,
            "n_classes": spec.n_classes,
            "files": [
                "dataset.jsonl",
                "matrix.csv",
                "labels.csv",
                "w_star.csv",
                "h_star.csv",
                "class_scenarios.json"
            ],
        }),
        args.out.as_deref(),
    )
}

fn cmd_factorize(args: FactorizeArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let (model, encoding, history) = pbmf::factorize_best_of(&a, &cfg.pbmf, cfg.restarts)?;
    model.save_json(dir.join("model.json"))?;
    encoding.write_csv(dir.join("encoding.csv"))?;
    pbmf::write_loss_history(&history, dir.join("loss.csv"))?;
    emit(
        &json!({
            "k": model.k(),
            "instances": a.n_instances(),
            "final_loss": history.last(),
            "recorded_iterations": history.len(),
            "artifacts": {
                "model": dir.join("model.json"),
                "encoding": dir.join("encoding.csv"),
                "loss": dir.join("loss.csv"),
            },
        }),
        args.out.as_deref(),
    )
}

fn cmd_recon_study(args: ReconStudyArgs) -> Result<()> {
    let mut cfg = args.overlay.resolve()?;
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let ks = args.k_list.unwrap_or_else(|| vec![cfg.pbmf.k]);
    if ks.is_empty() {
        return Err(Error::invalid("k_list must name at least one rank"));
    }
    let mut csv = String::from("method,k,error,weighted_error\n");
    for k in ks {
        cfg.pbmf.k = k;
        let study = pipeline::reconstruction_study(&a, &cfg.pbmf, cfg.restarts)?;
        for (method, errs) in study.rows() {
            csv.push_str(&format!(
                "{method},{k},{},{}\n",
                errs.error, errs.weighted_error
            ));
        }
    }
    emit_text(&csv, args.out.as_deref())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let encoding = match (&args.model, &args.head) {
        (Some(model), None) => {
            let Some(matrix) = &args.matrix else {
                return Err(Error::invalid("--model requires --matrix"));
            };
            let a = ObjectSceneMatrix::read_csv(matrix)?;
            let model = ScenarioModel::load_json(model)?;
            pbmf::encode(&a, &model)?
        }
        (None, Some(head)) => {
            let x = features_from(args.features.as_deref(), args.matrix.as_deref())?;
            let head = ScenarioHead::load_json(head)?;
            head::head_forward(&head, &x)?
        }
        _ => return Err(Error::invalid("pass exactly one of --model or --head")),
    };
    let path = dir.join("encoding.csv");
    encoding.write_csv(&path)?;
    emit(
        &json!({
            "instances": encoding.instance_ids.len(),
            "k": encoding.matrix.rows(),
            "artifacts": { "encoding": path },
        }),
        args.out.as_deref(),
    )
}

fn cmd_train_head(args: TrainHeadArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let x = features_or_indicators(args.features.as_deref(), &a)?;
    let model = ScenarioModel::load_json(&args.model)?;
    let (head, model, history) = head::train_head(&a, &x, &model, &cfg.schedule)?;
    head.save_json(dir.join("head.json"))?;
    model.save_json(dir.join("model.json"))?;
    pbmf::write_loss_history(&history, dir.join("head_loss.csv"))?;
    let encoded = head::head_forward(&head, &x)?;
    emit(
        &json!({
            "final_loss": history.last(),
            "recorded_epochs": history.len(),
            "encoding_bimodality": head::encoding_bimodality(&encoded.matrix),
            "artifacts": {
                "head": dir.join("head.json"),
                "model": dir.join("model.json"),
                "loss": dir.join("head_loss.csv"),
            },
        }),
        args.out.as_deref(),
    )
}

fn train_accuracy(clf: &SceneClassifier, h: &EncodingMatrix, labels: &[String]) -> Result<f64> {
    let mut predicted = Vec::with_capacity(labels.len());
    for j in 0..h.matrix.cols() {
        predicted.push(classifier::predict(clf, &h.matrix.column(j))?.0);
    }
    eval::accuracy(&predicted, labels)
}

fn cmd_train_classifier(args: TrainClassifierArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let encoding = EncodingMatrix::read_csv(&args.encoding)?;
    let labels = labels_for(&encoding.instance_ids, &read_labels_csv(&args.labels)?)?;
    let clf = classifier::fit(
        &encoding,
        &labels,
        cfg.classifier_l2,
        cfg.classifier_iters,
        cfg.classifier_lr,
        cfg.classifier_seed,
    )?;
    clf.save_json(dir.join("classifier.json"))?;
    emit(
        &json!({
            "classes": clf.class_names,
            "train_accuracy": train_accuracy(&clf, &encoding, &labels)?,
            "artifacts": { "classifier": dir.join("classifier.json") },
        }),
        args.out.as_deref(),
    )
}

fn cmd_joint_finetune(args: JointFinetuneArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let x = features_or_indicators(args.features.as_deref(), &a)?;
    let labels = labels_for(a.instance_ids(), &read_labels_csv(&args.labels)?)?;
    let model = ScenarioModel::load_json(&args.model)?;
    let head = ScenarioHead::load_json(&args.head)?;
    let clf = SceneClassifier::load_json(&args.classifier)?;
    let (head, model, clf, history) =
        head::joint_finetune(&a, &x, &labels, &model, &head, &clf, &cfg.schedule)?;
    head.save_json(dir.join("head.json"))?;
    model.save_json(dir.join("model.json"))?;
    clf.save_json(dir.join("classifier.json"))?;
    pbmf::write_loss_history(&history, dir.join("finetune_loss.csv"))?;
    let encoded = head::head_forward(&head, &x)?;
    emit(
        &json!({
            "final_loss": history.last(),
            "recorded_epochs": history.len(),
            "train_accuracy": train_accuracy(&clf, &encoded, &labels)?,
            "artifacts": {
                "head": dir.join("head.json"),
                "model": dir.join("model.json"),
                "classifier": dir.join("classifier.json"),
                "loss": dir.join("finetune_loss.csv"),
            },
        }),
        args.out.as_deref(),
    )
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let report = pipeline::run_pipeline(&cfg)?;
    emit_text(&report.to_json()?, args.out.as_deref())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let model = ScenarioModel::load_json(&args.model)?;
    let clf = SceneClassifier::load_json(&args.classifier)?;
    let encoding = EncodingMatrix::read_csv(&args.encoding)?;
    let column = encoding
        .instance_ids
        .iter()
        .position(|id| id == &args.instance_id)
        .ok_or_else(|| Error::UnknownName {
            kind: "instance",
            name: args.instance_id.clone(),
        })?;
    let h_col = encoding.matrix.column(column);
    let top_n = args.top_n.min(model.k());
    let explanation = classifier::explain(&clf, &model, &h_col, top_n)?;
    let rendering = classifier::render_explanation(&explanation);
    emit(
        &json!({
            "instance_id": args.instance_id,
            "explanation": explanation,
            "rendering": rendering,
        }),
        args.out.as_deref(),
    )
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let dir = artifact_dir(&cfg)?;
    let model = ScenarioModel::load_json(&args.model)?;
    let head = ScenarioHead::load_json(&args.head)?;
    let clf = SceneClassifier::load_json(&args.classifier)?;
    let x = features_from(args.features.as_deref(), args.matrix.as_deref())?;
    let ids: Vec<String> = x.instance_ids().to_vec();
    let mut index = retrieval::build_index(&model, &head, &clf, &x, &ids)?;
    index.set_thresholds(cfg.thresholds);
    let path = dir.join("index.jsonl");
    index.write_jsonl(&path)?;
    emit(
        &json!({
            "instances": index.len(),
            "classes": index.class_names(),
            "scenario_theta": cfg.thresholds.scenario_theta,
            "object_theta": cfg.thresholds.object_theta,
            "artifacts": { "index": path },
        }),
        args.out.as_deref(),
    )
}

fn cmd_query(args: QueryArgs) -> Result<()> {
    let index = ContentIndex::read_jsonl(&args.index)?;
    let query = retrieval::Query {
        classes: args.classes,
        required_scenarios: args.has_scenario,
        required_objects: args.has_object,
        excluded_objects: args.not_object,
    };
    let ranked = retrieval::execute(&index, &query, args.top_k)?;
    let results: Vec<serde_json::Value> = ranked
        .iter()
        .map(|(id, score)| {
            let record = index
                .records()
                .iter()
                .find(|r| &r.instance_id == id)
                .expect("ranked ids come from the index");
            json!({
                "instance_id": id,
                "score": score,
                "predicted_class": record.predicted_class,
            })
        })
        .collect();
    let total_terms = query.total_terms();
    emit(
        &json!({
            "query": query,
            "total_terms": total_terms,
            "results": results,
        }),
        args.out.as_deref(),
    )
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let index = ContentIndex::read_jsonl(&args.index)?;
    let report = retrieval::compare(&index, &args.instance_a, &args.instance_b)?;
    emit(
        &json!({
            "instance_a": args.instance_a,
            "instance_b": args.instance_b,
            "comparison": report,
        }),
        args.out.as_deref(),
    )
}

fn cmd_eval_objects(args: EvalObjectsArgs) -> Result<()> {
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let model = ScenarioModel::load_json(&args.model)?;
    let encoding = EncodingMatrix::read_csv(&args.encoding)?;
    if encoding.instance_ids != a.instance_ids() {
        return Err(Error::invalid(
            "encoding instances do not match the matrix instances",
        ));
    }
    let mut scores = model.dictionary.matmul(&encoding.matrix)?;
    scores.map_inplace(soft_cap);
    let result = eval::macro_auprc(&scores, a.matrix())?;
    emit(
        &json!({
            "macro_auprc": result.value,
            "evaluated_objects": result.evaluated_objects,
            "skipped_objects": result.skipped_objects,
        }),
        args.out.as_deref(),
    )
}

fn cmd_eval_retrieval(args: EvalRetrievalArgs) -> Result<()> {
    let cfg = args.overlay.resolve()?;
    let index = ContentIndex::read_jsonl(&args.index)?;
    let a = ObjectSceneMatrix::read_csv(&args.matrix)?;
    let labels = labels_for(a.instance_ids(), &read_labels_csv(&args.labels)?)?;
    let queries = retrieval::generate_queries(&a, &labels, cfg.n_queries, cfg.query_seed)?;
    if queries.len() < cfg.n_queries {
        eprintln!(
            "warning: generated {} of {} requested queries",
            queries.len(),
            cfg.n_queries
        );
    }
    let ndcg = retrieval::evaluate_ndcg(&index, &queries, &a, &labels, cfg.ndcg_k)?;
    emit(
        &json!({
            "mean_ndcg": ndcg,
            "ndcg_k": cfg.ndcg_k,
            "queries_requested": cfg.n_queries,
            "queries_generated": queries.len(),
        }),
        args.out.as_deref(),
    )
}
