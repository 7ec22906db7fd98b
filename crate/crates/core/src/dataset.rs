//! Dataset ingestion: JSON-lines annotation files, vocabulary filtering,
//! and seeded stratified train/test splits.
//!
//! The wire format is one annotated instance per line. Instances may
//! omit the `objects` field entirely; such instances carry a class and
//! optional features only, and take part in classifier training but not
//! in the reconstruction phases.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::FeatureMatrix;
use crate::matrix::{DenseMatrix, ObjectSceneMatrix};

/// One annotated scene. `objects: None` means the instance has no object
/// annotation at all; `Some(empty)` means it was annotated as empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub id: String,
    pub scene_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl AnnotatedInstance {
    pub fn has_objects(&self) -> bool {
        self.objects.is_some()
    }
}

/// Split policy. `train_per_class` and `test_per_class` apply to every
/// class; a class with fewer instances than their sum is an error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Objects present in fewer than this fraction of annotated training
    /// instances are dropped from the vocabulary.
    pub min_object_frequency: f64,
    pub split_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            min_object_frequency: 0.01,
            split_seed: 0,
            train_per_class: 0,
            test_per_class: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_object_frequency > 0.0 && self.min_object_frequency < 1.0) {
            return Err(Error::invalid(
                "min_object_frequency must lie strictly between 0 and 1",
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid(
                "train_per_class and test_per_class must be positive",
            ));
        }
        Ok(())
    }
}

/// One side of a split. The matrix covers only instances that carry
/// object annotations; labels and ids are aligned with its columns.
/// Unannotated instances are listed separately so classifier phases can
/// still use them through their features.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub annotated: ObjectSceneMatrix,
    pub labels: Vec<String>,
    pub features: Option<FeatureMatrix>,
    pub unannotated: Vec<AnnotatedInstance>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: SplitData,
    pub test: SplitData,
    pub vocabulary: Vec<String>,
    pub warnings: Vec<String>,
}

/// Reads one instance per line, reporting the first malformed line.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<AnnotatedInstance>> {
    let file = BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: AnnotatedInstance =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.as_ref().display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(instance.id.clone()) {
            return Err(Error::MalformedRecord {
                path: path.as_ref().display().to_string(),
                line: idx + 1,
                message: format!("duplicate instance id '{}'", instance.id),
            });
        }
        instances.push(instance);
    }
    Ok(instances)
}

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[AnnotatedInstance]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for instance in instances {
        writeln!(file, "{}", serde_json::to_string(instance)?)?;
    }
    Ok(())
}

/// Loads, splits, filters. The vocabulary is built from annotated
/// training instances only and sorted by name; objects below the
/// frequency floor are dropped everywhere, and object mentions outside
/// the vocabulary are dropped from the test side with a warning.
pub fn load_dataset(path: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<LoadedDataset> {
    cfg.validate()?;
    let instances = read_jsonl(path)?;
    split_dataset(instances, cfg)
}

/// Same as `load_dataset` but over instances already in memory.
pub fn split_dataset(
    instances: Vec<AnnotatedInstance>,
    cfg: &DatasetConfig,
) -> Result<LoadedDataset> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, instance) in instances.iter().enumerate() {
        by_class.entry(&instance.scene_class).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let need = cfg.train_per_class + cfg.test_per_class;
    for (class, mut members) in by_class {
        if members.len() < need {
            return Err(Error::invalid(format!(
                "class '{class}' has {} instances, split needs {need}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        train_idx.extend_from_slice(&members[..cfg.train_per_class]);
        test_idx.extend_from_slice(&members[cfg.train_per_class..need]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    // Vocabulary: counted over annotated training instances, kept when
    // the frequency reaches the floor.
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut annotated_train = 0usize;
    for &i in &train_idx {
        if let Some(objects) = &instances[i].objects {
            annotated_train += 1;
            for o in objects.iter().collect::<HashSet<_>>() {
                *counts.entry(o).or_default() += 1;
            }
        }
    }
    if annotated_train == 0 {
        return Err(Error::invalid(
            "no training instance carries object annotations",
        ));
    }
    let vocabulary: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c as f64 / annotated_train as f64 >= cfg.min_object_frequency)
        .map(|(&o, _)| o.to_string())
        .collect();
    if vocabulary.is_empty() {
        return Err(Error::invalid(
            "vocabulary is empty after frequency filtering",
        ));
    }

    let mut warnings = Vec::new();
    let train = build_split(&instances, &train_idx, &vocabulary, false, &mut warnings)?;
    let test = build_split(&instances, &test_idx, &vocabulary, true, &mut warnings)?;
    Ok(LoadedDataset {
        train,
        test,
        vocabulary,
        warnings,
    })
}

fn build_split(
    instances: &[AnnotatedInstance],
    indices: &[usize],
    vocabulary: &[String],
    warn_unknown: bool,
    warnings: &mut Vec<String>,
) -> Result<SplitData> {
    let position: HashMap<&str, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();

    let mut annotated: Vec<&AnnotatedInstance> = Vec::new();
    let mut unannotated = Vec::new();
    for &i in indices {
        if instances[i].has_objects() {
            annotated.push(&instances[i]);
        } else {
            unannotated.push(instances[i].clone());
        }
    }

    let mut data = DenseMatrix::zeros(vocabulary.len(), annotated.len());
    let mut labels = Vec::with_capacity(annotated.len());
    let mut ids = Vec::with_capacity(annotated.len());
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    for (j, instance) in annotated.iter().enumerate() {
        labels.push(instance.scene_class.clone());
        ids.push(instance.id.clone());
        for o in instance.objects.as_ref().expect("annotated") {
            match position.get(o.as_str()) {
                Some(&i) => data[(i, j)] = 1.0,
                None => *dropped.entry(o.clone()).or_default() += 1,
            }
        }
    }
    if warn_unknown {
        for (object, count) in dropped {
            warnings.push(format!(
                "object '{object}' outside the training vocabulary dropped from {count} test instance(s)"
            ));
        }
    }

    let features = collect_features(&annotated)?;
    let matrix = ObjectSceneMatrix::new(data, vocabulary.to_vec(), ids)?;
    Ok(SplitData {
        annotated: matrix,
        labels,
        features,
        unannotated,
    })
}

fn collect_features(instances: &[&AnnotatedInstance]) -> Result<Option<FeatureMatrix>> {
    let with: Vec<&&AnnotatedInstance> =
        instances.iter().filter(|i| i.features.is_some()).collect();
    if with.is_empty() {
        return Ok(None);
    }
    if with.len() != instances.len() {
        return Err(Error::invalid(
            "features must be present on all annotated instances or none",
        ));
    }
    let dim = with[0].features.as_ref().expect("checked").len();
    let mut data = DenseMatrix::zeros(dim, instances.len());
    let mut ids = Vec::with_capacity(instances.len());
    for (j, instance) in instances.iter().enumerate() {
        let f = instance.features.as_ref().expect("checked");
        if f.len() != dim {
            return Err(Error::dims("feature length", dim, f.len()));
        }
        data.set_column(j, f);
        ids.push(instance.id.clone());
    }
    Ok(Some(FeatureMatrix::new(data, ids)?))
}
