//! Planted-scenario corpus generator. Every dataset comes with its
//! ground truth: the planted dictionary, the planted activations, and
//! the class-to-scenario map, so recovery and ranking tests can score
//! against known answers.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedInstance;
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, ObjectSceneMatrix};

/// Generator parameters. Scenarios are split over the classes in
/// contiguous pools; instance classes rotate round-robin, and each
/// instance activates `scenarios_per_instance` scenarios drawn from its
/// class pool without replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_objects: usize,
    pub n_scenarios: usize,
    pub objects_per_scenario: usize,
    pub scenarios_per_instance: usize,
    pub n_instances: usize,
    /// Probability that an absent object is flipped on.
    pub flip_noise: f64,
    /// Probability that a present object is dropped.
    pub missing_object_rate: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_objects: 60,
            n_scenarios: 10,
            objects_per_scenario: 6,
            scenarios_per_instance: 2,
            n_instances: 1000,
            flip_noise: 0.01,
            missing_object_rate: 0.1,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0
            || self.n_scenarios == 0
            || self.n_instances == 0
            || self.objects_per_scenario == 0
            || self.scenarios_per_instance == 0
            || self.n_classes == 0
        {
            return Err(Error::invalid("all synthesis counts must be positive"));
        }
        if self.objects_per_scenario > self.n_objects {
            return Err(Error::invalid(format!(
                "objects_per_scenario {} exceeds n_objects {}",
                self.objects_per_scenario, self.n_objects
            )));
        }
        if self.n_classes > self.n_scenarios {
            return Err(Error::invalid(format!(
                "n_classes {} exceeds n_scenarios {}",
                self.n_classes, self.n_scenarios
            )));
        }
        let min_pool = self.n_scenarios / self.n_classes;
        if self.scenarios_per_instance > min_pool {
            return Err(Error::invalid(format!(
                "scenarios_per_instance {} exceeds the smallest class pool {min_pool}",
                self.scenarios_per_instance
            )));
        }
        for (name, p) in [
            ("flip_noise", self.flip_noise),
            ("missing_object_rate", self.missing_object_rate),
        ] {
            if !(0.0..0.5).contains(&p) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 0.5), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// A generated corpus plus everything that was planted to make it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub instances: Vec<AnnotatedInstance>,
    pub object_names: Vec<String>,
    pub class_names: Vec<String>,
    /// Planted dictionary, objects by scenarios, binary.
    pub w_star: DenseMatrix,
    /// Planted activations, scenarios by instances, binary.
    pub h_star: DenseMatrix,
    /// Scenario indices available to each class.
    pub class_scenarios: Vec<Vec<usize>>,
}

impl SynthData {
    /// The corpus as an aligned matrix plus labels. Instance columns
    /// reflect the noisy annotations, exactly as written to disk.
    pub fn as_matrix(&self) -> Result<(ObjectSceneMatrix, Vec<String>)> {
        let m = self.object_names.len();
        let n = self.instances.len();
        let position: std::collections::HashMap<&str, usize> = self
            .object_names
            .iter()
            .enumerate()
            .map(|(i, o)| (o.as_str(), i))
            .collect();
        let mut data = DenseMatrix::zeros(m, n);
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for (j, instance) in self.instances.iter().enumerate() {
            labels.push(instance.scene_class.clone());
            ids.push(instance.id.clone());
            for o in instance.objects.as_ref().expect("synth instances are annotated") {
                data[(position[o.as_str()], j)] = 1.0;
            }
        }
        let matrix = ObjectSceneMatrix::new(data, self.object_names.clone(), ids)?;
        Ok((matrix, labels))
    }

    /// Writes the dataset and its ground truth under `dir`:
    /// `dataset.jsonl`, the same corpus as `matrix.csv` plus
    /// `labels.csv`, and the planted `w_star.csv`, `h_star.csv`,
    /// `class_scenarios.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::dataset::write_jsonl(dir.join("dataset.jsonl"), &self.instances)?;
        let (matrix, labels) = self.as_matrix()?;
        matrix.write_csv(dir.join("matrix.csv"))?;
        let mut labels_file =
            std::io::BufWriter::new(std::fs::File::create(dir.join("labels.csv"))?);
        use std::io::Write as _;
        writeln!(labels_file, "instance_id,label")?;
        for (instance, label) in self.instances.iter().zip(&labels) {
            writeln!(labels_file, "{},{label}", instance.id)?;
        }
        self.w_star.write_csv(dir.join("w_star.csv"))?;
        self.h_star.write_csv(dir.join("h_star.csv"))?;
        let file = std::io::BufWriter::new(std::fs::File::create(dir.join("class_scenarios.json"))?);
        serde_json::to_writer_pretty(
            file,
            &serde_json::json!({
                "class_names": self.class_names,
                "class_scenarios": self.class_scenarios,
            }),
        )?;
        Ok(())
    }
}

/// Contiguous scenario pools, sized as evenly as the division allows
/// with the remainder going to the first classes.
fn class_pools(n_scenarios: usize, n_classes: usize) -> Vec<Vec<usize>> {
    let base = n_scenarios / n_classes;
    let rem = n_scenarios % n_classes;
    let mut pools = Vec::with_capacity(n_classes);
    let mut start = 0;
    for c in 0..n_classes {
        let size = base + usize::from(c < rem);
        pools.push((start..start + size).collect());
        start += size;
    }
    pools
}

pub fn synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.n_objects;
    let k = spec.n_scenarios;
    let n = spec.n_instances;

    let object_names: Vec<String> = (0..m).map(|i| format!("obj{i:03}")).collect();
    let class_names: Vec<String> = (0..spec.n_classes).map(|c| format!("class{c:02}")).collect();
    let class_scenarios = class_pools(k, spec.n_classes);

    // Plant supports: each scenario holds a distinct draw of objects.
    let mut w_star = DenseMatrix::zeros(m, k);
    for q in 0..k {
        let picks = rand::seq::index::sample(&mut rng, m, spec.objects_per_scenario);
        for i in picks {
            w_star[(i, q)] = 1.0;
        }
    }

    let mut h_star = DenseMatrix::zeros(k, n);
    let mut instances = Vec::with_capacity(n);
    for j in 0..n {
        let class = j % spec.n_classes;
        let pool = &class_scenarios[class];
        let picks = rand::seq::index::sample(&mut rng, pool.len(), spec.scenarios_per_instance);
        let mut active: Vec<usize> = picks.iter().map(|p| pool[p]).collect();
        active.sort_unstable();
        for &q in &active {
            h_star[(q, j)] = 1.0;
        }

        let mut objects = Vec::new();
        for i in 0..m {
            let clean = active.iter().any(|&q| w_star[(i, q)] == 1.0);
            // One uniform draw per cell keeps the stream aligned across
            // both branches.
            let u = rng.random::<f64>();
            let present = if clean {
                u >= spec.missing_object_rate
            } else {
                u < spec.flip_noise
            };
            if present {
                objects.push(object_names[i].clone());
            }
        }
        instances.push(AnnotatedInstance {
            id: format!("inst{j:05}"),
            scene_class: class_names[class].clone(),
            // Features default to the object indicators themselves;
            // pipelines materialize them from the matrix on demand.
            objects: Some(objects),
            features: None,
        });
    }

    Ok(SynthData {
        instances,
        object_names,
        class_names,
        w_star,
        h_star,
        class_scenarios,
    })
}
