//! Oracles and shared fixtures for the acceptance suite.
//!
//! Every oracle here reaches its answer by a different route than the
//! library code it checks: assignment by shortest augmenting paths,
//! Boolean rank by exhaustive enumeration, expected ranking quality by
//! Monte-Carlo sampling. Fixtures that are expensive to build (the
//! planted corpus factorization, the full pipeline run) are computed
//! once per process and shared across tests.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use scenarios::matrix::{DenseMatrix, ObjectSceneMatrix};
use scenarios::pbmf::{self, EncodingMatrix, PbmfConfig, ScenarioModel};
use scenarios::pipeline::{PipelineConfig, PipelineReport, run_pipeline};
use scenarios::synth::{SynthData, SynthSpec, synth};

// ---------------------------------------------------------------------------
// Minimum-cost assignment.

/// Minimum-cost perfect assignment on a square cost matrix by shortest
/// augmenting paths with potentials. Returns the column assigned to each
/// row. Cubic in the matrix side.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|row| row.len() == n), "square matrix");
    // 1-indexed arrays; row 0 and column 0 are virtual.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assert!(assignment.iter().all(|&j| j != usize::MAX));
    assignment
}

fn column_support(m: &DenseMatrix, col: usize, threshold: f64) -> Vec<bool> {
    (0..m.rows()).map(|i| m[(i, col)] >= threshold).collect()
}

pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean Jaccard similarity between recovered and planted scenario
/// supports under the best one-to-one matching. Recovered columns are
/// binarized at `threshold`; planted columns at 0.5.
pub fn mean_matched_jaccard(recovered: &DenseMatrix, planted: &DenseMatrix, threshold: f64) -> f64 {
    assert_eq!(recovered.cols(), planted.cols(), "scenario counts differ");
    let k = recovered.cols();
    let rec: Vec<Vec<bool>> = (0..k)
        .map(|q| column_support(recovered, q, threshold))
        .collect();
    let plant: Vec<Vec<bool>> = (0..k).map(|q| column_support(planted, q, 0.5)).collect();
    let cost: Vec<Vec<f64>> = rec
        .iter()
        .map(|r| plant.iter().map(|p| -jaccard(r, p)).collect())
        .collect();
    let assignment = hungarian(&cost);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(q, &p)| jaccard(&rec[q], &plant[p]))
        .sum();
    total / k as f64
}

// ---------------------------------------------------------------------------
// Exhaustive Boolean factorization.

/// Minimum number of cell mismatches between the 0.5-binarized input and
/// any Boolean product of binary factors at rank `k`, found by complete
/// enumeration. Feasible only for tiny shapes; the bit budget is asserted.
pub fn exhaustive_boolean_error(a: &DenseMatrix, k: usize) -> usize {
    let (m, n) = a.shape();
    assert!(m * k <= 16 && k * n <= 16, "enumeration is bounded to 2^32 pairs");
    let target: Vec<bool> = a.data().iter().map(|&v| v >= 0.5).collect();
    let mut best = usize::MAX;
    for wbits in 0u32..1 << (m * k) {
        'h: for hbits in 0u32..1 << (k * n) {
            let mut mismatches = 0usize;
            for i in 0..m {
                for j in 0..n {
                    let mut on = false;
                    for q in 0..k {
                        let w = wbits >> (i * k + q) & 1 == 1;
                        let h = hbits >> (q * n + j) & 1 == 1;
                        if w && h {
                            on = true;
                            break;
                        }
                    }
                    if target[i * n + j] != on {
                        mismatches += 1;
                        if mismatches >= best {
                            continue 'h;
                        }
                    }
                }
            }
            best = mismatches;
            if best == 0 {
                return 0;
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Ranking quality.

/// Discounted cumulative gain over the first `k` positions: linear gain,
/// log2(position + 2) discount.
pub fn dcg_at(gains_in_rank_order: &[f64], k: usize) -> f64 {
    gains_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &g)| g / ((pos + 2) as f64).log2())
        .sum()
}

/// NDCG of one ranking against the ideal reordering of the full gain pool.
pub fn ndcg_at(gains_in_rank_order: &[f64], all_gains: &[f64], k: usize) -> f64 {
    let mut ideal = all_gains.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite gains"));
    let idcg = dcg_at(&ideal, k);
    if idcg > 0.0 {
        dcg_at(gains_in_rank_order, k) / idcg
    } else {
        0.0
    }
}

/// Expected NDCG at `k` of a uniformly random ranking, estimated by
/// sampling `draws` permutations per gain pool and averaging over pools.
pub fn mc_random_ndcg(gain_pools: &[Vec<f64>], k: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for pool in gain_pools {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut pool_total = 0.0;
        for _ in 0..draws {
            order.shuffle(&mut rng);
            let ranked: Vec<f64> = order.iter().take(k).map(|&i| pool[i]).collect();
            pool_total += ndcg_at(&ranked, pool, k);
        }
        total += pool_total / draws as f64;
    }
    total / gain_pools.len() as f64
}

// ---------------------------------------------------------------------------
// Suite-wide training invariants.

pub fn assert_non_increasing(history: &[f64], label: &str) {
    assert!(!history.is_empty(), "{label}: empty loss history");
    for (i, pair) in history.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0],
            "{label}: loss rose from {} to {} at step {}",
            pair[0],
            pair[1],
            i + 1
        );
    }
}

pub fn assert_unit_box(m: &DenseMatrix, label: &str) {
    assert!(m.in_unit_box(), "{label}: entries escape [0, 1]");
}

// ---------------------------------------------------------------------------
// Shared planted corpus and its factorization.

pub struct PlantedCorpus {
    pub data: SynthData,
    pub a: ObjectSceneMatrix,
}

fn planted_spec(scenarios_per_instance: usize) -> SynthSpec {
    SynthSpec {
        n_objects: 60,
        n_scenarios: 10,
        objects_per_scenario: 6,
        scenarios_per_instance,
        n_instances: 2000,
        flip_noise: 0.01,
        missing_object_rate: 0.1,
        n_classes: 2,
        seed: 7,
    }
}

fn build_corpus(spec: &SynthSpec) -> PlantedCorpus {
    let data = synth(spec).expect("synthesis");
    let (a, _labels) = data.as_matrix().expect("corpus matrix");
    PlantedCorpus { data, a }
}

/// 60 objects, 10 planted scenarios of 6 objects, 2000 instances with a
/// tenth of present objects dropped and 1% spurious flips. Two scenarios
/// per instance: the superposition is what makes support recovery
/// nontrivial, and it pins supports exactly; with single-scenario
/// instances the objective prefers padding each support with entries
/// that soak up flip noise.
pub fn planted_corpus() -> &'static PlantedCorpus {
    static CORPUS: OnceLock<PlantedCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| build_corpus(&planted_spec(2)))
}

/// Same generator, one scenario per instance. Used for the baseline
/// comparison: with overlapping scenarios the capped product models the
/// OR structure so well that it beats every linear baseline including
/// the SVD optimum, which empties an ordering comparison against them.
/// Single-scenario instances keep all models in the linear regime.
pub fn ladder_corpus() -> &'static PlantedCorpus {
    static CORPUS: OnceLock<PlantedCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| build_corpus(&planted_spec(1)))
}

pub struct PlantedFit {
    pub model: ScenarioModel,
    pub encoding: EncodingMatrix,
    pub history: Vec<f64>,
    pub elapsed: Duration,
}

/// Best of 3 restarts at the planted rank with default settings, timed.
pub fn planted_fit() -> &'static PlantedFit {
    static FIT: OnceLock<PlantedFit> = OnceLock::new();
    FIT.get_or_init(|| {
        let corpus = planted_corpus();
        let cfg = PbmfConfig {
            k: 10,
            ..PbmfConfig::default()
        };
        let start = Instant::now();
        let (model, encoding, history) =
            pbmf::factorize_best_of(&corpus.a, &cfg, 3).expect("factorization");
        let elapsed = start.elapsed();
        PlantedFit {
            model,
            encoding,
            history,
            elapsed,
        }
    })
}

// ---------------------------------------------------------------------------
// Shared pipeline run over a 5-class corpus.

pub struct PipelineFixture {
    /// Owns the dataset and artifact directories for the whole process.
    pub dir: tempfile::TempDir,
    pub cfg: PipelineConfig,
    pub report: PipelineReport,
}

impl PipelineFixture {
    pub fn out_dir(&self) -> std::path::PathBuf {
        std::path::PathBuf::from(&self.cfg.out_dir)
    }
}

/// Full pipeline over a 5-class corpus. Each class draws 2 of its own 3
/// scenarios per instance, so classes are separable while instances of
/// one class still differ in content: retrieval queries that exclude an
/// object then discriminate between scenario combinations instead of
/// reducing to the class label. Present objects are never dropped; with
/// drop noise the query generator's excluded-object slot admits objects
/// that every matching instance actually contains (absence in a witness
/// can come from a dropped observation), scores then cap at 3 of 4
/// terms for every record, and ranking inside that tier is noise the
/// denoising index cannot see. Spurious flips stay on so every object
/// occurs somewhere and rarity weighting stays well defined. 150
/// training and 100 test instances per class; the index and report land
/// in `run1/` under the fixture directory.
pub fn pipeline_fixture() -> &'static PipelineFixture {
    static FIXTURE: OnceLock<PipelineFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::TempDir::new().expect("temp dir");
        let spec = SynthSpec {
            n_objects: 60,
            n_scenarios: 15,
            objects_per_scenario: 5,
            scenarios_per_instance: 2,
            n_instances: 1500,
            flip_noise: 0.01,
            missing_object_rate: 0.0,
            n_classes: 5,
            seed: 11,
        };
        let data = synth(&spec).expect("synthesis");
        let dataset = dir.path().join("dataset.jsonl");
        scenarios::dataset::write_jsonl(&dataset, &data.instances).expect("write corpus");

        let mut cfg = PipelineConfig::default();
        let out_dir = dir.path().join("run1");
        for (key, value) in [
            ("dataset", dataset.display().to_string()),
            ("out_dir", out_dir.display().to_string()),
            ("train_per_class", "150".into()),
            ("test_per_class", "100".into()),
            ("k", "15".into()),
            ("n_queries", "500".into()),
        ] {
            cfg.apply(key, &value).expect("config key");
        }
        let report = run_pipeline(&cfg).expect("pipeline run");
        PipelineFixture { dir, cfg, report }
    })
}

// ---------------------------------------------------------------------------
// Deterministic random matrices for fixture construction.

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = lo + (hi - lo) * rng.random::<f64>();
    }
    m
}

/// Random binary matrix from the given seed, or None when some row or
/// column comes out empty.
pub fn try_binary_matrix(rows: usize, cols: usize, density: f64, seed: u64) -> Option<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.random::<f64>() < density { 1.0 } else { 0.0 };
    }
    let rows_covered = (0..rows).all(|i| (0..cols).any(|j| m[(i, j)] == 1.0));
    let cols_covered = (0..cols).all(|j| (0..rows).any(|i| m[(i, j)] == 1.0));
    (rows_covered && cols_covered).then_some(m)
}

/// First seed at or after `start_seed` whose draw covers every row and
/// column, with the matrix it produces.
pub fn binary_matrix_any_seed(
    rows: usize,
    cols: usize,
    density: f64,
    start_seed: u64,
) -> (DenseMatrix, u64) {
    for seed in start_seed..start_seed + 1000 {
        if let Some(m) = try_binary_matrix(rows, cols, density, seed) {
            return (m, seed);
        }
    }
    panic!("no covering draw within 1000 seeds at density {density}");
}
