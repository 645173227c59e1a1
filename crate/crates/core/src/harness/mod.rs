//! Declarative scenario runner: six seeded scenarios covering the two
//! non-robust cases of each inspected defense, with CSV/JSON reports,
//! SVG plots, and aggregate assertions enforced via the outcome.

pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abs_scan::{self, AbsConfig};
use crate::attacks::{
    pgd_weight_finetune, poison_dataset, PerturbConfig, PoisonConfig, TriggerSpec,
};
use crate::checkpoint;
use crate::datasets::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::mntd::{
    self, choose_threshold, compute_auc, score_records, MetaConfig, ShadowClass, ShadowConfig,
    ShadowModelRecord, ThresholdPolicy,
};
use crate::nets::{self, evaluate_asr, evaluate_cda, train, Model, ModelSpec, TrainConfig};
use crate::neural_cleanse::{self, median, NcConfig};
use crate::tensor::Tensor;
use crate::Verdict;

pub use plot::{emit_plot, PlotKind};
pub use report::{
    aggregate, emit_report, parse_csv, MetricRow, ReportFormat, RunRecord,
};

/// Environment variable bounding the worker pool (the only environment
/// interface the harness has).
pub const WORKERS_ENV: &str = "BDLAB_WORKERS";

pub const SCENARIO_IDS: [&str; 6] = [
    "nc_binary",
    "nc_depth",
    "abs_poison_sweep",
    "abs_weight_perturb",
    "mntd_threshold",
    "mntd_hparam_sweep",
];

fn ensure_worker_pool() {
    use std::sync::Once;
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            if let Ok(n) = v.parse::<usize>() {
                // ignore failure if a global pool already exists
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub num_classes: usize,
    pub resolution: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Base seed for data generation; the run seed is mixed in.
    pub seed: u64,
    /// Directory holding the canonical IDX files; `BDLAB_MNIST_DIR` is the
    /// fallback. Missing files fall back to synthetic data, marked in the
    /// report.
    pub mnist_dir: Option<PathBuf>,
    /// Average-pooling factor applied to loaded images.
    pub downsample: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            num_classes: 10,
            resolution: 16,
            n_train: 2000,
            n_test: 500,
            seed: 42,
            mnist_dir: None,
            downsample: 1,
        }
    }
}

/// Resolve the dataset pair for one run seed. The bool reports whether a
/// requested MNIST source fell back to synthetic data.
pub fn build_dataset(cfg: &DatasetConfig, run_seed: u64) -> Result<(Dataset, Dataset, bool)> {
    let data_seed = cfg.seed.wrapping_add(run_seed.wrapping_mul(0x9e37_79b9));
    if cfg.source == DatasetSource::Mnist {
        let dir = cfg
            .mnist_dir
            .clone()
            .or_else(|| std::env::var("BDLAB_MNIST_DIR").ok().map(PathBuf::from));
        if let Some(dir) = dir {
            let train_images = dir.join("train-images-idx3-ubyte");
            let train_labels = dir.join("train-labels-idx1-ubyte");
            let test_images = dir.join("t10k-images-idx3-ubyte");
            let test_labels = dir.join("t10k-labels-idx1-ubyte");
            if train_images.exists() && train_labels.exists() && test_images.exists()
                && test_labels.exists()
            {
                let full_train = datasets::load_idx(&train_images, &train_labels)?;
                let full_test =
                    datasets::load_idx(&test_images, &test_labels)?.with_split(Split::Test);
                let full_train = datasets::downsample(&full_train, cfg.downsample)?;
                let full_test = datasets::downsample(&full_test, cfg.downsample)?;
                let train = seeded_subset(&full_train, cfg.n_train, data_seed);
                let test = seeded_subset(&full_test, cfg.n_test, data_seed.wrapping_add(1));
                return Ok((train, test, false));
            }
        }
        // marked in the per-seed record by the caller
        let (train, test) = datasets::synth_split(
            cfg.n_train,
            cfg.n_test,
            cfg.num_classes,
            cfg.resolution,
            data_seed,
        );
        return Ok((train, test, true));
    }
    let (train, test) = datasets::synth_split(
        cfg.n_train,
        cfg.n_test,
        cfg.num_classes,
        cfg.resolution,
        data_seed,
    );
    Ok((train, test, false))
}

fn seeded_subset(d: &Dataset, n: usize, seed: u64) -> Dataset {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n.min(d.len()));
    d.subset(&idx)
}

/// Training hyperparameters as they appear in scenario files; the run seed
/// is attached when the config is instantiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub proportion: f32,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams { epochs: 10, batch_size: 32, learning_rate: 1e-3, proportion: 1.0 }
    }
}

impl FitParams {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: Default::default(),
            proportion: self.proportion,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NcBinaryParams {
    pub model: String,
    pub model_width: Option<usize>,
    pub train: FitParams,
    pub poison_rate: f64,
    pub trigger: TriggerSpec,
    pub asr_floor: f64,
    /// Tolerance on |AI - 1/C| for the binary constancy assertion.
    pub ai_tolerance: f64,
    pub nc: NcConfig,
}

impl Default for NcBinaryParams {
    fn default() -> Self {
        NcBinaryParams {
            model: "mlp2".into(),
            model_width: Some(32),
            train: FitParams { epochs: 8, ..Default::default() },
            poison_rate: 0.1,
            trigger: TriggerSpec::paper_square(0),
            asr_floor: 0.95,
            ai_tolerance: 1e-6,
            nc: NcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NcDepthParams {
    pub ladder: Vec<String>,
    pub model_width: Option<usize>,
    pub train: FitParams,
    pub poison_rate: f64,
    pub trigger: TriggerSpec,
    pub asr_floor: f64,
    pub nc: NcConfig,
    /// Seeds (out of the run's seed list) that must flag the shallow rung.
    pub shallow_majority: usize,
}

impl Default for NcDepthParams {
    fn default() -> Self {
        NcDepthParams {
            ladder: vec!["mlp2".into(), "cnn43".into(), "cnn8".into()],
            model_width: None,
            train: FitParams { epochs: 8, ..Default::default() },
            poison_rate: 0.1,
            trigger: TriggerSpec::paper_square(0),
            asr_floor: 0.95,
            nc: NcConfig { steps: 200, samples_per_class: 3, eval_samples: 60, ..NcConfig::default() },
            shallow_majority: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsSweepParams {
    pub model: String,
    pub model_width: Option<usize>,
    pub train: FitParams,
    /// Poison rates in decreasing order; 0 is the clean model.
    pub rates: Vec<f64>,
    pub trigger: TriggerSpec,
    pub asr_floor: f64,
    /// Max allowed |REASR(lowest positive rate) - REASR(clean)|.
    pub indist_tolerance: f64,
    pub abs: AbsConfig,
}

impl Default for AbsSweepParams {
    fn default() -> Self {
        AbsSweepParams {
            model: "mlp2".into(),
            model_width: None,
            train: FitParams { epochs: 12, ..Default::default() },
            rates: vec![0.5, 0.11, 0.015, 0.0],
            trigger: TriggerSpec::paper_square(0),
            asr_floor: 0.95,
            indist_tolerance: 0.1,
            abs: AbsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsPerturbParams {
    pub model: String,
    pub model_width: Option<usize>,
    pub train: FitParams,
    pub finetune: FitParams,
    pub epsilon: f32,
    pub poison_rate: f64,
    pub trigger: TriggerSpec,
    pub asr_floor: f64,
    pub reasr_tolerance: f64,
    pub abs: AbsConfig,
}

impl Default for AbsPerturbParams {
    fn default() -> Self {
        AbsPerturbParams {
            model: "mlp2".into(),
            model_width: Some(128),
            train: FitParams { epochs: 12, ..Default::default() },
            finetune: FitParams { epochs: 30, ..Default::default() },
            epsilon: 0.01,
            poison_rate: 0.5,
            trigger: TriggerSpec::paper_square(0),
            asr_floor: 0.95,
            reasr_tolerance: 0.1,
            abs: AbsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MntdThresholdParams {
    pub shadow_model: String,
    pub model_width: Option<usize>,
    pub n_train_benign: usize,
    pub n_train_backdoor: usize,
    pub n_test_benign: usize,
    pub n_test_backdoor: usize,
    /// Hyperparameters of the meta-training shadow population.
    pub train_shadow: FitParams,
    /// Hyperparameters of the shifted test population.
    pub test_shadow: FitParams,
    pub meta: MetaConfig,
    pub auc_floor: f64,
    pub accuracy_band: [f64; 2],
    /// Required multiple of the train-score IQR separating the medians.
    pub iqr_factor: f64,
}

impl Default for MntdThresholdParams {
    fn default() -> Self {
        MntdThresholdParams {
            shadow_model: "mlp2".into(),
            model_width: Some(32),
            n_train_benign: 64,
            n_train_backdoor: 64,
            n_test_benign: 32,
            n_test_backdoor: 32,
            train_shadow: FitParams {
                epochs: 20,
                batch_size: 100,
                learning_rate: 1e-3,
                proportion: 0.02,
            },
            test_shadow: FitParams {
                epochs: 4,
                batch_size: 100,
                learning_rate: 1e-3,
                proportion: 0.5,
            },
            meta: MetaConfig::default(),
            auc_floor: 0.85,
            accuracy_band: [0.4, 0.6],
            iqr_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MntdSweepParams {
    pub shadow_model: String,
    pub model_width: Option<usize>,
    pub n_train_benign: usize,
    pub n_train_backdoor: usize,
    pub n_test_benign: usize,
    pub n_test_backdoor: usize,
    pub train_shadow: FitParams,
    /// Test-population hyperparameters; `epochs` is the fixed backdoored-side
    /// budget while the benign side sweeps `epochs_sweep`.
    pub test_shadow: FitParams,
    pub epochs_sweep: Vec<usize>,
    /// Required AUC drop from the first swept point to the last.
    pub drop_at_max: f64,
    /// Both-classes-converged epoch budget.
    pub converged_epochs: usize,
    /// Benign-side budget for the extended-convergence comparison.
    pub converged_benign_epochs: usize,
    pub converged_band: [f64; 2],
    pub meta: MetaConfig,
}

impl Default for MntdSweepParams {
    fn default() -> Self {
        let t = MntdThresholdParams::default();
        MntdSweepParams {
            shadow_model: t.shadow_model,
            model_width: t.model_width,
            n_train_benign: t.n_train_benign,
            n_train_backdoor: t.n_train_backdoor,
            n_test_benign: t.n_test_benign,
            n_test_backdoor: t.n_test_backdoor,
            train_shadow: t.train_shadow,
            test_shadow: t.test_shadow,
            epochs_sweep: vec![4, 5, 6, 7, 8],
            drop_at_max: 0.15,
            converged_epochs: 16,
            converged_benign_epochs: 32,
            converged_band: [0.3, 0.6],
            meta: MetaConfig::default(),
        }
    }
}

/// A fully resolved scenario definition, loadable from strict TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Free-form note carried through from preset files.
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub nc_binary: Option<NcBinaryParams>,
    #[serde(default)]
    pub nc_depth: Option<NcDepthParams>,
    #[serde(default)]
    pub abs_poison_sweep: Option<AbsSweepParams>,
    #[serde(default)]
    pub abs_weight_perturb: Option<AbsPerturbParams>,
    #[serde(default)]
    pub mntd_threshold: Option<MntdThresholdParams>,
    #[serde(default)]
    pub mntd_hparam_sweep: Option<MntdSweepParams>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl ScenarioConfig {
    /// Stable identity of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !SCENARIO_IDS.contains(&self.scenario.as_str()) {
            return Err(Error::Config(format!(
                "unknown scenario '{}'; known: {SCENARIO_IDS:?}",
                self.scenario
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be nonempty".into()));
        }
        Ok(())
    }
}

/// Strict TOML parse; unknown keys are hard errors.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Shipped desk-scale preset for a scenario id.
pub fn preset(id: &str) -> Result<ScenarioConfig> {
    let text = match id {
        "nc_binary" => include_str!("../../presets/nc_binary.toml"),
        "nc_depth" => include_str!("../../presets/nc_depth.toml"),
        "abs_poison_sweep" => include_str!("../../presets/abs_poison_sweep.toml"),
        "abs_weight_perturb" => include_str!("../../presets/abs_weight_perturb.toml"),
        "mntd_threshold" => include_str!("../../presets/mntd_threshold.toml"),
        "mntd_hparam_sweep" => include_str!("../../presets/mntd_hparam_sweep.toml"),
        other => return Err(Error::Config(format!("no preset for scenario '{other}'"))),
    };
    parse_config(text)
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub records: Vec<RunRecord>,
    pub aggregate: RunRecord,
    /// Failed aggregate assertions, empty when the scenario holds.
    pub failures: Vec<String>,
    pub run_dir: PathBuf,
    pub passed: bool,
}

/// Collects assertion results into aggregate rows plus a failure list.
struct Asserter {
    rows: Vec<MetricRow>,
    failures: Vec<String>,
}

impl Asserter {
    fn new() -> Self {
        Asserter { rows: Vec::new(), failures: Vec::new() }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.rows.push(
            MetricRow::new("assert", name, if pass { 1.0 } else { 0.0 })
                .with_verdict(if pass { "pass" } else { "fail" }),
        );
        if !pass {
            self.failures.push(format!("{name}: {detail}"));
        }
    }
}

fn sanitize(text: &str) -> String {
    text.replace([',', '\n'], ";")
}

fn scenario_seed(run_seed: u64, salt: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

/// Execute a scenario per seed, aggregate, assert, and write reports and
/// plots into a fresh timestamped directory under `out_root`.
pub fn run_scenario(cfg: &ScenarioConfig, out_root: &Path) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    ensure_worker_pool();
    let run_dir = fresh_run_dir(out_root, &cfg.scenario)?;
    let hash = cfg.hash();

    let mut records = Vec::new();
    let mut stage_failures = Vec::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let seed_dir = run_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let result = match cfg.scenario.as_str() {
            "nc_binary" => run_nc_binary(cfg, seed, &seed_dir),
            "nc_depth" => run_nc_depth(cfg, seed, &seed_dir),
            "abs_poison_sweep" => run_abs_sweep(cfg, seed, &seed_dir),
            "abs_weight_perturb" => run_abs_perturb(cfg, seed, &seed_dir),
            "mntd_threshold" => run_mntd_threshold(cfg, seed, &seed_dir),
            "mntd_hparam_sweep" => run_mntd_sweep(cfg, seed, &seed_dir),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        };
        let mut record = match result {
            Ok(r) => r,
            Err(e) => {
                // partial record with the failing stage tagged
                stage_failures.push(format!("seed {seed}: {e}"));
                RunRecord {
                    scenario: cfg.scenario.clone(),
                    seed: seed.to_string(),
                    config_hash: hash.clone(),
                    metrics: vec![MetricRow::new("failure", "stage_failed", 1.0)
                        .with_verdict(sanitize(&e.to_string()))],
                    wall_clock_s: started.elapsed().as_secs_f64(),
                    artifacts: Vec::new(),
                }
            }
        };
        record.scenario = cfg.scenario.clone();
        record.seed = seed.to_string();
        record.config_hash = hash.clone();
        record.wall_clock_s = started.elapsed().as_secs_f64();
        records.push(record);
    }

    let mut agg = aggregate(&records);
    let mut asserter = Asserter::new();
    for f in &stage_failures {
        asserter.check("stage_completed", false, f.clone());
    }
    if stage_failures.is_empty() {
        match cfg.scenario.as_str() {
            "nc_binary" => assert_nc_binary(cfg, &records, &mut asserter),
            "nc_depth" => assert_nc_depth(cfg, &records, &mut asserter),
            "abs_poison_sweep" => assert_abs_sweep(cfg, &records, &mut asserter),
            "abs_weight_perturb" => assert_abs_perturb(cfg, &records, &mut asserter),
            "mntd_threshold" => assert_mntd_threshold(cfg, &records, &mut asserter),
            "mntd_hparam_sweep" => assert_mntd_sweep(cfg, &records, &mut asserter),
            _ => unreachable!("validated scenario id"),
        }
    }
    agg.metrics.extend(asserter.rows);
    let failures = asserter.failures;

    let mut all = records.clone();
    all.push(agg.clone());
    emit_report(&all, ReportFormat::Csv, &run_dir)?;
    emit_report(&all, ReportFormat::Json, &run_dir)?;
    std::fs::write(
        run_dir.join("records.json"),
        serde_json::to_string_pretty(&all).expect("records serialize"),
    )?;
    for kind in scenario_plots(&cfg.scenario) {
        // plots are best-effort views over whatever metrics exist
        let _ = emit_plot(&records, kind, &run_dir);
    }

    let passed = failures.is_empty();
    Ok(ScenarioOutcome { records, aggregate: agg, failures, run_dir, passed })
}

fn scenario_plots(id: &str) -> Vec<PlotKind> {
    match id {
        "nc_binary" | "nc_depth" => vec![PlotKind::AiBars],
        "abs_poison_sweep" | "abs_weight_perturb" => vec![PlotKind::ReasrBars],
        "mntd_threshold" => vec![PlotKind::ScoreDist],
        "mntd_hparam_sweep" => vec![PlotKind::AucCurve, PlotKind::ScoreDist],
        _ => vec![],
    }
}

fn fresh_run_dir(out_root: &Path, scenario: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_root)?;
    let millis = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    for attempt in 0..1000u128 {
        let dir = out_root.join(format!("{scenario}-{}", millis + attempt));
        if !dir.exists() {
            std::fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
    }
    Err(Error::Io(std::io::Error::other("could not allocate a fresh run directory")))
}

fn spec_for(
    name: &str,
    width: Option<usize>,
    data: &Dataset,
) -> Result<ModelSpec> {
    let (c, h, w) = data.image_dims();
    ModelSpec::zoo(name, [c, h, w], data.num_classes, width)
}

fn dataset_rows(fallback: bool) -> Vec<MetricRow> {
    vec![MetricRow::new("dataset", "synthetic_fallback", if fallback { 1.0 } else { 0.0 })
        .with_verdict(if fallback { "fallback_synthetic" } else { "as_configured" })]
}

fn new_record(scenario: &str, seed: u64) -> RunRecord {
    RunRecord {
        scenario: scenario.into(),
        seed: seed.to_string(),
        config_hash: String::new(),
        metrics: Vec::new(),
        wall_clock_s: 0.0,
        artifacts: Vec::new(),
    }
}

// ── nc_binary ────────────────────────────────────────────────────────

fn run_nc_binary(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.nc_binary.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let spec = spec_for(&params.model, params.model_width, &train_set)?;
    let (clean, _) = train(&spec, &train_set, &params.train.to_config(scenario_seed(seed, 1)))?;
    rec.metrics.push(MetricRow::new("train", "cda_clean", evaluate_cda(&clean, &test_set)?));

    let poisoned = poison_dataset(
        &train_set,
        &PoisonConfig {
            trigger: params.trigger.clone(),
            poison_rate: params.poison_rate as f32,
            seed: scenario_seed(seed, 2),
        },
    )?;
    let (backdoored, _) =
        train(&spec, &poisoned.dataset, &params.train.to_config(scenario_seed(seed, 1)))?;
    rec.metrics
        .push(MetricRow::new("train", "cda_backdoored", evaluate_cda(&backdoored, &test_set)?));
    let asr = evaluate_asr(&backdoored, &test_set, &params.trigger, true)?;
    rec.metrics.push(MetricRow::new("train", "asr", asr));

    let mut nc = params.nc.clone();
    nc.seed = scenario_seed(seed, 3);
    let report = neural_cleanse::scan(&backdoored, &test_set, &nc)?;
    rec.metrics.push(
        MetricRow::new("scan_nc", "anomaly_index", report.anomaly.anomaly_index)
            .with_verdict(report.anomaly.verdict.to_string()),
    );
    for t in &report.triggers {
        rec.metrics
            .push(MetricRow::new("scan_nc", &format!("norm_l{}", t.label), t.l1_norm));
    }

    checkpoint::save_model(&seed_dir.join("model_backdoored.bdlb"), &backdoored, None)?;
    neural_cleanse::save_triggers(&seed_dir.join("nc_triggers.bdlb"), &report)?;
    rec.artifacts.push(format!("seed_{seed}/model_backdoored.bdlb"));
    rec.artifacts.push(format!("seed_{seed}/nc_triggers.bdlb"));
    Ok(rec)
}

fn assert_nc_binary(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.nc_binary.clone().unwrap_or_default();
    let expected = 1.0 / neural_cleanse::MAD_CONSTANT;
    for rec in records {
        let ai = rec.get("scan_nc", "anomaly_index").unwrap_or(f64::NAN);
        let asr = rec.get("train", "asr").unwrap_or(0.0);
        a.check(
            &format!("seed{}_asr_floor", rec.seed),
            asr >= params.asr_floor,
            format!("ASR {asr} below {}", params.asr_floor),
        );
        a.check(
            &format!("seed{}_ai_binary_constant", rec.seed),
            (ai - expected).abs() <= params.ai_tolerance,
            format!("AI {ai} vs expected {expected}"),
        );
        let verdict = rec
            .metrics
            .iter()
            .find(|m| m.metric == "anomaly_index")
            .and_then(|m| m.verdict.clone())
            .unwrap_or_default();
        a.check(
            &format!("seed{}_verdict_benign", rec.seed),
            verdict == "benign",
            format!("verdict {verdict}"),
        );
    }
}

// ── nc_depth ─────────────────────────────────────────────────────────

fn run_nc_depth(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.nc_depth.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let poisoned = poison_dataset(
        &train_set,
        &PoisonConfig {
            trigger: params.trigger.clone(),
            poison_rate: params.poison_rate as f32,
            seed: scenario_seed(seed, 2),
        },
    )?;

    for rung in &params.ladder {
        let stage = format!("rung_{rung}");
        let spec = spec_for(rung, params.model_width, &train_set)?;
        let tc = params.train.to_config(scenario_seed(seed, 1));
        let (clean, _) = train(&spec, &train_set, &tc)?;
        let (backdoored, _) = train(&spec, &poisoned.dataset, &tc)?;
        rec.metrics.push(MetricRow::new(&stage, "cda_clean", evaluate_cda(&clean, &test_set)?));
        rec.metrics
            .push(MetricRow::new(&stage, "cda_backdoored", evaluate_cda(&backdoored, &test_set)?));
        let asr = evaluate_asr(&backdoored, &test_set, &params.trigger, true)?;
        rec.metrics.push(MetricRow::new(&stage, "asr", asr));

        let mut nc = params.nc.clone();
        nc.seed = scenario_seed(seed, 3);
        let clean_scan = neural_cleanse::scan(&clean, &test_set, &nc)?;
        let bd_scan = neural_cleanse::scan(&backdoored, &test_set, &nc)?;
        let ai_clean = clean_scan.anomaly.anomaly_index;
        let ai_bd = bd_scan.anomaly.anomaly_index;
        rec.metrics.push(
            MetricRow::new(&stage, "ai_clean", ai_clean)
                .with_verdict(clean_scan.anomaly.verdict.to_string()),
        );
        rec.metrics.push(
            MetricRow::new(&stage, "ai_backdoored", ai_bd)
                .with_verdict(bd_scan.anomaly.verdict.to_string()),
        );
        rec.metrics.push(MetricRow::new(&stage, "ai_gap", ai_bd - ai_clean));
        let flagged = bd_scan.anomaly.flagged.map(|l| l as f64).unwrap_or(-1.0);
        rec.metrics.push(MetricRow::new(&stage, "flagged_label", flagged));

        neural_cleanse::save_triggers(
            &seed_dir.join(format!("nc_triggers_{rung}.bdlb")),
            &bd_scan,
        )?;
        rec.artifacts.push(format!("seed_{seed}/nc_triggers_{rung}.bdlb"));
    }
    Ok(rec)
}

fn assert_nc_depth(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.nc_depth.clone().unwrap_or_default();
    let target = params.trigger.target as f64;

    for rec in records {
        for rung in &params.ladder {
            let stage = format!("rung_{rung}");
            let asr = rec.get(&stage, "asr").unwrap_or(0.0);
            a.check(
                &format!("seed{}_{rung}_asr_floor", rec.seed),
                asr >= params.asr_floor,
                format!("ASR {asr} below {}", params.asr_floor),
            );
        }
    }

    // shallow rung: backdoored flagged with the right label, clean passes
    let shallow = format!("rung_{}", params.ladder[0]);
    let mut flagged_ok = 0usize;
    let mut clean_ok = 0usize;
    for rec in records {
        let ai_bd = rec.get(&shallow, "ai_backdoored").unwrap_or(0.0);
        let flagged = rec.get(&shallow, "flagged_label").unwrap_or(-1.0);
        if ai_bd > neural_cleanse::AI_THRESHOLD && flagged == target {
            flagged_ok += 1;
        }
        if rec.get(&shallow, "ai_clean").unwrap_or(f64::INFINITY)
            < neural_cleanse::AI_THRESHOLD
        {
            clean_ok += 1;
        }
    }
    a.check(
        "shallow_backdoor_flagged_majority",
        flagged_ok >= params.shallow_majority,
        format!("{flagged_ok} of {} seeds flagged correctly", records.len()),
    );
    a.check(
        "shallow_clean_benign_majority",
        clean_ok >= params.shallow_majority,
        format!("{clean_ok} of {} seeds kept the clean model benign", records.len()),
    );

    // depth trend: mean AI gap non-increasing along the ladder
    let gaps: Vec<f64> = params
        .ladder
        .iter()
        .map(|rung| {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.get(&format!("rung_{rung}"), "ai_gap"))
                .filter(|v| v.is_finite())
                .collect();
            report::mean_std(&vals).0
        })
        .collect();
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0]);
    a.check(
        "ai_gap_non_increasing_with_depth",
        monotone,
        format!("mean gaps along ladder: {gaps:?}"),
    );
}

// ── abs_poison_sweep ─────────────────────────────────────────────────

fn rate_stage(rate: f64) -> String {
    format!("rate_{}", report::fmt_value(rate))
}

fn run_abs_sweep(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.abs_poison_sweep.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let spec = spec_for(&params.model, params.model_width, &train_set)?;
    for &rate in &params.rates {
        let stage = rate_stage(rate);
        let tc = params.train.to_config(scenario_seed(seed, 1));
        let model = if rate > 0.0 {
            let poisoned = poison_dataset(
                &train_set,
                &PoisonConfig {
                    trigger: params.trigger.clone(),
                    poison_rate: rate as f32,
                    seed: scenario_seed(seed, 2),
                },
            )?;
            let (m, _) = train(&spec, &poisoned.dataset, &tc)?;
            let asr = evaluate_asr(&m, &test_set, &params.trigger, true)?;
            rec.metrics.push(MetricRow::new(&stage, "asr", asr));
            m
        } else {
            let (m, _) = train(&spec, &train_set, &tc)?;
            m
        };
        rec.metrics.push(MetricRow::new(&stage, "cda", evaluate_cda(&model, &test_set)?));

        let mut abs_cfg = params.abs.clone();
        abs_cfg.seed = scenario_seed(seed, 3);
        let report = abs_scan::scan(&model, &test_set, &abs_cfg)?;
        rec.metrics.push(
            MetricRow::new(&stage, "max_reasr", report.max_reasr)
                .with_verdict(report.verdict.to_string()),
        );
        save_abs_triggers(&seed_dir.join(format!("abs_triggers_{stage}.bdlb")), &report)?;
        rec.artifacts.push(format!("seed_{seed}/abs_triggers_{stage}.bdlb"));
    }
    Ok(rec)
}

fn assert_abs_sweep(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.abs_poison_sweep.clone().unwrap_or_default();
    for rec in records {
        for &rate in params.rates.iter().filter(|&&r| r > 0.0) {
            let stage = rate_stage(rate);
            let asr = rec.get(&stage, "asr").unwrap_or(0.0);
            a.check(
                &format!("seed{}_{stage}_asr_floor", rec.seed),
                asr >= params.asr_floor,
                format!("ASR {asr} below {}", params.asr_floor),
            );
        }
    }
    let means: Vec<f64> = params
        .rates
        .iter()
        .map(|&rate| {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.get(&rate_stage(rate), "max_reasr"))
                .collect();
            report::mean_std(&vals).0
        })
        .collect();
    a.check(
        "reasr_non_increasing_with_rate",
        means.windows(2).all(|w| w[1] <= w[0]),
        format!("mean max-REASR along rates {:?}: {means:?}", params.rates),
    );
    let threshold = params.abs.reasr_threshold;
    a.check(
        "only_highest_rate_detected",
        means[0] > threshold && means[1..].iter().all(|&m| m <= threshold),
        format!("means {means:?} vs threshold {threshold}"),
    );
    let low = means[params.rates.len() - 2];
    let clean = means[params.rates.len() - 1];
    a.check(
        "low_rate_indistinguishable_from_clean",
        (low - clean).abs() <= params.indist_tolerance,
        format!("|{low} - {clean}| > {}", params.indist_tolerance),
    );
}

fn save_abs_triggers(path: &Path, report: &abs_scan::AbsReport) -> Result<()> {
    #[derive(Serialize)]
    struct AbsMeta {
        max_reasr: f64,
        verdict: Verdict,
        candidates: Vec<(usize, usize, usize, f64)>,
        reasrs: Vec<f64>,
    }
    let meta = AbsMeta {
        max_reasr: report.max_reasr,
        verdict: report.verdict,
        candidates: report
            .candidates
            .iter()
            .map(|c| (c.neuron.layer_idx, c.neuron.unit, c.label, c.elevation))
            .collect(),
        reasrs: report.triggers.iter().map(|t| t.reasr).collect(),
    };
    let mut tensors = Vec::new();
    for (i, t) in report.triggers.iter().enumerate() {
        tensors.push((format!("mask_{i}"), t.trigger.mask.clone()));
        tensors.push((format!("pattern_{i}"), t.trigger.pattern.clone()));
    }
    checkpoint::Container {
        kind: "triggers".into(),
        meta: serde_json::to_string(&meta).expect("abs meta serializes"),
        tensors,
    }
    .save(path)
}

// ── abs_weight_perturb ───────────────────────────────────────────────

fn run_abs_perturb(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.abs_weight_perturb.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let spec = spec_for(&params.model, params.model_width, &train_set)?;
    let (clean, _) = train(&spec, &train_set, &params.train.to_config(scenario_seed(seed, 1)))?;
    rec.metrics.push(MetricRow::new("attack", "cda_clean", evaluate_cda(&clean, &test_set)?));

    let perturb = PerturbConfig {
        epsilon: params.epsilon,
        finetune: params.finetune.to_config(scenario_seed(seed, 4)),
        poison: PoisonConfig {
            trigger: params.trigger.clone(),
            poison_rate: params.poison_rate as f32,
            seed: scenario_seed(seed, 2),
        },
        asr_floor: params.asr_floor,
    };
    let outcome = pgd_weight_finetune(&clean, &train_set, &test_set, &perturb)?;
    rec.metrics.push(MetricRow::new("attack", "max_delta", outcome.max_delta as f64));
    rec.metrics.push(MetricRow::new("attack", "asr", outcome.asr));
    rec.metrics.push(MetricRow::new(
        "attack",
        "cda_backdoored",
        evaluate_cda(&outcome.model, &test_set)?,
    ));

    let mut abs_cfg = params.abs.clone();
    abs_cfg.seed = scenario_seed(seed, 3);
    let clean_report = abs_scan::scan(&clean, &test_set, &abs_cfg)?;
    let bd_report = abs_scan::scan(&outcome.model, &test_set, &abs_cfg)?;
    rec.metrics.push(
        MetricRow::new("scan_abs", "reasr_clean", clean_report.max_reasr)
            .with_verdict(clean_report.verdict.to_string()),
    );
    rec.metrics.push(
        MetricRow::new("scan_abs", "reasr_backdoored", bd_report.max_reasr)
            .with_verdict(bd_report.verdict.to_string()),
    );

    checkpoint::save_model(&seed_dir.join("model_perturbed.bdlb"), &outcome.model, None)?;
    rec.artifacts.push(format!("seed_{seed}/model_perturbed.bdlb"));
    Ok(rec)
}

fn assert_abs_perturb(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.abs_weight_perturb.clone().unwrap_or_default();
    for rec in records {
        let max_delta = rec.get("attack", "max_delta").unwrap_or(f64::INFINITY);
        a.check(
            &format!("seed{}_linf_bound_exact", rec.seed),
            max_delta <= params.epsilon as f64,
            format!("max |delta| {max_delta} exceeds {}", params.epsilon),
        );
        let asr = rec.get("attack", "asr").unwrap_or(0.0);
        a.check(
            &format!("seed{}_asr_floor", rec.seed),
            asr >= params.asr_floor,
            format!("ASR {asr} below {}", params.asr_floor),
        );
        let rc = rec.get("scan_abs", "reasr_clean").unwrap_or(f64::NAN);
        let rb = rec.get("scan_abs", "reasr_backdoored").unwrap_or(f64::NAN);
        a.check(
            &format!("seed{}_reasr_indistinguishable", rec.seed),
            (rb - rc).abs() <= params.reasr_tolerance,
            format!("|{rb} - {rc}| > {}", params.reasr_tolerance),
        );
        let verdict = rec
            .metrics
            .iter()
            .find(|m| m.metric == "reasr_backdoored")
            .and_then(|m| m.verdict.clone())
            .unwrap_or_default();
        a.check(
            &format!("seed{}_verdict_benign", rec.seed),
            verdict == "benign",
            format!("perturbed model verdict {verdict}"),
        );
    }
}

// ── mntd scenarios ───────────────────────────────────────────────────

struct MetaSetup {
    meta: mntd::MetaClassifier,
    train_records: Vec<ShadowModelRecord>,
}

#[allow(clippy::too_many_arguments)]
fn build_meta(
    shadow_model: &str,
    width: Option<usize>,
    n_benign: usize,
    n_backdoor: usize,
    train_shadow: &FitParams,
    meta_cfg: &MetaConfig,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<MetaSetup> {
    let spec = spec_for(shadow_model, width, train_set)?;
    let farm = ShadowConfig {
        n_benign,
        n_backdoor,
        spec,
        base_train: train_shadow.to_config(scenario_seed(seed, 10)),
        jumbo_seed: scenario_seed(seed, 11),
    };
    let set = mntd::generate_shadow_set(&farm, train_set, test_set)?;
    let mut meta_cfg = meta_cfg.clone();
    meta_cfg.seed = scenario_seed(seed, 12);
    let meta = mntd::train_meta(&set.records, &meta_cfg)?;
    let mut records = set.records;
    score_records(&meta, &mut records)?;
    Ok(MetaSetup { meta, train_records: records })
}

/// Build a test population whose benign and backdoored halves may use
/// different epoch budgets; model seeds are paired across calls.
#[allow(clippy::too_many_arguments)]
fn build_test_population(
    shadow_model: &str,
    width: Option<usize>,
    n_benign: usize,
    n_backdoor: usize,
    benign_fit: &FitParams,
    backdoor_fit: &FitParams,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<ShadowModelRecord>> {
    let spec = spec_for(shadow_model, width, train_set)?;
    let mut results = mntd::train_shadow_members(
        ShadowClass::Benign,
        n_benign,
        &spec,
        &benign_fit.to_config(scenario_seed(seed, 20)),
        scenario_seed(seed, 21),
        0,
        train_set,
        test_set,
    );
    results.extend(mntd::train_shadow_members(
        ShadowClass::Backdoored,
        n_backdoor,
        &spec,
        &backdoor_fit.to_config(scenario_seed(seed, 20)),
        scenario_seed(seed, 21),
        n_benign,
        train_set,
        test_set,
    ));
    let mut records = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err((id, e)) => {
                return Err(Error::Training {
                    epoch: 0,
                    message: format!("test shadow {id}: {e}"),
                })
            }
        }
    }
    Ok(records)
}

fn score_rows(stage: &str, records: &[ShadowModelRecord]) -> Vec<MetricRow> {
    records
        .iter()
        .map(|r| {
            MetricRow::new(stage, &format!("m{}", r.id), r.score.unwrap_or(f64::NAN))
                .with_verdict(match r.class {
                    ShadowClass::Benign => "benign",
                    ShadowClass::Backdoored => "backdoored",
                })
        })
        .collect()
}

fn class_scores(records: &[ShadowModelRecord]) -> (Vec<f64>, Vec<f64>) {
    let benign = records
        .iter()
        .filter(|r| r.class == ShadowClass::Benign)
        .filter_map(|r| r.score)
        .collect();
    let backdoored = records
        .iter()
        .filter(|r| r.class == ShadowClass::Backdoored)
        .filter_map(|r| r.score)
        .collect();
    (benign, backdoored)
}

/// Interquartile range via nearest-rank quartiles.
fn iqr(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    let q1 = sorted[((n - 1) as f64 * 0.25).round() as usize];
    let q3 = sorted[((n - 1) as f64 * 0.75).round() as usize];
    q3 - q1
}

fn save_meta(path: &Path, meta: &mntd::MetaClassifier) -> Result<()> {
    #[derive(Serialize)]
    struct MetaMeta {
        input_shape: [usize; 3],
        num_classes: usize,
        k: usize,
    }
    checkpoint::Container {
        kind: "meta".into(),
        meta: serde_json::to_string(&MetaMeta {
            input_shape: meta.input_shape,
            num_classes: meta.num_classes,
            k: meta.k,
        })
        .expect("meta meta serializes"),
        tensors: vec![
            ("queries".into(), meta.queries.clone()),
            ("w1".into(), meta.w1.clone()),
            ("b1".into(), meta.b1.clone()),
            ("w2".into(), meta.w2.clone()),
            ("b2".into(), meta.b2.clone()),
        ],
    }
    .save(path)
}

fn score_table_csv(records: &[ShadowModelRecord], threshold: f64) -> String {
    let mut out = String::from("model_id,label,score,verdict\n");
    for r in records {
        let label = match r.class {
            ShadowClass::Benign => "benign",
            ShadowClass::Backdoored => "backdoored",
        };
        let score = r.score.unwrap_or(f64::NAN);
        let verdict = if score > threshold { "backdoored" } else { "benign" };
        out.push_str(&format!("{},{label},{},{verdict}\n", r.id, report::fmt_value(score)));
    }
    out
}

fn run_mntd_threshold(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.mntd_threshold.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let setup = build_meta(
        &params.shadow_model,
        params.model_width,
        params.n_train_benign,
        params.n_train_backdoor,
        &params.train_shadow,
        &params.meta,
        seed,
        &train_set,
        &test_set,
    )?;
    let bd_asr: Vec<f64> =
        setup.train_records.iter().filter_map(|r| r.asr).collect();
    rec.metrics.push(MetricRow::new("farm", "train_pop_asr_mean", report::mean_std(&bd_asr).0));
    let cda: Vec<f64> = setup.train_records.iter().map(|r| r.cda).collect();
    rec.metrics.push(MetricRow::new("farm", "train_pop_cda_mean", report::mean_std(&cda).0));

    let train_median = choose_threshold(&setup.train_records, ThresholdPolicy::TrainMedian)?;
    let train_scores: Vec<f64> =
        setup.train_records.iter().filter_map(|r| r.score).collect();
    let train_iqr = iqr(&train_scores);
    rec.metrics.push(MetricRow::new("meta", "train_median", train_median));
    rec.metrics.push(MetricRow::new("meta", "train_iqr", train_iqr));

    // matched-hyperparameter test population
    let mut matched = build_test_population(
        &params.shadow_model,
        params.model_width,
        params.n_test_benign,
        params.n_test_backdoor,
        &params.train_shadow,
        &params.train_shadow,
        scenario_seed(seed, 30),
        &train_set,
        &test_set,
    )?;
    score_records(&setup.meta, &mut matched)?;
    let (benign_m, backdoor_m) = class_scores(&matched);
    let auc_matched = compute_auc(&benign_m, &backdoor_m)?;
    rec.metrics.push(MetricRow::new("meta", "auc_matched", auc_matched));

    // hyperparameter-shifted test population
    let mut shifted = build_test_population(
        &params.shadow_model,
        params.model_width,
        params.n_test_benign,
        params.n_test_backdoor,
        &params.test_shadow,
        &params.test_shadow,
        scenario_seed(seed, 31),
        &train_set,
        &test_set,
    )?;
    score_records(&setup.meta, &mut shifted)?;
    let (benign_s, backdoor_s) = class_scores(&shifted);
    rec.metrics.push(MetricRow::new("meta", "auc_shifted", compute_auc(&benign_s, &backdoor_s)?));
    let test_median = choose_threshold(&shifted, ThresholdPolicy::TestMedian)?;
    rec.metrics.push(MetricRow::new("meta", "test_median", test_median));
    rec.metrics.push(MetricRow::new("meta", "median_gap_abs", (train_median - test_median).abs()));

    let eval_train_policy =
        mntd::evaluate_population(&shifted, train_median, ThresholdPolicy::TrainMedian)?;
    rec.metrics.push(MetricRow::new(
        "meta",
        "accuracy_shifted_train_median",
        eval_train_policy.accuracy,
    ));
    let eval_test_policy =
        mntd::evaluate_population(&shifted, test_median, ThresholdPolicy::TestMedian)?;
    rec.metrics.push(MetricRow::new(
        "meta",
        "accuracy_shifted_test_median",
        eval_test_policy.accuracy,
    ));

    rec.metrics.extend(score_rows("scores_train", &setup.train_records));
    rec.metrics.extend(score_rows("scores_matched", &matched));
    rec.metrics.extend(score_rows("scores_shifted", &shifted));

    save_meta(&seed_dir.join("meta.bdlb"), &setup.meta)?;
    std::fs::write(
        seed_dir.join("score_table_shifted.csv"),
        score_table_csv(&shifted, train_median),
    )?;
    rec.artifacts.push(format!("seed_{seed}/meta.bdlb"));
    rec.artifacts.push(format!("seed_{seed}/score_table_shifted.csv"));
    Ok(rec)
}

fn assert_mntd_threshold(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.mntd_threshold.clone().unwrap_or_default();
    let mean_of = |stage: &str, metric: &str| {
        let vals: Vec<f64> =
            records.iter().filter_map(|r| r.get(stage, metric)).collect();
        report::mean_std(&vals).0
    };
    let auc_matched = mean_of("meta", "auc_matched");
    a.check(
        "matched_auc_floor",
        auc_matched >= params.auc_floor,
        format!("matched AUC {auc_matched} below {}", params.auc_floor),
    );
    let acc = mean_of("meta", "accuracy_shifted_train_median");
    a.check(
        "shifted_accuracy_near_guessing",
        acc >= params.accuracy_band[0] && acc <= params.accuracy_band[1],
        format!("accuracy {acc} outside {:?}", params.accuracy_band),
    );
    let gap = mean_of("meta", "median_gap_abs");
    let train_iqr = mean_of("meta", "train_iqr");
    a.check(
        "median_gap_exceeds_iqr",
        gap > params.iqr_factor * train_iqr,
        format!("|median gap| {gap} vs {} x IQR {train_iqr}", params.iqr_factor),
    );
}

fn run_mntd_sweep(cfg: &ScenarioConfig, seed: u64, seed_dir: &Path) -> Result<RunRecord> {
    let params = cfg.mntd_hparam_sweep.clone().unwrap_or_default();
    let (train_set, test_set, fallback) = build_dataset(&cfg.dataset, seed)?;
    let mut rec = new_record(&cfg.scenario, seed);
    rec.metrics.extend(dataset_rows(fallback));

    let setup = build_meta(
        &params.shadow_model,
        params.model_width,
        params.n_train_benign,
        params.n_train_backdoor,
        &params.train_shadow,
        &params.meta,
        seed,
        &train_set,
        &test_set,
    )?;

    for &epochs in &params.epochs_sweep {
        let benign_fit = FitParams { epochs, ..params.test_shadow.clone() };
        let mut pop = build_test_population(
            &params.shadow_model,
            params.model_width,
            params.n_test_benign,
            params.n_test_backdoor,
            &benign_fit,
            &params.test_shadow,
            scenario_seed(seed, 40),
            &train_set,
            &test_set,
        )?;
        score_records(&setup.meta, &mut pop)?;
        let (benign, backdoored) = class_scores(&pop);
        rec.metrics.push(MetricRow::new(
            "sweep",
            &format!("auc_e{epochs}"),
            compute_auc(&benign, &backdoored)?,
        ));
    }

    // both classes trained to convergence under equal hyperparameters
    let conv_fit = FitParams { epochs: params.converged_epochs, ..params.test_shadow.clone() };
    let mut conv = build_test_population(
        &params.shadow_model,
        params.model_width,
        params.n_test_benign,
        params.n_test_backdoor,
        &conv_fit,
        &conv_fit,
        scenario_seed(seed, 41),
        &train_set,
        &test_set,
    )?;
    score_records(&setup.meta, &mut conv)?;
    let (benign_c, backdoor_c) = class_scores(&conv);
    rec.metrics.push(MetricRow::new(
        "converged",
        "auc_converged",
        compute_auc(&benign_c, &backdoor_c)?,
    ));
    rec.metrics.extend(score_rows("scores_converged", &conv));

    // extend only the benign side further
    let extended_fit =
        FitParams { epochs: params.converged_benign_epochs, ..params.test_shadow.clone() };
    let mut ext = build_test_population(
        &params.shadow_model,
        params.model_width,
        params.n_test_benign,
        params.n_test_backdoor,
        &extended_fit,
        &conv_fit,
        scenario_seed(seed, 41),
        &train_set,
        &test_set,
    )?;
    score_records(&setup.meta, &mut ext)?;
    let (benign_e, backdoor_e) = class_scores(&ext);
    rec.metrics.push(MetricRow::new(
        "converged",
        "auc_converged_extended",
        compute_auc(&benign_e, &backdoor_e)?,
    ));

    save_meta(&seed_dir.join("meta.bdlb"), &setup.meta)?;
    rec.artifacts.push(format!("seed_{seed}/meta.bdlb"));
    Ok(rec)
}

fn assert_mntd_sweep(cfg: &ScenarioConfig, records: &[RunRecord], a: &mut Asserter) {
    let params = cfg.mntd_hparam_sweep.clone().unwrap_or_default();
    let mean_of = |stage: &str, metric: &str| {
        let vals: Vec<f64> =
            records.iter().filter_map(|r| r.get(stage, metric)).collect();
        report::mean_std(&vals).0
    };
    let aucs: Vec<f64> = params
        .epochs_sweep
        .iter()
        .map(|e| mean_of("sweep", &format!("auc_e{e}")))
        .collect();
    a.check(
        "auc_non_increasing_in_epochs",
        aucs.windows(2).all(|w| w[1] <= w[0]),
        format!("mean AUC along {:?}: {aucs:?}", params.epochs_sweep),
    );
    let first = aucs[0];
    let last = aucs[aucs.len() - 1];
    a.check(
        "auc_drop_at_max_epochs",
        last <= first - params.drop_at_max,
        format!("AUC {last} vs required <= {first} - {}", params.drop_at_max),
    );
    let conv = mean_of("converged", "auc_converged");
    a.check(
        "converged_auc_band",
        conv >= params.converged_band[0] && conv <= params.converged_band[1],
        format!("converged AUC {conv} outside {:?}", params.converged_band),
    );
    let ext = mean_of("converged", "auc_converged_extended");
    a.check(
        "extended_benign_training_lowers_auc",
        ext < conv,
        format!("extended AUC {ext} not below converged AUC {conv}"),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for id in SCENARIO_IDS {
            let cfg = preset(id).unwrap();
            assert_eq!(cfg.scenario, id);
            assert!(!cfg.seeds.is_empty());
        }
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = parse_config("scenario = \"nc_binary\"\nunknown_knob = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = preset("nc_binary").unwrap();
        let b = preset("nc_binary").unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = preset("nc_binary").unwrap();
        c.seeds = vec![9];
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn dataset_fallback_when_mnist_missing() {
        let cfg = DatasetConfig {
            source: DatasetSource::Mnist,
            mnist_dir: Some(PathBuf::from("/nonexistent/mnist")),
            n_train: 50,
            n_test: 20,
            ..Default::default()
        };
        let (train, test, fallback) = build_dataset(&cfg, 1).unwrap();
        assert!(fallback);
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
    }

    #[test]
    fn rate_stage_names_are_clean() {
        assert_eq!(rate_stage(0.5), "rate_0.5");
        assert_eq!(rate_stage(0.11), "rate_0.11");
        assert_eq!(rate_stage(0.015), "rate_0.015");
        assert_eq!(rate_stage(0.0), "rate_0");
    }

    #[test]
    fn iqr_nearest_rank() {
        let v: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        assert_eq!(iqr(&v), 4.0); // q1=3, q3=7
    }
}
