//! Meta Neural Trojan Detection: shadow-model population generation,
//! query-tuned meta-classifier training, scoring, threshold policies, and
//! AUC/accuracy evaluation.
//!
//! The meta-classifier holds `k` trainable query images; a target model's
//! feature vector is the concatenation of its pre-softmax logits on those
//! queries. Queries and classifier weights are optimized jointly, with
//! gradients flowing through each shadow model's forward pass.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{poison_dataset, sample_jumbo, JumboSetting, PoisonConfig};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nets::{evaluate_asr, evaluate_cda, train, Adam, Model, ModelSpec, TrainConfig};
use crate::neural_cleanse::median;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Verdict;

/// Ground-truth class of a shadow model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowClass {
    Benign,
    Backdoored,
}

/// One member of a shadow population.
#[derive(Debug, Clone)]
pub struct ShadowModelRecord {
    pub id: usize,
    pub class: ShadowClass,
    /// Present exactly when the model is backdoored.
    pub setting: Option<JumboSetting>,
    pub train_config: TrainConfig,
    pub cda: f64,
    /// ASR on the model's own trigger; absent for benign members.
    pub asr: Option<f64>,
    pub score: Option<f64>,
    pub model: Model,
}

/// Farm output: the population plus any tolerated per-model failures.
#[derive(Debug)]
pub struct ShadowSet {
    pub records: Vec<ShadowModelRecord>,
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone)]
pub struct ShadowConfig {
    pub n_benign: usize,
    pub n_backdoor: usize,
    pub spec: ModelSpec,
    /// Per-model configs derive their seed from this one plus the model id.
    pub base_train: TrainConfig,
    /// Seed stream for jumbo attack settings.
    pub jumbo_seed: u64,
}

/// Train `n` shadow models of one class in parallel. Ids run from
/// `id_offset`; each model derives its seed (and, for backdoored members,
/// its jumbo setting) from its id.
pub fn train_shadow_members(
    class: ShadowClass,
    n: usize,
    spec: &ModelSpec,
    base_train: &TrainConfig,
    jumbo_seed: u64,
    id_offset: usize,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Vec<std::result::Result<ShadowModelRecord, (usize, String)>> {
    let (_, h, w) = train_data.image_dims();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = id_offset + i;
            let mut train_config = base_train.clone();
            train_config.seed = base_train.seed.wrapping_add(id as u64);
            let build = || -> Result<ShadowModelRecord> {
                match class {
                    ShadowClass::Backdoored => {
                        let setting = sample_jumbo(
                            jumbo_seed.wrapping_add(id as u64),
                            (h, w),
                            train_data.num_classes,
                        );
                        let poisoned = poison_dataset(
                            train_data,
                            &PoisonConfig {
                                trigger: setting.trigger.clone(),
                                poison_rate: setting.poison_rate,
                                seed: setting.seed,
                            },
                        )?;
                        let (model, _) = train(spec, &poisoned.dataset, &train_config)?;
                        let cda = evaluate_cda(&model, test_data)?;
                        let asr = evaluate_asr(&model, test_data, &setting.trigger, true)?;
                        Ok(ShadowModelRecord {
                            id,
                            class,
                            setting: Some(setting),
                            train_config,
                            cda,
                            asr: Some(asr),
                            score: None,
                            model,
                        })
                    }
                    ShadowClass::Benign => {
                        let (model, _) = train(spec, train_data, &train_config)?;
                        let cda = evaluate_cda(&model, test_data)?;
                        Ok(ShadowModelRecord {
                            id,
                            class,
                            setting: None,
                            train_config,
                            cda,
                            asr: None,
                            score: None,
                            model,
                        })
                    }
                }
            };
            build().map_err(|e| (id, e.to_string()))
        })
        .collect()
}

/// Train a shadow population: benign members differ only by seed; each
/// backdoored member poisons its data with a fresh jumbo setting. Individual
/// failures are tolerated up to 10% of the population.
pub fn generate_shadow_set(
    cfg: &ShadowConfig,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<ShadowSet> {
    if cfg.n_benign == 0 || cfg.n_backdoor == 0 {
        return Err(Error::Contract("shadow population needs both classes".into()));
    }
    let total = cfg.n_benign + cfg.n_backdoor;
    let mut results = train_shadow_members(
        ShadowClass::Benign,
        cfg.n_benign,
        &cfg.spec,
        &cfg.base_train,
        cfg.jumbo_seed,
        0,
        train_data,
        test_data,
    );
    results.extend(train_shadow_members(
        ShadowClass::Backdoored,
        cfg.n_backdoor,
        &cfg.spec,
        &cfg.base_train,
        cfg.jumbo_seed,
        cfg.n_benign,
        train_data,
        test_data,
    ));

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    if records.len() * 10 < total * 9 {
        return Err(Error::Training {
            epoch: 0,
            message: format!(
                "shadow farm lost {} of {total} members: {:?}",
                failures.len(),
                failures
            ),
        });
    }
    Ok(ShadowSet { records, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Number of trainable query inputs.
    pub k: usize,
    /// Hidden width of the classifier over the concatenated logits.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_models: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            k: 10,
            hidden: 20,
            epochs: 40,
            batch_models: 16,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Query set plus the small dense classifier over concatenated logits.
#[derive(Debug, Clone)]
pub struct MetaClassifier {
    pub queries: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub k: usize,
    pub training_loss: Vec<f64>,
    pub frozen: bool,
}

impl MetaClassifier {
    fn feature_len(&self) -> usize {
        self.k * self.num_classes
    }
}

/// Jointly optimize query tensors and classifier weights with binary
/// cross-entropy over the shadow population. Deterministic per seed.
pub fn train_meta(records: &[ShadowModelRecord], cfg: &MetaConfig) -> Result<MetaClassifier> {
    let benign = records.iter().filter(|r| r.class == ShadowClass::Benign).count();
    if benign == 0 || benign == records.len() {
        return Err(Error::Contract(
            "meta training needs both benign and backdoored shadow models".into(),
        ));
    }
    let spec = &records[0].model.spec;
    let [c, h, w] = spec.input_shape;
    let d = c * h * w;
    let classes = spec.num_classes;
    let feat_len = cfg.k * classes;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x6d65_7461));
    let mut queries = Tensor::rand_uniform(vec![cfg.k, d], 0.0, 1.0, &mut rng);
    let bound1 = (6.0 / feat_len as f32).sqrt();
    let mut w1 = Tensor::rand_uniform(vec![feat_len, cfg.hidden], -bound1, bound1, &mut rng);
    let mut b1 = Tensor::zeros(vec![cfg.hidden]);
    let bound2 = (6.0 / cfg.hidden as f32).sqrt();
    let mut w2 = Tensor::rand_uniform(vec![cfg.hidden, 1], -bound2, bound2, &mut rng);
    let mut b2 = Tensor::zeros(vec![1]);

    let sizes = [cfg.k * d, feat_len * cfg.hidden, cfg.hidden, cfg.hidden, 1];
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut training_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_models) {
            let mut tape = Tape::new();
            let q = tape.leaf(queries.clone().with_grad());
            let w1id = tape.leaf(w1.clone().with_grad());
            let b1id = tape.leaf(b1.clone().with_grad());
            let w2id = tape.leaf(w2.clone().with_grad());
            let b2id = tape.leaf(b2.clone().with_grad());

            let x = tape.reshape(q, vec![cfg.k, c, h, w])?;
            let mut parts = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &ri in chunk {
                let rec = &records[ri];
                let params = rec.model.param_leaves(&mut tape, false);
                let trace = rec.model.forward(&mut tape, x, &params)?;
                let feat = tape.reshape(trace.logits, vec![1, feat_len])?;
                let h1 = tape.matmul(feat, w1id)?;
                let h1 = tape.add_row(h1, b1id)?;
                let h1 = tape.relu(h1);
                let z = tape.matmul(h1, w2id)?;
                let z = tape.add_row(z, b2id)?;
                parts.push(z);
                targets.push(if rec.class == ShadowClass::Backdoored { 1.0 } else { 0.0 });
            }
            let stacked = tape.stack(&parts)?;
            let loss = tape.bce_with_logits(stacked, &targets)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * chunk.len() as f64;

            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = [q, w1id, b1id, w2id, b2id]
                .iter()
                .map(|&id| tape.grad(id).expect("meta leaf").to_vec())
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(
                &mut [&mut queries, &mut w1, &mut b1, &mut w2, &mut b2],
                &grad_refs,
            );
            // queries are images: clamp back into the valid pixel range
            queries.clamp_in_place(0.0, 1.0);
        }
        training_loss.push(epoch_loss / records.len() as f64);
    }

    Ok(MetaClassifier {
        queries,
        w1,
        b1,
        w2,
        b2,
        input_shape: spec.input_shape,
        num_classes: classes,
        k: cfg.k,
        training_loss,
        frozen: true,
    })
}

/// Suspicion score of one model: the raw classifier logit over the model's
/// query responses. Pure in `(meta, model)`.
pub fn score(meta: &MetaClassifier, model: &Model) -> Result<f64> {
    if model.spec.input_shape != meta.input_shape || model.spec.num_classes != meta.num_classes {
        return Err(Error::Contract(format!(
            "model shape {:?}/{} does not match meta queries {:?}/{}",
            model.spec.input_shape, model.spec.num_classes, meta.input_shape, meta.num_classes
        )));
    }
    let [c, h, w] = meta.input_shape;
    let mut tape = Tape::new();
    let q = tape.leaf(meta.queries.clone());
    let x = tape.reshape(q, vec![meta.k, c, h, w])?;
    let params = model.param_leaves(&mut tape, false);
    let trace = model.forward(&mut tape, x, &params)?;
    let feat = tape.reshape(trace.logits, vec![1, meta.feature_len()])?;
    let w1 = tape.leaf(meta.w1.clone());
    let b1 = tape.leaf(meta.b1.clone());
    let w2 = tape.leaf(meta.w2.clone());
    let b2 = tape.leaf(meta.b2.clone());
    let h1 = tape.matmul(feat, w1)?;
    let h1 = tape.add_row(h1, b1)?;
    let h1 = tape.relu(h1);
    let z = tape.matmul(h1, w2)?;
    let z = tape.add_row(z, b2)?;
    Ok(tape.value(z).data()[0] as f64)
}

/// Fill in the `score` field of every record.
pub fn score_records(meta: &MetaClassifier, records: &mut [ShadowModelRecord]) -> Result<()> {
    let scores: Vec<f64> = records
        .par_iter()
        .map(|r| score(meta, &r.model))
        .collect::<Result<_>>()?;
    for (r, s) in records.iter_mut().zip(scores) {
        r.score = Some(s);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum ThresholdPolicy {
    TrainMedian,
    TestMedian,
    Custom(f64),
}

/// Median score of the given records under the named policy. Even counts use
/// the mean-of-middle-two convention.
pub fn choose_threshold(records: &[ShadowModelRecord], policy: ThresholdPolicy) -> Result<f64> {
    if let ThresholdPolicy::Custom(v) = policy {
        return Ok(v);
    }
    if records.is_empty() {
        return Err(Error::Contract("threshold needs a nonempty scored population".into()));
    }
    let scores: Vec<f64> = records
        .iter()
        .map(|r| r.score.ok_or_else(|| Error::Contract(format!("record {} not scored", r.id))))
        .collect::<Result<_>>()?;
    Ok(median(&scores))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MntdVerdict {
    pub id: usize,
    pub ground_truth: ShadowClass,
    pub score: f64,
    pub threshold: f64,
    pub policy: ThresholdPolicy,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MntdEval {
    pub verdicts: Vec<MntdVerdict>,
    pub accuracy: f64,
    pub auc: f64,
    pub threshold: f64,
    pub policy: ThresholdPolicy,
}

/// Rank-statistic AUC: the probability that a random backdoored score
/// exceeds a random benign score, ties counting one half.
pub fn compute_auc(benign: &[f64], backdoored: &[f64]) -> Result<f64> {
    if benign.is_empty() || backdoored.is_empty() {
        return Err(Error::Contract("AUC needs both score samples nonempty".into()));
    }
    // average ranks over the pooled sample (Mann-Whitney U with ties)
    let mut pooled: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(backdoored.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n = pooled.len();
    let mut rank_sum_bd = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied values share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_bd += avg_rank;
            }
        }
        i = j + 1;
    }
    let nb = backdoored.len() as f64;
    let u = rank_sum_bd - nb * (nb + 1.0) / 2.0;
    Ok(u / (nb * benign.len() as f64))
}

/// Per-model verdicts against a threshold plus set-level accuracy and
/// threshold-free AUC.
pub fn evaluate_population(
    records: &[ShadowModelRecord],
    threshold: f64,
    policy: ThresholdPolicy,
) -> Result<MntdEval> {
    let mut verdicts = Vec::with_capacity(records.len());
    let mut correct = 0usize;
    let mut benign_scores = Vec::new();
    let mut backdoor_scores = Vec::new();
    for r in records {
        let s = r
            .score
            .ok_or_else(|| Error::Contract(format!("record {} not scored", r.id)))?;
        let verdict = if s > threshold { Verdict::Backdoored } else { Verdict::Benign };
        let matches = matches!(
            (verdict, r.class),
            (Verdict::Backdoored, ShadowClass::Backdoored) | (Verdict::Benign, ShadowClass::Benign)
        );
        if matches {
            correct += 1;
        }
        match r.class {
            ShadowClass::Benign => benign_scores.push(s),
            ShadowClass::Backdoored => backdoor_scores.push(s),
        }
        verdicts.push(MntdVerdict {
            id: r.id,
            ground_truth: r.class,
            score: s,
            threshold,
            policy,
            verdict,
        });
    }
    let auc = compute_auc(&benign_scores, &backdoor_scores)?;
    Ok(MntdEval {
        verdicts,
        accuracy: correct as f64 / records.len() as f64,
        auc,
        threshold,
        policy,
    })
}

/// Persist a shadow population as one checkpoint per model plus a manifest.
pub fn save_shadow_set(dir: &std::path::Path, records: &[ShadowModelRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct ManifestRow<'a> {
        id: usize,
        class: ShadowClass,
        setting: &'a Option<JumboSetting>,
        train_config: &'a TrainConfig,
        cda: f64,
        asr: Option<f64>,
        score: Option<f64>,
        checkpoint: String,
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        records: Vec<ManifestRow<'a>>,
    }
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for r in records {
        let file = format!("shadow_{:04}.bdlb", r.id);
        crate::checkpoint::save_model(&dir.join(&file), &r.model, None)?;
        rows.push(ManifestRow {
            id: r.id,
            class: r.class,
            setting: &r.setting,
            train_config: &r.train_config,
            cda: r.cda,
            asr: r.asr,
            score: r.score,
            checkpoint: file,
        });
    }
    let manifest = toml::to_string_pretty(&Manifest { records: rows })
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_split;
    use crate::nets::Optimizer;

    fn tiny_train_cfg(epochs: usize, proportion: f32, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            proportion,
            seed,
        }
    }

    #[test]
    fn auc_disjoint_samples() {
        let auc = compute_auc(&[0.1, 0.2, 0.3], &[0.9, 1.4]).unwrap();
        assert_eq!(auc, 1.0);
        let auc = compute_auc(&[5.0, 6.0], &[1.0]).unwrap();
        assert_eq!(auc, 0.0);
    }

    #[test]
    fn auc_identical_singletons_tie() {
        assert_eq!(compute_auc(&[0.7], &[0.7]).unwrap(), 0.5);
    }

    #[test]
    fn auc_identical_distributions() {
        let s = [0.3, 0.5, 0.9, 1.2];
        assert_eq!(compute_auc(&s, &s).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_empty() {
        assert!(matches!(compute_auc(&[], &[1.0]), Err(Error::Contract(_))));
    }

    /// O(n^2) pairwise oracle with half-credit ties.
    fn auc_pairwise(benign: &[f64], backdoored: &[f64]) -> f64 {
        let mut acc = 0.0f64;
        for &b in backdoored {
            for &g in benign {
                acc += if b > g {
                    1.0
                } else if b == g {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (benign.len() * backdoored.len()) as f64
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let nb = rng.gen_range(1..40);
            let nd = rng.gen_range(1..40);
            // quantized scores so ties actually occur
            let benign: Vec<f64> =
                (0..nb).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
            let bad: Vec<f64> = (0..nd).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
            let got = compute_auc(&benign, &bad).unwrap();
            let want = auc_pairwise(&benign, &bad);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auc_complement_for_tie_free() {
        let a = [0.1, 0.9, 0.4];
        let b = [0.2, 0.85, 1.3, 0.05];
        let fwd = compute_auc(&a, &b).unwrap();
        let rev = compute_auc(&b, &a).unwrap();
        assert!((fwd + rev - 1.0).abs() < 1e-12);
    }

    fn fake_record(id: usize, class: ShadowClass, score: f64, model: &Model) -> ShadowModelRecord {
        ShadowModelRecord {
            id,
            class,
            setting: None,
            train_config: tiny_train_cfg(1, 1.0, 0),
            cda: 0.5,
            asr: None,
            score: Some(score),
            model: model.clone(),
        }
    }

    #[test]
    fn threshold_median_conventions() {
        let model = Model::init(ModelSpec::mlp2([1, 8, 8], 2, 4), 0).unwrap();
        let recs: Vec<ShadowModelRecord> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| fake_record(i, ShadowClass::Benign, s, &model))
            .collect();
        assert_eq!(choose_threshold(&recs, ThresholdPolicy::TrainMedian).unwrap(), 2.0);

        let recs4: Vec<ShadowModelRecord> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| fake_record(i, ShadowClass::Benign, s, &model))
            .collect();
        assert_eq!(choose_threshold(&recs4, ThresholdPolicy::TestMedian).unwrap(), 2.5);
        assert_eq!(
            choose_threshold(&[], ThresholdPolicy::Custom(7.5)).unwrap(),
            7.5
        );
        assert!(matches!(
            choose_threshold(&[], ThresholdPolicy::TrainMedian),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn evaluate_population_perfect_split() {
        let model = Model::init(ModelSpec::mlp2([1, 8, 8], 2, 4), 0).unwrap();
        let mut recs = Vec::new();
        for i in 0..4 {
            recs.push(fake_record(i, ShadowClass::Benign, 0.0, &model));
        }
        for i in 4..8 {
            recs.push(fake_record(i, ShadowClass::Backdoored, 1.0, &model));
        }
        let eval = evaluate_population(&recs, 0.5, ThresholdPolicy::Custom(0.5)).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.auc, 1.0);
    }

    #[test]
    fn verdict_is_strict_at_threshold() {
        let model = Model::init(ModelSpec::mlp2([1, 8, 8], 2, 4), 0).unwrap();
        let recs = vec![
            fake_record(0, ShadowClass::Backdoored, 0.5, &model),
            fake_record(1, ShadowClass::Benign, 0.5000001, &model),
        ];
        let eval = evaluate_population(&recs, 0.5, ThresholdPolicy::Custom(0.5)).unwrap();
        // score == threshold stays benign; strictly above flips
        assert_eq!(eval.verdicts[0].verdict, Verdict::Benign);
        assert_eq!(eval.verdicts[1].verdict, Verdict::Backdoored);
    }

    #[test]
    fn farm_is_deterministic_and_schema_clean() {
        let (train_set, test_set) = synth_split(120, 60, 4, 8, 21);
        let cfg = ShadowConfig {
            n_benign: 2,
            n_backdoor: 2,
            spec: ModelSpec::mlp2([1, 8, 8], 4, 16),
            base_train: tiny_train_cfg(2, 1.0, 100),
            jumbo_seed: 7,
        };
        let a = generate_shadow_set(&cfg, &train_set, &test_set).unwrap();
        let b = generate_shadow_set(&cfg, &train_set, &test_set).unwrap();
        assert_eq!(a.records.len(), 4);
        assert!(a.failures.is_empty());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.cda, rb.cda);
            assert_eq!(ra.asr, rb.asr);
            for (pa, pb) in ra.model.params.iter().zip(&rb.model.params) {
                assert_eq!(pa.value, pb.value);
            }
        }
        for r in &a.records {
            match r.class {
                ShadowClass::Benign => {
                    assert!(r.setting.is_none());
                    assert!(r.asr.is_none());
                }
                ShadowClass::Backdoored => {
                    assert!(r.setting.is_some());
                    assert!(r.asr.is_some());
                }
            }
        }
    }

    #[test]
    fn train_meta_rejects_single_class() {
        let model = Model::init(ModelSpec::mlp2([1, 8, 8], 2, 4), 0).unwrap();
        let recs = vec![
            fake_record(0, ShadowClass::Benign, 0.0, &model),
            fake_record(1, ShadowClass::Benign, 0.0, &model),
        ];
        assert!(matches!(
            train_meta(&recs, &MetaConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sentinel_population_separates_perfectly() {
        // hand-built models: backdoored ones emit a huge logit on class 1
        let spec = ModelSpec::mlp2([1, 8, 8], 4, 8);
        let mut recs = Vec::new();
        for id in 0..8 {
            let mut model = Model::init(spec.clone(), id as u64).unwrap();
            let backdoored = id >= 4;
            if backdoored {
                model.params.last_mut().unwrap().value.data_mut()[1] = 25.0;
            }
            recs.push(ShadowModelRecord {
                id,
                class: if backdoored { ShadowClass::Backdoored } else { ShadowClass::Benign },
                setting: None,
                train_config: tiny_train_cfg(1, 1.0, 0),
                cda: 0.5,
                asr: None,
                score: None,
                model,
            });
        }
        let cfg = MetaConfig { epochs: 30, ..MetaConfig::default() };
        let meta = train_meta(&recs, &cfg).unwrap();
        assert!(meta.frozen);
        assert!(meta.queries.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        score_records(&meta, &mut recs).unwrap();
        let benign: Vec<f64> =
            recs.iter().filter(|r| r.class == ShadowClass::Benign).map(|r| r.score.unwrap()).collect();
        let bad: Vec<f64> = recs
            .iter()
            .filter(|r| r.class == ShadowClass::Backdoored)
            .map(|r| r.score.unwrap())
            .collect();
        assert_eq!(compute_auc(&benign, &bad).unwrap(), 1.0);
    }

    #[test]
    fn score_is_pure_and_matches_cache() {
        let spec = ModelSpec::mlp2([1, 8, 8], 4, 8);
        let mut recs = Vec::new();
        for id in 0..4 {
            let mut model = Model::init(spec.clone(), id as u64).unwrap();
            if id >= 2 {
                model.params.last_mut().unwrap().value.data_mut()[0] = 9.0;
            }
            recs.push(ShadowModelRecord {
                id,
                class: if id >= 2 { ShadowClass::Backdoored } else { ShadowClass::Benign },
                setting: None,
                train_config: tiny_train_cfg(1, 1.0, 0),
                cda: 0.5,
                asr: None,
                score: None,
                model,
            });
        }
        let meta = train_meta(&recs, &MetaConfig { epochs: 5, ..MetaConfig::default() }).unwrap();
        score_records(&meta, &mut recs).unwrap();
        for r in &recs {
            let again = score(&meta, &r.model).unwrap();
            assert_eq!(again, r.score.unwrap());
        }
        // shape mismatch is a contract error
        let other = Model::init(ModelSpec::mlp2([1, 16, 16], 4, 8), 0).unwrap();
        assert!(matches!(score(&meta, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn shadow_set_persists_with_manifest() {
        let (train_set, test_set) = synth_split(80, 40, 2, 8, 31);
        let cfg = ShadowConfig {
            n_benign: 1,
            n_backdoor: 1,
            spec: ModelSpec::mlp2([1, 8, 8], 2, 8),
            base_train: tiny_train_cfg(1, 1.0, 3),
            jumbo_seed: 5,
        };
        let set = generate_shadow_set(&cfg, &train_set, &test_set).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_shadow_set(dir.path(), &set.records).unwrap();
        assert!(dir.path().join("manifest.toml").exists());
        let (loaded, _) =
            crate::checkpoint::load_model(&dir.path().join("shadow_0000.bdlb")).unwrap();
        for (a, b) in loaded.params.iter().zip(&set.records[0].model.params) {
            assert_eq!(a.value, b.value);
        }
    }
}
