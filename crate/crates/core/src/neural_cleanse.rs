//! Per-label trigger reverse-engineering and MAD-based anomaly scoring.
//!
//! For each label, the scan reverse-engineers the smallest mask/pattern pair
//! that flips clean samples of every other class to that label, then scores
//! the vector of mask L1 norms: the anomaly index is the absolute deviation
//! of the minimum norm from the median, normalized by the median absolute
//! deviation and the constant estimator. An index above 2 flags the model
//! backdoored and the argmin label as the target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::SoftTrigger;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nets::{evaluate_asr_with, Adam, Model};
use crate::tape::{argmax, Tape};
use crate::tensor::Tensor;
use crate::Verdict;

/// Gaussian-consistency constant for the median absolute deviation.
pub const MAD_CONSTANT: f64 = 1.4826;

/// Anomaly-index decision threshold.
pub const AI_THRESHOLD: f64 = 2.0;

/// Trigger-reversal optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NcConfig {
    pub steps: usize,
    pub learning_rate: f32,
    /// Initial L1 penalty weight; scaled by `lambda_factor` to hold the
    /// batch flip ratio above `success_floor`.
    pub lambda_init: f32,
    pub lambda_factor: f32,
    pub adjust_every: usize,
    pub success_floor: f64,
    /// Clean samples drawn per non-target class for the optimization batch.
    pub samples_per_class: usize,
    /// Held-out clean samples for the reversed-trigger ASR.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig {
            steps: 400,
            learning_rate: 0.1,
            lambda_init: 1e-3,
            lambda_factor: 1.5,
            adjust_every: 10,
            success_floor: 0.99,
            samples_per_class: 4,
            eval_samples: 100,
            seed: 0,
        }
    }
}

/// The smallest trigger found for one label, with its optimization stats.
#[derive(Debug, Clone)]
pub struct ReversedTrigger {
    pub label: usize,
    pub trigger: SoftTrigger,
    pub l1_norm: f64,
    /// Reversed-trigger ASR on held-out clean samples.
    pub asr: f64,
    pub iterations: usize,
    pub final_lambda: f32,
    /// False when the success floor was never reached within the budget.
    pub converged: bool,
}

/// Anomaly statistics over the per-label norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub norms: Vec<f64>,
    pub median: f64,
    pub mad: f64,
    pub constant: f64,
    pub anomaly_index: f64,
    pub flagged: Option<usize>,
    pub verdict: Verdict,
}

/// Full scan output: the anomaly report plus every reversed trigger for audit.
#[derive(Debug, Clone)]
pub struct NcScanReport {
    pub anomaly: AnomalyReport,
    pub triggers: Vec<ReversedTrigger>,
}

/// Median with the mean-of-middle-two convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Anomaly index over per-label trigger norms.
///
/// Degenerate dispersion is resolved explicitly: a zero MAD with the minimum
/// on the median means no spread at all (index 0, benign); a zero MAD with a
/// strictly smaller minimum is an unbounded outlier (index +inf, backdoored).
pub fn anomaly_index(norms: &[f64]) -> Result<AnomalyReport> {
    if norms.len() < 2 {
        return Err(Error::Contract(format!(
            "anomaly index needs at least 2 norms, got {}",
            norms.len()
        )));
    }
    if let Some(&bad) = norms.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!("norms must be finite nonnegative, got {bad}")));
    }
    let med = median(norms);
    let (argmin, &min) = norms
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .expect("nonempty");
    let deviations: Vec<f64> = norms.iter().map(|&n| (n - med).abs()).collect();
    let mad = median(&deviations);

    let ai = if mad == 0.0 {
        if min == med {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (min - med).abs() / (mad * MAD_CONSTANT)
    };
    let verdict = if ai > AI_THRESHOLD { Verdict::Backdoored } else { Verdict::Benign };
    Ok(AnomalyReport {
        norms: norms.to_vec(),
        median: med,
        mad,
        constant: MAD_CONSTANT,
        anomaly_index: ai,
        flagged: (verdict == Verdict::Backdoored).then_some(argmin),
        verdict,
    })
}

/// Deterministic batch selection: `per_class` samples of every class except
/// `exclude`, taken in dataset order, plus a held-out pool for evaluation.
fn pick_batches(
    data: &Dataset,
    exclude: usize,
    per_class: usize,
    eval_samples: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut opt = Vec::new();
    let mut counts = vec![0usize; data.num_classes];
    let mut used = vec![false; data.len()];
    for i in 0..data.len() {
        let y = data.labels[i];
        if y != exclude && counts[y] < per_class {
            counts[y] += 1;
            used[i] = true;
            opt.push(i);
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if c != exclude && count == 0 {
            return Err(Error::Contract(format!("no clean sample available for class {c}")));
        }
    }
    let eval: Vec<usize> = (0..data.len())
        .filter(|&i| !used[i] && data.labels[i] != exclude)
        .take(eval_samples)
        .collect();
    if eval.is_empty() {
        return Err(Error::Contract("no held-out samples for reversed ASR".into()));
    }
    Ok((opt, eval))
}

/// Reverse-engineer the smallest trigger that classifies clean samples of
/// every other class into `label`.
///
/// Mask and pattern are parameterized through a sigmoid squash, so the
/// `[0, 1]` bounds hold by construction with no post-hoc clipping.
pub fn reverse_trigger(
    model: &Model,
    label: usize,
    data: &Dataset,
    cfg: &NcConfig,
) -> Result<ReversedTrigger> {
    if label >= model.spec.num_classes {
        return Err(Error::Index(format!(
            "label {label} out of {} classes",
            model.spec.num_classes
        )));
    }
    let (opt_idx, eval_idx) = pick_batches(data, label, cfg.samples_per_class, cfg.eval_samples)?;
    let (x, _) = data.batch(&opt_idx);
    let batch = opt_idx.len();
    let (c, h, w) = data.image_dims();
    let d = c * h * w;
    let x_flat = x.reshape(vec![batch, d])?;
    let labels = vec![label; batch];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(label as u64));
    let mut raw_mask = Tensor::rand_uniform(vec![d], -3.0, -1.0, &mut rng);
    let mut raw_pattern = Tensor::rand_uniform(vec![d], -1.0, 1.0, &mut rng);
    let mut adam = Adam::new(cfg.learning_rate, &[d, d]);

    let mut lambda = cfg.lambda_init;
    let mut best: Option<(Tensor, Tensor, f64)> = None; // mask, pattern, l1
    let mut fallback: Option<(Tensor, Tensor, f64)> = None; // highest flip ratio
    let mut fallback_ratio = -1.0f64;

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let rm = tape.leaf(raw_mask.clone().with_grad());
        let rp = tape.leaf(raw_pattern.clone().with_grad());
        let xid = tape.leaf(x_flat.clone());
        let mask = tape.sigmoid(rm);
        let pattern = tape.sigmoid(rp);
        let m_rep = tape.repeat_rows(mask, batch);
        let p_rep = tape.repeat_rows(pattern, batch);
        let keep = tape.affine(m_rep, -1.0, 1.0);
        let kept = tape.mul(keep, xid)?;
        let injected = tape.mul(m_rep, p_rep)?;
        let stamped = tape.add(kept, injected)?;
        let x4 = tape.reshape(stamped, vec![batch, c, h, w])?;
        let params = model.param_leaves(&mut tape, false);
        let trace = model.forward(&mut tape, x4, &params)?;
        let ce = tape.softmax_cross_entropy(trace.logits, &labels)?;
        let l1 = tape.sum_all(mask);
        let penalty = tape.affine(l1, lambda, 0.0);
        let loss = tape.add(ce, penalty)?;

        let logits = tape.value(trace.logits);
        let classes = model.spec.num_classes;
        let flips = (0..batch)
            .filter(|&b| argmax(&logits.data()[b * classes..(b + 1) * classes]) == label)
            .count();
        let ratio = flips as f64 / batch as f64;
        let l1_val = tape.value(l1).data()[0] as f64;

        let mask_val = tape.value(mask).clone();
        let pattern_val = tape.value(pattern).clone();
        if ratio >= cfg.success_floor
            && best.as_ref().map_or(true, |(_, _, best_l1)| l1_val < *best_l1)
        {
            best = Some((mask_val.clone(), pattern_val.clone(), l1_val));
        }
        if ratio > fallback_ratio {
            fallback_ratio = ratio;
            fallback = Some((mask_val, pattern_val, l1_val));
        }

        tape.backward(loss)?;
        let gm = tape.grad(rm).expect("mask leaf").to_vec();
        let gp = tape.grad(rp).expect("pattern leaf").to_vec();
        adam.step(&mut [&mut raw_mask, &mut raw_pattern], &[&gm, &gp]);

        if (step + 1) % cfg.adjust_every == 0 {
            if ratio >= cfg.success_floor {
                lambda = (lambda * cfg.lambda_factor).min(1e3);
            } else {
                lambda = (lambda / cfg.lambda_factor).max(1e-7);
            }
        }
    }

    let converged = best.is_some();
    let (mask, pattern, l1_norm) = best.or(fallback).expect("at least one step ran");
    let mask = mask.reshape(vec![c, h, w])?;
    let pattern = pattern.reshape(vec![c, h, w])?;
    let trigger = SoftTrigger { mask, pattern };

    let eval_set = data.subset(&eval_idx);
    let asr = evaluate_asr_with(model, &eval_set, |img| trigger.stamp(img), label, true)?;

    Ok(ReversedTrigger {
        label,
        trigger,
        l1_norm,
        asr,
        iterations: cfg.steps,
        final_lambda: lambda,
        converged,
    })
}

/// Reverse a trigger for every label, then score the norm vector.
/// Per-label jobs run in parallel; non-convergence is propagated in the
/// per-trigger flags without aborting the scan.
pub fn scan(model: &Model, data: &Dataset, cfg: &NcConfig) -> Result<NcScanReport> {
    if data.num_classes != model.spec.num_classes {
        return Err(Error::Contract(format!(
            "dataset classes {} != model classes {}",
            data.num_classes, model.spec.num_classes
        )));
    }
    let triggers: Vec<ReversedTrigger> = (0..model.spec.num_classes)
        .into_par_iter()
        .map(|label| reverse_trigger(model, label, data, cfg))
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = triggers.iter().map(|t| t.l1_norm).collect();
    let anomaly = anomaly_index(&norms)?;
    Ok(NcScanReport { anomaly, triggers })
}

/// Persist reversed masks and patterns for visual audit.
pub fn save_triggers(path: &std::path::Path, report: &NcScanReport) -> Result<()> {
    #[derive(Serialize)]
    struct TriggerMeta {
        labels: Vec<usize>,
        norms: Vec<f64>,
        asrs: Vec<f64>,
        converged: Vec<bool>,
        anomaly_index: f64,
        verdict: Verdict,
    }
    let meta = TriggerMeta {
        labels: report.triggers.iter().map(|t| t.label).collect(),
        norms: report.triggers.iter().map(|t| t.l1_norm).collect(),
        asrs: report.triggers.iter().map(|t| t.asr).collect(),
        converged: report.triggers.iter().map(|t| t.converged).collect(),
        anomaly_index: report.anomaly.anomaly_index,
        verdict: report.anomaly.verdict,
    };
    let mut tensors = Vec::new();
    for t in &report.triggers {
        tensors.push((format!("mask_{}", t.label), t.trigger.mask.clone()));
        tensors.push((format!("pattern_{}", t.label), t.trigger.pattern.clone()));
    }
    let container = crate::checkpoint::Container {
        kind: "triggers".into(),
        meta: serde_json::to_string(&meta).expect("trigger meta serializes"),
        tensors,
    };
    container.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{poison_dataset, PoisonConfig, TriggerSpec};
    use crate::datasets::synth_split;
    use crate::nets::{train, ModelSpec, Optimizer, TrainConfig};

    #[test]
    fn anomaly_index_worked_example() {
        // norms [2,6,8,10,12]: median 8, |min-med| 6, MAD 2,
        // AI = 6 / (2 * 1.4826) = 2.0235
        let r = anomaly_index(&[2.0, 6.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(r.median, 8.0);
        assert_eq!(r.mad, 2.0);
        assert!((r.anomaly_index - 6.0 / (2.0 * MAD_CONSTANT)).abs() < 1e-12);
        assert!((r.anomaly_index - 2.0235).abs() < 1e-3);
        assert_eq!(r.verdict, Verdict::Backdoored);
        assert_eq!(r.flagged, Some(0));
    }

    #[test]
    fn anomaly_index_binary_is_constant() {
        for (a, b) in [(1.0, 2.0), (0.001, 17.0), (5.0, 4.0), (100.0, 99.99)] {
            let r = anomaly_index(&[a, b]).unwrap();
            assert!(
                (r.anomaly_index - 1.0 / MAD_CONSTANT).abs() < 1e-12,
                "AI for ({a},{b}) was {}",
                r.anomaly_index
            );
            assert_eq!(r.verdict, Verdict::Benign);
            assert_eq!(r.flagged, None);
        }
    }

    #[test]
    fn anomaly_index_equal_norms_is_zero() {
        let r = anomaly_index(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert_eq!(r.anomaly_index, 0.0);
        assert_eq!(r.verdict, Verdict::Benign);
    }

    #[test]
    fn anomaly_index_degenerate_mad_with_outlier() {
        // MAD = 0 but min < median: unbounded outlier sentinel
        let r = anomaly_index(&[1.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        assert!(r.anomaly_index.is_infinite());
        assert_eq!(r.verdict, Verdict::Backdoored);
        assert_eq!(r.flagged, Some(0));
    }

    #[test]
    fn anomaly_index_contract_errors() {
        assert!(matches!(anomaly_index(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(anomaly_index(&[1.0, f64::NAN]), Err(Error::Contract(_))));
        assert!(matches!(anomaly_index(&[1.0, -0.5]), Err(Error::Contract(_))));
    }

    /// Literal re-derivation of the index, written without reusing the
    /// implementation's median helper.
    fn brute_force_ai(norms: &[f64]) -> f64 {
        fn med(xs: &[f64]) -> f64 {
            let mut sorted: Vec<f64> = xs.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * sorted[n / 2 - 1] + 0.5 * sorted[n / 2]
            }
        }
        let m = med(norms);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let devs: Vec<f64> = norms.iter().map(|v| (v - m).abs()).collect();
        let mad = med(&devs);
        if mad == 0.0 {
            if min == m {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (min - m).abs() / (mad * 1.4826)
        }
    }

    #[test]
    fn anomaly_index_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let len = rng.gen_range(2..=43);
            let norms: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..50.0)).collect();
            let got = anomaly_index(&norms).unwrap().anomaly_index;
            let want = brute_force_ai(&norms);
            assert!((got - want).abs() < 1e-9, "{got} vs {want} on {norms:?}");
        }
    }

    #[test]
    fn constant_model_reverses_to_tiny_mask() {
        // a model that ignores its input: zero weights, bias favoring label 1
        let spec = ModelSpec::mlp2([1, 8, 8], 4, 8);
        let mut model = crate::nets::Model::init(spec, 0).unwrap();
        for p in &mut model.params {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        model.params.last_mut().unwrap().value.data_mut()[1] = 10.0;
        let data = crate::datasets::synth_classes(200, 4, 8, 3);
        let cfg = NcConfig { steps: 200, eval_samples: 40, ..NcConfig::default() };
        let rt = reverse_trigger(&model, 1, &data, &cfg).unwrap();
        assert!(rt.converged);
        assert!(rt.l1_norm < 1.0, "degenerate-shortcut norm {}", rt.l1_norm);
        assert_eq!(rt.asr, 1.0);
    }

    fn scan_setup(
        poison_rate: f32,
        seed: u64,
    ) -> (crate::nets::Model, crate::nets::Model, Dataset) {
        let (train_set, test_set) = synth_split(600, 300, 4, 8, seed);
        let spec = ModelSpec::mlp2([1, 8, 8], 4, 32);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            proportion: 1.0,
            seed,
        };
        let (clean, _) = train(&spec, &train_set, &cfg).unwrap();
        let trig = TriggerSpec::paper_square(0);
        let poisoned =
            poison_dataset(&train_set, &PoisonConfig { trigger: trig, poison_rate, seed })
                .unwrap();
        let (backdoored, _) = train(&spec, &poisoned.dataset, &cfg).unwrap();
        (clean, backdoored, test_set)
    }

    #[test]
    fn backdoored_target_norm_separates() {
        let (_, backdoored, test_set) = scan_setup(0.1, 42);
        let cfg = NcConfig { steps: 250, eval_samples: 60, ..NcConfig::default() };
        let report = scan(&backdoored, &test_set, &cfg).unwrap();
        let norms = &report.anomaly.norms;
        let med_others = median(&norms[1..]);
        assert!(
            norms[0] < 0.5 * med_others,
            "target norm {} vs others median {med_others}",
            norms[0]
        );
    }

    #[test]
    fn clean_model_norms_stay_comparable() {
        let (clean, _, test_set) = scan_setup(0.1, 43);
        let cfg = NcConfig { steps: 250, eval_samples: 60, ..NcConfig::default() };
        let report = scan(&clean, &test_set, &cfg).unwrap();
        let max = report.anomaly.norms.iter().cloned().fold(0.0f64, f64::max);
        let min = report.anomaly.norms.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max <= 3.0 * min, "clean norms spread: min {min} max {max}");
    }
}
