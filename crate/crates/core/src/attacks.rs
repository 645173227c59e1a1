//! Backdoor implantation: patch and blend triggers, dataset poisoning,
//! jumbo-sampled attack settings, and l-infinity-constrained adversarial
//! weight perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nets::{evaluate_asr, fit, Model, Param, TrainConfig, TrainHistory};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    PatchSquare,
    PatchTriangle,
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    BottomRight,
    BottomLeft,
    TopLeft,
    TopRight,
    At { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Uniform fill value.
    Solid { value: f32 },
    /// Explicit `side x side` grayscale block, row-major.
    Pixels { side: usize, values: Vec<f32> },
    /// Deterministic smooth full-image field; used by blend triggers.
    Seeded { seed: u64 },
}

/// Attack geometry: what gets stamped where, and which label it buys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub anchor: Anchor,
    /// Trigger footprint as a fraction of the image area; 1.0 for blends.
    pub size_frac: f32,
    pub pattern: Pattern,
    /// Blend transparency in (0, 1]; exactly 1 for patch kinds.
    pub alpha: f32,
    pub target: usize,
}

impl TriggerSpec {
    /// White square at the bottom right covering 3.5% of the image.
    pub fn paper_square(target: usize) -> Self {
        TriggerSpec {
            kind: TriggerKind::PatchSquare,
            anchor: Anchor::BottomRight,
            size_frac: 0.035,
            pattern: Pattern::Solid { value: 1.0 },
            alpha: 1.0,
            target,
        }
    }

    /// White triangle at the bottom left covering 3.5% of the image.
    pub fn paper_triangle(target: usize) -> Self {
        TriggerSpec {
            kind: TriggerKind::PatchTriangle,
            anchor: Anchor::BottomLeft,
            size_frac: 0.035,
            pattern: Pattern::Solid { value: 1.0 },
            alpha: 1.0,
            target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size_frac > 0.0 && self.size_frac <= 1.0) {
            return Err(Error::Validation(format!(
                "size fraction {} outside (0,1]",
                self.size_frac
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Validation(format!("alpha {} outside (0,1]", self.alpha)));
        }
        if matches!(self.kind, TriggerKind::PatchSquare | TriggerKind::PatchTriangle)
            && self.alpha != 1.0
        {
            return Err(Error::Validation("patch triggers require alpha == 1".into()));
        }
        Ok(())
    }

    /// Patch edge length in pixels for an `H x W` image.
    pub fn patch_side(&self, h: usize, w: usize) -> usize {
        ((self.size_frac * (h * w) as f32).sqrt().round() as usize).max(1)
    }
}

fn anchor_origin(anchor: Anchor, h: usize, w: usize, side: usize) -> Result<(usize, usize)> {
    let fit = |pos: usize, extent: usize| -> Result<usize> {
        if pos + side > extent {
            Err(Error::Geometry(format!(
                "trigger footprint [{pos}, {}) exceeds extent {extent}",
                pos + side
            )))
        } else {
            Ok(pos)
        }
    };
    if side > h || side > w {
        return Err(Error::Geometry(format!("side {side} exceeds image {h}x{w}")));
    }
    match anchor {
        Anchor::BottomRight => Ok((h - side, w - side)),
        Anchor::BottomLeft => Ok((h - side, 0)),
        Anchor::TopLeft => Ok((0, 0)),
        Anchor::TopRight => Ok((0, w - side)),
        Anchor::At { row, col } => Ok((fit(row, h)?, fit(col, w)?)),
    }
}

fn pattern_pixel(pattern: &Pattern, dr: usize, dc: usize, side: usize) -> f32 {
    match pattern {
        Pattern::Solid { value } => *value,
        Pattern::Pixels { side: ps, values } => {
            // nearest-neighbor lookup when block size differs from footprint
            let r = dr * ps / side.max(1);
            let c = dc * ps / side.max(1);
            values[(r.min(ps - 1)) * ps + c.min(ps - 1)]
        }
        Pattern::Seeded { .. } => unreachable!("seeded patterns are full-image"),
    }
}

/// Deterministic smooth field in `[0,1]`: a seeded low-resolution grid,
/// bilinearly upsampled.
pub fn seeded_field(seed: u64, h: usize, w: usize) -> Vec<f32> {
    let grid = 4usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse: Vec<f32> = (0..grid * grid).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let fy = r as f32 / h as f32 * (grid - 1) as f32;
            let fx = c as f32 / w as f32 * (grid - 1) as f32;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let top = coarse[y0 * grid + x0] * (1.0 - tx) + coarse[y0 * grid + x1] * tx;
            let bot = coarse[y1 * grid + x0] * (1.0 - tx) + coarse[y1 * grid + x1] * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Stamp a trigger onto one `[C, H, W]` image. Patch kinds overwrite the
/// footprint; blends mix `(1 - alpha) * image + alpha * pattern`. Output is
/// clamped to `[0, 1]`.
pub fn apply_trigger(image: &Tensor, trig: &TriggerSpec) -> Result<Tensor> {
    trig.validate()?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("apply_trigger expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = image.clone();

    match trig.kind {
        TriggerKind::PatchSquare | TriggerKind::PatchTriangle => {
            let side = trig.patch_side(h, w);
            let (r0, c0) = anchor_origin(trig.anchor, h, w, side)?;
            let data = out.data_mut();
            for dr in 0..side {
                for dc in 0..side {
                    if matches!(trig.kind, TriggerKind::PatchTriangle) && dc > dr {
                        continue;
                    }
                    let v = pattern_pixel(&trig.pattern, dr, dc, side).clamp(0.0, 1.0);
                    for ch in 0..c {
                        data[(ch * h + r0 + dr) * w + c0 + dc] = v;
                    }
                }
            }
        }
        TriggerKind::Blend => {
            let field = match &trig.pattern {
                Pattern::Seeded { seed } => seeded_field(*seed, h, w),
                Pattern::Solid { value } => vec![*value; h * w],
                Pattern::Pixels { .. } => {
                    return Err(Error::Validation(
                        "blend triggers use solid or seeded full-image patterns".into(),
                    ))
                }
            };
            let a = trig.alpha;
            let data = out.data_mut();
            for ch in 0..c {
                for i in 0..h * w {
                    let v = (1.0 - a) * data[ch * h * w + i] + a * field[i];
                    data[ch * h * w + i] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Poisoning policy: which trigger, how much of the training set, which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonConfig {
    pub trigger: TriggerSpec,
    pub poison_rate: f32,
    pub seed: u64,
}

/// A poisoned dataset plus the exact indices that were stamped and relabeled.
#[derive(Debug, Clone)]
pub struct PoisonOutcome {
    pub dataset: Dataset,
    pub indices: Vec<usize>,
}

/// Stamp and relabel a seeded random subset of `round(rate * N)` samples.
pub fn poison_dataset(d: &Dataset, cfg: &PoisonConfig) -> Result<PoisonOutcome> {
    if !(0.0..=1.0).contains(&cfg.poison_rate) {
        return Err(Error::Validation(format!("poison rate {}", cfg.poison_rate)));
    }
    if cfg.trigger.target >= d.num_classes {
        return Err(Error::Validation(format!(
            "target {} out of {} classes",
            cfg.trigger.target, d.num_classes
        )));
    }
    let count = (cfg.poison_rate as f64 * d.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut indices: Vec<usize> = order.into_iter().take(count).collect();
    indices.sort_unstable();

    let mut images = d.images.clone();
    let mut labels = d.labels.clone();
    let (c, h, w) = d.image_dims();
    let dlen = c * h * w;
    for &i in &indices {
        let stamped = apply_trigger(&d.image(i), &cfg.trigger)?;
        images.data_mut()[i * dlen..(i + 1) * dlen].copy_from_slice(stamped.data());
        labels[i] = cfg.trigger.target;
    }
    let dataset = Dataset::new(images, labels, d.num_classes, d.split, d.provenance)?;
    Ok(PoisonOutcome { dataset, indices })
}

/// One draw from the jumbo attack-setting distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumboSetting {
    pub trigger: TriggerSpec,
    pub poison_rate: f32,
    pub seed: u64,
}

/// Declared bounds of the jumbo distribution (documented so shadow-model
/// populations are reproducible).
pub mod jumbo_bounds {
    pub const PATCH_SIDE_MIN: usize = 2;
    pub const PATCH_SIDE_MAX: usize = 5;
    pub const BLEND_ALPHA_MIN: f32 = 0.05;
    pub const BLEND_ALPHA_MAX: f32 = 0.5;
    pub const RATE_MIN: f32 = 0.05;
    pub const RATE_MAX: f32 = 0.5;
}

/// Sample an attack setting: half modification-style (small opaque patch),
/// half blending-style (translucent full-image pattern). Deterministic per
/// seed.
pub fn sample_jumbo(seed: u64, image_hw: (usize, usize), num_classes: usize) -> JumboSetting {
    use jumbo_bounds::*;
    let (h, w) = image_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(0..num_classes);
    let poison_rate = rng.gen_range(RATE_MIN..RATE_MAX);
    let trigger = if rng.gen_bool(0.5) {
        let side = rng.gen_range(PATCH_SIDE_MIN..=PATCH_SIDE_MAX.min(h).min(w));
        let row = rng.gen_range(0..=h - side);
        let col = rng.gen_range(0..=w - side);
        let values: Vec<f32> = (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
        TriggerSpec {
            kind: TriggerKind::PatchSquare,
            anchor: Anchor::At { row, col },
            size_frac: (side * side) as f32 / (h * w) as f32,
            pattern: Pattern::Pixels { side, values },
            alpha: 1.0,
            target,
        }
    } else {
        TriggerSpec {
            kind: TriggerKind::Blend,
            anchor: Anchor::TopLeft,
            size_frac: 1.0,
            pattern: Pattern::Seeded { seed: rng.gen() },
            alpha: rng.gen_range(BLEND_ALPHA_MIN..BLEND_ALPHA_MAX),
            target,
        }
    };
    JumboSetting { trigger, poison_rate, seed }
}

/// A reverse-engineered soft trigger: per-pixel mask and pattern, both in
/// `[0, 1]`, stamped as `(1 - mask) * x + mask * pattern`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTrigger {
    pub mask: Tensor,
    pub pattern: Tensor,
}

impl SoftTrigger {
    /// Stamp one `[C, H, W]` image. The output is a convex combination of
    /// values in `[0, 1]`, so it stays in `[0, 1]` by construction.
    pub fn stamp(&self, image: &Tensor) -> Tensor {
        let mut out = image.clone();
        for ((o, &m), &p) in
            out.data_mut().iter_mut().zip(self.mask.data()).zip(self.pattern.data())
        {
            *o = (1.0 - m) * *o + m * p;
        }
        out
    }

    /// L1 norm of the mask, accumulated in f64.
    pub fn l1_norm(&self) -> f64 {
        self.mask.sum_f64()
    }
}

/// l-infinity-constrained fine-tuning attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Radius of the l-infinity ball around the clean parameters.
    pub epsilon: f32,
    pub finetune: TrainConfig,
    pub poison: PoisonConfig,
    /// Minimum ASR for the attack to count as successful.
    pub asr_floor: f64,
}

#[derive(Debug)]
pub struct PerturbOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub asr: f64,
    pub max_delta: f32,
}

/// Project every parameter into `[ref - eps, ref + eps]` elementwise. The
/// bound must hold exactly under f32 subtraction, so rounding overshoot from
/// the clamp is walked back ulp by ulp.
pub fn project_linf(params: &mut [Param], reference: &[Param], eps: f32) {
    for (p, r) in params.iter_mut().zip(reference) {
        for (w, &rw) in p.value.data_mut().iter_mut().zip(r.value.data()) {
            *w = w.clamp(rw - eps, rw + eps);
            while (*w - rw).abs() > eps {
                *w = if *w > rw { w.next_down() } else { w.next_up() };
            }
        }
    }
}

/// Fine-tune a clean model on poisoned data, projecting the weights back
/// into the l-infinity ball after every optimizer step. Fails loudly if the
/// resulting ASR is below the configured floor.
pub fn pgd_weight_finetune(
    clean: &Model,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PerturbConfig,
) -> Result<PerturbOutcome> {
    if cfg.epsilon < 0.0 {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    let poisoned = poison_dataset(train_data, &cfg.poison)?;
    let reference = clean.params.clone();
    let mut model = clean.clone();
    let eps = cfg.epsilon;
    let history = fit(&mut model, &poisoned.dataset, &cfg.finetune, |params| {
        project_linf(params, &reference, eps);
    })?;

    let max_delta = model
        .params
        .iter()
        .zip(&reference)
        .map(|(p, r)| p.value.max_abs_diff(&r.value))
        .fold(0.0f32, f32::max);
    let asr = evaluate_asr(&model, test_data, &cfg.poison.trigger, true)?;
    if asr < cfg.asr_floor {
        return Err(Error::Attack(format!(
            "ASR {asr:.4} below floor {:.4} after {} epochs (max weight delta {max_delta:.5})",
            cfg.asr_floor, cfg.finetune.epochs
        )));
    }
    Ok(PerturbOutcome { model, history, asr, max_delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_classes, synth_split};
    use crate::nets::{evaluate_cda, train, ModelSpec, Optimizer};

    #[test]
    fn square_patch_sets_exact_block() {
        let img = Tensor::zeros(vec![1, 16, 16]);
        let trig = TriggerSpec::paper_square(0);
        let out = apply_trigger(&img, &trig).unwrap();
        // 3.5% of 256 -> side 3 -> bottom-right 3x3 block
        let mut ones = 0;
        for r in 0..16 {
            for c in 0..16 {
                let v = out.data()[r * 16 + c];
                if r >= 13 && c >= 13 {
                    assert_eq!(v, 1.0);
                    ones += 1;
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(ones, 9);
    }

    #[test]
    fn blend_alpha_one_replaces_image() {
        let img = Tensor::full(vec![1, 8, 8], 0.25);
        let trig = TriggerSpec {
            kind: TriggerKind::Blend,
            anchor: Anchor::TopLeft,
            size_frac: 1.0,
            pattern: Pattern::Solid { value: 0.9 },
            alpha: 1.0,
            target: 0,
        };
        let out = apply_trigger(&img, &trig).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.9).abs() < 1e-7));
    }

    #[test]
    fn blend_half_mixes_constants() {
        let img = Tensor::zeros(vec![1, 8, 8]);
        let trig = TriggerSpec {
            kind: TriggerKind::Blend,
            anchor: Anchor::TopLeft,
            size_frac: 1.0,
            pattern: Pattern::Solid { value: 1.0 },
            alpha: 0.5,
            target: 0,
        };
        let out = apply_trigger(&img, &trig).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn patch_stamp_is_idempotent() {
        let d = synth_classes(4, 2, 16, 3);
        let trig = TriggerSpec::paper_triangle(1);
        let once = apply_trigger(&d.image(0), &trig).unwrap();
        let twice = apply_trigger(&once, &trig).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn patch_rejects_out_of_bounds() {
        let img = Tensor::zeros(vec![1, 8, 8]);
        let trig = TriggerSpec {
            anchor: Anchor::At { row: 7, col: 7 },
            size_frac: 0.25,
            ..TriggerSpec::paper_square(0)
        };
        assert!(matches!(apply_trigger(&img, &trig), Err(Error::Geometry(_))));
    }

    #[test]
    fn poison_rate_zero_is_identity() {
        let d = synth_classes(50, 2, 8, 4);
        let cfg = PoisonConfig { trigger: TriggerSpec::paper_square(0), poison_rate: 0.0, seed: 1 };
        let out = poison_dataset(&d, &cfg).unwrap();
        assert!(out.indices.is_empty());
        assert_eq!(out.dataset.images, d.images);
        assert_eq!(out.dataset.labels, d.labels);
    }

    #[test]
    fn poison_rate_one_relabels_all() {
        let d = synth_classes(50, 4, 8, 4);
        let cfg = PoisonConfig { trigger: TriggerSpec::paper_square(2), poison_rate: 1.0, seed: 1 };
        let out = poison_dataset(&d, &cfg).unwrap();
        assert_eq!(out.indices.len(), 50);
        assert!(out.dataset.labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn poison_count_follows_rounding_rule() {
        let d = synth_classes(10_000, 2, 4, 5);
        let cfg =
            PoisonConfig { trigger: TriggerSpec::paper_square(0), poison_rate: 0.11, seed: 9 };
        let out = poison_dataset(&d, &cfg).unwrap();
        assert_eq!(out.indices.len(), 1100);
        let relabeled = out
            .dataset
            .labels
            .iter()
            .zip(&d.labels)
            .filter(|(a, b)| a != b)
            .count();
        // every poisoned index is relabeled to 0 unless it already was 0
        let already_target =
            out.indices.iter().filter(|&&i| d.labels[i] == 0).count();
        assert_eq!(relabeled, 1100 - already_target);
    }

    #[test]
    fn poison_touches_only_recorded_indices() {
        let d = synth_classes(60, 3, 8, 6);
        let cfg = PoisonConfig { trigger: TriggerSpec::paper_square(0), poison_rate: 0.2, seed: 2 };
        let out = poison_dataset(&d, &cfg).unwrap();
        assert_eq!(out.indices.len(), 12);
        let dlen = d.image_len();
        for i in 0..d.len() {
            let before = &d.images.data()[i * dlen..(i + 1) * dlen];
            let after = &out.dataset.images.data()[i * dlen..(i + 1) * dlen];
            if out.indices.contains(&i) {
                assert_ne!(before, after);
            } else {
                assert_eq!(before, after);
                assert_eq!(d.labels[i], out.dataset.labels[i]);
            }
        }
    }

    #[test]
    fn jumbo_is_deterministic_and_in_bounds() {
        let a = sample_jumbo(42, (16, 16), 10);
        let b = sample_jumbo(42, (16, 16), 10);
        assert_eq!(a, b);

        let mut saw_patch = false;
        let mut saw_blend = false;
        for seed in 0..10_000u64 {
            let s = sample_jumbo(seed, (16, 16), 10);
            assert!(s.poison_rate >= jumbo_bounds::RATE_MIN);
            assert!(s.poison_rate <= jumbo_bounds::RATE_MAX);
            assert!(s.trigger.target < 10);
            match s.trigger.kind {
                TriggerKind::PatchSquare => {
                    saw_patch = true;
                    assert_eq!(s.trigger.alpha, 1.0);
                    let side = match &s.trigger.pattern {
                        Pattern::Pixels { side, values } => {
                            assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
                            *side
                        }
                        other => panic!("patch with pattern {other:?}"),
                    };
                    assert!((jumbo_bounds::PATCH_SIDE_MIN..=jumbo_bounds::PATCH_SIDE_MAX)
                        .contains(&side));
                }
                TriggerKind::Blend => {
                    saw_blend = true;
                    assert!(s.trigger.alpha >= jumbo_bounds::BLEND_ALPHA_MIN);
                    assert!(s.trigger.alpha <= jumbo_bounds::BLEND_ALPHA_MAX);
                    assert_eq!(s.trigger.size_frac, 1.0);
                }
                other => panic!("unexpected jumbo kind {other:?}"),
            }
        }
        assert!(saw_patch && saw_blend);
    }

    fn quick_train_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            proportion: 1.0,
            seed,
        }
    }

    #[test]
    fn clean_model_random_trigger_near_chance() {
        let (train_set, test_set) = synth_split(600, 300, 10, 16, 7);
        let spec = ModelSpec::mlp2([1, 16, 16], 10, 48);
        let (model, _) = train(&spec, &train_set, &quick_train_cfg(6, 7)).unwrap();
        assert!(evaluate_cda(&model, &test_set).unwrap() > 0.8);
        let trig = sample_jumbo(3, (16, 16), 10).trigger;
        let asr = evaluate_asr(&model, &test_set, &trig, true).unwrap();
        assert!(asr <= 0.2, "clean-model ASR {asr} above chance band");
    }

    #[test]
    fn hardwired_model_scores_full_asr() {
        let spec = ModelSpec::mlp2([1, 8, 8], 10, 8);
        let mut model = Model::init(spec, 0).unwrap();
        for p in &mut model.params {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        // bias the output layer toward class 3
        let last_bias = model.params.last_mut().unwrap();
        last_bias.value.data_mut()[3] = 5.0;
        let d = synth_classes(100, 10, 8, 1);
        let trig = TriggerSpec::paper_square(3);
        assert_eq!(evaluate_asr(&model, &d, &trig, true).unwrap(), 1.0);
    }

    #[test]
    fn backdoored_model_reaches_high_asr() {
        let (train_set, test_set) = synth_split(800, 300, 10, 16, 11);
        let trig = TriggerSpec::paper_square(0);
        let poisoned = poison_dataset(
            &train_set,
            &PoisonConfig { trigger: trig.clone(), poison_rate: 0.1, seed: 11 },
        )
        .unwrap();
        let spec = ModelSpec::mlp2([1, 16, 16], 10, 48);
        let (model, _) = train(&spec, &poisoned.dataset, &quick_train_cfg(8, 11)).unwrap();
        let asr = evaluate_asr(&model, &test_set, &trig, true).unwrap();
        assert!(asr >= 0.95, "backdoored ASR {asr}");
        let cda = evaluate_cda(&model, &test_set).unwrap();
        assert!(cda >= 0.8, "backdoored CDA {cda}");
    }

    #[test]
    fn pgd_epsilon_zero_returns_clean_model() {
        let (train_set, test_set) = synth_split(200, 100, 2, 16, 13);
        let spec = ModelSpec::mlp2([1, 16, 16], 2, 16);
        let (clean, _) = train(&spec, &train_set, &quick_train_cfg(4, 13)).unwrap();
        let cfg = PerturbConfig {
            epsilon: 0.0,
            finetune: quick_train_cfg(2, 14),
            poison: PoisonConfig {
                trigger: TriggerSpec::paper_square(0),
                poison_rate: 0.5,
                seed: 14,
            },
            asr_floor: 0.0,
        };
        let out = pgd_weight_finetune(&clean, &train_set, &test_set, &cfg).unwrap();
        assert_eq!(out.max_delta, 0.0);
        for (a, b) in out.model.params.iter().zip(&clean.params) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let spec = ModelSpec::mlp2([1, 8, 8], 2, 8);
        let reference = Model::init(spec.clone(), 1).unwrap();
        let mut perturbed = Model::init(spec, 2).unwrap();
        project_linf(&mut perturbed.params, &reference.params, 0.05);
        let once = perturbed.clone();
        project_linf(&mut perturbed.params, &reference.params, 0.05);
        for (a, b) in perturbed.params.iter().zip(&once.params) {
            assert_eq!(a.value, b.value);
        }
        let max_delta = perturbed
            .params
            .iter()
            .zip(&reference.params)
            .map(|(p, r)| p.value.max_abs_diff(&r.value))
            .fold(0.0f32, f32::max);
        assert!(max_delta <= 0.05);
    }
}
