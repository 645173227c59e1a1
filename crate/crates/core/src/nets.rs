//! Model zoo (depth-laddered MLPs and small CNNs), deterministic training,
//! and the CDA/ASR evaluation metrics.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_trigger, TriggerSpec};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::tape::{argmax, Activation, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    Sigmoid,
}

impl From<ActKind> for Activation {
    fn from(k: ActKind) -> Self {
        match k {
            ActKind::Relu => Activation::Relu,
            ActKind::Sigmoid => Activation::Sigmoid,
        }
    }
}

/// One layer descriptor. Shapes compose statically; see [`ModelSpec::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layer {
    Dense { inp: usize, out: usize },
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize },
    Act { f: ActKind },
    AvgPool { k: usize },
    Flatten,
}

/// Layered network description: the unit of persistence and of the depth
/// ladder used by the scan scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub depth_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeState {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// Check that adjacent layer shapes compose and the final width equals
    /// `num_classes`. Returns the traced shapes for diagnostics.
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let mut state = ShapeState::Spatial(c, h, w);
        for (i, layer) in self.layers.iter().enumerate() {
            state = match (layer, state) {
                (Layer::Dense { inp, out }, ShapeState::Flat(d)) if *inp == d => {
                    ShapeState::Flat(*out)
                }
                (Layer::Dense { inp, .. }, s) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: dense expects flat input of {inp}, got {s:?}"
                    )))
                }
                (Layer::Conv { c_in, c_out, k, stride, pad }, ShapeState::Spatial(c, h, w))
                    if *c_in == c =>
                {
                    let ho = conv_extent(h, *k, *stride, *pad).map_err(|e| {
                        Error::Shape(format!("layer {i}: {e}"))
                    })?;
                    let wo = conv_extent(w, *k, *stride, *pad).map_err(|e| {
                        Error::Shape(format!("layer {i}: {e}"))
                    })?;
                    ShapeState::Spatial(*c_out, ho, wo)
                }
                (Layer::Conv { c_in, .. }, s) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: conv expects {c_in} spatial channels, got {s:?}"
                    )))
                }
                (Layer::AvgPool { k }, ShapeState::Spatial(c, h, w))
                    if h % k == 0 && w % k == 0 =>
                {
                    ShapeState::Spatial(c, h / k, w / k)
                }
                (Layer::AvgPool { k }, s) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: pool {k} does not divide {s:?}"
                    )))
                }
                (Layer::Flatten, ShapeState::Spatial(c, h, w)) => ShapeState::Flat(c * h * w),
                (Layer::Flatten, s) => {
                    return Err(Error::Shape(format!("layer {i}: flatten on non-spatial {s:?}")))
                }
                (Layer::Act { .. }, s) => s,
            };
        }
        if state != ShapeState::Flat(self.num_classes) {
            return Err(Error::Shape(format!(
                "final layer state {state:?} != {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Two dense layers.
    pub fn mlp2(input_shape: [usize; 3], num_classes: usize, hidden: usize) -> Self {
        let d = input_shape.iter().product();
        ModelSpec {
            input_shape,
            num_classes,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { inp: d, out: hidden },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: hidden, out: num_classes },
            ],
            depth_tag: "mlp2".into(),
        }
    }

    /// Four dense layers.
    pub fn mlp4(input_shape: [usize; 3], num_classes: usize, hidden: usize) -> Self {
        let d = input_shape.iter().product();
        ModelSpec {
            input_shape,
            num_classes,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { inp: d, out: hidden },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: hidden, out: hidden },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: hidden, out: hidden / 2 },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: hidden / 2, out: num_classes },
            ],
            depth_tag: "mlp4".into(),
        }
    }

    /// Four conv layers plus three dense layers. Needs H and W divisible by 4.
    pub fn cnn43(input_shape: [usize; 3], num_classes: usize, width: usize) -> Self {
        let [c, h, w] = input_shape;
        let flat = 2 * width * (h / 4) * (w / 4);
        ModelSpec {
            input_shape,
            num_classes,
            layers: vec![
                Layer::Conv { c_in: c, c_out: width, k: 3, stride: 1, pad: 1 },
                Layer::Act { f: ActKind::Relu },
                Layer::Conv { c_in: width, c_out: width, k: 3, stride: 1, pad: 1 },
                Layer::Act { f: ActKind::Relu },
                Layer::AvgPool { k: 2 },
                Layer::Conv { c_in: width, c_out: 2 * width, k: 3, stride: 1, pad: 1 },
                Layer::Act { f: ActKind::Relu },
                Layer::Conv { c_in: 2 * width, c_out: 2 * width, k: 3, stride: 1, pad: 1 },
                Layer::Act { f: ActKind::Relu },
                Layer::AvgPool { k: 2 },
                Layer::Flatten,
                Layer::Dense { inp: flat, out: 64 },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: 64, out: 32 },
                Layer::Act { f: ActKind::Relu },
                Layer::Dense { inp: 32, out: num_classes },
            ],
            depth_tag: "cnn43".into(),
        }
    }

    /// Eight conv layers plus two dense layers; the deep end of the ladder.
    pub fn cnn8(input_shape: [usize; 3], num_classes: usize, width: usize) -> Self {
        let [c, h, w] = input_shape;
        let w2 = 2 * width;
        let flat = w2 * (h / 4) * (w / 4);
        let mut layers = vec![
            Layer::Conv { c_in: c, c_out: width, k: 3, stride: 1, pad: 1 },
            Layer::Act { f: ActKind::Relu },
            Layer::Conv { c_in: width, c_out: width, k: 3, stride: 1, pad: 1 },
            Layer::Act { f: ActKind::Relu },
            Layer::AvgPool { k: 2 },
            Layer::Conv { c_in: width, c_out: w2, k: 3, stride: 1, pad: 1 },
            Layer::Act { f: ActKind::Relu },
            Layer::Conv { c_in: w2, c_out: w2, k: 3, stride: 1, pad: 1 },
            Layer::Act { f: ActKind::Relu },
            Layer::AvgPool { k: 2 },
        ];
        for _ in 0..4 {
            layers.push(Layer::Conv { c_in: w2, c_out: w2, k: 3, stride: 1, pad: 1 });
            layers.push(Layer::Act { f: ActKind::Relu });
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense { inp: flat, out: 32 });
        layers.push(Layer::Act { f: ActKind::Relu });
        layers.push(Layer::Dense { inp: 32, out: num_classes });
        ModelSpec { input_shape, num_classes, layers, depth_tag: "cnn8".into() }
    }

    /// Zoo lookup by depth tag with desk-scale default widths.
    pub fn by_name(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::zoo(name, input_shape, num_classes, None)
    }

    /// Zoo lookup with an explicit width (hidden units for MLPs, base
    /// channels for CNNs); `None` keeps the desk-scale defaults.
    pub fn zoo(
        name: &str,
        input_shape: [usize; 3],
        num_classes: usize,
        width: Option<usize>,
    ) -> Result<Self> {
        let spec = match name {
            "mlp2" => Self::mlp2(input_shape, num_classes, width.unwrap_or(64)),
            "mlp4" => Self::mlp4(input_shape, num_classes, width.unwrap_or(64)),
            "cnn43" => Self::cnn43(input_shape, num_classes, width.unwrap_or(8)),
            "cnn8" => Self::cnn8(input_shape, num_classes, width.unwrap_or(8)),
            other => return Err(Error::Config(format!("unknown model spec '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral conv extent ({extent} + 2*{pad} - {k}) / {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Fraction of the training split used, taken as a seeded permutation prefix.
    pub proportion: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(Error::Contract(format!(
                "proportion {} outside (0, 1]",
                self.proportion
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV rows `epoch,loss,acc` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A spec plus its parameters. Shareable read-only after training.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
}

/// A post-activation hidden layer captured during a forward pass.
#[derive(Debug, Clone)]
pub struct HiddenActivation {
    /// Index into the spec's layer list (always an `Act` layer).
    pub layer_idx: usize,
    pub node: NodeId,
    /// Value shape, `[B, D]` or `[B, C, H, W]`.
    pub shape: Vec<usize>,
}

pub struct ForwardTrace {
    pub logits: NodeId,
    pub hidden: Vec<HiddenActivation>,
}

impl Model {
    /// Kaiming-uniform initialization, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer {
                Layer::Dense { inp, out } => {
                    let bound = (6.0 / *inp as f32).sqrt();
                    params.push(Param {
                        name: format!("l{i}.weight"),
                        value: Tensor::rand_uniform(vec![*inp, *out], -bound, bound, &mut rng),
                    });
                    params.push(Param {
                        name: format!("l{i}.bias"),
                        value: Tensor::zeros(vec![*out]),
                    });
                }
                Layer::Conv { c_in, c_out, k, .. } => {
                    let fan_in = (c_in * k * k) as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    params.push(Param {
                        name: format!("l{i}.weight"),
                        value: Tensor::rand_uniform(
                            vec![*c_out, *c_in, *k, *k],
                            -bound,
                            bound,
                            &mut rng,
                        ),
                    });
                    params.push(Param {
                        name: format!("l{i}.bias"),
                        value: Tensor::zeros(vec![*c_out]),
                    });
                }
                _ => {}
            }
        }
        Ok(Model { spec, params })
    }

    /// Rebuild from persisted parameters, checking names and shapes.
    pub fn from_params(spec: ModelSpec, stored: Vec<Param>) -> Result<Model> {
        let template = Model::init(spec, 0)?;
        if stored.len() != template.params.len() {
            return Err(Error::Shape(format!(
                "{} stored tensors, spec needs {}",
                stored.len(),
                template.params.len()
            )));
        }
        for (have, want) in stored.iter().zip(&template.params) {
            if have.name != want.name {
                return Err(Error::Shape(format!(
                    "tensor '{}' where spec expects '{}'",
                    have.name, want.name
                )));
            }
            if have.value.shape() != want.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{}' has shape {:?}, spec expects {:?}",
                    have.name,
                    have.value.shape(),
                    want.value.shape()
                )));
            }
        }
        Ok(Model { spec: template.spec, params: stored })
    }

    /// Put every parameter on the tape; `trainable` marks them for gradients.
    pub fn param_leaves(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                let t = p.value.clone();
                tape.leaf(if trainable { t.with_grad() } else { t })
            })
            .collect()
    }

    /// Forward pass over a `[B, C, H, W]` input node, recording every
    /// post-activation hidden layer.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> Result<ForwardTrace> {
        self.forward_layers(tape, x, params, 0)
    }

    /// Re-run the network suffix from the output of the `Act` layer at
    /// `after_layer_idx`, e.g. with an overridden activation tensor.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        after_layer_idx: usize,
        h: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        match self.spec.layers.get(after_layer_idx) {
            Some(Layer::Act { .. }) => {}
            other => {
                return Err(Error::Config(format!(
                    "layer {after_layer_idx} is {other:?}, not an activation hook"
                )))
            }
        }
        Ok(self.forward_layers(tape, h, params, after_layer_idx + 1)?.logits)
    }

    fn forward_layers(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
        start_layer: usize,
    ) -> Result<ForwardTrace> {
        let mut cur = x;
        let mut hidden = Vec::new();
        let mut pi = self
            .spec
            .layers
            .iter()
            .take(start_layer)
            .filter(|l| matches!(l, Layer::Dense { .. } | Layer::Conv { .. }))
            .count()
            * 2;
        for (i, layer) in self.spec.layers.iter().enumerate().skip(start_layer) {
            cur = match layer {
                Layer::Dense { .. } => {
                    let y = tape.matmul(cur, params[pi])?;
                    let y = tape.add_row(y, params[pi + 1])?;
                    pi += 2;
                    y
                }
                Layer::Conv { stride, pad, .. } => {
                    let y = tape.conv2d(cur, params[pi], *stride, *pad)?;
                    let y = tape.add_chan(y, params[pi + 1])?;
                    pi += 2;
                    y
                }
                Layer::Act { f } => {
                    let y = tape.activation(cur, (*f).into());
                    hidden.push(HiddenActivation {
                        layer_idx: i,
                        node: y,
                        shape: tape.value(y).shape().to_vec(),
                    });
                    y
                }
                Layer::AvgPool { k } => tape.avg_pool2(cur, *k)?,
                Layer::Flatten => {
                    let s = tape.value(cur).shape().to_vec();
                    let flat: usize = s[1..].iter().product();
                    tape.reshape(cur, vec![s[0], flat])?
                }
            };
        }
        Ok(ForwardTrace { logits: cur, hidden })
    }

    /// Logits for a `[B, C, H, W]` batch on a throwaway tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let params = self.param_leaves(&mut tape, false);
        let trace = self.forward(&mut tape, xid, &params)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Argmax class predictions, evaluated in bounded chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let s = x.shape().to_vec();
        let batch = s[0];
        let d: usize = s[1..].iter().product();
        let chunk = 256usize;
        let mut out = Vec::with_capacity(batch);
        let mut start = 0;
        while start < batch {
            let end = (start + chunk).min(batch);
            let data = x.data()[start * d..end * d].to_vec();
            let mut shape = s.clone();
            shape[0] = end - start;
            let logits = self.logits(&Tensor::new(shape, data)?)?;
            let classes = logits.shape()[1];
            for b in 0..(end - start) {
                out.push(argmax(&logits.data()[b * classes..(b + 1) * classes]));
            }
            start = end;
        }
        Ok(out)
    }

    /// Indices of the spec's activation layers: the scan hooks.
    pub fn hidden_layer_indices(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Act { .. }).then_some(i))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Standalone Adam optimizer over a fixed set of flat parameter buffers;
/// used by the trigger-reversal and query-tuning loops.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    /// One update; `params[i]` and `grads[i]` must keep their construction
    /// order and sizes.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (w, &gi)) in p.data_mut().iter_mut().zip(g.iter()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gi;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamState {
    fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }
}

fn apply_gradients(
    params: &mut [Param],
    grads: &[Vec<f32>],
    cfg: &TrainConfig,
    adam: &mut AdamState,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, gi) in p.value.data_mut().iter_mut().zip(g) {
                    *w -= cfg.learning_rate * gi;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let bc1 = 1.0 - beta1.powi(adam.t);
            let bc2 = 1.0 - beta2.powi(adam.t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = &mut adam.m[i];
                let v = &mut adam.v[i];
                for (j, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.iter()).enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gi;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Core minibatch loop shared by `train` and the PGD weight attack; the
/// hook runs after every optimizer step.
pub(crate) fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut post_step: impl FnMut(&mut [Param]),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.num_classes != model.spec.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes, model.spec.num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    let take = ((cfg.proportion as f64 * data.len() as f64).round() as usize)
        .clamp(1, data.len());
    indices.truncate(take);

    let mut adam = AdamState::new(&model.params);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let pids = model.param_leaves(&mut tape, true);
            let trace = model.forward(&mut tape, xid, &pids)?;
            let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!(
                        "non-finite loss; last finite epoch: {:?}",
                        history.epochs.last().map(|e| e.epoch)
                    ),
                });
            }
            loss_sum += loss_val * labels.len() as f64;
            let logits = tape.value(trace.logits);
            let classes = model.spec.num_classes;
            for (b, &y) in labels.iter().enumerate() {
                if argmax(&logits.data()[b * classes..(b + 1) * classes]) == y {
                    correct += 1;
                }
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = pids
                .iter()
                .map(|&id| tape.grad(id).expect("trainable leaf").to_vec())
                .collect();
            apply_gradients(&mut model.params, &grads, cfg, &mut adam);
            post_step(&mut model.params);
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / indices.len() as f64,
            accuracy: correct as f64 / indices.len() as f64,
        });
    }
    Ok(history)
}

/// Train a fresh model. Deterministic in `(spec, data, cfg)`.
pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let history = fit(&mut model, data, cfg, |_| {})?;
    Ok((model, history))
}

/// Clean-data accuracy: fraction of clean test samples predicted correctly.
pub fn evaluate_cda(model: &Model, test: &Dataset) -> Result<f64> {
    let preds = model.predict(&test.images)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.labels.len() as f64)
}

/// Attack success rate under an arbitrary stamping function. Samples already
/// labeled as the target are excluded when `exclude_target` is set.
pub fn evaluate_asr_with(
    model: &Model,
    test: &Dataset,
    stamp: impl Fn(&Tensor) -> Tensor,
    target: usize,
    exclude_target: bool,
) -> Result<f64> {
    let (c, h, w) = test.image_dims();
    let mut stamped = Vec::new();
    let mut count = 0usize;
    for i in 0..test.len() {
        if exclude_target && test.labels[i] == target {
            continue;
        }
        stamped.extend_from_slice(stamp(&test.image(i)).data());
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("no samples left after target exclusion".into()));
    }
    let batch = Tensor::new(vec![count, c, h, w], stamped)?;
    let preds = model.predict(&batch)?;
    let hits = preds.iter().filter(|&&p| p == target).count();
    Ok(hits as f64 / count as f64)
}

/// Attack success rate of a concrete trigger.
pub fn evaluate_asr(
    model: &Model,
    test: &Dataset,
    trig: &TriggerSpec,
    exclude_target: bool,
) -> Result<f64> {
    if trig.target >= model.spec.num_classes {
        return Err(Error::Contract(format!(
            "trigger target {} out of {} classes",
            trig.target, model.spec.num_classes
        )));
    }
    evaluate_asr_with(
        model,
        test,
        |img| apply_trigger(img, trig).expect("trigger fits evaluated images"),
        trig.target,
        exclude_target,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_split, Provenance, Split};

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
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
    fn zoo_specs_validate() {
        for name in ["mlp2", "mlp4", "cnn43", "cnn8"] {
            ModelSpec::by_name(name, [1, 16, 16], 10).unwrap();
        }
        assert!(ModelSpec::by_name("vgg19", [1, 16, 16], 10).is_err());
    }

    #[test]
    fn spec_rejects_bad_composition() {
        let mut spec = ModelSpec::mlp2([1, 8, 8], 10, 16);
        spec.layers[1] = Layer::Dense { inp: 63, out: 16 };
        assert!(spec.validate().is_err());

        let spec = ModelSpec {
            input_shape: [1, 8, 8],
            num_classes: 10,
            layers: vec![Layer::Flatten, Layer::Dense { inp: 64, out: 5 }],
            depth_tag: "bad".into(),
        };
        assert!(spec.validate().is_err()); // final width 5 != 10
    }

    #[test]
    fn mlp_reaches_95_percent_on_synth_binary() {
        let (train_set, test_set) = synth_split(400, 200, 2, 16, 1);
        let spec = ModelSpec::mlp2([1, 16, 16], 2, 32);
        let (model, history) = train(&spec, &train_set, &quick_cfg(5, 1)).unwrap();
        let cda = evaluate_cda(&model, &test_set).unwrap();
        assert!(cda >= 0.95, "binary synth CDA {cda}");
        assert!(history.epochs.len() == 5);
    }

    #[test]
    fn train_rejects_zero_epochs() {
        let data = crate::datasets::synth_binary(16, 0);
        let spec = ModelSpec::mlp2([1, 16, 16], 2, 8);
        let err = train(&spec, &data, &quick_cfg(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn training_is_deterministic() {
        let data = crate::datasets::synth_binary(64, 2);
        let spec = ModelSpec::mlp2([1, 16, 16], 2, 16);
        let (m1, h1) = train(&spec, &data, &quick_cfg(3, 7)).unwrap();
        let (m2, h2) = train(&spec, &data, &quick_cfg(3, 7)).unwrap();
        for (a, b) in m1.params.iter().zip(&m2.params) {
            assert_eq!(a.value, b.value, "param {} differs", a.name);
        }
        assert_eq!(h1.epochs.last().unwrap().loss, h2.epochs.last().unwrap().loss);
    }

    #[test]
    fn divergence_reports_training_error() {
        let data = crate::datasets::synth_binary(64, 3);
        let spec = ModelSpec::mlp2([1, 16, 16], 2, 16);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e30,
            optimizer: Optimizer::Sgd,
            proportion: 1.0,
            seed: 0,
        };
        match train(&spec, &data, &cfg) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn constant_model_scores_chance_cda() {
        // zero weights -> equal logits -> argmax is class 0 everywhere
        let spec = ModelSpec::mlp2([1, 8, 8], 10, 8);
        let mut model = Model::init(spec, 0).unwrap();
        for p in &mut model.params {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let data = crate::datasets::synth_classes(200, 10, 8, 4);
        let cda = evaluate_cda(&model, &data).unwrap();
        assert!((cda - 0.1).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let data = crate::datasets::synth_classes(100, 2, 8, 5);
        let spec = ModelSpec::mlp2([1, 8, 8], 2, 16);
        let (model, _) = train(
            &spec,
            &data,
            &TrainConfig { epochs: 10, ..quick_cfg(10, 5) },
        )
        .unwrap();
        // relabel with the model's own predictions: a perfect lookup
        let preds = model.predict(&data.images).unwrap();
        let relabeled = Dataset::new(
            data.images.clone(),
            preds,
            2,
            Split::Test,
            Provenance::Custom,
        )
        .unwrap();
        assert_eq!(evaluate_cda(&model, &relabeled).unwrap(), 1.0);
    }

    #[test]
    fn cda_matches_manual_argmax_count() {
        let (train_set, test_set) = synth_split(200, 80, 4, 8, 6);
        let spec = ModelSpec::mlp2([1, 8, 8], 4, 16);
        let (model, _) = train(&spec, &train_set, &quick_cfg(4, 6)).unwrap();
        let cda = evaluate_cda(&model, &test_set).unwrap();

        let logits = model.logits(&test_set.images).unwrap();
        let mut manual = 0usize;
        for (b, &y) in test_set.labels.iter().enumerate() {
            let row = &logits.data()[b * 4..(b + 1) * 4];
            if argmax(row) == y {
                manual += 1;
            }
        }
        assert_eq!(cda, manual as f64 / test_set.len() as f64);
    }

    #[test]
    fn forward_from_matches_full_forward() {
        let data = crate::datasets::synth_classes(8, 2, 8, 8);
        let spec = ModelSpec::mlp2([1, 8, 8], 2, 16);
        let model = Model::init(spec, 3).unwrap();
        let (x, _) = data.batch(&[0, 1, 2]);

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let params = model.param_leaves(&mut tape, false);
        let trace = model.forward(&mut tape, xid, &params).unwrap();
        let full_logits = tape.value(trace.logits).clone();
        let hidden = trace.hidden[0].clone();
        let h_val = tape.value(hidden.node).clone();

        let mut tape2 = Tape::new();
        let hid = tape2.leaf(h_val);
        let params2 = model.param_leaves(&mut tape2, false);
        let logits2 = model
            .forward_from(&mut tape2, hidden.layer_idx, hid, &params2)
            .unwrap();
        assert_eq!(tape2.value(logits2).data(), full_logits.data());
    }
}
