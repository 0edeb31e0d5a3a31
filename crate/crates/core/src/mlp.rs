//! A small dense feed-forward network trained with Adam on an MAE + L2 loss.
//!
//! Everything runs on `f64` in a fixed order, so a seed and a dataset
//! determine the trained weights bit for bit.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::harmonic::{wrap_angle, CostModel, CostWeights, PhaseShiftVector, SystemConfig};
use crate::optimizer::{canonicalize_shifts, local_refine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub output_width: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl LayerSpec {
    pub const PAPER_HIDDEN: [usize; 5] = [729, 243, 81, 27, 9];

    /// `N` inputs, `N - 1` outputs, tanh hidden layers and a linear output.
    pub fn for_modules(module_count: usize, hidden_widths: Vec<usize>) -> Self {
        LayerSpec {
            input_width: module_count,
            hidden_widths,
            output_width: module_count.saturating_sub(1),
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::domain(format!("every layer width must be at least 1: {self:?}")));
        }
        Ok(())
    }

    /// Input, hidden and output widths in order.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.hidden_widths);
        w.push(self.output_width);
        w
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_widths.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// One dense layer; `weights` is row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(
            |(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b,
        ));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: LayerSpec,
    pub layers: Vec<Layer>,
    pub seed: u64,
    /// Set by [`train`]: digest of the dataset fingerprint and the training
    /// configuration.
    pub training_fingerprint: Option<String>,
}

/// Glorot-uniform weights and zero biases.
pub fn init_model(spec: &LayerSpec, seed: u64) -> Result<MlpModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = spec.widths();
    let layers = widths
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, fan_out);
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
            layer
        })
        .collect();
    Ok(MlpModel {
        spec: spec.clone(),
        layers,
        seed,
        training_fingerprint: None,
    })
}

impl MlpModel {
    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm_sqr(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::contract(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        let mut x = input.to_vec();
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&x, &mut z);
            let act = self.spec.activation(i);
            x.clear();
            x.extend(z.iter().map(|&v| act.apply(v)));
        }
        Ok(x)
    }

    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.forward(x)).collect()
    }

    /// Activations of every layer, input first.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(acts.last().expect("input pushed above"), &mut z);
            let act = self.spec.activation(i);
            acts.push(z.iter().map(|&v| act.apply(v)).collect());
        }
        acts
    }

    fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        let widths = self.spec.widths();
        if self.layers.len() + 1 != widths.len() {
            return Err(Error::contract(format!(
                "model has {} layers, spec describes {}",
                self.layers.len(),
                widths.len() - 1
            )));
        }
        for (i, (layer, pair)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.inputs != pair[0]
                || layer.outputs != pair[1]
                || layer.weights.len() != pair[0] * pair[1]
                || layer.biases.len() != pair[1]
            {
                return Err(Error::contract(format!(
                    "layer {i} does not have shape {}x{}",
                    pair[1], pair[0]
                )));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("layer {i} holds non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Fails unless the network maps `N` inputs to `N - 1` outputs.
    pub fn check_module_count(&self, module_count: usize) -> Result<()> {
        if self.input_width() != module_count || self.output_width() + 1 != module_count {
            return Err(Error::contract(format!(
                "model maps {} inputs to {} outputs, a {module_count}-module string needs {module_count} -> {}",
                self.input_width(),
                self.output_width(),
                module_count.saturating_sub(1)
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: MlpModel = serde_json::from_str(text)?;
        model.check_shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MlpModel::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mean absolute error over every element.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

pub fn l2_penalty(model: &MlpModel, lambda: f64) -> f64 {
    lambda * model.weight_norm_sqr()
}

/// Parameter gradient with the same layout as [`MlpModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    fn zeros_like(model: &MlpModel) -> Self {
        Gradient {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }
}

/// Batch loss `mean |f(x) - y| + lambda * sum(w^2)` and its gradient.
///
/// The MAE is averaged over samples and outputs; its subgradient at an exact
/// hit is taken as 0.
pub fn loss_and_gradient(
    model: &MlpModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    lambda: f64,
) -> Result<(f64, Gradient)> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::contract(format!(
            "need matching non-empty batches, got {} inputs and {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let scale = 1.0 / (inputs.len() * model.output_width()) as f64;
    let mut grad = Gradient::zeros_like(model);
    let mut abs_sum = 0.0;
    let mut delta = Vec::new();
    let mut below = Vec::new();
    for (x, y) in inputs.iter().zip(targets) {
        if x.len() != model.input_width() || y.len() != model.output_width() {
            return Err(Error::contract("sample width does not match the network"));
        }
        let acts = model.activations(x);
        let out = acts.last().expect("at least one layer");
        let last = model.layers.len() - 1;
        let out_act = model.spec.activation(last);
        delta.clear();
        for ((p, t), a) in out.iter().zip(y).zip(out) {
            let diff = p - t;
            abs_sum += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            delta.push(sign * scale * out_act.slope(*a));
        }
        for l in (0..=last).rev() {
            let layer = &model.layers[l];
            let input = &acts[l];
            let g = &mut grad.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if l > 0 {
                let act = model.spec.activation(l - 1);
                below.clear();
                below.resize(layer.inputs, 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, &w) in below.iter_mut().zip(row) {
                        *b += d * w;
                    }
                }
                for (b, &a) in below.iter_mut().zip(input) {
                    *b *= act.slope(a);
                }
                std::mem::swap(&mut delta, &mut below);
            }
        }
    }
    for (g, layer) in grad.layers.iter_mut().zip(&model.layers) {
        for (gw, w) in g.weights.iter_mut().zip(&layer.weights) {
            *gw += 2.0 * lambda * w;
        }
    }
    let loss = abs_sum * scale + l2_penalty(model, lambda);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Fraction of the training split held out for early stopping.
    pub validation_split: f64,
    pub validation_every_iterations: usize,
    pub patience_epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2_lambda: 1e-4,
            batch_size: 512,
            max_epochs: 2000,
            validation_split: 0.05,
            validation_every_iterations: 500,
            patience_epochs: 50,
            lr_decay_factor: 0.5,
            lr_decay_every_epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rng_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0, "learning rate must be positive"),
            (self.l2_lambda >= 0.0, "L2 lambda must be non-negative"),
            (self.batch_size >= 1, "batch size must be at least 1"),
            (self.max_epochs >= 1, "max epochs must be at least 1"),
            (
                self.validation_split > 0.0 && self.validation_split < 1.0,
                "validation split must lie in (0, 1)",
            ),
            (self.validation_every_iterations >= 1, "validation interval must be at least 1"),
            (self.patience_epochs >= 1, "patience must be at least 1"),
            (
                self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0,
                "decay factor must lie in (0, 1]",
            ),
            (self.lr_decay_every_epochs >= 1, "decay interval must be at least 1"),
            ((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::domain(*msg)),
            None => Ok(()),
        }
    }

    /// Learning rate in force during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.saturating_sub(1) / self.lr_decay_every_epochs) as i32;
        self.learning_rate * self.lr_decay_factor.powi(drops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean batch loss (MAE + L2) per epoch.
    pub train_loss_curve: Vec<f64>,
    /// Lowest validation MAE seen at the checkpoints of each epoch. Without
    /// a validation set this is the training MAE at the end of the epoch.
    pub validation_loss_curve: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// MAE on the test split, when there is one.
    pub final_test_mae: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for (i, (t, v)) in self
            .train_loss_curve
            .iter()
            .zip(&self.validation_loss_curve)
            .enumerate()
        {
            out.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        out
    }
}

struct Adam {
    first: Vec<Layer>,
    second: Vec<Layer>,
    steps: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zeros = Gradient::zeros_like(model).layers;
        Adam {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grad: &Gradient, lr: f64, cfg: &TrainConfig) {
        self.steps += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.steps);
        let c2 = 1.0 - cfg.beta2.powi(self.steps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        };
        for (((layer, g), m), v) in model
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..layer.weights.len() {
                update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
            }
            for i in 0..layer.biases.len() {
                update(&mut layer.biases[i], g.biases[i], &mut m.biases[i], &mut v.biases[i]);
            }
        }
    }
}

fn dataset_mae(model: &MlpModel, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, y)| mae_loss(&model.forward(x).expect("widths checked"), y))
        .sum();
    total / inputs.len() as f64
}

/// Network inputs (canonical modulation vectors) and targets (free label
/// angles) of one split.
pub fn split_arrays(dataset: &Dataset, split: Split) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    dataset
        .split(split)
        .map(|s| {
            (
                s.m_canonical.values().to_vec(),
                s.label_shifts.free_angles().to_vec(),
            )
        })
        .unzip()
}

/// Trains on the dataset's train split and reports the MAE on its test split.
pub fn train(model: &MlpModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    model.check_module_count(dataset.module_count)?;
    let (inputs, targets) = split_arrays(dataset, Split::Train);
    if inputs.is_empty() {
        return Err(Error::Training("the dataset has no training samples".into()));
    }
    let (mut trained, mut report) = train_arrays(model, &inputs, &targets, cfg)?;
    let (test_in, test_out) = split_arrays(dataset, Split::Test);
    if !test_in.is_empty() {
        report.final_test_mae = Some(dataset_mae(&trained, &test_in, &test_out));
    }
    trained.training_fingerprint = Some(crate::digest(&(&dataset.config_fingerprint, cfg)));
    Ok((trained, report))
}

/// Settings for [`train_relabelled`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    /// Relabelling passes; the network is trained `rounds + 1` times.
    pub rounds: usize,
    /// A replacement label may cost at most this fraction more than the
    /// cheapest shifts known for its sample.
    pub cost_tolerance: f64,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig {
            rounds: 7,
            cost_tolerance: 0.01,
            initial_step: 0.05,
            min_step: 1e-4,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_tolerance >= 0.0) {
            return Err(Error::domain("cost tolerance must be non-negative"));
        }
        if !(self.initial_step > 0.0 && self.min_step > 0.0) {
            return Err(Error::domain("refinement steps must be positive"));
        }
        Ok(())
    }
}

/// Alternates training with relabelling of the training split.
///
/// A modulation vector often has several shift patterns of nearly equal
/// cost, and the GA picks among them more or less at random, so neighbouring
/// samples can carry labels that are far apart. After each training pass
/// every training label is replaced by the network's own prediction,
/// locally refined, when that costs at most `cost_tolerance` more than the
/// cheapest shifts seen for the sample. Otherwise the label moves towards
/// the prediction as far as the tolerance allows. Test labels are left
/// alone. Returns the last network, its report and the relabelled dataset.
pub fn train_relabelled(
    model: &MlpModel,
    dataset: &Dataset,
    system: &SystemConfig,
    weights: &CostWeights,
    cfg: &TrainConfig,
    relabel: &RelabelConfig,
) -> Result<(MlpModel, TrainReport, Dataset)> {
    relabel.validate()?;
    if system.module_count != dataset.module_count {
        return Err(Error::contract(format!(
            "system has {} modules, dataset {}",
            system.module_count, dataset.module_count
        )));
    }
    let mut data = dataset.clone();
    let models = data
        .samples
        .iter()
        .map(|s| CostModel::new(system, &s.m_canonical, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut cheapest: Vec<f64> = data
        .samples
        .iter()
        .zip(&models)
        .map(|(s, m)| m.evaluate(s.label_shifts.angles()).total)
        .collect();
    let fingerprint = crate::digest(&(&dataset.config_fingerprint, cfg, relabel));
    for round in 0..=relabel.rounds {
        let (mut trained, report) = train(model, &data, cfg)?;
        if round == relabel.rounds {
            trained.training_fingerprint = Some(fingerprint);
            return Ok((trained, report, data));
        }
        for ((sample, cost_model), best) in data.samples.iter_mut().zip(&models).zip(&mut cheapest) {
            if sample.split != Split::Train {
                continue;
            }
            let predicted: Vec<f64> = trained
                .forward(sample.m_canonical.values())?
                .into_iter()
                .map(wrap_angle)
                .collect();
            let (refined, cost) =
                local_refine(cost_model, &predicted, relabel.initial_step, relabel.min_step)?;
            *best = best.min(cost.total);
            let limit = *best * (1.0 + relabel.cost_tolerance);
            let free = if cost.total <= limit {
                refined
            } else {
                toward(cost_model, sample.label_shifts.free_angles(), &predicted, limit)
            };
            sample.label_shifts = canonicalize_shifts(&PhaseShiftVector::anchored(&free)?);
            sample.label_cost = cost_model.evaluate(sample.label_shifts.angles());
        }
    }
    unreachable!("the last round returns")
}

/// Furthest point on the short arc from `from` to `to` whose cost stays
/// within `limit`, by bisection.
fn toward(model: &CostModel, from: &[f64], to: &[f64], limit: f64) -> Vec<f64> {
    let delta: Vec<f64> = from
        .iter()
        .zip(to)
        .map(|(a, b)| {
            let d = wrap_angle(b - a);
            if d > PI {
                d - TAU
            } else {
                d
            }
        })
        .collect();
    let at = |t: f64| -> Vec<f64> {
        from.iter().zip(&delta).map(|(a, d)| wrap_angle(a + t * d)).collect()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if model.evaluate_free(&at(mid)).total <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

/// Trains on raw arrays. `floor(validation_split * len)` samples are held
/// out; when that is zero the training MAE drives early stopping instead.
pub fn train_arrays(
    model: &MlpModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    model.check_shapes()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Training(format!(
            "need matching non-empty inputs and targets, got {} and {}",
            inputs.len(),
            targets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let held = (inputs.len() as f64 * cfg.validation_split).floor() as usize;
    let held = held.min(inputs.len() - 1);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        idx.iter().map(|&i| (inputs[i].clone(), targets[i].clone())).unzip()
    };
    let (val_in, val_out) = pick(&order[..held]);
    let (train_in, train_out) = pick(&order[held..]);
    let monitor = |m: &MlpModel| {
        if held > 0 {
            dataset_mae(m, &val_in, &val_out)
        } else {
            dataset_mae(m, &train_in, &train_out)
        }
    };

    let mut current = model.clone();
    let mut adam = Adam::new(&current);
    let mut best = current.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut iterations = 0usize;
    let mut indices: Vec<usize> = (0..train_in.len()).collect();
    let mut batch_in = Vec::with_capacity(cfg.batch_size);
    let mut batch_out = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.learning_rate_at(epoch);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut epoch_best = f64::INFINITY;
        for chunk in indices.chunks(cfg.batch_size) {
            batch_in.clear();
            batch_out.clear();
            batch_in.extend(chunk.iter().map(|&i| train_in[i].clone()));
            batch_out.extend(chunk.iter().map(|&i| train_out[i].clone()));
            let (loss, grad) = loss_and_gradient(&current, &batch_in, &batch_out, cfg.l2_lambda)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} at epoch {epoch}, iteration {}; try a smaller learning rate",
                    iterations + 1
                )));
            }
            adam.step(&mut current, &grad, lr, cfg);
            epoch_loss += loss;
            batches += 1;
            iterations += 1;
            if iterations % cfg.validation_every_iterations == 0 {
                let v = monitor(&current);
                epoch_best = epoch_best.min(v);
                if v < best_loss {
                    best_loss = v;
                    best = current.clone();
                    best_epoch = epoch;
                }
            }
        }
        let v = monitor(&current);
        if !v.is_finite() {
            return Err(Error::Training(format!("validation loss became {v} at epoch {epoch}")));
        }
        epoch_best = epoch_best.min(v);
        if v < best_loss {
            best_loss = v;
            best = current.clone();
            best_epoch = epoch;
        }
        train_curve.push(epoch_loss / batches as f64);
        val_curve.push(epoch_best);
        if epoch - best_epoch >= cfg.patience_epochs {
            break;
        }
    }
    best.training_fingerprint = None;
    Ok((
        best,
        TrainReport {
            epochs_run: train_curve.len(),
            train_loss_curve: train_curve,
            validation_loss_curve: val_curve,
            best_epoch,
            final_test_mae: None,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(widths: &[usize], seed: u64) -> MlpModel {
        let spec = LayerSpec {
            input_width: widths[0],
            hidden_widths: widths[1..widths.len() - 1].to_vec(),
            output_width: widths[widths.len() - 1],
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Linear,
        };
        init_model(&spec, seed).unwrap()
    }

    #[test]
    fn init_is_seeded_and_glorot_bounded() {
        let a = toy(&[4, 8, 3], 1);
        assert_eq!(a, toy(&[4, 8, 3], 1));
        assert_ne!(a, toy(&[4, 8, 3], 2));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() < limit));
        assert!(a.layers.iter().flat_map(|l| &l.biases).all(|&b| b == 0.0));
        assert_eq!(a.forward(&[0.0; 4]).unwrap(), vec![0.0; 3]);
        assert_eq!(a.parameter_count(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn hand_set_network_is_tanh() {
        let mut m = toy(&[1, 1, 1], 0);
        for l in &mut m.layers {
            l.weights = vec![1.0];
            l.biases = vec![0.0];
        }
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert_eq!(m.forward(&[x]).unwrap(), vec![f64::tanh(x)]);
        }
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_forward_matches_single() {
        let m = toy(&[3, 5, 4, 2], 9);
        let xs = vec![vec![0.1, 0.2, 0.3], vec![1.0, 0.0, 0.5]];
        let batch = m.forward_batch(&xs).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            assert_eq!(&m.forward(x).unwrap(), y);
        }
    }

    #[test]
    fn mae_values() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mae_loss(&[0.0], &[2.0]), 2.0);
        let m = toy(&[2, 2], 0);
        assert_eq!(l2_penalty(&m, 0.5), 0.5 * m.weight_norm_sqr());
    }

    #[test]
    fn exact_hits_contribute_zero_gradient() {
        let m = toy(&[2, 3, 1], 4);
        let x = vec![vec![0.3, 0.6]];
        let y = vec![m.forward(&x[0]).unwrap()];
        let (loss, grad) = loss_and_gradient(&m, &x, &y, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases)).all(|&g| g == 0.0));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(1), 1e-3);
        assert_eq!(cfg.learning_rate_at(500), 1e-3);
        assert_eq!(cfg.learning_rate_at(501), 5e-4);
        assert_eq!(cfg.learning_rate_at(1001), 2.5e-4);
        assert!(TrainConfig { validation_split: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_shape_checks() {
        let m = toy(&[4, 6, 3], 5);
        let text = m.to_json().unwrap();
        let back = MlpModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert!(back.check_module_count(4).is_ok());
        assert!(matches!(back.check_module_count(5), Err(Error::Contract(_))));
        assert!(matches!(MlpModel::from_json(&text[..text.len() / 2]), Err(Error::Json(_))));
        let mut broken = m.clone();
        broken.layers[1].biases.pop();
        let text = serde_json::to_string(&broken).unwrap();
        assert!(matches!(MlpModel::from_json(&text), Err(Error::Contract(_))));
    }

    #[test]
    fn early_stopping_bookkeeping() {
        let m = toy(&[2, 4, 1], 3);
        let xs: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64 / 60.0, 1.0 - i as f64 / 60.0]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * 2.0]).collect();
        let cfg = TrainConfig {
            max_epochs: 300,
            patience_epochs: 5,
            batch_size: 8,
            validation_split: 0.2,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (_, report) = train_arrays(&m, &xs, &ys, &cfg).unwrap();
        assert!(report.best_epoch >= 1 && report.best_epoch <= report.epochs_run);
        assert!(report.epochs_run <= report.best_epoch + cfg.patience_epochs + 1);
        assert_eq!(report.train_loss_curve.len(), report.epochs_run);
        assert_eq!(report.validation_loss_curve.len(), report.epochs_run);
        assert!(report.validation_loss_curve[report.best_epoch - 1] <= report.validation_loss_curve[0]);
    }

    #[test]
    fn diverging_training_reports_failure() {
        let m = toy(&[1, 1], 0);
        let cfg = TrainConfig { learning_rate: 1e300, max_epochs: 5, ..Default::default() };
        let xs = vec![vec![1e200]; 4];
        let ys = vec![vec![0.0]; 4];
        assert!(matches!(train_arrays(&m, &xs, &ys, &cfg), Err(Error::Training(_))));
    }

    fn small_dataset() -> (SystemConfig, CostWeights, Dataset) {
        let cfg = SystemConfig::new(3);
        let w = CostWeights::default();
        let vectors = crate::dataset::distinct_vectors(3, 24, 0.05, 0.01, 5, false).unwrap();
        let ga = crate::optimizer::GaConfig {
            population_size: 20,
            max_generations: 40,
            ..Default::default()
        };
        let (ds, _) = crate::dataset::label_dataset(&cfg, &vectors, &w, &ga, None, 5).unwrap();
        (cfg, w, ds)
    }

    #[test]
    fn relabelling_keeps_labels_canonical_and_cheap() {
        let (cfg, w, ds) = small_dataset();
        let model = toy(&[3, 8, 2], 3);
        let train_cfg = TrainConfig {
            max_epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            ..Default::default()
        };
        let relabel = RelabelConfig {
            rounds: 2,
            ..Default::default()
        };
        let (trained, report, out) = train_relabelled(&model, &ds, &cfg, &w, &train_cfg, &relabel).unwrap();
        assert!(report.epochs_run >= 1);
        assert!(trained.training_fingerprint.is_some());
        assert_eq!(out.samples.len(), ds.samples.len());
        for (before, after) in ds.samples.iter().zip(&out.samples) {
            assert_eq!(before.m_canonical, after.m_canonical);
            if before.split == Split::Test {
                assert_eq!(before.label_shifts, after.label_shifts);
                continue;
            }
            let label = &after.label_shifts;
            assert_eq!(canonicalize_shifts(label), *label);
            let model = CostModel::new(&cfg, &after.m_canonical, &w).unwrap();
            let cost = model.evaluate(label.angles()).total;
            assert!((cost - after.label_cost.total).abs() < 1e-12);
            assert!(cost <= before.label_cost.total * (1.0 + relabel.cost_tolerance) + 1e-12);
        }
        let again = train_relabelled(&model, &ds, &cfg, &w, &train_cfg, &relabel).unwrap();
        assert_eq!(again.0, trained);
        assert_eq!(again.2, out);
    }

    #[test]
    fn zero_rounds_is_plain_training() {
        let (cfg, w, ds) = small_dataset();
        let model = toy(&[3, 4, 2], 1);
        let train_cfg = TrainConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let relabel = RelabelConfig {
            rounds: 0,
            ..Default::default()
        };
        let (a, ra, out) = train_relabelled(&model, &ds, &cfg, &w, &train_cfg, &relabel).unwrap();
        let (b, rb) = train(&model, &ds, &train_cfg).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(ra, rb);
        assert_eq!(out, ds);
        assert!(train_relabelled(&model, &ds, &SystemConfig::new(4), &w, &train_cfg, &relabel).is_err());
        let bad = RelabelConfig {
            cost_tolerance: -1.0,
            ..Default::default()
        };
        assert!(train_relabelled(&model, &ds, &cfg, &w, &train_cfg, &bad).is_err());
    }
}
