//! Small MNIST-scale classifiers: three convolutions and two dense layers.
//!
//! * Vector: `conv_t_h`, two `conv_h_h`, then one scale projection.
//! * Scalar: every convolution is a `conv_t_h` immediately followed by a scale
//!   projection, so each layer sees scalar inputs.
//! * Cnn: plain 2D convolutions, the control.
//!
//! All variants apply ReLU after every convolution, optional 2x2 max pooling
//! after the convolutions listed in `pool_after`, global spatial max pooling,
//! then `dense(hidden) -> ReLU -> dense(classes)`.

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::layers::{conv_h_h, conv_t_h, LayerVars};
use crate::autodiff::optim::{Adam, Optimizer, StepDecay};
use crate::autodiff::{Tape, Var};
use crate::basis::{BasisSpec, SteerableBasis};
use crate::checkpoint::{Container, TensorData};
use crate::config::RunConfig;
use crate::conv::{ChannelLayout, Padding};
use crate::data::{ScaledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vector,
    Scalar,
    Cnn,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Variant::Vector),
            "scalar" => Ok(Variant::Scalar),
            "cnn" => Ok(Variant::Cnn),
            _ => Err(Error::invalid(format!("unknown variant `{s}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vector => "vector",
            Variant::Scalar => "scalar",
            Variant::Cnn => "cnn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    pub in_channels: usize,
    /// 1-based indices of the convolutions followed by 2x2 max pooling.
    pub pool_after: Vec<usize>,
    /// Filter size, levels and base; a CNN only uses the filter size.
    pub basis: BasisSpec,
    /// Interscale interaction of the vector variant's `conv_h_h` layers.
    pub interaction: usize,
    pub padding: Padding,
}

impl ClassifierConfig {
    /// Classifier described by a run configuration. A CNN whose
    /// `cnn_widths` are all zero gets widths matching the parameter count of
    /// the vector model with the same settings.
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        let mut cfg = ClassifierConfig {
            variant: run.raw("variant").parse()?,
            widths: run.list("widths"),
            hidden: run.usize("hidden"),
            classes: 10,
            in_channels: 1,
            pool_after: run.list("pool_after"),
            basis: run.basis_spec()?,
            interaction: run.usize("k_s"),
            padding: run.padding("padding_mode"),
        };
        if cfg.variant == Variant::Cnn {
            let explicit = run.list("cnn_widths");
            if explicit.iter().all(|&w| w == 0) {
                let target = ClassifierConfig { variant: Variant::Vector, ..cfg.clone() };
                cfg.widths = matched_cnn_widths(&target)?;
            } else {
                cfg.widths = explicit;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 || self.widths.contains(&0) {
            return Err(Error::invalid(format!("need three non-zero widths, got {:?}", self.widths)));
        }
        if self.hidden == 0 || self.classes < 2 || self.in_channels == 0 {
            return Err(Error::invalid("hidden width, class count and input channels must be positive"));
        }
        if self.pool_after.iter().any(|&p| p == 0 || p > 3) {
            return Err(Error::invalid(format!("pool_after entries must be in 1..=3, got {:?}", self.pool_after)));
        }
        self.basis.validate()?;
        let levels = self.basis.scale_grid.num_levels();
        if self.interaction == 0 || self.interaction > levels {
            return Err(Error::invalid(format!("k_s = {} needs 1..={levels}", self.interaction)));
        }
        if self.interaction != 1 && self.variant != Variant::Vector {
            return Err(Error::invalid("interscale interaction needs the vector variant"));
        }
        Ok(())
    }

    fn conv_shape(&self, layer: usize) -> Vec<usize> {
        let c_in = if layer == 0 { self.in_channels } else { self.widths[layer - 1] };
        let c_out = self.widths[layer];
        let v = self.basis.filter_size;
        match self.variant {
            Variant::Cnn => vec![c_out, c_in, v, v],
            Variant::Scalar => vec![c_out, c_in, 1, self.basis.num_functions],
            Variant::Vector => {
                let k = if layer == 0 { 1 } else { self.interaction };
                vec![c_out, c_in, k, self.basis.num_functions]
            }
        }
    }

    /// Names and shapes of all trainable tensors, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..3 {
            out.push((format!("layer{}.w", l + 1), self.conv_shape(l)));
            out.push((format!("layer{}.bias", l + 1), vec![self.widths[l]]));
        }
        out.push(("fc1.w".into(), vec![self.hidden, self.widths[2]]));
        out.push(("fc1.bias".into(), vec![self.hidden]));
        out.push(("fc2.w".into(), vec![self.classes, self.hidden]));
        out.push(("fc2.bias".into(), vec![self.classes]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Scale convolutions, scale projections and dense layers.
    pub fn layer_counts(&self) -> (usize, usize, usize) {
        match self.variant {
            Variant::Vector => (3, 1, 2),
            Variant::Scalar => (3, 3, 2),
            Variant::Cnn => (0, 0, 2),
        }
    }
}

/// Widths `round(c * w)` for the scalar factor `c` whose CNN parameter count
/// is closest to `target`'s.
pub fn matched_cnn_widths(target: &ClassifierConfig) -> Result<Vec<usize>> {
    let goal = target.num_parameters() as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 1..=4000 {
        let c = step as f64 * 1e-3;
        let widths: Vec<usize> = target.widths.iter().map(|&w| ((w as f64 * c).round() as usize).max(1)).collect();
        let cand = ClassifierConfig { variant: Variant::Cnn, widths: widths.clone(), interaction: 1, ..target.clone() };
        let gap = (cand.num_parameters() as f64 - goal).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, widths));
        }
    }
    Ok(best.expect("non-empty search").1)
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    cfg: ClassifierConfig,
    basis: Option<Arc<Tensor<T>>>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Classifier<T> {
    /// Uniform initialization: `±(fan_in)^(-1/2)` with fan-in `C_in * N_b`
    /// for scale convolutions (times `K_S`), `C_in * V^2` for plain ones and
    /// the input width for dense layers. Biases start at zero.
    pub fn new(cfg: ClassifierConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let basis = match cfg.variant {
            Variant::Cnn => None,
            _ => Some(Arc::new(SteerableBasis::build(cfg.basis.clone())?.cast())),
        };
        let params = cfg
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (fan_in as f64).powf(-0.5);
                    Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                };
                (name, value)
            })
            .collect();
        Ok(Classifier { cfg, basis, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape` as a leaf, in parameter order.
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, layer: usize, vars: &[Var]) -> Result<Var> {
        let lv = LayerVars { w: vars[2 * layer], bias: Some(vars[2 * layer + 1]) };
        let pad = self.cfg.padding;
        match (self.cfg.variant, &self.basis) {
            (Variant::Cnn, _) => {
                let mut shape = vec![1];
                shape.extend_from_slice(tape.shape(lv.w));
                let k = tape.reshape(lv.w, &shape)?;
                let y = tape.conv(x, k, ChannelLayout::Blocked, pad)?;
                tape.channel_bias(y, lv.bias.unwrap())
            }
            (Variant::Vector, Some(b)) if layer > 0 => conv_h_h(tape, x, lv, b, pad),
            (_, Some(b)) => conv_t_h(tape, x, lv, b, pad),
            _ => unreachable!("scale variants carry a basis"),
        }
    }

    /// Output of the first convolution, before any nonlinearity:
    /// `[N, C, S, U, U]` for scale variants, `[N, C, U, U]` for the CNN.
    pub fn first_layer(&self, tape: &mut Tape<T>, x: Var, vars: &[Var]) -> Result<Var> {
        self.conv(tape, x, 0, vars)
    }

    /// Logits from the output of [`Classifier::first_layer`].
    pub fn from_first_layer(&self, tape: &mut Tape<T>, first: Var, vars: &[Var]) -> Result<Var> {
        let mut h = first;
        for layer in 0..3 {
            if layer > 0 {
                h = self.conv(tape, h, layer, vars)?;
            }
            if self.cfg.variant == Variant::Scalar || (self.cfg.variant == Variant::Vector && layer == 2) {
                h = tape.max_over_axis(h, 2)?;
            }
            h = tape.relu(h);
            if self.cfg.pool_after.contains(&(layer + 1)) {
                h = tape.max_pool2d(h, 2)?;
            }
        }
        let pooled = tape.global_max_spatial(h)?;
        let z = tape.linear(pooled, vars[6], Some(vars[7]))?;
        let z = tape.relu(z);
        tape.linear(z, vars[8], Some(vars[9]))
    }

    /// Records the forward pass of a batch `[N, C, R, R]`; returns the
    /// parameter handles and the logits.
    pub fn forward(&self, tape: &mut Tape<T>, x: Tensor<T>) -> Result<(Vec<Var>, Var)> {
        let vars = self.leaves(tape);
        let x = tape.constant(x);
        let first = self.first_layer(tape, x, &vars)?;
        let logits = self.from_first_layer(tape, first, &vars)?;
        Ok((vars, logits))
    }

    pub fn logits(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss and gradients for one batch, in parameter order.
    pub fn loss_and_grads(&self, x: Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<Tensor<T>>, Tensor<T>)> {
        let mut tape = Tape::new();
        let (vars, logits) = self.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item().to_f64_lossy();
        let logits = tape.value(logits).clone();
        let mut grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.take(v)).collect(), logits))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn to_container(&self, run: &RunConfig) -> Result<Container> {
        let mut c = Container::new();
        c.insert_text("run_config", &run.to_text())?;
        for (name, t) in &self.params {
            let data = match T::NAME {
                "f32" => TensorData::F32(t.cast()),
                _ => TensorData::F64(t.cast()),
            };
            c.insert(name, data)?;
        }
        Ok(c)
    }

    /// Rebuilds a classifier from a checkpoint; returns it with the run
    /// configuration it was trained with.
    pub fn from_container(c: &Container) -> Result<(Self, RunConfig)> {
        let run = RunConfig::parse(&c.text("run_config")?)?;
        let cfg = ClassifierConfig::from_run(&run)?;
        let mut model = Classifier::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in model.params.iter_mut() {
            let loaded: Tensor<T> = match c.get(name) {
                Some(TensorData::F32(v)) => v.cast(),
                Some(TensorData::F64(v)) => v.cast(),
                Some(_) => return Err(Error::invalid(format!("checkpoint tensor {name} is not floating point"))),
                None => return Err(Error::invalid(format!("checkpoint lacks {name}"))),
            };
            if loaded.shape() != t.shape() {
                return Err(Error::shape(format!("{name}: checkpoint {:?}, model {:?}", loaded.shape(), t.shape())));
            }
            *t = loaded;
        }
        Ok((model, run))
    }
}

/// Pixels scaled to `[0, 1]`.
pub fn normalize_batch<T: Scalar>(images: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_fn(images.shape(), |i| T::from_f64_lossy(images.data()[i] as f64 / 255.0))
}

fn argmax(row: &[impl Scalar]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Mean loss and accuracy over `indices`; batches are evaluated in parallel.
pub fn evaluate_indices<T: Scalar>(model: &Classifier<T>, data: &ScaledDataset, indices: &[usize], batch: usize) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if data.resolution() < 2 || data.images.shape()[1] != model.cfg.in_channels {
        return Err(Error::invalid("dataset does not match the classifier input"));
    }
    let parts: Vec<(f64, usize)> = indices
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let (images, labels) = data.gather(chunk);
            let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let mut tape = Tape::new();
            let (_, logits) = model.forward(&mut tape, normalize_batch(&images))?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let k = model.cfg.classes;
            let correct = tape.value(logits).data().chunks(k).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            Ok((tape.value(loss).item().to_f64_lossy() * chunk.len() as f64, correct))
        })
        .collect::<Result<_>>()?;
    let n = indices.len() as f64;
    Ok(Evaluation {
        loss: parts.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: parts.iter().map(|p| p.1).sum::<usize>() as f64 / n,
        count: indices.len(),
    })
}

pub fn evaluate<T: Scalar>(model: &Classifier<T>, data: &ScaledDataset, split: Split, batch: usize) -> Result<Evaluation> {
    let idx: Vec<usize> = data.range(split).collect();
    evaluate_indices(model, data, &idx, batch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,wall_seconds";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.6},{:.6},{:e},{:.3}", self.epoch, self.split, self.loss, self.accuracy, self.lr, self.wall_seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: StepDecay,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training examples; `None` uses the train split.
    pub subset: Option<Vec<usize>>,
    /// Evaluate the validation split after every epoch.
    pub validate: bool,
}

impl TrainSettings {
    pub fn from_run(run: &RunConfig) -> Self {
        TrainSettings {
            epochs: run.usize("epochs"),
            batch: run.usize("batch"),
            schedule: StepDecay { base: run.float("lr"), milestones: run.list("lr_milestones"), gamma: run.float("lr_gamma") },
            weight_decay: run.float("weight_decay"),
            seed: run.int("seed"),
            subset: None,
            validate: true,
        }
    }
}

/// Adam with step decay. Each epoch visits the training examples in a
/// fresh permutation drawn from the ChaCha8 stream `(seed, 1)`; parameters
/// are initialized from stream `(seed, 0)`. Returns the trained model and
/// one train row (running means over the epoch) plus one val row per epoch.
pub fn train<T: Scalar>(
    cfg: ClassifierConfig,
    data: &ScaledDataset,
    settings: &TrainSettings,
    mut log: impl FnMut(&MetricRow),
) -> Result<(Classifier<T>, Vec<MetricRow>)> {
    if settings.epochs == 0 || settings.batch == 0 {
        return Err(Error::invalid("epochs and batch must be positive"));
    }
    let mut init = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut model = Classifier::<T>::new(cfg, &mut init)?;
    if data.images.shape()[1] != model.cfg.in_channels {
        return Err(Error::invalid(format!("dataset has {} channels, classifier expects {}", data.images.shape()[1], model.cfg.in_channels)));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= model.cfg.classes) {
        return Err(Error::invalid(format!("label {bad} exceeds {} classes", model.cfg.classes)));
    }
    let mut order: Vec<usize> = settings.subset.clone().unwrap_or_else(|| data.range(Split::Train).collect());
    if order.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(settings.seed);
    shuffle.set_stream(1);
    let mut opt = Adam::<T>::new(settings.schedule.base);
    opt.weight_decay = settings.weight_decay;
    let start = Instant::now();
    let mut rows = Vec::new();
    for epoch in 0..settings.epochs {
        let lr = settings.schedule.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(settings.batch) {
            let (images, labels) = data.gather(chunk);
            let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let (loss, grads, logits) = model.loss_and_grads(normalize_batch(&images), &labels)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += logits.data().chunks(model.cfg.classes).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            opt.step(&mut model.params_mut(), &grads)?;
        }
        let n = order.len() as f64;
        let row = MetricRow { epoch, split: "train", loss: loss_sum / n, accuracy: correct as f64 / n, lr, wall_seconds: start.elapsed().as_secs_f64() };
        log(&row);
        rows.push(row);
        if settings.validate && !data.range(Split::Val).is_empty() {
            let e = evaluate(&model, data, Split::Val, 256)?;
            let row = MetricRow { epoch, split: "val", loss: e.loss, accuracy: e.accuracy, lr, wall_seconds: start.elapsed().as_secs_f64() };
            log(&row);
            rows.push(row);
        }
    }
    Ok((model, rows))
}

pub fn write_metrics(path: impl AsRef<Path>, header: &[String], rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(f, "# {h}")?;
    }
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    f.flush()?;
    Ok(())
}
