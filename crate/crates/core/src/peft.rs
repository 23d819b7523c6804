//! The adaptation algorithm family: full finetune, visual prompt tuning
//! (shallow and deep), scale-and-shift, adapter bottlenecks, and
//! batch-normalization statistics tuning.
//!
//! Every gradient-based method minimizes cross-entropy of a temporary linear
//! head over the first-stage classes, restricted to its own parameter set;
//! the head is dropped from the returned model. BN tuning recomputes running
//! statistics by forward passes only.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{is_running_stat, Adaptation, Backbone, BackboneKind, BnMode};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::rng::{named_rng, named_seed};

/// Adaptation method vocabulary; the strings double as the config/CLI names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeftMethod {
    Full,
    VptShallow,
    VptDeep,
    Ssf,
    Adapter,
    Bn,
}

impl std::fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PeftMethod::Full => "full",
            PeftMethod::VptShallow => "vpt-shallow",
            PeftMethod::VptDeep => "vpt-deep",
            PeftMethod::Ssf => "ssf",
            PeftMethod::Adapter => "adapter",
            PeftMethod::Bn => "bn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PeftMethod::Full),
            "vpt-shallow" => Ok(PeftMethod::VptShallow),
            "vpt-deep" => Ok(PeftMethod::VptDeep),
            "ssf" => Ok(PeftMethod::Ssf),
            "adapter" => Ok(PeftMethod::Adapter),
            "bn" => Ok(PeftMethod::Bn),
            other => Err(Error::config(format!("unknown adaptation method '{other}'"))),
        }
    }
}

/// Adaptation hyperparameters. Defaults: 20 epochs, batch 48, learning rate
/// 0.01 with cosine annealing, momentum 0.9, prompt length 5, adapter dim 16.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub method: PeftMethod,
    pub prompt_len: usize,
    pub adapter_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            method: PeftMethod::Ssf,
            prompt_len: 5,
            adapter_dim: 16,
            epochs: 20,
            batch_size: 48,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl PeftConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            PeftMethod::VptShallow | PeftMethod::VptDeep if self.prompt_len == 0 => {
                return Err(Error::config("peft: prompt_len must be >= 1"));
            }
            PeftMethod::Adapter if self.adapter_dim == 0 => {
                return Err(Error::config("peft: adapter_dim must be >= 1"));
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::config("peft: batch_size must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("peft: lr must be positive"));
        }
        Ok(())
    }
}

/// A scale-and-shift layer: `y[t, j] = gamma[j] * x[t, j] + beta[j]`.
#[derive(Debug, Clone)]
pub struct SsfLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl SsfLayer {
    /// Identity initialization: gamma 1, beta 0.
    pub fn identity(dim: usize) -> Self {
        SsfLayer { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.shape()[1] != self.gamma.len() {
            return Err(Error::shape(format!(
                "ssf: input width {} != {}",
                x.shape()[1],
                self.gamma.len()
            )));
        }
        let mut y = x.to_owned();
        for mut row in y.outer_iter_mut() {
            row *= &self.gamma;
            row += &self.beta;
        }
        Ok(y)
    }
}

/// An adapter bottleneck: `y = mlp_out + relu(x @ down) @ up`.
#[derive(Debug, Clone)]
pub struct AdapterLayer {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl AdapterLayer {
    pub fn forward(&self, mlp_out: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.shape()[1] != self.down.shape()[0] {
            return Err(Error::shape("adapter: input width != down-projection rows"));
        }
        if mlp_out.shape() != x.shape() {
            return Err(Error::shape("adapter: mlp output and block input shapes differ"));
        }
        let branch = x.dot(&self.down).mapv(|v| v.max(0.0)).dot(&self.up);
        Ok(mlp_out + &branch)
    }
}

/// Temporary linear classifier trained jointly with the adaptation
/// parameters and discarded afterwards.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearHead {
    pub fn init(in_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = named_rng(seed, "head/init");
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((in_dim, classes), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        LinearHead { w, b: Array1::zeros(classes) }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    /// Append freshly initialized columns for `extra` new classes, keeping
    /// the existing columns (which stay trainable).
    pub fn grow(&mut self, extra: usize, seed: u64) {
        let mut rng = named_rng(seed, "head/grow");
        let in_dim = self.w.shape()[0];
        let scale = 1.0 / (in_dim as f64).sqrt();
        let add = Array2::from_shape_fn((in_dim, extra), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        self.w = ndarray::concatenate(Axis(1), &[self.w.view(), add.view()]).unwrap();
        self.b = ndarray::concatenate(Axis(0), &[self.b.view(), Array1::zeros(extra).view()]).unwrap();
    }

    pub fn logits(&self, feature: &Array1<f64>) -> Array1<f64> {
        feature.dot(&self.w) + &self.b
    }
}

/// Names of the tensors a method is allowed to update.
pub fn trainable_names(backbone: &Backbone, method: PeftMethod) -> Vec<String> {
    let pick = |prefix: &str| {
        backbone
            .params()
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    match method {
        PeftMethod::Full => backbone
            .params()
            .names()
            .filter(|n| !is_running_stat(n))
            .map(str::to_string)
            .collect(),
        PeftMethod::VptShallow | PeftMethod::VptDeep => pick("vpt."),
        PeftMethod::Ssf => pick("ssf."),
        PeftMethod::Adapter => pick("adapter."),
        PeftMethod::Bn => Vec::new(),
    }
}

fn check_method_applies(backbone: &Backbone, method: PeftMethod) -> Result<()> {
    let kind = backbone.kind();
    let ok = match method {
        PeftMethod::Full => kind != BackboneKind::Identity,
        PeftMethod::VptShallow | PeftMethod::VptDeep | PeftMethod::Adapter => kind == BackboneKind::ToyVit,
        PeftMethod::Ssf => kind == BackboneKind::ToyVit || kind == BackboneKind::ToyCnn,
        PeftMethod::Bn => kind == BackboneKind::ToyCnn,
    };
    if !ok {
        return Err(Error::config(format!(
            "method '{method}' does not apply to backbone kind '{kind}'"
        )));
    }
    Ok(())
}

/// Deep-copy the backbone and attach the method's parameters at their
/// zero-effect (or small random) initialization. No training happens here.
pub fn attach_method(backbone: &Backbone, cfg: &PeftConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    check_method_applies(backbone, cfg.method)?;
    let mut model = backbone.thawed_clone();
    let d = model.embed_dim();
    match cfg.method {
        PeftMethod::Full | PeftMethod::Bn => {}
        PeftMethod::VptShallow => {
            let mut rng = named_rng(seed, "vpt/init");
            let p = ArrayD::from_shape_fn(IxDyn(&[cfg.prompt_len, d]), |_| rng.gen_range(-0.1..0.1));
            model.attach_adaptation(
                Adaptation::VptShallow { prompt_len: cfg.prompt_len },
                vec![("vpt.prompts".to_string(), p)],
            )?;
        }
        PeftMethod::VptDeep => {
            let mut rng = named_rng(seed, "vpt/init");
            let blocks = vit_blocks(&model)?;
            let tensors = (0..blocks)
                .map(|i| {
                    let p = ArrayD::from_shape_fn(IxDyn(&[cfg.prompt_len, d]), |_| rng.gen_range(-0.1..0.1));
                    (format!("vpt.blk{i}.prompts"), p)
                })
                .collect();
            model.attach_adaptation(Adaptation::VptDeep { prompt_len: cfg.prompt_len }, tensors)?;
        }
        PeftMethod::Ssf => {
            let mut tensors = Vec::new();
            match model.kind() {
                BackboneKind::ToyVit => {
                    for i in 0..vit_blocks(&model)? {
                        for site in ["attn", "mlp"] {
                            tensors.push((format!("ssf.blk{i}.{site}.g"), ArrayD::ones(IxDyn(&[d]))));
                            tensors.push((format!("ssf.blk{i}.{site}.b"), ArrayD::zeros(IxDyn(&[d]))));
                        }
                    }
                }
                BackboneKind::ToyCnn => {
                    let channels = cnn_channels(&model)?;
                    for (i, c) in channels.iter().enumerate() {
                        tensors.push((format!("ssf.bn{i}.g"), ArrayD::ones(IxDyn(&[*c]))));
                        tensors.push((format!("ssf.bn{i}.b"), ArrayD::zeros(IxDyn(&[*c]))));
                    }
                }
                BackboneKind::Identity => unreachable!("rejected above"),
            }
            model.attach_adaptation(Adaptation::Ssf, tensors)?;
        }
        PeftMethod::Adapter => {
            let mut rng = named_rng(seed, "adapter/init");
            let r = cfg.adapter_dim;
            let tensors = (0..vit_blocks(&model)?)
                .flat_map(|i| {
                    let down = ArrayD::from_shape_fn(IxDyn(&[d, r]), |_| {
                        rng.sample::<f64, _>(StandardNormal) * 0.02
                    });
                    let up = ArrayD::zeros(IxDyn(&[r, d]));
                    vec![
                        (format!("adapter.blk{i}.down"), down),
                        (format!("adapter.blk{i}.up"), up),
                    ]
                })
                .collect();
            model.attach_adaptation(Adaptation::Adapter { dim: r }, tensors)?;
        }
    }
    Ok(model)
}

fn vit_blocks(model: &Backbone) -> Result<usize> {
    match model.arch() {
        crate::backbone::Arch::ToyVit(spec) => Ok(spec.blocks),
        _ => Err(Error::config("method requires a toy-vit backbone")),
    }
}

fn cnn_channels(model: &Backbone) -> Result<Vec<usize>> {
    match model.arch() {
        crate::backbone::Arch::ToyCnn(spec) => Ok(spec.channels.clone()),
        _ => Err(Error::config("method requires a toy-cnn backbone")),
    }
}

/// Adapt the backbone on the first-stage training set and return the adapted
/// model. The input backbone is never mutated; the temporary classifier does
/// not survive into the result.
pub fn adapt(
    backbone: &Backbone,
    d1: &[LabeledExample],
    cfg: &PeftConfig,
    seed: u64,
) -> Result<Backbone> {
    if d1.is_empty() {
        return Err(Error::data("adapt: empty first-stage training set"));
    }
    if cfg.method == PeftMethod::Bn {
        check_method_applies(backbone, PeftMethod::Bn)?;
        return bn_adapt(backbone, d1);
    }
    let mut model = attach_method(backbone, cfg, named_seed(seed, "attach"))?;
    adapt_stage(&mut model, d1, cfg, seed)?;
    Ok(model)
}

/// Run one stage of adaptation on an already-attached model, training the
/// method's parameter set jointly with a fresh temporary head over the
/// classes present in `data`.
pub fn adapt_stage(
    model: &mut Backbone,
    data: &[LabeledExample],
    cfg: &PeftConfig,
    seed: u64,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::data("adapt: empty training set"));
    }
    if cfg.method == PeftMethod::Bn {
        let adapted = bn_adapt(model, data)?;
        *model = adapted;
        return Ok(());
    }
    let label_map = label_columns(data);
    let mut head = LinearHead::init(model.embed_dim(), label_map.len(), named_seed(seed, "head"));
    let trainable = trainable_names(model, cfg.method);
    let bn_mode = if cfg.method == PeftMethod::Full { BnMode::Train } else { BnMode::Eval };
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        seed: named_seed(seed, "train"),
    };
    train_cross_entropy(model, &mut head, data, &label_map, &trainable, true, bn_mode, &opts)?;
    Ok(())
}

/// Column assignment for a temporary head: distinct labels in ascending
/// class-id order.
pub fn label_columns(data: &[LabeledExample]) -> BTreeMap<usize, usize> {
    let classes: std::collections::BTreeSet<usize> = data.iter().map(|ex| ex.label).collect();
    classes.into_iter().enumerate().map(|(i, c)| (c, i)).collect()
}

/// Reset every BN layer's running statistics to the exact mean and
/// (population) variance of its pre-normalization activations over `data`,
/// layer by layer with no backpropagation. Weights are untouched.
pub fn bn_adapt(backbone: &Backbone, data: &[LabeledExample]) -> Result<Backbone> {
    if backbone.kind() != BackboneKind::ToyCnn {
        return Err(Error::config("bn adaptation requires BN layers (toy-cnn backbone)"));
    }
    if data.is_empty() {
        return Err(Error::data("bn adaptation: empty dataset"));
    }
    let mut model = backbone.thawed_clone();
    let layers = match model.arch() {
        crate::backbone::Arch::ToyCnn(spec) => spec.num_bn_layers(),
        _ => unreachable!(),
    };
    let inputs: Vec<&crate::data::Tensor> = data.iter().map(|ex| &ex.input).collect();
    for layer in 0..layers {
        let mean = bn_layer_moment(&model, &inputs, layer, None)?;
        let var = bn_layer_moment(&model, &inputs, layer, Some(&mean))?;
        let p = model.params_mut().expect("working copy is mutable");
        p.get_mut(&format!("bn{layer}.running_mean"))
            .assign(&mean.view().into_dyn());
        p.get_mut(&format!("bn{layer}.running_var"))
            .assign(&var.view().into_dyn());
    }
    Ok(model)
}

/// One streaming pass over the dataset: per-channel mean of layer `layer`'s
/// pre-BN activations, or their squared deviation from `center`.
fn bn_layer_moment(
    model: &Backbone,
    inputs: &[&crate::data::Tensor],
    layer: usize,
    center: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let mut sums: Option<Array1<f64>> = None;
    let mut count = 0usize;
    for chunk in inputs.chunks(64) {
        let prepped = model.prep_batch(chunk)?;
        let mut tape = Tape::new();
        let mut reg = IndexMap::new();
        let x = tape.leaf(prepped);
        let fwd = model.build_forward(&mut tape, &mut reg, x, BnMode::Eval);
        let act = tape.value(fwd.pre_bn[layer]);
        let a4 = act.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let c = a4.shape()[1];
        let sums = sums.get_or_insert_with(|| Array1::zeros(c));
        count += a4.shape()[0] * a4.shape()[2] * a4.shape()[3];
        for ci in 0..c {
            let lane = a4.slice(ndarray::s![.., ci, .., ..]);
            sums[ci] += match center {
                None => lane.sum(),
                Some(mu) => lane.iter().map(|v| (v - mu[ci]) * (v - mu[ci])).sum::<f64>(),
            };
        }
    }
    Ok(sums.expect("non-empty data") / count as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

/// Minibatch SGD with momentum and per-epoch cosine-annealed learning rate.
/// Only the named tensors (plus the head, when `head_trainable`) receive
/// updates. Returns the mean training loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_cross_entropy(
    model: &mut Backbone,
    head: &mut LinearHead,
    data: &[LabeledExample],
    label_map: &BTreeMap<usize, usize>,
    trainable: &[String],
    head_trainable: bool,
    bn_mode: BnMode,
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    if model.frozen() {
        return Err(Error::config("cannot train a frozen backbone"));
    }
    let mut velocity: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    let mut head_vel_w = Array2::<f64>::zeros(head.w.raw_dim());
    let mut head_vel_b = Array1::<f64>::zeros(head.b.raw_dim());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = named_rng(opts.seed, "train/order");
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let lr = cosine_lr(opts.lr, epoch, opts.epochs);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch_ids in order.chunks(opts.batch_size) {
            let batch: Vec<&LabeledExample> = batch_ids.iter().map(|&i| &data[i]).collect();
            let (loss, grads, head_grads) = batch_step(model, head, &batch, label_map, bn_mode)?;
            total_loss += loss * batch.len() as f64;

            for name in trainable {
                let g = match grads.get(name) {
                    Some(g) => g,
                    None => continue,
                };
                let v = velocity
                    .entry(name.clone())
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                v.zip_mut_with(g, |vv, gv| *vv = opts.momentum * *vv + gv);
                let p = model.params_mut()?.get_mut(name);
                p.zip_mut_with(v, |pv, vv| *pv -= lr * vv);
            }
            if head_trainable {
                let (gw, gb) = head_grads;
                head_vel_w.zip_mut_with(&gw, |vv, gv| *vv = opts.momentum * *vv + gv);
                head_vel_b.zip_mut_with(&gb, |vv, gv| *vv = opts.momentum * *vv + gv);
                head.w.zip_mut_with(&head_vel_w, |pv, vv| *pv -= lr * vv);
                head.b.zip_mut_with(&head_vel_b, |pv, vv| *pv -= lr * vv);
            }
        }
        epoch_losses.push(total_loss / data.len() as f64);
    }
    Ok(epoch_losses)
}

fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

type HeadGrads = (Array2<f64>, Array1<f64>);

/// Forward + backward over one batch. Returns the mean loss, gradients for
/// every backbone tensor that participated, and the head gradients.
fn batch_step(
    model: &Backbone,
    head: &LinearHead,
    batch: &[&LabeledExample],
    label_map: &BTreeMap<usize, usize>,
    bn_mode: BnMode,
) -> Result<(f64, IndexMap<String, ArrayD<f64>>, HeadGrads)> {
    let inputs: Vec<&crate::data::Tensor> = batch.iter().map(|ex| &ex.input).collect();
    let labels: Vec<usize> = batch
        .iter()
        .map(|ex| {
            label_map.get(&ex.label).copied().ok_or_else(|| {
                Error::data(format!("label {} missing from the adaptation label space", ex.label))
            })
        })
        .collect::<Result<_>>()?;
    let prepped = model.prep_batch(&inputs)?;

    let mut tape = Tape::new();
    let mut reg = IndexMap::new();
    let x = tape.leaf(prepped);
    let fwd = model.build_forward(&mut tape, &mut reg, x, bn_mode);
    let hw = tape.leaf(head.w.clone().into_dyn());
    let hb = tape.leaf(head.b.clone().into_dyn());
    let logits = tape.linear(fwd.features, hw, Some(hb));
    let loss = tape.cross_entropy_mean(logits, &labels);
    let grads = tape.backward(loss);

    let mut out = IndexMap::new();
    for (name, id) in &reg {
        if let Some(g) = grads.get(*id) {
            out.insert(name.clone(), g.clone());
        }
    }
    let gw = grads
        .get(hw)
        .map(|g| g.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned())
        .unwrap_or_else(|| Array2::zeros(head.w.raw_dim()));
    let gb = grads
        .get(hb)
        .map(|g| g.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned())
        .unwrap_or_else(|| Array1::zeros(head.b.raw_dim()));
    Ok((tape.scalar(loss), out, (gw, gb)))
}

/// Mean cross-entropy of the model + head over `data`, forward only.
pub fn adaptation_loss(
    model: &Backbone,
    head: &LinearHead,
    data: &[LabeledExample],
    label_map: &BTreeMap<usize, usize>,
    bn_mode: BnMode,
) -> Result<f64> {
    let batch: Vec<&LabeledExample> = data.iter().collect();
    let (loss, _, _) = batch_step(model, head, &batch, label_map, bn_mode)?;
    Ok(loss)
}

/// Mean cross-entropy and analytic gradients of every participating tensor
/// (backbone tensors by name, head under `head.w` / `head.b`).
pub fn adaptation_grads(
    model: &Backbone,
    head: &LinearHead,
    data: &[LabeledExample],
    label_map: &BTreeMap<usize, usize>,
    bn_mode: BnMode,
) -> Result<(f64, IndexMap<String, ArrayD<f64>>)> {
    let batch: Vec<&LabeledExample> = data.iter().collect();
    let (loss, mut grads, (gw, gb)) = batch_step(model, head, &batch, label_map, bn_mode)?;
    grads.insert("head.w".to_string(), gw.into_dyn());
    grads.insert("head.b".to_string(), gb.into_dyn());
    Ok((loss, grads))
}
