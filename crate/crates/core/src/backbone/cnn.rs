//! The toy convolutional network: conv / batch-norm / ReLU blocks followed by
//! global average pooling. The last block's channel count is the embedding
//! width. Running statistics live in the parameter store next to the weights
//! so checkpoints carry them, but they are never touched by gradient updates.

use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{leaf_param, Adaptation, BnMode, ForwardPass};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::named_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    /// Input image shape `[C, H, W]`.
    pub image: [usize; 3],
    /// Output channels per block; the last entry is the embedding width.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Stride per block (same length as `channels`).
    pub strides: Vec<usize>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl CnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("cnn: at least one block required"));
        }
        if self.strides.len() != self.channels.len() {
            return Err(Error::config("cnn: strides must match channels length"));
        }
        if self.kernel == 0 || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("cnn: kernel and strides must be positive"));
        }
        let (mut h, mut w) = (self.image[1], self.image[2]);
        for &s in &self.strides {
            h = (h + 2 * self.pad() - self.kernel) / s + 1;
            w = (w + 2 * self.pad() - self.kernel) / s + 1;
            if h == 0 || w == 0 {
                return Err(Error::config("cnn: feature map collapsed to zero size"));
            }
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn num_bn_layers(&self) -> usize {
        self.channels.len()
    }
}

/// The default desk-scale network: three conv-BN-ReLU blocks to d = 64 on
/// 32x32 RGB inputs.
pub fn default_cnn_spec() -> CnnSpec {
    CnnSpec {
        image: [3, 32, 32],
        channels: vec![16, 32, 64],
        kernel: 3,
        strides: vec![2, 2, 2],
        bn_eps: 1e-5,
    }
}

pub(crate) fn init_params(spec: &CnnSpec, seed: u64) -> ParamStore {
    let mut rng = named_rng(seed, "cnn/init");
    let mut p = ParamStore::new();
    let mut cin = spec.image[0];
    for (i, &cout) in spec.channels.iter().enumerate() {
        let fan_in = (cin * spec.kernel * spec.kernel) as f64;
        let scale = (2.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, spec.kernel, spec.kernel]), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        p.insert(format!("conv{i}.w"), w);
        p.insert(format!("conv{i}.b"), ArrayD::zeros(IxDyn(&[cout])));
        p.insert(format!("bn{i}.g"), ArrayD::ones(IxDyn(&[cout])));
        p.insert(format!("bn{i}.b"), ArrayD::zeros(IxDyn(&[cout])));
        p.insert(format!("bn{i}.running_mean"), ArrayD::zeros(IxDyn(&[cout])));
        p.insert(format!("bn{i}.running_var"), ArrayD::ones(IxDyn(&[cout])));
        cin = cout;
    }
    p
}

pub(crate) fn expected_names(spec: &CnnSpec, adaptation: Option<&Adaptation>) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..spec.channels.len() {
        for n in ["conv{}.w", "conv{}.b"] {
            names.push(n.replace("{}", &i.to_string()));
        }
        for n in ["bn{}.g", "bn{}.b", "bn{}.running_mean", "bn{}.running_var"] {
            names.push(n.replace("{}", &i.to_string()));
        }
    }
    if matches!(adaptation, Some(Adaptation::Ssf)) {
        for i in 0..spec.channels.len() {
            names.push(format!("ssf.bn{i}.g"));
            names.push(format!("ssf.bn{i}.b"));
        }
    }
    names
}

/// Build the differentiable forward pass over `[B, C, H, W]` input.
pub(crate) fn build_forward(
    spec: &CnnSpec,
    store: &ParamStore,
    adaptation: Option<&Adaptation>,
    tape: &mut Tape,
    reg: &mut IndexMap<String, NodeId>,
    input: NodeId,
    bn: BnMode,
) -> ForwardPass {
    let ssf = matches!(adaptation, Some(Adaptation::Ssf));
    let mut x = input;
    let mut pre_bn = Vec::with_capacity(spec.channels.len());
    for i in 0..spec.channels.len() {
        let w = leaf_param(tape, reg, store, &format!("conv{i}.w"));
        let b = leaf_param(tape, reg, store, &format!("conv{i}.b"));
        x = tape.conv2d(x, w, b, spec.strides[i], spec.pad());
        pre_bn.push(x);
        let g = leaf_param(tape, reg, store, &format!("bn{i}.g"));
        let bb = leaf_param(tape, reg, store, &format!("bn{i}.b"));
        x = match bn {
            BnMode::Train => tape.batch_norm_train(x, g, bb, spec.bn_eps),
            BnMode::Eval => {
                let mean = to_vec1(store.get(&format!("bn{i}.running_mean")));
                let var = to_vec1(store.get(&format!("bn{i}.running_var")));
                tape.batch_norm_eval(x, g, bb, mean, var, spec.bn_eps)
            }
        };
        if ssf {
            let g = leaf_param(tape, reg, store, &format!("ssf.bn{i}.g"));
            let b = leaf_param(tape, reg, store, &format!("ssf.bn{i}.b"));
            x = tape.affine_channels_nchw(x, g, b);
        }
        x = tape.relu(x);
    }
    let features = tape.global_avg_pool(x);
    ForwardPass { features, pre_bn }
}

fn to_vec1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_shape(a.len()).unwrap().to_owned()
}
