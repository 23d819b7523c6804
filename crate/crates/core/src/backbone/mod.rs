//! Embedding backbones: a small pre-norm vision transformer, a small
//! convolutional network with batch normalization, and a pass-through
//! identity embedder for precomputed feature vectors.
//!
//! A backbone is a named parameter store plus an architecture description.
//! `embed` maps one input to a `d`-dimensional feature vector: the
//! classification-token row after the final block for the transformer, the
//! globally average-pooled feature map for the convolutional network. Frozen
//! backbones reject all mutation; cloning is always deep.

mod cnn;
mod vit;

pub use cnn::{default_cnn_spec, CnnSpec};
pub use vit::{default_vit_spec, VitSpec};

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Which architecture a backbone instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    ToyVit,
    ToyCnn,
    Identity,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackboneKind::ToyVit => "toy-vit",
            BackboneKind::ToyCnn => "toy-cnn",
            BackboneKind::Identity => "identity",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-vit" => Ok(BackboneKind::ToyVit),
            "toy-cnn" => Ok(BackboneKind::ToyCnn),
            "identity" => Ok(BackboneKind::Identity),
            other => Err(Error::config(format!("unknown backbone kind '{other}'"))),
        }
    }
}

/// Architecture description, serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum Arch {
    ToyVit(VitSpec),
    ToyCnn(CnnSpec),
    Identity { dim: usize },
}

impl Arch {
    pub fn kind(&self) -> BackboneKind {
        match self {
            Arch::ToyVit(_) => BackboneKind::ToyVit,
            Arch::ToyCnn(_) => BackboneKind::ToyCnn,
            Arch::Identity { .. } => BackboneKind::Identity,
        }
    }
}

/// Adaptation parameters attached to a backbone, describing how the forward
/// pass weaves them in. The tensors themselves live in the parameter store
/// under the `vpt.` / `ssf.` / `adapter.` prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Adaptation {
    VptShallow { prompt_len: usize },
    VptDeep { prompt_len: usize },
    Ssf,
    Adapter { dim: usize },
}

/// Batch-normalization statistics mode for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch (training).
    Train,
    /// Normalize with the stored running statistics (inference).
    Eval,
}

/// Output of the token encoder: an `L x d` matrix whose first row is the
/// classification token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub cls_index: usize,
}

/// An embedding function with freeze/clone/hash plumbing.
#[derive(Debug, Clone)]
pub struct Backbone {
    arch: Arch,
    params: ParamStore,
    adaptation: Option<Adaptation>,
    frozen: bool,
}

pub(crate) struct ForwardPass {
    /// `[B, d]` feature node.
    pub features: NodeId,
    /// Pre-normalization activations of each BN layer, in layer order.
    pub pre_bn: Vec<NodeId>,
}

impl Backbone {
    /// A randomly initialized toy vision transformer.
    pub fn new_toy_vit(spec: VitSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = vit::init_params(&spec, seed);
        Ok(Backbone { arch: Arch::ToyVit(spec), params, adaptation: None, frozen: false })
    }

    /// A randomly initialized toy convolutional network.
    pub fn new_toy_cnn(spec: CnnSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = cnn::init_params(&spec, seed);
        Ok(Backbone { arch: Arch::ToyCnn(spec), params, adaptation: None, frozen: false })
    }

    /// A pass-through embedder over flat feature vectors.
    pub fn identity(dim: usize) -> Self {
        Backbone { arch: Arch::Identity { dim }, params: ParamStore::new(), adaptation: None, frozen: false }
    }

    /// Reassemble a backbone from checkpoint pieces.
    pub fn from_parts(arch: Arch, params: ParamStore, adaptation: Option<Adaptation>) -> Result<Self> {
        let b = Backbone { arch, params, adaptation, frozen: false };
        b.check_params()?;
        Ok(b)
    }

    fn check_params(&self) -> Result<()> {
        let expected = match &self.arch {
            Arch::ToyVit(spec) => vit::expected_names(spec, self.adaptation.as_ref()),
            Arch::ToyCnn(spec) => cnn::expected_names(spec, self.adaptation.as_ref()),
            Arch::Identity { .. } => Vec::new(),
        };
        for name in &expected {
            if !self.params.contains(name) {
                return Err(Error::Corrupt(format!("checkpoint missing tensor '{name}'")));
            }
        }
        if self.params.names().count() != expected.len() {
            return Err(Error::Corrupt("checkpoint has unexpected extra tensors".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> BackboneKind {
        self.arch.kind()
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn adaptation(&self) -> Option<&Adaptation> {
        self.adaptation.as_ref()
    }

    /// Output feature width `d`.
    pub fn embed_dim(&self) -> usize {
        match &self.arch {
            Arch::ToyVit(spec) => spec.dim,
            Arch::ToyCnn(spec) => *spec.channels.last().unwrap(),
            Arch::Identity { dim } => *dim,
        }
    }

    /// Expected input shape; `None` for the identity embedder (any shape with
    /// the right element count is accepted).
    pub fn input_shape(&self) -> Option<Vec<usize>> {
        match &self.arch {
            Arch::ToyVit(spec) => Some(vec![spec.image[0], spec.image[1], spec.image[2]]),
            Arch::ToyCnn(spec) => Some(vec![spec.image[0], spec.image[1], spec.image[2]]),
            Arch::Identity { .. } => None,
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Mark the backbone immutable. Mutating accessors fail afterwards.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Deep copy that is mutable regardless of the source's frozen state.
    /// Adaptation owns its working copy; the source is never touched.
    pub(crate) fn thawed_clone(&self) -> Backbone {
        let mut c = self.clone();
        c.frozen = false;
        c
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access to the tensors; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::config("backbone is frozen"));
        }
        Ok(&mut self.params)
    }

    /// Attach adaptation tensors (already initialized) to the store.
    pub(crate) fn attach_adaptation(
        &mut self,
        adaptation: Adaptation,
        tensors: Vec<(String, ArrayD<f64>)>,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::config("backbone is frozen"));
        }
        if self.adaptation.is_some() {
            return Err(Error::config("backbone already carries an adaptation"));
        }
        for (name, value) in tensors {
            self.params.insert(name, value);
        }
        self.adaptation = Some(adaptation);
        Ok(())
    }

    /// Digest over every tensor, including BN running statistics.
    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    /// Digest over the weights only (running statistics excluded).
    pub fn weight_hash(&self) -> String {
        self.params.hash_where(|n| !is_running_stat(n))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        match self.input_shape() {
            Some(shape) => {
                if input.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "input shape {:?} does not match backbone input {:?}",
                        input.shape(),
                        shape
                    )));
                }
            }
            None => {
                if input.len() != self.embed_dim() {
                    return Err(Error::shape(format!(
                        "identity embedder expects {} values, got {}",
                        self.embed_dim(),
                        input.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token encoder of the transformer: patch projection plus the
    /// classification token, before positional embeddings.
    pub fn encode_patches(&self, input: &Tensor) -> Result<TokenSequence> {
        let Arch::ToyVit(spec) = &self.arch else {
            return Err(Error::shape("encode_patches requires a toy-vit backbone"));
        };
        self.check_input(input)?;
        let patches = vit::extract_patches(spec, input)?; // [Np, pd]
        let mut tape = Tape::new();
        let x = tape.leaf(patches.into_dyn());
        let w = tape.leaf(self.params.get("patch.w").clone());
        let b = tape.leaf(self.params.get("patch.b").clone());
        let proj = tape.linear(x, w, Some(b));
        let proj = tape
            .value(proj)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut tokens = Array2::<f64>::zeros((proj.shape()[0] + 1, spec.dim));
        tokens
            .row_mut(0)
            .assign(&self.params.get("cls").view().into_shape(spec.dim).unwrap());
        tokens.slice_mut(ndarray::s![1.., ..]).assign(&proj);
        Ok(TokenSequence { tokens, cls_index: 0 })
    }

    /// Full token-sequence length seen by the first transformer block,
    /// including any prepended prompts.
    pub fn extended_seq_len(&self) -> Result<usize> {
        let Arch::ToyVit(spec) = &self.arch else {
            return Err(Error::shape("sequence length requires a toy-vit backbone"));
        };
        let base = spec.seq_len();
        Ok(match self.adaptation {
            Some(Adaptation::VptShallow { prompt_len }) | Some(Adaptation::VptDeep { prompt_len }) => {
                base + prompt_len
            }
            _ => base,
        })
    }

    /// Embed one input into a `d`-vector. Pure in `(parameters, input)`.
    pub fn embed(&self, input: &Tensor) -> Result<Array1<f64>> {
        self.check_input(input)?;
        let prepped = self.prep_batch(&[input])?;
        let mut tape = Tape::new();
        let mut reg = IndexMap::new();
        let x = tape.leaf(prepped);
        let fwd = self.build_forward(&mut tape, &mut reg, x, BnMode::Eval);
        let out = tape.value(fwd.features);
        Ok(out.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap())
    }

    /// Stack raw inputs into the batch layout the forward pass expects:
    /// `[B, Np, patch_dim]` for the transformer, `[B, C, H, W]` for the
    /// convolutional network, `[B, dim]` for the identity embedder.
    pub(crate) fn prep_batch(&self, inputs: &[&Tensor]) -> Result<ArrayD<f64>> {
        for input in inputs {
            self.check_input(input)?;
        }
        match &self.arch {
            Arch::ToyVit(spec) => {
                let np = spec.num_patches();
                let pd = spec.patch_dim();
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[inputs.len(), np, pd]));
                for (i, input) in inputs.iter().enumerate() {
                    let p = vit::extract_patches(spec, input)?;
                    out.index_axis_mut(Axis(0), i).assign(&p);
                }
                Ok(out)
            }
            Arch::ToyCnn(spec) => {
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[
                    inputs.len(),
                    spec.image[0],
                    spec.image[1],
                    spec.image[2],
                ]));
                for (i, input) in inputs.iter().enumerate() {
                    out.index_axis_mut(Axis(0), i).assign(input);
                }
                Ok(out)
            }
            Arch::Identity { dim } => {
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[inputs.len(), *dim]));
                for (i, input) in inputs.iter().enumerate() {
                    let flat = input.view().into_shape(*dim).unwrap();
                    out.index_axis_mut(Axis(0), i).assign(&flat);
                }
                Ok(out)
            }
        }
    }

    /// Build the differentiable forward pass over a prepared batch.
    /// Parameters are registered into `reg` by name as tape leaves.
    pub(crate) fn build_forward(
        &self,
        tape: &mut Tape,
        reg: &mut IndexMap<String, NodeId>,
        input: NodeId,
        bn: BnMode,
    ) -> ForwardPass {
        match &self.arch {
            Arch::ToyVit(spec) => vit::build_forward(spec, &self.params, self.adaptation.as_ref(), tape, reg, input),
            Arch::ToyCnn(spec) => cnn::build_forward(spec, &self.params, self.adaptation.as_ref(), tape, reg, input, bn),
            Arch::Identity { .. } => ForwardPass { features: input, pre_bn: Vec::new() },
        }
    }
}

/// Whether a tensor name denotes a BN running statistic rather than a weight.
pub fn is_running_stat(name: &str) -> bool {
    name.contains(".running_")
}

pub(crate) fn leaf_param(
    tape: &mut Tape,
    reg: &mut IndexMap<String, NodeId>,
    store: &ParamStore,
    name: &str,
) -> NodeId {
    if let Some(id) = reg.get(name) {
        return *id;
    }
    let id = tape.leaf(store.get(name).clone());
    reg.insert(name.to_string(), id);
    id
}
