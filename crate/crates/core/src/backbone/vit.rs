//! The toy vision transformer: patch embedding, a classification token,
//! learned positional embeddings, and pre-norm blocks of multi-head
//! self-attention plus a GELU MLP. The embedding is the classification-token
//! row after the (optional) final layer norm.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{leaf_param, Adaptation, ForwardPass};
use crate::autodiff::{NodeId, Tape};
use crate::data::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::named_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    /// Input image shape `[C, H, W]`.
    pub image: [usize; 3],
    /// Square patch side; must divide both image sides.
    pub patch: usize,
    /// Token width `d`.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    /// Read the classification token after a final layer norm.
    #[serde(default = "default_final_norm")]
    pub final_norm: bool,
}

fn default_final_norm() -> bool {
    true
}

impl VitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image[1] % self.patch != 0 || self.image[2] % self.patch != 0 {
            return Err(Error::config(format!(
                "vit: patch {} must divide image sides {}x{}",
                self.patch, self.image[1], self.image[2]
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("vit: heads must divide dim"));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("vit: blocks and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image[1] / self.patch) * (self.image[2] / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.image[0] * self.patch * self.patch
    }

    /// Sequence length `L = 1 + num_patches`.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// The default desk-scale transformer: 2 blocks, d = 64, 4 heads, MLP ratio
/// 4, patch 8 on 32x32 RGB inputs.
pub fn default_vit_spec() -> VitSpec {
    VitSpec {
        image: [3, 32, 32],
        patch: 8,
        dim: 64,
        heads: 4,
        mlp_ratio: 4,
        blocks: 2,
        final_norm: true,
    }
}

pub(crate) fn init_params(spec: &VitSpec, seed: u64) -> ParamStore {
    let mut rng = named_rng(seed, "vit/init");
    let mut p = ParamStore::new();
    let d = spec.dim;
    let pd = spec.patch_dim();
    let mut randn = |shape: &[usize], scale: f64| -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal) * scale)
    };

    p.insert("patch.w", randn(&[pd, d], 1.0 / (pd as f64).sqrt()));
    p.insert("patch.b", ArrayD::zeros(IxDyn(&[d])));
    p.insert("cls", randn(&[1, d], 0.02));
    let seq_len = spec.seq_len();
    p.insert("pos", randn(&[seq_len, d], 0.02));
    let wscale = 1.0 / (d as f64).sqrt();
    for i in 0..spec.blocks {
        p.insert(format!("blk{i}.ln1.g"), ArrayD::ones(IxDyn(&[d])));
        p.insert(format!("blk{i}.ln1.b"), ArrayD::zeros(IxDyn(&[d])));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("blk{i}.attn.{name}"), randn(&[d, d], wscale));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("blk{i}.attn.{name}"), ArrayD::zeros(IxDyn(&[d])));
        }
        p.insert(format!("blk{i}.ln2.g"), ArrayD::ones(IxDyn(&[d])));
        p.insert(format!("blk{i}.ln2.b"), ArrayD::zeros(IxDyn(&[d])));
        let hidden = d * spec.mlp_ratio;
        p.insert(format!("blk{i}.mlp.w1"), randn(&[d, hidden], wscale));
        p.insert(format!("blk{i}.mlp.b1"), ArrayD::zeros(IxDyn(&[hidden])));
        p.insert(format!("blk{i}.mlp.w2"), randn(&[hidden, d], 1.0 / (hidden as f64).sqrt()));
        p.insert(format!("blk{i}.mlp.b2"), ArrayD::zeros(IxDyn(&[d])));
    }
    if spec.final_norm {
        p.insert("final_ln.g", ArrayD::ones(IxDyn(&[d])));
        p.insert("final_ln.b", ArrayD::zeros(IxDyn(&[d])));
    }
    p
}

pub(crate) fn expected_names(spec: &VitSpec, adaptation: Option<&Adaptation>) -> Vec<String> {
    let mut names = vec![
        "patch.w".to_string(),
        "patch.b".to_string(),
        "cls".to_string(),
        "pos".to_string(),
    ];
    for i in 0..spec.blocks {
        for n in ["ln1.g", "ln1.b"] {
            names.push(format!("blk{i}.{n}"));
        }
        for n in ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"] {
            names.push(format!("blk{i}.attn.{n}"));
        }
        for n in ["ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
            names.push(format!("blk{i}.{n}"));
        }
    }
    if spec.final_norm {
        names.push("final_ln.g".to_string());
        names.push("final_ln.b".to_string());
    }
    match adaptation {
        Some(Adaptation::VptShallow { .. }) => names.push("vpt.prompts".to_string()),
        Some(Adaptation::VptDeep { .. }) => {
            for i in 0..spec.blocks {
                names.push(format!("vpt.blk{i}.prompts"));
            }
        }
        Some(Adaptation::Ssf) => {
            for i in 0..spec.blocks {
                for n in ["attn.g", "attn.b", "mlp.g", "mlp.b"] {
                    names.push(format!("ssf.blk{i}.{n}"));
                }
            }
        }
        Some(Adaptation::Adapter { .. }) => {
            for i in 0..spec.blocks {
                names.push(format!("adapter.blk{i}.down"));
                names.push(format!("adapter.blk{i}.up"));
            }
        }
        None => {}
    }
    names
}

/// Flatten an image `[C, H, W]` into its patch matrix `[Np, C*p*p]`, patches
/// in row-major grid order, each flattened channel-major.
pub(crate) fn extract_patches(spec: &VitSpec, input: &Tensor) -> Result<Array2<f64>> {
    let x = input
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::shape("image input must be [C, H, W]"))?;
    let p = spec.patch;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::<f64>::zeros((gh * gw, c * p * p));
    for gi in 0..gh {
        for gj in 0..gw {
            let row = gi * gw + gj;
            let mut k = 0;
            for ci in 0..c {
                for di in 0..p {
                    for dj in 0..p {
                        out[[row, k]] = x[[ci, gi * p + di, gj * p + dj]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Build the differentiable forward pass over `[B, Np, patch_dim]` input.
pub(crate) fn build_forward(
    spec: &VitSpec,
    store: &ParamStore,
    adaptation: Option<&Adaptation>,
    tape: &mut Tape,
    reg: &mut IndexMap<String, NodeId>,
    input: NodeId,
) -> ForwardPass {
    let d = spec.dim;
    let heads = spec.heads;
    let hd = d / heads;
    let base_len = spec.seq_len();

    let mut param = |tape: &mut Tape, name: &str| leaf_param(tape, reg, store, name);

    // Patch projection, classification token, positional embedding.
    let pw = param(tape, "patch.w");
    let pb = param(tape, "patch.b");
    let cls = param(tape, "cls");
    let pos = param(tape, "pos");
    let mut seq = tape.linear(input, pw, Some(pb));
    seq = tape.concat_tokens(cls, seq);
    seq = tape.add_tokens(seq, pos);

    // Prompts are prepended in front of the encoded tokens, so the
    // classification token keeps its own row at `prompt_len`.
    let (prompt_len, deep) = match adaptation {
        Some(Adaptation::VptShallow { prompt_len }) => (*prompt_len, false),
        Some(Adaptation::VptDeep { prompt_len }) => (*prompt_len, true),
        _ => (0, false),
    };
    if prompt_len > 0 {
        let name = if deep { "vpt.blk0.prompts".to_string() } else { "vpt.prompts".to_string() };
        let pr = param(tape, &name);
        seq = tape.concat_tokens(pr, seq);
    }
    let cls_index = prompt_len;

    let ssf = matches!(adaptation, Some(Adaptation::Ssf));
    let adapter = matches!(adaptation, Some(Adaptation::Adapter { .. }));

    for i in 0..spec.blocks {
        if deep && i > 0 {
            // Each block's prompts replace the previous block's rows.
            let kept = tape.slice_tokens(seq, prompt_len, base_len);
            let pr = param(tape, &format!("vpt.blk{i}.prompts"));
            seq = tape.concat_tokens(pr, kept);
        }

        // Attention with pre-norm.
        let ln1g = param(tape, &format!("blk{i}.ln1.g"));
        let ln1b = param(tape, &format!("blk{i}.ln1.b"));
        let h1 = tape.layer_norm(seq, ln1g, ln1b, LN_EPS);
        let wq = param(tape, &format!("blk{i}.attn.wq"));
        let bq = param(tape, &format!("blk{i}.attn.bq"));
        let wk = param(tape, &format!("blk{i}.attn.wk"));
        let bk = param(tape, &format!("blk{i}.attn.bk"));
        let wv = param(tape, &format!("blk{i}.attn.wv"));
        let bv = param(tape, &format!("blk{i}.attn.bv"));
        let q = tape.linear(h1, wq, Some(bq));
        let k = tape.linear(h1, wk, Some(bk));
        let v = tape.linear(h1, wv, Some(bv));
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.col_slice(q, h * hd, hd);
            let kh = tape.col_slice(k, h * hd, hd);
            let vh = tape.col_slice(v, h * hd, hd);
            let scores = tape.batmul_t(qh, kh);
            let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let attn = tape.softmax_last(scores);
            head_outs.push(tape.batmul(attn, vh));
        }
        let ctx = tape.col_concat(&head_outs);
        let wo = param(tape, &format!("blk{i}.attn.wo"));
        let bo = param(tape, &format!("blk{i}.attn.bo"));
        let mut attn_out = tape.linear(ctx, wo, Some(bo));
        if ssf {
            let g = param(tape, &format!("ssf.blk{i}.attn.g"));
            let b = param(tape, &format!("ssf.blk{i}.attn.b"));
            attn_out = tape.affine_channels(attn_out, g, b);
        }
        seq = tape.add(seq, attn_out);

        // MLP with pre-norm; the adapter is a parallel bottleneck branch.
        let ln2g = param(tape, &format!("blk{i}.ln2.g"));
        let ln2b = param(tape, &format!("blk{i}.ln2.b"));
        let h2 = tape.layer_norm(seq, ln2g, ln2b, LN_EPS);
        let w1 = param(tape, &format!("blk{i}.mlp.w1"));
        let b1 = param(tape, &format!("blk{i}.mlp.b1"));
        let w2 = param(tape, &format!("blk{i}.mlp.w2"));
        let b2 = param(tape, &format!("blk{i}.mlp.b2"));
        let mid = tape.linear(h2, w1, Some(b1));
        let mid = tape.gelu(mid);
        let mut mlp_out = tape.linear(mid, w2, Some(b2));
        if ssf {
            let g = param(tape, &format!("ssf.blk{i}.mlp.g"));
            let b = param(tape, &format!("ssf.blk{i}.mlp.b"));
            mlp_out = tape.affine_channels(mlp_out, g, b);
        }
        if adapter {
            let down = param(tape, &format!("adapter.blk{i}.down"));
            let up = param(tape, &format!("adapter.blk{i}.up"));
            let branch = tape.linear(h2, down, None);
            let branch = tape.relu(branch);
            let branch = tape.linear(branch, up, None);
            mlp_out = tape.add(mlp_out, branch);
        }
        seq = tape.add(seq, mlp_out);
    }

    if spec.final_norm {
        let g = param(tape, "final_ln.g");
        let b = param(tape, "final_ln.b");
        seq = tape.layer_norm(seq, g, b, LN_EPS);
    }
    let features = tape.select_token(seq, cls_index);
    ForwardPass { features, pre_bn: Vec::new() }
}
