//! Straight-line re-implementation of the transformer forward pass,
//! independent of the tape, used as an oracle for `embed`.

use aper_core::backbone::{Backbone, VitSpec};
use aper_core::data::Tensor;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;

const LN_EPS: f64 = 1e-6;

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let d = x.shape()[1] as f64;
    let mut y = x.clone();
    for mut row in y.outer_iter_mut() {
        let mu = row.sum() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * r * g[j] + b[j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn mat(b: &Backbone, name: &str) -> Array2<f64> {
    b.params().get(name).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn vec1(b: &Backbone, name: &str) -> Array1<f64> {
    b.params().get(name).clone().into_dimensionality::<ndarray::Ix1>().unwrap()
}

/// Full forward pass, written independently of the autodiff graph.
fn oracle_embed(b: &Backbone, spec: &VitSpec, image: &Tensor) -> Array1<f64> {
    let p = spec.patch;
    let (c, h, w) = (spec.image[0], spec.image[1], spec.image[2]);
    let (gh, gw) = (h / p, w / p);
    let mut patches = Array2::<f64>::zeros((gh * gw, c * p * p));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut k = 0;
            for ci in 0..c {
                for di in 0..p {
                    for dj in 0..p {
                        patches[[gi * gw + gj, k]] = image[[ci, gi * p + di, gj * p + dj]];
                        k += 1;
                    }
                }
            }
        }
    }
    let proj = patches.dot(&mat(b, "patch.w")) + &vec1(b, "patch.b");
    let l = spec.seq_len();
    let d = spec.dim;
    let mut seq = Array2::<f64>::zeros((l, d));
    seq.row_mut(0).assign(&mat(b, "cls").row(0));
    seq.slice_mut(ndarray::s![1.., ..]).assign(&proj);
    seq += &mat(b, "pos");

    let heads = spec.heads;
    let hd = d / heads;
    for i in 0..spec.blocks {
        let h1 = layer_norm(&seq, &vec1(b, &format!("blk{i}.ln1.g")), &vec1(b, &format!("blk{i}.ln1.b")));
        let q = h1.dot(&mat(b, &format!("blk{i}.attn.wq"))) + &vec1(b, &format!("blk{i}.attn.bq"));
        let k = h1.dot(&mat(b, &format!("blk{i}.attn.wk"))) + &vec1(b, &format!("blk{i}.attn.bk"));
        let v = h1.dot(&mat(b, &format!("blk{i}.attn.wv"))) + &vec1(b, &format!("blk{i}.attn.bv"));
        let mut ctx = Array2::<f64>::zeros((l, d));
        for hh in 0..heads {
            let cols = ndarray::s![.., hh * hd..(hh + 1) * hd];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s / (hd as f64).sqrt());
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
        }
        let attn_out = ctx.dot(&mat(b, &format!("blk{i}.attn.wo"))) + &vec1(b, &format!("blk{i}.attn.bo"));
        seq += &attn_out;

        let h2 = layer_norm(&seq, &vec1(b, &format!("blk{i}.ln2.g")), &vec1(b, &format!("blk{i}.ln2.b")));
        let mid = (h2.dot(&mat(b, &format!("blk{i}.mlp.w1"))) + &vec1(b, &format!("blk{i}.mlp.b1")))
            .mapv(gelu);
        let mlp_out = mid.dot(&mat(b, &format!("blk{i}.mlp.w2"))) + &vec1(b, &format!("blk{i}.mlp.b2"));
        seq += &mlp_out;
    }
    let seq = layer_norm(&seq, &vec1(b, "final_ln.g"), &vec1(b, "final_ln.b"));
    seq.row(0).to_owned()
}

#[test]
fn embed_matches_straight_line_forward() {
    let spec = VitSpec {
        image: [2, 8, 8],
        patch: 4,
        dim: 16,
        heads: 2,
        mlp_ratio: 3,
        blocks: 2,
        final_norm: true,
    };
    let backbone = Backbone::new_toy_vit(spec, 42).unwrap();
    let mut rng = aper_core::rng::named_rng(0, "oracle/inputs");
    for _ in 0..5 {
        let image = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let got = backbone.embed(&image).unwrap();
        let want = oracle_embed(&backbone, &spec, &image);
        for j in 0..16 {
            assert!(
                (got[j] - want[j]).abs() < 1e-12,
                "coordinate {j}: {} vs {}",
                got[j],
                want[j]
            );
        }
    }
}
