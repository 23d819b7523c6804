//! Finite-difference gradient checks for both backbone kinds and every
//! gradient-trained adaptation method, on small models. Central differences
//! with step 1e-4 must agree with the analytic gradients to a relative error
//! below 1e-4 on sampled coordinates of every trainable tensor.

use aper_core::backbone::{Backbone, BnMode, CnnSpec, VitSpec};
use aper_core::data::{generate_synthetic, LabeledExample, SyntheticConfig};
use aper_core::gradcheck::check_adaptation_grads;
use aper_core::peft::{attach_method, label_columns, trainable_names, LinearHead, PeftConfig, PeftMethod};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn tiny_vit(seed: u64) -> Backbone {
    let spec = VitSpec {
        image: [1, 8, 8],
        patch: 4,
        dim: 12,
        heads: 2,
        mlp_ratio: 2,
        blocks: 2,
        final_norm: true,
    };
    Backbone::new_toy_vit(spec, seed).unwrap()
}

fn tiny_cnn(seed: u64) -> Backbone {
    let spec = CnnSpec {
        image: [1, 8, 8],
        channels: vec![3, 4],
        kernel: 3,
        strides: vec![2, 2],
        bn_eps: 1e-5,
    };
    Backbone::new_toy_cnn(spec, seed).unwrap()
}

fn batch(shape: &[usize], classes: usize, seed: u64) -> Vec<LabeledExample> {
    let cfg = SyntheticConfig {
        classes,
        train_per_class: 2,
        test_per_class: 1,
        shape: shape.to_vec(),
        mean_separation: 1.0,
        noise_std: 0.4,
        shift: None,
    };
    generate_synthetic(&cfg, seed).unwrap().0
}

fn run_check(backbone: &Backbone, method: PeftMethod, bn_mode: BnMode, seed: u64) {
    let cfg = PeftConfig { method, prompt_len: 3, adapter_dim: 4, ..PeftConfig::default() };
    let model = attach_method(backbone, &cfg, seed).unwrap();
    let shape = model.input_shape().unwrap();
    let data = batch(&shape, 3, seed + 100);
    let label_map = label_columns(&data);
    let head = LinearHead::init(model.embed_dim(), label_map.len(), seed + 200);

    let mut tensors = trainable_names(&model, method);
    tensors.push("head.w".to_string());
    tensors.push("head.b".to_string());
    assert!(!tensors.is_empty());

    let reports =
        check_adaptation_grads(&model, &head, &data, &label_map, &tensors, bn_mode, STEP, 5, seed + 300)
            .unwrap();
    for r in &reports {
        assert!(
            r.max_rel_err < TOL,
            "{method}: tensor {} rel err {}",
            r.tensor,
            r.max_rel_err
        );
    }
}

#[test]
fn vit_full_finetune_gradients() {
    run_check(&tiny_vit(1), PeftMethod::Full, BnMode::Eval, 10);
}

#[test]
fn vit_vpt_shallow_gradients() {
    run_check(&tiny_vit(2), PeftMethod::VptShallow, BnMode::Eval, 20);
}

#[test]
fn vit_vpt_deep_gradients() {
    run_check(&tiny_vit(3), PeftMethod::VptDeep, BnMode::Eval, 30);
}

#[test]
fn vit_ssf_gradients() {
    run_check(&tiny_vit(4), PeftMethod::Ssf, BnMode::Eval, 40);
}

#[test]
fn vit_adapter_gradients() {
    run_check(&tiny_vit(5), PeftMethod::Adapter, BnMode::Eval, 50);
}

#[test]
fn cnn_full_finetune_gradients_train_mode_bn() {
    run_check(&tiny_cnn(6), PeftMethod::Full, BnMode::Train, 60);
}

#[test]
fn cnn_ssf_gradients_eval_mode_bn() {
    run_check(&tiny_cnn(7), PeftMethod::Ssf, BnMode::Eval, 70);
}
