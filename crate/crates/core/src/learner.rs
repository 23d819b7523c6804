//! Incremental-learning drivers.
//!
//! The adapt-and-merge learner tunes the backbone on the first stage(s) only,
//! freezes the concatenation of adapted and pre-trained embedding functions,
//! and from then on touches nothing but the prototype bank. The prototype-only
//! baseline skips adaptation entirely. The sequential-finetune baseline keeps
//! training every parameter with a growing linear head and exists to exhibit
//! forgetting. Each stage's training set is requested from the stream exactly
//! once and never retained.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{LabeledExample, Tensor};
use crate::embedder::{embed_batch, Embedder, MergedEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_stage, MetricsRecord};
use crate::peft::{self, LinearHead, PeftConfig};
use crate::projection::{fit_projector, ProjectionMethod, Projector};
use crate::prototype::{compute_prototypes, PrototypeBank};
use crate::rng::named_seed;
use crate::stream::IncrementalStream;
use ndarray::Array1;

/// Learner variants; the strings double as the config/CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerMode {
    Simplecil,
    Aper,
    FinetuneSeq,
    SimplecilPtm,
    SimplecilAdapted,
}

impl std::fmt::Display for LearnerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LearnerMode::Simplecil => "simplecil",
            LearnerMode::Aper => "aper",
            LearnerMode::FinetuneSeq => "finetune-seq",
            LearnerMode::SimplecilPtm => "simplecil-ptm",
            LearnerMode::SimplecilAdapted => "simplecil-adapted",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LearnerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplecil" => Ok(LearnerMode::Simplecil),
            "aper" => Ok(LearnerMode::Aper),
            "finetune-seq" => Ok(LearnerMode::FinetuneSeq),
            "simplecil-ptm" => Ok(LearnerMode::SimplecilPtm),
            "simplecil-adapted" => Ok(LearnerMode::SimplecilAdapted),
            other => Err(Error::config(format!("unknown learner mode '{other}'"))),
        }
    }
}

/// Optional feature compression, fitted on stage-1 training features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub method: ProjectionMethod,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub mode: LearnerMode,
    #[serde(default)]
    pub peft: PeftConfig,
    /// Number of adapting stages `T`. The adapt-and-merge learner requires
    /// `T >= 1`; the prototype-only baseline requires `T = 0`.
    #[serde(default)]
    pub adapt_stages: usize,
    pub seed: u64,
    #[serde(default)]
    pub projection: Option<ProjectionSpec>,
}

impl LearnerConfig {
    pub fn new(mode: LearnerMode, seed: u64) -> Self {
        let adapt_stages = if mode == LearnerMode::Aper { 1 } else { 0 };
        LearnerConfig { mode, peft: PeftConfig::default(), adapt_stages, seed, projection: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LearnerMode::Simplecil | LearnerMode::SimplecilPtm => {
                if self.adapt_stages != 0 {
                    return Err(Error::config(format!(
                        "mode {} requires adapt_stages = 0",
                        self.mode
                    )));
                }
            }
            LearnerMode::Aper => {
                if self.adapt_stages == 0 {
                    return Err(Error::config("mode aper requires adapt_stages >= 1"));
                }
            }
            _ => {}
        }
        self.peft.validate()
    }
}

/// The embedding function a run settles on.
#[derive(Debug, Clone)]
pub enum RunEmbedder {
    Single(Backbone),
    Merged(MergedEmbedder),
    Projected { inner: Box<RunEmbedder>, projector: Projector },
}

impl Embedder for RunEmbedder {
    fn dim(&self) -> usize {
        match self {
            RunEmbedder::Single(b) => b.embed_dim(),
            RunEmbedder::Merged(m) => m.dim(),
            RunEmbedder::Projected { projector, .. } => projector.output_dim(),
        }
    }

    fn embed(&self, input: &Tensor) -> Result<Array1<f64>> {
        match self {
            RunEmbedder::Single(b) => b.embed(input),
            RunEmbedder::Merged(m) => m.embed(input),
            RunEmbedder::Projected { inner, projector } => projector.project(&inner.embed(input)?),
        }
    }
}

impl RunEmbedder {
    /// Digest over every parameter tensor involved.
    pub fn param_hash(&self) -> String {
        match self {
            RunEmbedder::Single(b) => b.param_hash(),
            RunEmbedder::Merged(m) => {
                format!("{}{}", m.adapted().param_hash(), m.pretrained().param_hash())
            }
            RunEmbedder::Projected { inner, .. } => inner.param_hash(),
        }
    }
}

/// Growing linear head of the sequential-finetune baseline, with its
/// column-to-class mapping.
#[derive(Debug, Clone)]
pub struct SeqHead {
    pub head: LinearHead,
    pub col_classes: Vec<usize>,
}

impl SeqHead {
    pub fn predict(&self, feature: &Array1<f64>) -> usize {
        let logits = self.head.logits(feature);
        let mut best = 0usize;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        self.col_classes[best]
    }
}

/// Frozen outcome of a run.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub embedder: RunEmbedder,
    pub bank: PrototypeBank,
    /// Present only for the sequential-finetune baseline.
    pub head: Option<SeqHead>,
    pub stage: usize,
    /// Stage index after which no parameter changes; 0 means the embedder was
    /// frozen before the first stage.
    pub frozen_after: usize,
}

/// What an observer sees after each stage. Prototype-based modes expose the
/// embedder and bank; the finetune baseline only the record.
pub struct StageView<'a> {
    pub stage: usize,
    pub record: &'a MetricsRecord,
    pub embedder: Option<&'a RunEmbedder>,
    pub bank: Option<&'a PrototypeBank>,
}

/// Run the configured learner over the stream.
pub fn run(
    stream: &IncrementalStream,
    backbone: &Backbone,
    cfg: &LearnerConfig,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    run_observed(stream, backbone, cfg, &mut |_| Ok(()))
}

/// Multi-stage adaptation entry point: requires the adapt-and-merge mode and
/// `1 <= T <= B`.
pub fn run_multistage(
    stream: &IncrementalStream,
    backbone: &Backbone,
    cfg: &LearnerConfig,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    if cfg.mode != LearnerMode::Aper {
        return Err(Error::config("run_multistage requires mode aper"));
    }
    run(stream, backbone, cfg)
}

/// `run` with a per-stage callback, used by audits that need logits or
/// hashes at every stage.
pub fn run_observed(
    stream: &IncrementalStream,
    backbone: &Backbone,
    cfg: &LearnerConfig,
    observer: &mut dyn FnMut(&StageView<'_>) -> Result<()>,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    cfg.validate()?;
    match cfg.mode {
        LearnerMode::Simplecil | LearnerMode::SimplecilPtm => {
            let mut base = backbone.clone();
            base.freeze();
            prototype_run(stream, RunEmbedder::Single(base), cfg, 0, observer)
        }
        LearnerMode::SimplecilAdapted => {
            let d1 = stream.train_set(1)?;
            let adapted = peft::adapt(backbone, d1, &cfg.peft, named_seed(cfg.seed, "adapt/1"))?;
            let mut adapted = adapted;
            adapted.freeze();
            prototype_run_with_d1(stream, RunEmbedder::Single(adapted), cfg, 1, d1, observer)
        }
        LearnerMode::Aper => {
            if cfg.adapt_stages > stream.num_tasks() {
                return Err(Error::config(format!(
                    "adapt_stages {} exceeds number of tasks {}",
                    cfg.adapt_stages,
                    stream.num_tasks()
                )));
            }
            aper_run(stream, backbone, cfg, observer)
        }
        LearnerMode::FinetuneSeq => finetune_seq_run(stream, backbone, cfg, observer),
    }
}

fn fit_stage1_projection(
    embedder: RunEmbedder,
    d1: &[LabeledExample],
    cfg: &LearnerConfig,
) -> Result<(RunEmbedder, Option<Projector>)> {
    let Some(spec) = &cfg.projection else {
        return Ok((embedder, None));
    };
    let inputs: Vec<&Tensor> = d1.iter().map(|e| &e.input).collect();
    let feats = embed_batch(&embedder, &inputs)?;
    let projector = fit_projector(&feats, spec.k, spec.method, named_seed(cfg.seed, "projection"))?;
    Ok((
        RunEmbedder::Projected { inner: Box::new(embedder), projector: projector.clone() },
        Some(projector),
    ))
}

fn register_stage(
    embedder: &RunEmbedder,
    data: &[LabeledExample],
    classes: &[usize],
    bank: &mut PrototypeBank,
) -> Result<()> {
    for (class, proto) in compute_prototypes(embedder, data, classes)? {
        bank.register(class, proto)?;
    }
    Ok(())
}

fn eval_with_bank(
    embedder: &RunEmbedder,
    bank: &PrototypeBank,
    stream: &IncrementalStream,
    b: usize,
) -> Result<MetricsRecord> {
    evaluate_stage(
        |x| {
            let f = embedder.embed(x)?;
            bank.predict(&f)
        },
        stream,
        b,
    )
}

fn prototype_run(
    stream: &IncrementalStream,
    embedder: RunEmbedder,
    cfg: &LearnerConfig,
    frozen_after: usize,
    observer: &mut dyn FnMut(&StageView<'_>) -> Result<()>,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    let d1 = stream.train_set(1)?;
    prototype_run_with_d1(stream, embedder, cfg, frozen_after, d1, observer)
}

/// Shared prototype-only loop; `d1` was already fetched (exactly once).
fn prototype_run_with_d1(
    stream: &IncrementalStream,
    embedder: RunEmbedder,
    cfg: &LearnerConfig,
    frozen_after: usize,
    d1: &[LabeledExample],
    observer: &mut dyn FnMut(&StageView<'_>) -> Result<()>,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    let (embedder, _) = fit_stage1_projection(embedder, d1, cfg)?;
    let mut bank = PrototypeBank::new(embedder.dim());
    let mut records = Vec::with_capacity(stream.num_tasks());
    for b in 1..=stream.num_tasks() {
        let data = if b == 1 { d1 } else { stream.train_set(b)? };
        register_stage(&embedder, data, stream.label_space(b)?, &mut bank)?;
        let record = eval_with_bank(&embedder, &bank, stream, b)?;
        observer(&StageView { stage: b, record: &record, embedder: Some(&embedder), bank: Some(&bank) })?;
        records.push(record);
    }
    let stage = stream.num_tasks();
    Ok((LearnerState { embedder, bank, head: None, stage, frozen_after }, records))
}

/// Adapt on the first `T` stages, merge with the pre-trained branch, then
/// freeze. Prototypes registered under an earlier embedder stay as stored.
fn aper_run(
    stream: &IncrementalStream,
    backbone: &Backbone,
    cfg: &LearnerConfig,
    observer: &mut dyn FnMut(&StageView<'_>) -> Result<()>,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    let t_stages = cfg.adapt_stages;
    let mut pretrained = backbone.clone();
    pretrained.freeze();

    let mut working: Option<Backbone> = None;
    let mut embedder: Option<RunEmbedder> = None;
    let mut projector: Option<Projector> = None;
    let mut bank: Option<PrototypeBank> = None;
    let mut records = Vec::with_capacity(stream.num_tasks());

    for b in 1..=stream.num_tasks() {
        let data = stream.train_set(b)?;
        if b <= t_stages {
            match working.as_mut() {
                None => {
                    let adapted =
                        peft::adapt(backbone, data, &cfg.peft, named_seed(cfg.seed, &format!("adapt/{b}")))?;
                    working = Some(adapted);
                }
                Some(model) => {
                    peft::adapt_stage(model, data, &cfg.peft, named_seed(cfg.seed, &format!("adapt/{b}")))?;
                }
            }
            let mut snapshot = working.as_ref().unwrap().clone();
            snapshot.freeze();
            let merged = RunEmbedder::Merged(MergedEmbedder::new(snapshot, pretrained.clone())?);
            let wrapped = if b == 1 {
                let (e, p) = fit_stage1_projection(merged, data, cfg)?;
                projector = p;
                e
            } else {
                match &projector {
                    Some(p) => RunEmbedder::Projected { inner: Box::new(merged), projector: p.clone() },
                    None => merged,
                }
            };
            if bank.is_none() {
                bank = Some(PrototypeBank::new(wrapped.dim()));
            }
            embedder = Some(wrapped);
        }
        let embedder_ref = embedder.as_ref().expect("embedder exists from stage 1");
        let bank_ref = bank.as_mut().expect("bank exists from stage 1");
        register_stage(embedder_ref, data, stream.label_space(b)?, bank_ref)?;
        let record = eval_with_bank(embedder_ref, bank_ref, stream, b)?;
        observer(&StageView {
            stage: b,
            record: &record,
            embedder: Some(embedder_ref),
            bank: Some(bank_ref),
        })?;
        records.push(record);
    }
    let stage = stream.num_tasks();
    Ok((
        LearnerState {
            embedder: embedder.expect("at least one stage"),
            bank: bank.expect("at least one stage"),
            head: None,
            stage,
            frozen_after: t_stages,
        },
        records,
    ))
}

/// Cross-entropy training of all parameters on every stage with a growing
/// linear head; the baseline that forgets.
fn finetune_seq_run(
    stream: &IncrementalStream,
    backbone: &Backbone,
    cfg: &LearnerConfig,
    observer: &mut dyn FnMut(&StageView<'_>) -> Result<()>,
) -> Result<(LearnerState, Vec<MetricsRecord>)> {
    let mut model = backbone.thawed_clone();
    let mut head: Option<LinearHead> = None;
    let mut col_classes: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(stream.num_tasks());

    let trainable: Vec<String> = model
        .params()
        .names()
        .filter(|n| !crate::backbone::is_running_stat(n))
        .map(str::to_string)
        .collect();

    for b in 1..=stream.num_tasks() {
        let data = stream.train_set(b)?;
        let classes = stream.label_space(b)?;
        let head_seed = named_seed(cfg.seed, &format!("finetune/head/{b}"));
        match head.as_mut() {
            None => head = Some(LinearHead::init(model.embed_dim(), classes.len(), head_seed)),
            Some(h) => h.grow(classes.len(), head_seed),
        }
        col_classes.extend_from_slice(classes);
        let label_map: std::collections::BTreeMap<usize, usize> =
            col_classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();

        let opts = peft::TrainOptions {
            epochs: cfg.peft.epochs,
            batch_size: cfg.peft.batch_size,
            lr: cfg.peft.lr,
            momentum: cfg.peft.momentum,
            seed: named_seed(cfg.seed, &format!("finetune/train/{b}")),
        };
        peft::train_cross_entropy(
            &mut model,
            head.as_mut().unwrap(),
            data,
            &label_map,
            &trainable,
            true,
            crate::backbone::BnMode::Train,
            &opts,
        )?;

        let seq_head = SeqHead { head: head.clone().unwrap(), col_classes: col_classes.clone() };
        let model_ref = &model;
        let record = evaluate_stage(
            |x| {
                let f = model_ref.embed(x)?;
                Ok(seq_head.predict(&f))
            },
            stream,
            b,
        )?;
        observer(&StageView { stage: b, record: &record, embedder: None, bank: None })?;
        records.push(record);
    }

    let dim = model.embed_dim();
    let mut final_model = model;
    final_model.freeze();
    let stage = stream.num_tasks();
    Ok((
        LearnerState {
            embedder: RunEmbedder::Single(final_model),
            bank: PrototypeBank::new(dim),
            head: head.map(|h| SeqHead { head: h, col_classes }),
            stage,
            frozen_after: stage,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::peft::PeftMethod;
    use crate::stream::{build_stream, StreamConfig};

    fn gaussian_stream(classes: usize, inc: usize, seed: u64) -> IncrementalStream {
        let cfg = SyntheticConfig {
            classes,
            train_per_class: 6,
            test_per_class: 4,
            shape: vec![8],
            mean_separation: 2.0,
            noise_std: 0.3,
            shift: None,
        };
        let (train, test) = generate_synthetic(&cfg, seed).unwrap();
        build_stream(train, test, &StreamConfig { total_classes: classes, base_m: 0, inc_n: inc, seed })
            .unwrap()
    }

    #[test]
    fn config_invariants() {
        let mut cfg = LearnerConfig::new(LearnerMode::Simplecil, 0);
        cfg.adapt_stages = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = LearnerConfig::new(LearnerMode::Aper, 0);
        cfg.adapt_stages = 0;
        assert!(cfg.validate().is_err());
        assert!(LearnerConfig::new(LearnerMode::Aper, 0).validate().is_ok());
    }

    #[test]
    fn simplecil_matches_offline_ncm() {
        let data_cfg = SyntheticConfig {
            classes: 8,
            train_per_class: 6,
            test_per_class: 4,
            shape: vec![8],
            mean_separation: 2.0,
            noise_std: 0.3,
            shift: None,
        };
        let (train, test) = generate_synthetic(&data_cfg, 1).unwrap();
        let stream = build_stream(
            train.clone(),
            test.clone(),
            &StreamConfig { total_classes: 8, base_m: 0, inc_n: 2, seed: 1 },
        )
        .unwrap();
        let backbone = Backbone::identity(8);
        let cfg = LearnerConfig::new(LearnerMode::Simplecil, 3);
        let (state, records) = run(&stream, &backbone, &cfg).unwrap();
        assert_eq!(records.len(), 4);

        // Independent offline oracle: plain per-class means over the raw
        // inputs (the identity embedding), then cosine argmax by hand.
        let mut means = vec![(vec![0.0f64; 8], 0usize); 8];
        for ex in &train {
            let (sum, count) = &mut means[ex.label];
            for j in 0..8 {
                sum[j] += ex.input[[j]];
            }
            *count += 1;
        }
        let oracle = |x: &Tensor| -> usize {
            let xn = (0..8).map(|j| x[[j]] * x[[j]]).sum::<f64>().sqrt();
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (class, (sum, count)) in means.iter().enumerate() {
                let k = *count as f64;
                let dot: f64 = (0..8).map(|j| (sum[j] / k) * x[[j]]).sum();
                let pn: f64 = (0..8).map(|j| (sum[j] / k) * (sum[j] / k)).sum::<f64>().sqrt();
                let score = dot / (pn * xn);
                if score > best.1 || (score == best.1 && class < best.0) {
                    best = (class, score);
                }
            }
            best.0
        };
        for ex in &test {
            let f = state.embedder.embed(&ex.input).unwrap();
            assert_eq!(state.bank.predict(&f).unwrap(), oracle(&ex.input));
        }
    }

    #[test]
    fn exemplar_free_audit_and_coverage() {
        let stream = gaussian_stream(8, 2, 2);
        let backbone = Backbone::identity(8);
        let cfg = LearnerConfig::new(LearnerMode::Simplecil, 0);
        let mut seen_counts = Vec::new();
        let (_state, _records) = run_observed(&stream, &backbone, &cfg, &mut |view| {
            seen_counts.push(view.bank.unwrap().len());
            Ok(())
        })
        .unwrap();
        // Each stage's bank covers exactly the classes seen so far.
        assert_eq!(seen_counts, vec![2, 4, 6, 8]);
        // Each training task served exactly once.
        assert_eq!(stream.train_access_counts(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn aper_epochs0_ssf_equals_simplecil() {
        let spec = crate::backbone::VitSpec {
            image: [1, 8, 8],
            patch: 4,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            blocks: 1,
            final_norm: true,
        };
        let backbone = Backbone::new_toy_vit(spec, 11).unwrap();
        let data_cfg = SyntheticConfig {
            classes: 4,
            train_per_class: 4,
            test_per_class: 3,
            shape: vec![1, 8, 8],
            mean_separation: 1.5,
            noise_std: 0.3,
            shift: None,
        };
        let (train, test) = generate_synthetic(&data_cfg, 5).unwrap();
        let make_stream = || {
            build_stream(
                train.clone(),
                test.clone(),
                &StreamConfig { total_classes: 4, base_m: 0, inc_n: 2, seed: 9 },
            )
            .unwrap()
        };

        let mut aper_cfg = LearnerConfig::new(LearnerMode::Aper, 21);
        aper_cfg.peft.method = PeftMethod::Ssf;
        aper_cfg.peft.epochs = 0;
        let (_, aper_records) = run(&make_stream(), &backbone, &aper_cfg).unwrap();

        let simple_cfg = LearnerConfig::new(LearnerMode::Simplecil, 21);
        let (_, simple_records) = run(&make_stream(), &backbone, &simple_cfg).unwrap();

        for (a, s) in aper_records.iter().zip(&simple_records) {
            assert_eq!(a.correct_overall(), s.correct_overall());
            assert_eq!(a.n_test(), s.n_test());
        }
    }

    #[test]
    fn multistage_validation_and_t_equals_b_smoke() {
        let stream = gaussian_stream(4, 2, 3);
        let backbone = Backbone::identity(8);
        let mut cfg = LearnerConfig::new(LearnerMode::Aper, 1);
        cfg.peft.method = PeftMethod::Full;
        cfg.peft.epochs = 1;
        cfg.adapt_stages = 5; // > B = 2
        assert!(run(&stream, &backbone, &cfg).is_err());

        // Full adaptation of the identity backbone is rejected (no trainable
        // tensors exist for it), so multistage is exercised with a tiny CNN.
        let spec = crate::backbone::CnnSpec {
            image: [1, 8, 8],
            channels: vec![4],
            kernel: 3,
            strides: vec![2],
            bn_eps: 1e-5,
        };
        let cnn = Backbone::new_toy_cnn(spec, 1).unwrap();
        let data_cfg = SyntheticConfig {
            classes: 4,
            train_per_class: 3,
            test_per_class: 2,
            shape: vec![1, 8, 8],
            mean_separation: 1.5,
            noise_std: 0.3,
            shift: None,
        };
        let (train, test) = generate_synthetic(&data_cfg, 8).unwrap();
        let stream = build_stream(
            train,
            test,
            &StreamConfig { total_classes: 4, base_m: 0, inc_n: 2, seed: 2 },
        )
        .unwrap();
        let mut cfg = LearnerConfig::new(LearnerMode::Aper, 5);
        cfg.peft.method = PeftMethod::Bn;
        cfg.adapt_stages = 2; // T = B
        let (state, records) = run_multistage(&stream, &cnn, &cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(state.frozen_after, 2);
    }

    #[test]
    fn finetune_seq_produces_records_and_state() {
        let spec = crate::backbone::CnnSpec {
            image: [1, 8, 8],
            channels: vec![4],
            kernel: 3,
            strides: vec![2],
            bn_eps: 1e-5,
        };
        let cnn = Backbone::new_toy_cnn(spec, 4).unwrap();
        let data_cfg = SyntheticConfig {
            classes: 4,
            train_per_class: 4,
            test_per_class: 3,
            shape: vec![1, 8, 8],
            mean_separation: 2.0,
            noise_std: 0.2,
            shift: None,
        };
        let (train, test) = generate_synthetic(&data_cfg, 13).unwrap();
        let stream = build_stream(
            train,
            test,
            &StreamConfig { total_classes: 4, base_m: 0, inc_n: 2, seed: 5 },
        )
        .unwrap();
        let mut cfg = LearnerConfig::new(LearnerMode::FinetuneSeq, 6);
        cfg.peft.epochs = 2;
        cfg.peft.batch_size = 8;
        let (state, records) = run(&stream, &cnn, &cfg).unwrap();
        assert_eq!(records.len(), 2);
        let head = state.head.as_ref().unwrap();
        assert_eq!(head.head.classes(), 4);
        assert_eq!(head.col_classes.len(), 4);
        assert_eq!(stream.train_access_counts(), vec![1, 1]);
    }
}
