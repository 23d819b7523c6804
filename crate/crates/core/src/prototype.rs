//! Class prototypes and the cosine classifier.
//!
//! A prototype is the arithmetic mean embedding of a class's training
//! examples and serves directly as that class's classifier weight. The bank
//! is append-only: once registered, a prototype is never mutated, which is
//! what keeps earlier classes' logits frozen across later stages.

use std::collections::HashMap;

use ndarray::Array1;

use crate::data::LabeledExample;
use crate::embedder::{embed_batch, Embedder};
use crate::error::{Error, Result};

/// Append-only map from class id to prototype vector.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    feature_dim: usize,
    entries: Vec<(usize, Array1<f64>, f64)>, // (class, prototype, cached norm)
    index: HashMap<usize, usize>,
}

impl PrototypeBank {
    pub fn new(feature_dim: usize) -> Self {
        PrototypeBank { feature_dim, entries: Vec::new(), index: HashMap::new() }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registered class ids in registration order.
    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|(c, _, _)| *c).collect()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.index.contains_key(&class)
    }

    pub fn prototype(&self, class: usize) -> Option<&Array1<f64>> {
        self.index.get(&class).map(|&i| &self.entries[i].1)
    }

    /// Register a new class. Re-registering or changing width is refused;
    /// zero-norm prototypes indicate an upstream failure and are rejected.
    pub fn register(&mut self, class: usize, prototype: Array1<f64>) -> Result<()> {
        if prototype.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "prototype width {} != bank width {}",
                prototype.len(),
                self.feature_dim
            )));
        }
        if self.index.contains_key(&class) {
            return Err(Error::Protocol(format!("class {class} already registered")));
        }
        let norm = l2(&prototype);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("prototype for class {class} has zero norm")));
        }
        self.index.insert(class, self.entries.len());
        self.entries.push((class, prototype, norm));
        Ok(())
    }

    /// Cosine similarity of the feature to every prototype, in registration
    /// order. Scores lie in `[-1, 1]`.
    pub fn cosine_logits(&self, feature: &Array1<f64>) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::Protocol("empty prototype bank".into()));
        }
        if feature.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "feature width {} != bank width {}",
                feature.len(),
                self.feature_dim
            )));
        }
        let fnorm = l2(feature);
        if fnorm == 0.0 {
            return Err(Error::Degenerate("query feature has zero norm".into()));
        }
        Ok(self
            .entries
            .iter()
            .map(|(_, p, pnorm)| p.dot(feature) / (pnorm * fnorm))
            .collect())
    }

    /// Argmax class under cosine similarity; ties break to the lowest id.
    pub fn predict(&self, feature: &Array1<f64>) -> Result<usize> {
        let logits = self.cosine_logits(feature)?;
        let mut best = (self.entries[0].0, logits[0]);
        for ((class, _, _), &score) in self.entries.iter().zip(&logits).skip(1) {
            if score > best.1 || (score == best.1 && *class < best.0) {
                best = (*class, score);
            }
        }
        Ok(best.0)
    }

    /// Flatten into named tensors for the binary container; entry order is
    /// registration order.
    pub fn to_tensors(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        self.entries
            .iter()
            .map(|(c, p, _)| (format!("proto_{c}"), p.clone().into_dyn()))
            .collect()
    }

    pub fn from_tensors(feature_dim: usize, tensors: Vec<(String, ndarray::ArrayD<f64>)>) -> Result<Self> {
        let mut bank = PrototypeBank::new(feature_dim);
        for (name, value) in tensors {
            let class: usize = name
                .strip_prefix("proto_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Corrupt(format!("bad prototype entry name '{name}'")))?;
            let v = value
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Corrupt("prototype entry is not rank 1".into()))?;
            bank.register(class, v)?;
        }
        Ok(bank)
    }
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Mean embedding per class over exactly the examples carrying that label.
/// Results are returned in the order of `classes`. Sums are compensated
/// (Kahan) so within-class example order perturbs prototypes by at most a
/// few ulps.
pub fn compute_prototypes<E: Embedder + ?Sized>(
    embedder: &E,
    data: &[LabeledExample],
    classes: &[usize],
) -> Result<Vec<(usize, Array1<f64>)>> {
    let wanted: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let relevant: Vec<&LabeledExample> = data.iter().filter(|ex| wanted.contains_key(&ex.label)).collect();
    let inputs: Vec<&crate::data::Tensor> = relevant.iter().map(|ex| &ex.input).collect();
    let features = embed_batch(embedder, &inputs)?;
    let dim = embedder.dim();

    let mut sums = vec![Array1::<f64>::zeros(dim); classes.len()];
    let mut comps = vec![Array1::<f64>::zeros(dim); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (row, ex) in features.outer_iter().zip(&relevant) {
        let slot = wanted[&ex.label];
        counts[slot] += 1;
        let sum = &mut sums[slot];
        let comp = &mut comps[slot];
        for j in 0..dim {
            let y = row[j] - comp[j];
            let t = sum[j] + y;
            comp[j] = (t - sum[j]) - y;
            sum[j] = t;
        }
    }

    let mut out = Vec::with_capacity(classes.len());
    for (i, &class) in classes.iter().enumerate() {
        if counts[i] == 0 {
            return Err(Error::MissingClass { class });
        }
        let k = counts[i] as f64;
        let mut mean = Array1::<f64>::zeros(dim);
        for j in 0..dim {
            mean[j] = (sums[i][j] - comps[i][j]) / k;
        }
        out.push((class, mean));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn ex(values: Vec<f64>, label: usize) -> LabeledExample {
        let input = ArrayD::from_shape_vec(IxDyn(&[values.len()]), values).unwrap();
        LabeledExample { input, label }
    }

    fn identity(dim: usize) -> Backbone {
        let mut b = Backbone::identity(dim);
        b.freeze();
        b
    }

    #[test]
    fn single_example_prototype_is_the_embedding() {
        let e = identity(3);
        let data = vec![ex(vec![1.0, 2.0, 3.0], 0), ex(vec![-1.0, 0.5, 2.0], 1)];
        let protos = compute_prototypes(&e, &data, &[0, 1]).unwrap();
        assert_eq!(protos[0].1.to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(protos[1].1.to_vec(), vec![-1.0, 0.5, 2.0]);
    }

    #[test]
    fn duplicated_dataset_same_prototypes() {
        // Dyadic values keep every sum exact, so equality is bitwise.
        let e = identity(2);
        let data = vec![ex(vec![0.5, 0.25], 0), ex(vec![1.5, -0.75], 0)];
        let doubled: Vec<LabeledExample> = data.iter().chain(&data).cloned().collect();
        let a = compute_prototypes(&e, &data, &[0]).unwrap();
        let b = compute_prototypes(&e, &doubled, &[0]).unwrap();
        assert_eq!(a[0].1, b[0].1);
    }

    #[test]
    fn prototype_matches_scalar_loop_oracle() {
        let e = identity(4);
        let mut rng = crate::rng::named_rng(0, "proto/test");
        let mut data = Vec::new();
        for label in 0..3 {
            for _ in 0..3 {
                data.push(ex((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), label));
            }
        }
        let protos = compute_prototypes(&e, &data, &[0, 1, 2]).unwrap();
        for (class, proto) in &protos {
            let mut acc = vec![0.0f64; 4];
            let mut k = 0.0;
            for exm in data.iter().filter(|d| d.label == *class) {
                for j in 0..4 {
                    acc[j] += exm.input.as_slice().unwrap()[j];
                }
                k += 1.0;
            }
            for j in 0..4 {
                assert!((proto[j] - acc[j] / k).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_class_is_named() {
        let e = identity(2);
        let data = vec![ex(vec![1.0, 0.0], 0)];
        match compute_prototypes(&e, &data, &[0, 7]) {
            Err(Error::MissingClass { class }) => assert_eq!(class, 7),
            other => panic!("expected missing-class error, got {other:?}"),
        }
    }

    #[test]
    fn identical_embeddings_yield_exactly_v() {
        let e = identity(3);
        let v = vec![0.7306, -1.25, 3.1];
        // Four copies: the sum is exact doubling twice, so the mean is exact.
        let data: Vec<LabeledExample> = (0..4).map(|_| ex(v.clone(), 2)).collect();
        let protos = compute_prototypes(&e, &data, &[2]).unwrap();
        assert_eq!(protos[0].1.to_vec(), v);
    }

    #[test]
    fn cosine_self_orthogonal_and_oracle() {
        let mut bank = PrototypeBank::new(2);
        bank.register(0, Array1::from_vec(vec![2.0, 0.0])).unwrap();
        bank.register(1, Array1::from_vec(vec![0.0, 5.0])).unwrap();
        let logits = bank.cosine_logits(&Array1::from_vec(vec![2.0, 0.0])).unwrap();
        assert!((logits[0] - 1.0).abs() < 1e-9);
        assert_eq!(logits[1], 0.0);

        // Random prototypes and features against the explicit formula.
        let mut rng = crate::rng::named_rng(1, "cos/test");
        let mut bank = PrototypeBank::new(8);
        for c in 0..5 {
            bank.register(c, Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0))).unwrap();
        }
        for _ in 0..5 {
            let f = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0f64));
            let logits = bank.cosine_logits(&f).unwrap();
            for (i, c) in bank.classes().iter().enumerate() {
                let p = bank.prototype(*c).unwrap();
                let oracle = p.dot(&f) / (p.dot(p).sqrt() * f.dot(&f).sqrt());
                assert!((logits[i] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_cases_and_brute_force() {
        let mut bank = PrototypeBank::new(2);
        bank.register(3, Array1::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(bank.predict(&Array1::from_vec(vec![0.3, 0.9])).unwrap(), 3);

        bank.register(1, Array1::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(bank.predict(&Array1::from_vec(vec![0.0, 2.0])).unwrap(), 1);

        let mut rng = crate::rng::named_rng(2, "pred/test");
        let mut bank = PrototypeBank::new(6);
        for c in 0..10 {
            bank.register(c, Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0))).unwrap();
        }
        for _ in 0..100 {
            let f = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0f64));
            let logits = bank.cosine_logits(&f).unwrap();
            let classes = bank.classes();
            let mut best = 0usize;
            for i in 1..logits.len() {
                if logits[i] > logits[best] || (logits[i] == logits[best] && classes[i] < classes[best]) {
                    best = i;
                }
            }
            assert_eq!(bank.predict(&f).unwrap(), classes[best]);
        }
    }

    #[test]
    fn tie_breaks_to_lowest_class_id() {
        let mut bank = PrototypeBank::new(2);
        // Registration order 5 then 1; identical prototypes force a tie.
        bank.register(5, Array1::from_vec(vec![1.0, 1.0])).unwrap();
        bank.register(1, Array1::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(bank.predict(&Array1::from_vec(vec![1.0, 1.0])).unwrap(), 1);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = crate::rng::named_rng(3, "scale/test");
        let mut bank = PrototypeBank::new(5);
        let p = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0f64));
        bank.register(0, p.clone()).unwrap();
        bank.register(1, Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0))).unwrap();
        let f = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0f64));

        let base = bank.cosine_logits(&f).unwrap();
        let mut scaled_bank = PrototypeBank::new(5);
        scaled_bank.register(0, p.mapv(|v| v * 37.5)).unwrap();
        scaled_bank
            .register(1, bank.prototype(1).unwrap().clone())
            .unwrap();
        let scaled = scaled_bank.cosine_logits(&f).unwrap();
        assert!((base[0] - scaled[0]).abs() < 1e-9);

        let scaled_query = bank.cosine_logits(&f.mapv(|v| v * 0.003)).unwrap();
        for (a, b) in base.iter().zip(&scaled_query) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn append_only_keeps_earlier_logits() {
        let mut rng = crate::rng::named_rng(4, "append/test");
        let mut bank = PrototypeBank::new(4);
        for c in 0..3 {
            bank.register(c, Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0))).unwrap();
        }
        let f = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0f64));
        let before = bank.cosine_logits(&f).unwrap();
        for c in 3..6 {
            bank.register(c, Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0))).unwrap();
        }
        let after = bank.cosine_logits(&f).unwrap();
        assert_eq!(&after[..3], &before[..]);
    }

    #[test]
    fn permutation_invariance_within_tolerance() {
        let e = identity(3);
        let mut rng = crate::rng::named_rng(5, "perm/test");
        let mut data: Vec<LabeledExample> =
            (0..20).map(|_| ex((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0)).collect();
        let a = compute_prototypes(&e, &data, &[0]).unwrap();
        data.reverse();
        let b = compute_prototypes(&e, &data, &[0]).unwrap();
        for j in 0..3 {
            assert!((a[0].1[j] - b[0].1[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_vectors_error() {
        let mut bank = PrototypeBank::new(2);
        assert!(matches!(
            bank.register(0, Array1::zeros(2)),
            Err(Error::Degenerate(_))
        ));
        bank.register(0, Array1::from_vec(vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            bank.cosine_logits(&Array1::zeros(2)),
            Err(Error::Degenerate(_))
        ));
    }
}
