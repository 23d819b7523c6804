//! The embedding-function abstraction shared by classifiers and learners.

use ndarray::{Array1, Array2};

use crate::backbone::Backbone;
use crate::data::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Anything that maps an input tensor to a fixed-width feature vector.
/// Implementations must be pure in `(parameters, input)`.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, input: &Tensor) -> Result<Array1<f64>>;
}

impl Embedder for Backbone {
    fn dim(&self) -> usize {
        self.embed_dim()
    }

    fn embed(&self, input: &Tensor) -> Result<Array1<f64>> {
        Backbone::embed(self, input)
    }
}

/// Concatenation of an adapted and a pre-trained embedding function, adapted
/// features first. Both backbones must already be frozen.
#[derive(Debug, Clone)]
pub struct MergedEmbedder {
    adapted: Backbone,
    pretrained: Backbone,
}

impl MergedEmbedder {
    pub fn new(adapted: Backbone, pretrained: Backbone) -> Result<Self> {
        if !adapted.frozen() || !pretrained.frozen() {
            return Err(Error::config("merged embedder requires frozen backbones"));
        }
        Ok(MergedEmbedder { adapted, pretrained })
    }

    pub fn adapted(&self) -> &Backbone {
        &self.adapted
    }

    pub fn pretrained(&self) -> &Backbone {
        &self.pretrained
    }
}

impl Embedder for MergedEmbedder {
    fn dim(&self) -> usize {
        self.adapted.embed_dim() + self.pretrained.embed_dim()
    }

    fn embed(&self, input: &Tensor) -> Result<Array1<f64>> {
        let a = self.adapted.embed(input)?;
        let p = self.pretrained.embed(input)?;
        let mut out = Array1::<f64>::zeros(a.len() + p.len());
        out.slice_mut(ndarray::s![..a.len()]).assign(&a);
        out.slice_mut(ndarray::s![a.len()..]).assign(&p);
        Ok(out)
    }
}

/// Embed a batch of inputs, row per input. Fans out over the worker pool when
/// the `parallel` feature is active; row order always matches input order.
pub fn embed_batch<E: Embedder + ?Sized>(embedder: &E, inputs: &[&Tensor]) -> Result<Array2<f64>> {
    let rows = parallel::map_ordered(inputs, |x| embedder.embed(x));
    collect_rows(embedder.dim(), rows)
}

/// Single-threaded reference path used by the bench suite.
pub fn embed_batch_sequential<E: Embedder + ?Sized>(
    embedder: &E,
    inputs: &[&Tensor],
) -> Result<Array2<f64>> {
    let rows = parallel::map_sequential(inputs, |x| embedder.embed(x));
    collect_rows(embedder.dim(), rows)
}

fn collect_rows(dim: usize, rows: Vec<Result<Array1<f64>>>) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((rows.len(), dim));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn frozen_identity(dim: usize) -> Backbone {
        let mut b = Backbone::identity(dim);
        b.freeze();
        b
    }

    #[test]
    fn merged_concatenates_adapted_first() {
        let m = MergedEmbedder::new(frozen_identity(3), frozen_identity(3)).unwrap();
        assert_eq!(m.dim(), 6);
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap();
        let out = m.embed(&x).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        // Slices reproduce the individual embed calls bit for bit.
        let a = m.adapted().embed(&x).unwrap();
        let p = m.pretrained().embed(&x).unwrap();
        assert_eq!(out.slice(ndarray::s![..3]).to_vec(), a.to_vec());
        assert_eq!(out.slice(ndarray::s![3..]).to_vec(), p.to_vec());
    }

    #[test]
    fn merged_requires_frozen() {
        assert!(MergedEmbedder::new(Backbone::identity(2), frozen_identity(2)).is_err());
    }

    #[test]
    fn batch_matches_sequential() {
        let e = frozen_identity(2);
        let xs: Vec<Tensor> = (0..10)
            .map(|i| ArrayD::from_shape_vec(IxDyn(&[2]), vec![i as f64, -(i as f64)]).unwrap())
            .collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let a = embed_batch(&e, &refs).unwrap();
        let b = embed_batch_sequential(&e, &refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10, 2]);
    }
}
