//! Gaussian-cluster classification tasks.

use rand_distr::{Distribution, StandardNormal};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Norm of each class center; centers point in random directions.
    pub separation: f32,
    /// Leading coordinates that carry the clusters. The remaining
    /// `dim - informative` coordinates are class-independent noise.
    pub informative: usize,
    /// Standard deviation of the non-informative coordinates.
    pub nuisance_std: f32,
}

impl BlobSpec {
    /// Every coordinate informative.
    pub fn new(classes: usize, dim: usize, separation: f32) -> Self {
        Self {
            classes,
            dim,
            separation,
            informative: dim,
            nuisance_std: 0.0,
        }
    }

    /// Class centers: random unit directions in the informative coordinates,
    /// scaled by `separation`, zero elsewhere.
    pub fn centers(&self, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = seed::rng(seed, seed::tag::DATA, 0, 0);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.informative)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let mut c: Vec<f32> = v
                    .iter()
                    .map(|x| (x / norm * self.separation as f64) as f32)
                    .collect();
                c.resize(self.dim, 0.0);
                c
            })
            .collect()
    }
}

/// `samples` points, labels cycling through the classes. Informative
/// coordinates are unit-variance Gaussian around the class center, the rest
/// zero-mean with `nuisance_std`. Deterministic per seed.
pub fn make_blob_task(spec: &BlobSpec, samples: usize, seed: u64) -> Result<LabeledData> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "blob task needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.dim == 0 || samples == 0 {
        return Err(Error::InvalidArgument("blob task needs positive dim and samples".into()));
    }
    if spec.informative == 0 || spec.informative > spec.dim {
        return Err(Error::InvalidArgument(format!(
            "informative coordinates must lie in 1..={}, got {}",
            spec.dim, spec.informative
        )));
    }
    let centers = spec.centers(seed);
    let mut rng = seed::rng(seed, seed::tag::DATA, 1, 0);
    let mut data = Vec::with_capacity(samples * spec.dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % spec.classes;
        labels.push(c);
        for (j, &mu) in centers[c].iter().enumerate() {
            let z: f32 = StandardNormal.sample(&mut rng);
            let sd = if j < spec.informative { 1.0 } else { spec.nuisance_std };
            data.push(mu + sd * z);
        }
    }
    LabeledData::new(Tensor::matrix(samples, spec.dim, data), labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = BlobSpec::new(3, 4, 2.0);
        assert_eq!(
            make_blob_task(&spec, 30, 9).unwrap(),
            make_blob_task(&spec, 30, 9).unwrap()
        );
        assert_ne!(
            make_blob_task(&spec, 30, 9).unwrap(),
            make_blob_task(&spec, 30, 10).unwrap()
        );
    }

    #[test]
    fn rejects_single_class() {
        let spec = BlobSpec::new(1, 4, 2.0);
        assert!(make_blob_task(&spec, 10, 0).is_err());
    }
}
