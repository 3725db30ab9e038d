//! Source class prototypes: unit-norm running means of per-class source
//! features, maintained by a momentum update and renormalized after every
//! update so the cosine-cost contract keeps holding. Prototypes are never
//! part of any gradient path.

use std::collections::BTreeMap;

use crate::autodiff::NORM_FLOOR;
use crate::data::DomainDataset;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// `[C, d]`, every row unit-norm.
    prototypes: Tensor,
    /// Momentum of the running update, in `[0, 1]`.
    momentum: f64,
    /// How many momentum updates each class has received.
    update_counts: Vec<u64>,
}

impl PrototypeBank {
    pub fn from_parts(prototypes: Tensor, momentum: f64, update_counts: Vec<u64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "prototype momentum must be in [0,1], got {momentum}"
            )));
        }
        if update_counts.len() != prototypes.rows() {
            return Err(Error::InvalidParameter(format!(
                "{} update counters for {} prototypes",
                update_counts.len(),
                prototypes.rows()
            )));
        }
        for i in 0..prototypes.rows() {
            let norm = prototypes.row_norm(i);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvariantViolation(format!(
                    "prototype row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(PrototypeBank {
            prototypes,
            momentum,
            update_counts,
        })
    }

    /// Prototypes from one full pass over the source set with the current
    /// parameters: per-class feature mean, then unit normalization.
    pub fn init_from_source(
        params: &ModelParams,
        source: &DomainDataset,
        momentum: f64,
    ) -> Result<Self> {
        let num_classes = params.config.num_classes;
        let features = params.features_plain(source.samples())?;
        let d = features.cols();
        let mut sums = vec![vec![0.0; d]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (i, &label) in source.labels().iter().enumerate() {
            counts[label] += 1;
            for (j, v) in features.row(i).iter().enumerate() {
                sums[label][j] += v;
            }
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass { class });
        }
        let rows: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let prototypes = Tensor::from_rows(&rows)?.l2_normalize_rows(NORM_FLOOR)?;
        PrototypeBank::from_parts(prototypes, momentum, vec![0; num_classes])
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Momentum update `h <- m h + (1-m) h_batch`, then renormalization.
    /// Classes absent from `means` are left untouched.
    pub fn ema_update(&mut self, means: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
        let d = self.prototypes.cols();
        for (&class, mean) in means {
            if class >= self.num_classes() {
                return Err(Error::InvalidParameter(format!(
                    "class {class} out of range for {} prototypes",
                    self.num_classes()
                )));
            }
            if mean.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "ema_update",
                    detail: format!("mean has dim {}, prototypes have {d}", mean.len()),
                });
            }
            let m = self.momentum;
            let blended: Vec<f64> = self
                .prototypes
                .row(class)
                .iter()
                .zip(mean)
                .map(|(h, hb)| m * h + (1.0 - m) * hb)
                .collect();
            let norm = blended.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateFeature {
                    row: class,
                    norm,
                    floor: NORM_FLOOR,
                });
            }
            for (j, v) in blended.iter().enumerate() {
                self.prototypes.set(class, j, v / norm);
            }
            self.update_counts[class] += 1;
        }
        Ok(())
    }
}

/// Per-class mean of the feature rows for every class present in the batch.
/// Absent classes are omitted from the map.
pub fn batch_class_means(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch {
            op: "batch_class_means",
            detail: format!("{} labels for {} rows", labels.len(), features.rows()),
        });
    }
    let d = features.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let entry = sums.entry(label).or_insert((vec![0.0; d], 0));
        for (j, v) in features.row(i).iter().enumerate() {
            entry.0[j] += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class, (sum, count))| {
            (
                class,
                sum.into_iter().map(|v| v / count as f64).collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gauss_blobs_shift, BlobSpec};
    use crate::model::ModelConfig;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn unit_rows(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Dataset);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d], data)
            .unwrap()
            .l2_normalize_rows(1e-12)
            .unwrap()
    }

    #[test]
    fn one_sample_per_class_copies_features() {
        let spec = BlobSpec {
            classes: 3,
            n_per_class: 1,
            input_dim: 4,
            sigma: 0.2,
            ..BlobSpec::default()
        };
        let (source, _) = gen_gauss_blobs_shift(&spec, 11).unwrap();
        let mut rng = stream_rng(0, Stream::Init);
        let mut cfg = ModelConfig::new(4, 3);
        cfg.hidden_dims = vec![6];
        cfg.feature_dim = 5;
        let params = ModelParams::init(cfg, &mut rng).unwrap();

        let bank = PrototypeBank::init_from_source(&params, &source, 0.9).unwrap();
        let features = params.features_plain(source.samples()).unwrap();
        for (i, &label) in source.labels().iter().enumerate() {
            for (p, f) in bank.prototypes().row(label).iter().zip(features.row(i)) {
                assert!((p - f).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_matches_loop_oracle() {
        let spec = BlobSpec {
            classes: 3,
            n_per_class: 17,
            input_dim: 4,
            sigma: 0.6,
            ..BlobSpec::default()
        };
        let (source, _) = gen_gauss_blobs_shift(&spec, 5).unwrap();
        let mut rng = stream_rng(9, Stream::Init);
        let mut cfg = ModelConfig::new(4, 3);
        cfg.hidden_dims = vec![6];
        cfg.feature_dim = 5;
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let bank = PrototypeBank::init_from_source(&params, &source, 0.9).unwrap();

        let features = params.features_plain(source.samples()).unwrap();
        for class in 0..3 {
            let mut sum = vec![0.0; 5];
            let mut count = 0.0;
            for (i, &label) in source.labels().iter().enumerate() {
                if label == class {
                    for (j, v) in features.row(i).iter().enumerate() {
                        sum[j] += v;
                    }
                    count += 1.0;
                }
            }
            let norm = sum.iter().map(|v| (v / count).powi(2)).sum::<f64>().sqrt();
            for (j, v) in sum.iter().enumerate() {
                assert!((bank.prototypes().at(class, j) - v / count / norm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_class_is_an_error() {
        let spec = BlobSpec {
            classes: 2,
            n_per_class: 5,
            input_dim: 3,
            ..BlobSpec::default()
        };
        let (mut source, _) = gen_gauss_blobs_shift(&spec, 3).unwrap();
        for l in source.labels_mut() {
            *l = 0;
        }
        let mut rng = stream_rng(1, Stream::Init);
        let mut cfg = ModelConfig::new(3, 2);
        cfg.hidden_dims = vec![4];
        cfg.feature_dim = 3;
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        assert!(matches!(
            PrototypeBank::init_from_source(&params, &source, 0.9),
            Err(Error::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn batch_means_single_class() {
        let features = unit_rows(2, 4, 3);
        let means = batch_class_means(&features, &[2, 2, 2, 2], 5).unwrap();
        assert_eq!(means.len(), 1);
        assert!(means.contains_key(&2));
    }

    #[test]
    fn batch_means_balanced_matches_loop() {
        let features = unit_rows(3, 6, 3);
        let labels = [0, 1, 2, 0, 1, 2];
        let means = batch_class_means(&features, &labels, 3).unwrap();
        assert_eq!(means.len(), 3);
        for class in 0..3 {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            for j in 0..3 {
                let expect: f64 =
                    rows.iter().map(|&i| features.at(i, j)).sum::<f64>() / rows.len() as f64;
                assert!((means[&class][j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_means_empty_batch() {
        let features = Tensor::zeros(&[1, 3]);
        // zero-row batches cannot be expressed, so use the labels-empty path
        let means = batch_class_means(&features.select_rows(&[]), &[], 3).unwrap();
        assert!(means.is_empty());
    }

    #[test]
    fn ema_momentum_one_is_identity() {
        let protos = unit_rows(4, 3, 4);
        let mut bank = PrototypeBank::from_parts(protos.clone(), 1.0, vec![0; 3]).unwrap();
        let mut means = BTreeMap::new();
        means.insert(1usize, vec![0.5, 0.5, 0.5, 0.5]);
        bank.ema_update(&means).unwrap();
        for (a, b) in bank.prototypes().data().iter().zip(protos.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_momentum_zero_replaces_with_normalized_mean() {
        let protos = unit_rows(5, 2, 3);
        let mut bank = PrototypeBank::from_parts(protos, 0.0, vec![0; 2]).unwrap();
        let mut means = BTreeMap::new();
        means.insert(0usize, vec![3.0, 0.0, 4.0]);
        bank.ema_update(&means).unwrap();
        assert!((bank.prototypes().at(0, 0) - 0.6).abs() < 1e-12);
        assert!((bank.prototypes().at(0, 2) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ema_hand_computed_blend() {
        // m h + (1-m) h_batch = [0.9, 0.1], normalized by sqrt(0.82).
        let protos = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let mut bank = PrototypeBank::from_parts(protos, 0.9, vec![0]).unwrap();
        let mut means = BTreeMap::new();
        means.insert(0usize, vec![0.0, 1.0]);
        bank.ema_update(&means).unwrap();
        assert!((bank.prototypes().at(0, 0) - 0.99388).abs() < 1e-5);
        assert!((bank.prototypes().at(0, 1) - 0.11043).abs() < 1e-5);
        assert_eq!(bank.update_counts(), &[1]);
    }

    #[test]
    fn ema_fixed_point_and_absent_classes() {
        let protos = unit_rows(6, 3, 4);
        let mut bank = PrototypeBank::from_parts(protos.clone(), 0.9, vec![0; 3]).unwrap();
        let mut means = BTreeMap::new();
        means.insert(1usize, protos.row(1).to_vec());
        bank.ema_update(&means).unwrap();
        // Fixed point within 1e-12 for the updated class.
        for (a, b) in bank.prototypes().row(1).iter().zip(protos.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        // Bitwise unchanged for the absent classes.
        assert_eq!(bank.prototypes().row(0), protos.row(0));
        assert_eq!(bank.prototypes().row(2), protos.row(2));
    }
}
