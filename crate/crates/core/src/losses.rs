//! The four training losses.
//!
//! Cross-entropy over labeled batches, the class-wise contrastive clustering
//! loss built from the cross-correlation of two views' predictions (plus its
//! sample-wise ablation variant), the thresholded pseudo-label consistency
//! loss, and the weighted total.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraVariant {
    ClassWise,
    SampleWise,
}

impl IntraVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "class_wise" => Ok(IntraVariant::ClassWise),
            "sample_wise" => Ok(IntraVariant::SampleWise),
            other => Err(Error::Config(format!(
                "intra_variant must be class_wise or sample_wise, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            IntraVariant::ClassWise => "class_wise",
            IntraVariant::SampleWise => "sample_wise",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntraConfig {
    /// Additive denominator floor that keeps the row normalization total
    /// when a class receives zero assignment in a batch.
    pub row_sum_floor: f64,
    pub variant: IntraVariant,
}

impl Default for IntraConfig {
    fn default() -> Self {
        IntraConfig {
            row_sum_floor: 1e-8,
            variant: IntraVariant::ClassWise,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabelConfig {
    /// Confidence threshold on the sharpened weak-view prediction.
    pub threshold: f64,
    /// Sharpening temperature applied to the weak view before thresholding.
    pub temperature: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            threshold: 0.95,
            temperature: 1.0,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "pseudo-label threshold must be in (0,1], got {}",
                self.threshold
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pseudo-label temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Mean over the batch of `-log p[label]`, with the log floored so an
/// exactly-zero probability stays finite.
pub fn cross_entropy(tape: &mut Tape, predictions: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = {
        let p = tape.value(predictions);
        (p.rows(), p.cols())
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let mut onehot = Tensor::zeros(&[n, c]);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        onehot.set(i, label, 1.0);
    }
    let logp = tape.log(predictions);
    let picked = tape.frobenius_inner(&onehot, logp)?;
    Ok(tape.scalar_mul(picked, -1.0 / n as f64))
}

/// `(1/2k) (||phi(L) - I||_1 + ||phi(L^t) - I||_1)` for a k x k correlation
/// matrix node, where phi divides each row by (row sum + floor) and
/// `||.||_1` sums absolute entries.
fn correlation_gap(tape: &mut Tape, lambda: Var, floor: f64) -> Result<Var> {
    let k = tape.value(lambda).rows();
    let mut eye = Tensor::zeros(&[k, k]);
    for i in 0..k {
        eye.set(i, i, 1.0);
    }

    let one_side = |tape: &mut Tape, m: Var| -> Result<Var> {
        let normed = tape.row_normalize_floored(m, floor)?;
        let eye_node = tape.constant(eye.clone());
        let diff = tape.sub(normed, eye_node)?;
        let absd = tape.abs(diff);
        Ok(tape.sum(absd))
    };

    let forward = one_side(tape, lambda)?;
    let lambda_t = tape.transpose(lambda);
    let backward = one_side(tape, lambda_t)?;
    let total = tape.add(forward, backward)?;
    Ok(tape.scalar_mul(total, 1.0 / (2.0 * k as f64)))
}

/// Class-wise contrastive clustering loss on the C x C cross-correlation
/// matrix of the two views' batch predictions. Gradient flows through both.
pub fn intra_loss(tape: &mut Tape, p_a: Var, p_b: Var, cfg: &IntraConfig) -> Result<Var> {
    if cfg.variant != IntraVariant::ClassWise {
        return Err(Error::InvalidParameter(
            "intra_loss requires variant = class_wise".into(),
        ));
    }
    check_same_shape(tape, p_a, p_b)?;
    let pa_t = tape.transpose(p_a);
    let lambda = tape.matmul(pa_t, p_b)?;
    correlation_gap(tape, lambda, cfg.row_sum_floor)
}

/// Ablation variant: the same gap on the n x n sample-wise correlation
/// matrix, normalized by 1/(2n).
pub fn intra_loss_samplewise(
    tape: &mut Tape,
    p_a: Var,
    p_b: Var,
    cfg: &IntraConfig,
) -> Result<Var> {
    if cfg.variant != IntraVariant::SampleWise {
        return Err(Error::InvalidParameter(
            "intra_loss_samplewise requires variant = sample_wise".into(),
        ));
    }
    check_same_shape(tape, p_a, p_b)?;
    let pb_t = tape.transpose(p_b);
    let lambda = tape.matmul(p_a, pb_t)?;
    correlation_gap(tape, lambda, cfg.row_sum_floor)
}

fn check_same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op: "intra_loss",
            detail: format!(
                "{:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            ),
        });
    }
    Ok(())
}

/// Per sample: `-sum_i 1(p_i^weak >= tau) log p_i^strong`, averaged over the
/// whole batch (unconfident samples contribute zero). The weak-view
/// distribution arrives as a plain tensor, so no gradient can reach it.
pub fn pseudo_label_loss(
    tape: &mut Tape,
    p_a_sharpened: &Tensor,
    p_b: Var,
    cfg: &PseudoLabelConfig,
) -> Result<Var> {
    cfg.validate()?;
    if p_a_sharpened.shape() != tape.value(p_b).shape() {
        return Err(Error::ShapeMismatch {
            op: "pseudo_label_loss",
            detail: format!(
                "{:?} vs {:?}",
                p_a_sharpened.shape(),
                tape.value(p_b).shape()
            ),
        });
    }
    let n = p_a_sharpened.rows();
    let mask = p_a_sharpened.map(|v| if v >= cfg.threshold { 1.0 } else { 0.0 });
    let logp = tape.log(p_b);
    let picked = tape.frobenius_inner(&mask, logp)?;
    Ok(tape.scalar_mul(picked, -1.0 / n as f64))
}

/// Fraction of rows whose sharpened weak-view confidence clears `tau`.
pub fn confident_fraction(p_a_sharpened: &Tensor, threshold: f64) -> f64 {
    let n = p_a_sharpened.rows();
    if n == 0 {
        return 0.0;
    }
    let confident = (0..n)
        .filter(|&i| {
            p_a_sharpened
                .row(i)
                .iter()
                .any(|&v| v >= threshold)
        })
        .count();
    confident as f64 / n as f64
}

/// `ce + pl + lambda1 * inter + lambda2 * intra` over scalar nodes.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    pl: Var,
    inter: Var,
    intra: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "loss weights must be non-negative, got {lambda1}, {lambda2}"
        )));
    }
    for (name, v) in [("ce", ce), ("pl", pl), ("inter", inter), ("intra", intra)] {
        if !tape.value(v).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                detail: format!("{name} is not a scalar"),
            });
        }
    }
    let supervised = tape.add(ce, pl)?;
    let inter_w = tape.scalar_mul(inter, lambda1);
    let intra_w = tape.scalar_mul(intra, lambda2);
    let reg = tape.add(inter_w, intra_w)?;
    tape.add(supervised, reg)
}
