//! Synthetic domain-shift benchmarks.
//!
//! Two generators (rotated two-moons and affinely shifted Gaussian blobs),
//! vector-space weak/strong augmentations standing in for image-space
//! augmentation pipelines, per-class shot selection, and a lossless CSV
//! format. Generation is a pure function of (spec, seed).

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Labeled,
    Unlabeled,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Labeled => write!(f, "labeled"),
            Role::Unlabeled => write!(f, "unlabeled"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    samples: Tensor,
    labels: Vec<usize>,
    domain: Domain,
    roles: Vec<Role>,
    num_classes: usize,
}

impl DomainDataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        domain: Domain,
        roles: Vec<Role>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != samples.rows() || roles.len() != samples.rows() {
            return Err(Error::ShapeMismatch {
                op: "DomainDataset::new",
                detail: format!(
                    "{} rows, {} labels, {} roles",
                    samples.rows(),
                    labels.len(),
                    roles.len()
                ),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        // Source sets are fully labeled by construction.
        if domain == Domain::Source && roles.iter().any(|&r| r != Role::Labeled) {
            return Err(Error::InvariantViolation(
                "source datasets must be fully labeled".into(),
            ));
        }
        Ok(DomainDataset {
            samples,
            labels,
            domain,
            roles,
            num_classes,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MoonsSpec {
    pub n_per_domain: usize,
    pub noise: f64,
    pub rotation_degrees: f64,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        MoonsSpec {
            n_per_domain: 400,
            noise: 0.1,
            rotation_degrees: 30.0,
        }
    }
}

/// Two interleaved half-circles (two classes). The target domain is an
/// independent draw from the same distribution, rotated about its centroid.
pub fn gen_two_moons_shift(
    spec: &MoonsSpec,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if spec.n_per_domain < 4 {
        return Err(Error::InvalidParameter(format!(
            "two moons needs at least 4 samples per domain, got {}",
            spec.n_per_domain
        )));
    }
    if !(0.0..360.0).contains(&spec.rotation_degrees) {
        return Err(Error::InvalidParameter(format!(
            "rotation must be in [0, 360), got {}",
            spec.rotation_degrees
        )));
    }
    if spec.noise < 0.0 {
        return Err(Error::InvalidParameter("noise must be non-negative".into()));
    }

    let mut rng = stream_rng(seed, Stream::Dataset);
    let draw_moons = |rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<usize>)> {
        let n = spec.n_per_domain;
        let n0 = n / 2 + n % 2;
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (mut x, mut y) = if i < n0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            x += spec.noise * nx;
            y += spec.noise * ny;
            rows.push(vec![x, y]);
            labels.push(usize::from(i >= n0));
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    };

    let (source_x, source_y) = draw_moons(&mut rng)?;
    let (target_x, target_y) = draw_moons(&mut rng)?;
    let target_x = rotate_about_centroid(&target_x, spec.rotation_degrees);

    let n = spec.n_per_domain;
    let source = DomainDataset::new(source_x, source_y, Domain::Source, vec![Role::Labeled; n], 2)?;
    let target = DomainDataset::new(
        target_x,
        target_y,
        Domain::Target,
        vec![Role::Unlabeled; n],
        2,
    )?;
    Ok((source, target))
}

fn rotate_about_centroid(points: &Tensor, degrees: f64) -> Tensor {
    let (n, _) = (points.rows(), points.cols());
    let cx = (0..n).map(|i| points.at(i, 0)).sum::<f64>() / n as f64;
    let cy = (0..n).map(|i| points.at(i, 1)).sum::<f64>() / n as f64;
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let mut out = points.clone();
    for i in 0..n {
        let dx = points.at(i, 0) - cx;
        let dy = points.at(i, 1) - cy;
        out.set(i, 0, cx + c * dx - s * dy);
        out.set(i, 1, cy + s * dx + c * dy);
    }
    out
}

#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub sigma: f64,
    /// Affine map applied to the target draws; identity when absent.
    pub shift_matrix: Option<Tensor>,
    pub shift_bias: Option<Vec<f64>>,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            n_per_class: 100,
            input_dim: 4,
            sigma: 0.5,
            shift_matrix: None,
            shift_bias: None,
        }
    }
}

/// Isotropic Gaussian blobs at seeded random centers; the target domain is
/// the affine image of fresh draws from the same blobs.
pub fn gen_gauss_blobs_shift(
    spec: &BlobSpec,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if spec.classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "blobs need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.n_per_class == 0 || spec.input_dim == 0 {
        return Err(Error::InvalidParameter(
            "blobs need positive n_per_class and input_dim".into(),
        ));
    }
    let d = spec.input_dim;
    if let Some(m) = &spec.shift_matrix {
        if m.rows() != d || m.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "gen_gauss_blobs_shift",
                detail: format!("shift matrix {:?} for input dim {d}", m.shape()),
            });
        }
        if !is_invertible(m) {
            return Err(Error::InvalidParameter(
                "shift matrix is singular".into(),
            ));
        }
    }
    if let Some(b) = &spec.shift_bias {
        if b.len() != d {
            return Err(Error::ShapeMismatch {
                op: "gen_gauss_blobs_shift",
                detail: format!("shift bias of dim {} for input dim {d}", b.len()),
            });
        }
    }

    let mut rng = stream_rng(seed, Stream::Dataset);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();

    let draw = |rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<usize>)> {
        let mut rows = Vec::with_capacity(spec.classes * spec.n_per_class);
        let mut labels = Vec::with_capacity(spec.classes * spec.n_per_class);
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..spec.n_per_class {
                let row: Vec<f64> = center
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + spec.sigma * z
                    })
                    .collect();
                rows.push(row);
                labels.push(class);
            }
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    };

    let (source_x, source_y) = draw(&mut rng)?;
    let (mut target_x, target_y) = draw(&mut rng)?;
    if spec.shift_matrix.is_some() || spec.shift_bias.is_some() {
        let identity = {
            let mut m = Tensor::zeros(&[d, d]);
            for i in 0..d {
                m.set(i, i, 1.0);
            }
            m
        };
        let a = spec.shift_matrix.as_ref().unwrap_or(&identity);
        let zero_bias = vec![0.0; d];
        let b = spec.shift_bias.as_deref().unwrap_or(&zero_bias);
        target_x = target_x.matmul(&a.transpose())?;
        for i in 0..target_x.rows() {
            for j in 0..d {
                target_x.set(i, j, target_x.at(i, j) + b[j]);
            }
        }
    }

    let n = spec.classes * spec.n_per_class;
    let source = DomainDataset::new(
        source_x,
        source_y,
        Domain::Source,
        vec![Role::Labeled; n],
        spec.classes,
    )?;
    let target = DomainDataset::new(
        target_x,
        target_y,
        Domain::Target,
        vec![Role::Unlabeled; n],
        spec.classes,
    )?;
    Ok((source, target))
}

/// Gaussian elimination with partial pivoting; singular if a pivot vanishes.
fn is_invertible(m: &Tensor) -> bool {
    let d = m.rows();
    let mut a: Vec<Vec<f64>> = (0..d).map(|i| m.row(i).to_vec()).collect();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-10 {
            return false;
        }
        a.swap(col, pivot);
        for row in col + 1..d {
            let factor = a[row][col] / a[col][col];
            for k in col..d {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AugmentationConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    /// Per-coordinate zeroing probability of the strong view.
    pub strong_dropout_prob: f64,
    pub strong_scale_min: f64,
    pub strong_scale_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            weak_noise_sigma: 0.03,
            strong_noise_sigma: 0.15,
            strong_dropout_prob: 0.2,
            strong_scale_min: 0.7,
            strong_scale_max: 1.3,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weak_noise_sigma < 0.0 || self.strong_noise_sigma < 0.0 {
            return Err(Error::InvalidParameter(
                "augmentation sigmas must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.strong_dropout_prob) {
            return Err(Error::InvalidParameter(format!(
                "dropout probability must be in [0,1), got {}",
                self.strong_dropout_prob
            )));
        }
        if self.strong_scale_min <= 0.0 || self.strong_scale_max < self.strong_scale_min {
            return Err(Error::InvalidParameter(format!(
                "scale range [{}, {}] must be positive and ordered",
                self.strong_scale_min, self.strong_scale_max
            )));
        }
        Ok(())
    }
}

/// View A is the weak augmentation, view B the strong one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Weak,
    Strong,
}

/// Stochastic perturbation of a batch; labels and sample count are untouched.
///
/// Weak: additive Gaussian noise. Strong: per-coordinate scale jitter, then
/// additive Gaussian noise, then independent coordinate zeroing. Draw order
/// is row-major per pass, so a fixed rng state fixes the output.
pub fn augment(
    x: &Tensor,
    view: ViewKind,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let mut out = x.clone();
    let (n, d) = (x.rows(), x.cols());
    match view {
        ViewKind::Weak => {
            if cfg.weak_noise_sigma > 0.0 {
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += cfg.weak_noise_sigma * z;
                }
            }
        }
        ViewKind::Strong => {
            if cfg.strong_scale_min != 1.0 || cfg.strong_scale_max != 1.0 {
                for v in out.data_mut() {
                    *v *= rng.random_range(cfg.strong_scale_min..=cfg.strong_scale_max);
                }
            }
            if cfg.strong_noise_sigma > 0.0 {
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += cfg.strong_noise_sigma * z;
                }
            }
            if cfg.strong_dropout_prob > 0.0 {
                for i in 0..n {
                    for j in 0..d {
                        if rng.random::<f64>() < cfg.strong_dropout_prob {
                            out.set(i, j, 0.0);
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shot selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ShotSplit {
    pub shots: usize,
    pub seed: u64,
}

/// Mark exactly `shots` target samples per class as labeled (seeded uniform
/// choice without replacement); everything else stays unlabeled.
pub fn select_shots(target: &DomainDataset, split: &ShotSplit) -> Result<DomainDataset> {
    if split.shots == 0 {
        return Err(Error::SplitError("shots must be at least 1".into()));
    }
    let mut rng = stream_rng(split.seed, Stream::Shots);
    let mut roles = vec![Role::Unlabeled; target.len()];
    for class in 0..target.num_classes() {
        let mut members: Vec<usize> = target
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < split.shots {
            return Err(Error::SplitError(format!(
                "class {class} has {} target samples, fewer than {} shots",
                members.len(),
                split.shots
            )));
        }
        members.shuffle(&mut rng);
        for &i in members.iter().take(split.shots) {
            roles[i] = Role::Labeled;
        }
    }
    DomainDataset::new(
        target.samples().clone(),
        target.labels().to_vec(),
        Domain::Target,
        roles,
        target.num_classes(),
    )
}

// ---------------------------------------------------------------------------
// CSV import/export
//
// Header: x0,...,x{d-1},label,domain,role
// Floats carry 17 significant digits so the round-trip is lossless.
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn export_csv(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let d = dataset.input_dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("label,domain,role\n");
    for i in 0..dataset.len() {
        for v in dataset.samples().row(i) {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!(
            "{},{},{}\n",
            dataset.labels()[i],
            dataset.domain(),
            dataset.roles()[i]
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn import_csv(path: &Path) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse_err = |line: usize, detail: String| Error::ParseError {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[cols.len() - 3..] != ["label", "domain", "role"] {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let d = cols.len() - 3;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut roles = Vec::new();
    let mut domain = None;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(parse_err(
                lineno + 1,
                format!("expected {} fields, got {}", d + 3, fields.len()),
            ));
        }
        let mut row = Vec::with_capacity(d);
        for f in &fields[..d] {
            row.push(
                f.parse::<f64>()
                    .map_err(|e| parse_err(lineno + 1, format!("bad float {f:?}: {e}")))?,
            );
        }
        rows.push(row);
        labels.push(
            fields[d]
                .parse::<usize>()
                .map_err(|e| parse_err(lineno + 1, format!("bad label: {e}")))?,
        );
        let this_domain = match fields[d + 1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse_err(lineno + 1, format!("bad domain {other:?}"))),
        };
        match domain {
            None => domain = Some(this_domain),
            Some(prev) if prev == this_domain => {}
            Some(_) => {
                return Err(parse_err(lineno + 1, "mixed domains in one file".into()));
            }
        }
        roles.push(match fields[d + 2] {
            "labeled" => Role::Labeled,
            "unlabeled" => Role::Unlabeled,
            other => return Err(parse_err(lineno + 1, format!("bad role {other:?}"))),
        });
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    DomainDataset::new(
        Tensor::from_rows(&rows)?,
        labels,
        domain.unwrap(),
        roles,
        num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_mean(ds: &DomainDataset, class: usize) -> Vec<f64> {
        let d = ds.input_dim();
        let mut sum = vec![0.0; d];
        let mut count = 0.0;
        for (i, &l) in ds.labels().iter().enumerate() {
            if l == class {
                for (j, v) in ds.samples().row(i).iter().enumerate() {
                    sum[j] += v;
                }
                count += 1.0;
            }
        }
        sum.into_iter().map(|v| v / count).collect()
    }

    #[test]
    fn moons_same_seed_is_bit_identical() {
        let spec = MoonsSpec::default();
        let (s1, t1) = gen_two_moons_shift(&spec, 7).unwrap();
        let (s2, t2) = gen_two_moons_shift(&spec, 7).unwrap();
        assert_eq!(s1.samples().data(), s2.samples().data());
        assert_eq!(t1.samples().data(), t2.samples().data());
        assert_eq!(s1.labels(), s2.labels());
    }

    #[test]
    fn moons_zero_rotation_matches_source_distribution() {
        let spec = MoonsSpec {
            n_per_domain: 4000,
            noise: 0.1,
            rotation_degrees: 0.0,
        };
        let (source, target) = gen_two_moons_shift(&spec, 1).unwrap();
        for class in 0..2 {
            let ms = class_mean(&source, class);
            let mt = class_mean(&target, class);
            // Moon spread dominates the noise; ~0.45 per coordinate.
            let tol = 3.0 * 0.75 / (2000.0f64).sqrt();
            for (a, b) in ms.iter().zip(&mt) {
                assert!((a - b).abs() < tol, "means {a} vs {b}");
            }
        }
    }

    #[test]
    fn moons_half_turn_reflects_class_means() {
        let spec = MoonsSpec {
            n_per_domain: 4000,
            noise: 0.05,
            rotation_degrees: 180.0,
        };
        let (source, target) = gen_two_moons_shift(&spec, 3).unwrap();
        let n = source.len();
        let mut centroid = vec![0.0, 0.0];
        for i in 0..n {
            centroid[0] += source.samples().at(i, 0) / n as f64;
            centroid[1] += source.samples().at(i, 1) / n as f64;
        }
        for class in 0..2 {
            let ms = class_mean(&source, class);
            let mt = class_mean(&target, class);
            let tol = 3.0 * 1.5 * 0.75 / (2000.0f64).sqrt();
            for j in 0..2 {
                let reflected = 2.0 * centroid[j] - ms[j];
                assert!(
                    (mt[j] - reflected).abs() < tol,
                    "class {class} coord {j}: {} vs {reflected}",
                    mt[j]
                );
            }
        }
    }

    #[test]
    fn moons_rejects_bad_rotation() {
        let spec = MoonsSpec {
            rotation_degrees: 360.0,
            ..MoonsSpec::default()
        };
        assert!(gen_two_moons_shift(&spec, 0).is_err());
    }

    #[test]
    fn blobs_translation_shifts_class_means() {
        let spec = BlobSpec {
            classes: 3,
            n_per_class: 3000,
            input_dim: 3,
            sigma: 0.4,
            shift_matrix: None,
            shift_bias: Some(vec![1.0, -2.0, 0.5]),
        };
        let (source, target) = gen_gauss_blobs_shift(&spec, 4).unwrap();
        let tol = 3.0 * 1.5 * 0.4 / (3000.0f64).sqrt();
        for class in 0..3 {
            let ms = class_mean(&source, class);
            let mt = class_mean(&target, class);
            for j in 0..3 {
                let expect = ms[j] + spec.shift_bias.as_ref().unwrap()[j];
                assert!((mt[j] - expect).abs() < tol, "{} vs {expect}", mt[j]);
            }
        }
    }

    #[test]
    fn blobs_identity_shift_keeps_distribution() {
        let spec = BlobSpec {
            classes: 3,
            n_per_class: 3000,
            input_dim: 3,
            sigma: 0.4,
            shift_matrix: None,
            shift_bias: None,
        };
        let (source, target) = gen_gauss_blobs_shift(&spec, 6).unwrap();
        let tol = 3.0 * 1.5 * 0.4 / (3000.0f64).sqrt();
        for class in 0..3 {
            let ms = class_mean(&source, class);
            let mt = class_mean(&target, class);
            for j in 0..3 {
                assert!((mt[j] - ms[j]).abs() < tol, "{} vs {}", mt[j], ms[j]);
            }
        }
    }

    #[test]
    fn blobs_reject_singular_shift() {
        let spec = BlobSpec {
            input_dim: 2,
            shift_matrix: Some(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap()),
            ..BlobSpec::default()
        };
        assert!(gen_gauss_blobs_shift(&spec, 0).is_err());
    }

    #[test]
    fn blobs_deterministic_per_seed() {
        let spec = BlobSpec::default();
        let (s1, t1) = gen_gauss_blobs_shift(&spec, 9).unwrap();
        let (s2, t2) = gen_gauss_blobs_shift(&spec, 9).unwrap();
        assert_eq!(s1.samples().data(), s2.samples().data());
        assert_eq!(t1.samples().data(), t2.samples().data());
    }

    #[test]
    fn weak_augment_with_zero_sigma_is_identity() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cfg = AugmentationConfig {
            weak_noise_sigma: 0.0,
            ..AugmentationConfig::default()
        };
        let mut rng = stream_rng(0, Stream::Augment);
        let y = augment(&x, ViewKind::Weak, &cfg, &mut rng);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn neutral_strong_augment_is_identity() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let cfg = AugmentationConfig {
            strong_noise_sigma: 0.0,
            strong_dropout_prob: 0.0,
            strong_scale_min: 1.0,
            strong_scale_max: 1.0,
            ..AugmentationConfig::default()
        };
        let mut rng = stream_rng(0, Stream::Augment);
        let y = augment(&x, ViewKind::Strong, &cfg, &mut rng);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn weak_noise_variance_matches_sigma() {
        let x = Tensor::zeros(&[100, 4]);
        let cfg = AugmentationConfig::default();
        let mut rng = stream_rng(12, Stream::Augment);
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for _ in 0..25 {
            let y = augment(&x, ViewKind::Weak, &cfg, &mut rng);
            for v in y.data() {
                sum_sq += v * v;
                count += 1.0;
            }
        }
        let var = sum_sq / count;
        let expect = cfg.weak_noise_sigma * cfg.weak_noise_sigma;
        assert!(
            (var - expect).abs() < 0.05 * expect,
            "variance {var} vs {expect}"
        );
    }

    #[test]
    fn shots_select_exact_counts() {
        let spec = MoonsSpec::default();
        let (_, target) = gen_two_moons_shift(&spec, 5).unwrap();
        for shots in [1usize, 3] {
            let split = ShotSplit { shots, seed: 5 };
            let labeled = select_shots(&target, &split).unwrap();
            for class in 0..2 {
                let count = labeled
                    .roles()
                    .iter()
                    .zip(labeled.labels())
                    .filter(|(&r, &l)| r == Role::Labeled && l == class)
                    .count();
                assert_eq!(count, shots);
            }
            // Partition is exact and disjoint.
            assert_eq!(
                labeled.indices_with_role(Role::Labeled).len()
                    + labeled.indices_with_role(Role::Unlabeled).len(),
                labeled.len()
            );
        }
    }

    #[test]
    fn shots_are_deterministic() {
        let (_, target) = gen_two_moons_shift(&MoonsSpec::default(), 6).unwrap();
        let split = ShotSplit { shots: 3, seed: 42 };
        let a = select_shots(&target, &split).unwrap();
        let b = select_shots(&target, &split).unwrap();
        assert_eq!(a.roles(), b.roles());
    }

    #[test]
    fn shots_error_when_class_too_small() {
        let samples = Tensor::from_vec(&[3, 2], vec![0.0; 6]).unwrap();
        let target = DomainDataset::new(
            samples,
            vec![0, 0, 1],
            Domain::Target,
            vec![Role::Unlabeled; 3],
            2,
        )
        .unwrap();
        let split = ShotSplit { shots: 2, seed: 0 };
        assert!(matches!(
            select_shots(&target, &split),
            Err(Error::SplitError(_))
        ));
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let (_, target) = gen_two_moons_shift(&MoonsSpec::default(), 8).unwrap();
        let target = select_shots(&target, &ShotSplit { shots: 3, seed: 8 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.csv");
        export_csv(&target, &path).unwrap();
        let loaded = import_csv(&path).unwrap();
        assert_eq!(target.samples().data(), loaded.samples().data());
        assert_eq!(target.labels(), loaded.labels());
        assert_eq!(target.roles(), loaded.roles());
        assert_eq!(target.domain(), loaded.domain());
    }

    proptest::proptest! {
        #[test]
        fn augmentation_preserves_shape(view_strong in proptest::bool::ANY, seed in 0u64..1000) {
            let x = Tensor::from_vec(&[5, 3], (0..15).map(|i| i as f64).collect()).unwrap();
            let cfg = AugmentationConfig::default();
            let mut rng = stream_rng(seed, Stream::Augment);
            let view = if view_strong { ViewKind::Strong } else { ViewKind::Weak };
            let y = augment(&x, view, &cfg, &mut rng);
            proptest::prop_assert_eq!(y.shape(), x.shape());
        }
    }
}
