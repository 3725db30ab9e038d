//! Feature extractor and classifier.
//!
//! The extractor is a small MLP (tanh after every affine layer) whose output
//! rows are projected to the unit sphere, so cosine costs and the cosine
//! classifier both operate on unit vectors. The classifier is a temperature-
//! scaled cosine head by default, with a plain affine head as a config
//! fallback.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::prototypes::PrototypeBank;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Cosine,
    Linear,
}

impl ClassifierKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ClassifierKind::Cosine),
            "linear" => Ok(ClassifierKind::Linear),
            other => Err(Error::Config(format!(
                "classifier must be cosine or linear, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierKind::Cosine => "cosine",
            ClassifierKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub classifier: ClassifierKind,
    /// Temperature dividing the cosine logits (ignored by the linear head).
    pub classifier_temperature: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![32],
            feature_dim: 16,
            num_classes,
            classifier: ClassifierKind::Cosine,
            classifier_temperature: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidParameter(
                "model dimensions must be positive".into(),
            ));
        }
        if self.classifier_temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "classifier temperature must be positive, got {}",
                self.classifier_temperature
            )));
        }
        Ok(())
    }
}

/// All trainable tensors of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Extractor layers, each (weight `[in, out]`, bias `[1, out]`).
    pub layers: Vec<(Tensor, Tensor)>,
    /// Classifier weight `[C, d]`, row per class.
    pub classifier_w: Tensor,
    /// Bias of the linear head; absent in cosine mode.
    pub classifier_b: Option<Tensor>,
}

impl ModelParams {
    /// Symmetric fan-scaled uniform init for weights and biases; cosine
    /// classifier rows start unit-norm. Biases must not start at zero: a
    /// strongly-augmented row can be dropped to all zeros, and a zero-bias
    /// network would map it to an exactly-zero feature, which the unit-norm
    /// projection rejects.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.feature_dim);

        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-a..a))
                .collect();
            let bias = (0..fan_out).map(|_| rng.random_range(-a..a)).collect();
            layers.push((
                Tensor::from_vec(&[fan_in, fan_out], data)?,
                Tensor::from_vec(&[1, fan_out], bias)?,
            ));
        }

        let (c, d) = (config.num_classes, config.feature_dim);
        let a = (6.0 / (c + d) as f64).sqrt();
        let data = (0..c * d).map(|_| rng.random_range(-a..a)).collect();
        let mut classifier_w = Tensor::from_vec(&[c, d], data)?;
        let classifier_b = match config.classifier {
            ClassifierKind::Cosine => {
                classifier_w = classifier_w.l2_normalize_rows(crate::autodiff::NORM_FLOOR)?;
                None
            }
            ClassifierKind::Linear => Some(Tensor::zeros(&[1, c])),
        };

        Ok(ModelParams {
            config,
            layers,
            classifier_w,
            classifier_b,
        })
    }

    /// Renormalize cosine classifier rows to unit norm; called after every
    /// optimizer step. No-op for the linear head.
    pub fn renormalize_classifier(&mut self) -> Result<()> {
        if self.config.classifier == ClassifierKind::Cosine {
            self.classifier_w = self
                .classifier_w
                .l2_normalize_rows(crate::autodiff::NORM_FLOOR)?;
        }
        Ok(())
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
            .collect();
        ModelVars {
            layers,
            classifier_w: tape.param(self.classifier_w.clone()),
            classifier_b: self.classifier_b.as_ref().map(|b| tape.param(b.clone())),
        }
    }

    /// Flat list of (name, tensor) in a stable order; mirrors `ModelVars::all`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("extractor.layer{i}.weight"), w));
            out.push((format!("extractor.layer{i}.bias"), b));
        }
        out.push(("classifier.weight".to_string(), &self.classifier_w));
        if let Some(b) = &self.classifier_b {
            out.push(("classifier.bias".to_string(), b));
        }
        out
    }

    /// Mutable tensors in the same order as `named_tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.layers.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.classifier_w);
        if let Some(b) = self.classifier_b.as_mut() {
            out.push(b);
        }
        out
    }

    /// Features for a plain (no-gradient) forward pass.
    pub fn features_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let f = forward_features(&mut tape, &vars, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Row-stochastic predictions for a plain forward pass.
    pub fn predictions_plain(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let f = forward_features(&mut tape, &vars, xv)?;
        let logits = forward_logits(&mut tape, &vars, &self.config, f)?;
        let p = tape.softmax_rows(logits, temperature)?;
        Ok(tape.value(p).clone())
    }
}

/// Tape handles for one registration of the model parameters.
pub struct ModelVars {
    pub layers: Vec<(Var, Var)>,
    pub classifier_w: Var,
    pub classifier_b: Option<Var>,
}

impl ModelVars {
    /// All parameter handles, in `named_tensors` order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.classifier_w);
        if let Some(b) = self.classifier_b {
            out.push(b);
        }
        out
    }
}

/// MLP forward followed by unit-norm row projection.
pub fn forward_features(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    let mut h = x;
    for (w, b) in &vars.layers {
        let lin = tape.matmul(h, *w)?;
        let biased = tape.add_row(lin, *b)?;
        h = tape.tanh(biased);
    }
    tape.l2_normalize_rows(h)
}

/// Classifier logits. Cosine head: `(f . W^T) / T` with unit-norm rows of W.
pub fn forward_logits(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    features: Var,
) -> Result<Var> {
    let wt = tape.transpose(vars.classifier_w);
    let prod = tape.matmul(features, wt)?;
    match config.classifier {
        ClassifierKind::Cosine => Ok(tape.scalar_mul(prod, 1.0 / config.classifier_temperature)),
        ClassifierKind::Linear => {
            let b = vars.classifier_b.ok_or_else(|| {
                Error::InvalidParameter("linear classifier is missing its bias".into())
            })?;
            tape.add_row(prod, b)
        }
    }
}

/// Row-stochastic predictions from logits: softmax of `logits / temperature`.
pub fn predict(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    tape.softmax_rows(logits, temperature)
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text format, one tensor per line with f64 payloads as hexadecimal bit
// patterns, so save/load round-trips bit-exactly:
//
//     mcl-checkpoint v1
//     meta <key> <value>
//     tensor <name> <ndim> <dim...> <hex64...>
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "mcl-checkpoint v1";

fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(
    path: &std::path::Path,
    params: &ModelParams,
    bank: &PrototypeBank,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    let cfg = &params.config;
    out.push_str(&format!("meta input_dim {}\n", cfg.input_dim));
    let hidden = cfg
        .hidden_dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    out.push_str(&format!("meta hidden_dims {hidden}\n"));
    out.push_str(&format!("meta feature_dim {}\n", cfg.feature_dim));
    out.push_str(&format!("meta num_classes {}\n", cfg.num_classes));
    out.push_str(&format!("meta classifier {}\n", cfg.classifier.as_str()));
    out.push_str(&format!(
        "meta classifier_temperature {:016x}\n",
        cfg.classifier_temperature.to_bits()
    ));
    out.push_str(&format!(
        "meta prototype_momentum {:016x}\n",
        bank.momentum().to_bits()
    ));
    let counts = bank
        .update_counts()
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    out.push_str(&format!("meta prototype_update_counts {counts}\n"));

    let mut tensors = params.named_tensors();
    let proto = bank.prototypes().clone();
    tensors.push(("prototypes".to_string(), &proto));
    for (name, t) in tensors {
        out.push_str(&format!("tensor {name} {}", t.shape().len()));
        for d in t.shape() {
            out.push_str(&format!(" {d}"));
        }
        for v in t.data() {
            out.push_str(&format!(" {:016x}", v.to_bits()));
        }
        out.push('\n');
    }

    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelParams, PrototypeBank)> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse_err = |line: usize, detail: &str| Error::ParseError {
        path: path.display().to_string(),
        line,
        detail: detail.to_string(),
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(parse_err(1, "bad checkpoint header")),
    }

    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("meta") => {
                let key = parts
                    .next()
                    .ok_or_else(|| parse_err(lineno + 1, "meta without key"))?;
                let value = parts.next().unwrap_or("");
                meta.insert(key.to_string(), value.to_string());
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| parse_err(lineno + 1, "tensor without name"))?;
                let ndim: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(lineno + 1, "bad ndim"))?;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    let d: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno + 1, "bad dimension"))?;
                    shape.push(d);
                }
                let mut data = Vec::with_capacity(shape.iter().product());
                for tok in parts {
                    let bits = u64::from_str_radix(tok, 16)
                        .map_err(|_| parse_err(lineno + 1, "bad hex value"))?;
                    data.push(f64::from_bits(bits));
                }
                tensors.insert(name.to_string(), Tensor::from_vec(&shape, data)?);
            }
            _ => return Err(parse_err(lineno + 1, "unknown record")),
        }
    }

    let get_meta = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| parse_err(0, &format!("missing meta {key}")))
    };
    let input_dim: usize = get_meta("input_dim")?
        .parse()
        .map_err(|_| parse_err(0, "bad input_dim"))?;
    let hidden_dims: Vec<usize> = {
        let raw = get_meta("hidden_dims")?;
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|s| s.parse().map_err(|_| parse_err(0, "bad hidden_dims")))
                .collect::<Result<_>>()?
        }
    };
    let feature_dim: usize = get_meta("feature_dim")?
        .parse()
        .map_err(|_| parse_err(0, "bad feature_dim"))?;
    let num_classes: usize = get_meta("num_classes")?
        .parse()
        .map_err(|_| parse_err(0, "bad num_classes"))?;
    let classifier = ClassifierKind::parse(get_meta("classifier")?)?;
    let classifier_temperature = f64::from_bits(
        u64::from_str_radix(get_meta("classifier_temperature")?, 16)
            .map_err(|_| parse_err(0, "bad classifier_temperature"))?,
    );
    let proto_momentum = f64::from_bits(
        u64::from_str_radix(get_meta("prototype_momentum")?, 16)
            .map_err(|_| parse_err(0, "bad prototype_momentum"))?,
    );
    let counts: Vec<u64> = {
        let raw = get_meta("prototype_update_counts")?;
        raw.split(',')
            .map(|s| s.parse().map_err(|_| parse_err(0, "bad update counts")))
            .collect::<Result<_>>()?
    };

    let config = ModelConfig {
        input_dim,
        hidden_dims: hidden_dims.clone(),
        feature_dim,
        num_classes,
        classifier,
        classifier_temperature,
    };

    let mut take = |name: String| -> Result<Tensor> {
        tensors
            .remove(&name)
            .ok_or_else(|| parse_err(0, &format!("missing tensor {name}")))
    };
    let n_layers = hidden_dims.len() + 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push((
            take(format!("extractor.layer{i}.weight"))?,
            take(format!("extractor.layer{i}.bias"))?,
        ));
    }
    let classifier_w = take("classifier.weight".to_string())?;
    let classifier_b = match classifier {
        ClassifierKind::Cosine => None,
        ClassifierKind::Linear => Some(take("classifier.bias".to_string())?),
    };
    let protos = take("prototypes".to_string())?;

    let params = ModelParams {
        config,
        layers,
        classifier_w,
        classifier_b,
    };
    let bank = PrototypeBank::from_parts(protos, proto_momentum, counts)?;
    Ok((params, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn small_model(seed: u64) -> ModelParams {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.hidden_dims = vec![6];
        cfg.feature_dim = 5;
        let mut rng = stream_rng(seed, Stream::Init);
        ModelParams::init(cfg, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Dataset);
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn features_have_unit_rows() {
        let params = small_model(1);
        let x = random_batch(2, 8, 4);
        let f = params.features_plain(&x).unwrap();
        for i in 0..f.rows() {
            assert!((f.row_norm(i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_make_rows_input_independent() {
        let mut params = small_model(1);
        for (w, b) in params.layers.iter_mut() {
            *w = Tensor::zeros(w.shape());
            let bias = Tensor::from_vec(
                b.shape(),
                (0..b.numel()).map(|i| 0.3 + 0.1 * i as f64).collect(),
            )
            .unwrap();
            *b = bias;
        }
        let x = random_batch(5, 6, 4);
        let f = params.features_plain(&x).unwrap();
        for i in 1..f.rows() {
            assert_eq!(f.row(i), f.row(0));
        }
        // The shared row is normalize(tanh(b_last)) once every weight is zero.
        let b_last = &params.layers.last().unwrap().1;
        let expected = b_last.map(f64::tanh).l2_normalize_rows(1e-12).unwrap();
        for (a, e) in f.row(0).iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let params = small_model(3);
        let x = random_batch(4, 5, 4);
        let weights = random_batch(6, 5, 5);
        let tensors: Vec<Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let cfg = params.config.clone();
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let n_layers = cfg.hidden_dims.len() + 1;
            let layers = (0..n_layers)
                .map(|i| (vars[2 * i], vars[2 * i + 1]))
                .collect();
            let mv = ModelVars {
                layers,
                classifier_w: vars[2 * n_layers],
                classifier_b: None,
            };
            let xv = tape.constant(x.clone());
            let feat = forward_features(tape, &mv, xv)?;
            tape.frobenius_inner(&weights, feat)
        };
        let report = crate::autodiff::grad_check_multi(&f, &tensors, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn aligned_feature_hits_logit_bound() {
        let params = small_model(4);
        let c = 1;
        let f_row = params.classifier_w.row(c).to_vec();
        let f = Tensor::from_vec(&[1, 5], f_row).unwrap();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let fv = tape.constant(f);
        let logits = forward_logits(&mut tape, &vars, &params.config, fv).unwrap();
        let bound = 1.0 / params.config.classifier_temperature;
        assert!((tape.value(logits).at(0, c) - bound).abs() < 1e-9);
        for j in 0..3 {
            assert!(tape.value(logits).at(0, j).abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn orthogonal_feature_gives_zero_logits() {
        let mut params = small_model(5);
        params.classifier_w = Tensor::from_vec(
            &[3, 5],
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let f = Tensor::from_vec(&[1, 5], vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let fv = tape.constant(f);
        let logits = forward_logits(&mut tape, &vars, &params.config, fv).unwrap();
        for j in 0..3 {
            assert_eq!(tape.value(logits).at(0, j), 0.0);
        }
    }

    #[test]
    fn predict_temperature_preserves_argmax() {
        let logits = Tensor::from_vec(&[2, 3], vec![2.0, 0.0, -1.0, 0.3, 0.9, 0.1]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let p1 = predict(&mut tape, lv, 1.0).unwrap();
        let p2 = predict(&mut tape, lv, 1.25).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(p1).row_argmax(i), tape.value(p2).row_argmax(i));
        }
    }

    #[test]
    fn predict_sharpened_hand_value() {
        // softmax([2,0]/1.25) = softmax([1.6, 0]) = [0.8320, 0.1680]
        let logits = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let p = predict(&mut tape, lv, 1.25).unwrap();
        assert!((tape.value(p).at(0, 0) - 0.8320).abs() < 1e-4);
        assert!((tape.value(p).at(0, 1) - 0.1680).abs() < 1e-4);
    }

    #[test]
    fn renormalization_restores_unit_rows() {
        let mut params = small_model(6);
        for v in params.classifier_w.data_mut() {
            *v *= 3.7;
        }
        params.renormalize_classifier().unwrap();
        for i in 0..params.classifier_w.rows() {
            assert!((params.classifier_w.row_norm(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let params = small_model(7);
        let bank = PrototypeBank::from_parts(
            random_batch(8, 3, 5).l2_normalize_rows(1e-12).unwrap(),
            0.9,
            vec![0, 4, 2],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save_checkpoint(&path, &params, &bank).unwrap();
        let (loaded, loaded_bank) = load_checkpoint(&path).unwrap();

        for ((na, a), (nb, b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(bank.prototypes().data(), loaded_bank.prototypes().data());
        assert_eq!(bank.update_counts(), loaded_bank.update_counts());
        assert_eq!(bank.momentum().to_bits(), loaded_bank.momentum().to_bits());

        // Saving the loaded state reproduces the file byte-for-byte.
        let path2 = dir.path().join("test2.ckpt");
        save_checkpoint(&path2, &loaded, &loaded_bank).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
