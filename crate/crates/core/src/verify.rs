//! The property suite behind `mcl verify`.
//!
//! Four-plus groups of executable properties: finite-difference gradient
//! checks for every loss through the full model, the Sinkhorn-vs-brute-force
//! oracle, closed-form loss values, the high-rho unbalanced limit, and the
//! byte-exact determinism of a short training run. The same helpers drive
//! the acceptance test suite.

use rand::Rng;

use crate::autodiff::{grad_check_multi, GradCheckReport, Tape, Var};
use crate::data::{gen_two_moons_shift, select_shots, MoonsSpec, ShotSplit, ViewKind};
use crate::losses::{self, IntraConfig, IntraVariant, PseudoLabelConfig};
use crate::model::{self, ModelConfig, ModelParams, ModelVars};
use crate::ot::{self, ReferenceSide, SinkhornConfig, SinkhornMode};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig};
use crate::Result;

// ---------------------------------------------------------------------------
// Model-level gradient checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Inter,
    IntraClassWise,
    IntraSampleWise,
    PseudoLabel,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::CrossEntropy,
        LossKind::Inter,
        LossKind::IntraClassWise,
        LossKind::IntraSampleWise,
        LossKind::PseudoLabel,
        LossKind::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Inter => "inter",
            LossKind::IntraClassWise => "intra_class_wise",
            LossKind::IntraSampleWise => "intra_sample_wise",
            LossKind::PseudoLabel => "pseudo_label",
            LossKind::Total => "total",
        }
    }
}

/// Check one loss's analytic gradient w.r.t. every model parameter against
/// central finite differences on a random instance.
///
/// The transport coupling and the pseudo-label mask are solved once from the
/// unperturbed parameters and then held fixed, exactly as a training step
/// holds them fixed during its backward pass.
pub fn model_loss_grad_check(
    kind: LossKind,
    seed: u64,
    n: usize,
    num_classes: usize,
    feature_dim: usize,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let input_dim = 6;
    let mut cfg = ModelConfig::new(input_dim, num_classes);
    cfg.hidden_dims = vec![7];
    cfg.feature_dim = feature_dim;
    let mut init_rng = stream_rng(seed, Stream::Init);
    let params = ModelParams::init(cfg.clone(), &mut init_rng)?;

    let mut data_rng = stream_rng(seed, Stream::Dataset);
    let mut rand_batch = |rows: usize| -> Tensor {
        let data = (0..rows * input_dim)
            .map(|_| data_rng.random_range(-2.0..2.0))
            .collect();
        Tensor::from_vec(&[rows, input_dim], data).expect("shape fixed")
    };
    let x_supervised = rand_batch(n);
    let x_weak = rand_batch(n);
    let x_strong = rand_batch(n);
    let labels: Vec<usize> = (0..n).map(|_| data_rng.random_range(0..num_classes)).collect();
    let prototypes = Tensor::from_vec(
        &[num_classes, feature_dim],
        (0..num_classes * feature_dim)
            .map(|_| data_rng.random_range(-1.0..1.0))
            .collect(),
    )?
    .l2_normalize_rows(crate::autodiff::NORM_FLOOR)?;

    // Fixed coupling from the unperturbed weak-view features.
    let f_weak0 = params.features_plain(&x_weak)?;
    let cost_a = ot::cost_matrix(
        &prototypes,
        &f_weak0,
        ViewKind::Weak,
        ReferenceSide::Prototypes,
    )?;
    let coupling = ot::sinkhorn_unbalanced(
        &cost_a,
        &ot::uniform_marginals(num_classes),
        &ot::uniform_marginals(n),
        &SinkhornConfig::default(),
    )?;
    let gamma = coupling.plan;

    // Fixed sharpened weak-view prediction for the pseudo-label mask.
    let p_weak_sharp = params.predictions_plain(&x_weak, 1.0)?;

    let n_layer_tensors = 2 * (cfg.hidden_dims.len() + 1);
    let tensors: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();

    let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let layers = (0..n_layer_tensors / 2)
            .map(|i| (vars[2 * i], vars[2 * i + 1]))
            .collect();
        let mv = ModelVars {
            layers,
            classifier_w: vars[n_layer_tensors],
            classifier_b: None,
        };

        let ce = |tape: &mut Tape, mv: &ModelVars| -> Result<Var> {
            let xv = tape.constant(x_supervised.clone());
            let f = model::forward_features(tape, mv, xv)?;
            let logits = model::forward_logits(tape, mv, &cfg, f)?;
            let preds = model::predict(tape, logits, 1.0)?;
            losses::cross_entropy(tape, preds, &labels)
        };
        let inter = |tape: &mut Tape, mv: &ModelVars| -> Result<Var> {
            let xv = tape.constant(x_strong.clone());
            let f = model::forward_features(tape, mv, xv)?;
            let cost_b = ot::cost_matrix_node(tape, &prototypes, f)?;
            ot::inter_loss(tape, &gamma, cost_b)
        };
        let views = |tape: &mut Tape, mv: &ModelVars| -> Result<(Var, Var)> {
            let xa = tape.constant(x_weak.clone());
            let xb = tape.constant(x_strong.clone());
            let fa = model::forward_features(tape, mv, xa)?;
            let fb = model::forward_features(tape, mv, xb)?;
            let la = model::forward_logits(tape, mv, &cfg, fa)?;
            let lb = model::forward_logits(tape, mv, &cfg, fb)?;
            let pa = model::predict(tape, la, 1.0)?;
            let pb = model::predict(tape, lb, 1.0)?;
            Ok((pa, pb))
        };
        let intra = |tape: &mut Tape, mv: &ModelVars, variant: IntraVariant| -> Result<Var> {
            let (pa, pb) = views(tape, mv)?;
            let icfg = IntraConfig {
                row_sum_floor: 1e-8,
                variant,
            };
            match variant {
                IntraVariant::ClassWise => losses::intra_loss(tape, pa, pb, &icfg),
                IntraVariant::SampleWise => losses::intra_loss_samplewise(tape, pa, pb, &icfg),
            }
        };
        let pl = |tape: &mut Tape, mv: &ModelVars| -> Result<Var> {
            let xb = tape.constant(x_strong.clone());
            let fb = model::forward_features(tape, mv, xb)?;
            let lb = model::forward_logits(tape, mv, &cfg, fb)?;
            let pb = model::predict(tape, lb, 1.0)?;
            losses::pseudo_label_loss(tape, &p_weak_sharp, pb, &PseudoLabelConfig::default())
        };

        match kind {
            LossKind::CrossEntropy => ce(tape, &mv),
            LossKind::Inter => inter(tape, &mv),
            LossKind::IntraClassWise => intra(tape, &mv, IntraVariant::ClassWise),
            LossKind::IntraSampleWise => intra(tape, &mv, IntraVariant::SampleWise),
            LossKind::PseudoLabel => pl(tape, &mv),
            LossKind::Total => {
                let ce_v = ce(tape, &mv)?;
                let pl_v = pl(tape, &mv)?;
                let inter_v = inter(tape, &mv)?;
                let intra_v = intra(tape, &mv, IntraVariant::ClassWise)?;
                losses::total_loss(tape, ce_v, pl_v, inter_v, intra_v, 1.0, 1.0)
            }
        }
    };
    grad_check_multi(&build, &tensors, step, tol)
}

// ---------------------------------------------------------------------------
// Sinkhorn oracle sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleStats {
    pub instances: usize,
    /// Worst entropic-minus-exact transport-cost gap.
    pub max_gap: f64,
    /// Most negative gap (should never drop below -1e-9).
    pub min_gap: f64,
    pub max_violation: f64,
}

/// Balanced Sinkhorn at small epsilon against the exact permutation oracle
/// on random square cosine-cost instances with uniform marginals.
pub fn sinkhorn_oracle_sweep(instances: usize, seed: u64) -> Result<OracleStats> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    let mut stats = OracleStats {
        instances,
        ..OracleStats::default()
    };
    let cfg = SinkhornConfig {
        epsilon: 0.001,
        max_iters: 500_000,
        tolerance: 1e-10,
        mode: SinkhornMode::Balanced,
        rho: 1.0,
    };
    for k in 0..instances {
        let n = 3 + k % 4;
        let dim = 6;
        let mk_unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Tensor> {
            Tensor::from_vec(
                &[n, dim],
                (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?
            .l2_normalize_rows(crate::autodiff::NORM_FLOOR)
        };
        let refs = mk_unit(&mut rng)?;
        let tgts = mk_unit(&mut rng)?;
        let cost = ot::cost_matrix(&refs, &tgts, ViewKind::Weak, ReferenceSide::Prototypes)?;
        let mu = ot::uniform_marginals(n);
        let plan = ot::sinkhorn_balanced(&cost, &mu, &mu, &cfg)?;
        let entropic = plan.transport_cost(&cost)?;
        let exact = ot::exact_ot_bruteforce(&cost.values)?;
        let gap = entropic - exact;
        stats.max_gap = stats.max_gap.max(gap);
        stats.min_gap = stats.min_gap.min(gap);
        stats.max_violation = stats.max_violation.max(plan.marginal_violation);
    }
    Ok(stats)
}

/// Entrywise distance between the unbalanced solution at the given rho and
/// the balanced solution, on random rectangular cosine-cost instances.
pub fn unbalanced_limit_sweep(instances: usize, rho: f64, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let (m, n) = (3 + k % 3, 4 + k % 4);
        let dim = 6;
        let mk_unit = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize| -> Result<Tensor> {
            Tensor::from_vec(
                &[rows, dim],
                (0..rows * dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )?
            .l2_normalize_rows(crate::autodiff::NORM_FLOOR)
        };
        let refs = mk_unit(&mut rng, m)?;
        let tgts = mk_unit(&mut rng, n)?;
        let cost = ot::cost_matrix(&refs, &tgts, ViewKind::Weak, ReferenceSide::Prototypes)?;
        let mu_s = ot::uniform_marginals(m);
        let mu_t = ot::uniform_marginals(n);
        let bal = ot::sinkhorn_balanced(
            &cost,
            &mu_s,
            &mu_t,
            &SinkhornConfig {
                epsilon: 0.05,
                max_iters: 200_000,
                tolerance: 1e-11,
                mode: SinkhornMode::Balanced,
                rho: 1.0,
            },
        )?;
        let unb = ot::sinkhorn_unbalanced(
            &cost,
            &mu_s,
            &mu_t,
            &SinkhornConfig {
                epsilon: 0.05,
                max_iters: 200_000,
                tolerance: 1e-12,
                mode: SinkhornMode::Unbalanced,
                rho,
            },
        )?;
        for (a, b) in bal.plan.data().iter().zip(unb.plan.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Report plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PropertyGroup {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
    pub detail: String,
}

impl PropertyGroup {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub groups: Vec<PropertyGroup>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let status = if g.passed() { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "[{status}] {}: {} checks{}{}\n",
                g.name,
                g.checks,
                if g.failures.is_empty() {
                    String::new()
                } else {
                    format!(", {} failed", g.failures.len())
                },
                if g.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", g.detail)
                },
            ));
            for f in &g.failures {
                out.push_str(&format!("    - {f}\n"));
            }
        }
        let overall = if self.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "verify: {overall} ({}/{} groups)\n",
            self.groups.iter().filter(|g| g.passed()).count(),
            self.groups.len()
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Adds a negative-control check whose backward rule is deliberately
    /// wrong; the suite must flag it and name the op.
    pub inject_gradient_fault: bool,
}

/// Run the full property suite.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();

    // Group 1: gradient checks for each loss through the full model.
    {
        let mut checks = 0;
        let mut failures = Vec::new();
        let mut worst: f64 = 0.0;
        for kind in LossKind::ALL {
            for seed in 0..3u64 {
                checks += 1;
                let r = model_loss_grad_check(kind, seed, 8, 3, 5, 1e-5, 1e-4)?;
                worst = worst.max(r.max_rel_error);
                if !r.passed() {
                    failures.push(format!(
                        "{} seed {seed}: rel err {:.3e} > 1e-4",
                        kind.name(),
                        r.max_rel_error
                    ));
                }
            }
        }
        if opts.inject_gradient_fault {
            checks += 1;
            if let Some(msg) = injected_fault_check() {
                failures.push(msg);
            } else {
                failures.push(
                    "negative control did not trip: wrong tanh rule went undetected".into(),
                );
            }
        }
        report.groups.push(PropertyGroup {
            name: "gradient-checks",
            checks,
            failures,
            detail: format!("max rel err {worst:.3e}"),
        });
    }

    // Group 2: balanced Sinkhorn against the exact permutation oracle.
    {
        let stats = sinkhorn_oracle_sweep(20, 1)?;
        let mut failures = Vec::new();
        if stats.max_gap > 1e-3 {
            failures.push(format!("entropic gap {:.3e} > 1e-3", stats.max_gap));
        }
        if stats.min_gap < -1e-9 {
            failures.push(format!("entropic cost {:.3e} below exact", stats.min_gap));
        }
        if stats.max_violation > 1e-6 {
            failures.push(format!(
                "marginal violation {:.3e} > 1e-6",
                stats.max_violation
            ));
        }
        report.groups.push(PropertyGroup {
            name: "sinkhorn-oracle",
            checks: stats.instances,
            failures,
            detail: format!(
                "max gap {:.3e}, max violation {:.3e}",
                stats.max_gap, stats.max_violation
            ),
        });
    }

    // Group 3: closed-form loss values.
    {
        let mut checks = 0;
        let mut failures = Vec::new();
        let mut check = |name: &str, got: f64, expect: f64, tol: f64| {
            checks += 1;
            if (got - expect).abs() > tol {
                failures.push(format!("{name}: {got} vs {expect} (tol {tol})"));
            }
        };

        for c in [2usize, 3, 5] {
            let n = 60;
            let uniform = Tensor::from_vec(&[n, c], vec![1.0 / c as f64; n * c])?;
            check(
                &format!("intra uniform C={c}"),
                eval_intra_value(&uniform, &uniform)?,
                2.0 * (c as f64 - 1.0) / c as f64,
                1e-9,
            );
            let mut collapsed = Tensor::zeros(&[n, c]);
            for i in 0..n {
                collapsed.set(i, 0, 1.0);
            }
            check(
                &format!("intra collapsed C={c}"),
                eval_intra_value(&collapsed, &collapsed)?,
                (c as f64 - 1.0) / c as f64,
                1e-6,
            );
            let mut covering = Tensor::zeros(&[n, c]);
            for i in 0..n {
                covering.set(i, i % c, 1.0);
            }
            let got = eval_intra_value(&covering, &covering)?;
            check(&format!("intra covering C={c}"), got, 0.0, 1e-6);
        }

        // Pseudo-label: all below threshold gives exactly zero.
        {
            checks += 1;
            let p_a = Tensor::from_vec(&[2, 2], vec![0.9, 0.1, 0.7, 0.3])?;
            let mut tape = Tape::new();
            let pb = tape.constant(Tensor::from_vec(&[2, 2], vec![0.5; 4])?);
            let loss =
                losses::pseudo_label_loss(&mut tape, &p_a, pb, &PseudoLabelConfig::default())?;
            if tape.value(loss).item() != 0.0 {
                failures.push("pseudo-label below threshold not exactly zero".into());
            }
        }

        // Cross-entropy hand values.
        {
            checks += 1;
            let p = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 0.5])?;
            let mut tape = Tape::new();
            let pv = tape.constant(p);
            let ce = losses::cross_entropy(&mut tape, pv, &[0, 0])?;
            if (tape.value(ce).item() - 0.5 * std::f64::consts::LN_2).abs() > 1e-9 {
                failures.push("cross-entropy mean of {0, ln 2} off".into());
            }
        }

        report.groups.push(PropertyGroup {
            name: "closed-form-losses",
            checks,
            failures,
            detail: String::new(),
        });
    }

    // Group 4: the high-rho unbalanced solver recovers the balanced one.
    {
        let worst = unbalanced_limit_sweep(8, 1e6, 2)?;
        let mut failures = Vec::new();
        if worst > 1e-4 {
            failures.push(format!("entrywise distance {worst:.3e} > 1e-4"));
        }
        report.groups.push(PropertyGroup {
            name: "unbalanced-limit",
            checks: 8,
            failures,
            detail: format!("max entrywise distance {worst:.3e}"),
        });
    }

    // Group 5: byte-exact determinism of a short training run.
    {
        let csvs: Vec<String> = (0..2)
            .map(|_| -> Result<String> {
                let spec = MoonsSpec {
                    n_per_domain: 80,
                    noise: 0.1,
                    rotation_degrees: 30.0,
                };
                let (source, target) = gen_two_moons_shift(&spec, 17)?;
                let target = select_shots(&target, &ShotSplit { shots: 3, seed: 17 })?;
                let mut cfg = TrainConfig {
                    iterations: 12,
                    eval_every: 4,
                    seed: 17,
                    ..TrainConfig::default()
                };
                cfg.model.hidden_dims = vec![8];
                cfg.model.feature_dim = 6;
                let outcome = trainer::train_run(&cfg, &source, &target)?;
                Ok(trainer::metrics_to_csv(&outcome.metrics))
            })
            .collect::<Result<_>>()?;
        let mut failures = Vec::new();
        if csvs[0] != csvs[1] {
            failures.push("two identical runs produced different metrics".into());
        }
        report.groups.push(PropertyGroup {
            name: "determinism",
            checks: 1,
            failures,
            detail: String::new(),
        });
    }

    Ok(report)
}

fn eval_intra_value(p_a: &Tensor, p_b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(p_a.clone());
    let b = tape.constant(p_b.clone());
    let loss = losses::intra_loss(&mut tape, a, b, &IntraConfig::default())?;
    Ok(tape.value(loss).item())
}

/// Negative control: compare a deliberately wrong tanh backward rule
/// (claiming d/dx tanh = 1 - tanh, instead of 1 - tanh^2) against central
/// finite differences through the same comparison machinery. Returns the
/// failure message the suite should report.
fn injected_fault_check() -> Option<String> {
    let x: Vec<f64> = vec![0.3, -0.8, 1.2, 0.5];
    let step = 1e-5;
    let mut max_rel = 0.0f64;
    for (i, &xi) in x.iter().enumerate() {
        let f = |v: f64| -> f64 {
            let mut y = x.clone();
            y[i] = v;
            y.iter().map(|t| t.tanh()).sum()
        };
        let numeric = (f(xi + step) - f(xi - step)) / (2.0 * step);
        let wrong_analytic = 1.0 - xi.tanh();
        let rel = (wrong_analytic - numeric).abs()
            / wrong_analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    if max_rel > 1e-4 {
        Some(format!(
            "tanh (injected wrong backward rule): rel err {max_rel:.3e} > 1e-4"
        ))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_gradient_checks_pass() {
        for kind in [LossKind::CrossEntropy, LossKind::Inter, LossKind::Total] {
            let r = model_loss_grad_check(kind, 0, 6, 3, 4, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{}: {}", kind.name(), r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let msg = injected_fault_check().expect("wrong rule must be flagged");
        assert!(msg.contains("tanh"));
    }

    #[test]
    fn small_oracle_sweep_within_bounds() {
        let stats = sinkhorn_oracle_sweep(4, 5).unwrap();
        assert!(stats.max_gap <= 1e-3, "{}", stats.max_gap);
        assert!(stats.min_gap >= -1e-9);
        assert!(stats.max_violation <= 1e-6);
    }
}
