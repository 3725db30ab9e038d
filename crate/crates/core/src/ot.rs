//! Entropic optimal transport between unit-norm feature rows.
//!
//! Costs are cosine distances (`1 - <u, v>`), so unit-norm inputs put every
//! entry in `[0, 2]`. Both solvers run in the log domain: at the epsilons the
//! oracle tests use (down to 1e-3) the plain scaling iteration underflows.
//! The alignment loss is a Frobenius inner product of a fixed coupling with
//! a differentiable cost matrix, so gradient flows only into the strong-view
//! features.

use crate::autodiff::{Tape, Var};
use crate::data::ViewKind;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSide {
    Prototypes,
    SourceBatch,
}

/// Cosine cost matrix with provenance tags.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub values: Tensor,
    pub view: ViewKind,
    pub reference: ReferenceSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkhornMode {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Balanced mode: marginal-violation target. Unbalanced mode:
    /// fixed-point drift target on the dual potentials.
    pub tolerance: f64,
    pub mode: SinkhornMode,
    /// Marginal-relaxation strength of the unbalanced mode.
    pub rho: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            // Small enough that couplings against a handful of prototypes
            // are near-assignments rather than blends; the epsilon ladder
            // keeps the solve cheap at this sharpness.
            epsilon: 0.01,
            max_iters: 1000,
            tolerance: 1e-9,
            mode: SinkhornMode::Unbalanced,
            rho: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.rho <= 0.0 || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Transport plan plus solver diagnostics. Non-convergence is reported, not
/// raised: one stubborn batch must not kill a training run.
#[derive(Debug, Clone)]
pub struct CouplingPlan {
    pub plan: Tensor,
    pub iterations: usize,
    /// Max of the L1 row-marginal and column-marginal errors of the
    /// returned plan. Balanced plans are rounded onto their marginals, so
    /// this sits at float-rounding scale even when the iteration stalled.
    pub marginal_violation: f64,
    /// Whether the iteration itself met the tolerance before the budget
    /// ran out (pre-rounding).
    pub converged: bool,
}

impl CouplingPlan {
    pub fn total_mass(&self) -> f64 {
        self.plan.data().iter().sum()
    }

    pub fn transport_cost(&self, cost: &CostMatrix) -> Result<f64> {
        self.plan.frobenius_dot(&cost.values)
    }
}

/// `C[i,j] = 1 - <reference_i, target_j>` for unit-norm rows.
pub fn cost_matrix(
    reference: &Tensor,
    targets: &Tensor,
    view: ViewKind,
    side: ReferenceSide,
) -> Result<CostMatrix> {
    check_unit_rows("cost_matrix reference", reference)?;
    check_unit_rows("cost_matrix targets", targets)?;
    if reference.cols() != targets.cols() {
        return Err(Error::ShapeMismatch {
            op: "cost_matrix",
            detail: format!("{:?} vs {:?}", reference.shape(), targets.shape()),
        });
    }
    let gram = reference.matmul(&targets.transpose())?;
    Ok(CostMatrix {
        values: gram.map(|v| 1.0 - v),
        view,
        reference: side,
    })
}

fn check_unit_rows(op: &'static str, x: &Tensor) -> Result<()> {
    for i in 0..x.rows() {
        let norm = x.row_norm(i);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "{op}: row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

pub fn uniform_marginals(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn validate_marginals(mu_s: &[f64], mu_t: &[f64], cost: &Tensor, simplex: bool) -> Result<()> {
    if mu_s.len() != cost.rows() || mu_t.len() != cost.cols() {
        return Err(Error::ShapeMismatch {
            op: "sinkhorn",
            detail: format!(
                "marginals {}x{} for cost {:?}",
                mu_s.len(),
                mu_t.len(),
                cost.shape()
            ),
        });
    }
    for (name, mu) in [("mu_s", mu_s), ("mu_t", mu_t)] {
        if mu.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be strictly positive"
            )));
        }
        if simplex {
            let sum: f64 = mu.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must sum to 1, got {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// log sum_i exp(x_i), stabilized.
fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn plan_from_potentials(f: &[f64], g: &[f64], cost: &Tensor, eps: f64) -> Tensor {
    let (m, n) = (cost.rows(), cost.cols());
    let mut plan = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            plan.set(i, j, ((f[i] + g[j] - cost.at(i, j)) / eps).exp());
        }
    }
    plan
}

/// Round a nonnegative plan onto the exact marginals: shrink overfull rows
/// and columns, then spread the remaining deficit as a rank-one correction.
/// Moves at most the plan's L1 marginal violation worth of mass, and the
/// result is feasible up to float rounding, so its transport cost can never
/// undercut the exact optimum.
fn round_to_marginals(plan: &mut Tensor, mu_s: &[f64], mu_t: &[f64]) {
    let (m, n) = (plan.rows(), plan.cols());
    for i in 0..m {
        let row_sum: f64 = plan.row(i).iter().sum();
        if row_sum > mu_s[i] {
            let scale = mu_s[i] / row_sum;
            for j in 0..n {
                plan.set(i, j, plan.at(i, j) * scale);
            }
        }
    }
    for j in 0..n {
        let col_sum: f64 = (0..m).map(|i| plan.at(i, j)).sum();
        if col_sum > mu_t[j] {
            let scale = mu_t[j] / col_sum;
            for i in 0..m {
                plan.set(i, j, plan.at(i, j) * scale);
            }
        }
    }
    let row_deficit: Vec<f64> = (0..m)
        .map(|i| (mu_s[i] - plan.row(i).iter().sum::<f64>()).max(0.0))
        .collect();
    let col_deficit: Vec<f64> = (0..n)
        .map(|j| (mu_t[j] - (0..m).map(|i| plan.at(i, j)).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = row_deficit.iter().sum();
    if total > 1e-300 {
        for i in 0..m {
            for j in 0..n {
                plan.set(
                    i,
                    j,
                    plan.at(i, j) + row_deficit[i] * col_deficit[j] / total,
                );
            }
        }
    }
}

/// Max of L1 row-marginal and L1 column-marginal errors.
fn marginal_violation(plan: &Tensor, mu_s: &[f64], mu_t: &[f64]) -> f64 {
    let (m, n) = (plan.rows(), plan.cols());
    let mut row_err = 0.0;
    for i in 0..m {
        let s: f64 = plan.row(i).iter().sum();
        row_err += (s - mu_s[i]).abs();
    }
    let mut col_err = 0.0;
    for j in 0..n {
        let s: f64 = (0..m).map(|i| plan.at(i, j)).sum();
        col_err += (s - mu_t[j]).abs();
    }
    row_err.max(col_err)
}

/// Entropic OT with hard marginals, solved by log-domain alternating
/// potential updates. Stops once the reconstructed plan's marginal
/// violation is within tolerance.
pub fn sinkhorn_balanced(
    cost: &CostMatrix,
    mu_s: &[f64],
    mu_t: &[f64],
    cfg: &SinkhornConfig,
) -> Result<CouplingPlan> {
    cfg.validate()?;
    if cfg.mode != SinkhornMode::Balanced {
        return Err(Error::InvalidParameter(
            "sinkhorn_balanced requires mode = balanced".into(),
        ));
    }
    validate_marginals(mu_s, mu_t, &cost.values, true)?;
    sinkhorn_log(&cost.values, mu_s, mu_t, cfg, true)
}

/// Entropic OT with KL-relaxed marginals: both potential updates are damped
/// by `rho / (rho + epsilon)`, so marginals are matched only softly and
/// classes missing from a batch shed mass instead of distorting the plan.
pub fn sinkhorn_unbalanced(
    cost: &CostMatrix,
    mu_s: &[f64],
    mu_t: &[f64],
    cfg: &SinkhornConfig,
) -> Result<CouplingPlan> {
    cfg.validate()?;
    if cfg.mode != SinkhornMode::Unbalanced {
        return Err(Error::InvalidParameter(
            "sinkhorn_unbalanced requires mode = unbalanced".into(),
        ));
    }
    validate_marginals(mu_s, mu_t, &cost.values, false)?;
    sinkhorn_log(&cost.values, mu_s, mu_t, cfg, false)
}

/// Shared log-domain iteration with epsilon scaling: solve a short ladder of
/// shrinking regularizations, warm-starting the dual potentials at each rung,
/// then iterate the target epsilon to tolerance. Without the ladder the
/// potentials creep at O(epsilon) per iteration from a cold start, which is
/// hopeless at the epsilons the oracle tests use.
///
/// `balanced` runs undamped updates and judges convergence on the marginal
/// violation of the reconstructed plan; the damped (unbalanced) runs have no
/// hard marginals, so they stop on the fixed-point drift of the potentials.
fn sinkhorn_log(
    cost: &Tensor,
    mu_s: &[f64],
    mu_t: &[f64],
    cfg: &SinkhornConfig,
    balanced: bool,
) -> Result<CouplingPlan> {
    let (m, n) = (cost.rows(), cost.cols());
    let log_mu_s: Vec<f64> = mu_s.iter().map(|v| v.ln()).collect();
    let log_mu_t: Vec<f64> = mu_t.iter().map(|v| v.ln()).collect();

    let mut stages = Vec::new();
    let mut e = 1.0;
    while e > 4.0 * cfg.epsilon {
        stages.push(e);
        e /= 4.0;
    }
    stages.push(cfg.epsilon);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let last_stage = stages.len() - 1;
    for (si, &eps) in stages.iter().enumerate() {
        let is_final = si == last_stage;
        let damping = if balanced {
            1.0
        } else {
            cfg.rho / (cfg.rho + eps)
        };
        // Intermediate rungs only need to park the potentials near the next
        // fixed point; they get a small slice of the budget.
        let stage_budget = if is_final {
            cfg.max_iters.saturating_sub(iterations)
        } else {
            200.min(cfg.max_iters.saturating_sub(iterations))
        };
        let mut stage_done = false;
        for _ in 0..stage_budget {
            iterations += 1;
            let mut drift = 0.0f64;
            for i in 0..m {
                let lse = logsumexp((0..n).map(|j| (g[j] - cost.at(i, j)) / eps));
                let new = damping * eps * (log_mu_s[i] - lse);
                drift = drift.max((new - f[i]).abs());
                f[i] = new;
            }
            for j in 0..n {
                let lse = logsumexp((0..m).map(|i| (f[i] - cost.at(i, j)) / eps));
                let new = damping * eps * (log_mu_t[j] - lse);
                drift = drift.max((new - g[j]).abs());
                g[j] = new;
            }
            if is_final {
                if balanced {
                    let plan = plan_from_potentials(&f, &g, cost, eps);
                    if marginal_violation(&plan, mu_s, mu_t) <= cfg.tolerance {
                        stage_done = true;
                        break;
                    }
                } else if drift <= cfg.tolerance {
                    stage_done = true;
                    break;
                }
            } else if drift <= 1e-9 {
                break;
            }
        }
        if is_final {
            converged = stage_done;
        }
    }

    let mut plan = plan_from_potentials(&f, &g, cost, cfg.epsilon);
    if balanced {
        round_to_marginals(&mut plan, mu_s, mu_t);
    }
    let violation = marginal_violation(&plan, mu_s, mu_t);
    // Finite potentials give nonnegative entries by construction; NaNs from
    // upstream blow-ups are allowed through so the trainer's divergence
    // check can report them instead of dying here.
    debug_assert!(plan.data().iter().all(|&v| v >= 0.0 || !v.is_finite()));
    Ok(CouplingPlan {
        plan,
        iterations,
        marginal_violation: violation,
        converged,
    })
}

/// Exact optimal transport cost for square instances with uniform marginals,
/// by enumerating all permutation couplings. Valid because uniform-marginal
/// OT attains its optimum at a vertex of the Birkhoff polytope. Test oracle
/// only; refuses n > 7.
pub fn exact_ot_bruteforce(cost: &Tensor) -> Result<f64> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "exact_ot_bruteforce",
            detail: format!("{:?} is not square", cost.shape()),
        });
    }
    if n > 7 {
        return Err(Error::InvalidParameter(format!(
            "exact_ot_bruteforce refuses n = {n} > 7"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
        best = best.min(c);
    });
    Ok(best / n as f64)
}

fn permute(xs: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == xs.len() {
        visit(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permute(xs, k + 1, visit);
        xs.swap(k, i);
    }
}

/// Differentiable cosine cost `1 - R . T^t` against a constant reference.
/// Use for the strong-view cost whose gradient drives the alignment loss.
pub fn cost_matrix_node(tape: &mut Tape, reference: &Tensor, targets: Var) -> Result<Var> {
    check_unit_rows("cost_matrix_node reference", reference)?;
    let ref_node = tape.constant(reference.clone());
    let tt = tape.transpose(targets);
    let gram = tape.matmul(ref_node, tt)?;
    let ones = tape.constant(Tensor::from_vec(
        &[reference.rows(), tape.value(targets).rows()],
        vec![1.0; reference.rows() * tape.value(targets).rows()],
    )?);
    tape.sub(ones, gram)
}

/// Alignment loss `<coupling, C>` with the coupling held constant.
pub fn inter_loss(tape: &mut Tape, coupling: &Tensor, cost_b: Var) -> Result<Var> {
    tape.frobenius_inner(coupling, cost_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d], data)
            .unwrap()
            .l2_normalize_rows(1e-12)
            .unwrap()
    }

    fn random_cosine_cost(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CostMatrix {
        let refs = unit_rows(rng, m, 6);
        let tgts = unit_rows(rng, n, 6);
        cost_matrix(&refs, &tgts, ViewKind::Weak, ReferenceSide::Prototypes).unwrap()
    }

    fn balanced_cfg(eps: f64, max_iters: usize) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: eps,
            max_iters,
            tolerance: 1e-10,
            mode: SinkhornMode::Balanced,
            rho: 1.0,
        }
    }

    #[test]
    fn cost_of_identical_orthogonal_antipodal() {
        let a = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let c = cost_matrix(&a, &b, ViewKind::Weak, ReferenceSide::Prototypes).unwrap();
        assert!((c.values.at(0, 0) - 0.0).abs() < 1e-12); // identical
        assert!((c.values.at(1, 0) - 1.0).abs() < 1e-12); // orthogonal
        assert!((c.values.at(2, 0) - 2.0).abs() < 1e-12); // antipodal
    }

    #[test]
    fn cost_rejects_non_unit_rows() {
        let a = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(cost_matrix(&a, &b, ViewKind::Weak, ReferenceSide::Prototypes).is_err());
    }

    #[test]
    fn self_cost_has_zero_diagonal() {
        let mut rng = stream_rng(1, Stream::Dataset);
        let x = unit_rows(&mut rng, 5, 4);
        let c = cost_matrix(&x, &x, ViewKind::Weak, ReferenceSide::SourceBatch).unwrap();
        for i in 0..5 {
            assert!(c.values.at(i, i).abs() < 1e-9);
        }
        for v in c.values.data() {
            assert!((-1e-9..=2.0 + 1e-9).contains(v));
        }
    }

    #[test]
    fn balanced_zero_cost_gives_independent_coupling() {
        let cost = CostMatrix {
            values: Tensor::zeros(&[2, 2]),
            view: ViewKind::Weak,
            reference: ReferenceSide::Prototypes,
        };
        let plan =
            sinkhorn_balanced(&cost, &uniform_marginals(2), &uniform_marginals(2), &balanced_cfg(0.05, 1000))
                .unwrap();
        for v in plan.plan.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_prefers_cheap_diagonal() {
        let cost = CostMatrix {
            values: Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            view: ViewKind::Weak,
            reference: ReferenceSide::Prototypes,
        };
        let plan = sinkhorn_balanced(
            &cost,
            &uniform_marginals(2),
            &uniform_marginals(2),
            &balanced_cfg(0.01, 10_000),
        )
        .unwrap();
        let expect = [0.5, 0.0, 0.0, 0.5];
        for (v, e) in plan.plan.data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-3, "{v} vs {e}");
        }
        assert!(plan.converged);
        assert!(plan.marginal_violation <= 1e-10);
        assert!((plan.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_cost_matches_bruteforce_oracle() {
        let mut rng = stream_rng(5, Stream::Dataset);
        let cost = random_cosine_cost(&mut rng, 5, 5);
        let mu = uniform_marginals(5);
        let plan = sinkhorn_balanced(&cost, &mu, &mu, &balanced_cfg(0.001, 500_000)).unwrap();
        let exact = exact_ot_bruteforce(&cost.values).unwrap();
        let entropic = plan.transport_cost(&cost).unwrap();
        assert!(entropic >= exact - 1e-9);
        assert!(entropic - exact < 1e-3, "gap {}", entropic - exact);
    }

    #[test]
    fn entropic_cost_decreases_as_epsilon_shrinks() {
        let mut rng = stream_rng(17, Stream::Dataset);
        for _ in 0..3 {
            let cost = random_cosine_cost(&mut rng, 4, 4);
            let mu = uniform_marginals(4);
            let exact = exact_ot_bruteforce(&cost.values).unwrap();
            let mut prev = f64::INFINITY;
            for eps in [0.1, 0.01, 0.001] {
                let plan =
                    sinkhorn_balanced(&cost, &mu, &mu, &balanced_cfg(eps, 500_000)).unwrap();
                let c = plan.transport_cost(&cost).unwrap();
                assert!(c <= prev + 1e-9, "eps {eps}: {c} > {prev}");
                assert!(c >= exact - 1e-9);
                prev = c;
            }
        }
    }

    #[test]
    fn bruteforce_trivial_cases() {
        let ident_favoring =
            Tensor::from_vec(&[3, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(exact_ot_bruteforce(&ident_favoring).unwrap(), 0.0);
        let diag = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(exact_ot_bruteforce(&diag).unwrap(), 0.0);
        let anti = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(exact_ot_bruteforce(&anti).unwrap(), 0.0);
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        assert!(exact_ot_bruteforce(&Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn unbalanced_high_rho_recovers_balanced() {
        let mut rng = stream_rng(23, Stream::Dataset);
        let cost = random_cosine_cost(&mut rng, 4, 6);
        let mu_s = uniform_marginals(4);
        let mu_t = uniform_marginals(6);
        let bal = sinkhorn_balanced(&cost, &mu_s, &mu_t, &balanced_cfg(0.05, 100_000)).unwrap();
        let unb_cfg = SinkhornConfig {
            epsilon: 0.05,
            max_iters: 100_000,
            tolerance: 1e-12,
            mode: SinkhornMode::Unbalanced,
            rho: 1e6,
        };
        let unb = sinkhorn_unbalanced(&cost, &mu_s, &mu_t, &unb_cfg).unwrap();
        for (a, b) in bal.plan.data().iter().zip(unb.plan.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn unbalanced_sheds_mass_from_absent_class() {
        // Prototypes on three axes; every target sits on axis 0 or 1, so the
        // class-2 prototype row has cost ~2 everywhere.
        let protos = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut rows = Vec::new();
        for i in 0..8 {
            let axis = i % 2;
            let mut r = vec![0.0, 0.0, -0.05];
            r[axis] = 1.0;
            rows.push(r);
        }
        let targets = Tensor::from_rows(&rows)
            .unwrap()
            .l2_normalize_rows(1e-12)
            .unwrap();
        let cost = cost_matrix(&protos, &targets, ViewKind::Weak, ReferenceSide::Prototypes)
            .unwrap();
        let mu_s = uniform_marginals(3);
        let mu_t = uniform_marginals(8);

        let bal =
            sinkhorn_balanced(&cost, &mu_s, &mu_t, &balanced_cfg(0.05, 100_000)).unwrap();
        let unb = sinkhorn_unbalanced(&cost, &mu_s, &mu_t, &SinkhornConfig::default()).unwrap();

        let row_mass = |plan: &Tensor, i: usize| plan.row(i).iter().sum::<f64>();
        assert!(row_mass(&unb.plan, 2) < mu_s[2]);
        assert!(row_mass(&unb.plan, 2) < row_mass(&bal.plan, 2));
        assert!(unb.plan.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn unbalanced_zero_cost_is_proportional_to_independent() {
        let cost = CostMatrix {
            values: Tensor::zeros(&[3, 3]),
            view: ViewKind::Weak,
            reference: ReferenceSide::Prototypes,
        };
        let plan = sinkhorn_unbalanced(
            &cost,
            &uniform_marginals(3),
            &uniform_marginals(3),
            &SinkhornConfig::default(),
        )
        .unwrap();
        let first = plan.plan.at(0, 0);
        for v in plan.plan.data() {
            assert!((v - first).abs() < 1e-9);
        }
    }

    #[test]
    fn inter_loss_trivial_values() {
        let mut tape = Tape::new();
        let gamma = Tensor::from_vec(&[2, 2], vec![0.3, 0.2, 0.1, 0.4]).unwrap();

        let zeros = tape.constant(Tensor::zeros(&[2, 2]));
        let l0 = inter_loss(&mut tape, &gamma, zeros).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);

        let ones = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap());
        let l1 = inter_loss(&mut tape, &gamma, ones).unwrap();
        assert!((tape.value(l1).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inter_loss_matches_double_loop() {
        let mut rng = stream_rng(31, Stream::Dataset);
        let gamma = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.random_range(0.0..0.3)).collect(),
        )
        .unwrap();
        let cb = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.random_range(0.0..2.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let cbv = tape.constant(cb.clone());
        let loss = inter_loss(&mut tape, &gamma, cbv).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                expect += gamma.at(i, j) * cb.at(i, j);
            }
        }
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn inter_loss_gradient_only_reaches_strong_view() {
        let mut rng = stream_rng(37, Stream::Dataset);
        let protos = unit_rows(&mut rng, 3, 4);
        let f_a = unit_rows(&mut rng, 5, 4);
        let f_b = unit_rows(&mut rng, 5, 4);

        // Step 1 runs outside the graph on detached weak-view features.
        let cost_a =
            cost_matrix(&protos, &f_a, ViewKind::Weak, ReferenceSide::Prototypes).unwrap();
        let gamma = sinkhorn_unbalanced(
            &cost_a,
            &uniform_marginals(3),
            &uniform_marginals(5),
            &SinkhornConfig::default(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let fa_leaf = tape.param(f_a.clone());
        let fb_leaf = tape.param(f_b.clone());
        let proto_leaf = tape.param(protos.clone());
        let proto_const = tape.detach(proto_leaf);
        let cb = {
            let tt = tape.transpose(fb_leaf);
            let gram = tape.matmul(proto_const, tt).unwrap();
            let ones = tape.constant(Tensor::from_vec(&[3, 5], vec![1.0; 15]).unwrap());
            tape.sub(ones, gram).unwrap()
        };
        let loss = inter_loss(&mut tape, &gamma.plan, cb).unwrap();
        tape.backward(loss).unwrap();

        assert!(tape.grad(fa_leaf).data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(proto_leaf).data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(fb_leaf).data().iter().any(|&g| g != 0.0));

        // Strong-view gradient against finite differences.
        let gamma_plan = gamma.plan.clone();
        let protos_c = protos.clone();
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let cb = cost_matrix_node(tape, &protos_c, v)?;
            inter_loss(tape, &gamma_plan, cb)
        };
        let report = crate::autodiff::grad_check(&f, &f_b, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn coupling_entries_nonnegative_and_marginals_hold(seed in 0u64..500) {
            let mut rng = stream_rng(seed, Stream::Dataset);
            let cost = random_cosine_cost(&mut rng, 4, 5);
            let mu_s = uniform_marginals(4);
            let mu_t = uniform_marginals(5);
            let plan = sinkhorn_balanced(&cost, &mu_s, &mu_t, &balanced_cfg(0.05, 50_000)).unwrap();
            proptest::prop_assert!(plan.converged);
            proptest::prop_assert!(plan.plan.data().iter().all(|&v| v >= 0.0));
            proptest::prop_assert!(plan.marginal_violation <= 1e-10);
            proptest::prop_assert!((plan.total_mass() - 1.0).abs() < 1e-8);
        }
    }
}
