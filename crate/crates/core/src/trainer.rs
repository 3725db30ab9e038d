//! Training orchestration.
//!
//! One iteration runs, in order: the supervised forward and cross-entropy,
//! the two unlabeled views, the fixed-parameter transport solve on detached
//! weak-view features, the differentiable strong-view alignment loss, the
//! clustering and pseudo-label losses, one backward pass with an SGD-with-
//! momentum update, and the prototype momentum refresh. The transport solve
//! and the gradient step never overlap: the coupling is a constant by the
//! time any gradient flows.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{augment, AugmentationConfig, DomainDataset, Role, ViewKind};
use crate::losses::{self, IntraConfig, IntraVariant, PseudoLabelConfig};
use crate::model::{self, ClassifierKind, ModelConfig, ModelParams};
use crate::ot::{self, CouplingPlan, ReferenceSide, SinkhornConfig, SinkhornMode};
use crate::prototypes::{batch_class_means, PrototypeBank};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtReference {
    Prototypes,
    SourceBatch,
}

impl OtReference {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prototypes" => Ok(OtReference::Prototypes),
            "source_batch" => Ok(OtReference::SourceBatch),
            other => Err(Error::Config(format!(
                "ot_reference must be prototypes or source_batch, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OtReference::Prototypes => "prototypes",
            OtReference::SourceBatch => "source_batch",
        }
    }
}

/// Which augmented view labeled-target samples contribute to the CE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeTargetView {
    Weak,
    Strong,
    Both,
}

impl CeTargetView {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(CeTargetView::Weak),
            "strong" => Ok(CeTargetView::Strong),
            "both" => Ok(CeTargetView::Both),
            other => Err(Error::Config(format!(
                "ce_target_view must be weak, strong, or both, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CeTargetView::Weak => "weak",
            CeTargetView::Strong => "strong",
            CeTargetView::Both => "both",
        }
    }
}

/// Shape of the model, minus the data-dependent input/class dimensions.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub classifier: ClassifierKind,
    pub classifier_temperature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_dims: vec![32],
            feature_dim: 16,
            classifier: ClassifierKind::Cosine,
            classifier_temperature: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Sharpening temperature for the pseudo-label thresholding.
    pub pl_temperature: f64,
    pub batch_source: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    pub ot_reference: OtReference,
    pub intra_variant: IntraVariant,
    pub intra_row_sum_floor: f64,
    pub intra_include_labeled: bool,
    pub ce_target_view: CeTargetView,
    pub enable_inter: bool,
    pub enable_intra: bool,
    pub enable_pl: bool,
    pub proto_momentum: f64,
    pub augmentation: AugmentationConfig,
    pub eval_every: usize,
    /// Fraction of the unlabeled pool held out for inductive evaluation;
    /// zero keeps the transductive convention.
    pub eval_holdout_frac: f64,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // The alignment term is a mass-weighted average while ce/pl are
            // per-sample means; 1/batch_unlabeled puts the default weight on
            // the same per-sample footing. A weight of 1.0 here lets the
            // alignment term crush the supervised margin pressure and the
            // class prototypes collapse onto each other.
            lambda1: 1.0 / 32.0,
            lambda2: 1.0,
            tau: 0.95,
            pl_temperature: 1.0,
            batch_source: 32,
            batch_labeled: 8,
            batch_unlabeled: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            iterations: 2000,
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
            ot_reference: OtReference::Prototypes,
            intra_variant: IntraVariant::ClassWise,
            intra_row_sum_floor: 1e-8,
            intra_include_labeled: false,
            ce_target_view: CeTargetView::Weak,
            enable_inter: true,
            enable_intra: true,
            enable_pl: true,
            proto_momentum: 0.9,
            augmentation: AugmentationConfig::default(),
            eval_every: 100,
            eval_holdout_frac: 0.0,
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidParameter(
                "lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be in (0,1], got {}",
                self.tau
            )));
        }
        if self.batch_source == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::InvalidParameter("batch sizes must be at least 1".into()));
        }
        if self.pl_temperature <= 0.0 {
            return Err(Error::InvalidParameter(
                "pl_temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.proto_momentum) {
            return Err(Error::InvalidParameter(
                "proto_momentum must be in [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_holdout_frac) {
            return Err(Error::InvalidParameter(
                "eval_holdout_frac must be in [0,1)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParameter("eval_every must be at least 1".into()));
        }
        self.sinkhorn.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    fn intra_config(&self) -> IntraConfig {
        IntraConfig {
            row_sum_floor: self.intra_row_sum_floor,
            variant: self.intra_variant,
        }
    }

    fn pl_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            threshold: self.tau,
            temperature: self.pl_temperature,
        }
    }

    fn any_unlabeled_loss(&self) -> bool {
        self.enable_inter || self.enable_intra || self.enable_pl
    }
}

/// Everything that evolves across iterations.
pub struct TrainState {
    pub params: ModelParams,
    pub bank: PrototypeBank,
    /// SGD momentum buffers, parallel to `params.named_tensors()`.
    pub velocities: Vec<Tensor>,
    pub iteration: usize,
    pub rng_augment: ChaCha8Rng,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, source: &DomainDataset) -> Result<Self> {
        let mut model_cfg = ModelConfig::new(source.input_dim(), source.num_classes());
        model_cfg.hidden_dims = cfg.model.hidden_dims.clone();
        model_cfg.feature_dim = cfg.model.feature_dim;
        model_cfg.classifier = cfg.model.classifier;
        model_cfg.classifier_temperature = cfg.model.classifier_temperature;

        let mut init_rng = stream_rng(cfg.seed, Stream::Init);
        let params = ModelParams::init(model_cfg, &mut init_rng)?;
        let bank = PrototypeBank::init_from_source(&params, source, cfg.proto_momentum)?;
        let velocities = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(TrainState {
            params,
            bank,
            velocities,
            iteration: 0,
            rng_augment: stream_rng(cfg.seed, Stream::Augment),
        })
    }
}

/// The three per-iteration mini-batches.
pub struct StepBatches {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
}

/// Loss values and solver diagnostics of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_pl: f64,
    pub loss_inter: f64,
    pub loss_intra: f64,
    pub sinkhorn_iters: usize,
    pub marginal_violation: f64,
}

/// One metrics row per logging interval.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_pl: f64,
    pub loss_inter: f64,
    pub loss_intra: f64,
    pub sinkhorn_iters: usize,
    pub marginal_violation: f64,
    pub acc_overall: f64,
    pub acc_mca: f64,
    pub confident_frac: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iter,loss_total,loss_ce,loss_pl,loss_inter,loss_intra,sinkhorn_iters,marginal_violation,acc_overall,acc_mca,confident_frac";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{},{:.10e},{:.6},{:.6},{:.6}",
            self.iter,
            self.loss_total,
            self.loss_ce,
            self.loss_pl,
            self.loss_inter,
            self.loss_intra,
            self.sinkhorn_iters,
            self.marginal_violation,
            self.acc_overall,
            self.acc_mca,
            self.confident_frac,
        )
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(MetricsRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Plain softmax on a value tensor (no gradient involved).
fn softmax_plain(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let p = tape.softmax_rows(v, temperature)?;
    Ok(tape.value(p).clone())
}

/// One optimization step. See the module docs for the exact order.
pub fn train_step(
    state: &mut TrainState,
    batches: &StepBatches,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape);
    let model_cfg = state.params.config.clone();
    let num_classes = model_cfg.num_classes;

    // (1) Supervised forward: raw source rows plus augmented labeled-target
    // rows in a single batch, then the cross-entropy.
    let labeled_views: Vec<Tensor> = match cfg.ce_target_view {
        CeTargetView::Weak => vec![augment(
            &batches.labeled_x,
            ViewKind::Weak,
            &cfg.augmentation,
            &mut state.rng_augment,
        )],
        CeTargetView::Strong => vec![augment(
            &batches.labeled_x,
            ViewKind::Strong,
            &cfg.augmentation,
            &mut state.rng_augment,
        )],
        CeTargetView::Both => vec![
            augment(
                &batches.labeled_x,
                ViewKind::Weak,
                &cfg.augmentation,
                &mut state.rng_augment,
            ),
            augment(
                &batches.labeled_x,
                ViewKind::Strong,
                &cfg.augmentation,
                &mut state.rng_augment,
            ),
        ],
    };
    let mut ce_x = batches.source_x.clone();
    let mut ce_y = batches.source_y.clone();
    for view in &labeled_views {
        ce_x = ce_x.vstack(view)?;
        ce_y.extend_from_slice(&batches.labeled_y);
    }
    let n_source = batches.source_x.rows();

    let ce_input = tape.constant(ce_x);
    let ce_features = model::forward_features(&mut tape, &vars, ce_input)?;
    let ce_logits = model::forward_logits(&mut tape, &vars, &model_cfg, ce_features)?;
    let ce_preds = model::predict(&mut tape, ce_logits, 1.0)?;
    let ce = losses::cross_entropy(&mut tape, ce_preds, &ce_y)?;

    // Detached source features for the prototype refresh in (9), and for the
    // standard-OT reference variant.
    let source_features = tape
        .value(ce_features)
        .select_rows(&(0..n_source).collect::<Vec<_>>());

    let zero = tape.constant(Tensor::scalar(0.0));
    let mut pl = zero;
    let mut inter = zero;
    let mut intra = zero;
    let mut sinkhorn_iters = 0;
    let mut marginal_violation = 0.0;

    if cfg.any_unlabeled_loss() {
        // (2) The two unlabeled views, forwarded through the same parameters.
        let x_weak = augment(
            &batches.unlabeled_x,
            ViewKind::Weak,
            &cfg.augmentation,
            &mut state.rng_augment,
        );
        let x_strong = augment(
            &batches.unlabeled_x,
            ViewKind::Strong,
            &cfg.augmentation,
            &mut state.rng_augment,
        );
        let weak_input = tape.constant(x_weak);
        let strong_input = tape.constant(x_strong);
        let f_weak = model::forward_features(&mut tape, &vars, weak_input)?;
        let f_strong = model::forward_features(&mut tape, &vars, strong_input)?;
        let logits_weak = model::forward_logits(&mut tape, &vars, &model_cfg, f_weak)?;
        let logits_strong = model::forward_logits(&mut tape, &vars, &model_cfg, f_strong)?;
        let p_weak = model::predict(&mut tape, logits_weak, 1.0)?;
        let p_strong = model::predict(&mut tape, logits_strong, 1.0)?;

        if cfg.enable_inter {
            // (3) Transport solve with fixed parameters: reference rows vs
            // detached weak-view features. No gradient exists in this step.
            let reference = match cfg.ot_reference {
                OtReference::Prototypes => state.bank.prototypes().clone(),
                OtReference::SourceBatch => source_features.clone(),
            };
            let f_weak_detached = tape.value(f_weak).clone();
            let cost_a = ot::cost_matrix(
                &reference,
                &f_weak_detached,
                ViewKind::Weak,
                match cfg.ot_reference {
                    OtReference::Prototypes => ReferenceSide::Prototypes,
                    OtReference::SourceBatch => ReferenceSide::SourceBatch,
                },
            )?;
            let mu_s = ot::uniform_marginals(reference.rows());
            let mu_t = ot::uniform_marginals(f_weak_detached.rows());
            let coupling: CouplingPlan = match cfg.sinkhorn.mode {
                SinkhornMode::Balanced => {
                    ot::sinkhorn_balanced(&cost_a, &mu_s, &mu_t, &cfg.sinkhorn)?
                }
                SinkhornMode::Unbalanced => {
                    ot::sinkhorn_unbalanced(&cost_a, &mu_s, &mu_t, &cfg.sinkhorn)?
                }
            };
            sinkhorn_iters = coupling.iterations;
            marginal_violation = coupling.marginal_violation;

            // (4) Strong-view cost, differentiable; coupling held constant.
            let cost_b = ot::cost_matrix_node(&mut tape, &reference, f_strong)?;
            inter = ot::inter_loss(&mut tape, &coupling.plan, cost_b)?;
        }

        if cfg.enable_intra {
            // (5) Clustering consistency on the two views' predictions.
            let (p_a, p_b) = if cfg.intra_include_labeled {
                let l_weak = augment(
                    &batches.labeled_x,
                    ViewKind::Weak,
                    &cfg.augmentation,
                    &mut state.rng_augment,
                );
                let l_strong = augment(
                    &batches.labeled_x,
                    ViewKind::Strong,
                    &cfg.augmentation,
                    &mut state.rng_augment,
                );
                let lw = tape.constant(l_weak);
                let ls = tape.constant(l_strong);
                let fw = model::forward_features(&mut tape, &vars, lw)?;
                let fs = model::forward_features(&mut tape, &vars, ls)?;
                let lw_logits = model::forward_logits(&mut tape, &vars, &model_cfg, fw)?;
                let ls_logits = model::forward_logits(&mut tape, &vars, &model_cfg, fs)?;
                let pw = model::predict(&mut tape, lw_logits, 1.0)?;
                let ps = model::predict(&mut tape, ls_logits, 1.0)?;
                (tape.vstack(p_weak, pw)?, tape.vstack(p_strong, ps)?)
            } else {
                (p_weak, p_strong)
            };
            let intra_cfg = cfg.intra_config();
            intra = match cfg.intra_variant {
                IntraVariant::ClassWise => losses::intra_loss(&mut tape, p_a, p_b, &intra_cfg)?,
                IntraVariant::SampleWise => {
                    losses::intra_loss_samplewise(&mut tape, p_a, p_b, &intra_cfg)?
                }
            };
        }

        if cfg.enable_pl {
            // (6) Pseudo-label consistency: the sharpened weak view (values
            // only, so detached by construction) supervises the strong view.
            let p_weak_sharp = softmax_plain(tape.value(logits_weak), cfg.pl_temperature)?;
            pl = losses::pseudo_label_loss(&mut tape, &p_weak_sharp, p_strong, &cfg.pl_config())?;
        }
    }

    // (7) Weighted total; disabled components sit at exactly zero.
    let total = losses::total_loss(&mut tape, ce, pl, inter, intra, cfg.lambda1, cfg.lambda2)?;

    let record = StepRecord {
        loss_total: tape.value(total).item(),
        loss_ce: tape.value(ce).item(),
        loss_pl: tape.value(pl).item(),
        loss_inter: tape.value(inter).item(),
        loss_intra: tape.value(intra).item(),
        sinkhorn_iters,
        marginal_violation,
    };
    if !record.loss_total.is_finite() {
        return Err(Error::NonFinite {
            context: "total loss".into(),
            iteration: state.iteration,
        });
    }

    // (8) Backward and SGD-with-momentum update.
    tape.backward(total)?;
    let grads: Vec<Tensor> = vars.all().iter().map(|&v| tape.grad(v).clone()).collect();
    sgd_update(&mut state.params, &mut state.velocities, &grads, cfg)?;
    state.params.renormalize_classifier()?;

    // (9) Prototype momentum refresh from the detached supervised-pass
    // source features; runs regardless of which losses are enabled.
    let means = batch_class_means(&source_features, &batches.source_y, num_classes)?;
    state.bank.ema_update(&means)?;

    state.iteration += 1;
    Ok(record)
}

fn sgd_update(
    params: &mut ModelParams,
    velocities: &mut [Tensor],
    grads: &[Tensor],
    cfg: &TrainConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != velocities.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            detail: format!(
                "{} params, {} grads, {} velocity buffers",
                tensors.len(),
                grads.len(),
                velocities.len()
            ),
        });
    }
    for ((theta, v), g) in tensors.into_iter().zip(velocities.iter_mut()).zip(grads) {
        for ((t, vel), grad) in theta
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *vel = cfg.momentum * *vel - cfg.learning_rate * grad;
            *t += *vel;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub overall: f64,
    /// Mean per-class recall over the classes present in the set.
    pub mca: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no samples, excluded from the MCA.
    pub excluded_classes: Vec<usize>,
}

/// Metrics from predicted labels alone.
pub fn evaluate_predictions(
    predicted: &[usize],
    actual: &[usize],
    num_classes: usize,
) -> Result<Evaluation> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "evaluation needs matching non-empty label sets, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        confusion[a][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let overall = correct as f64 / actual.len() as f64;

    let mut recalls = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let total: usize = confusion[c].iter().sum();
        if total == 0 {
            excluded.push(c);
        } else {
            recalls.push(confusion[c][c] as f64 / total as f64);
        }
    }
    let mca = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(Evaluation {
        overall,
        mca,
        confusion,
        excluded_classes: excluded,
    })
}

/// Argmax evaluation on unaugmented samples, with the feature and
/// prediction invariants checked along the way.
pub fn evaluate(params: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let features = params.features_plain(x)?;
    for i in 0..features.rows() {
        let norm = features.row_norm(i);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "feature row {i} has norm {norm} at evaluation"
            )));
        }
    }
    let preds = params.predictions_plain(x, 1.0)?;
    for i in 0..preds.rows() {
        let sum: f64 = preds.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || preds.row(i).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvariantViolation(format!(
                "prediction row {i} is not a distribution at evaluation"
            )));
        }
    }
    let predicted: Vec<usize> = (0..preds.rows()).map(|i| preds.row_argmax(i)).collect();
    evaluate_predictions(&predicted, labels, params.config.num_classes)
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DivergenceInfo {
    pub iteration: usize,
    pub context: String,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    /// Absent when the run diverged before finishing.
    pub final_eval: Option<Evaluation>,
    pub divergence: Option<DivergenceInfo>,
}

/// Index pool that reshuffles at every wrap-around.
struct Cycler {
    pool: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(pool: Vec<usize>) -> Self {
        let pos = pool.len();
        Cycler { pool, pos }
    }

    fn next_batch(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos >= self.pool.len() {
                self.pool.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn validate_datasets(source: &DomainDataset, target: &DomainDataset) -> Result<()> {
    if source.input_dim() != target.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "train_run",
            detail: format!(
                "source dim {} vs target dim {}",
                source.input_dim(),
                target.input_dim()
            ),
        });
    }
    if source.num_classes() != target.num_classes() {
        return Err(Error::InvalidParameter(
            "source and target must share one label space".into(),
        ));
    }
    if target.indices_with_role(Role::Labeled).is_empty() {
        return Err(Error::SplitError(
            "target has no labeled samples; apply a shot split first".into(),
        ));
    }
    if target.indices_with_role(Role::Unlabeled).is_empty() {
        return Err(Error::SplitError("target has no unlabeled samples".into()));
    }
    Ok(())
}

/// Run the full loop: init, iterate, evaluate every `eval_every` steps, and
/// evaluate once more at the end. A non-finite loss stops the run and is
/// reported in the outcome instead of an error, so the metrics collected so
/// far survive.
pub fn train_run(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    validate_datasets(source, target)?;

    let labeled_idx = target.indices_with_role(Role::Labeled);
    let mut unlabeled_idx = target.indices_with_role(Role::Unlabeled);

    // Optional inductive holdout carved from the unlabeled pool.
    let eval_idx: Vec<usize> = if cfg.eval_holdout_frac > 0.0 {
        let mut rng = stream_rng(cfg.seed, Stream::Holdout);
        let mut pool = unlabeled_idx.clone();
        pool.shuffle(&mut rng);
        let n_holdout = ((pool.len() as f64) * cfg.eval_holdout_frac).floor() as usize;
        let holdout: Vec<usize> = pool[..n_holdout.max(1)].to_vec();
        unlabeled_idx.retain(|i| !holdout.contains(i));
        if unlabeled_idx.is_empty() {
            return Err(Error::SplitError(
                "holdout consumed the whole unlabeled pool".into(),
            ));
        }
        holdout
    } else {
        unlabeled_idx.clone()
    };
    let eval_x = target.samples().select_rows(&eval_idx);
    let eval_y: Vec<usize> = eval_idx.iter().map(|&i| target.labels()[i]).collect();

    let mut state = TrainState::init(cfg, source)?;
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batch);
    let mut source_cycler = Cycler::new((0..source.len()).collect());
    let mut labeled_cycler = Cycler::new(labeled_idx);
    let mut unlabeled_cycler = Cycler::new(unlabeled_idx);

    let mut metrics = Vec::new();
    let mut divergence = None;
    for iter in 1..=cfg.iterations {
        let src = source_cycler.next_batch(cfg.batch_source, &mut batch_rng);
        let lab = labeled_cycler.next_batch(cfg.batch_labeled, &mut batch_rng);
        let unl = if cfg.any_unlabeled_loss() {
            unlabeled_cycler.next_batch(cfg.batch_unlabeled, &mut batch_rng)
        } else {
            Vec::new()
        };
        let batches = StepBatches {
            source_x: source.samples().select_rows(&src),
            source_y: src.iter().map(|&i| source.labels()[i]).collect(),
            labeled_x: target.samples().select_rows(&lab),
            labeled_y: lab.iter().map(|&i| target.labels()[i]).collect(),
            unlabeled_x: target.samples().select_rows(&unl),
        };
        let record = match train_step(&mut state, &batches, cfg) {
            Ok(r) => r,
            Err(Error::NonFinite { context, iteration }) => {
                divergence = Some(DivergenceInfo {
                    iteration,
                    context,
                });
                break;
            }
            Err(e) => return Err(e),
        };

        if iter % cfg.eval_every == 0 || iter == cfg.iterations {
            let eval = evaluate(&state.params, &eval_x, &eval_y)?;
            let confident_frac = eval_confident_fraction(&state.params, &eval_x, cfg)?;
            metrics.push(MetricsRecord {
                iter,
                loss_total: record.loss_total,
                loss_ce: record.loss_ce,
                loss_pl: record.loss_pl,
                loss_inter: record.loss_inter,
                loss_intra: record.loss_intra,
                sinkhorn_iters: record.sinkhorn_iters,
                marginal_violation: record.marginal_violation,
                acc_overall: eval.overall,
                acc_mca: eval.mca,
                confident_frac,
            });
        }
    }

    let final_eval = if divergence.is_none() {
        Some(evaluate(&state.params, &eval_x, &eval_y)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        state,
        metrics,
        final_eval,
        divergence,
    })
}

/// Fraction of the evaluation pool whose sharpened (unaugmented) prediction
/// clears the confidence threshold.
fn eval_confident_fraction(params: &ModelParams, x: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let preds = params.predictions_plain(x, cfg.pl_temperature)?;
    Ok(losses::confident_fraction(&preds, cfg.tau))
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Tab4,
    Tab5,
    All,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tab4" => Ok(GridKind::Tab4),
            "tab5" => Ok(GridKind::Tab5),
            "all" => Ok(GridKind::All),
            other => Err(Error::Config(format!(
                "grid must be tab4, tab5, or all, got {other:?}"
            ))),
        }
    }
}

/// One ablation configuration: its id, a description, and the knobs it
/// changes relative to the base config.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub config_id: String,
    pub description: String,
    pub enable_inter: bool,
    pub enable_intra: bool,
    pub enable_pl: bool,
    pub ot_reference: OtReference,
    pub intra_variant: IntraVariant,
}

impl AblationCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.enable_inter = self.enable_inter;
        cfg.enable_intra = self.enable_intra;
        cfg.enable_pl = self.enable_pl;
        cfg.ot_reference = self.ot_reference;
        cfg.intra_variant = self.intra_variant;
        cfg
    }
}

/// The loss-component grid (8 rows) and the 2x2 transport/clustering design
/// grid (4 rows).
pub fn ablation_cells(grid: GridKind) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    if grid != GridKind::Tab4 {
        let combos: [(&str, &str, bool, bool, bool); 8] = [
            ("tab5_a", "ce_only", false, false, false),
            ("tab5_b", "ce+inter", true, false, false),
            ("tab5_c", "ce+intra", false, true, false),
            ("tab5_d", "ce+pl", false, false, true),
            ("tab5_e", "ce+inter+intra", true, true, false),
            ("tab5_f", "ce+inter+pl", true, false, true),
            ("tab5_g", "ce+intra+pl", false, true, true),
            ("tab5_h", "ce+inter+intra+pl", true, true, true),
        ];
        for (id, desc, inter, intra, pl) in combos {
            cells.push(AblationCell {
                config_id: id.to_string(),
                description: desc.to_string(),
                enable_inter: inter,
                enable_intra: intra,
                enable_pl: pl,
                ot_reference: OtReference::Prototypes,
                intra_variant: IntraVariant::ClassWise,
            });
        }
    }
    if grid != GridKind::Tab5 {
        let designs: [(&str, &str, OtReference, IntraVariant); 4] = [
            (
                "tab4_standard_sample",
                "standard_ot+sample_wise",
                OtReference::SourceBatch,
                IntraVariant::SampleWise,
            ),
            (
                "tab4_standard_class",
                "standard_ot+class_wise",
                OtReference::SourceBatch,
                IntraVariant::ClassWise,
            ),
            (
                "tab4_proto_sample",
                "prototype_ot+sample_wise",
                OtReference::Prototypes,
                IntraVariant::SampleWise,
            ),
            (
                "tab4_proto_class",
                "prototype_ot+class_wise",
                OtReference::Prototypes,
                IntraVariant::ClassWise,
            ),
        ];
        for (id, desc, ot_ref, variant) in designs {
            cells.push(AblationCell {
                config_id: id.to_string(),
                description: desc.to_string(),
                enable_inter: true,
                enable_intra: true,
                enable_pl: true,
                ot_reference: ot_ref,
                intra_variant: variant,
            });
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config_id: String,
    pub description: String,
    pub seed: u64,
    pub acc_overall: f64,
    pub acc_mca: f64,
}

pub const ABLATION_CSV_HEADER: &str = "config_id,description,seed,acc_overall,acc_mca";

impl AblationRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.config_id, self.description, self.seed, self.acc_overall, self.acc_mca
        )
    }
}

/// Run one grid cell at one seed. `data_for_seed` regenerates the benchmark
/// for the seed, so every cell of a seed sees the same datasets.
pub fn run_ablation_cell(
    base: &TrainConfig,
    cell: &AblationCell,
    seed: u64,
    data_for_seed: &dyn Fn(u64) -> Result<(DomainDataset, DomainDataset)>,
) -> Result<AblationRow> {
    let (source, target) = data_for_seed(seed)?;
    let mut cfg = cell.apply(base);
    cfg.seed = seed;
    let outcome = train_run(&cfg, &source, &target)?;
    let eval = outcome.final_eval.ok_or(Error::NonFinite {
        context: "ablation cell diverged".into(),
        iteration: outcome.divergence.map(|d| d.iteration).unwrap_or(0),
    })?;
    Ok(AblationRow {
        config_id: cell.config_id.clone(),
        description: cell.description.clone(),
        seed,
        acc_overall: eval.overall,
        acc_mca: eval.mca,
    })
}

/// Sequential grid sweep: every cell of the grid at every seed, rows in
/// (cell, seed) order.
pub fn ablation_grid(
    base: &TrainConfig,
    grid: GridKind,
    seeds: &[u64],
    data_for_seed: &dyn Fn(u64) -> Result<(DomainDataset, DomainDataset)>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cell in ablation_cells(grid) {
        for &seed in seeds {
            rows.push(run_ablation_cell(base, &cell, seed, data_for_seed)?);
        }
    }
    Ok(rows)
}
