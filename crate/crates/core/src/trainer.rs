//! Desk-scale training with variable sparsity, and the sparsity-sweep
//! evaluator that measures one trained model across measurement densities.
//!
//! Determinism contract: every random draw of epoch `e` comes from an RNG
//! derived from `(seed, e)`, so resuming from an epoch-boundary checkpoint
//! replays the remaining epochs bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{self, Scene};
use crate::objectives::{
    compute_metrics, compute_metrics_masked, validity_mask, MetricOptions, MetricReport,
    SILOG_ALPHA, SILOG_LAMBDA,
};
use crate::params::ParamSet;
use crate::pipeline::{self, InitialDepth, ModelConfig, RefineConfig};
use crate::tape::Tape;
use crate::{DepthMap, Result, Scalar, SdrError, SparseDepth, Tensor};

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1L2,
    Silog,
}

/// Where the initial dense estimate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialEstimate {
    /// Corrupt the ground truth with the simulated-estimator error model.
    Simulated,
    /// Predict it with the guidance network's depth head; the head is
    /// created at initialization and trained end to end.
    Predicted,
}

/// How sparse inputs are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityProtocol {
    /// Per scene, a uniform point count in `[min_s, max_s]`, capped at the
    /// number of valid pixels.
    Points { min_s: usize, max_s: usize },
    /// Per scene, a line count from {4, 8, 16, 32, 64}, capped at the
    /// height.
    Lines,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Scenes accumulated into one optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate halves (applies from that epoch
    /// on). Strictly increasing.
    pub lr_halving_epochs: Vec<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossKind,
    pub protocol: SparsityProtocol,
    pub initial: InitialEstimate,
    /// Severity of the simulated initial-estimate error in `[0, 1]`;
    /// unused when the initial estimate is predicted.
    pub mde_severity: f64,
    /// Upper bound on scheduled first-layer iterations during training;
    /// evaluation always runs the full schedule.
    pub max_layer1_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 32,
            batch_size: 2,
            lr: 1e-3,
            lr_halving_epochs: vec![],
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            loss: LossKind::L1L2,
            protocol: SparsityProtocol::Points {
                min_s: 10,
                max_s: 250,
            },
            initial: InitialEstimate::Simulated,
            mde_severity: 0.6,
            max_layer1_iters: 12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(SdrError::Config(
                "steps_per_epoch and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SdrError::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SdrError::Config("weight decay must be nonnegative".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(SdrError::Config(format!(
                    "moment coefficients must lie in [0, 1), got {b}"
                )));
            }
        }
        if !self
            .lr_halving_epochs
            .windows(2)
            .all(|pair| pair[0] < pair[1])
        {
            return Err(SdrError::Config(
                "lr_halving_epochs must be strictly increasing".into(),
            ));
        }
        if let SparsityProtocol::Points { min_s, max_s } = self.protocol {
            if min_s == 0 || min_s > max_s {
                return Err(SdrError::Config(format!(
                    "point protocol needs 1 <= min_s <= max_s, got [{min_s}, {max_s}]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mde_severity) {
            return Err(SdrError::Config("mde_severity must be in [0, 1]".into()));
        }
        if self.max_layer1_iters == 0 {
            return Err(SdrError::Config("max_layer1_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch`: the initial rate halved once per
    /// milestone that has been reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self
            .lr_halving_epochs
            .iter()
            .filter(|&&m| m <= epoch)
            .count();
        self.lr / f64::powi(2.0, halvings as i32)
    }
}

/// Derives an independent stream seed; used so each epoch (and each sweep
/// scene) gets its own generator that can be reconstructed in isolation.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = u64::MAX;

/// First-moment estimate, second-moment estimate, decoupled weight decay.
/// State is stored per parameter name and serializes into a checkpoint
/// alongside the parameters (`opt.m.*`, `opt.v.*`, `opt.step`).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Scalar> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> Default for Optimizer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Optimizer<T> {
    pub fn new() -> Self {
        Optimizer {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter: moment accumulation with bias
    /// correction, then `p -= lr * (update + weight_decay * p)`. A zero
    /// gradient with zero decay leaves a parameter bit-identical.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let corr1 = T::from_f64(1.0 - beta1.powi(t));
        let corr2 = T::from_f64(1.0 - beta2.powi(t));
        let eps = T::from_f64(1e-8);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(weight_decay);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                SdrError::Config(format!("missing gradient for parameter {name}"))
            })?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::ONE - b1) * gi;
                let vi = b2 * v.data()[i] + (T::ONE - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * pi);
            }
        }
        Ok(())
    }

    /// Packs parameters and optimizer state into one set for checkpointing.
    pub fn compose_checkpoint(&self, params: &ParamSet<T>) -> ParamSet<T> {
        let mut out = params.clone();
        for (name, t) in &self.m {
            out.insert(format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("opt.v.{name}"), t.clone());
        }
        out.insert(
            "opt.step",
            Tensor::from_vec(&[], vec![T::from_f64(self.step_count as f64)])
                .expect("scalar tensor"),
        );
        out
    }

    /// Splits a checkpoint produced by [`Optimizer::compose_checkpoint`]
    /// back into parameters and optimizer state.
    pub fn split_checkpoint(mut state: ParamSet<T>) -> (ParamSet<T>, Optimizer<T>) {
        let mut opt = Optimizer::new();
        if let Some(t) = state.remove("opt.step") {
            opt.step_count = t.data()[0].to_f64() as u64;
        }
        let opt_names: Vec<String> = state
            .names()
            .filter(|n| n.starts_with("opt."))
            .cloned()
            .collect();
        for name in opt_names {
            let t = state.remove(&name).expect("listed name");
            if let Some(stripped) = name.strip_prefix("opt.m.") {
                opt.m.insert(stripped.to_string(), t);
            } else if let Some(stripped) = name.strip_prefix("opt.v.") {
                opt.v.insert(stripped.to_string(), t);
            }
        }
        (state, opt)
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    /// Mean loss over the batch.
    pub loss: f64,
    /// Mean sparse count over the batch.
    pub sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,sparsity\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:.9},{:.3}\n",
                e.epoch, e.step, e.loss, e.sparsity
            ));
        }
        out
    }

    /// Mean loss of each epoch present in the log, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let slot = acc.entry(e.epoch).or_insert((0.0, 0));
            slot.0 += e.loss;
            slot.1 += 1;
        }
        acc.into_iter()
            .map(|(epoch, (sum, n))| (epoch, sum / n as f64))
            .collect()
    }
}

/// Where training starts from.
pub enum TrainStart<T: Scalar> {
    /// Initialize parameters from the config seed.
    Fresh,
    /// Resume a checkpoint (parameters plus optimizer state) at the given
    /// epoch; replays the remaining epochs exactly as an uninterrupted run.
    Checkpoint {
        state: ParamSet<T>,
        next_epoch: usize,
    },
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: ParamSet<T>,
    pub optimizer: Optimizer<T>,
    pub log: TrainLog,
}

/// Parameters a fresh training run starts from, exposed so callers can
/// reproduce the initialization without running a step. The depth head is
/// created exactly when the initial estimate is predicted.
pub fn initial_params<T: Scalar>(cfg: &TrainConfig, model: &ModelConfig) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM));
    let with_depth_head = cfg.initial == InitialEstimate::Predicted;
    pipeline::init_model_params(&mut rng, model, with_depth_head)
}

/// Forward and backward over one scene; returns the loss and per-parameter
/// gradients. The initial estimate is `d0` when given and the guidance
/// network's own prediction otherwise. Shared by the training loop and the
/// gradient-flow tests.
pub fn scene_loss_grads<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    refine_cfg: &RefineConfig,
    loss_kind: LossKind,
    max_layer1_iters: usize,
    scene: &Scene<T>,
    d0: Option<&DepthMap<T>>,
    sparse: &SparseDepth<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let schedule = pipeline::schedule_for(sparse, refine_cfg)?;
    let n1 = schedule.n_layer1.min(max_layer1_iters);
    let mut tape = Tape::new();
    let out = pipeline::refine_tape(
        &mut tape,
        params,
        model,
        refine_cfg,
        n1,
        schedule.n_layer2,
        &scene.image,
        sparse,
        match d0 {
            Some(map) => InitialDepth::External(map),
            None => InitialDepth::Predicted,
        },
    )?;
    let gt_id = tape.constant(scene.gt_depth.as_tensor().clone())?;
    let valid_id = tape.constant(validity_mask(&scene.gt_depth))?;
    let loss_id = match loss_kind {
        LossKind::L1L2 => tape.loss_l1l2(out.depth, gt_id, valid_id)?,
        LossKind::Silog => {
            tape.loss_silog(out.depth, gt_id, valid_id, SILOG_ALPHA, SILOG_LAMBDA)?
        }
    };
    let grads = tape.backward(loss_id)?;
    let loss = tape.scalar(loss_id).to_f64();
    Ok((loss, tape.param_grads(&grads)))
}

fn draw_sparse<T: Scalar>(
    rng: &mut ChaCha8Rng,
    protocol: SparsityProtocol,
    gt: &DepthMap<T>,
) -> Result<SparseDepth<T>> {
    match protocol {
        SparsityProtocol::Points { min_s, max_s } => {
            let valid = gt
                .as_tensor()
                .data()
                .iter()
                .filter(|&&v| v > T::ZERO)
                .count();
            let s = rng.gen_range(min_s..=max_s).min(valid);
            let sample_seed = rng.gen::<u64>();
            datagen::sample_points(gt, s, sample_seed)
        }
        SparsityProtocol::Lines => {
            let n = datagen::draw_train_lines(rng, gt.height());
            let sample_seed = rng.gen::<u64>();
            datagen::sample_lines(gt, n, sample_seed)
        }
    }
}

/// Runs the variable-sparsity training loop. Per scene: draw a scene from
/// `scenes`, corrupt its depth into an initial estimate, draw a sparse
/// sample, run the recorded refinement, and accumulate gradients over the
/// batch in index order. Checkpoints (parameters plus optimizer state) are
/// written to `checkpoint_path` after initialization and after every
/// epoch, so a numeric failure aborts with the last good state on disk and
/// the error names the failing epoch and step.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    refine_cfg: &RefineConfig,
    scenes: &dyn Fn(u64) -> Result<Scene<T>>,
    start: TrainStart<T>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model.validate()?;
    refine_cfg.validate()?;

    let (mut params, mut optimizer, start_epoch) = match start {
        TrainStart::Fresh => (initial_params(cfg, model)?, Optimizer::new(), 0),
        TrainStart::Checkpoint { state, next_epoch } => {
            let (params, optimizer) = Optimizer::split_checkpoint(state);
            (params, optimizer, next_epoch)
        }
    };
    if let Some(path) = checkpoint_path {
        optimizer.compose_checkpoint(&params).save(path)?;
    }

    let mut log = TrainLog::default();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        for step in 0..cfg.steps_per_epoch {
            let fail = |e: SdrError| match e.kind() {
                crate::error::ErrorKind::Numeric => SdrError::Diverged { epoch, step },
                _ => e,
            };
            let mut grad_acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let mut loss_acc = 0.0;
            let mut sparsity_acc = 0.0;
            for _ in 0..cfg.batch_size {
                let scene = scenes(rng.gen::<u64>())?;
                let mde_seed = rng.gen::<u64>();
                let d0 = match cfg.initial {
                    InitialEstimate::Simulated => Some(datagen::simulate_mde(
                        &scene.gt_depth,
                        mde_seed,
                        cfg.mde_severity,
                    )?),
                    InitialEstimate::Predicted => None,
                };
                let sparse = draw_sparse(&mut rng, cfg.protocol, &scene.gt_depth)?;
                sparsity_acc += sparse.count() as f64;
                let (loss, grads) = scene_loss_grads(
                    &params,
                    model,
                    refine_cfg,
                    cfg.loss,
                    cfg.max_layer1_iters,
                    &scene,
                    d0.as_ref(),
                    &sparse,
                )
                .map_err(fail)?;
                loss_acc += loss;
                for (name, g) in grads {
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            grad_acc.insert(name, g);
                        }
                    }
                }
            }
            let inv_batch = T::from_f64(1.0 / cfg.batch_size as f64);
            for g in grad_acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv_batch;
                }
            }
            optimizer.step(
                &mut params,
                &grad_acc,
                lr,
                cfg.weight_decay,
                cfg.beta1,
                cfg.beta2,
            )?;
            for (_, p) in params.iter() {
                if !p.all_finite() {
                    return Err(SdrError::Diverged { epoch, step });
                }
            }
            log.entries.push(TrainLogEntry {
                epoch,
                step,
                loss: loss_acc / cfg.batch_size as f64,
                sparsity: sparsity_acc / cfg.batch_size as f64,
            });
        }
        if let Some(path) = checkpoint_path {
            optimizer.compose_checkpoint(&params).save(path)?;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        log,
    })
}

/// One sparsity level of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepLevel {
    /// Measurement count; zero evaluates the no-measurement fallback.
    pub level: usize,
    pub report: MetricReport,
}

/// Mean metrics per sparsity level, with the un-refined initial estimate as
/// the baseline row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub baseline: MetricReport,
    pub levels: Vec<SweepLevel>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("level,{}\n", MetricReport::CSV_HEADER);
        out.push_str(&format!("baseline,{}\n", self.baseline.to_csv_row()));
        for l in &self.levels {
            out.push_str(&format!("{},{}\n", l.level, l.report.to_csv_row()));
        }
        out
    }
}

/// Evaluation-protocol knobs for [`evaluate_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub initial: InitialEstimate,
    /// Corruption severity for the simulated initial estimate.
    pub severity: f64,
    /// When set, measurements inside this region are discarded before
    /// refinement and metrics are restricted to the region's interior.
    pub hole: Option<datagen::HoleRect>,
    pub metrics: MetricOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            initial: InitialEstimate::Simulated,
            severity: 0.6,
            hole: None,
            metrics: MetricOptions::default(),
        }
    }
}

/// Evaluates one parameter set across measurement densities: for each of
/// `n_scenes` held-out scenes, forms an initial estimate (simulated from
/// the ground truth, or predicted by the model with no measurements),
/// refines it at every sparsity level with the full schedule, and averages
/// the metrics. Levels must be strictly increasing; level zero exercises
/// the no-measurement fallback and reproduces the baseline row.
pub fn evaluate_sweep<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    refine_cfg: &RefineConfig,
    levels: &[usize],
    n_scenes: usize,
    seed: u64,
    opts: SweepOptions,
    scenes: &dyn Fn(u64) -> Result<Scene<T>>,
) -> Result<SweepResult> {
    if levels.is_empty() || n_scenes == 0 {
        return Err(SdrError::Config(
            "sweep needs at least one level and one scene".into(),
        ));
    }
    if !levels.windows(2).all(|pair| pair[0] < pair[1]) {
        return Err(SdrError::Config(
            "sweep levels must be strictly increasing".into(),
        ));
    }
    let measure = |pred: &DepthMap<T>, gt: &DepthMap<T>| -> Result<MetricReport> {
        match opts.hole {
            Some(rect) => {
                let region = rect.indicator(gt.height(), gt.width())?;
                compute_metrics_masked(pred, gt, &region, opts.metrics)
            }
            None => compute_metrics(pred, gt, opts.metrics),
        }
    };
    let mut baseline_reports = Vec::with_capacity(n_scenes);
    let mut level_reports: Vec<Vec<MetricReport>> = vec![Vec::with_capacity(n_scenes); levels.len()];
    for i in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let scene = scenes(rng.gen::<u64>())?;
        let (h, w) = (scene.gt_depth.height(), scene.gt_depth.width());
        let empty = SparseDepth::from_dense(Tensor::zeros(&[h, w]))?;
        let mde_seed = rng.gen::<u64>();
        let d0 = match opts.initial {
            InitialEstimate::Simulated => {
                datagen::simulate_mde(&scene.gt_depth, mde_seed, opts.severity)?
            }
            InitialEstimate::Predicted => {
                pipeline::predict_initial(params, model, &scene.image, &empty)?
            }
        };
        baseline_reports.push(measure(&d0, &scene.gt_depth)?);
        for (k, &level) in levels.iter().enumerate() {
            let mut sparse = if level == 0 {
                empty.clone()
            } else {
                datagen::sample_points(&scene.gt_depth, level, rng.gen::<u64>())?
            };
            if let Some(rect) = opts.hole {
                sparse = datagen::mask_hole(&sparse, rect)?.0;
            }
            let refined = match opts.initial {
                InitialEstimate::Simulated => {
                    pipeline::refine(params, model, refine_cfg, &scene.image, &sparse, &d0, None)?.0
                }
                InitialEstimate::Predicted => {
                    pipeline::refine_predicted(params, model, refine_cfg, &scene.image, &sparse, None)?.0
                }
            };
            level_reports[k].push(measure(&refined, &scene.gt_depth)?);
        }
    }
    Ok(SweepResult {
        baseline: MetricReport::mean(&baseline_reports).expect("n_scenes >= 1"),
        levels: levels
            .iter()
            .zip(level_reports)
            .map(|(&level, reports)| SweepLevel {
                level,
                report: MetricReport::mean(&reports).expect("n_scenes >= 1"),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceConfig;
    use crate::pipeline::{ScheduleMode, LAYER1_PREFIX, LAYER2_PREFIX};
    use crate::propagation::PropagationConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            guidance: GuidanceConfig {
                hf_channels: 2,
                out_channels: 4,
                widths: [2, 3, 4],
                with_depth_head: false,
            },
            propagation: PropagationConfig {
                window: 3,
                channels: 3,
                guidance_channels: 4,
            },
        }
    }

    fn tiny_refine_cfg() -> RefineConfig {
        RefineConfig {
            window: 3,
            min_iters: 2,
            second_layer_iters: 2,
            mode: ScheduleMode::Points,
            ..RefineConfig::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 1,
            lr: 1e-3,
            protocol: SparsityProtocol::Points {
                min_s: 10,
                max_s: 40,
            },
            mde_severity: 0.5,
            max_layer1_iters: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn scene_source<T: Scalar>() -> impl Fn(u64) -> Result<Scene<T>> {
        |seed| datagen::gen_scene(seed, 16, 16, 0.5)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_exact() {
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..tiny_train_cfg()
        };
        let model = tiny_model();
        let initial = initial_params::<f32>(&cfg, &model).unwrap();
        let out = train(
            &cfg,
            &model,
            &tiny_refine_cfg(),
            &scene_source(),
            TrainStart::Fresh,
            None,
        )
        .unwrap();
        assert_eq!(out.params, initial);
        assert_eq!(out.log.entries.len(), 2);
    }

    #[test]
    fn identical_seeds_reproduce_identical_logs() {
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_train_cfg()
        };
        let model = tiny_model();
        let run = |_: ()| {
            train::<f32>(
                &cfg,
                &model,
                &tiny_refine_cfg(),
                &scene_source(),
                TrainStart::Fresh,
                None,
            )
            .unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut bad = tiny_train_cfg();
        bad.lr_halving_epochs = vec![3, 3];
        assert!(bad.validate().is_err());
        bad = tiny_train_cfg();
        bad.protocol = SparsityProtocol::Points { min_s: 9, max_s: 3 };
        assert!(bad.validate().is_err());
        bad = tiny_train_cfg();
        bad.beta2 = 1.0;
        assert!(bad.validate().is_err());
        let good = tiny_train_cfg();
        assert!(good.validate().is_ok());
        assert_eq!(good.lr_at(0), 1e-3);
        let stepped = TrainConfig {
            lr_halving_epochs: vec![1, 3],
            ..tiny_train_cfg()
        };
        assert_eq!(stepped.lr_at(0), 1e-3);
        assert_eq!(stepped.lr_at(1), 5e-4);
        assert_eq!(stepped.lr_at(3), 2.5e-4);
    }

    #[test]
    fn optimizer_moves_only_by_decay_under_zero_gradient() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::full(&[2], 0.8));
        let grads: BTreeMap<String, Tensor<f64>> =
            [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        let mut opt = Optimizer::new();
        opt.step(&mut params, &grads, 0.1, 0.5, 0.9, 0.999).unwrap();
        for &v in params.get("w").unwrap().data() {
            assert_eq!(v, 0.8 - 0.1 * 0.5 * 0.8);
        }
        let mut params2 = ParamSet::<f64>::new();
        params2.insert("w", Tensor::full(&[2], 0.8));
        let mut opt2 = Optimizer::new();
        opt2.step(&mut params2, &grads, 0.1, 0.0, 0.9, 0.999).unwrap();
        for &v in params2.get("w").unwrap().data() {
            assert_eq!(v, 0.8);
        }
    }

    #[test]
    fn attention_parameters_receive_gradient() {
        let model = tiny_model();
        let cfg = tiny_train_cfg();
        let params = initial_params::<f64>(&cfg, &model).unwrap();
        let scene: Scene<f64> = datagen::gen_scene(5, 16, 16, 0.6).unwrap();
        let d0 = datagen::simulate_mde(&scene.gt_depth, 9, 0.5).unwrap();
        let sparse = datagen::sample_points(&scene.gt_depth, 25, 3).unwrap();
        let (_, grads) = scene_loss_grads(
            &params,
            &model,
            &tiny_refine_cfg(),
            LossKind::L1L2,
            4,
            &scene,
            Some(&d0),
            &sparse,
        )
        .unwrap();
        for prefix in [LAYER1_PREFIX, LAYER2_PREFIX] {
            for suffix in ["query.weight", "key.weight", "offset_bias"] {
                let g = &grads[&format!("{prefix}.{suffix}")];
                assert!(
                    g.data().iter().any(|&v| v != 0.0),
                    "{prefix}.{suffix} received no gradient"
                );
            }
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let model = tiny_model();
        let refine_cfg = tiny_refine_cfg();
        let full_cfg = TrainConfig {
            epochs: 4,
            ..tiny_train_cfg()
        };
        let full = train::<f32>(
            &full_cfg,
            &model,
            &refine_cfg,
            &scene_source(),
            TrainStart::Fresh,
            None,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let half = train::<f32>(
            &half_cfg,
            &model,
            &refine_cfg,
            &scene_source(),
            TrainStart::Fresh,
            Some(&path),
        )
        .unwrap();
        let state = ParamSet::<f32>::load(&path).unwrap();
        let resumed = train::<f32>(
            &full_cfg,
            &model,
            &refine_cfg,
            &scene_source(),
            TrainStart::Checkpoint {
                state,
                next_epoch: 2,
            },
            None,
        )
        .unwrap();

        assert_eq!(resumed.params, full.params);
        let mut combined = half.log.entries;
        combined.extend(resumed.log.entries);
        assert_eq!(combined, full.log.entries);
    }

    #[test]
    fn divergence_aborts_and_leaves_last_checkpoint() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e22,
            ..tiny_train_cfg()
        };
        let err = train::<f32>(
            &cfg,
            &model,
            &tiny_refine_cfg(),
            &scene_source(),
            TrainStart::Fresh,
            Some(&path),
        )
        .unwrap_err();
        assert!(matches!(err, SdrError::Diverged { .. }));
        // The pre-divergence state is still on disk and loadable.
        let state = ParamSet::<f32>::load(&path).unwrap();
        let (params, _) = Optimizer::split_checkpoint(state);
        assert!(params.iter().all(|(_, t)| t.all_finite()));
        assert!(params.contains("prop1.query.weight"));
    }

    #[test]
    fn sweep_reports_baseline_and_levels_reproducibly() {
        let model = tiny_model();
        let cfg = tiny_train_cfg();
        let params = initial_params::<f64>(&cfg, &model).unwrap();
        let opts = SweepOptions {
            severity: 0.5,
            ..SweepOptions::default()
        };
        let run = || {
            evaluate_sweep(
                &params,
                &model,
                &tiny_refine_cfg(),
                &[0, 20, 60],
                2,
                77,
                opts,
                &scene_source(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // Level zero is the documented fallback: output equals the initial
        // estimate, so its metrics equal the baseline's.
        assert_eq!(a.levels[0].report, a.baseline);
        assert_eq!(a.levels[1].level, 20);
        let csv = a.to_csv();
        assert!(csv.lines().count() == 5);
        assert!(evaluate_sweep(
            &params,
            &model,
            &tiny_refine_cfg(),
            &[50, 20],
            1,
            1,
            opts,
            &scene_source(),
        )
        .is_err());
    }

    #[test]
    fn predicted_initial_mode_trains_the_depth_head() {
        let model = tiny_model();
        let cfg = TrainConfig {
            initial: InitialEstimate::Predicted,
            ..tiny_train_cfg()
        };
        let before = initial_params::<f32>(&cfg, &model).unwrap();
        assert!(before.contains("guide.depth_head.weight"));
        let out = train(
            &cfg,
            &model,
            &tiny_refine_cfg(),
            &scene_source::<f32>(),
            TrainStart::Fresh,
            None,
        )
        .unwrap();
        assert_ne!(
            out.params.get("guide.depth_head.weight").unwrap().data(),
            before.get("guide.depth_head.weight").unwrap().data(),
        );

        // The prediction-mode sweep runs end to end and reproduces the
        // baseline at level zero.
        let sweep = evaluate_sweep(
            &out.params,
            &model,
            &tiny_refine_cfg(),
            &[0, 15],
            1,
            5,
            SweepOptions {
                initial: InitialEstimate::Predicted,
                ..SweepOptions::default()
            },
            &scene_source(),
        )
        .unwrap();
        assert_eq!(sweep.levels[0].report, sweep.baseline);
    }

    #[test]
    fn hole_restricted_sweep_measures_only_the_hole() {
        let model = tiny_model();
        let cfg = tiny_train_cfg();
        let params = initial_params::<f32>(&cfg, &model).unwrap();
        let rect = crate::datagen::HoleRect::centered_half(16, 16);
        let sweep = evaluate_sweep(
            &params,
            &model,
            &tiny_refine_cfg(),
            &[30],
            2,
            3,
            SweepOptions {
                hole: Some(rect),
                severity: 0.5,
                ..SweepOptions::default()
            },
            &scene_source(),
        )
        .unwrap();
        // The hole interior of a 16x16 scene holds 64 pixels, all valid.
        assert_eq!(sweep.baseline.valid_count, 2 * 64);
        assert_eq!(sweep.levels[0].report.valid_count, 2 * 64);
    }
}
