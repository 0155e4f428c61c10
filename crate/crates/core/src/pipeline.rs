//! Three-stage adaptation: MMD pre-training, pseudo-label pre-adaptation and
//! mutual-information adaptation, with stages 2 and 3 alternating until the
//! pseudo-label partition stops changing.
//!
//! Source and target batches flow through one shared trunk (a single
//! [`ParamStore`]); the source head classifies source classes and the target
//! head, created once clustering has produced pseudo-labels, classifies
//! target clusters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clusterer::{cluster_pipeline, ClusterConfig, PseudoLabeling};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::kernelmmd::{
    mmd2_biased, mmd2_multilayer_var, AdaptationConfig, KernelSpec, DEFAULT_BANDWIDTH_SCALES,
};
use crate::losses::{
    angular_margin_var, logits_cross_entropy_var, mi_loss_var, softmax, ClassifierOutput,
    LossWeights,
};
use crate::numcore::trunk::{forward_trunk, forward_trunk_var, init_trunk, layer_count};
use crate::numcore::{sgd_step, Matrix, ParamStore, SeedRng, Sgd, Tape, Var};

pub const SOURCE_HEAD: &str = "head.source";
pub const TARGET_HEAD: &str = "head.target";

/// Similarity threshold used by [`TrainConfig::default`]; final-layer
/// embeddings of the trunk share a large common component, so clean
/// components need a tighter threshold than [`ClusterConfig::default`].
pub const BENCHMARK_LAMBDA: f64 = 0.95;

/// Scale of the warm-started target head columns relative to the mean
/// embedding norm.
const HEAD_INIT_GAIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initialized,
    Pretrained,
    PreAdapted,
    MiAdapted,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::Pretrained => "pretrained",
            Stage::PreAdapted => "preadapted",
            Stage::MiAdapted => "miadapted",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Stage::Initialized,
            Stage::Pretrained,
            Stage::PreAdapted,
            Stage::MiAdapted,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
    }
}

/// Supervised loss on labeled source data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLoss {
    Softmax,
    Angular { scale: f64, margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layer_dims: Vec<usize>,
    pub weights: LossWeights,
    pub source_loss: SourceLoss,
    #[serde(skip)]
    pub cluster: ClusterConfig,
    /// Trunk layers whose activations enter the MMD term; `None` means the
    /// last two layers.
    pub adapt_layers: Option<Vec<usize>>,
    pub bandwidth_scales: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_pretrain: f64,
    pub lr_preadapt: f64,
    pub lr_miadapt: f64,
    pub epochs_pretrain: usize,
    pub epochs_preadapt: usize,
    pub epochs_miadapt: usize,
    pub max_iterations: usize,
    /// Alternation stops once the Rand index between consecutive
    /// pseudo-partitions reaches `1 − convergence_tol`.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![2, 64, 64, 16],
            weights: LossWeights::default(),
            source_loss: SourceLoss::Softmax,
            cluster: ClusterConfig {
                lambda: BENCHMARK_LAMBDA,
                min_size: 3,
            },
            adapt_layers: None,
            bandwidth_scales: DEFAULT_BANDWIDTH_SCALES.to_vec(),
            batch_size: 200,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_pretrain: 0.01,
            lr_preadapt: 5e-3,
            lr_miadapt: 1e-3,
            epochs_pretrain: 100,
            epochs_preadapt: 10,
            epochs_miadapt: 10,
            max_iterations: 5,
            convergence_tol: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let n_layers = layer_count(&self.layer_dims)?;
        self.weights.validate()?;
        self.cluster.validate()?;
        for (name, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_preadapt", self.lr_preadapt),
            ("lr_miadapt", self.lr_miadapt),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} = {lr}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size = {}", self.batch_size));
        }
        if self.bandwidth_scales.is_empty() || self.bandwidth_scales.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("bandwidth scales {:?}", self.bandwidth_scales));
        }
        if !(0.0..=1.0).contains(&self.convergence_tol) {
            return bad(format!("convergence_tol = {}", self.convergence_tol));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if let Some(l) = self.adaptation_layers().iter().find(|&&l| l >= n_layers) {
            return Err(Error::MissingLayer(*l));
        }
        if let SourceLoss::Angular { scale, margin } = self.source_loss {
            if !(scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
                return bad(format!("angular scale {scale}, margin {margin}"));
            }
        }
        Ok(())
    }

    pub fn adaptation_layers(&self) -> Vec<usize> {
        match &self.adapt_layers {
            Some(l) => l.clone(),
            None => {
                let n = self.layer_dims.len().saturating_sub(1);
                (n.saturating_sub(2)..n).collect()
            }
        }
    }

    fn half_batch(&self) -> usize {
        (self.batch_size / 2).max(1)
    }
}

/// Shared trunk plus source and (optional) target classifier heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    params: ParamStore,
    layer_dims: Vec<usize>,
    source_classes: Vec<usize>,
    target_classes: Option<usize>,
    seed: u64,
    stage: Stage,
}

impl ModelState {
    /// Fresh model; `source_classes` lists the source class ids in head order.
    pub fn new(layer_dims: &[usize], source_classes: Vec<usize>, seed: u64) -> Result<Self> {
        layer_count(layer_dims)?;
        if source_classes.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one source class".into(),
            ));
        }
        let mut rng = SeedRng::derived(seed, 1);
        let mut params = ParamStore::new();
        init_trunk(&mut params, layer_dims, &mut rng)?;
        let emb = *layer_dims.last().unwrap();
        let std = (1.0 / emb as f64).sqrt();
        params.insert(
            SOURCE_HEAD,
            Matrix::from_fn(emb, source_classes.len(), |_, _| rng.normal() * std),
        )?;
        Ok(Self {
            params,
            layer_dims: layer_dims.to_vec(),
            source_classes,
            target_classes: None,
            seed,
            stage: Stage::Initialized,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }

    pub fn target_classes(&self) -> Option<usize> {
        self.target_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn activations(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        forward_trunk(&self.params, inputs, &self.layer_dims)
    }

    /// Final-layer embeddings.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self
            .activations(inputs)?
            .pop()
            .expect("trunk has at least one layer"))
    }

    pub fn source_probs(&self, inputs: &Matrix) -> Result<ClassifierOutput> {
        softmax(
            &self
                .embed(inputs)?
                .matmul(self.params.get(SOURCE_HEAD).expect("source head"))?,
        )
    }

    pub fn target_probs(&self, inputs: &Matrix) -> Result<ClassifierOutput> {
        let head = self
            .params
            .get(TARGET_HEAD)
            .ok_or_else(|| Error::StageOrder("no target head; run pre-adaptation first".into()))?;
        softmax(&self.embed(inputs)?.matmul(head)?)
    }

    /// Installs a target head, replacing any previous one.
    pub fn set_target_head(&mut self, head: Matrix) -> Result<()> {
        if head.rows() != self.embedding_dim() || head.cols() == 0 {
            return Err(Error::dim(
                "target head",
                format!("{}xN", self.embedding_dim()),
                head.shape_str(),
            ));
        }
        self.params.remove(TARGET_HEAD);
        self.target_classes = Some(head.cols());
        self.params.insert(TARGET_HEAD, head)?;
        Ok(())
    }

    /// Source accuracy of the source head on a labeled dataset.
    pub fn source_accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = dense_source_labels(data, &self.source_classes)?;
        let pred = self.source_probs(data.features())?.argmax();
        Ok(
            pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64
                / labels.len().max(1) as f64,
        )
    }
}

fn dense_source_labels(source: &Dataset, classes: &[usize]) -> Result<Vec<usize>> {
    let labels = source
        .labels()
        .ok_or_else(|| Error::InvalidArgument("source dataset must be labeled".into()))?;
    labels
        .iter()
        .map(|l| {
            classes.binary_search(l).map_err(|_| {
                Error::InvalidArgument(format!("source label {l} unknown to the model"))
            })
        })
        .collect()
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub source: f64,
    pub mmd: f64,
    pub mi: f64,
    pub target_ce: f64,
    pub total: f64,
    /// Number of per-sample pseudo-label cross-entropy terms in the epoch.
    pub target_ce_terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: Vec<EpochLosses>,
    pub n_clusters: Option<usize>,
    pub assigned: Option<usize>,
    pub abandoned: Option<usize>,
    /// Biased MMD² between full source and target embeddings at stage start
    /// and end, under a kernel frozen at stage start.
    pub embedding_mmd: Option<(f64, f64)>,
    /// Target-head conditional entropy on all target samples at stage start
    /// and end (MI-adaptation only).
    pub target_entropy: Option<(f64, f64)>,
    pub warnings: Vec<String>,
    /// Not serialized, so written reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

impl StageReport {
    fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            seed,
            epochs: Vec::new(),
            n_clusters: None,
            assigned: None,
            abandoned: None,
            embedding_mmd: None,
            target_entropy: None,
            warnings: Vec::new(),
            wall_clock_ms: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Pretrain,
    PreAdapt,
    MiAdapt,
}

/// Index batches for one epoch: `steps` batches of up to `half` indices.
/// A domain at least as large as the step budget is traversed exactly once.
fn epoch_batches(n: usize, steps: usize, half: usize, rng: &mut SeedRng) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    (0..steps)
        .map(|k| {
            let start = k * half;
            if n > (steps - 1) * half {
                perm[start..(start + half).min(n)].to_vec()
            } else {
                (0..half).map(|j| perm[(start + j) % n]).collect()
            }
        })
        .collect()
}

struct StepOutcome {
    source: f64,
    mmd: f64,
    mi: f64,
    target_ce: f64,
    total: f64,
    ce_terms: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut ModelState,
    cfg: &TrainConfig,
    objective: Objective,
    adapt: Option<&AdaptationConfig>,
    xs: Matrix,
    ys: &[usize],
    xt: Option<Matrix>,
    pseudo_rows: &[(usize, usize)],
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let xs = tape.constant(xs);
    let acts_s = forward_trunk_var(&mut tape, &bound, xs, &model.layer_dims)?;
    let emb_s = *acts_s.last().unwrap();
    let head_s = bound.get(SOURCE_HEAD)?;

    let source = match cfg.source_loss {
        SourceLoss::Softmax => {
            let logits = tape.matmul(emb_s, head_s)?;
            logits_cross_entropy_var(&mut tape, logits, ys)?
        }
        SourceLoss::Angular { scale, margin } => {
            angular_margin_var(&mut tape, emb_s, head_s, ys, scale, margin)?
        }
    };

    let zero = || Matrix::scalar(0.0);
    let mut mmd: Option<Var> = None;
    let mut mi: Option<Var> = None;
    let mut target_ce: Option<Var> = None;
    if let Some(xt) = xt {
        let xt = tape.constant(xt);
        let acts_t = forward_trunk_var(&mut tape, &bound, xt, &model.layer_dims)?;
        let emb_t = *acts_t.last().unwrap();
        if let Some(adapt) = adapt {
            mmd = Some(mmd2_multilayer_var(&mut tape, &acts_s, &acts_t, adapt)?);
        }
        match objective {
            Objective::Pretrain => {}
            Objective::PreAdapt if !pseudo_rows.is_empty() => {
                let rows: Vec<usize> = pseudo_rows.iter().map(|&(r, _)| r).collect();
                let labels: Vec<usize> = pseudo_rows.iter().map(|&(_, l)| l).collect();
                let sel = tape.select_rows(emb_t, &rows)?;
                let head_t = bound.get(TARGET_HEAD)?;
                let logits = tape.matmul(sel, head_t)?;
                target_ce = Some(logits_cross_entropy_var(&mut tape, logits, &labels)?);
            }
            Objective::PreAdapt => {}
            Objective::MiAdapt => {
                let head_t = bound.get(TARGET_HEAD)?;
                let logits = tape.matmul(emb_t, head_t)?;
                let probs = tape.softmax(logits);
                mi = Some(mi_loss_var(&mut tape, probs, cfg.weights.gamma)?);
            }
        }
    }
    let mmd = mmd.unwrap_or_else(|| tape.constant(zero()));
    let mi = mi.unwrap_or_else(|| tape.constant(zero()));
    let mut total = crate::losses::total_loss_var(&mut tape, source, mmd, mi, &cfg.weights)?;
    if let Some(ce) = target_ce {
        total = tape.add(total, ce)?;
    }

    let outcome = StepOutcome {
        source: tape.scalar(source)?,
        mmd: tape.scalar(mmd)?,
        mi: tape.scalar(mi)?,
        target_ce: target_ce
            .map(|v| tape.scalar(v))
            .transpose()?
            .unwrap_or(0.0),
        total: tape.scalar(total)?,
        ce_terms: pseudo_rows.len(),
    };
    if !outcome.total.is_finite() {
        return Err(Error::Divergence(format!(
            "{objective:?} loss is non-finite (source {}, mmd {}, mi {})",
            outcome.source, outcome.mmd, outcome.mi
        )));
    }
    let grads = tape.backward(total)?;
    sgd_step(
        &mut model.params,
        &grads,
        Sgd::new(lr, cfg.momentum, cfg.weight_decay),
    )
    .map_err(|e| match e {
        Error::NonFinite(what) => Error::Divergence(what),
        other => other,
    })?;
    Ok(outcome)
}

fn final_layer_kernel(
    model: &ModelState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<(KernelSpec, f64)> {
    let es = model.embed(source.features())?;
    let et = model.embed(target.features())?;
    let spec = KernelSpec::from_median_heuristic(&es, &et, &cfg.bandwidth_scales)?;
    let value = mmd2_biased(&es, &et, &spec)?;
    Ok((spec, value))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut ModelState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
    pseudo: Option<&PseudoLabeling>,
    lr: f64,
    epochs: usize,
    report: &mut StageReport,
) -> Result<()> {
    let started = Instant::now();
    let ys_all = dense_source_labels(source, &model.source_classes)?;
    let use_target = objective != Objective::Pretrain || cfg.weights.alpha > 0.0;
    if use_target && target.is_empty() {
        return Err(Error::Empty("target dataset".into()));
    }
    if source.is_empty() {
        return Err(Error::Empty("source dataset".into()));
    }

    model.params.reset_velocity();
    let adapt = if cfg.weights.alpha > 0.0 {
        let acts_s = model.activations(source.features())?;
        let acts_t = model.activations(target.features())?;
        Some(AdaptationConfig::from_activations(
            &cfg.adaptation_layers(),
            &acts_s,
            &acts_t,
            &cfg.bandwidth_scales,
        )?)
    } else {
        None
    };
    let tracked = if use_target {
        Some(final_layer_kernel(model, source, target, cfg)?)
    } else {
        None
    };

    let stage_tag = objective as u64 + 10;
    let mut rng = SeedRng::derived(
        cfg.seed ^ model.seed.rotate_left(17),
        stage_tag + 100 * report.epochs.len() as u64,
    );
    let half = cfg.half_batch();
    let n_max = if use_target {
        source.len().max(target.len())
    } else {
        source.len()
    };
    let steps = n_max.div_ceil(half);

    for _ in 0..epochs {
        let src_batches = epoch_batches(source.len(), steps, half, &mut rng);
        let tgt_batches = if use_target {
            epoch_batches(target.len(), steps, half, &mut rng)
        } else {
            vec![Vec::new(); steps]
        };
        let mut acc = EpochLosses {
            source: 0.0,
            mmd: 0.0,
            mi: 0.0,
            target_ce: 0.0,
            total: 0.0,
            target_ce_terms: 0,
        };
        for (sb, tb) in src_batches.iter().zip(&tgt_batches) {
            let xs = source.features().select_rows(sb);
            let ys: Vec<usize> = sb.iter().map(|&i| ys_all[i]).collect();
            let xt = use_target.then(|| target.features().select_rows(tb));
            let pseudo_rows: Vec<(usize, usize)> = match (objective, pseudo) {
                (Objective::PreAdapt, Some(p)) => tb
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| p.label_of(i).map(|l| (r, l)))
                    .collect(),
                _ => Vec::new(),
            };
            let out = train_step(
                model,
                cfg,
                objective,
                adapt.as_ref(),
                xs,
                &ys,
                xt,
                &pseudo_rows,
                lr,
            )?;
            acc.source += out.source;
            acc.mmd += out.mmd;
            acc.mi += out.mi;
            acc.target_ce += out.target_ce;
            acc.total += out.total;
            acc.target_ce_terms += out.ce_terms;
        }
        let n = steps as f64;
        acc.source /= n;
        acc.mmd /= n;
        acc.mi /= n;
        acc.target_ce /= n;
        acc.total /= n;
        report.epochs.push(acc);
    }

    if let Some((spec, start)) = tracked {
        let es = model.embed(source.features())?;
        let et = model.embed(target.features())?;
        report.embedding_mmd = Some((start, mmd2_biased(&es, &et, &spec)?));
    }
    report.wall_clock_ms += started.elapsed().as_millis();
    Ok(())
}

/// Stage 1: source classification loss plus `α·ΣMMD²` (no MI term). With
/// `α = 0` the target set is not used at all.
pub fn pretrain(
    source: &Dataset,
    target: &Dataset,
    model: &mut ModelState,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    let mut report = StageReport::new(Stage::Pretrained, model.seed);
    let saved = model.clone();
    match run_stage(
        model,
        source,
        target,
        cfg,
        Objective::Pretrain,
        None,
        cfg.lr_pretrain,
        cfg.epochs_pretrain,
        &mut report,
    ) {
        Ok(()) => {}
        Err(e) => {
            *model = saved;
            return Err(e);
        }
    }
    if model.stage < Stage::Pretrained {
        model.stage = Stage::Pretrained;
    }
    Ok(report)
}

/// Target head initialized from the normalized mean embedding of each cluster.
fn warm_start_head(
    model: &ModelState,
    target: &Dataset,
    pseudo: &PseudoLabeling,
) -> Result<Matrix> {
    let emb = model.embed(target.features())?;
    let d = emb.cols();
    let mean_norm = emb
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / emb.rows().max(1) as f64;
    let mut head = Matrix::zeros(d, pseudo.n_clusters());
    for (c, members) in pseudo.clusters().iter().enumerate() {
        let mut mean = vec![0.0; d];
        for &i in members {
            for (m, v) in mean.iter_mut().zip(emb.row(i)) {
                *m += v;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 && mean_norm > 0.0 {
            HEAD_INIT_GAIN / (norm * mean_norm)
        } else {
            0.0
        };
        for (k, m) in mean.iter().enumerate() {
            head.set(k, c, m * scale);
        }
    }
    Ok(head)
}

/// Stage 2: builds a target head with one output per cluster and trains it
/// together with the trunk on the pseudo-labeled samples (abandoned samples
/// contribute no cross-entropy term), jointly with the source loss and MMD.
pub fn pre_adapt(
    source: &Dataset,
    target: &Dataset,
    pseudo: &PseudoLabeling,
    model: &mut ModelState,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    if model.stage < Stage::Pretrained {
        return Err(Error::StageOrder(
            "pre-adaptation needs a pre-trained model".into(),
        ));
    }
    if pseudo.n_clusters() == 0 {
        return Err(Error::PseudoLabelFailure);
    }
    if pseudo.n_samples() != target.len() {
        return Err(Error::dim(
            "pseudo-labels",
            target.len(),
            pseudo.n_samples(),
        ));
    }
    let mut report = StageReport::new(Stage::PreAdapted, model.seed);
    report.n_clusters = Some(pseudo.n_clusters());
    report.assigned = Some(pseudo.assigned_count());
    report.abandoned = Some(pseudo.abandoned_count());
    if pseudo.n_clusters() == 1 {
        report
            .warnings
            .push("only one cluster: target cross-entropy is identically zero".into());
    }

    let saved = model.clone();
    let head = warm_start_head(model, target, pseudo)?;
    model.set_target_head(head)?;
    if let Err(e) = run_stage(
        model,
        source,
        target,
        cfg,
        Objective::PreAdapt,
        Some(pseudo),
        cfg.lr_preadapt,
        cfg.epochs_preadapt,
        &mut report,
    ) {
        *model = saved;
        return Err(e);
    }
    model.stage = Stage::PreAdapted;
    Ok(report)
}

/// Stage 3: the full objective `L_C + α·ΣMMD² + β·L_M` over all target
/// samples, with `L_M` on the target head's predictions.
pub fn mi_adapt(
    source: &Dataset,
    target: &Dataset,
    model: &mut ModelState,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    if model.stage < Stage::PreAdapted || model.target_classes.is_none() {
        return Err(Error::StageOrder(
            "MI adaptation needs a pre-adapted target classifier".into(),
        ));
    }
    let mut report = StageReport::new(Stage::MiAdapted, model.seed);
    let n_c = model.target_classes.unwrap_or(0);
    report.n_clusters = Some(n_c);
    if cfg.half_batch() < 4 * n_c {
        report.warnings.push(format!(
            "target batch of {} is below 4 x {n_c} classes; marginal entropy estimate is biased",
            cfg.half_batch()
        ));
    }
    let h_start = crate::losses::conditional_entropy(&model.target_probs(target.features())?);
    let saved = model.clone();
    if let Err(e) = run_stage(
        model,
        source,
        target,
        cfg,
        Objective::MiAdapt,
        None,
        cfg.lr_miadapt,
        cfg.epochs_miadapt,
        &mut report,
    ) {
        *model = saved;
        return Err(e);
    }
    let h_end = crate::losses::conditional_entropy(&model.target_probs(target.features())?);
    report.target_entropy = Some((h_start, h_end));
    model.stage = Stage::MiAdapted;
    Ok(report)
}

/// Recomputes the MI-adaptation objective from its parts for one batch; used
/// to check that the optimized scalar is exactly the weighted sum.
pub fn mi_objective_parts(
    model: &ModelState,
    cfg: &TrainConfig,
    adapt: &AdaptationConfig,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
) -> Result<(f64, f64, f64, f64)> {
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let s = tape.constant(xs.clone());
    let t = tape.constant(xt.clone());
    let acts_s = forward_trunk_var(&mut tape, &bound, s, &model.layer_dims)?;
    let acts_t = forward_trunk_var(&mut tape, &bound, t, &model.layer_dims)?;
    let (emb_s, emb_t) = (*acts_s.last().unwrap(), *acts_t.last().unwrap());
    let logits = tape.matmul(emb_s, bound.get(SOURCE_HEAD)?)?;
    let lc = logits_cross_entropy_var(&mut tape, logits, ys)?;
    let mmd = mmd2_multilayer_var(&mut tape, &acts_s, &acts_t, adapt)?;
    let lt = tape.matmul(emb_t, bound.get(TARGET_HEAD)?)?;
    let p = tape.softmax(lt);
    let lm = mi_loss_var(&mut tape, p, cfg.weights.gamma)?;
    let total = crate::losses::total_loss_var(&mut tape, lc, mmd, lm, &cfg.weights)?;
    Ok((
        tape.scalar(lc)?,
        tape.scalar(mmd)?,
        tape.scalar(lm)?,
        tape.scalar(total)?,
    ))
}

/// One alternation round of [`run_iman`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub n_clusters: usize,
    pub assigned: usize,
    /// Rand index against the previous round's partition.
    pub rand_index: Option<f64>,
    /// True when this round's clustering triggered convergence; no training
    /// happened in it.
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct ImanRun {
    pub model: ModelState,
    pub reports: Vec<StageReport>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

/// Full procedure: pre-train once, then repeat {cluster, pre-adapt,
/// MI-adapt} until consecutive pseudo-partitions agree or `max_iterations`
/// rounds have trained. `observer` sees the model after every trained round.
pub fn run_iman(
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&IterationRecord, &ModelState),
) -> Result<ImanRun> {
    cfg.validate()?;
    let mut model = ModelState::new(&cfg.layer_dims, source.classes(), cfg.seed)?;
    let mut reports = vec![pretrain(source, target, &mut model, cfg)?];
    let (iterations, converged) = alternate(
        source,
        target,
        &mut model,
        cfg,
        &mut reports,
        true,
        &mut observer,
    )?;
    Ok(ImanRun {
        model,
        reports,
        iterations,
        converged,
    })
}

/// The alternation loop on an already pre-trained model. With `with_mi`
/// false only pseudo-label pre-adaptation runs in each round.
pub fn alternate(
    source: &Dataset,
    target: &Dataset,
    model: &mut ModelState,
    cfg: &TrainConfig,
    reports: &mut Vec<StageReport>,
    with_mi: bool,
    observer: &mut dyn FnMut(&IterationRecord, &ModelState),
) -> Result<(Vec<IterationRecord>, bool)> {
    let mut iterations = Vec::new();
    let mut previous: Option<PseudoLabeling> = None;
    for iteration in 1..=cfg.max_iterations {
        let pseudo = cluster_pipeline(&model.embed(target.features())?, &cfg.cluster)?;
        let rand_index = previous
            .as_ref()
            .map(|p| pseudo.rand_index(p))
            .transpose()?;
        let mut record = IterationRecord {
            iteration,
            n_clusters: pseudo.n_clusters(),
            assigned: pseudo.assigned_count(),
            rand_index,
            converged: false,
        };
        if rand_index.is_some_and(|ri| ri >= 1.0 - cfg.convergence_tol) {
            record.converged = true;
            iterations.push(record);
            return Ok((iterations, true));
        }
        reports.push(pre_adapt(source, target, &pseudo, model, cfg)?);
        if with_mi {
            reports.push(mi_adapt(source, target, model, cfg)?);
        }
        observer(&record, model);
        iterations.push(record);
        previous = Some(pseudo);
    }
    Ok((iterations, false))
}

/// Serializes stage reports as pretty JSON with provenance fields.
pub fn reports_to_json(reports: &[StageReport], config_hash: &str, seed: u64) -> String {
    let mut root = BTreeMap::new();
    root.insert("config_hash", serde_json::Value::from(config_hash));
    root.insert("seed", serde_json::Value::from(seed));
    root.insert(
        "stages",
        serde_json::to_value(reports).expect("stage reports serialize"),
    );
    serde_json::to_string_pretty(&root).expect("json") + "\n"
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "IMAN-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

fn hex_row(m: &Matrix) -> String {
    let mut s = String::with_capacity(m.len() * 17);
    for (k, v) in m.data().iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:016x}", v.to_bits());
    }
    s
}

impl ModelState {
    /// Text checkpoint; every parameter and momentum value is stored as the
    /// hex of its IEEE-754 bits, so loading is bit-exact.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        let classes: Vec<String> = self.source_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "dims {}", dims.join(","));
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "stage {}", self.stage.as_str());
        let _ = writeln!(out, "source_classes {}", classes.join(","));
        match self.target_classes {
            Some(n) => {
                let _ = writeln!(out, "target_classes {n}");
            }
            None => {
                let _ = writeln!(out, "target_classes none");
            }
        }
        let _ = writeln!(out, "params {}", self.params.len());
        for i in 0..self.params.len() {
            let v = self.params.value(i);
            let _ = writeln!(
                out,
                "param {} {} {}",
                self.params.name(i),
                v.rows(),
                v.cols()
            );
            let _ = writeln!(out, "value {}", hex_row(v));
            let _ = writeln!(out, "velocity {}", hex_row(self.params.velocity(i)));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::Schema(format!("checkpoint truncated before {key}")))?;
            let rest = line
                .strip_prefix(key)
                .and_then(|r| {
                    r.strip_prefix(' ')
                        .or(if r.is_empty() { Some("") } else { None })
                })
                .ok_or_else(|| Error::Parse {
                    line: no,
                    message: format!("expected {key}"),
                })?;
            Ok((no, rest.to_string()))
        };
        let perr = |line: usize, message: String| Error::Parse { line, message };

        let (no, version) = next(CHECKPOINT_MAGIC)?;
        if version.trim() != CHECKPOINT_VERSION.to_string() {
            return Err(perr(
                no,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let parse_list = |no: usize, s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| perr(no, format!("{t:?}: {e}")))
                })
                .collect()
        };
        let (no, dims) = next("dims")?;
        let layer_dims = parse_list(no, &dims)?;
        let (no, seed) = next("seed")?;
        let seed = seed.parse::<u64>().map_err(|e| perr(no, e.to_string()))?;
        let (no, stage) = next("stage")?;
        let stage =
            Stage::parse(&stage).ok_or_else(|| perr(no, format!("unknown stage {stage}")))?;
        let (no, classes) = next("source_classes")?;
        let source_classes = parse_list(no, &classes)?;
        let (no, tc) = next("target_classes")?;
        let target_classes = match tc.as_str() {
            "none" => None,
            s => Some(s.parse::<usize>().map_err(|e| perr(no, e.to_string()))?),
        };
        let (no, count) = next("params")?;
        let count = count
            .parse::<usize>()
            .map_err(|e| perr(no, e.to_string()))?;

        let parse_hex = |no: usize, s: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let vals = s
                .split_whitespace()
                .map(|t| {
                    u64::from_str_radix(t, 16)
                        .map(f64::from_bits)
                        .map_err(|e| perr(no, format!("{t:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Matrix::new(rows, cols, vals).map_err(|e| perr(no, e.to_string()))
        };
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (no, header) = next("param")?;
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() != 3 {
                return Err(perr(no, format!("bad param header {header:?}")));
            }
            let rows = parts[1]
                .parse::<usize>()
                .map_err(|e| perr(no, e.to_string()))?;
            let cols = parts[2]
                .parse::<usize>()
                .map_err(|e| perr(no, e.to_string()))?;
            let (no, v) = next("value")?;
            let value = parse_hex(no, &v, rows, cols)?;
            let (no, v) = next("velocity")?;
            let velocity = parse_hex(no, &v, rows, cols)?;
            let idx = params.insert(parts[0], value)?;
            params.set_velocity(idx, velocity)?;
        }
        next("end")?;

        let model = Self {
            params,
            layer_dims,
            source_classes,
            target_classes,
            seed,
            stage,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let n_layers = layer_count(&self.layer_dims)?;
        for l in 0..n_layers {
            for name in [
                crate::numcore::trunk::weight_name(l),
                crate::numcore::trunk::bias_name(l),
            ] {
                if !self.params.contains(&name) {
                    return Err(Error::Schema(format!("checkpoint lacks {name}")));
                }
            }
        }
        let emb = self.embedding_dim();
        match self.params.get(SOURCE_HEAD) {
            Some(h) if h.shape() == (emb, self.source_classes.len()) => {}
            _ => return Err(Error::Schema("source head missing or misshapen".into())),
        }
        match (self.target_classes, self.params.get(TARGET_HEAD)) {
            (None, None) => {}
            (Some(n), Some(h)) if h.shape() == (emb, n) => {}
            _ => {
                return Err(Error::Schema(
                    "target head inconsistent with target_classes".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}
