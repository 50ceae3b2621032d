use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Part};
use super::split::{select_exemplars, ExemplarStore, IncrementalSplit};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_masked, ArchSpec, DistillTerm, FeatureExtractor, Head, HeadSpec, LossSpec, Network,
};
use crate::numeric::{Matrix, RngStream};

/// SGD schedule with polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub decay_power: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 60,
            lr: 0.1,
            decay_power: 0.9,
            batch_size: 64,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
        }
    }
}

impl Schedule {
    pub fn with_epochs(epochs: usize) -> Self {
        Schedule {
            epochs,
            ..Schedule::default()
        }
    }

    /// `lr · (1 − step/total)^power`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        self.lr * (1.0 - step as f64 / total as f64).powf(self.decay_power)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: batch size must be positive")));
        }
        if !(self.lr >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.decay_power >= 0.0)
            || !(self.max_grad_norm >= 0.0)
        {
            return Err(Error::Config(format!(
                "{what}: lr, weight decay, decay power and clip norm must be non-negative"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Naive,
    Distill,
    Exploit,
    Der,
    Pder,
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Naive,
        Algorithm::Distill,
        Algorithm::Exploit,
        Algorithm::Der,
        Algorithm::Pder,
        Algorithm::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Naive => "naive",
            Algorithm::Distill => "distill",
            Algorithm::Exploit => "exploit",
            Algorithm::Der => "der",
            Algorithm::Pder => "pder",
            Algorithm::Oracle => "oracle",
        }
    }

    /// Whether the learner replays stored exemplars.
    pub fn uses_exemplars(self) -> bool {
        !matches!(self, Algorithm::Exploit | Algorithm::Oracle)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Learner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub arch: ArchSpec,
    pub head: HeadSpec,
    /// Stage 0 and Oracle training.
    pub base: Schedule,
    /// Stages 1..N for the replaying learners.
    pub incremental: Schedule,
    /// Exploit head stages.
    pub exploit: Schedule,
    pub distill_lambda: f64,
    pub temperature: f64,
    pub exemplars_per_class: usize,
    /// Partial-DER branch point: stages below it are shared. 0 means full DER.
    pub branch_stage: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            arch: ArchSpec::default(),
            head: HeadSpec::default(),
            base: Schedule::with_epochs(60),
            incremental: Schedule {
                max_grad_norm: 5.0,
                ..Schedule::with_epochs(30)
            },
            exploit: Schedule::with_epochs(10),
            distill_lambda: 1.0,
            temperature: 2.0,
            exemplars_per_class: 20,
            branch_stage: 3,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        self.base.validate("base schedule")?;
        self.incremental.validate("incremental schedule")?;
        self.exploit.validate("exploit schedule")?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.distill_lambda >= 0.0) {
            return Err(Error::Config("distillation weight must be non-negative".into()));
        }
        if self.branch_stage >= self.arch.stages {
            return Err(Error::Config(format!(
                "branch stage {} is not a boundary of a {}-stage extractor",
                self.branch_stage, self.arch.stages
            )));
        }
        Ok(())
    }
}

/// Runs `sched` over `n` rows: one shuffled pass per epoch, calling `step`
/// with each batch's row indices and learning rate. Returns the mean loss of
/// the final epoch.
fn run_schedule(
    n: usize,
    sched: &Schedule,
    rng: &mut RngStream,
    mut step: impl FnMut(&[usize], f64) -> Result<f64>,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Protocol("no training rows".into()));
    }
    let per_epoch = n.div_ceil(sched.batch_size);
    let total = per_epoch * sched.epochs;
    let mut t = 0;
    let mut last = f64::NAN;
    for _ in 0..sched.epochs {
        let order = rng.permutation(n);
        let mut sum = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            sum += step(chunk, sched.lr_at(t, total))? * chunk.len() as f64;
            t += 1;
        }
        last = sum / n as f64;
    }
    Ok(last)
}

/// Optional distillation target for [`fit`].
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    /// Teacher logits aligned with the training rows.
    pub logits: &'a Matrix,
    pub temperature: f64,
    pub weight: f64,
}

/// Trains every unfrozen part of `net` with masked CE (plus distillation).
pub fn fit(
    net: &mut Network,
    x: &Matrix,
    labels: &[usize],
    active: &[usize],
    teacher: Option<Teacher<'_>>,
    sched: &Schedule,
    rng: &mut RngStream,
) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension("labels and rows differ".into()));
    }
    run_schedule(x.rows(), sched, rng, |idx, lr| {
        let xb = x.select_rows(idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let tb = teacher.map(|t| t.logits.select_rows(idx));
        let spec = LossSpec {
            labels: &yb,
            active,
            distill: teacher.zip(tb.as_ref()).map(|(t, logits)| DistillTerm {
                teacher_logits: logits,
                temperature: t.temperature,
                weight: t.weight,
            }),
        };
        let (loss, mut grads) = net.backward(&xb, &spec)?;
        let norm = grads.global_norm();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Protocol(
                "training diverged (non-finite loss or gradient); lower the learning rate or set max_grad_norm"
                    .into(),
            ));
        }
        if sched.max_grad_norm > 0.0 && norm > sched.max_grad_norm {
            grads.scale_by(sched.max_grad_norm / norm);
        }
        net.sgd_step(&grads, lr, sched.weight_decay)?;
        Ok(loss)
    })
}

/// Trains `head` alone on fixed features with masked CE.
pub fn fit_head(
    head: &mut Head,
    features: &Matrix,
    labels: &[usize],
    active: &[usize],
    sched: &Schedule,
    rng: &mut RngStream,
) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::Dimension("labels and rows differ".into()));
    }
    run_schedule(features.rows(), sched, rng, |idx, lr| {
        let fb = features.select_rows(idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (logits, cache) = head.forward_cached(&fb)?;
        let (loss, dlogits) = cross_entropy_masked(&logits, &yb, active)?;
        let (grad, _) = head.backward(&fb, &cache, &dlogits, true)?;
        head.apply(&grad.expect("parameter gradient requested"), lr, sched.weight_decay)?;
        Ok(loss)
    })
}

/// A stage's model, frozen once the next stage starts.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot {
    pub stage: usize,
    pub network: Network,
    /// Digest taken when the snapshot was stored.
    pub digest: String,
}

/// Every stage model of one incremental run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModelSet {
    algorithm: Algorithm,
    snapshots: Vec<StageSnapshot>,
    /// Exploit only: the per-stage heads `W_i`.
    stage_heads: Vec<Head>,
    exemplars: ExemplarStore,
}

impl StageModelSet {
    pub fn new(algorithm: Algorithm, exemplar_capacity: usize) -> Self {
        StageModelSet {
            algorithm,
            snapshots: Vec::new(),
            stage_heads: Vec::new(),
            exemplars: ExemplarStore::new(exemplar_capacity),
        }
    }

    /// Rebuilds a set from stored networks, e.g. loaded checkpoints.
    pub fn from_networks(algorithm: Algorithm, networks: Vec<Network>, stage_heads: Vec<Head>) -> Self {
        let snapshots = networks
            .into_iter()
            .enumerate()
            .map(|(stage, network)| StageSnapshot {
                stage,
                digest: network.digest(),
                network,
            })
            .collect();
        StageModelSet {
            algorithm,
            snapshots,
            stage_heads,
            exemplars: ExemplarStore::default(),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn snapshots(&self) -> &[StageSnapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, stage: usize) -> Result<&StageSnapshot> {
        self.snapshots
            .get(stage)
            .ok_or_else(|| Error::Protocol(format!("no snapshot for stage {stage}")))
    }

    pub fn latest(&self) -> Option<&StageSnapshot> {
        self.snapshots.last()
    }

    pub fn num_stages(&self) -> usize {
        self.snapshots.len()
    }

    pub fn stage_heads(&self) -> &[Head] {
        &self.stage_heads
    }

    pub fn exemplars(&self) -> &ExemplarStore {
        &self.exemplars
    }

    fn push(&mut self, network: Network) {
        let stage = self.snapshots.len();
        self.snapshots.push(StageSnapshot {
            stage,
            digest: network.digest(),
            network,
        });
    }

    /// Re-hashes every snapshot against the digest stored with it.
    pub fn verify(&self) -> Result<()> {
        for s in &self.snapshots {
            if s.network.digest() != s.digest {
                return Err(Error::Integrity(format!("stage {} snapshot was modified", s.stage)));
            }
        }
        Ok(())
    }

    fn previous(&self, stage: usize) -> Result<&Network> {
        if stage == 0 || self.snapshots.len() != stage {
            return Err(Error::Protocol(format!(
                "stage {stage} needs exactly {stage} prior snapshots, found {}",
                self.snapshots.len()
            )));
        }
        Ok(&self.snapshots[stage - 1].network)
    }
}

/// Everything a stage needs besides the model set.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub data: &'a Dataset,
    pub split: &'a IncrementalSplit,
    pub hyper: &'a Hyper,
    /// Root seed of the run; every random draw derives from it by tag.
    pub seed: u64,
}

impl StageContext<'_> {
    fn rng(&self, tag: &str) -> RngStream {
        RngStream::new(self.seed).derive(tag)
    }

    fn train_rows(&self, stage: usize, exemplars: Option<&ExemplarStore>) -> (Matrix, Vec<usize>) {
        let mut idx = self.split.stage_indices(self.data, stage, Part::Train);
        if let Some(store) = exemplars {
            idx.extend(store.all());
        }
        (self.data.rows(&idx), self.split.ordinals(self.data, &idx))
    }

    fn check(&self) -> Result<()> {
        self.hyper.validate()?;
        self.split.check_dataset(self.data)?;
        if self.data.dim() != self.hyper.arch.input_dim {
            return Err(Error::Config(format!(
                "dataset has {} dims, architecture expects {}",
                self.data.dim(),
                self.hyper.arch.input_dim
            )));
        }
        Ok(())
    }
}

/// Plain supervised training on `D₀`. Shared by every incremental learner.
pub fn train_base(ctx: &StageContext<'_>) -> Result<Network> {
    train_joint(ctx, 0)
}

/// Oracle model: a fresh network trained on `∪_{i ≤ upto} Dᵢ` at once.
pub fn train_oracle(ctx: &StageContext<'_>, upto_stage: usize) -> Result<Network> {
    if upto_stage >= ctx.split.num_stages() {
        return Err(Error::Parameter(format!("no stage {upto_stage}")));
    }
    train_joint(ctx, upto_stage)
}

fn train_joint(ctx: &StageContext<'_>, upto: usize) -> Result<Network> {
    ctx.check()?;
    let mut init = ctx.rng("init:stage0");
    let ext = FeatureExtractor::new(&ctx.hyper.arch, &mut init)?;
    let classes = ctx.split.seen(upto);
    let head = Head::new(&ctx.hyper.head, classes, ext.output_dim(), &mut init);
    let mut net = Network::new(ext, head)?;
    let idx = ctx.data.indices(ctx.split.seen_classes(upto), Part::Train);
    let x = ctx.data.rows(&idx);
    let y = ctx.split.ordinals(ctx.data, &idx);
    let active: Vec<usize> = (0..classes).collect();
    fit(&mut net, &x, &y, &active, None, &ctx.hyper.base, &mut ctx.rng("shuffle:stage0"))?;
    Ok(net)
}

fn start_stage(set: &StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<Network> {
    ctx.check()?;
    if stage >= ctx.split.num_stages() {
        return Err(Error::Protocol(format!("split has no stage {stage}")));
    }
    Ok(set.previous(stage)?.clone())
}

fn finish_stage(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize, net: Network) {
    set.push(net);
    if set.algorithm.uses_exemplars() {
        let mut rng = ctx.rng(&format!("exemplars:stage{stage}"));
        select_exemplars(&mut set.exemplars, ctx.data, ctx.split, stage, &mut rng);
    }
}

/// Stores `base` as stage 0 and draws its exemplars.
pub fn record_base(set: &mut StageModelSet, ctx: &StageContext<'_>, base: Network) -> Result<()> {
    if !set.snapshots.is_empty() {
        return Err(Error::Protocol("stage 0 is already recorded".into()));
    }
    if set.algorithm == Algorithm::Exploit {
        set.stage_heads.push(base.head().clone());
    }
    finish_stage(set, ctx, 0, base);
    Ok(())
}

fn train_replay(
    set: &mut StageModelSet,
    ctx: &StageContext<'_>,
    stage: usize,
    mut net: Network,
    distill_weight: f64,
) -> Result<()> {
    let mut init = ctx.rng(&format!("init:stage{stage}"));
    net.head_mut().add_classes(ctx.split.classes(stage).len(), &mut init);
    let (x, y) = ctx.train_rows(stage, Some(&set.exemplars));
    let teacher_logits = if distill_weight != 0.0 {
        Some(set.previous(stage)?.logits(&x)?)
    } else {
        None
    };
    let teacher = teacher_logits.as_ref().map(|logits| Teacher {
        logits,
        temperature: ctx.hyper.temperature,
        weight: distill_weight,
    });
    let active: Vec<usize> = (0..ctx.split.seen(stage)).collect();
    let mut rng = ctx.rng(&format!("shuffle:stage{stage}"));
    fit(&mut net, &x, &y, &active, teacher, &ctx.hyper.incremental, &mut rng)
        .map_err(|e| e.at_stage(stage))?;
    finish_stage(set, ctx, stage, net);
    Ok(())
}

/// Fine-tunes the whole previous model on `D_stage` plus exemplars.
pub fn train_stage_naive(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<()> {
    let net = start_stage(set, ctx, stage)?;
    train_replay(set, ctx, stage, net, 0.0)
}

/// Naive fine-tuning plus `λ·T²·KL` towards the previous model's old-class
/// logits.
pub fn train_stage_distill(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<()> {
    let net = start_stage(set, ctx, stage)?;
    train_replay(set, ctx, stage, net, ctx.hyper.distill_lambda)
}

/// Freezes `F₀` and trains a new head block for `C_stage` only, with the
/// softmax restricted to those classes. No exemplars are used.
pub fn train_stage_exploit(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<()> {
    start_stage(set, ctx, stage)?;
    let mut f0 = set.snapshots[0].network.branches()[0].clone();
    f0.set_frozen(true);
    let classes = ctx.split.classes(stage).len();
    let mut init = ctx.rng(&format!("init:stage{stage}"));
    let head = Head::new(&ctx.hyper.head, classes, f0.output_dim(), &mut init);
    let mut net = Network::new(f0, head)?;
    let (x, y) = ctx.train_rows(stage, None);
    let offset = ctx.split.ordinal_range(stage).start;
    let local: Vec<usize> = y.iter().map(|&o| o - offset).collect();
    let active: Vec<usize> = (0..classes).collect();
    let mut rng = ctx.rng(&format!("shuffle:stage{stage}"));
    fit(&mut net, &x, &local, &active, None, &ctx.hyper.exploit, &mut rng)
        .map_err(|e| e.at_stage(stage))?;
    set.stage_heads.push(net.head().clone());
    let combined = Head::concat(&set.stage_heads)?;
    let mut f0 = set.snapshots[0].network.branches()[0].clone();
    f0.set_frozen(true);
    finish_stage(set, ctx, stage, Network::new(f0, combined)?);
    Ok(())
}

/// Adds a fresh full extractor; older branches stay frozen.
pub fn train_stage_der(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<()> {
    train_stage_pder(set, ctx, stage, 0)
}

/// DER over the stages at and above `branch_stage`; the stages below are a
/// frozen shared stem. `branch_stage = 0` is full DER.
pub fn train_stage_pder(
    set: &mut StageModelSet,
    ctx: &StageContext<'_>,
    stage: usize,
    branch_stage: usize,
) -> Result<()> {
    let mut net = start_stage(set, ctx, stage)?;
    if branch_stage >= ctx.hyper.arch.stages {
        return Err(Error::Config(format!(
            "branch stage {branch_stage} is not a boundary of a {}-stage extractor",
            ctx.hyper.arch.stages
        )));
    }
    if branch_stage > 0 && net.stem().is_none() {
        net.split_stem(branch_stage)?;
    }
    net.freeze_extractors(true);
    let mut init = ctx.rng(&format!("init:stage{stage}"));
    let mut fresh = net.branches()[0].fresh_like(&mut init);
    fresh.set_frozen(false);
    net.push_branch(fresh)?;
    train_replay(set, ctx, stage, net, 0.0)
}

/// Trains stage `stage` of `set` with its algorithm. Oracle stages are
/// retrained jointly from scratch.
pub fn train_stage(set: &mut StageModelSet, ctx: &StageContext<'_>, stage: usize) -> Result<()> {
    if stage == 0 {
        let base = train_base(ctx)?;
        return record_base(set, ctx, base);
    }
    match set.algorithm {
        Algorithm::Naive => train_stage_naive(set, ctx, stage),
        Algorithm::Distill => train_stage_distill(set, ctx, stage),
        Algorithm::Exploit => train_stage_exploit(set, ctx, stage),
        Algorithm::Der => train_stage_der(set, ctx, stage),
        Algorithm::Pder => train_stage_pder(set, ctx, stage, ctx.hyper.branch_stage),
        Algorithm::Oracle => {
            start_stage(set, ctx, stage)?;
            let net = train_oracle(ctx, stage)?;
            finish_stage(set, ctx, stage, net);
            Ok(())
        }
    }
}

/// Trains every stage of `algorithm` in order.
pub fn run_algorithm(algorithm: Algorithm, ctx: &StageContext<'_>) -> Result<StageModelSet> {
    let base = train_base(ctx)?;
    run_from_base(algorithm, ctx, base)
}

/// Like [`run_algorithm`] with stage 0 already trained by [`train_base`].
pub fn run_from_base(algorithm: Algorithm, ctx: &StageContext<'_>, base: Network) -> Result<StageModelSet> {
    let mut set = StageModelSet::new(algorithm, ctx.hyper.exemplars_per_class);
    record_base(&mut set, ctx, base)?;
    for stage in 1..ctx.split.num_stages() {
        train_stage(&mut set, ctx, stage)?;
    }
    Ok(set)
}
