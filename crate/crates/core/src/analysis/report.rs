use serde::{Deserialize, Serialize};

use super::perturb::Perturbation;
use crate::cil::{fit_head, Dataset, IncrementalSplit, Part, Schedule, StageModelSet, StageSnapshot};
use crate::error::{Error, Result};
use crate::nn::{FeatureExtractor, Network};
use crate::numeric::{Matrix, RngStream};
use crate::repsim::{layerwise_cka, tsne_embed, TsneParams, TsneResult, DEFAULT_CKA_BATCH, DEFAULT_CKA_PASSES};

/// Knobs of the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    pub retrain: Schedule,
    pub retrain_seed: u64,
    pub cka_batch: usize,
    pub cka_passes: usize,
    pub cka_seed: u64,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_seed: u64,
    pub shift_classes: usize,
    pub shift_per_class: usize,
    pub shift_seed: u64,
    /// One corruption per incremental stage, applied to the inputs before
    /// training and evaluation. Empty means clean data.
    pub perturbation: Vec<Perturbation>,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            retrain: Schedule::with_epochs(30),
            retrain_seed: 1234,
            cka_batch: DEFAULT_CKA_BATCH,
            cka_passes: DEFAULT_CKA_PASSES,
            cka_seed: 99,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            tsne_seed: 7,
            shift_classes: 5,
            shift_per_class: 20,
            shift_seed: 5,
            perturbation: Vec::new(),
        }
    }
}

/// A stage's extractor with a fresh head trained over every class.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainedModel {
    pub network: Network,
    pub extractor_digest: String,
    pub retrain_seed: u64,
}

/// Freezes the snapshot's extractor, computes features for every training
/// sample once, and trains a fresh head of the same type over all classes.
pub fn retrain_classifier_full(
    snapshot: &StageSnapshot,
    data: &Dataset,
    split: &IncrementalSplit,
    sched: &Schedule,
    retrain_seed: u64,
) -> Result<RetrainedModel> {
    let net = &snapshot.network;
    if net.digest() != snapshot.digest {
        return Err(Error::Integrity(format!(
            "stage {} snapshot does not match its recorded digest",
            snapshot.stage
        )));
    }
    let before = net.extractor_digest();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.parts()[i] == Part::Train).collect();
    let features = net.features(&data.rows(&idx))?;
    let labels = split.ordinals(data, &idx);
    let classes = split.num_classes();
    let root = RngStream::new(retrain_seed);
    let mut head = net
        .head()
        .fresh_like(classes, net.feature_dim(), &mut root.derive("retrain-init"));
    let active: Vec<usize> = (0..classes).collect();
    fit_head(&mut head, &features, &labels, &active, sched, &mut root.derive("retrain-shuffle"))?;
    if net.extractor_digest() != before {
        return Err(Error::Integrity("extractor changed during retraining".into()));
    }
    let mut network = net.clone();
    network.set_head(head)?;
    network.freeze_extractors(true);
    Ok(RetrainedModel {
        network,
        extractor_digest: before,
        retrain_seed,
    })
}

/// Top-1 accuracy in percent over `indices`, argmax over all logits.
pub fn accuracy(net: &Network, data: &Dataset, split: &IncrementalSplit, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Parameter("accuracy over an empty subset".into()));
    }
    let logits = net.logits(&data.rows(indices))?;
    let truth = split.ordinals(data, indices);
    let correct = truth
        .iter()
        .enumerate()
        .filter(|&(i, &y)| logits.argmax_row(i) == y)
        .count();
    Ok(100.0 * correct as f64 / indices.len() as f64)
}

/// One stage's evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// `Acc(M′_j, D)` over every validation sample.
    pub acc_full: f64,
    /// `Acc(M′_j, Dᵢ)` for each stage's validation classes.
    pub acc_subset: Vec<f64>,
    /// ΔM′_j.
    pub delta: f64,
    /// Accuracy of the stage's own head on the classes seen so far.
    pub acc_incremental: f64,
    /// Mean of `acc_incremental` over stages; present on the final stage.
    pub avg_inc_acc: Option<f64>,
    /// Layerwise CKA between `F₀` and this stage's extractor.
    pub cka_curve: Vec<(String, f64)>,
    pub macs: u64,
}

/// `ΔM′_i = acc_full_i − acc_full_0`.
pub fn delta_metric(reports: &[StageReport]) -> Result<Vec<f64>> {
    let base = reports
        .iter()
        .find(|r| r.stage == 0)
        .ok_or_else(|| Error::Protocol("ΔM′ needs a stage-0 report".into()))?
        .acc_full;
    Ok(reports.iter().map(|r| r.acc_full - base).collect())
}

/// Mean over stages of each stage model's own-head accuracy on the
/// validation samples of the classes it has seen.
pub fn avg_incremental_accuracy(set: &StageModelSet, data: &Dataset, split: &IncrementalSplit) -> Result<f64> {
    let per_stage = incremental_accuracies(set, data, split)?;
    Ok(per_stage.iter().sum::<f64>() / per_stage.len() as f64)
}

fn incremental_accuracies(set: &StageModelSet, data: &Dataset, split: &IncrementalSplit) -> Result<Vec<f64>> {
    if set.num_stages() == 0 {
        return Err(Error::Protocol("no trained stages".into()));
    }
    set.snapshots()
        .iter()
        .map(|s| {
            let idx = data.indices(split.seen_classes(s.stage), Part::Val);
            accuracy(&s.network, data, split, &idx)
        })
        .collect()
}

/// Layerwise CKA of `reference` against every branch of `other` on `x`.
///
/// Tap ids are prefixed with `branch{k}:` when `other` has several branches.
pub fn cka_curve(
    reference: &FeatureExtractor,
    other: &Network,
    x: &Matrix,
    batch_size: usize,
    passes: usize,
    rng: &RngStream,
) -> Result<Vec<(String, f64)>> {
    let batch = batch_size.min(x.rows());
    let (_, taps_a) = reference.forward_with_taps(x)?;
    let multi = other.branches().len() > 1;
    let mut out = Vec::new();
    for k in 0..other.branches().len() {
        let (_, taps_b) = other.branch_extractor(k)?.forward_with_taps(x)?;
        for (id, v) in layerwise_cka(&taps_a, &taps_b, batch, passes, rng)? {
            out.push((if multi { format!("branch{k}:{id}") } else { id }, v));
        }
    }
    Ok(out)
}

/// Paired features of the same samples under two extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureShift {
    /// Rows `0..n` come from extractor A, rows `n..2n` from B, same samples.
    pub features: Matrix,
    /// Raw class label of each row.
    pub labels: Vec<usize>,
    /// `'A'` or `'B'` per row.
    pub sources: Vec<char>,
}

impl FeatureShift {
    pub fn pairs(&self) -> usize {
        self.features.rows() / 2
    }

    /// Mean Euclidean distance between each sample's A and B features.
    pub fn mean_paired_distance(&self) -> f64 {
        let n = self.pairs();
        if n == 0 {
            return 0.0;
        }
        (0..n)
            .map(|i| {
                let a = self.features.row(i);
                let b = self.features.row(i + n);
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / n as f64
    }
}

/// Samples `classes` classes and `per_class` validation samples of each and
/// stacks their features under `a` and `b`.
///
/// `stage = None` draws from the union of all incremental class sets, or
/// from `C₀` when the split has no incremental stage.
#[allow(clippy::too_many_arguments)]
pub fn feature_shift_export(
    a: &FeatureExtractor,
    b: &FeatureExtractor,
    data: &Dataset,
    split: &IncrementalSplit,
    stage: Option<usize>,
    classes: usize,
    per_class: usize,
    rng: &mut RngStream,
) -> Result<FeatureShift> {
    if a.output_dim() != b.output_dim() {
        return Err(Error::Dimension(format!(
            "extractors emit {} and {} features",
            a.output_dim(),
            b.output_dim()
        )));
    }
    let pool: Vec<usize> = match stage {
        Some(s) if s >= split.num_stages() => {
            return Err(Error::Parameter(format!("split has no stage {s}")))
        }
        Some(s) => split.classes(s).to_vec(),
        None if split.num_stages() == 1 => split.classes(0).to_vec(),
        None => split.class_order()[split.seen(0)..].to_vec(),
    };
    let mut chosen = rng.sample_without_replacement(&pool, classes);
    chosen.sort_unstable();
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for &c in &chosen {
        let rows = data.indices(&[c], Part::Val);
        let picked = rng.sample_without_replacement(&rows, per_class);
        labels.extend(std::iter::repeat_n(c, picked.len()));
        idx.extend(picked);
    }
    let x = data.rows(&idx);
    let fa = a.forward(&x)?;
    let fb = b.forward(&x)?;
    let n = idx.len();
    let mut all_labels = labels.clone();
    all_labels.extend(labels);
    Ok(FeatureShift {
        features: Matrix::vconcat(&[&fa, &fb])?,
        labels: all_labels,
        sources: std::iter::repeat_n('A', n).chain(std::iter::repeat_n('B', n)).collect(),
    })
}

/// Everything `analyze` reports for one run.
#[derive(Debug, Clone)]
pub struct RunAnalysis {
    pub reports: Vec<StageReport>,
    pub shift: FeatureShift,
    pub tsne: TsneResult,
}

/// Full evaluation of a trained run: per-stage retraining, accuracies, ΔM′,
/// CKA against `F₀` on the `D₀` training samples, and the t-SNE export of
/// `F₀` against the final stage's first branch.
pub fn analyze_run(
    set: &StageModelSet,
    data: &Dataset,
    split: &IncrementalSplit,
    params: &AnalysisParams,
) -> Result<RunAnalysis> {
    set.verify()?;
    if set.num_stages() != split.num_stages() {
        return Err(Error::Integrity(format!(
            "run has {} stage models, split has {} stages",
            set.num_stages(),
            split.num_stages()
        )));
    }
    let f0 = set.snapshot(0)?.network.branch_extractor(0)?;
    let d0 = data.rows(&data.indices(split.classes(0), Part::Train));
    let cka_rng = RngStream::new(params.cka_seed);
    let own = incremental_accuracies(set, data, split)?;
    let mut reports = Vec::with_capacity(set.num_stages());
    for snap in set.snapshots() {
        let retrained = retrain_classifier_full(snap, data, split, &params.retrain, params.retrain_seed)?;
        let full = data.indices(split.class_order(), Part::Val);
        let acc_full = accuracy(&retrained.network, data, split, &full)?;
        let acc_subset = (0..split.num_stages())
            .map(|i| accuracy(&retrained.network, data, split, &split.stage_indices(data, i, Part::Val)))
            .collect::<Result<Vec<_>>>()?;
        reports.push(StageReport {
            stage: snap.stage,
            acc_full,
            acc_subset,
            delta: 0.0,
            acc_incremental: own[snap.stage],
            avg_inc_acc: None,
            cka_curve: cka_curve(&f0, &snap.network, &d0, params.cka_batch, params.cka_passes, &cka_rng)?,
            macs: snap.network.macs(),
        });
    }
    let deltas = delta_metric(&reports)?;
    for (r, d) in reports.iter_mut().zip(deltas) {
        r.delta = d;
    }
    if let Some(last) = reports.last_mut() {
        last.avg_inc_acc = Some(own.iter().sum::<f64>() / own.len() as f64);
    }
    let last = &set.latest().expect("at least one stage").network;
    let shift = feature_shift_export(
        &f0,
        &last.branch_extractor(0)?,
        data,
        split,
        None,
        params.shift_classes,
        params.shift_per_class,
        &mut RngStream::new(params.shift_seed),
    )?;
    let tsne_params = TsneParams::default()
        .with_perplexity(params.tsne_perplexity)
        .with_iterations(params.tsne_iterations);
    let tsne = tsne_embed(&shift.features, &tsne_params, &mut RngStream::new(params.tsne_seed))?;
    Ok(RunAnalysis { reports, shift, tsne })
}
