use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Part};
use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Partition of the classes into a base set and incremental steps.
///
/// Networks see classes by ordinal: the position of the raw label in
/// `class_order`. Each stage therefore owns a contiguous ordinal range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSplit {
    class_order: Vec<usize>,
    base_count: usize,
    step_counts: Vec<usize>,
}

/// Shuffles `num_classes` labels and cuts them into `base` plus `steps`
/// groups of `per_step`.
pub fn make_split(
    num_classes: usize,
    base: usize,
    steps: usize,
    per_step: usize,
    rng: &mut RngStream,
) -> Result<IncrementalSplit> {
    if base == 0 {
        return Err(Error::Config("base class set must be nonempty".into()));
    }
    if steps > 0 && per_step == 0 {
        return Err(Error::Config("incremental steps need at least one class".into()));
    }
    if base + steps * per_step != num_classes {
        return Err(Error::Config(format!(
            "base {base} + {steps}×{per_step} does not cover {num_classes} classes"
        )));
    }
    Ok(IncrementalSplit {
        class_order: rng.permutation(num_classes),
        base_count: base,
        step_counts: vec![per_step; steps],
    })
}

impl IncrementalSplit {
    /// Split with an explicit order and stage sizes.
    pub fn from_order(class_order: Vec<usize>, base_count: usize, step_counts: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; class_order.len()];
        for &c in &class_order {
            if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config("class order is not a permutation".into()));
            }
        }
        if base_count == 0 || step_counts.contains(&0) {
            return Err(Error::Config("every stage needs at least one class".into()));
        }
        if base_count + step_counts.iter().sum::<usize>() != class_order.len() {
            return Err(Error::Config("stage sizes do not cover the class order".into()));
        }
        Ok(IncrementalSplit {
            class_order,
            base_count,
            step_counts,
        })
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Number of stages, `N + 1`.
    pub fn num_stages(&self) -> usize {
        1 + self.step_counts.len()
    }

    /// Stage sizes `[|C₀|, |C₁|, …]`.
    pub fn stage_sizes(&self) -> Vec<usize> {
        std::iter::once(self.base_count)
            .chain(self.step_counts.iter().copied())
            .collect()
    }

    /// Ordinal range of the classes introduced at `stage`.
    pub fn ordinal_range(&self, stage: usize) -> Range<usize> {
        let sizes = self.stage_sizes();
        let start: usize = sizes[..stage].iter().sum();
        start..start + sizes[stage]
    }

    /// Number of classes seen after training `stage`.
    pub fn seen(&self, stage: usize) -> usize {
        self.ordinal_range(stage).end
    }

    /// Raw labels introduced at `stage`.
    pub fn classes(&self, stage: usize) -> &[usize] {
        &self.class_order[self.ordinal_range(stage)]
    }

    /// Raw labels seen up to and including `stage`.
    pub fn seen_classes(&self, stage: usize) -> &[usize] {
        &self.class_order[..self.seen(stage)]
    }

    /// Ordinal of raw label `class`.
    pub fn ordinal(&self, class: usize) -> usize {
        self.class_order
            .iter()
            .position(|&c| c == class)
            .expect("label belongs to the split")
    }

    /// Ordinal labels for dataset rows.
    pub fn ordinals(&self, data: &Dataset, indices: &[usize]) -> Vec<usize> {
        let mut lookup = vec![0; self.num_classes()];
        for (o, &c) in self.class_order.iter().enumerate() {
            lookup[c] = o;
        }
        indices.iter().map(|&i| lookup[data.labels()[i]]).collect()
    }

    /// `D_stage` for the given part.
    pub fn stage_indices(&self, data: &Dataset, stage: usize, part: Part) -> Vec<usize> {
        data.indices(self.classes(stage), part)
    }

    pub(crate) fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_classes() != self.num_classes() {
            return Err(Error::Config(format!(
                "split has {} classes, dataset {}",
                self.num_classes(),
                data.num_classes()
            )));
        }
        Ok(())
    }
}

/// Stored exemplar indices per raw class label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarStore {
    capacity_per_class: usize,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new(capacity_per_class: usize) -> Self {
        ExemplarStore {
            capacity_per_class,
            by_class: BTreeMap::new(),
        }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn get(&self, class: usize) -> Option<&[usize]> {
        self.by_class.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }

    /// Every stored index, ordered by class then draw order.
    pub fn all(&self) -> Vec<usize> {
        self.by_class.values().flatten().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

/// Adds up to `capacity` uniformly drawn training rows for every class of
/// `stage`. Classes smaller than the capacity are stored whole.
pub fn select_exemplars(
    store: &mut ExemplarStore,
    data: &Dataset,
    split: &IncrementalSplit,
    stage: usize,
    rng: &mut RngStream,
) {
    for &class in split.classes(stage) {
        let pool = data.indices(&[class], Part::Train);
        let picked = rng.sample_without_replacement(&pool, store.capacity_per_class);
        store.by_class.insert(class, picked);
    }
}
