use serde::{Deserialize, Serialize};

use super::hsic::{hsic_biased, unbiased_terms};
use crate::error::{Error, Result};
use crate::numeric::{gram, Matrix, RngStream};

/// Mini-batch size used for layerwise sweeps unless overridden.
pub const DEFAULT_CKA_BATCH: usize = 256;
/// Number of shuffled passes over the evaluation set.
pub const DEFAULT_CKA_PASSES: usize = 10;

/// Full-batch linear CKA from the biased HSIC estimator.
pub fn cka_full(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "CKA inputs need equal row counts, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::DegenerateSize("CKA needs at least 2 rows".into()));
    }
    let k = gram(x)?;
    let l = gram(y)?;
    let xy = hsic_biased(&k, &l)?;
    let xx = hsic_biased(&k, &k)?;
    let yy = hsic_biased(&l, &l)?;
    normalize(xy, xx, yy)
}

/// Full-batch CKA from the unbiased HSIC₁ estimator.
pub fn cka_unbiased(x: &Matrix, y: &Matrix) -> Result<f64> {
    let (xy, xx, yy) = unbiased_terms(x, y)?;
    normalize(xy, xx, yy)
}

fn normalize(xy: f64, xx: f64, yy: f64) -> Result<f64> {
    if !(xx > 0.0 && yy > 0.0) {
        return Err(Error::UndefinedSimilarity(format!(
            "self-similarity terms must be positive (xx = {xx}, yy = {yy}); constant features?"
        )));
    }
    Ok(xy / (xx * yy).sqrt())
}

/// Streaming mini-batch CKA state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CkaAccumulator {
    sum_xy: f64,
    sum_xx: f64,
    sum_yy: f64,
    batches_seen: usize,
    batch_size: Option<usize>,
}

impl CkaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulator with preset sums, mostly useful for checking `finalize`.
    pub fn from_sums(sum_xy: f64, sum_xx: f64, sum_yy: f64, batches_seen: usize) -> Self {
        CkaAccumulator {
            sum_xy,
            sum_xx,
            sum_yy,
            batches_seen,
            batch_size: None,
        }
    }

    pub fn sums(&self) -> (f64, f64, f64) {
        (self.sum_xy, self.sum_xx, self.sum_yy)
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.batch_size
    }

    /// Adds one batch. The first batch fixes the batch size for the stream.
    pub fn update(&mut self, xi: &Matrix, yi: &Matrix) -> Result<()> {
        let n = xi.rows();
        if yi.rows() != n {
            return Err(Error::Dimension(format!(
                "batch row counts differ: {n} vs {}",
                yi.rows()
            )));
        }
        match self.batch_size {
            Some(expected) if expected != n => {
                return Err(Error::Protocol(format!(
                    "mini-batch size changed mid-stream: {expected} -> {n}"
                )))
            }
            _ => {}
        }
        let (xy, xx, yy) = unbiased_terms(xi, yi)?;
        self.batch_size = Some(n);
        self.sum_xy += xy;
        self.sum_xx += xx;
        self.sum_yy += yy;
        self.batches_seen += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<f64> {
        if self.batches_seen == 0 {
            return Err(Error::Protocol("finalize before any update".into()));
        }
        normalize(self.sum_xy, self.sum_xx, self.sum_yy)
    }
}

/// Activations captured at named points of a network for one input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTapSet {
    layer_ids: Vec<String>,
    activations: Vec<Matrix>,
}

impl LayerTapSet {
    pub fn new(layer_ids: Vec<String>, activations: Vec<Matrix>) -> Result<Self> {
        if layer_ids.len() != activations.len() {
            return Err(Error::Dimension(format!(
                "{} tap ids for {} activations",
                layer_ids.len(),
                activations.len()
            )));
        }
        if let Some(first) = activations.first() {
            if activations.iter().any(|a| a.rows() != first.rows()) {
                return Err(Error::Dimension("tap activations disagree on row count".into()));
            }
        }
        Ok(LayerTapSet {
            layer_ids,
            activations,
        })
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }

    pub fn rows(&self) -> usize {
        self.activations.first().map_or(0, Matrix::rows)
    }

    pub fn len(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layer_ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.layer_ids
            .iter()
            .position(|l| l == id)
            .map(|i| &self.activations[i])
    }

    /// Keeps the listed rows of every tap.
    pub fn select_rows(&self, rows: &[usize]) -> LayerTapSet {
        LayerTapSet {
            layer_ids: self.layer_ids.clone(),
            activations: self.activations.iter().map(|a| a.select_rows(rows)).collect(),
        }
    }
}

/// Mini-batch CKA for one layer pair over `passes` shuffled passes.
///
/// Each pass draws a fresh permutation and feeds only full batches; the
/// trailing `rows % batch_size` samples of a pass are dropped.
pub fn minibatch_cka(
    x: &Matrix,
    y: &Matrix,
    batch_size: usize,
    passes: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "layer activations disagree on rows: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if batch_size < 4 {
        return Err(Error::Parameter(format!(
            "mini-batch CKA needs batch_size >= 4, got {batch_size}"
        )));
    }
    if x.rows() < batch_size {
        return Err(Error::Parameter(format!(
            "{} rows cannot fill one batch of {batch_size}",
            x.rows()
        )));
    }
    if passes == 0 {
        return Err(Error::Parameter("mini-batch CKA needs at least one pass".into()));
    }
    let mut acc = CkaAccumulator::new();
    for _ in 0..passes {
        let order = rng.permutation(x.rows());
        for batch in order.chunks_exact(batch_size) {
            acc.update(&x.select_rows(batch), &y.select_rows(batch))?;
        }
    }
    acc.finalize()
}

/// One mini-batch CKA value per tap, comparing same-named taps.
///
/// Each layer draws its batch orderings from a stream derived from `rng` and
/// the layer id, so the result does not depend on evaluation order.
pub fn layerwise_cka(
    taps_a: &LayerTapSet,
    taps_b: &LayerTapSet,
    batch_size: usize,
    passes: usize,
    rng: &RngStream,
) -> Result<Vec<(String, f64)>> {
    if taps_a.layer_ids() != taps_b.layer_ids() {
        return Err(Error::Protocol(format!(
            "tap sets differ: {:?} vs {:?}",
            taps_a.layer_ids(),
            taps_b.layer_ids()
        )));
    }
    if taps_a.rows() != taps_b.rows() {
        return Err(Error::Protocol(format!(
            "tap sets cover different samples: {} vs {} rows",
            taps_a.rows(),
            taps_b.rows()
        )));
    }
    taps_a
        .layer_ids()
        .iter()
        .zip(taps_a.activations().iter().zip(taps_b.activations()))
        .map(|(id, (x, y))| {
            let mut stream = rng.derive(&format!("cka-layer:{id}"));
            let value = minibatch_cka(x, y, batch_size, passes, &mut stream)
                .map_err(|e| match e {
                    Error::UndefinedSimilarity(m) => {
                        Error::UndefinedSimilarity(format!("tap {id}: {m}"))
                    }
                    other => other,
                })?;
            Ok((id.clone(), value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn full_cka_basic_invariances() {
        let x = seeded(16, 6, 1);
        assert!((cka_full(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        assert!((cka_full(&x, &x.scale(3.0)).unwrap() - 1.0).abs() < 1e-10);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Matrix::from_fn(16, 6, |i, j| x.get(i, perm[j]));
        assert!((cka_full(&x, &xp).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_cka_handles_different_widths() {
        let x = seeded(16, 4, 2);
        let y = seeded(16, 13, 3);
        let v = cka_full(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(v, cka_full(&y, &x).unwrap());
    }

    #[test]
    fn constant_features_are_undefined() {
        let x = Matrix::filled(8, 3, 2.0);
        let y = seeded(8, 3, 4);
        assert!(matches!(
            cka_full(&x, &y),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn finalize_examples() {
        let f = |a, b, c| CkaAccumulator::from_sums(a, b, c, 1).finalize().unwrap();
        assert_eq!(f(2.0, 4.0, 1.0), 1.0);
        assert_eq!(f(0.0, 4.0, 9.0), 0.0);
        assert!((f(-1.0, 4.0, 9.0) + 1.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            CkaAccumulator::from_sums(1.0, 0.0, 1.0, 1).finalize(),
            Err(Error::UndefinedSimilarity(_))
        ));
        assert!(matches!(
            CkaAccumulator::from_sums(1.0, -2.0, 1.0, 1).finalize(),
            Err(Error::UndefinedSimilarity(_))
        ));
        assert!(matches!(
            CkaAccumulator::new().finalize(),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn accumulator_self_similarity_and_batch_size_lock() {
        let x = seeded(10, 3, 5);
        let mut acc = CkaAccumulator::new();
        acc.update(&x, &x).unwrap();
        assert_eq!(acc.batches_seen(), 1);
        assert_eq!(acc.finalize().unwrap(), 1.0);
        let small = seeded(8, 3, 6);
        assert!(matches!(acc.update(&small, &small), Err(Error::Protocol(_))));
        assert_eq!(acc.batches_seen(), 1);
    }

    #[test]
    fn single_whole_set_batch_equals_unbiased_cka() {
        let x = seeded(40, 5, 7);
        let y = seeded(40, 9, 8).map(|v| v.tanh());
        let mut acc = CkaAccumulator::new();
        acc.update(&x, &y).unwrap();
        let direct = cka_unbiased(&x, &y).unwrap();
        assert!((acc.finalize().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn layerwise_rejects_mismatched_taps() {
        let a = LayerTapSet::new(vec!["a".into()], vec![seeded(8, 2, 1)]).unwrap();
        let b = LayerTapSet::new(vec!["b".into()], vec![seeded(8, 2, 1)]).unwrap();
        let rng = RngStream::new(0);
        assert!(matches!(
            layerwise_cka(&a, &b, 4, 1, &rng),
            Err(Error::Protocol(_))
        ));
        assert!(LayerTapSet::new(
            vec!["a".into(), "b".into()],
            vec![seeded(8, 2, 1), seeded(7, 2, 1)]
        )
        .is_err());
    }

    #[test]
    fn layerwise_identical_taps_give_one() {
        let taps = LayerTapSet::new(
            vec!["l0".into(), "l1".into()],
            vec![seeded(64, 4, 1), seeded(64, 7, 2)],
        )
        .unwrap();
        let rng = RngStream::new(9);
        for (_, v) in layerwise_cka(&taps, &taps, 16, 3, &rng).unwrap() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn layerwise_is_order_independent() {
        let x0 = seeded(64, 4, 1);
        let x1 = seeded(64, 5, 2);
        let y0 = seeded(64, 4, 3);
        let y1 = seeded(64, 5, 4);
        let a = LayerTapSet::new(vec!["p".into(), "q".into()], vec![x0.clone(), x1.clone()]).unwrap();
        let b = LayerTapSet::new(vec!["p".into(), "q".into()], vec![y0.clone(), y1.clone()]).unwrap();
        let rng = RngStream::new(5);
        let both = layerwise_cka(&a, &b, 16, 2, &rng).unwrap();
        let only_q = layerwise_cka(
            &LayerTapSet::new(vec!["q".into()], vec![x1]).unwrap(),
            &LayerTapSet::new(vec!["q".into()], vec![y1]).unwrap(),
            16,
            2,
            &rng,
        )
        .unwrap();
        assert_eq!(both[1], only_q[0]);
    }
}
