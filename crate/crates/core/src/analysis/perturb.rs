use serde::{Deserialize, Serialize};

use crate::cil::{Dataset, IncrementalSplit};
use crate::error::{Error, Result};
use crate::numeric::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// `x + σ·N(0, I)` with `σ = strength`.
    Noise,
    /// Pulls each coordinate toward the sample's mean: `m + (1 − s)(x − m)`.
    Contrast,
    /// Rounds onto a grid of step `strength`.
    Quantize,
    /// Replaces each coordinate by ±3 with probability `strength`.
    Impulse,
    /// Blends each coordinate with the mean of its circular neighbours.
    Smooth,
}

/// One stage's corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub strength: f64,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, strength: f64) -> Self {
        Perturbation { kind, strength }
    }

    /// The five-kind schedule used by the task-dissimilarity experiment.
    pub fn default_schedule() -> Vec<Perturbation> {
        use PerturbationKind::*;
        vec![
            Perturbation::new(Noise, 1.0),
            Perturbation::new(Contrast, 0.6),
            Perturbation::new(Quantize, 1.5),
            Perturbation::new(Impulse, 0.25),
            Perturbation::new(Smooth, 0.8),
        ]
    }

    fn apply(&self, row: &mut [f64], rng: &mut RngStream) {
        let s = self.strength;
        if s == 0.0 {
            return;
        }
        match self.kind {
            PerturbationKind::Noise => row.iter_mut().for_each(|v| *v += s * rng.normal()),
            PerturbationKind::Contrast => {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                row.iter_mut().for_each(|v| *v = m + (1.0 - s) * (*v - m));
            }
            PerturbationKind::Quantize => row.iter_mut().for_each(|v| *v = s * (*v / s).round()),
            PerturbationKind::Impulse => {
                for v in row.iter_mut() {
                    if rng.uniform(0.0, 1.0) < s {
                        *v = if rng.uniform(0.0, 1.0) < 0.5 { -3.0 } else { 3.0 };
                    }
                }
            }
            PerturbationKind::Smooth => {
                let n = row.len();
                let orig = row.to_vec();
                for (j, v) in row.iter_mut().enumerate() {
                    let nb = 0.5 * (orig[(j + n - 1) % n] + orig[(j + 1) % n]);
                    *v = (1.0 - s) * orig[j] + s * nb;
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let s = self.strength;
        let ok = match self.kind {
            PerturbationKind::Noise | PerturbationKind::Quantize => s >= 0.0,
            PerturbationKind::Contrast | PerturbationKind::Impulse | PerturbationKind::Smooth => {
                (0.0..=1.0).contains(&s)
            }
        };
        if !ok || !s.is_finite() {
            return Err(Error::Config(format!("{:?} strength {s} out of range", self.kind)));
        }
        Ok(())
    }
}

/// Copy of `data` where every sample of incremental stage `i` (train and
/// validation) is transformed by `schedule[i − 1]`. Stage 0 stays clean.
pub fn perturb_stage_inputs(
    data: &Dataset,
    split: &IncrementalSplit,
    schedule: &[Perturbation],
    rng: &RngStream,
) -> Result<Dataset> {
    let steps = split.num_stages() - 1;
    if schedule.len() != steps {
        return Err(Error::Config(format!(
            "perturbation schedule has {} entries for {steps} incremental stages",
            schedule.len()
        )));
    }
    schedule.iter().try_for_each(Perturbation::validate)?;
    let mut out = data.clone();
    for (k, p) in schedule.iter().enumerate() {
        let stage = k + 1;
        let mut stage_rng = rng.derive(&format!("perturb:stage{stage}"));
        let classes = split.classes(stage);
        let rows: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&data.labels()[i])).collect();
        let features = out.features_mut();
        for i in rows {
            p.apply(features.row_mut(i), &mut stage_rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cil::{make_split, Part, SyntheticSpec};
    use crate::numeric::Matrix;

    fn setup() -> (Dataset, IncrementalSplit) {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 8,
            train_per_class: 4000,
            val_per_class: 1000,
            ..SyntheticSpec::default()
        };
        let data = Dataset::synthetic(&spec).unwrap();
        let split = make_split(3, 1, 2, 1, &mut RngStream::new(0)).unwrap();
        (data, split)
    }

    fn column_variances(data: &Dataset, idx: &[usize]) -> Vec<f64> {
        let x = data.rows(idx);
        let n = x.rows() as f64;
        (0..x.cols())
            .map(|j| {
                let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
                (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .collect()
    }

    #[test]
    fn zero_strength_is_identity() {
        let (data, split) = setup();
        let sched = [
            Perturbation::new(PerturbationKind::Contrast, 0.0),
            Perturbation::new(PerturbationKind::Impulse, 0.0),
        ];
        let out = perturb_stage_inputs(&data, &split, &sched, &RngStream::new(1)).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn gaussian_noise_adds_sigma_squared() {
        let (data, split) = setup();
        let sched = [
            Perturbation::new(PerturbationKind::Noise, 0.5),
            Perturbation::new(PerturbationKind::Smooth, 0.0),
        ];
        let out = perturb_stage_inputs(&data, &split, &sched, &RngStream::new(2)).unwrap();
        let class = split.classes(1)[0];
        let mut idx = data.indices(&[class], Part::Train);
        idx.extend(data.indices(&[class], Part::Val));
        assert_eq!(idx.len(), 5000);
        // Per feature the sample increase also carries a clean×noise
        // covariance term of similar size to the tolerance, so the check uses
        // the feature-averaged increase and the variance of the added part.
        let before = column_variances(&data, &idx);
        let after = column_variances(&out, &idx);
        let added: f64 =
            after.iter().zip(&before).map(|(a, b)| a - b).sum::<f64>() / before.len() as f64;
        assert!((added - 0.25).abs() < 0.025, "mean added variance {added}");
        let diff = Dataset::new(
            Matrix::from_fn(out.len(), out.dim(), |i, j| {
                out.features().get(i, j) - data.features().get(i, j)
            }),
            data.labels().to_vec(),
            data.parts().to_vec(),
            data.num_classes(),
        )
        .unwrap();
        for v in column_variances(&diff, &idx) {
            assert!((v - 0.25).abs() < 0.025, "noise variance {v}");
        }
        let base = data.indices(split.classes(0), Part::Train);
        assert_eq!(out.rows(&base), data.rows(&base));
    }

    #[test]
    fn schedule_length_must_match() {
        let (data, split) = setup();
        let sched = [Perturbation::new(PerturbationKind::Noise, 0.1)];
        assert!(matches!(
            perturb_stage_inputs(&data, &split, &sched, &RngStream::new(0)),
            Err(Error::Config(_))
        ));
    }
}
