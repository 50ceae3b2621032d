use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngStream};

/// Gaussian-cluster benchmark parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Class means lie on a sphere of this radius.
    pub radius: f64,
    /// Per-coordinate standard deviation around each mean.
    pub noise: f64,
    /// Dimension of the random subspace holding the class means; 0 uses
    /// the full space.
    pub mean_rank: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            dim: 32,
            train_per_class: 500,
            val_per_class: 100,
            radius: 4.0,
            noise: 1.0,
            mean_rank: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
}

/// Labelled samples, one row per sample, each tagged train or validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    parts: Vec<Part>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, parts: Vec<Part>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() || parts.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} rows, {} labels, {} part tags",
                features.rows(),
                labels.len(),
                parts.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside {num_classes} classes")));
        }
        if !features.all_finite() {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            parts,
            num_classes,
        })
    }

    /// Samples the benchmark: class means are isotropic Gaussian directions
    /// scaled to `radius`; samples add `noise`·N(0, I). Rows are grouped by
    /// class, training rows first.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        if spec.classes == 0 || spec.dim == 0 || spec.train_per_class == 0 || spec.val_per_class == 0 {
            return Err(Error::Config("synthetic dataset needs nonzero counts".into()));
        }
        if !(spec.radius >= 0.0) || !(spec.noise >= 0.0) {
            return Err(Error::Config("radius and noise must be non-negative".into()));
        }
        if spec.mean_rank > spec.dim {
            return Err(Error::Config(format!(
                "mean rank {} exceeds dimension {}",
                spec.mean_rank, spec.dim
            )));
        }
        let root = RngStream::new(spec.seed);
        let mut mean_rng = root.derive("class-means");
        let basis = if spec.mean_rank == 0 {
            None
        } else {
            Some(orthonormal_basis(spec.dim, spec.mean_rank, &mut root.derive("mean-basis")))
        };
        let means: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = match &basis {
                    None => (0..spec.dim).map(|_| mean_rng.normal()).collect(),
                    Some(q) => {
                        let z: Vec<f64> = (0..q.len()).map(|_| mean_rng.normal()).collect();
                        (0..spec.dim)
                            .map(|j| q.iter().zip(&z).map(|(b, c)| b[j] * c).sum())
                            .collect()
                    }
                };
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| spec.radius * x / norm).collect()
            })
            .collect();
        let per_class = spec.train_per_class + spec.val_per_class;
        let rows = spec.classes * per_class;
        let mut data = Vec::with_capacity(rows * spec.dim);
        let mut labels = Vec::with_capacity(rows);
        let mut parts = Vec::with_capacity(rows);
        for (c, mean) in means.iter().enumerate() {
            let mut rng = root.derive(&format!("class:{c}"));
            for i in 0..per_class {
                data.extend(mean.iter().map(|m| m + spec.noise * rng.normal()));
                labels.push(c);
                parts.push(if i < spec.train_per_class { Part::Train } else { Part::Val });
            }
        }
        Dataset::new(Matrix::from_vec(rows, spec.dim, data)?, labels, parts, spec.classes)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices of `part` whose label is in `classes`, in row order.
    pub fn indices(&self, classes: &[usize], part: Part) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.parts[i] == part && classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn rows(&self, indices: &[usize]) -> Matrix {
        self.features.select_rows(indices)
    }

    /// Serialized form: magic line, a JSON shape header, row-major
    /// little-endian f64 features, then one byte per part tag and a u32 per
    /// label.
    pub fn to_bytes(&self, manifest: &serde_json::Value) -> Vec<u8> {
        let header = serde_json::json!({
            "rows": self.features.rows(),
            "cols": self.features.cols(),
            "classes": self.num_classes,
            "manifest": manifest,
        });
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC.as_bytes());
        out.extend_from_slice(header.to_string().as_bytes());
        out.push(b'\n');
        for v in self.features.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.parts.iter().map(|p| match p {
            Part::Train => 0u8,
            Part::Val => 1u8,
        }));
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    /// Inverse of [`Dataset::to_bytes`]; also returns the embedded manifest.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let rest = bytes
            .strip_prefix(DATASET_MAGIC.as_bytes())
            .ok_or_else(|| Error::Format("not a dataset file".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("dataset header is not terminated".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let field = |k: &str| {
            header[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("dataset header lacks {k}")))
        };
        let (rows, cols, classes) = (field("rows")?, field("cols")?, field("classes")?);
        let body = &rest[nl + 1..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(rows * 5))
            .ok_or_else(|| Error::Format("dataset shape overflows".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "dataset payload is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let (feat, tail) = body.split_at(rows * cols * 8);
        let (part_bytes, label_bytes) = tail.split_at(rows);
        let data = feat
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let parts = part_bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(Part::Train),
                1 => Ok(Part::Val),
                other => Err(Error::Format(format!("bad part tag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = label_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let ds = Dataset::new(Matrix::from_vec(rows, cols, data)?, labels, parts, classes)?;
        Ok((ds, header["manifest"].clone()))
    }
}

/// `rank` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussians).
fn orthonormal_basis(dim: usize, rank: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

const DATASET_MAGIC: &str = "CILAB-DATA 1\n";
