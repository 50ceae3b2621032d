use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_tn, Matrix, RngStream};

/// Fixed scale of the cosine head unless configured otherwise.
pub const DEFAULT_COSINE_SCALE: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Cosine,
}

/// `y = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `c × z`
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// `yᵢ = s · Wᵢ·x / (‖Wᵢ‖‖x‖)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    /// `c × z`
    pub weight: Matrix,
    pub scale: f64,
    pub learn_scale: bool,
}

/// Classifier head over extracted features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Linear(LinearClassifier),
    Cosine(CosineClassifier),
}

/// How to build heads for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub bias: bool,
    pub scale: f64,
    pub learn_scale: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            kind: HeadKind::Cosine,
            bias: true,
            scale: DEFAULT_COSINE_SCALE,
            learn_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub scale: Option<f64>,
}

/// Cached normalized operands of a cosine forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    x_hat: Option<Matrix>,
    x_norms: Vec<f64>,
    w_hat: Option<Matrix>,
    w_norms: Vec<f64>,
}

fn draw_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

fn normalize_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Normalization(format!("{what} row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backprop through `u = v/‖v‖` row by row: `dv = (du − u·(u·du)) / ‖v‖`.
fn normalize_backward(unit: &Matrix, norms: &[f64], dunit: &Matrix) -> Matrix {
    let mut out = dunit.clone();
    for i in 0..unit.rows() {
        let u = unit.row(i);
        let proj: f64 = u.iter().zip(dunit.row(i)).map(|(a, b)| a * b).sum();
        for (o, &ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - ui * proj) / norms[i];
        }
    }
    out
}

impl Head {
    pub fn new(spec: &HeadSpec, classes: usize, feature_dim: usize, rng: &mut RngStream) -> Self {
        let weight = draw_rows(classes, feature_dim, rng);
        match spec.kind {
            HeadKind::Linear => Head::Linear(LinearClassifier {
                weight,
                bias: spec.bias.then(|| vec![0.0; classes]),
            }),
            HeadKind::Cosine => Head::Cosine(CosineClassifier {
                weight,
                scale: spec.scale,
                learn_scale: spec.learn_scale,
            }),
        }
    }

    /// New head of the same type and settings but fresh weights.
    pub fn fresh_like(&self, classes: usize, feature_dim: usize, rng: &mut RngStream) -> Self {
        let weight = draw_rows(classes, feature_dim, rng);
        match self {
            Head::Linear(l) => Head::Linear(LinearClassifier {
                weight,
                bias: l.bias.as_ref().map(|_| vec![0.0; classes]),
            }),
            Head::Cosine(c) => Head::Cosine(CosineClassifier {
                weight,
                scale: c.scale,
                learn_scale: c.learn_scale,
            }),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::Cosine(_) => HeadKind::Cosine,
        }
    }

    pub fn weight(&self) -> &Matrix {
        match self {
            Head::Linear(l) => &l.weight,
            Head::Cosine(c) => &c.weight,
        }
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Matrix {
        match self {
            Head::Linear(l) => &mut l.weight,
            Head::Cosine(c) => &mut c.weight,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight().rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight().cols()
    }

    pub fn macs(&self) -> u64 {
        (self.num_classes() * self.feature_dim()) as u64
    }

    /// Appends `extra` freshly drawn class rows.
    pub fn add_classes(&mut self, extra: usize, rng: &mut RngStream) {
        let z = self.feature_dim();
        let rows = draw_rows(extra, z, rng);
        let w = Matrix::vconcat(&[self.weight(), &rows]).expect("same width");
        *self.weight_mut() = w;
        if let Head::Linear(LinearClassifier { bias: Some(b), .. }) = self {
            b.extend(std::iter::repeat_n(0.0, extra));
        }
    }

    /// Widens the input by `extra` features whose weights start at zero.
    pub fn add_inputs(&mut self, extra: usize) {
        let c = self.num_classes();
        let w = Matrix::hconcat(&[self.weight(), &Matrix::zeros(c, extra)]).expect("same rows");
        *self.weight_mut() = w;
    }

    /// Stacks heads of the same type along the class axis.
    pub fn concat(heads: &[Head]) -> Result<Head> {
        let first = heads
            .first()
            .ok_or_else(|| Error::Parameter("no heads to concatenate".into()))?;
        let weights: Vec<&Matrix> = heads.iter().map(Head::weight).collect();
        let weight = Matrix::vconcat(&weights)?;
        match first {
            Head::Linear(l) => {
                let bias = match &l.bias {
                    Some(_) => {
                        let mut all = Vec::new();
                        for h in heads {
                            match h {
                                Head::Linear(LinearClassifier { bias: Some(b), .. }) => {
                                    all.extend_from_slice(b)
                                }
                                _ => return Err(Error::Parameter("mixed head types".into())),
                            }
                        }
                        Some(all)
                    }
                    None => None,
                };
                Ok(Head::Linear(LinearClassifier { weight, bias }))
            }
            Head::Cosine(c) => {
                if heads
                    .iter()
                    .any(|h| !matches!(h, Head::Cosine(o) if o.scale == c.scale))
                {
                    return Err(Error::Parameter("mixed head types or scales".into()));
                }
                Ok(Head::Cosine(CosineClassifier {
                    weight,
                    scale: c.scale,
                    learn_scale: c.learn_scale,
                }))
            }
        }
    }

    fn check(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "head expects {} features, got {}",
                self.feature_dim(),
                features.cols()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.0)
    }

    pub(crate) fn forward_cached(&self, features: &Matrix) -> Result<(Matrix, HeadCache)> {
        self.check(features)?;
        match self {
            Head::Linear(l) => {
                let mut y = matmul_nt(features, &l.weight)?;
                if let Some(b) = &l.bias {
                    for i in 0..y.rows() {
                        for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                            *v += bj;
                        }
                    }
                }
                Ok((
                    y,
                    HeadCache {
                        x_hat: None,
                        x_norms: Vec::new(),
                        w_hat: None,
                        w_norms: Vec::new(),
                    },
                ))
            }
            Head::Cosine(c) => {
                let (x_hat, x_norms) = normalize_rows(features, "feature")?;
                let (w_hat, w_norms) = normalize_rows(&c.weight, "weight")?;
                let y = matmul_nt(&x_hat, &w_hat)?.scale(c.scale);
                Ok((
                    y,
                    HeadCache {
                        x_hat: Some(x_hat),
                        x_norms,
                        w_hat: Some(w_hat),
                        w_norms,
                    },
                ))
            }
        }
    }

    /// Parameter gradients (when `want_params`) and the feature gradient.
    pub(crate) fn backward(
        &self,
        features: &Matrix,
        cache: &HeadCache,
        dlogits: &Matrix,
        want_params: bool,
    ) -> Result<(Option<HeadGrad>, Matrix)> {
        match self {
            Head::Linear(l) => {
                let dx = matmul(dlogits, &l.weight)?;
                let grad = if want_params {
                    let dw = matmul_tn(dlogits, features)?;
                    let db = l.bias.as_ref().map(|b| {
                        let mut db = vec![0.0; b.len()];
                        for i in 0..dlogits.rows() {
                            for (d, g) in db.iter_mut().zip(dlogits.row(i)) {
                                *d += g;
                            }
                        }
                        db
                    });
                    Some(HeadGrad {
                        weight: dw,
                        bias: db,
                        scale: None,
                    })
                } else {
                    None
                };
                Ok((grad, dx))
            }
            Head::Cosine(c) => {
                let x_hat = cache.x_hat.as_ref().expect("cosine cache");
                let w_hat = cache.w_hat.as_ref().expect("cosine cache");
                let g = dlogits.scale(c.scale);
                let dx_hat = matmul(&g, w_hat)?;
                let dx = normalize_backward(x_hat, &cache.x_norms, &dx_hat);
                let grad = if want_params {
                    let dw_hat = matmul_tn(&g, x_hat)?;
                    let dw = normalize_backward(w_hat, &cache.w_norms, &dw_hat);
                    let ds = if c.learn_scale {
                        let cos = matmul_nt(x_hat, w_hat)?;
                        Some(dlogits.frobenius_dot(&cos)?)
                    } else {
                        None
                    };
                    Some(HeadGrad {
                        weight: dw,
                        bias: None,
                        scale: ds,
                    })
                } else {
                    None
                };
                Ok((grad, dx))
            }
        }
    }

    pub(crate) fn apply(&mut self, grad: &HeadGrad, lr: f64, weight_decay: f64) -> Result<()> {
        if grad.weight.shape() != self.weight().shape() {
            return Err(Error::Dimension("head gradient shape mismatch".into()));
        }
        sgd_update(self.weight_mut().as_mut_slice(), grad.weight.as_slice(), lr, weight_decay);
        match self {
            Head::Linear(l) => {
                if let (Some(b), Some(gb)) = (l.bias.as_mut(), grad.bias.as_ref()) {
                    if b.len() != gb.len() {
                        return Err(Error::Dimension("bias gradient length".into()));
                    }
                    sgd_update(b, gb, lr, weight_decay);
                }
            }
            Head::Cosine(c) => {
                if let Some(ds) = grad.scale {
                    c.scale -= lr * ds;
                }
            }
        }
        Ok(())
    }
}

/// `p ← p − lr·(g + weight_decay·p)`.
pub(crate) fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(weight: Matrix, scale: f64) -> Head {
        Head::Cosine(CosineClassifier {
            weight,
            scale,
            learn_scale: false,
        })
    }

    #[test]
    fn cosine_parallel_and_orthogonal() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let y = cosine(w, DEFAULT_COSINE_SCALE).logits(&x).unwrap();
        assert_eq!(y.as_slice(), &[24.0, 0.0]);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            cosine(w.clone(), 1.0).logits(&x),
            Err(Error::Normalization(_))
        ));
        let zero_w = Matrix::zeros(1, 2);
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            cosine(zero_w, 1.0).logits(&x),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn cosine_logits_are_bounded_and_argmax_ignores_scale() {
        let mut rng = RngStream::new(3);
        let w = Matrix::from_fn(6, 5, |_, _| rng.normal());
        let x = Matrix::from_fn(20, 5, |_, _| rng.normal());
        let base = cosine(w.clone(), 1.0).logits(&x).unwrap();
        for s in [24.0, 100.0] {
            let y = cosine(w.clone(), s).logits(&x).unwrap();
            assert!(y.as_slice().iter().all(|v| v.abs() <= s + 1e-12));
            for i in 0..20 {
                assert_eq!(y.argmax_row(i), base.argmax_row(i));
            }
        }
    }

    #[test]
    fn linear_identity_head() {
        let head = Head::Linear(LinearClassifier {
            weight: Matrix::identity(3),
            bias: Some(vec![0.0; 3]),
        });
        let mut rng = RngStream::new(1);
        let x = Matrix::from_fn(4, 3, |_, _| rng.normal());
        assert_eq!(head.logits(&x).unwrap(), x);
    }

    #[test]
    fn concatenated_heads_match_separate_logits() {
        let mut rng = RngStream::new(2);
        let spec = HeadSpec::default();
        let a = Head::new(&spec, 3, 4, &mut rng);
        let b = Head::new(&spec, 2, 4, &mut rng);
        let x = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let joined = Head::concat(&[a.clone(), b.clone()]).unwrap().logits(&x).unwrap();
        let separate =
            Matrix::hconcat(&[&a.logits(&x).unwrap(), &b.logits(&x).unwrap()]).unwrap();
        assert_eq!(joined, separate);
    }

    #[test]
    fn growing_a_head() {
        let mut rng = RngStream::new(4);
        let spec = HeadSpec {
            kind: HeadKind::Linear,
            ..HeadSpec::default()
        };
        let mut head = Head::new(&spec, 2, 3, &mut rng);
        head.add_classes(2, &mut rng);
        head.add_inputs(3);
        assert_eq!((head.num_classes(), head.feature_dim()), (4, 6));
        assert_eq!(head.weight().get(0, 4), 0.0);
        assert_eq!(head.macs(), 24);
    }
}
