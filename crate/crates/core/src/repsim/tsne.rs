use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngStream};

/// Optimizer settings for exact t-SNE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    /// Step size; `None` picks `max(n / (4·early_exaggeration), 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    /// Fraction of iterations run with exaggerated affinities and low momentum.
    pub early_fraction: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            early_fraction: 0.25,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

impl TsneParams {
    pub fn with_perplexity(mut self, perplexity: f64) -> Self {
        self.perplexity = perplexity;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `rows × 2` embedding.
    pub embedding: Matrix,
    /// KL(P‖Q) at the random initialization.
    pub initial_kl: f64,
    /// KL(P‖Q) after the last iteration.
    pub final_kl: f64,
}

const PERPLEXITY_TOL: f64 = 1e-4;
const MIN_PROB: f64 = 1e-12;

fn squared_distances(x: &Matrix) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities for precision `beta`, plus its
/// perplexity `exp(H)`.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .fold(f64::INFINITY, |m, (_, &d)| m.min(d));
    let mut sum = 0.0;
    for (j, (o, &d)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == i { 0.0 } else { (-beta * (d - min)).exp() };
        sum += *o;
    }
    let mut weighted = 0.0;
    for (o, &d) in out.iter_mut().zip(dist) {
        *o /= sum;
        weighted += *o * (d - min);
    }
    // H = ln(sum) + beta·E[d − min]
    (sum.ln() + beta * weighted).exp()
}

/// Bisection on the Gaussian precision of every point so its conditional
/// distribution hits the target perplexity.
fn calibrate(dist: &[f64], n: usize, perplexity: f64) -> Result<Vec<f64>> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let spread = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(0.0f64, |m, (_, &d)| m.max(d));
        if spread <= 0.0 {
            return Err(Error::Parameter(format!(
                "point {i} coincides with every other point; perplexity calibration is infeasible"
            )));
        }
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0 / spread;
        let mut achieved = 0.0;
        for _ in 0..200 {
            achieved = conditional_row(row, i, beta, out);
            if (achieved - perplexity).abs() < PERPLEXITY_TOL {
                break;
            }
            if achieved > perplexity {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        if (achieved - perplexity).abs() >= PERPLEXITY_TOL {
            return Err(Error::Parameter(format!(
                "point {i}: perplexity {perplexity} unreachable (got {achieved})"
            )));
        }
    }
    Ok(p)
}

fn joint_probabilities(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / denom).max(MIN_PROB);
            }
        }
    }
    p
}

/// Student-t kernel values and their sum.
fn student_kernel(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut sum = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    sum
}

fn kl_divergence(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / sum).max(MIN_PROB);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions.
pub fn tsne_embed(features: &Matrix, params: &TsneParams, rng: &mut RngStream) -> Result<TsneResult> {
    let n = features.rows();
    if !(params.perplexity > 1.0) {
        return Err(Error::Parameter(format!(
            "perplexity must exceed 1, got {}",
            params.perplexity
        )));
    }
    if (n as f64) < 3.0 * params.perplexity {
        return Err(Error::Parameter(format!(
            "perplexity {} needs at least {} rows, got {n}",
            params.perplexity,
            (3.0 * params.perplexity).ceil()
        )));
    }
    let dist = squared_distances(features);
    let cond = calibrate(&dist, n, params.perplexity)?;
    let p = joint_probabilities(&cond, n);

    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-2 * rng.normal(), 1e-2 * rng.normal()])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];

    let sum = student_kernel(&y, &mut num);
    let initial_kl = kl_divergence(&p, &num, sum, n);

    let learning_rate = params
        .learning_rate
        .unwrap_or_else(|| (n as f64 / (4.0 * params.early_exaggeration)).max(50.0));
    let early_iters = (params.iterations as f64 * params.early_fraction).round() as usize;
    for iter in 0..params.iterations {
        let (exaggeration, momentum) = if iter < early_iters {
            (params.early_exaggeration, params.initial_momentum)
        } else {
            (1.0, params.final_momentum)
        };
        let sum = student_kernel(&y, &mut num);
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = (exaggeration * p[i * n + j] - w / sum) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let g = 4.0 * grad[d];
                gains[i][d] = if (g > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                velocity[i][d] = momentum * velocity[i][d] - learning_rate * gains[i][d] * g;
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0, 0.0], |m, yi| [m[0] + yi[0], m[1] + yi[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }

    let sum = student_kernel(&y, &mut num);
    let final_kl = kl_divergence(&p, &num, sum, n);
    let embedding = Matrix::from_fn(n, 2, |i, d| y[i][d]);
    if !embedding.all_finite() {
        return Err(Error::Parameter("t-SNE diverged; lower the learning rate".into()));
    }
    Ok(TsneResult {
        embedding,
        initial_kl,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters(seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..10 {
                let offset = if c == 0 { -10.0 } else { 10.0 };
                rows.push((0..5).map(|_| offset + rng.normal()).collect());
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn knn_purity(emb: &Matrix, labels: &[usize], k: usize) -> f64 {
        let n = emb.rows();
        let mut hits = 0;
        for i in 0..n {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = emb.get(i, 0) - emb.get(j, 0);
                    let dy = emb.get(i, 1) - emb.get(j, 1);
                    (dx * dx + dy * dy, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            hits += d[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
        }
        hits as f64 / (n * k) as f64
    }

    #[test]
    fn separated_clusters_stay_separated() {
        for seed in 0..20 {
            let (x, labels) = two_clusters(seed);
            let params = TsneParams::default().with_perplexity(5.0).with_iterations(500);
            let mut rng = RngStream::new(100 + seed);
            let res = tsne_embed(&x, &params, &mut rng).unwrap();
            assert_eq!(res.embedding.shape(), (20, 2));
            assert!(res.final_kl < res.initial_kl, "seed {seed}");
            let purity = knn_purity(&res.embedding, &labels, 5);
            assert!(purity >= 0.9, "seed {seed}: purity {purity}");
        }
    }

    #[test]
    fn calibration_hits_target_perplexity() {
        let (x, _) = two_clusters(3);
        let dist = squared_distances(&x);
        let cond = calibrate(&dist, 20, 5.0).unwrap();
        for i in 0..20 {
            let h: f64 = cond[i * 20..(i + 1) * 20]
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            assert!((h.exp() - 5.0).abs() < 1e-4);
        }
    }

    #[test]
    fn identical_rows_are_rejected() {
        let x = Matrix::filled(30, 4, 1.5);
        let mut rng = RngStream::new(0);
        let params = TsneParams::default().with_perplexity(5.0);
        assert!(matches!(tsne_embed(&x, &params, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn perplexity_bounds() {
        let (x, _) = two_clusters(1);
        let mut rng = RngStream::new(0);
        let too_big = TsneParams::default().with_perplexity(10.0);
        assert!(matches!(tsne_embed(&x, &too_big, &mut rng), Err(Error::Parameter(_))));
        let too_small = TsneParams::default().with_perplexity(1.0);
        assert!(matches!(tsne_embed(&x, &too_small, &mut rng), Err(Error::Parameter(_))));
    }
}
