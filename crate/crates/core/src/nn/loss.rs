use crate::error::{Error, Result};
use crate::numeric::Matrix;

fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    values.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy with the softmax restricted to `active` columns.
///
/// Columns outside `active` receive exactly zero gradient.
pub fn cross_entropy_masked(
    logits: &Matrix,
    labels: &[usize],
    active: &[usize],
) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if active.is_empty() {
        return Err(Error::Parameter("active class set is empty".into()));
    }
    if let Some(&bad) = active.iter().find(|&&c| c >= logits.cols()) {
        return Err(Error::Dimension(format!(
            "active class {bad} outside {} logit columns",
            logits.cols()
        )));
    }
    let batch = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut picked = Vec::with_capacity(active.len());
    for (i, &label) in labels.iter().enumerate() {
        let pos = active.iter().position(|&c| c == label).ok_or_else(|| {
            Error::Protocol(format!("label {label} is not in the active class set"))
        })?;
        let row = logits.row(i);
        picked.clear();
        picked.extend(active.iter().map(|&c| row[c]));
        let logp = log_softmax(&picked);
        loss -= logp[pos];
        let g = grad.row_mut(i);
        for (k, &c) in active.iter().enumerate() {
            let target = if k == pos { 1.0 } else { 0.0 };
            g[c] = (logp[k].exp() - target) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over rows.
pub fn distill_loss(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let batch = student.rows() as f64;
    let t2 = temperature * temperature;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut loss = 0.0;
    for i in 0..student.rows() {
        let ls = log_softmax(&student.row(i).iter().map(|v| v / temperature).collect::<Vec<_>>());
        let lt = log_softmax(&teacher.row(i).iter().map(|v| v / temperature).collect::<Vec<_>>());
        let g = grad.row_mut(i);
        for k in 0..ls.len() {
            let pt = lt[k].exp();
            loss += pt * (lt[k] - ls[k]);
            g[k] = temperature * (ls[k].exp() - pt) / batch;
        }
    }
    Ok((t2 * loss / batch, grad))
}
