use super::network::{LossSpec, Network};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Outcome of a central finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// Parameter key and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Magnitudes below this are compared absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-7;

/// Compares [`Network::backward`] against `(L(p+ε) − L(p−ε)) / 2ε` for every
/// parameter that receives a gradient buffer.
pub fn gradient_check(net: &Network, batch: &Matrix, loss: &LossSpec<'_>, eps: f64) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, grads) = net.backward(batch, loss)?;
    let analytic: Vec<(String, Vec<f64>)> =
        grads.named().into_iter().map(|(k, g)| (k, g.to_vec())).collect();
    let mut probe = net.clone();
    let eval = |n: &Network| -> Result<f64> { Ok(loss.evaluate(&n.logits(batch)?)?.0) };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (key, g) in &analytic {
        for (i, &a) in g.iter().enumerate() {
            let original = param(&mut probe, key)?[i];
            param(&mut probe, key)?[i] = original + eps;
            let plus = eval(&probe)?;
            param(&mut probe, key)?[i] = original - eps;
            let minus = eval(&probe)?;
            param(&mut probe, key)?[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some((key.clone(), i));
            }
        }
    }
    Ok(report)
}

fn param<'a>(net: &'a mut Network, key: &str) -> Result<&'a mut [f64]> {
    net.named_params_mut()
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Parameter(format!("no parameter named {key}")))
}
