use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar loss with its gradient w.r.t. the model outputs.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of `label` under `softmax(logits)`.
pub fn cross_entropy_single(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean softmax cross-entropy over a `[N, C]` batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    let n = logits.batch();
    if logits.shape().len() != 2 || labels.len() != n || n == 0 {
        return Err(Error::contract(format!(
            "cross-entropy needs [N, C] logits and N labels; got {:?} and {}",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        if label >= classes {
            return Err(Error::contract(format!("label {label} out of range for {classes} classes")));
        }
        value += cross_entropy_single(row, label);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (gj, p) in g.iter_mut().zip(softmax(row)) {
            *gj = p / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok(Loss {
        value: value / n as f64,
        grad,
    })
}

/// Mean of squared elementwise differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(mse_with_grad(a, b)?.0)
}

/// `mse(a, b)` and its gradient w.r.t. `a` (the gradient w.r.t. `b` is the negation).
pub fn mse_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "mse needs equal, non-empty shapes; got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let value = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let grad = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect();
    Ok((value, grad))
}
