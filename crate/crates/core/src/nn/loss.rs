use super::NnError;
use crate::linalg::Matrix;

/// Numerically stable `log softmax` of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Mean categorical cross entropy and its gradient `(softmax − onehot)/batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), NnError> {
    let k = logits.cols();
    if k == 0 {
        return Err(NnError::Input("no classes".into()));
    }
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(NnError::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Input(format!("label {bad} outside [0, {k})")));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        total -= ls[y];
        let g = grad.row_mut(i);
        for (gj, l) in g.iter_mut().zip(&ls) {
            *gj = l.exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// Cross entropy against the uniform distribution over `K` classes:
/// `−mean Σ_k (1/K)·log softmax_k`. Its minimum `ln K` is reached exactly
/// when every row is constant.
pub fn uniform_cross_entropy(logits: &Matrix) -> Result<(f64, Matrix), NnError> {
    let k = logits.cols();
    if k < 2 {
        return Err(NnError::Input(format!("uniform cross entropy needs K >= 2, got {k}")));
    }
    if logits.rows() == 0 {
        return Err(NnError::Input("empty batch".into()));
    }
    let n = logits.rows() as f64;
    let kf = k as f64;
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let ls = log_softmax_row(logits.row(i));
        total -= ls.iter().sum::<f64>() / kf;
        for (gj, l) in grad.row_mut(i).iter_mut().zip(&ls) {
            *gj = (l.exp() - 1.0 / kf) / n;
        }
    }
    Ok((total / n, grad))
}
