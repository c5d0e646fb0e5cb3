use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(logits: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(dim_err!(
            "cross_entropy: logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        ));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(dim_err!("cross_entropy: need at least 2 classes, got {k}"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing {smoothing} outside [0, 1)"
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {l} at index {i} out of range for {k} classes"
        )));
    }
    Ok((b, k))
}

fn target(label: usize, class: usize, k: usize, smoothing: f64) -> f64 {
    if class == label {
        1.0 - smoothing
    } else {
        smoothing / (k - 1) as f64
    }
}

/// Row-wise `log softmax` in f64.
fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Mean over the batch of `−Σ_k target_k · log softmax(logits)_k`, where
/// the target puts `1 − ε` on the true class and `ε / (K − 1)` on each other
/// class.
pub fn cross_entropy_smoothed<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<f64> {
    let (b, k) = check(logits, labels, smoothing)?;
    if b == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let logp = log_softmax_row(row);
        total -= (0..k).map(|c| target(label, c, k, smoothing) * logp[c]).sum::<f64>();
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok(loss)
}

/// `(softmax(logits) − target) / b`.
pub fn cross_entropy_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<Tensor<T>> {
    let (b, k) = check(logits, labels, smoothing)?;
    let mut out = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let logp = log_softmax_row(row);
        for c in 0..k {
            out.push(T::of((logp[c].exp() - target(label, c, k, smoothing)) / b as f64));
        }
    }
    Tensor::new([b, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_ln2() {
        let l = Tensor::from_f64([1, 2], &[0.3, 0.3]).unwrap();
        let v = cross_entropy_smoothed::<f64>(&l, &[1], 0.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_goes_to_zero() {
        let l = Tensor::from_f64([1, 3], &[50.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy_smoothed::<f64>(&l, &[0], 0.0).unwrap() < 1e-20);
    }

    #[test]
    fn half_smoothing_is_symmetric() {
        let l = Tensor::from_f64([1, 2], &[1.7, -0.4]).unwrap();
        let a = cross_entropy_smoothed::<f64>(&l, &[0], 0.5).unwrap();
        let b = cross_entropy_smoothed::<f64>(&l, &[1], 0.5).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn bad_labels_and_classes() {
        let l = Tensor::<f32>::zeros([2, 2]);
        assert!(cross_entropy_smoothed(&l, &[0, 2], 0.0).is_err());
        assert!(cross_entropy_smoothed(&Tensor::<f32>::zeros([1, 1]), &[0], 0.0).is_err());
        assert!(cross_entropy_smoothed(&l, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn grad_matches_differences() {
        let logits = Tensor::<f64>::from_f64([2, 3], &[0.2, -1.0, 0.7, 1.5, 0.1, -0.3]).unwrap();
        let labels = [2, 0];
        let g = cross_entropy_grad(&logits, &labels, 0.1).unwrap();
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = logits.clone();
            m.data_mut()[i] -= 1e-5;
            let fd = (cross_entropy_smoothed(&p, &labels, 0.1).unwrap()
                - cross_entropy_smoothed(&m, &labels, 0.1).unwrap())
                / 2e-5;
            assert!((fd - g.data()[i]).abs() < 1e-9);
        }
    }
}
