use super::Tensor;
use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-wise softmax over the last axis of `logits + mask`, where `mask`
/// broadcasts over leading axes (its shape is a suffix of the logits shape).
pub(crate) fn softmax_rows(logits: &[f64], mask: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    if n == 0 {
        return Ok(out);
    }
    for (r, (row, orow)) in logits.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let base = mask.map(|m| (r * n) % m.len());
        let val = |j: usize| match (mask, base) {
            (Some(m), Some(b)) => row[j] + m[b + j],
            _ => row[j],
        };
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            max = max.max(val(j));
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        for (j, o) in orow.iter_mut().enumerate() {
            let e = (val(j) - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Softmax over the last axis of `logits` with an additive mask (a log-space
/// term; `-inf` removes an entry). The mask shape must be a suffix of the
/// logits shape.
pub fn masked_softmax(logits: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    check_suffix("masked_softmax", logits.shape(), additive_mask.shape())?;
    let n = logits.last_dim();
    let data = softmax_rows(logits.data(), Some(additive_mask.data()), n)?;
    Tensor::new(logits.shape().to_vec(), data)
}

pub(crate) fn check_suffix(op: &'static str, full: &[usize], suffix: &[usize]) -> Result<()> {
    if suffix.len() > full.len() || full[full.len() - suffix.len()..] != *suffix {
        return Err(Error::dim(
            op,
            format!("{:?} does not broadcast to {:?}", suffix, full),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_for_zero_logits() {
        let w = masked_softmax(&Tensor::zeros([1, 4]), &Tensor::zeros([4])).unwrap();
        for &v in w.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn log_mask_suppresses_entry() {
        // softmax([0, ln 1e-8]) = [1, 1e-8] / (1 + 1e-8)
        let mask = Tensor::new([2], vec![0.0, (1e-8f64).ln()]).unwrap();
        let w = masked_softmax(&Tensor::zeros([2]), &mask).unwrap();
        assert!((w.data()[1] - 1e-8).abs() < 1e-9);
        assert!((w.data()[0] - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let mask = Tensor::full([3], f64::NEG_INFINITY);
        let err = masked_softmax(&Tensor::zeros([2, 3]), &mask).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn rows_sum_to_one_and_shift_invariant() {
        let logits = Tensor::new([3, 5], (0..15).map(|i| (i as f64 * 0.7).sin() * 4.0).collect())
            .unwrap();
        let mask = Tensor::new([5], vec![0.0, -1.0, -30.0, 2.0, f64::NEG_INFINITY]).unwrap();
        let w = masked_softmax(&logits, &mask).unwrap();
        for row in w.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[4], 0.0);
        }
        let shifted = logits.map(|v| v + 123.25);
        let w2 = masked_softmax(&shifted, &mask).unwrap();
        assert!(w.max_abs_diff(&w2) < 1e-12);
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        let m = Tensor::new([3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
        let x = Tensor::zeros([5, 7]);
        let y = Tensor::zeros([7, 2]);
        assert_eq!(x.matmul(&y).unwrap().shape(), &[5, 2]);
        assert!(x.matmul(&x).is_err());
    }

    #[test]
    fn transposed_kernels_agree_with_plain_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).cos()).collect(); // 3x4
        let c = mm(&a, &b, 2, 3, 4);
        // bᵀ laid out as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(mm_nt(&a, &bt, 2, 3, 4), c);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let c2 = mm_tn(&at, &b, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
