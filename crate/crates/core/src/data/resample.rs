use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Resamples `T` snippets to `D` evenly spaced positions. Position `j`
/// (0-based) sits at `j (T-1) / (D-1)`; fractional positions linearly blend
/// the two bracketing rows.
pub fn resample_to_fixed(features: &Tensor, d: usize) -> Result<Tensor> {
    if d < 2 {
        return Err(Error::invalid(format!("target length {d} must be at least 2")));
    }
    let (t, cols) = (features.rows(), features.cols());
    if t == 0 {
        return Err(Error::invalid("cannot resample an empty video"));
    }
    let mut out = Vec::with_capacity(d * cols);
    for j in 0..d {
        // exact integer split keeps endpoints and T == D bit-identical
        let num = j * (t - 1);
        let den = d - 1;
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            out.extend_from_slice(features.row(lo));
        } else {
            let w = rem as f64 / den as f64;
            let (a, b) = (features.row(lo), features.row(lo + 1));
            out.extend(a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y));
        }
    }
    Tensor::new(vec![d, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_case() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let y = resample_to_fixed(&x, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_when_lengths_match() {
        let x = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.37).collect()).unwrap();
        assert_eq!(resample_to_fixed(&x, 4).unwrap(), x);
    }

    #[test]
    fn rejects_short_target() {
        let x = Tensor::new(vec![4, 1], vec![0.0; 4]).unwrap();
        assert!(resample_to_fixed(&x, 1).is_err());
    }

    #[test]
    fn single_snippet_repeats() {
        let x = Tensor::new(vec![1, 2], vec![5.0, -1.0]).unwrap();
        let y = resample_to_fixed(&x, 3).unwrap();
        assert_eq!(y.data(), &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
    }
}
