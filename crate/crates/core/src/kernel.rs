use crate::error::{check_dim, Error, Result};

/// Gaussian kernel `K(a, b) = exp(-‖a - b‖² / (2σ))`. The bandwidth `σ`
/// enters unsquared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    bandwidth: f64,
}

impl RbfKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::Argument(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    #[inline]
    pub(crate) fn from_sq_dist(&self, sq: f64) -> f64 {
        (-sq / (2.0 * self.bandwidth)).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dim(a.len(), b.len())?;
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.from_sq_dist(sq))
    }

    /// Gradient in the first argument, `-(a - b)/σ · K(a, b)`.
    pub fn grad1(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let k = self.eval(a, b)?;
        Ok(a.iter()
            .zip(b)
            .map(|(x, y)| -(x - y) / self.bandwidth * k)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        let k = RbfKernel::new(0.5).unwrap();
        assert_eq!(k.eval(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-16);
        let k1 = RbfKernel::new(1.0).unwrap();
        let g = k1.grad1(&[1.0], &[0.0]).unwrap();
        assert!((g[0] + (-0.5f64).exp()).abs() < 1e-16);
        assert_eq!(k1.grad1(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RbfKernel::new(0.0).is_err());
        assert!(RbfKernel::new(f64::NAN).is_err());
        let k = RbfKernel::new(1.0).unwrap();
        assert!(matches!(k.eval(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(k.grad1(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..8).prop_flat_map(|d| {
            (
                prop::collection::vec(-3.0..3.0f64, d),
                prop::collection::vec(-3.0..3.0f64, d),
                0.05..5.0f64,
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_antisymmetric_gradient((a, b, s) in pair()) {
            let k = RbfKernel::new(s).unwrap();
            let kab = k.eval(&a, &b).unwrap();
            prop_assert_eq!(kab, k.eval(&b, &a).unwrap());
            prop_assert!(kab > 0.0 && kab <= 1.0);
            let gab = k.grad1(&a, &b).unwrap();
            let gba = k.grad1(&b, &a).unwrap();
            for (x, y) in gab.iter().zip(&gba) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
