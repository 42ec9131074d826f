//! Central-difference gradient verification.

use super::{Record, Result, Tensor, TensorError};

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central differences at `x`.
///
/// Returns the max over coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Record, &Tensor) -> Result<Tensor>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");

    let mut rec = Record::new();
    let xb = rec.leaf(x);
    let loss = f(&mut rec, &xb)?;
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: loss.shape().to_vec(),
        });
    }
    let analytic = rec.backward(&loss)?.get_or_zeros(&xb);

    let eval = |data: &[f64]| -> Result<f64> {
        let mut rec = Record::disabled();
        let xt = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        Ok(f(&mut rec, &xt)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
