use super::{Array, Tape, Tensor};
use crate::error::Result;

/// Step used by [`finite_difference_check`].
pub const FD_STEP: f64 = 1e-5;

/// Largest error between the tape gradient of the scalar `f(inputs)` and a
/// central difference, relative to `max(|numeric|, 1)`.
pub fn finite_difference_check(
    inputs: &[Array],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let tape = Tape::new();
    let ts: Vec<Tensor> = inputs.iter().map(|a| tape.param(a)).collect();
    let loss = f(&ts)?;
    let g = tape.backward(&loss)?;
    let analytic: Vec<Array> = ts.iter().map(|t| g.wrt(t)).collect();

    let eval = |xs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let ts: Vec<Tensor> = xs.iter().map(|a| tape.constant(a.clone())).collect();
        Ok(f(&ts)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut shifted = inputs.to_vec();
    for (i, a) in inputs.iter().enumerate() {
        for k in 0..a.len() {
            let x = a.data()[k];
            shifted[i].data_mut()[k] = x + FD_STEP;
            let up = eval(&shifted)?;
            shifted[i].data_mut()[k] = x - FD_STEP;
            let down = eval(&shifted)?;
            shifted[i].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[i].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    Ok(worst)
}
