//! Central-difference checks for every differentiable op.

use super::{finite_difference_check, Array, Tape, Tensor};
use crate::error::Result;

/// Tolerance on the relative error of [`op_gradchecks`].
pub const OP_TOL: f64 = 1e-4;

struct Checks(Vec<(&'static str, f64)>);

impl Checks {
    fn check(&mut self, name: &'static str, inputs: &[Array], f: impl Fn(&[Tensor]) -> Tensor) -> Result<()> {
        let err = finite_difference_check(inputs, |t| Ok(f(t)))?;
        self.0.push((name, err));
        Ok(())
    }
}

fn m(r: usize, c: usize, data: &[f64]) -> Array {
    Array::matrix(r, c, data.to_vec()).unwrap()
}

fn weights(n: usize) -> Tensor {
    // fixed non-uniform weights so that sums do not hide sign errors
    let tape = Tape::new();
    tape.constant(Array::vector((0..n).map(|i| 0.3 + 0.17 * i as f64).collect()))
}

fn weighted_sum(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let n: usize = shape.iter().product();
    let w = t
        .tape()
        .constant(weights(n).value().reshape(shape).unwrap());
    t.mul(&w).unwrap().sum()
}

fn elementwise_binary(c: &mut Checks) -> Result<()> {
    let a = m(2, 3, &[0.3, -1.2, 2.0, 0.7, 1.1, -0.4]);
    let b = m(2, 3, &[1.5, 0.8, -0.6, 2.2, -1.7, 0.9]);
    c.check("add", &[a.clone(), b.clone()], |t| weighted_sum(&t[0].add(&t[1]).unwrap()))?;
    c.check("sub", &[a.clone(), b.clone()], |t| weighted_sum(&t[0].sub(&t[1]).unwrap()))?;
    c.check("mul", &[a.clone(), b.clone()], |t| weighted_sum(&t[0].mul(&t[1]).unwrap()))?;
    c.check("div", &[a.clone(), b.clone()], |t| weighted_sum(&t[0].div(&t[1]).unwrap()))?;
    c.check("minimum", &[a, b], |t| weighted_sum(&t[0].minimum(&t[1]).unwrap()))?;
    Ok(())
}

fn broadcasts(c: &mut Checks) -> Result<()> {
    let a = m(2, 3, &[0.3, -1.2, 2.0, 0.7, 1.1, -0.4]);
    let row = Array::vector(vec![0.5, -0.25, 1.5]);
    let col = Array::vector(vec![1.3, -0.7]);
    c.check("add_row", &[a.clone(), row], |t| weighted_sum(&t[0].add_row(&t[1]).unwrap()))?;
    c.check("mul_col", &[a.clone(), col.clone()], |t| weighted_sum(&t[0].mul_col(&t[1]).unwrap()))?;
    c.check("sub_col", &[a.clone(), col], |t| weighted_sum(&t[0].sub_col(&t[1]).unwrap()))?;
    c.check("mul_scalar_tensor", &[a, Array::scalar(0.8)], |t| {
        weighted_sum(&t[0].mul_scalar_tensor(&t[1]).unwrap())
    })?;
    Ok(())
}

fn matmul(c: &mut Checks) -> Result<()> {
    let a = m(2, 3, &[0.3, -1.2, 2.0, 0.7, 1.1, -0.4]);
    let b = m(3, 2, &[1.5, 0.8, -0.6, 2.2, -1.7, 0.9]);
    c.check("matmul", &[a, b], |t| weighted_sum(&t[0].matmul(&t[1]).unwrap()))?;
    Ok(())
}

fn unary_ops(c: &mut Checks) -> Result<()> {
    let x = m(2, 3, &[0.3, -1.2, 2.0, 0.7, 1.1, -0.4]);
    let pos = m(2, 3, &[0.3, 1.2, 2.0, 0.7, 1.1, 0.4]);
    let unit = m(2, 3, &[0.3, 0.12, 0.9, 0.7, 0.51, 0.04]);
    c.check("scale", std::slice::from_ref(&x), |t| weighted_sum(&t[0].scale(-2.5)))?;
    c.check("add_scalar", std::slice::from_ref(&x), |t| weighted_sum(&t[0].add_scalar(3.0)))?;
    c.check("tanh", std::slice::from_ref(&x), |t| weighted_sum(&t[0].tanh()))?;
    c.check("relu", std::slice::from_ref(&x), |t| weighted_sum(&t[0].relu()))?;
    c.check("exp", std::slice::from_ref(&x), |t| weighted_sum(&t[0].exp()))?;
    c.check("softplus", std::slice::from_ref(&x), |t| weighted_sum(&t[0].softplus()))?;
    c.check("clamp", std::slice::from_ref(&x), |t| weighted_sum(&t[0].clamp(-1.0, 1.0)))?;
    c.check("normal_cdf", std::slice::from_ref(&x), |t| weighted_sum(&t[0].normal_cdf()))?;
    c.check("square", std::slice::from_ref(&x), |t| weighted_sum(&t[0].square()))?;
    c.check("log", std::slice::from_ref(&pos), |t| weighted_sum(&t[0].log()))?;
    c.check("sqrt", std::slice::from_ref(&pos), |t| weighted_sum(&t[0].sqrt()))?;
    c.check("recip", &[pos], |t| weighted_sum(&t[0].recip()))?;
    c.check("normal_icdf", &[unit], |t| weighted_sum(&t[0].normal_icdf()))?;
    Ok(())
}

fn normal_mass_and_truncated_quantile(c: &mut Checks) -> Result<()> {
    let lo = Array::vector(vec![-1.5, -0.2, 0.8, -4.0]);
    let hi = Array::vector(vec![0.5, 2.0, 3.1, -2.5]);
    c.check("normal_mass", &[lo.clone(), hi.clone()], |t| {
        weighted_sum(&t[0].normal_mass(&t[1]).unwrap())
    })?;
    let eps = [0.1, 0.5, 0.73, 0.9];
    c.check("truncated_quantile", &[lo, hi], |t| {
        weighted_sum(&t[0].truncated_quantile(&t[1], &eps).unwrap())
    })?;
    Ok(())
}

fn row_reductions(c: &mut Checks) -> Result<()> {
    let x = m(3, 4, &[
        0.3, -1.2, 2.0, 0.7, 1.1, -0.4, 0.0, 0.9, -2.0, 1.5, 0.25, -0.6,
    ]);
    c.check("softmax_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].softmax_rows()))?;
    c.check("log_softmax_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].log_softmax_rows()))?;
    c.check("log_sum_exp_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].log_sum_exp_rows()))?;
    c.check("sum_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].sum_rows()))?;
    c.check("mean_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].mean_rows()))?;
    c.check("min_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].min_rows()))?;
    c.check("mean", std::slice::from_ref(&x), |t| t[0].mean())?;
    c.check("layer_norm_rows", std::slice::from_ref(&x), |t| weighted_sum(&t[0].layer_norm_rows()))?;
    c.check("gather_cols", std::slice::from_ref(&x), |t| {
        weighted_sum(&t[0].gather_cols(&[1, 3, 0]).unwrap())
    })?;
    let mask = vec![
        true, false, true, true, true, true, false, true, false, true, true, true,
    ];
    c.check("masked_log_softmax_rows", &[x], |t| {
        let y = t[0].masked_log_softmax_rows(mask.clone()).unwrap();
        weighted_sum(&y.gather_cols(&[0, 1, 3]).unwrap())
    })?;
    Ok(())
}

fn column_plumbing(c: &mut Checks) -> Result<()> {
    let a = m(2, 2, &[0.3, -1.2, 2.0, 0.7]);
    let b = m(2, 3, &[1.5, 0.8, -0.6, 2.2, -1.7, 0.9]);
    c.check("concat_cols", &[a, b.clone()], |t| {
        weighted_sum(&t[0].concat_cols(&t[1]).unwrap().tanh())
    })?;
    c.check("slice_cols", std::slice::from_ref(&b), |t| weighted_sum(&t[0].slice_cols(1, 2).unwrap().exp()))?;
    c.check("reshape", &[b], |t| weighted_sum(&t[0].reshape(&[3, 2]).unwrap().exp()))?;
    Ok(())
}

fn composite_chain(c: &mut Checks) -> Result<()> {
    // a small two-layer network with a softmax cross-entropy head
    let x = m(2, 3, &[0.3, -1.2, 2.0, 0.7, 1.1, -0.4]);
    let w1 = m(3, 4, &[
        0.1, -0.3, 0.2, 0.5, -0.4, 0.25, 0.6, -0.1, 0.3, 0.05, -0.2, 0.45,
    ]);
    let b1 = Array::vector(vec![0.01, -0.02, 0.03, 0.0]);
    let w2 = m(4, 3, &[
        0.2, -0.1, 0.4, -0.3, 0.5, 0.1, 0.15, -0.25, 0.35, 0.05, 0.2, -0.45,
    ]);
    c.check("composite_mlp_cross_entropy", &[x, w1, b1, w2], |t| {
        let h = t[0].matmul(&t[1]).unwrap().add_row(&t[2]).unwrap().tanh();
        let logits = h.matmul(&t[3]).unwrap();
        logits
            .log_softmax_rows()
            .gather_cols(&[2, 0])
            .unwrap()
            .mean()
            .neg()
    })?;
    Ok(())
}

/// Relative gradient error of every differentiable op, plus one composition.
pub fn op_gradchecks() -> Result<Vec<(&'static str, f64)>> {
    let mut c = Checks(Vec::new());
    elementwise_binary(&mut c)?;
    broadcasts(&mut c)?;
    matmul(&mut c)?;
    unary_ops(&mut c)?;
    normal_mass_and_truncated_quantile(&mut c)?;
    row_reductions(&mut c)?;
    column_plumbing(&mut c)?;
    composite_chain(&mut c)?;
    Ok(c.0)
}
