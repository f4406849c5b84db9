//! Central finite-difference verification of hand-written backward passes.

use ndarray::{Array1, Array2, Ix2};
use serde::Serialize;

use super::{check_finite, Differentiable, NamedParams, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Lower bound on the relative-error denominator, so gradients that are
/// zero on both sides compare by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub param_count: usize,
    pub input_count: usize,
    pub max_param_error: f64,
    pub max_input_error: f64,
    /// Name of the parameter array holding the worst entry, or `"input"`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn loss<D: Differentiable>(op: &D, input: &Tensor) -> Result<f64> {
    let out = op.forward(input)?;
    let s = out.sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(s)
}

/// Compares the analytic gradients of `sum(op(input))` with respect to
/// every parameter and every input entry against central differences.
pub fn grad_check<D: Differentiable>(op: &D, input: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    check_finite("gradient-check input", input.iter().copied())?;
    let out = op.forward(input)?;
    check_finite("forward output", out.iter().copied())?;
    let (grad_in, grad_params) = op.backward(input, &Tensor::ones(out.raw_dim()))?;
    check_finite(
        "analytic gradient",
        grad_in.iter().chain(grad_params.iter()).copied(),
    )?;
    if grad_in.shape() != input.shape() || grad_params.len() != op.param_count() {
        return Err(Error::shape(
            "backward returned gradients of the wrong size",
        ));
    }

    let mut names = Vec::new();
    op.visit(&mut |name, _, v| names.extend(std::iter::repeat_n(name.to_string(), v.len())));

    let base = op.flat_params();
    let mut probe = op.clone();
    let mut max_param_error = 0.0;
    let mut worst = String::new();
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        probe.set_flat_params(&flat)?;
        let up = loss(&probe, input)?;
        flat[i] = base[i] - eps;
        probe.set_flat_params(&flat)?;
        let down = loss(&probe, input)?;
        flat[i] = base[i];
        let e = relative_error(grad_params[i], (up - down) / (2.0 * eps));
        if e > max_param_error {
            max_param_error = e;
            worst = names[i].clone();
        }
    }

    let mut max_input_error = 0.0;
    let mut x = input.as_standard_layout().into_owned();
    let grad_in: Vec<f64> = grad_in.iter().copied().collect();
    for (i, &g) in grad_in.iter().enumerate() {
        let v0 = x.as_slice().expect("standard layout")[i];
        x.as_slice_mut().expect("standard layout")[i] = v0 + eps;
        let up = loss(op, &x)?;
        x.as_slice_mut().expect("standard layout")[i] = v0 - eps;
        let down = loss(op, &x)?;
        x.as_slice_mut().expect("standard layout")[i] = v0;
        let e = relative_error(g, (up - down) / (2.0 * eps));
        if e > max_input_error {
            max_input_error = e;
            if e > max_param_error {
                worst = "input".into();
            }
        }
    }

    Ok(GradCheckReport {
        eps,
        param_count: base.len(),
        input_count: input.len(),
        max_param_error,
        max_input_error,
        worst,
    })
}

/// `y = x W + b` over `[N, in]` rows; the reference case for the checker.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOp {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl NamedParams for LinearOp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        super::visit_arr2("weight", &self.weight, f);
        super::visit_arr1("bias", &self.bias, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        super::visit_arr2_mut("weight", &mut self.weight, f);
        super::visit_arr1_mut("bias", &mut self.bias, f);
    }
}

impl LinearOp {
    fn rows(&self, t: &Tensor) -> Result<Array2<f64>> {
        let x = t
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("linear op expects [N, in]"))?;
        if x.ncols() != self.weight.nrows() {
            return Err(Error::shape(format!(
                "linear op expects {} input features, got {}",
                self.weight.nrows(),
                x.ncols()
            )));
        }
        Ok(x.to_owned())
    }
}

impl Differentiable for LinearOp {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let x = self.rows(input)?;
        Ok((x.dot(&self.weight) + &self.bias).into_dyn())
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let x = self.rows(input)?;
        let g = grad_out
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("linear op gradient must be [N, out]"))?;
        let gw = x.t().dot(&g);
        let gb = super::col_sum(&g.to_owned());
        let mut grads = gw.iter().copied().collect::<Vec<_>>();
        grads.extend(gb.iter());
        Ok((g.dot(&self.weight.t()).into_dyn(), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnblocks::{CbamParams, EncoderParams};
    use ndarray::{Array3, IxDyn};

    #[test]
    fn linear_map_is_exact() {
        let op = LinearOp {
            weight: Array2::from_shape_fn((3, 2), |(i, j)| 0.3 * i as f64 - 0.7 * j as f64 + 0.1),
            bias: Array1::from(vec![0.5, -0.25]),
        };
        let x = Tensor::from_shape_fn(IxDyn(&[4, 3]), |i| {
            (i[0] as f64 - 1.5) * (i[1] as f64 + 0.5)
        });
        let r = grad_check(&op, &x, DEFAULT_EPS).unwrap();
        assert!(r.max_error() < 1e-9, "{r:?}");
    }

    #[test]
    fn encoder_and_cbam_pass() {
        let enc = EncoderParams::random(8, 2, 4, 11).unwrap();
        let x = Tensor::from_shape_fn(IxDyn(&[4, 8]), |i| ((i[0] * 8 + i[1]) as f64 * 0.7).sin());
        let r = grad_check(&enc, &x, DEFAULT_EPS).unwrap();
        assert!(r.max_error() < 1e-4, "{r:?}");

        let cbam = CbamParams::random(4, 2, 3, 5).unwrap();
        let f = Array3::from_shape_fn((4, 5, 5), |(c, y, x)| {
            ((c * 25 + y * 5 + x) as f64 * 1.3).cos()
        })
        .into_dyn();
        let r = grad_check(&cbam, &f, DEFAULT_EPS).unwrap();
        assert!(r.max_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn non_finite_input_reported() {
        let op = LinearOp {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let mut x = Tensor::zeros(IxDyn(&[1, 2]));
        x[[0, 1]] = f64::NAN;
        assert!(matches!(
            grad_check(&op, &x, DEFAULT_EPS),
            Err(Error::NonFinite(_))
        ));
    }
}
