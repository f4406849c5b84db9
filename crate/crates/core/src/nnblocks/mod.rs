//! Desk-scale numeric versions of the detector's architectural pieces:
//! the transformer encoder block used in the prediction heads, CBAM, the
//! four-scale anchor decode, a finite-difference gradient checker and the
//! cosine learning-rate schedule.
//!
//! Everything runs in `f64` on `ndarray` containers. Each differentiable
//! block has a hand-written backward pass that [`gradcheck`] verifies.

pub mod cbam;
pub mod encoder;
pub mod gradcheck;
pub mod head;
pub mod schedule;

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::io::archive::Archive;

pub use cbam::{cbam_forward, CbamParams};
pub use encoder::{multi_head_attention, transformer_encoder_forward, EncoderParams, NormOrder};
pub use gradcheck::{grad_check, GradCheckReport};
pub use head::{default_heads, yolo_head_decode, HeadSpec};
pub use schedule::cosine_lr;

/// Dense row-major array with shape metadata.
pub type Tensor = ArrayD<f64>;

/// Walks every trainable array of a parameter container in a fixed order.
pub trait NamedParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        Ok(())
    }

    /// Append every array to `archive` under `prefix.name`.
    fn write_to(&self, archive: &mut Archive, prefix: &str) {
        self.visit(&mut |name, shape, v| {
            let t = Tensor::from_shape_vec(shape.to_vec(), v.to_vec())
                .expect("consistent parameter shape");
            archive.insert(format!("{prefix}.{name}"), t);
        });
    }

    /// Fill every array from `archive`; shapes must match exactly.
    fn read_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, shape, v| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match archive.get(&key) {
                Some(t) if t.shape() == shape => {
                    v.iter_mut().zip(t.iter()).for_each(|(d, s)| *d = *s);
                }
                Some(t) => {
                    err = Some(Error::shape(format!(
                        "{key}: expected {shape:?}, got {:?}",
                        t.shape()
                    )));
                }
                None => err = Some(Error::Format(format!("archive is missing '{key}'"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// A block whose parameters and input can be checked against finite differences.
pub trait Differentiable: NamedParams + Clone {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    /// Gradients of `sum(grad_out * forward(input))` with respect to the
    /// input and to [`NamedParams::flat_params`].
    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)>;
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn visit_arr1(name: &str, a: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_arr2(name: &str, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_arr1_mut(
    name: &str,
    a: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit_arr2_mut(
    name: &str,
    a: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn col_sum(a: &Array2<f64>) -> Array1<f64> {
    a.sum_axis(Axis(0))
}

pub(crate) fn check_finite(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}
