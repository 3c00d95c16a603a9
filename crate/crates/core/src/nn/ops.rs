//! Eager single-op entry points over the graph kernels.

use super::graph::Graph;
use super::model::Mode;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lift a `[L, C]` matrix to `[1, L, C]`; 3-d input passes through.
fn batched<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.shape().len() {
        2 => Ok((x.clone().reshape(vec![1, x.shape()[0], x.shape()[1]])?, true)),
        3 => Ok((x.clone(), false)),
        _ => Err(Error::shape("conv1d", "[L, C] or [B, L, C]", format!("{:?}", x.shape()))),
    }
}

/// Stride-1 cross-correlation with `pad` zeros on both ends. `x` is
/// `[L, C_in]` or `[B, L, C_in]`, `w` is `[C_out, C_in, K]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (xb, lifted) = batched(x)?;
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.constant(xb), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1d(xv, wv, bv, pad)?;
    let out = g.value(y).clone();
    if lifted {
        let s = out.shape().to_vec();
        out.reshape(vec![s[1], s[2]])
    } else {
        Ok(out)
    }
}

/// Per-channel batch norm over all leading axes. Train mode normalizes with
/// batch statistics and folds them into the running buffers with
/// `momentum`; eval mode reads the buffers.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (xv, sv, hv) = (g.constant(x.clone()), g.constant(scale.clone()), g.constant(shift.clone()));
    let y = match mode {
        Mode::Train => {
            let (y, st) = g.batch_norm_train(xv, sv, hv, T::lit(eps))?;
            if running_mean.len() != st.mean.len() || running_var.len() != st.var.len() {
                return Err(Error::shape("batch_norm", st.mean.len(), running_mean.len()));
            }
            let (m, keep) = (T::lit(momentum), T::lit(1.0 - momentum));
            for (r, s) in running_mean.iter_mut().zip(&st.mean) {
                *r = keep * *r + m * *s;
            }
            for (r, s) in running_var.iter_mut().zip(&st.var) {
                *r = keep * *r + m * *s;
            }
            y
        }
        Mode::Eval => g.batch_norm_eval(xv, sv, hv, running_mean, running_var, T::lit(eps))?,
    };
    Ok(g.value(y).clone())
}

/// One GRU step. `x` is `[I]` or `[B, I]`, `h` matches with `H`.
pub fn gru_cell<T: Scalar>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
) -> Result<Tensor<T>> {
    let lift = x.shape().len() == 1;
    let (x, h) = if lift {
        (
            x.clone().reshape(vec![1, x.len()])?,
            h.clone().reshape(vec![1, h.len()])?,
        )
    } else {
        (x.clone(), h.clone())
    };
    let mut g = Graph::inference();
    let vars = [x, h, w_ih.clone(), w_hh.clone(), b_ih.clone(), b_hh.clone()].map(|t| g.constant(t));
    let y = g.gru_cell(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
    let out = g.value(y).clone();
    if lift {
        let n = out.len();
        out.reshape(vec![n])
    } else {
        Ok(out)
    }
}
