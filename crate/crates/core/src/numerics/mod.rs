//! Dense tensors, a handful of kernels and reverse-mode differentiation.
//!
//! Everything is `f64` so that analytic gradients can be checked against
//! central finite differences. Non-finite values are reported as errors by
//! every graph op rather than propagated.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use graph::{AttnMask, Graph, Var};
pub use params::{Gradient, ParamSet};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let mut out = x.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("log_softmax input"));
    }
    let mut out = x.to_vec();
    kernels::log_softmax_in_place(&mut out);
    Tensor::new(vec![out.len()], out.clone())?.check_finite("log_softmax")?;
    Ok(out)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm input"));
    }
    let mut g = Graph::constant();
    let xv = g.input(Tensor::matrix(1, x.len(), x.to_vec())?)?;
    let gv = g.input(Tensor::matrix(1, gain.len(), gain.to_vec())?)?;
    let bv = g.input(Tensor::matrix(1, bias.len(), bias.to_vec())?)?;
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).data().to_vec())
}

/// Valid strided convolution of a `T × D` sequence; see [`Graph::conv1d`] for the kernel layout.
pub fn conv1d(seq: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, width: usize, stride: usize) -> Result<Tensor> {
    let mut g = Graph::constant();
    let x = g.input(seq.clone())?;
    let w = g.input(kernel.clone())?;
    let b = bias.map(|b| g.input(b.clone())).transpose()?;
    let y = g.conv1d(x, w, b, width, stride)?;
    Ok(g.value(y).clone())
}

/// Output length of a valid strided convolution.
pub fn conv_out_len(len: usize, width: usize, stride: usize) -> Option<usize> {
    (len >= width && stride > 0 && width > 0).then(|| (len - width) / stride + 1)
}

/// Projection weights for [`multi_head_attention`]. Weights are `dim × dim`, biases `1 × dim`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    weights: &AttentionWeights,
    n_heads: usize,
    mask: &AttnMask,
) -> Result<Tensor> {
    let mut g = Graph::constant();
    let x = g.input(queries.clone())?;
    let k_in = g.input(keys.clone())?;
    let v_in = g.input(values.clone())?;
    let lin = |g: &mut Graph, x: Var, w: &Tensor, b: &Tensor| -> Result<Var> {
        let w = g.input(w.clone())?;
        let b = g.input(b.clone())?;
        g.linear(x, w, Some(b))
    };
    let q = lin(&mut g, x, &weights.wq, &weights.bq)?;
    let k = lin(&mut g, k_in, &weights.wk, &weights.bk)?;
    let v = lin(&mut g, v_in, &weights.wv, &weights.bv)?;
    let a = g.attention(q, k, v, n_heads, mask)?;
    let o = lin(&mut g, a, &weights.wo, &weights.bo)?;
    Ok(g.value(o).clone())
}

#[cfg(test)]
mod tests;
