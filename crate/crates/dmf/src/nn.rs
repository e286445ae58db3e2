//! Layer helpers: registration of named parameters and graph composition.
//!
//! Parameters live in a [`ParamSet`] under `{prefix}.{slot}` names; the
//! apply functions bind them by name (bindings are cached per graph, so a
//! prefix used at every timestep still produces one node per tensor).
//!
//! The GRU follows the update-as-keep convention:
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! c  = tanh(x Wh + (r * h) Uh + bh)
//! h' = z * h + (1 - z) * c
//! ```
//!
//! so a saturated update gate (z -> 1) preserves the previous state.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Registers `{prefix}.w` (in x out, Glorot) and `{prefix}.b` (out, zeros).
pub fn register_linear<P: Scalar>(
    params: &mut ParamSet<P>,
    prefix: &str,
    inp: usize,
    out: usize,
    rng: &mut Rng,
) {
    params.insert(
        format!("{prefix}.w"),
        Tensor::glorot_uniform(vec![inp, out], rng),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![out]));
}

/// x (b x in) -> x W + b.
pub fn linear<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(params, &format!("{prefix}.w"));
    let b = g.param(params, &format!("{prefix}.b"));
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Registers the nine GRU tensors under `{prefix}.{wz,uz,bz,wr,ur,br,wh,uh,bh}`.
pub fn register_gru<P: Scalar>(
    params: &mut ParamSet<P>,
    prefix: &str,
    inp: usize,
    hidden: usize,
    rng: &mut Rng,
) {
    for gate in ["z", "r", "h"] {
        params.insert(
            format!("{prefix}.w{gate}"),
            Tensor::glorot_uniform(vec![inp, hidden], rng),
        );
        params.insert(
            format!("{prefix}.u{gate}"),
            Tensor::glorot_uniform(vec![hidden, hidden], rng),
        );
        params.insert(format!("{prefix}.b{gate}"), Tensor::zeros(vec![hidden]));
    }
}

fn gru_gate<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    prefix: &str,
    gate: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let w = g.param(params, &format!("{prefix}.w{gate}"));
    let u = g.param(params, &format!("{prefix}.u{gate}"));
    let b = g.param(params, &format!("{prefix}.b{gate}"));
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b)
}

/// One GRU step: x (b x in), h (b x hidden) -> next hidden.
pub fn gru_step<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    prefix: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let z_pre = gru_gate(g, params, prefix, "z", x, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gru_gate(g, params, prefix, "r", x, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let c_pre = gru_gate(g, params, prefix, "h", x, rh)?;
    let c = g.tanh(c_pre);
    let keep = g.mul(z, h)?;
    let zc = g.affine(z, -1.0, 1.0);
    let take = g.mul(zc, c)?;
    g.add(keep, take)
}

/// GRU step where rows with mask 0 keep their previous state. `mask` is a
/// (b x 1) column of 0/1 leaf values; padded steps pass 0.
pub fn gru_step_masked<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    prefix: &str,
    x: NodeId,
    h: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let advanced = gru_step(g, params, prefix, x, h)?;
    let on = g.mul_col(advanced, mask)?;
    let inv = g.affine(mask, -1.0, 1.0);
    let off = g.mul_col(h, inv)?;
    g.add(on, off)
}

/// Registers `{prefix}.k` (out x in x kh x kw, Glorot) and `{prefix}.b`.
pub fn register_conv<P: Scalar>(
    params: &mut ParamSet<P>,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    rng: &mut Rng,
) {
    params.insert(
        format!("{prefix}.k"),
        Tensor::glorot_uniform(vec![out_ch, in_ch, kh, kw], rng),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![out_ch]));
}

/// Convolution plus channel bias (no activation).
pub fn conv_layer<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    prefix: &str,
    x: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let k = g.param(params, &format!("{prefix}.k"));
    let b = g.param(params, &format!("{prefix}.b"));
    let y = g.conv2d(x, k, stride, padding)?;
    g.add_chan_bias(y, b)
}
