use crate::error::Result;
use crate::numerics::{Graph, Scalar, Var};

use super::{Binder, LN_EPS};

pub(crate) fn linear<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

pub(crate) fn layer_norm<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = b.var(g, &format!("{prefix}.g"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head scaled dot-product self-attention over all rows of `x`.
fn self_attention<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let cfg = b.config();
    let (d, heads) = (cfg.d_model, cfg.heads);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let qkv = linear(g, b, &format!("{prefix}.qkv"), x)?;
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let s = g.matmul_t(q, k, false, true)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        ctx.push(g.matmul(a, v)?);
    }
    let ctx = g.concat_cols(&ctx)?;
    linear(g, b, &format!("{prefix}.o"), ctx)
}

/// Pre-norm transformer block.
pub(crate) fn block<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(g, b, &format!("{prefix}.attn"), h)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x)?;
    let f = linear(g, b, &format!("{prefix}.ff1"), h)?;
    let f = g.gelu(f);
    let f = linear(g, b, &format!("{prefix}.ff2"), f)?;
    g.add(x, f)
}
