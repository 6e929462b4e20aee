//! Click encoding: a post-norm Transformer decoder block in which click
//! embeddings attend to the dense tokens (cross-attention), then to each
//! other (self-attention), then pass through a feed-forward network. Each
//! sub-layer has a residual connection followed by layer normalization.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(crate) fn add_params(store: &mut ParamStore, prefix: &str, m: usize, ffn: usize, rng: &mut Rng) -> Result<()> {
    for name in ["wq", "wk", "wv", "self.wq", "self.wk", "self.wv"] {
        store.add_glorot(format!("{prefix}.{name}"), &[m, m], m, m, rng)?;
    }
    store.add_glorot(format!("{prefix}.ffn.w1"), &[m, ffn], m, ffn, rng)?;
    store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[ffn]))?;
    store.add_glorot(format!("{prefix}.ffn.w2"), &[ffn, m], ffn, m, rng)?;
    store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[m]))?;
    for ln in ["ln1", "ln2", "ln3"] {
        store.add(format!("{prefix}.{ln}.gain"), Tensor::full(&[m], 1.0))?;
        store.add(format!("{prefix}.{ln}.bias"), Tensor::zeros(&[m]))?;
    }
    Ok(())
}

pub(crate) struct ClickEncoderVars {
    wq: Var,
    wk: Var,
    wv: Var,
    self_wq: Var,
    self_wk: Var,
    self_wv: Var,
    ffn: [Var; 4],
    norms: [(Var, Var); 3],
}

impl ClickEncoderVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |name: &str| -> Result<Var> { Ok(g.param(store, store.id(&format!("{prefix}.{name}"))?)) };
        Ok(Self {
            wq: p("wq")?,
            wk: p("wk")?,
            wv: p("wv")?,
            self_wq: p("self.wq")?,
            self_wk: p("self.wk")?,
            self_wv: p("self.wv")?,
            ffn: [p("ffn.w1")?, p("ffn.b1")?, p("ffn.w2")?, p("ffn.b2")?],
            norms: [
                (p("ln1.gain")?, p("ln1.bias")?),
                (p("ln2.gain")?, p("ln2.bias")?),
                (p("ln3.gain")?, p("ln3.bias")?),
            ],
        })
    }
}

pub(crate) struct ClickEncoded {
    pub clicks: Var,
    /// Cross-attention output before the residual connection.
    pub cross_out: Var,
    /// One `k×N` matrix per head.
    pub cross_attention: Vec<Var>,
    /// One `k×k` matrix per head.
    pub self_attention: Vec<Var>,
}

/// Scaled dot-product attention split over `heads` column groups.
pub(crate) fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let m = g.value(q).cols();
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh)?);
        attns.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, attns))
}

pub(crate) fn click_encode(
    g: &mut Graph,
    w: &ClickEncoderVars,
    clicks: Var,
    tokens: Var,
    heads: usize,
    eps: f64,
) -> Result<ClickEncoded> {
    let q = g.matmul(clicks, w.wq)?;
    let k = g.matmul(tokens, w.wk)?;
    let v = g.matmul(tokens, w.wv)?;
    let (cross_out, cross_attention) = multi_head(g, q, k, v, heads)?;
    let x = g.add(clicks, cross_out)?;
    let x = g.layer_norm(x, w.norms[0].0, w.norms[0].1, eps)?;

    let q = g.matmul(x, w.self_wq)?;
    let k = g.matmul(x, w.self_wk)?;
    let v = g.matmul(x, w.self_wv)?;
    let (self_out, self_attention) = multi_head(g, q, k, v, heads)?;
    let x2 = g.add(x, self_out)?;
    let x2 = g.layer_norm(x2, w.norms[1].0, w.norms[1].1, eps)?;

    let [w1, b1, w2, b2] = w.ffn;
    let h = g.matmul(x2, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    let x3 = g.add(x2, h)?;
    let out = g.layer_norm(x3, w.norms[2].0, w.norms[2].1, eps)?;

    Ok(ClickEncoded {
        clicks: out,
        cross_out,
        cross_attention,
        self_attention,
    })
}
