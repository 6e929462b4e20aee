//! Label assignment ("compare and copy").
//!
//! Every dense token queries the click embeddings; the attention weights
//! then mix the category embeddings of the clicks, and the result is blended
//! with the embedding of the token's automatic label:
//!
//! ```text
//! out[i] = α · Σ_j softmax_j(q_i · k_jᵀ / √m) · φ(c_j) + (1 − α) · φ(auto[i])
//! q = tokens · Wq,  k = clicks · Wk,  φ = one-hot → hidden (GELU) → m
//! ```
//!
//! There is no residual path from the input tokens and no feed-forward
//! block; the output is exactly the blend above.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(crate) fn add_params(
    store: &mut ParamStore,
    prefix: &str,
    m: usize,
    classes: usize,
    hidden: usize,
    label_copy: bool,
    rng: &mut Rng,
) -> Result<()> {
    store.add_glorot(format!("{prefix}.wq"), &[m, m], m, m, rng)?;
    store.add_glorot(format!("{prefix}.wk"), &[m, m], m, m, rng)?;
    if !label_copy {
        store.add_glorot(format!("{prefix}.wv"), &[m, m], m, m, rng)?;
    }
    store.add_glorot(format!("{prefix}.embed.w1"), &[classes, hidden], classes, hidden, rng)?;
    store.add(format!("{prefix}.embed.b1"), Tensor::zeros(&[hidden]))?;
    store.add_glorot(format!("{prefix}.embed.w2"), &[hidden, m], hidden, m, rng)?;
    store.add(format!("{prefix}.embed.b2"), Tensor::zeros(&[m]))?;
    store.add(format!("{prefix}.alpha"), Tensor::scalar(0.0))?;
    Ok(())
}

pub(crate) struct LabelAssignVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Option<Var>,
    pub embed: [Var; 4],
    pub alpha_logit: Var,
}

impl LabelAssignVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |name: &str| -> Result<Var> { Ok(g.param(store, store.id(&format!("{prefix}.{name}"))?)) };
        let wq = p("wq")?;
        let wk = p("wk")?;
        let embed = [p("embed.w1")?, p("embed.b1")?, p("embed.w2")?, p("embed.b2")?];
        let alpha_logit = p("alpha")?;
        let wv = store.find(&format!("{prefix}.wv")).map(|id| g.param(store, id));
        Ok(Self {
            wq,
            wk,
            wv,
            embed,
            alpha_logit,
        })
    }
}

/// Category embeddings for every class: `φ(I_C)`, shape `C×m`.
pub(crate) fn class_table(g: &mut Graph, w: &LabelAssignVars, classes: usize) -> Result<Var> {
    let eye = g.input(Tensor::identity(classes));
    let [w1, b1, w2, b2] = w.embed;
    let h = g.matmul(eye, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    g.add_row(h, b2)
}

pub(crate) struct Assigned {
    pub tokens: Var,
    /// `N×k` attention of tokens over clicks.
    pub attention: Var,
}

/// `keys` are the (encoded) click rows and `key_labels` their categories.
/// `alpha` is a single-element node in `[0, 1]`. With `label_copy == false`
/// the values are a linear projection of the keys instead of category
/// embeddings.
#[allow(clippy::too_many_arguments)]
pub(crate) fn label_assign(
    g: &mut Graph,
    w: &LabelAssignVars,
    tokens: Var,
    keys: Var,
    key_labels: &[usize],
    auto_labels: &[usize],
    classes: usize,
    alpha: Var,
    label_copy: bool,
) -> Result<Assigned> {
    let m = g.value(tokens).cols();
    let q = g.matmul(tokens, w.wq)?;
    let k = g.matmul(keys, w.wk)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (m as f64).sqrt());
    let attention = g.softmax_rows(scores);

    let table = class_table(g, w, classes)?;
    let values = match (label_copy, w.wv) {
        (false, Some(wv)) => g.matmul(keys, wv)?,
        _ => g.gather_rows(table, key_labels)?,
    };
    let copied = g.matmul(attention, values)?;
    let auto = g.gather_rows(table, auto_labels)?;

    let copied = g.scale_by(copied, alpha)?;
    let keep = g.one_minus(alpha);
    let auto = g.scale_by(auto, keep)?;
    let tokens = g.add(copied, auto)?;
    Ok(Assigned { tokens, attention })
}
