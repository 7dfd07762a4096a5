//! Query-former: a bank of learnable queries cross-attends to projected
//! patch features. Its normalized output is both the source of the LM's
//! point-cloud tokens and the alignment target.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, ParamStore, Scalar, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    /// Number of queries (o).
    pub queries: usize,
    /// Query width (D1).
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    /// Hidden width of the modality projector; its activation is the
    /// `projector_mid` tap.
    pub proj_hidden: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            queries: 32,
            width: 64,
            heads: 4,
            blocks: 2,
            ffn: 128,
            proj_hidden: 64,
        }
    }
}

/// Which modality-projector activation to return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Final,
    Mid,
}

pub struct QFormerOutput {
    /// `o×D1` normalized query outputs.
    pub qbar: Var,
    /// Attention node of every block, for inspecting weights.
    pub attention: Vec<Var>,
}

pub struct ProjectorOutput {
    pub mid: Var,
    pub out: Var,
}

fn block_names(b: usize) -> impl Fn(&str) -> String {
    move |s| format!("qformer.{b}.{s}")
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &QFormerConfig, lm_width: usize, seed: u64) -> Result<()> {
    if cfg.queries == 0 {
        return Err(Error::Invalid("query bank needs at least one query".into()));
    }
    if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
        return Err(Error::Invalid(format!(
            "{} heads do not divide query width {}",
            cfg.heads, cfg.width
        )));
    }
    let d = cfg.width;
    let weight = |store: &mut ParamStore<T>, name: String, out: usize, inp: usize| {
        let mut r = rng::stream(seed, &name);
        store.insert(name, rng::fan_in(&mut r, out, inp), true)
    };
    let zeros = |store: &mut ParamStore<T>, name: String, n: usize| store.insert(name, Array::zeros(&[n]), true);
    let ones = |store: &mut ParamStore<T>, name: String, n: usize| store.insert(name, Array::filled(&[n], T::one()), true);

    let mut r = rng::stream(seed, "qformer.queries");
    store.insert("qformer.queries", rng::normal(&mut r, &[cfg.queries, d], 1.0), true)?;
    for b in 0..cfg.blocks {
        let n = block_names(b);
        for p in ["wq", "wk", "wv", "wo"] {
            weight(store, n(&format!("attn.{p}")), d, d)?;
        }
        for p in ["bq", "bk", "bv", "bo"] {
            zeros(store, n(&format!("attn.{p}")), d)?;
        }
        weight(store, n("ff.w1"), cfg.ffn, d)?;
        zeros(store, n("ff.b1"), cfg.ffn)?;
        weight(store, n("ff.w2"), d, cfg.ffn)?;
        zeros(store, n("ff.b2"), d)?;
        for ln in ["ln1", "ln2"] {
            ones(store, n(&format!("{ln}.g")), d)?;
            zeros(store, n(&format!("{ln}.b")), d)?;
        }
    }
    ones(store, "qformer.ln_f.g".into(), d)?;
    zeros(store, "qformer.ln_f.b".into(), d)?;

    weight(store, "proj.w1".into(), cfg.proj_hidden, d)?;
    zeros(store, "proj.b1".into(), cfg.proj_hidden)?;
    weight(store, "proj.w2".into(), lm_width, cfg.proj_hidden)?;
    zeros(store, "proj.b2".into(), lm_width)?;
    Ok(())
}

/// One block: multi-head attention of `queries` over `kv`, then
/// residual + norm, feed-forward, residual + norm. Returns the block output
/// and its attention node.
pub fn cross_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    queries: Var,
    kv: Var,
    block: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let n = block_names(block);
    let mut p = |s: &str| g.param(&n(s));
    let (wq, bq, wk, bk) = (p("attn.wq")?, p("attn.bq")?, p("attn.wk")?, p("attn.bk")?);
    let (wv, bv, wo, bo) = (p("attn.wv")?, p("attn.bv")?, p("attn.wo")?, p("attn.bo")?);
    let (g1, b1, g2, b2) = (p("ln1.g")?, p("ln1.b")?, p("ln2.g")?, p("ln2.b")?);
    let (fw1, fb1, fw2, fb2) = (p("ff.w1")?, p("ff.b1")?, p("ff.w2")?, p("ff.b2")?);

    if g.value(queries).cols() != g.value(kv).cols() {
        return Err(Error::shape("cross_attend", g.value(queries).shape(), g.value(kv).shape()));
    }
    let q = g.affine(queries, wq, Some(bq))?;
    let k = g.affine(kv, wk, Some(bk))?;
    let v = g.affine(kv, wv, Some(bv))?;
    let attn = g.attention(q, k, v, heads, false)?;
    let a = g.affine(attn, wo, Some(bo))?;
    let x = g.add(queries, a)?;
    let x = g.layer_norm(x, g1, b1, LN_EPS)?;
    let h = g.affine(x, fw1, Some(fb1))?;
    let h = g.silu(h);
    let h = g.affine(h, fw2, Some(fb2))?;
    let y = g.add(x, h)?;
    let y = g.layer_norm(y, g2, b2, LN_EPS)?;
    Ok((y, attn))
}

/// `Q̄ = f_QF(pc_feats, Q)`: all blocks over the query bank, then the final
/// normalization.
pub fn qformer_forward<T: Scalar>(g: &mut Graph<'_, T>, pc_feats: Var, cfg: &QFormerConfig) -> Result<QFormerOutput> {
    let mut x = g.param("qformer.queries")?;
    let mut attention = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (y, a) = cross_attend(g, x, pc_feats, b, cfg.heads)?;
        x = y;
        attention.push(a);
    }
    let (gf, bf) = (g.param("qformer.ln_f.g")?, g.param("qformer.ln_f.b")?);
    let qbar = g.layer_norm(x, gf, bf, LN_EPS)?;
    Ok(QFormerOutput { qbar, attention })
}

/// Modality projector D1 → hidden → C, exposing both activations.
pub fn modality_project_all<T: Scalar>(g: &mut Graph<'_, T>, qbar: Var) -> Result<ProjectorOutput> {
    let (w1, b1) = (g.param("proj.w1")?, g.param("proj.b1")?);
    let (w2, b2) = (g.param("proj.w2")?, g.param("proj.b2")?);
    let h = g.affine(qbar, w1, Some(b1))?;
    let mid = g.silu(h);
    let out = g.affine(mid, w2, Some(b2))?;
    Ok(ProjectorOutput { mid, out })
}

pub fn modality_project<T: Scalar>(g: &mut Graph<'_, T>, qbar: Var, tap: Tap) -> Result<Var> {
    let p = modality_project_all(g, qbar)?;
    Ok(match tap {
        Tap::Final => p.out,
        Tap::Mid => p.mid,
    })
}
