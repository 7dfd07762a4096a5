use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS, EOS, PAD};
use crate::diffcore::{Array, Graph, ParamStore, Scalar, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    /// Model width (C).
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when the stack is built.
    #[serde(default)]
    pub vocab: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 64,
            heads: 4,
            ffn: 256,
            max_len: 128,
            vocab: 0,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "{} heads do not divide LM width {}",
                self.heads, self.width
            )));
        }
        if self.layers < 4 {
            return Err(Error::Invalid(format!("LM needs at least 4 layers, got {}", self.layers)));
        }
        if self.lora_rank == 0 {
            return Err(Error::Invalid("LoRA rank must be positive".into()));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Positions `[start, end)` of the point-cloud tokens in a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PcTokenSpan {
    pub start: usize,
    pub end: usize,
}

impl PcTokenSpan {
    /// BOS at 0, then the prompt, then `queries` point-cloud tokens.
    pub fn after_prompt(prompt_len: usize, queries: usize) -> Self {
        let start = 1 + prompt_len;
        Self {
            start,
            end: start + queries,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Residual stream after every block plus the output logits.
pub struct HiddenStates {
    /// `layers[ℓ-1]` is `H^(ℓ)`, shape `T_len×C`.
    pub layers: Vec<Var>,
    pub logits: Var,
}

pub struct Assembled {
    pub seq: Var,
    pub span: PcTokenSpan,
    /// Next-token targets; `PAD` where the mask is off.
    pub targets: Vec<usize>,
    /// True only where the target is an answer token.
    pub mask: Vec<bool>,
}

fn layer_name(l: usize, s: &str) -> String {
    format!("lm.base.layers.{l}.{s}")
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &LmConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if cfg.vocab == 0 {
        return Err(Error::Invalid("LM vocabulary size not set".into()));
    }
    let c = cfg.width;
    let normal = |store: &mut ParamStore<T>, name: &str, shape: &[usize]| {
        let mut r = rng::stream(seed, name);
        store.insert(name, rng::normal(&mut r, shape, 0.1), true)
    };
    let weight = |store: &mut ParamStore<T>, name: String, out: usize, inp: usize| {
        let mut r = rng::stream(seed, &name);
        store.insert(name, rng::fan_in(&mut r, out, inp), true)
    };
    normal(store, "lm.base.tok_emb", &[cfg.vocab, c])?;
    normal(store, "lm.base.pos_emb", &[cfg.max_len, c])?;
    for l in 0..cfg.layers {
        for p in ["wq", "wk", "wv", "wo"] {
            weight(store, layer_name(l, &format!("attn.{p}")), c, c)?;
        }
        for p in ["bq", "bk", "bv", "bo"] {
            store.insert(layer_name(l, &format!("attn.{p}")), Array::zeros(&[c]), true)?;
        }
        weight(store, layer_name(l, "ff.w1"), cfg.ffn, c)?;
        store.insert(layer_name(l, "ff.b1"), Array::zeros(&[cfg.ffn]), true)?;
        weight(store, layer_name(l, "ff.w2"), c, cfg.ffn)?;
        store.insert(layer_name(l, "ff.b2"), Array::zeros(&[c]), true)?;
        for ln in ["ln1", "ln2"] {
            store.insert(layer_name(l, &format!("{ln}.g")), Array::filled(&[c], T::one()), true)?;
            store.insert(layer_name(l, &format!("{ln}.b")), Array::zeros(&[c]), true)?;
        }
    }
    store.insert("lm.base.ln_f.g", Array::filled(&[c], T::one()), true)?;
    store.insert("lm.base.ln_f.b", Array::zeros(&[c]), true)?;
    weight(store, "lm.base.unembed".into(), cfg.vocab, c)?;
    Ok(())
}

/// Adds query/value adapters to every layer: `A ~ N(0, 1/C_in)`, `B = 0`.
pub fn init_lora<T: Scalar>(store: &mut ParamStore<T>, cfg: &LmConfig, seed: u64) -> Result<()> {
    let (c, r) = (cfg.width, cfg.lora_rank);
    for l in 0..cfg.layers {
        for proj in ["q", "v"] {
            let a = format!("lm.lora.{l}.{proj}.a");
            let mut rs = rng::stream(seed, &a);
            store.insert(a, rng::normal(&mut rs, &[r, c], 1.0 / (c as f64).sqrt()), true)?;
            store.insert(format!("lm.lora.{l}.{proj}.b"), Array::zeros(&[c, r]), true)?;
        }
    }
    Ok(())
}

/// Low-rank adapter handles on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// `y = W·x + bias + (α/r)·B·(A·x)`.
pub fn lora_apply<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    adapter: Option<LoraAdapter>,
) -> Result<Var> {
    let base = g.affine(x, w, bias)?;
    let Some(ad) = adapter else { return Ok(base) };
    let down = g.affine(x, ad.a, None)?;
    let up = g.affine(down, ad.b, None)?;
    let delta = g.scale(up, T::of(ad.scale));
    g.add(base, delta)
}

fn adapter<T: Scalar>(g: &mut Graph<'_, T>, cfg: &LmConfig, l: usize, proj: &str) -> Result<Option<LoraAdapter>> {
    let a = format!("lm.lora.{l}.{proj}.a");
    if !g.store().contains(&a) {
        return Ok(None);
    }
    Ok(Some(LoraAdapter {
        a: g.param(&a)?,
        b: g.param(&format!("lm.lora.{l}.{proj}.b"))?,
        scale: cfg.lora_scale(),
    }))
}

/// `[BOS, prompt, T_pc, answer]` with token + position embeddings on the
/// text rows and the point-cloud rows spliced in unchanged.
pub fn assemble_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &LmConfig,
    prompt: &[usize],
    t_pc: Var,
    answer: &[usize],
) -> Result<Assembled> {
    let o = g.value(t_pc).rows();
    if g.value(t_pc).rank() != 2 || g.value(t_pc).cols() != cfg.width {
        return Err(Error::shape("assemble_sequence", g.value(t_pc).shape(), &[o, cfg.width]));
    }
    let span = PcTokenSpan::after_prompt(prompt.len(), o);
    let t_len = span.end + answer.len();
    if t_len > cfg.max_len {
        return Err(Error::SequenceOverflow {
            len: t_len,
            max: cfg.max_len,
        });
    }
    let tok = g.param("lm.base.tok_emb")?;
    let pos = g.param("lm.base.pos_emb")?;

    let mut prefix_ids = Vec::with_capacity(span.start);
    prefix_ids.push(BOS);
    prefix_ids.extend_from_slice(prompt);
    let positions: Vec<usize> = (0..span.start).collect();
    let te = g.gather_rows(tok, &prefix_ids)?;
    let pe = g.gather_rows(pos, &positions)?;
    let prefix = g.add(te, pe)?;
    let mut parts = vec![prefix, t_pc];
    if !answer.is_empty() {
        let positions: Vec<usize> = (span.end..t_len).collect();
        let te = g.gather_rows(tok, answer)?;
        let pe = g.gather_rows(pos, &positions)?;
        parts.push(g.add(te, pe)?);
    }
    let seq = g.concat_rows(&parts)?;

    let mut targets = vec![PAD; t_len];
    let mut mask = vec![false; t_len];
    for (i, &id) in answer.iter().enumerate() {
        let t = span.end + i - 1;
        targets[t] = id;
        mask[t] = true;
    }
    Ok(Assembled {
        seq,
        span,
        targets,
        mask,
    })
}

/// Causal pre-norm transformer. Adapters are used for every layer that has
/// them in the store.
pub fn llm_forward<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, cfg: &LmConfig) -> Result<HiddenStates> {
    let t_len = g.value(seq).rows();
    if t_len > cfg.max_len {
        return Err(Error::SequenceOverflow {
            len: t_len,
            max: cfg.max_len,
        });
    }
    if g.value(seq).cols() != cfg.width {
        return Err(Error::shape("llm_forward", g.value(seq).shape(), &[t_len, cfg.width]));
    }
    let mut x = seq;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut p = |s: &str| g.param(&layer_name(l, s));
        let (g1, b1, g2, b2) = (p("ln1.g")?, p("ln1.b")?, p("ln2.g")?, p("ln2.b")?);
        let (wq, bq, wk, bk) = (p("attn.wq")?, p("attn.bq")?, p("attn.wk")?, p("attn.bk")?);
        let (wv, bv, wo, bo) = (p("attn.wv")?, p("attn.bv")?, p("attn.wo")?, p("attn.bo")?);
        let (fw1, fb1, fw2, fb2) = (p("ff.w1")?, p("ff.b1")?, p("ff.w2")?, p("ff.b2")?);
        let lq = adapter(g, cfg, l, "q")?;
        let lv = adapter(g, cfg, l, "v")?;

        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let q = lora_apply(g, h, wq, Some(bq), lq)?;
        let k = g.affine(h, wk, Some(bk))?;
        let v = lora_apply(g, h, wv, Some(bv), lv)?;
        let a = g.attention(q, k, v, cfg.heads, true)?;
        let a = g.affine(a, wo, Some(bo))?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, g2, b2, LN_EPS)?;
        let f = g.affine(h, fw1, Some(fb1))?;
        let f = g.silu(f);
        let f = g.affine(f, fw2, Some(fb2))?;
        x = g.add(x, f)?;
        layers.push(x);
    }
    let (gf, bf) = (g.param("lm.base.ln_f.g")?, g.param("lm.base.ln_f.b")?);
    let h = g.layer_norm(x, gf, bf, LN_EPS)?;
    let un = g.param("lm.base.unembed")?;
    let logits = g.affine(h, un, None)?;
    Ok(HiddenStates { layers, logits })
}

/// Rows `[s, e)` of `H^(ℓ)`, with `ℓ` counted from 1.
pub fn extract_pc_tokens<T: Scalar>(
    g: &mut Graph<'_, T>,
    hidden: &HiddenStates,
    layer: usize,
    span: PcTokenSpan,
) -> Result<Var> {
    let max = hidden.layers.len();
    if layer == 0 || layer > max {
        return Err(Error::LayerOutOfRange { layer, max });
    }
    g.slice_rows(hidden.layers[layer - 1], span.start, span.end)
}

/// Cross entropy over answer positions only.
pub fn ntp_loss<T: Scalar>(g: &mut Graph<'_, T>, hidden: &HiddenStates, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(hidden.logits, targets, mask)
}

/// Argmax decoding (ties to the lowest id) until EOS, `max_new` tokens or
/// the context limit. Returns generated ids without EOS.
pub fn greedy_decode<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &LmConfig,
    prompt: &[usize],
    t_pc: &Array<T>,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let base_len = 1 + prompt.len() + t_pc.rows();
    while out.len() < max_new && base_len + out.len() < cfg.max_len {
        let mut g = Graph::new(store);
        let pc = g.constant(t_pc.clone());
        let asm = assemble_sequence(&mut g, cfg, prompt, pc, &out)?;
        let hs = llm_forward(&mut g, asm.seq, cfg)?;
        let logits = g.value(hs.logits);
        let last = logits.row(logits.rows() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

pub fn decode_text<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &LmConfig,
    vocab: &Vocab,
    prompt: &[usize],
    t_pc: &Array<T>,
    max_new: usize,
) -> Result<String> {
    Ok(vocab.detokenize(&greedy_decode(store, cfg, prompt, t_pc, max_new)?))
}
