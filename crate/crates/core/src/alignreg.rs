//! Alignment regularization: a small projector from LM hidden width to the
//! target feature space, the alignment loss family and the total objective
//! `L_total = L_ntp + λ·L_align`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::lm::{extract_pc_tokens, HiddenStates, PcTokenSpan};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMetric {
    Cosine,
    L1,
    L2,
}

impl AlignMetric {
    pub fn name(self) -> &'static str {
        match self {
            AlignMetric::Cosine => "cosine",
            AlignMetric::L1 => "l1",
            AlignMetric::L2 => "l2",
        }
    }
}

impl fmt::Display for AlignMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(AlignMetric::Cosine),
            "l1" => Ok(AlignMetric::L1),
            "l2" => Ok(AlignMetric::L2),
            _ => Err(Error::Unknown {
                what: "alignment metric",
                name: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    /// Normalized query-former output.
    Qformer,
    /// Hidden activation of the modality projector.
    ProjectorMid,
    /// Modality projector output, i.e. the LM's point-cloud input tokens.
    ProjectorFinal,
}

impl AlignTarget {
    pub fn name(self) -> &'static str {
        match self {
            AlignTarget::Qformer => "qformer",
            AlignTarget::ProjectorMid => "projector_mid",
            AlignTarget::ProjectorFinal => "projector_final",
        }
    }
}

impl fmt::Display for AlignTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qformer" => Ok(AlignTarget::Qformer),
            "projector_mid" => Ok(AlignTarget::ProjectorMid),
            "projector_final" => Ok(AlignTarget::ProjectorFinal),
            _ => Err(Error::Unknown {
                what: "alignment target",
                name: s.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub lambda: f64,
    /// LM layer, counted from 1.
    pub layer: usize,
    pub metric: AlignMetric,
    pub target: AlignTarget,
    /// Joint alignment at several layers with one shared projector.
    #[serde(default)]
    pub layers_multi: Option<Vec<usize>>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            layer: 4,
            metric: AlignMetric::Cosine,
            target: AlignTarget::Qformer,
            layers_multi: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self, lm_layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for &l in &self.layers() {
            if l == 0 || l > lm_layers {
                return Err(Error::LayerOutOfRange { layer: l, max: lm_layers });
            }
        }
        if let Some(m) = &self.layers_multi {
            let mut s = m.clone();
            s.sort();
            s.dedup();
            if s.len() != m.len() || m.is_empty() {
                return Err(Error::Invalid(format!("alignment layers must be distinct and nonempty: {m:?}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        match &self.layers_multi {
            Some(m) => m.clone(),
            None => vec![self.layer],
        }
    }

    /// `4` or `3+4+5` for a joint set.
    pub fn layer_label(&self) -> String {
        self.layers()
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Number of affine layers (1..=4).
    pub depth: usize,
    /// Hidden width; `None` uses the LM width.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { depth: 3, hidden: None }
    }
}

/// Affine layers alternating with SiLU (depth `p` has `p-1` activations).
/// Lives only on the training path; `evaluations` counts forward calls.
#[derive(Clone, Debug)]
pub struct AlignmentProjector {
    pub depth: usize,
    pub hidden: usize,
    pub input: usize,
    pub output: usize,
    evals: Arc<AtomicU64>,
}

impl AlignmentProjector {
    pub fn new(cfg: &ProjectorConfig, input: usize, output: usize) -> Result<Self> {
        if !(1..=4).contains(&cfg.depth) {
            return Err(Error::Invalid(format!("projector depth must be 1..=4, got {}", cfg.depth)));
        }
        Ok(Self {
            depth: cfg.depth,
            hidden: cfg.hidden.unwrap_or(input),
            input,
            output,
            evals: Arc::new(AtomicU64::new(0)),
        })
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let inp = if i == 0 { self.input } else { self.hidden };
                let out = if i + 1 == self.depth { self.output } else { self.hidden };
                (out, inp)
            })
            .collect()
    }

    /// `U(±1/√fan_in)` weights, zero biases, all under `align.`.
    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for (i, (out, inp)) in self.layer_shapes().into_iter().enumerate() {
            let w = format!("align.w{}", i + 1);
            let mut r = rng::stream(seed, &w);
            store.insert(w, rng::fan_in(&mut r, out, inp), true)?;
            store.insert(format!("align.b{}", i + 1), Array::zeros(&[out]), true)?;
        }
        Ok(())
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        if g.value(tokens).cols() != self.input {
            return Err(Error::shape("align projector", g.value(tokens).shape(), &[self.input]));
        }
        let mut x = tokens;
        for i in 1..=self.depth {
            let w = g.param(&format!("align.w{i}"))?;
            let b = g.param(&format!("align.b{i}"))?;
            x = g.affine(x, w, Some(b))?;
            if i < self.depth {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Alignment loss against a detached target. Cosine: mean negative row
/// cosine; l1: mean absolute difference; l2: mean squared difference.
pub fn align_loss<T: Scalar>(g: &mut Graph<'_, T>, q_tilde: Var, target: Var, metric: AlignMetric) -> Result<Var> {
    if !g.is_detached(target) {
        return Err(Error::NotDetached);
    }
    if g.value(q_tilde).shape() != g.value(target).shape() {
        return Err(Error::shape("align_loss", g.value(q_tilde).shape(), g.value(target).shape()));
    }
    Ok(match metric {
        AlignMetric::Cosine => {
            let c = g.cosine_rows(q_tilde, target)?;
            let m = g.mean(c);
            g.scale(m, -T::one())
        }
        AlignMetric::L1 => {
            let d = g.sub(q_tilde, target)?;
            let a = g.abs(d);
            g.mean(a)
        }
        AlignMetric::L2 => {
            let d = g.sub(q_tilde, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
    })
}

/// `l_ntp + λ·l_align` on the graph.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, l_ntp: Var, l_align: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(l_align, T::of(lambda));
    g.add(l_ntp, weighted)
}

/// Scalar form of the objective, evaluated in the training precision.
pub fn total_value<T: Scalar>(l_ntp: T, l_align: T, lambda: f64) -> T {
    l_ntp + T::of(lambda) * l_align
}

/// Forward products an alignment target can be taken from.
#[derive(Clone, Copy, Debug)]
pub struct TargetTaps {
    pub qbar: Var,
    pub proj_mid: Var,
    pub proj_final: Var,
}

/// The requested target, always detached.
pub fn resolve_target<T: Scalar>(g: &mut Graph<'_, T>, taps: &TargetTaps, target: AlignTarget) -> Var {
    let v = match target {
        AlignTarget::Qformer => taps.qbar,
        AlignTarget::ProjectorMid => taps.proj_mid,
        AlignTarget::ProjectorFinal => taps.proj_final,
    };
    g.detach(v)
}

/// Output width the projector must produce for a target.
pub fn target_width(target: AlignTarget, qformer_width: usize, proj_hidden: usize, lm_width: usize) -> usize {
    match target {
        AlignTarget::Qformer => qformer_width,
        AlignTarget::ProjectorMid => proj_hidden,
        AlignTarget::ProjectorFinal => lm_width,
    }
}

/// Alignment terms for every configured layer through one shared
/// projector. Returns the mean and the per-layer losses.
pub fn alignment_terms<T: Scalar>(
    g: &mut Graph<'_, T>,
    hidden: &HiddenStates,
    span: PcTokenSpan,
    cfg: &AlignConfig,
    projector: &AlignmentProjector,
    target: Var,
) -> Result<(Var, Vec<Var>)> {
    let mut per_layer = Vec::new();
    for l in cfg.layers() {
        let tokens = extract_pc_tokens(g, hidden, l, span)?;
        let q_tilde = projector.project(g, tokens)?;
        per_layer.push(align_loss(g, q_tilde, target, cfg.metric)?);
    }
    let mean = if per_layer.len() == 1 {
        per_layer[0]
    } else {
        let mut acc = per_layer[0];
        for &v in &per_layer[1..] {
            acc = g.add(acc, v)?;
        }
        g.scale(acc, T::of(1.0 / per_layer.len() as f64))
    };
    Ok((mean, per_layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(q: Array<f64>, t: Array<f64>, metric: AlignMetric) -> Result<f64> {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let qv = g.leaf(q, true);
        let tv = g.constant(t);
        let l = align_loss(&mut g, qv, tv, metric)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn cosine_self_orthogonal_and_hand_case() {
        let a = Array::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert!((eval(a.clone(), a.clone(), AlignMetric::Cosine).unwrap() + 1.0).abs() < 1e-12);
        let scaled = a.map(|v| 3.7 * v);
        assert!((eval(scaled, a, AlignMetric::Cosine).unwrap() + 1.0).abs() < 1e-12);
        let o1 = Array::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let o2 = Array::from_rows(&[&[0.0, 5.0], &[-1.0, 0.0]]);
        assert_eq!(eval(o1, o2, AlignMetric::Cosine).unwrap(), 0.0);
        let q = Array::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let t = Array::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let want = -0.5 * (1.0 / 2f64.sqrt() + 1.0);
        assert!((eval(q, t, AlignMetric::Cosine).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn l1_l2_values() {
        let q = Array::from_rows(&[&[1.0, 2.0]]);
        let t = Array::from_rows(&[&[0.0, 4.0]]);
        assert_eq!(eval(q.clone(), t.clone(), AlignMetric::L1).unwrap(), 1.5);
        assert_eq!(eval(q, t, AlignMetric::L2).unwrap(), 2.5);
    }

    #[test]
    fn attached_target_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let q = g.leaf(Array::from_rows(&[&[1.0, 0.0]]), true);
        let t = g.leaf(Array::from_rows(&[&[1.0, 0.0]]), true);
        assert!(matches!(align_loss(&mut g, q, t, AlignMetric::Cosine), Err(Error::NotDetached)));
        let td = g.detach(t);
        assert!(align_loss(&mut g, q, td, AlignMetric::Cosine).is_ok());
    }

    #[test]
    fn zero_row_is_an_error_under_cosine() {
        let q = Array::from_rows(&[&[0.0, 0.0]]);
        let t = Array::from_rows(&[&[1.0, 0.0]]);
        assert!(matches!(eval(q, t, AlignMetric::Cosine), Err(Error::ZeroNorm { row: 0 })));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_value(2.0f64, -0.5, 0.1), 1.95);
        assert_eq!(total_value(2.0f64, 123.0, 0.0), 2.0);
        assert_eq!(total_value(2.0f64, 0.0, 1.0), 2.0);
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let a = g.constant(Array::scalar(2.0));
        let b = g.constant(Array::scalar(-0.5));
        let t = total_loss(&mut g, a, b, 0.1).unwrap();
        assert_eq!(g.value(t).item(), 1.95);
        assert!(total_loss(&mut g, a, b, -1.0).is_err());
    }

    #[test]
    fn projector_shapes_per_depth() {
        for depth in 1..=4 {
            let p = AlignmentProjector::new(&ProjectorConfig { depth, hidden: Some(5) }, 3, 7).unwrap();
            let mut store = ParamStore::<f64>::new();
            p.init_params(&mut store, 1).unwrap();
            assert_eq!(store.len(), 2 * depth);
            assert_eq!(store.value("align.w1").unwrap().cols(), 3);
            assert_eq!(store.value(&format!("align.w{depth}")).unwrap().rows(), 7);
            let mut g = Graph::new(&store);
            let x = g.constant(Array::zeros(&[4, 3]));
            let y = p.project(&mut g, x).unwrap();
            assert_eq!(g.value(y).shape(), &[4, 7]);
        }
        assert!(AlignmentProjector::new(&ProjectorConfig { depth: 5, hidden: None }, 3, 3).is_err());
    }

    #[test]
    fn depth_one_identity_passes_through() {
        let p = AlignmentProjector::new(&ProjectorConfig { depth: 1, hidden: None }, 3, 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        store.insert("align.w1", Array::eye(3), true).unwrap();
        store.insert("align.b1", Array::zeros(&[3]), true).unwrap();
        let mut g = Graph::new(&store);
        let x = Array::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -0.25]]);
        let xv = g.constant(x.clone());
        let y = p.project(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
        assert_eq!(p.evaluations(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = AlignConfig::default();
        assert!(c.validate(8).is_ok());
        c.layer = 9;
        assert!(matches!(c.validate(8), Err(Error::LayerOutOfRange { layer: 9, max: 8 })));
        c.layer = 4;
        c.layers_multi = Some(vec![3, 3]);
        assert!(c.validate(8).is_err());
        c.layers_multi = Some(vec![3, 4, 5]);
        assert!(c.validate(8).is_ok());
        assert_eq!(c.layer_label(), "3+4+5");
        c.lambda = -0.1;
        assert!(c.validate(8).is_err());
        assert!("l3".parse::<AlignMetric>().is_err());
        assert!("mid".parse::<AlignTarget>().is_err());
    }
}
