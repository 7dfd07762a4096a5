use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{GradMap, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for exactly the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub hp: AdamW,
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, hp: AdamW) -> Self {
        let moments = store
            .iter()
            .filter(|p| p.trainable && !p.frozen)
            .map(|p| {
                let n = p.value.len();
                (p.name.clone(), (vec![T::zero(); n], vec![T::zero(); n]))
            })
            .collect();
        Self { hp, step: 0, moments }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One decoupled-weight-decay update. `grads` must cover exactly the
    /// parameters this state was built for.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64) -> Result<()> {
        for name in grads.keys() {
            if !self.moments.contains_key(name) {
                return match store.get(name) {
                    Ok(p) if p.frozen || !p.trainable => Err(Error::FreezeViolation(name.clone())),
                    _ => Err(Error::Invalid(format!("gradient for unknown parameter `{name}`"))),
                };
            }
        }
        if let Some(missing) = self.moments.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::Invalid(format!("no gradient for trainable parameter `{missing}`")));
        }
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hp;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = grads[name].data();
            let p = store.get_mut(name)?;
            if p.frozen {
                return Err(Error::FreezeViolation(name.clone()));
            }
            let w = p.value.data_mut();
            if g.len() != w.len() {
                return Err(Error::shape("optimizer", &[g.len()], &[w.len()]));
            }
            for i in 0..w.len() {
                let gi = g[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + eps) + weight_decay * w[i].as_f64();
                w[i] = T::of(w[i].as_f64() - lr * update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Array;

    fn single(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Array::vector(vec![x]), true).unwrap();
        s
    }

    fn grad(v: f64) -> GradMap<f64> {
        GradMap::from([("x".to_string(), Array::vector(vec![v]))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = single(1.5);
        let mut st = OptimState::new(&s, AdamW { weight_decay: 0.0, ..AdamW::default() });
        for _ in 0..5 {
            st.apply(&mut s, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(s.value("x").unwrap().data()[0], 1.5);
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut s = single(1.0);
        let mut st = OptimState::new(&s, AdamW::default());
        let x = s.value("x").unwrap().data()[0];
        st.apply(&mut s, &grad(2.0 * x), 0.1).unwrap();
        let x1 = s.value("x").unwrap().data()[0];
        assert!(x1 < 1.0 && x1 > 0.0);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr for large g.
        let mut s = single(0.0);
        let mut st = OptimState::new(&s, AdamW { weight_decay: 0.0, ..AdamW::default() });
        st.apply(&mut s, &grad(1e3), 0.01).unwrap();
        let want = -0.01 * 1e3 / (1e3 + 1e-8);
        assert!((s.value("x").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_or_missing_gradients_are_rejected() {
        let mut s = single(0.0);
        s.insert("y", Array::vector(vec![1.0]), false).unwrap();
        let mut st = OptimState::new(&s, AdamW::default());
        assert_eq!(st.names().collect::<Vec<_>>(), vec!["x"]);
        let mut g = grad(1.0);
        g.insert("y".into(), Array::vector(vec![1.0]));
        assert!(matches!(st.apply(&mut s, &g, 0.1), Err(Error::FreezeViolation(n)) if n == "y"));
        assert!(st.apply(&mut s, &GradMap::new(), 0.1).is_err());
    }
}
