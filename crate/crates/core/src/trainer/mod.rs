//! Two-stage training: joint next-token pretraining of the whole stack, then
//! adapter fine-tuning with the alignment regularizer while everything else
//! stays frozen.

mod checkpoint;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, BLOB_FILE, MANIFEST_FILE, VOCAB_FILE};
pub use optim::{AdamW, OptimState};

use crate::alignreg::{self, AlignConfig, AlignMetric, AlignmentProjector, ProjectorConfig};
use crate::diffcore::{Array, GradMap, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::lm;
use crate::pointenc::{Dataset, Grouping, ShapeSample};
use crate::rng;
use crate::stack::{sample_forward, Model, Task};

pub const STAGE2_FROZEN: [&str; 4] = ["pointenc.", "qformer.", "proj.", "lm.base."];
pub const STAGE2_TRAINABLE: [&str; 2] = ["lm.lora.", "align."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: u8,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch: usize,
    pub seed: u64,
    pub fraction: f64,
}

impl StagePlan {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            lr_start: 3e-3,
            lr_end: 1e-3,
            batch: 8,
            seed: 0,
            fraction: 1.0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            steps: 1000,
            lr_start: 3e-4,
            lr_end: 1e-4,
            batch: 8,
            seed: 0,
            fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::Invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Invalid("steps and batch must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Invalid(format!(
                "need lr_start >= lr_end > 0, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Invalid(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        Ok(())
    }
}

/// Linear decay from `lr_start` at step 0 to `lr_end` at the last step.
pub fn lr_at(step: usize, plan: &StagePlan) -> f64 {
    if plan.steps <= 1 {
        return plan.lr_start;
    }
    let t = step.min(plan.steps - 1) as f64 / (plan.steps - 1) as f64;
    plan.lr_start * (1.0 - t) + plan.lr_end * t
}

/// Parameter-name prefixes held fixed during a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl FreezeMask {
    pub fn stage2() -> Self {
        Self {
            frozen: STAGE2_FROZEN.iter().map(|s| s.to_string()).collect(),
            trainable: STAGE2_TRAINABLE.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Sets every parameter's flags; a name covered by neither list is an
    /// error.
    pub fn apply<T: crate::diffcore::Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let frozen = self.is_frozen(&p.name);
            let trainable = self.trainable.iter().any(|t| p.name.starts_with(t.as_str()));
            if frozen == trainable {
                return Err(Error::Invalid(format!("`{}` is not covered by the freeze mask", p.name)));
            }
            p.frozen = frozen;
            p.trainable = trainable;
        }
        Ok(())
    }
}

/// Layer field of a metrics record: one layer or a joint set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSel {
    One(usize),
    Many(Vec<usize>),
}

/// One line of the per-step metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub l_ntp: f32,
    pub l_align: Option<f32>,
    pub l_total: f32,
    pub lambda: f64,
    pub layer: Option<LayerSel>,
    pub metric: Option<AlignMetric>,
    pub seed: u64,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Writes records as JSON lines.
pub fn write_records(out: &mut impl Write, records: &[StepRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(())
}

/// Each sample of the pool once per epoch, in a seeded per-epoch order.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    len: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut rng::stream(self.seed, &format!("epoch.{}", self.epoch)));
        self.pos = 0;
    }

    /// Next `(pool index, epoch)`.
    pub fn next_item(&mut self) -> (usize, usize) {
        if self.pos == self.len {
            self.epoch += 1;
            self.shuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        (i, self.epoch)
    }
}

/// Alignment branch of a Stage-2 run.
#[derive(Clone, Debug)]
pub struct AlignSetup {
    pub cfg: AlignConfig,
    pub projector: AlignmentProjector,
}

/// Loss values of one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub l_ntp: f32,
    pub l_align: Option<f32>,
}

/// Forward and backward for one training example; gradients are scaled by
/// `weight`.
pub fn sample_step(
    model: &Model<f32>,
    sample: &ShapeSample,
    grouping: &Grouping,
    task: Task,
    align: Option<&AlignSetup>,
    weight: f32,
) -> Result<(SampleLoss, GradMap<f32>)> {
    let prompt = model.encode_text(task.prompt())?;
    let answer = model.vocab.tokenize(task.answer(sample));
    let mut g = Graph::new(&model.params);
    let f = sample_forward(&mut g, &model.cfg, grouping, &prompt, &answer)?;
    let l_ntp = lm::ntp_loss(&mut g, &f.hidden, &f.asm.targets, &f.asm.mask)?;
    let (loss, l_align) = match align {
        Some(a) => {
            let target = alignreg::resolve_target(&mut g, &f.taps, a.cfg.target);
            let (la, _) = alignreg::alignment_terms(&mut g, &f.hidden, f.asm.span, &a.cfg, &a.projector, target)?;
            (alignreg::total_loss(&mut g, l_ntp, la, a.cfg.lambda)?, Some(la))
        }
        None => (l_ntp, None),
    };
    g.check_finite()?;
    let losses = SampleLoss {
        l_ntp: g.value(l_ntp).item(),
        l_align: l_align.map(|v| g.value(v).item()),
    };
    let grads = g.param_grads(loss, weight)?;
    Ok((losses, grads))
}

fn groupings(model: &Model<f32>, pool: &[&ShapeSample]) -> Result<Vec<Grouping>> {
    pool.iter().map(|s| model.group(&s.cloud)).collect()
}

fn run_loop<F>(
    model: &mut Model<f32>,
    pool: &[&ShapeSample],
    plan: &StagePlan,
    align: Option<&AlignSetup>,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepRecord, &ParamStore<f32>) -> Result<()>,
{
    let groups = groupings(model, pool)?;
    let mut sampler = EpochSampler::new(pool.len(), plan.seed);
    let mut optim = OptimState::new(&model.params, AdamW::default());
    let frozen: Vec<(String, Array<f32>)> = model
        .params
        .iter()
        .filter(|p| p.frozen)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    let weight = 1.0 / plan.batch as f32;
    let lambda = align.map_or(0.0, |a| a.cfg.lambda);

    for step in 0..plan.steps {
        let lr = lr_at(step, plan);
        let mut grads: GradMap<f32> = GradMap::new();
        let (mut ntp_sum, mut align_sum) = (0f32, 0f32);
        for _ in 0..plan.batch {
            let (i, epoch) = sampler.next_item();
            let task = Task::draw(plan.seed, epoch, &pool[i].id);
            let (loss, g) = sample_step(model, pool[i], &groups[i], task, align, weight).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step,
                    reason: format!("non-finite value in {op}"),
                },
                e => e,
            })?;
            ntp_sum += loss.l_ntp;
            align_sum += loss.l_align.unwrap_or(0.0);
            for (name, v) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&v),
                    None => {
                        grads.insert(name, v);
                    }
                }
            }
        }
        let l_ntp = ntp_sum / plan.batch as f32;
        let l_align = align.map(|_| align_sum / plan.batch as f32);
        let l_total = alignreg::total_value(l_ntp, l_align.unwrap_or(0.0), lambda);
        if !l_total.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {l_total}"),
            });
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        optim.apply(&mut model.params, &grads, lr)?;
        for (name, before) in &frozen {
            if !model.params.value(name)?.bits_eq(before) {
                return Err(Error::FreezeViolation(name.clone()));
            }
        }
        let record = StepRecord {
            stage: plan.stage,
            step,
            lr,
            l_ntp,
            l_align,
            l_total,
            lambda,
            layer: align.map(|a| match &a.cfg.layers_multi {
                Some(m) => LayerSel::Many(m.clone()),
                None => LayerSel::One(a.cfg.layer),
            }),
            metric: align.map(|a| a.cfg.metric),
            seed: plan.seed,
        };
        log::debug!("{}", record.to_line());
        on_step(&record, &model.params)?;
    }
    Ok(())
}

/// Stage 1: every module trained jointly on next-token prediction.
pub fn stage1_pretrain<F>(init: Model<f32>, data: &Dataset, plan: &StagePlan, on_step: F) -> Result<Checkpoint>
where
    F: FnMut(&StepRecord, &ParamStore<f32>) -> Result<()>,
{
    plan.validate()?;
    if plan.stage != 1 {
        return Err(Error::Invalid(format!("stage-1 trainer given a stage-{} plan", plan.stage)));
    }
    let mut model = init;
    if model.params.iter().any(|p| p.name.starts_with("lm.lora.") || p.name.starts_with("align.")) {
        return Err(Error::Invalid("stage 1 starts from a model without adapters".into()));
    }
    let pool = data.train_subset(plan.fraction, plan.seed)?;
    run_loop(&mut model, &pool, plan, None, on_step)?;
    Ok(Checkpoint {
        stage: 1,
        model,
        snapshot: serde_json::Value::Null,
    })
}

/// Stage-2 starting point: adds adapters and, when aligning, the projector,
/// then freezes everything else.
pub fn prepare_stage2(
    ckpt: &Checkpoint,
    seed: u64,
    align: Option<(&AlignConfig, &ProjectorConfig)>,
) -> Result<(Model<f32>, Option<AlignSetup>)> {
    if ckpt.stage != 1 {
        return Err(Error::Invalid(format!("stage 2 needs a stage-1 checkpoint, got stage {}", ckpt.stage)));
    }
    let mut model = ckpt.model.clone();
    lm::init_lora(&mut model.params, &model.cfg.lm, seed)?;
    let setup = match align {
        Some((cfg, pcfg)) => {
            cfg.validate(model.cfg.lm.layers)?;
            let out = alignreg::target_width(cfg.target, model.cfg.qformer.width, model.cfg.qformer.proj_hidden, model.cfg.lm.width);
            let projector = AlignmentProjector::new(pcfg, model.cfg.lm.width, out)?;
            projector.init_params(&mut model.params, seed)?;
            Some(AlignSetup {
                cfg: cfg.clone(),
                projector,
            })
        }
        None => None,
    };
    FreezeMask::stage2().apply(&mut model.params)?;
    Ok((model, setup))
}

/// Stage 2: adapters (and the projector) trained on
/// `L_ntp + λ·L_align`; `align = None` disables the alignment branch.
pub fn stage2_finetune<F>(
    ckpt: &Checkpoint,
    data: &Dataset,
    plan: &StagePlan,
    align: Option<(&AlignConfig, &ProjectorConfig)>,
    on_step: F,
) -> Result<(Checkpoint, Option<AlignSetup>)>
where
    F: FnMut(&StepRecord, &ParamStore<f32>) -> Result<()>,
{
    plan.validate()?;
    if plan.stage != 2 {
        return Err(Error::Invalid(format!("stage-2 trainer given a stage-{} plan", plan.stage)));
    }
    let (mut model, setup) = prepare_stage2(ckpt, plan.seed, align)?;
    let pool = data.train_subset(plan.fraction, plan.seed)?;
    run_loop(&mut model, &pool, plan, setup.as_ref(), on_step)?;
    Ok((
        Checkpoint {
            stage: 2,
            model,
            snapshot: serde_json::Value::Null,
        },
        setup,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints_and_midpoint() {
        let plan = StagePlan {
            steps: 11,
            lr_start: 3.0,
            lr_end: 1.0,
            ..StagePlan::stage1()
        };
        assert_eq!(lr_at(0, &plan), 3.0);
        assert_eq!(lr_at(10, &plan), 1.0);
        assert_eq!(lr_at(5, &plan), 2.0);
        let one = StagePlan { steps: 1, ..plan };
        assert_eq!(lr_at(0, &one), 3.0);
    }

    #[test]
    fn sampler_visits_each_item_once_per_epoch() {
        let mut s = EpochSampler::new(7, 3);
        for epoch in 0..4 {
            let mut seen: Vec<usize> = (0..7)
                .map(|_| {
                    let (i, e) = s.next_item();
                    assert_eq!(e, epoch);
                    i
                })
                .collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::stage1().validate().is_ok());
        assert!(StagePlan { steps: 0, ..StagePlan::stage1() }.validate().is_err());
        assert!(StagePlan { lr_end: 1.0, ..StagePlan::stage1() }.validate().is_err());
        assert!(StagePlan { fraction: 0.0, ..StagePlan::stage2() }.validate().is_err());
        assert!(StagePlan { stage: 3, ..StagePlan::stage2() }.validate().is_err());
    }

    #[test]
    fn mask_covers_everything() {
        let mut store = ParamStore::<f32>::new();
        store.insert("lm.base.x", Array::zeros(&[1]), true).unwrap();
        store.insert("align.w1", Array::zeros(&[1]), true).unwrap();
        FreezeMask::stage2().apply(&mut store).unwrap();
        assert!(store.get("lm.base.x").unwrap().frozen);
        assert!(store.get("align.w1").unwrap().trainable);
        store.insert("other", Array::zeros(&[1]), true).unwrap();
        assert!(FreezeMask::stage2().apply(&mut store).is_err());
    }
}
