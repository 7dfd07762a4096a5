use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalParts, EvalResult, ProbeConfig};
use crate::alignreg::{AlignConfig, AlignMetric, AlignTarget, ProjectorConfig};
use crate::error::{Error, Result};
use crate::pointenc::Dataset;
use crate::trainer::{stage2_finetune, write_records, Checkpoint, LayerSel, StagePlan, StepRecord};

pub const RESULT_HEADER: [&str; 18] = [
    "run",
    "sweep",
    "arm",
    "fraction",
    "loss",
    "layer",
    "lambda",
    "proj_depth",
    "target",
    "seed",
    "mn_I",
    "mn_C",
    "obj_analog_I",
    "obj_analog_C",
    "knn_layer",
    "knn_k",
    "knn_acc",
    "caption_f1",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Alignment branch disabled (equivalent to λ = 0).
    Baseline,
    Aligned,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Aligned => "aligned",
        })
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run: String,
    pub sweep: String,
    pub arm: Arm,
    pub fraction: f64,
    pub loss: String,
    pub layer: String,
    pub lambda: f64,
    pub proj_depth: usize,
    pub target: String,
    pub seed: u64,
    #[serde(rename = "mn_I")]
    pub mn_i: f64,
    #[serde(rename = "mn_C")]
    pub mn_c: f64,
    #[serde(rename = "obj_analog_I")]
    pub obj_analog_i: f64,
    #[serde(rename = "obj_analog_C")]
    pub obj_analog_c: f64,
    pub knn_layer: usize,
    pub knn_k: usize,
    pub knn_acc: f64,
    pub caption_f1: f64,
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(RESULT_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_HEADER {
        return Err(Error::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// A Stage-2 run to execute and evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run: String,
    pub sweep: String,
    pub arm: Arm,
    pub fraction: f64,
    /// Alignment setting of the run; for the baseline arm, the setting it
    /// is compared against (its layer is the headline KNN layer).
    pub align: AlignConfig,
    pub projector: ProjectorConfig,
    pub seed: u64,
}

impl RunSpec {
    /// Layer whose KNN accuracy goes into the results row: the aligned
    /// layer, or the middle one of a joint set.
    pub fn headline_layer(&self) -> usize {
        let layers = self.align.layers();
        layers[layers.len() / 2]
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    /// Stage-2 plan; `seed` and `fraction` are set per run.
    pub plan: StagePlan,
    pub probe: ProbeConfig,
    pub parts: EvalParts,
    pub headline_k: usize,
    /// Where to write one directory per run, if anywhere.
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            plan: StagePlan::stage2(),
            probe: ProbeConfig::default(),
            parts: EvalParts::ALL,
            headline_k: 10,
            out_dir: None,
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub eval: EvalResult,
    pub records: Vec<StepRecord>,
    pub row: ResultRow,
}

/// Runs Stage 2 from `stage1` for one spec, probes the result on the test
/// split and optionally writes the run directory.
pub fn evaluate_run(stage1: &Checkpoint, data: &Dataset, spec: &RunSpec, opts: &SweepOptions) -> Result<RunOutcome> {
    let plan = StagePlan {
        seed: spec.seed,
        fraction: spec.fraction,
        ..opts.plan.clone()
    };
    let align = match spec.arm {
        Arm::Aligned => Some((&spec.align, &spec.projector)),
        Arm::Baseline => None,
    };
    let mut records = Vec::with_capacity(plan.steps);
    let (mut ckpt, _) = stage2_finetune(stage1, data, &plan, align, |r, _| {
        records.push(r.clone());
        Ok(())
    })?;
    let eval = evaluate(&ckpt.model, &data.test(), &data.classes, &opts.probe, opts.parts)?;
    let knn_layer = spec.headline_layer();
    let aligned = spec.arm == Arm::Aligned;
    let row = ResultRow {
        run: spec.run.clone(),
        sweep: spec.sweep.clone(),
        arm: spec.arm,
        fraction: spec.fraction,
        loss: if aligned { spec.align.metric.to_string() } else { "none".into() },
        layer: if aligned { spec.align.layer_label() } else { "none".into() },
        lambda: if aligned { spec.align.lambda } else { 0.0 },
        proj_depth: if aligned { spec.projector.depth } else { 0 },
        target: if aligned { spec.align.target.to_string() } else { "none".into() },
        seed: spec.seed,
        mn_i: eval.mn_i,
        mn_c: eval.mn_c,
        obj_analog_i: eval.obj_analog_i,
        obj_analog_c: eval.obj_analog_c,
        knn_layer,
        knn_k: opts.headline_k,
        knn_acc: eval.knn_at(knn_layer, opts.headline_k).unwrap_or(f64::NAN),
        caption_f1: eval.caption_f1,
    };
    if let Some(root) = &opts.out_dir {
        let dir = root.join(&spec.run);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let snapshot = serde_json::json!({
            "spec": spec,
            "plan": plan,
            "probe": opts.probe,
            "model": ckpt.model.cfg,
        });
        let cpath = dir.join("config.json");
        fs::write(&cpath, serde_json::to_string_pretty(&snapshot)? + "\n").map_err(Error::io(&cpath))?;
        let mpath = dir.join("metrics.jsonl");
        let mut f = fs::File::create(&mpath).map_err(Error::io(&mpath))?;
        write_records(&mut f, &records).map_err(Error::io(&mpath))?;
        let epath = dir.join("eval.json");
        fs::write(&epath, serde_json::to_string_pretty(&eval)? + "\n").map_err(Error::io(&epath))?;
        write_results(&dir.join("results.csv"), std::slice::from_ref(&row))?;
        if opts.save_checkpoints {
            ckpt.snapshot = snapshot;
            ckpt.save(&dir.join("ckpt"))?;
        }
    }
    log::info!(
        "{}: knn@{}={:.1} mn_I={:.1} mn_C={:.1} caption={:.1}",
        spec.run,
        knn_layer,
        row.knn_acc,
        row.mn_i,
        row.mn_c,
        row.caption_f1
    );
    Ok(RunOutcome {
        spec: spec.clone(),
        eval,
        records,
        row,
    })
}

fn fraction_label(f: f64) -> String {
    format!("{:03}", (f * 100.0).round() as u32)
}

/// Both arms at each training fraction and seed, all from one Stage-1
/// checkpoint. Rows come out ordered by fraction, arm, seed.
pub fn data_fraction_sweep(
    stage1: &Checkpoint,
    data: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    align: &AlignConfig,
    projector: &ProjectorConfig,
    opts: &SweepOptions,
) -> Result<Vec<RunOutcome>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Invalid(format!("fraction must be in (0, 1], got {f}")));
        }
    }
    let mut out = Vec::new();
    for &fraction in fractions {
        for arm in [Arm::Baseline, Arm::Aligned] {
            for &seed in seeds {
                let spec = RunSpec {
                    run: format!("fraction-{}-{arm}-s{seed}", fraction_label(fraction)),
                    sweep: "fraction".into(),
                    arm,
                    fraction,
                    align: align.clone(),
                    projector: projector.clone(),
                    seed,
                };
                out.push(evaluate_run(stage1, data, &spec, opts)?);
            }
        }
    }
    Ok(out)
}

/// One named Cartesian sweep. Axes left empty take the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub name: String,
    #[serde(default)]
    pub metric: Vec<AlignMetric>,
    #[serde(default)]
    pub layer: Vec<LayerSel>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub depth: Vec<usize>,
    #[serde(default)]
    pub target: Vec<AlignTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub sweep: String,
    pub align: AlignConfig,
    pub projector: ProjectorConfig,
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl Sweep {
    pub fn cells(&self, base: &AlignConfig, base_proj: &ProjectorConfig) -> Vec<GridCell> {
        let base_layer = match &base.layers_multi {
            Some(m) => LayerSel::Many(m.clone()),
            None => LayerSel::One(base.layer),
        };
        let mut cells = Vec::new();
        for metric in or_base(&self.metric, base.metric) {
            for layer in or_base(&self.layer, base_layer.clone()) {
                for &lambda in &or_base(&self.lambda, base.lambda) {
                    for depth in or_base(&self.depth, base_proj.depth) {
                        for target in or_base(&self.target, base.target) {
                            let (layer, layers_multi) = match &layer {
                                LayerSel::One(l) => (*l, None),
                                LayerSel::Many(m) => (m.first().copied().unwrap_or(0), Some(m.clone())),
                            };
                            cells.push(GridCell {
                                sweep: self.name.clone(),
                                align: AlignConfig {
                                    lambda,
                                    layer,
                                    metric,
                                    target,
                                    layers_multi,
                                },
                                projector: ProjectorConfig {
                                    depth,
                                    hidden: base_proj.hidden,
                                },
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

/// One-factor sweeps over loss, layer (seven single layers and one joint
/// set), λ, projector depth and target.
pub fn default_grid() -> Vec<Sweep> {
    vec![
        Sweep {
            name: "loss".into(),
            metric: vec![AlignMetric::L1, AlignMetric::L2, AlignMetric::Cosine],
            ..Sweep::default()
        },
        Sweep {
            name: "layer".into(),
            layer: (2..=8)
                .map(LayerSel::One)
                .chain([LayerSel::Many(vec![3, 4, 5])])
                .collect(),
            ..Sweep::default()
        },
        Sweep {
            name: "lambda".into(),
            lambda: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            ..Sweep::default()
        },
        Sweep {
            name: "depth".into(),
            depth: vec![1, 2, 3, 4],
            ..Sweep::default()
        },
        Sweep {
            name: "target".into(),
            target: vec![AlignTarget::Qformer, AlignTarget::ProjectorMid, AlignTarget::ProjectorFinal],
            ..Sweep::default()
        },
    ]
}

/// Every cell of every sweep, for every seed, from one Stage-1 checkpoint.
/// Invalid cells are skipped with a warning and listed in the second
/// return value.
pub fn ablation_grid(
    stage1: &Checkpoint,
    data: &Dataset,
    sweeps: &[Sweep],
    base: &AlignConfig,
    base_proj: &ProjectorConfig,
    seeds: &[u64],
    opts: &SweepOptions,
) -> Result<(Vec<RunOutcome>, Vec<String>)> {
    let layers = stage1.model.cfg.lm.layers;
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for sweep in sweeps {
        for (i, cell) in sweep.cells(base, base_proj).into_iter().enumerate() {
            let check = cell.align.validate(layers).and_then(|_| {
                if (1..=4).contains(&cell.projector.depth) {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("projector depth {} not in 1..=4", cell.projector.depth)))
                }
            });
            if let Err(e) = check {
                let msg = format!("{}[{i}]: {e}", sweep.name);
                log::warn!("skipping {msg}");
                skipped.push(msg);
                continue;
            }
            for &seed in seeds {
                let spec = RunSpec {
                    run: format!("{}-{i:02}-s{seed}", sweep.name),
                    sweep: sweep.name.clone(),
                    arm: Arm::Aligned,
                    fraction: opts.plan.fraction,
                    align: cell.align.clone(),
                    projector: cell.projector.clone(),
                    seed,
                };
                out.push(evaluate_run(stage1, data, &spec, opts)?);
            }
        }
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_cell_counts() {
        let base = AlignConfig::default();
        let proj = ProjectorConfig::default();
        let counts: Vec<usize> = default_grid().iter().map(|s| s.cells(&base, &proj).len()).collect();
        assert_eq!(counts, vec![3, 8, 6, 4, 3]);
        let depth: Vec<usize> = default_grid()[3].cells(&base, &proj).iter().map(|c| c.projector.depth).collect();
        assert_eq!(depth, vec![1, 2, 3, 4]);
        let lambdas: Vec<f64> = default_grid()[2].cells(&base, &proj).iter().map(|c| c.align.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9]);
        let multi = &default_grid()[1].cells(&base, &proj)[7];
        assert_eq!(multi.align.layers(), vec![3, 4, 5]);
    }

    #[test]
    fn cartesian_product_size() {
        let s = Sweep {
            name: "x".into(),
            metric: vec![AlignMetric::L1, AlignMetric::Cosine],
            lambda: vec![0.1, 0.2, 0.3],
            ..Sweep::default()
        };
        assert_eq!(s.cells(&AlignConfig::default(), &ProjectorConfig::default()).len(), 6);
    }

    #[test]
    fn results_round_trip_with_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = ResultRow {
            run: "a".into(),
            sweep: "loss".into(),
            arm: Arm::Aligned,
            fraction: 0.3,
            loss: "cosine".into(),
            layer: "3+4+5".into(),
            lambda: 0.1,
            proj_depth: 3,
            target: "qformer".into(),
            seed: 2,
            mn_i: 10.0,
            mn_c: 20.0,
            obj_analog_i: 30.0,
            obj_analog_c: 40.0,
            knn_layer: 4,
            knn_k: 10,
            knn_acc: 55.5,
            caption_f1: 61.25,
        };
        write_results(&path, &[row.clone()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULT_HEADER.join(","));
        assert_eq!(read_results(&path).unwrap(), vec![row]);
    }
}
