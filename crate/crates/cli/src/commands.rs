use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use align3d::config::{GridFile, RunConfig};
use align3d::pointenc::{Dataset, ShapeKind};
use align3d::probes::{
    ablation_grid, data_fraction_sweep, evaluate, line_plot, write_results, EvalParts, ProbeConfig, RunOutcome,
    Series, SweepOptions,
};
use align3d::trainer::{stage1_pretrain, stage2_finetune, Checkpoint, StagePlan};
use align3d::{Error, Model};

use crate::{AblateArgs, CommonArgs, GenDataArgs, ProbeArgs, ProbeMode, TrainArgs, OUT_ROOT_ENV};

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 2 for usage, configuration and I/O problems, 3 for numerical failure.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Core(Error::Divergence { .. } | Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| usage(format!("cannot create {}: {e}", p.display())))
}

pub fn write_file(p: &Path, text: &str) -> CliResult {
    fs::write(p, text).map_err(|e| usage(format!("cannot write {}: {e}", p.display())))
}

fn load_config(common: &CommonArgs) -> CliResult<RunConfig> {
    match &common.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(common: &CommonArgs, cfg: &RunConfig) -> CliResult<Dataset> {
    match &common.data {
        Some(dir) => Ok(Dataset::load(dir)?),
        None => Ok(cfg.data.generate()?),
    }
}

fn load_ckpt(p: &Path) -> CliResult<Checkpoint> {
    if !p.join(align3d::trainer::MANIFEST_FILE).is_file() {
        return Err(usage(format!("no checkpoint at {}", p.display())));
    }
    Ok(Checkpoint::load(p)?)
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let classes: Vec<ShapeKind> = if a.classes.is_empty() {
        ShapeKind::ALL.to_vec()
    } else {
        a.classes.iter().map(|c| c.parse()).collect::<Result<_, _>>()?
    };
    let data = align3d::pointenc::make_dataset(&classes, a.per_class, a.points, a.seed)?;
    let out = out_path(&a.out);
    data.save(&out)?;
    println!(
        "wrote {} samples ({} classes, {} train / {} test) to {}",
        data.samples.len(),
        data.classes.len(),
        data.train().len(),
        data.test().len(),
        out.display()
    );
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult {
    let plan = if a.stage == 1 { &mut cfg.stage1 } else { &mut cfg.stage2 };
    if let Some(v) = a.steps {
        plan.steps = v;
    }
    if let Some(v) = a.lr_start {
        plan.lr_start = v;
    }
    if let Some(v) = a.lr_end {
        plan.lr_end = v;
    }
    if let Some(v) = a.batch {
        plan.batch = v;
    }
    if let Some(v) = a.fraction {
        plan.fraction = v;
    }
    if let Some(v) = a.seed {
        plan.seed = v;
        if a.stage == 1 {
            cfg.seed = v;
        }
    }
    let align_flags = a.lambda.is_some()
        || a.layer.is_some()
        || !a.layers.is_empty()
        || a.loss.is_some()
        || a.target.is_some()
        || a.proj_depth.is_some()
        || a.no_align;
    if a.stage == 1 && align_flags {
        return Err(usage("alignment flags only apply to --stage 2"));
    }
    if a.stage == 1 && a.ckpt.is_some() {
        return Err(usage("--ckpt only applies to --stage 2"));
    }
    if let Some(v) = a.lambda {
        cfg.align.lambda = v;
    }
    if let Some(v) = a.layer {
        cfg.align.layer = v;
        cfg.align.layers_multi = None;
    }
    if !a.layers.is_empty() {
        cfg.align.layer = a.layers[0];
        cfg.align.layers_multi = Some(a.layers.clone());
    }
    if let Some(v) = a.loss {
        cfg.align.metric = v.into();
    }
    if let Some(v) = a.target {
        cfg.align.target = v.into();
    }
    if let Some(v) = a.proj_depth {
        cfg.projector.depth = v;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    apply_train_flags(&mut cfg, &a)?;
    cfg.validate()?;
    let ckpt = match (a.stage, &a.ckpt) {
        (2, None) => return Err(usage("--stage 2 requires --ckpt")),
        (2, Some(p)) => Some(load_ckpt(p)?),
        _ => None,
    };
    let data = load_data(&a.common, &cfg)?;
    let out = out_path(&a.out);
    create_dir(&out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let mpath = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&mpath).map_err(|e| usage(format!("cannot write {}: {e}", mpath.display())))?;
    let mut on_step = |r: &align3d::trainer::StepRecord, _: &align3d::ParamStore<f32>| {
        writeln!(metrics, "{}", r.to_line()).map_err(Error::io(&mpath))
    };
    let snapshot = serde_json::to_value(&cfg).map_err(Error::from)?;
    let mut result = match ckpt {
        None => {
            let model = Model::init(&cfg.model, cfg.seed)?;
            stage1_pretrain(model, &data, &cfg.stage1, &mut on_step)?
        }
        Some(ck) => {
            let align = (!a.no_align).then_some((&cfg.align, &cfg.projector));
            stage2_finetune(&ck, &data, &cfg.stage2, align, &mut on_step)?.0
        }
    };
    result.snapshot = snapshot;
    result.save(&out.join("ckpt"))?;
    let plan: &StagePlan = if a.stage == 1 { &cfg.stage1 } else { &cfg.stage2 };
    println!("stage {} finished {} steps; checkpoint in {}", a.stage, plan.steps, out.join("ckpt").display());
    Ok(())
}

fn knn_svg(title: &str, series: Vec<Series>) -> String {
    line_plot(title, "LM layer", "KNN accuracy (%)", &series)
}

pub fn probe(a: ProbeArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.common, &cfg)?;
    let probe_cfg = ProbeConfig {
        layers: a.layers.clone(),
        ks: if a.k.is_empty() { vec![1, 10] } else { a.k.clone() },
    };
    let parts = EvalParts {
        knn: matches!(a.mode, ProbeMode::Knn | ProbeMode::All),
        classify: matches!(a.mode, ProbeMode::Classify | ProbeMode::All),
        caption: matches!(a.mode, ProbeMode::Caption | ProbeMode::All),
    };
    let eval = evaluate(&ckpt.model, &data.test(), &data.classes, &probe_cfg, parts)?;
    let out = out_path(&a.out);
    create_dir(&out)?;
    write_file(&out.join("eval.json"), &(serde_json::to_string_pretty(&eval).map_err(Error::from)? + "\n"))?;
    if parts.knn {
        let mut text = String::from("layer,k,acc\n");
        for c in &eval.knn {
            text += &format!("{},{},{}\n", c.layer, c.k, c.acc);
        }
        write_file(&out.join("knn.csv"), &text)?;
        let series = probe_cfg
            .ks
            .iter()
            .map(|&k| Series {
                name: format!("K={k}"),
                points: eval.knn.iter().filter(|c| c.k == k).map(|c| (c.layer as f64, c.acc)).collect(),
            })
            .collect();
        write_file(&out.join("knn.svg"), &knn_svg("Point-cloud token KNN accuracy", series))?;
        println!("knn: {} cells", eval.knn.len());
    }
    if parts.classify {
        write_file(
            &out.join("classify.csv"),
            &format!(
                "prompt,mn,obj_analog\nI,{},{}\nC,{},{}\n",
                eval.mn_i, eval.obj_analog_i, eval.mn_c, eval.obj_analog_c
            ),
        )?;
        println!("classify: I {:.1}% C {:.1}%", eval.mn_i, eval.mn_c);
    }
    if parts.caption {
        write_file(&out.join("caption.csv"), &format!("caption_f1\n{}\n", eval.caption_f1))?;
        println!("caption: F1 {:.1}", eval.caption_f1);
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    let grid = GridFile::load(&a.grid)?;
    let seeds = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else if !grid.seeds.is_empty() {
        grid.seeds.clone()
    } else {
        vec![0]
    };
    let data = load_data(&a.common, &cfg)?;
    let out = out_path(&a.out);
    create_dir(&out)?;
    let stage1 = match &a.ckpt {
        Some(p) => load_ckpt(p)?,
        None => {
            let model = Model::init(&cfg.model, cfg.seed)?;
            let mut ck = stage1_pretrain(model, &data, &cfg.stage1, |_, _| Ok(()))?;
            ck.snapshot = serde_json::to_value(&cfg).map_err(Error::from)?;
            ck.save(&out.join("stage1"))?;
            ck
        }
    };
    if stage1.stage != 1 {
        return Err(usage("ablation needs a stage-1 checkpoint"));
    }
    let mut plan = cfg.stage2.clone();
    if let Some(s) = a.steps {
        plan.steps = s;
    }
    let opts = SweepOptions {
        plan,
        probe: cfg.probe.clone(),
        parts: EvalParts::ALL,
        headline_k: cfg.probe.ks.iter().copied().max().unwrap_or(10),
        out_dir: Some(out.join("runs")),
        save_checkpoints: !a.no_checkpoints,
    };
    let mut outcomes: Vec<RunOutcome> = Vec::new();
    if !grid.fractions.is_empty() {
        outcomes.extend(data_fraction_sweep(
            &stage1,
            &data,
            &grid.fractions,
            &seeds,
            &cfg.align,
            &cfg.projector,
            &opts,
        )?);
    }
    if !grid.sweep.is_empty() {
        let (runs, skipped) = ablation_grid(&stage1, &data, &grid.sweep, &cfg.align, &cfg.projector, &seeds, &opts)?;
        outcomes.extend(runs);
        if !skipped.is_empty() {
            write_file(&out.join("skipped.txt"), &(skipped.join("\n") + "\n"))?;
        }
    }
    let rows: Vec<_> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_results(&out.join("results.csv"), &rows)?;
    println!("{} runs; results in {}", rows.len(), out.join("results.csv").display());
    Ok(())
}
