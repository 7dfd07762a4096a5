use align3d::lm::{self, LmConfig, EOS};
use align3d::pointenc::{make_dataset, ShapeKind};
use align3d::stack::{sample_forward, PROMPT_CAPTION};
use align3d::trainer::{prepare_stage2, stage1_pretrain, stage2_finetune, Checkpoint, StagePlan};
use align3d::{rng, AlignConfig, Array, Error, Graph, Model, ParamStore, ProjectorConfig, StackConfig, Task};

fn lm_cfg() -> LmConfig {
    LmConfig {
        layers: 4,
        width: 8,
        heads: 2,
        ffn: 16,
        max_len: 24,
        vocab: 20,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

fn lm_store(cfg: &LmConfig) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    lm::init_params(&mut s, cfg, 3).unwrap();
    s
}

fn hidden_rows(store: &ParamStore<f64>, cfg: &LmConfig, answer: &[usize]) -> Vec<Array<f64>> {
    let mut g = Graph::new(store);
    let t_pc = g.constant(rng::normal(&mut rng::stream(1, "pc"), &[3, cfg.width], 1.0));
    let asm = lm::assemble_sequence(&mut g, cfg, &[5, 6], t_pc, answer).unwrap();
    let h = lm::llm_forward(&mut g, asm.seq, cfg).unwrap();
    h.layers.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn later_tokens_do_not_reach_earlier_positions() {
    let cfg = lm_cfg();
    let store = lm_store(&cfg);
    let a = hidden_rows(&store, &cfg, &[7, 8, 9]);
    let b = hidden_rows(&store, &cfg, &[7, 8, 12]);
    let last = a[0].rows() - 1;
    for (la, lb) in a.iter().zip(&b) {
        for r in 0..last {
            assert_eq!(la.row(r), lb.row(r), "row {r}");
        }
        assert_ne!(la.row(last), lb.row(last));
    }
}

#[test]
fn lora_adds_scaled_low_rank_update() {
    let store: ParamStore<f64> = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array::from_rows(&[&[1.0, 2.0]]));
    let w = g.constant(Array::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = g.constant(Array::from_rows(&[&[1.0, 1.0]]));
    let b = g.constant(Array::from_rows(&[&[0.5], &[-1.0]]));
    let ad = lm::LoraAdapter { a, b, scale: 2.0 };
    let y = lm::lora_apply(&mut g, x, w, None, Some(ad)).unwrap();
    // W·x = [1, 2]; A·x = 3; B·3 = [1.5, -3]; ×2 = [3, -6]
    assert_eq!(g.value(y).data(), &[4.0, -4.0]);
}

#[test]
fn sequence_overflow_is_reported() {
    let cfg = LmConfig { max_len: 8, ..lm_cfg() };
    let store = lm_store(&cfg);
    let mut g = Graph::new(&store);
    let t_pc = g.constant(Array::zeros(&[4, cfg.width]));
    let err = lm::assemble_sequence(&mut g, &cfg, &[5, 6], t_pc, &[7, 8, 9]).err().unwrap();
    assert!(matches!(err, Error::SequenceOverflow { len: 10, max: 8 }));
}

#[test]
fn decoding_respects_the_context_limit() {
    let cfg = lm_cfg();
    let store: ParamStore<f32> = lm_store(&cfg).cast();
    let t_pc: Array<f32> = rng::normal(&mut rng::stream(2, "pc"), &[4, cfg.width], 1.0);
    let out = lm::greedy_decode(&store, &cfg, &[5, 6, 7], &t_pc, 100).unwrap();
    assert!(out.len() <= cfg.max_len - 8);
    assert!(!out.contains(&EOS));
}

#[test]
fn short_training_lowers_the_loss_and_round_trips() {
    let data = make_dataset(&ShapeKind::ALL[..4], 4, 32, 0).unwrap();
    let cfg = StackConfig::tiny();
    let plan = StagePlan {
        steps: 60,
        batch: 4,
        lr_start: 1e-2,
        lr_end: 3e-3,
        ..StagePlan::stage1()
    };
    let mut losses = Vec::new();
    let ck = stage1_pretrain(Model::init(&cfg, 0).unwrap(), &data, &plan, |r, _| {
        losses.push(r.l_ntp);
        Ok(())
    })
    .unwrap();
    let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = losses[losses.len() - 10..].iter().sum::<f32>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");

    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.model, ck.model);

    let plan2 = StagePlan {
        steps: 5,
        batch: 2,
        ..StagePlan::stage2()
    };
    let align = AlignConfig {
        layer: 2,
        ..AlignConfig::default()
    };
    let (s2, setup) = stage2_finetune(&back, &data, &plan2, Some((&align, &ProjectorConfig::default())), |_, _| Ok(())).unwrap();
    assert!(setup.is_some());
    assert!(s2.model.params.iter().any(|p| p.name.starts_with("align.")));
    let dir2 = tempfile::tempdir().unwrap();
    s2.save(dir2.path()).unwrap();
    assert_eq!(Checkpoint::load(dir2.path()).unwrap().stage, 2);
    assert!(prepare_stage2(&s2, 0, None).is_err());
}

#[test]
fn pc_tokens_sit_after_the_prompt() {
    let model: Model<f32> = Model::init(&StackConfig::tiny(), 1).unwrap();
    let data = make_dataset(&ShapeKind::ALL[..1], 2, 32, 0).unwrap();
    let grouping = model.group(&data.samples[0].cloud).unwrap();
    let prompt = model.encode_text(PROMPT_CAPTION).unwrap();
    let answer = model.vocab.tokenize(Task::Caption.answer(&data.samples[0]));
    let mut g = Graph::new(&model.params);
    let f = sample_forward(&mut g, &model.cfg, &grouping, &prompt, &answer).unwrap();
    assert_eq!(f.asm.span.start, 1 + prompt.len());
    assert_eq!(f.asm.span.len(), model.cfg.qformer.queries);
    let masked: Vec<usize> = f.asm.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    assert_eq!(masked.first(), Some(&(f.asm.span.end - 1)));
    assert_eq!(masked.len(), answer.len());
    assert!(model.encode_text("what is a spaceship").is_err());
}
