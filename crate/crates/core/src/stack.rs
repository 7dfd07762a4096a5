//! The assembled model: point encoder, query-former, modality projector and
//! language model, plus the prompt/answer formats used for training and
//! evaluation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignreg::TargetTaps;
use crate::diffcore::{Array, Graph, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::lm::{self, Assembled, HiddenStates, LmConfig, Vocab};
use crate::pointenc::{self, EncoderConfig, Grouping, PointCloud, ShapeKind, ShapeSample, COLORS};
use crate::qformer::{self, QFormerConfig};
use crate::rng;

pub const PROMPT_INSTRUCT: &str = "What is this?";
pub const PROMPT_COMPLETE: &str = "This is an object of";
pub const PROMPT_CAPTION: &str = "Caption this 3D model in detail";

/// Longest answer the decoder is allowed to produce.
pub const MAX_ANSWER: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Instruction prompt; answered with the caption.
    Instruct,
    /// Completion prompt; answered with the class name.
    Complete,
    /// Detailed caption request.
    Caption,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Instruct, Task::Complete, Task::Caption];

    pub fn prompt(self) -> &'static str {
        match self {
            Task::Instruct => PROMPT_INSTRUCT,
            Task::Complete => PROMPT_COMPLETE,
            Task::Caption => PROMPT_CAPTION,
        }
    }

    pub fn answer(self, sample: &ShapeSample) -> &str {
        match self {
            Task::Complete => &sample.class_name,
            Task::Instruct | Task::Caption => &sample.caption,
        }
    }

    /// Task drawn for a sample at a given epoch.
    pub fn draw(seed: u64, epoch: usize, sample_id: &str) -> Task {
        let mut r = rng::stream(seed, &format!("task.{epoch}.{sample_id}"));
        Task::ALL[r.gen_range(0..Task::ALL.len())]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Instruct => "instruct",
            Task::Complete => "complete",
            Task::Caption => "caption",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instruct" | "i" => Ok(Task::Instruct),
            "complete" | "c" => Ok(Task::Complete),
            "caption" => Ok(Task::Caption),
            _ => Err(Error::Unknown {
                what: "task",
                name: s.into(),
            }),
        }
    }
}

/// Vocabulary covering every prompt and every caption the generator can
/// emit, independent of any particular dataset.
pub fn build_vocab() -> Vocab {
    let mut corpus: Vec<String> = Task::ALL.iter().map(|t| t.prompt().to_string()).collect();
    for kind in ShapeKind::ALL {
        corpus.push(format!("a 3d model of a {kind}"));
        for (color, _) in COLORS {
            corpus.push(format!("this is a {color} {kind}"));
        }
    }
    Vocab::build(corpus.iter().map(String::as_str))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub qformer: QFormerConfig,
    #[serde(default)]
    pub lm: LmConfig,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        let (e, q) = (&self.encoder, &self.qformer);
        if e.out_width != q.width {
            return Err(Error::Invalid(format!(
                "encoder output width {} differs from query width {}",
                e.out_width, q.width
            )));
        }
        if q.heads == 0 || q.width % q.heads != 0 {
            return Err(Error::Invalid(format!("{} heads do not divide query width {}", q.heads, q.width)));
        }
        if e.patches == 0 || e.patches > e.points || e.neighbors == 0 || e.neighbors > e.points {
            return Err(Error::Invalid(format!(
                "need 1 <= patches, neighbors <= points, got {}/{}/{}",
                e.patches, e.neighbors, e.points
            )));
        }
        if q.queries == 0 {
            return Err(Error::Invalid("query count must be positive".into()));
        }
        Ok(())
    }

    /// A small stack for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                points: 32,
                patches: 4,
                neighbors: 4,
                width: 8,
                out_width: 8,
            },
            qformer: QFormerConfig {
                queries: 4,
                width: 8,
                heads: 2,
                blocks: 1,
                ffn: 16,
                proj_hidden: 8,
            },
            lm: LmConfig {
                layers: 4,
                width: 8,
                heads: 2,
                ffn: 16,
                max_len: 40,
                vocab: 0,
                lora_rank: 2,
                lora_alpha: 4.0,
            },
        }
    }
}

/// Configuration, vocabulary and parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: StackConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with every stage-one parameter trainable.
    pub fn init(cfg: &StackConfig, seed: u64) -> Result<Self> {
        let vocab = build_vocab();
        let mut cfg = cfg.clone();
        cfg.lm.vocab = vocab.len();
        cfg.validate()?;
        let mut params = ParamStore::new();
        pointenc::init_params(&mut params, &cfg.encoder, seed)?;
        qformer::init_params(&mut params, &cfg.qformer, cfg.lm.width, seed)?;
        lm::init_params(&mut params, &cfg.lm, seed)?;
        Ok(Self { cfg, vocab, params })
    }

    pub fn group(&self, cloud: &PointCloud) -> Result<Grouping> {
        if cloud.len() < self.cfg.encoder.patches.max(self.cfg.encoder.neighbors) {
            return Err(Error::Invalid(format!("cloud of {} points is too small", cloud.len())));
        }
        pointenc::group_points(cloud, self.cfg.encoder.patches, self.cfg.encoder.neighbors)
    }

    /// Token ids of a prompt, failing on out-of-vocabulary words.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        lm::split_words(text)
            .iter()
            .map(|w| {
                self.vocab.id(w).ok_or_else(|| Error::Unknown {
                    what: "word",
                    name: w.clone(),
                })
            })
            .collect()
    }

    /// Point-cloud tokens as plain values, for decoding.
    pub fn pc_tokens(&self, grouping: &Grouping) -> Result<Array<T>> {
        let mut g = Graph::new(&self.params);
        let front = front_forward(&mut g, &self.cfg, grouping)?;
        Ok(g.value(front.proj_final).clone())
    }

    pub fn decode(&self, grouping: &Grouping, task: Task) -> Result<Vec<usize>> {
        let t_pc = self.pc_tokens(grouping)?;
        self.decode_with(&t_pc, task)
    }

    pub fn decode_with(&self, t_pc: &Array<T>, task: Task) -> Result<Vec<usize>> {
        let prompt = self.encode_text(task.prompt())?;
        lm::greedy_decode(&self.params, &self.cfg.lm, &prompt, t_pc, MAX_ANSWER + 1)
    }
}

/// Everything upstream of the language model: patch encoding, projection
/// to query width, the query-former and the modality projector.
pub fn front_forward<T: Scalar>(g: &mut Graph<'_, T>, cfg: &StackConfig, grouping: &Grouping) -> Result<TargetTaps> {
    let patches = pointenc::encode_grouped(g, grouping)?;
    let feats = pointenc::mlp_project(g, patches.features)?;
    let q = qformer::qformer_forward(g, feats, &cfg.qformer)?;
    let p = qformer::modality_project_all(g, q.qbar)?;
    Ok(TargetTaps {
        qbar: q.qbar,
        proj_mid: p.mid,
        proj_final: p.out,
    })
}

pub struct SampleForward {
    pub taps: TargetTaps,
    pub asm: Assembled,
    pub hidden: HiddenStates,
}

/// Full forward for one sample with hidden-state capture.
pub fn sample_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &StackConfig,
    grouping: &Grouping,
    prompt: &[usize],
    answer: &[usize],
) -> Result<SampleForward> {
    let taps = front_forward(g, cfg, grouping)?;
    let asm = lm::assemble_sequence(g, &cfg.lm, prompt, taps.proj_final, answer)?;
    let hidden = lm::llm_forward(g, asm.seq, &cfg.lm)?;
    Ok(SampleForward { taps, asm, hidden })
}

/// Mean-pooled point-cloud tokens at each requested layer (1-based), from a
/// forward pass with the instruction prompt and no answer.
pub fn pooled_pc_tokens<T: Scalar>(model: &Model<T>, grouping: &Grouping, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    let prompt = model.encode_text(PROMPT_INSTRUCT)?;
    let mut g = Graph::new(&model.params);
    let f = sample_forward(&mut g, &model.cfg, grouping, &prompt, &[])?;
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let tokens = lm::extract_pc_tokens(&mut g, &f.hidden, l, f.asm.span)?;
        let pooled = g.mean_rows(tokens)?;
        out.push(g.value(pooled).data().iter().map(|v| v.as_f64()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_covers_prompts_and_class_names() {
        let v = build_vocab();
        for kind in ShapeKind::ALL {
            assert!(v.id(kind.name()).is_some(), "{kind}");
        }
        for t in Task::ALL {
            for w in lm::split_words(t.prompt()) {
                assert!(v.id(&w).is_some(), "{w}");
            }
        }
        assert_eq!(build_vocab(), v);
    }

    #[test]
    fn task_draw_is_seeded() {
        let a: Vec<Task> = (0..20).map(|e| Task::draw(3, e, "s0001")).collect();
        let b: Vec<Task> = (0..20).map(|e| Task::draw(3, e, "s0001")).collect();
        assert_eq!(a, b);
        for t in Task::ALL {
            assert!(a.contains(&t));
        }
    }

    #[test]
    fn forward_shapes() {
        let model = Model::<f32>::init(&StackConfig::tiny(), 1).unwrap();
        let cloud = pointenc::generate_shape(ShapeKind::Cube, 1.0, [0.5; 3], 32, 2).unwrap();
        let grouping = model.group(&cloud).unwrap();
        let mut g = Graph::new(&model.params);
        let prompt = model.encode_text(PROMPT_COMPLETE).unwrap();
        let answer = model.vocab.tokenize("cube");
        let f = sample_forward(&mut g, &model.cfg, &grouping, &prompt, &answer).unwrap();
        assert_eq!(g.value(f.taps.qbar).shape(), &[4, 8]);
        assert_eq!(g.value(f.taps.proj_final).shape(), &[4, 8]);
        assert_eq!(f.hidden.layers.len(), 4);
        assert_eq!(f.asm.span.start, 1 + prompt.len());
        assert_eq!(g.value(f.hidden.logits).shape(), &[f.asm.span.end + answer.len(), model.vocab.len()]);
    }

    #[test]
    fn config_rejects_width_mismatch() {
        let mut cfg = StackConfig::tiny();
        cfg.encoder.out_width = 6;
        assert!(Model::<f32>::init(&cfg, 0).is_err());
    }
}
