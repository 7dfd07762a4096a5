//! Decoder-only language model with word-level tokenizer, multimodal
//! sequence assembly, per-layer hidden-state capture and LoRA adapters.

mod model;
mod vocab;

pub use model::{
    assemble_sequence, decode_text, extract_pc_tokens, greedy_decode, init_lora, init_params, llm_forward,
    lora_apply, ntp_loss, Assembled, HiddenStates, LmConfig, LoraAdapter, PcTokenSpan,
};
pub use vocab::{split_words, Vocab, BOS, EOS, PAD, UNK};
