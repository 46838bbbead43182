//! Encoder and LLM backends.

mod cache;
mod encoder;
mod llm;
mod remote;

pub use cache::{read_log, AnswerCache, AnswerCacheError, AnswerRecord};
pub use encoder::{embed_all, mock_encoder, Embedding, EncoderError, EncoderProvider, MockEncoder};
pub use llm::{
    cached, complete_all, prompt_fingerprint, scripted_llm, CachedLlm, DecodeParams, LlmError,
    LlmProvider, PromptCache, RecordingLlm, ScriptedLlm, TranscriptEntry,
};
pub use remote::{remote_llm, RemoteLimits, RemoteLlm};
