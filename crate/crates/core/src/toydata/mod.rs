//! Synthetic corpora with known ground truth.
//!
//! Two families: Gaussian mixtures in a few dimensions, and an aligned
//! token→frames corpus where every frame is a style- and token-dependent
//! template plus a pitch offset and Gaussian noise of known std, so the
//! conditional mean of any masked region is available in closed form.

mod corpus;
mod io;
mod mixture;

pub use corpus::{
    gen_aligned_corpus, select_voice_prompt, Attributes, CorpusConfig, CorpusSplit, Noise, Pitch,
    Rate, ToyUtterance, ToyWorld,
};
pub use io::{decode_frames, encode_frames, read_corpus, write_corpus};
pub use mixture::{gen_mixture, gen_mixture_labeled, MixtureSpec};

#[cfg(test)]
mod tests;
