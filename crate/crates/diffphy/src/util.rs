//! Deterministic hashing, seeding, and text-embedding helpers.
//!
//! All randomness in the mock backends and the toy model flows through
//! seeds derived here, so a fixed top-level seed pins every byte of output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Hex SHA-256 of a string, used as the canonical content key for prompts
/// and cached reasoning outputs.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Derive a child seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in [-scale, scale] from a seed.
pub fn rand_tensor(seed: u64, shape: Vec<usize>, scale: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Standard-normal tensor from a seed (Box-Muller; avoids extra deps).
pub fn randn_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(r * th.cos());
        if data.len() < n {
            data.push(r * th.sin());
        }
    }
    Tensor::new(shape, data)
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Whitespace-delimited word count, the measure used by the 70-word contract.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Deterministic embedding row for one token: seeded by the token text so
/// identical tokens embed identically across processes.
pub fn token_embedding(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let child = derive_seed(seed, token);
    let mut rng = seeded_rng(child);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Embed a text as a [n_tokens, dim] tensor. Empty text maps to a single
/// zero row so downstream shapes stay valid.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Tensor {
    let toks = tokenize(text);
    if toks.is_empty() {
        return Tensor::zeros(vec![1, dim]);
    }
    let mut data = Vec::with_capacity(toks.len() * dim);
    for t in &toks {
        data.extend(token_embedding(t, dim, seed));
    }
    Tensor::new(vec![toks.len(), dim], data)
}

/// The separator row used when concatenating multiple fact embeddings.
pub fn separator_embedding(dim: usize, seed: u64) -> Vec<f64> {
    token_embedding("\u{1f}sep\u{1f}", dim, seed)
}
