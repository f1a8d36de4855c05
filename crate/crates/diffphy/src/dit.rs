//! Miniature text-conditioned diffusion transformer.
//!
//! Desk-scale stand-in for a large video DiT: latent clips, a linear noise
//! schedule, cross-attention blocks conditioned on text embeddings, a
//! denoising MSE objective, and a fixed differentiable decoder to pixel
//! space. All forward passes run on the autodiff [`Tape`] so the physics
//! losses can reach latents and adapter parameters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::{derive_seed, rand_tensor};

/// Model and latent geometry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    /// Diffusion steps T; valid timesteps are 0..T.
    pub t_steps: usize,
    pub schedule: String,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_height: usize,
    pub pixel_width: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            model_dim: 16,
            heads: 2,
            text_dim: 8,
            t_steps: 50,
            schedule: "linear".to_string(),
            frames: 4,
            channels: 4,
            height: 8,
            width: 8,
            pixel_height: 16,
            pixel_width: 16,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config("model_dim must be divisible by heads".into()));
        }
        if self.blocks < 2 {
            return Err(Error::Config("need at least 2 blocks for per-block injection".into()));
        }
        if self.schedule != "linear" {
            return Err(Error::Schedule(format!("unknown schedule {:?}", self.schedule)));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.frames, self.channels, self.height, self.width]
    }

    pub fn latent_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    /// Token count when the latent is flattened to (frame, y, x) positions.
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// Latent clip x_t with its diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentClip {
    pub fn new(data: Tensor, timestep: usize, config: &DitConfig) -> Result<Self> {
        if data.shape != config.latent_shape() {
            return Err(Error::Shape(format!(
                "latent shape {:?}, expected {:?}",
                data.shape,
                config.latent_shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Shape("latent contains non-finite entries".into()));
        }
        Ok(Self { data, timestep })
    }
}

/// Decoded pixel-space video, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub frames: Tensor,
}

impl PixelVideo {
    /// Content hash over the raw pixel bytes; keys mock-verifier determinism.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.frames.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear noise schedule with ᾱ(0) = 1 so t = 0 is the identity.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
    pub t_steps: usize,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize) -> Self {
        let (beta_min, beta_max) = (1e-4, 0.02);
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        let mut prod = 1.0;
        alpha_bar.push(1.0);
        for i in 0..t_steps {
            let frac = if t_steps > 1 { i as f64 / (t_steps - 1) as f64 } else { 0.0 };
            let beta = beta_min + (beta_max - beta_min) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Self { alpha_bar, t_steps }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_steps {
            return Err(Error::Schedule(format!("t={t} out of range [0,{})", self.t_steps)));
        }
        Ok(())
    }

    /// ᾱ_t for a valid timestep.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Forward corruption: x_t = √ᾱ x₀ + √(1-ᾱ) ε.
    pub fn corrupt(&self, clean: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar_at(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        if clean.shape != noise.shape {
            return Err(Error::Shape("clean/noise shape mismatch".into()));
        }
        let data = clean
            .data
            .iter()
            .zip(&noise.data)
            .map(|(x, e)| sa * x + sn * e)
            .collect();
        Ok(Tensor::new(clean.shape.clone(), data))
    }
}

fn lora_init(seed: u64, d_in: usize, d_out: usize, rank: usize) -> (Tensor, Tensor) {
    // Down projection random, up projection zero: the delta starts at zero.
    let a = rand_tensor(seed, vec![d_in, rank], 1.0 / (d_in as f64).sqrt());
    let b = Tensor::zeros(vec![rank, d_out]);
    (a, b)
}

/// LoRA delta for one projection: effective weight = W + (alpha/rank)·A·B.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub a: Tensor,
    pub b: Tensor,
}

/// Cross-attention weights (queries from latent tokens, keys/values from a
/// text embedding sequence).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor, // [d, d]
    pub wk: Tensor, // [text_dim, d]
    pub wv: Tensor, // [text_dim, d]
    pub wo: Tensor, // [d, d]
}

/// LoRA deltas for the four attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLora {
    pub q: LoraDelta,
    pub k: LoraDelta,
    pub v: LoraDelta,
    pub o: LoraDelta,
    pub scaling: f64,
    pub rank: usize,
}

impl AttnLora {
    pub fn new(seed: u64, d: usize, text_dim: usize, rank: usize, alpha: f64) -> Self {
        let (qa, qb) = lora_init(derive_seed(seed, "q"), d, d, rank);
        let (ka, kb) = lora_init(derive_seed(seed, "k"), text_dim, d, rank);
        let (va, vb) = lora_init(derive_seed(seed, "v"), text_dim, d, rank);
        let (oa, ob) = lora_init(derive_seed(seed, "o"), d, d, rank);
        Self {
            q: LoraDelta { a: qa, b: qb },
            k: LoraDelta { a: ka, b: kb },
            v: LoraDelta { a: va, b: vb },
            o: LoraDelta { a: oa, b: ob },
            scaling: alpha / rank as f64,
            rank,
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .map(|d| d.a.len() + d.b.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttnWeights,
    pub w1: Tensor, // [d, 2d]
    pub b1: Tensor, // [2d]
    pub w2: Tensor, // [2d, d]
    pub b2: Tensor, // [d]
}

/// The toy DiT: frozen base weights plus optional trainable LoRA on the
/// base cross-attention projections.
#[derive(Debug, Clone)]
pub struct DitModel {
    pub config: DitConfig,
    pub proj_in_w: Tensor,  // [c, d]
    pub proj_in_b: Tensor,  // [d]
    pub time_emb: Tensor,   // [T, d]
    pub blocks: Vec<BlockWeights>,
    pub proj_out_w: Tensor, // [d, c]
    pub proj_out_b: Tensor, // [c]
    pub lora: Option<Vec<AttnLora>>,
    pub schedule: NoiseSchedule,
}

impl DitModel {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let (c, td) = (config.channels, config.text_dim);
        let s = |label: &str| derive_seed(seed, label);
        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            let bl = |name: &str| s(&format!("block{i}.{name}"));
            blocks.push(BlockWeights {
                attn: AttnWeights {
                    wq: rand_tensor(bl("wq"), vec![d, d], scale),
                    wk: rand_tensor(bl("wk"), vec![td, d], scale),
                    wv: rand_tensor(bl("wv"), vec![td, d], scale),
                    wo: rand_tensor(bl("wo"), vec![d, d], scale),
                },
                w1: rand_tensor(bl("w1"), vec![d, 2 * d], scale),
                b1: Tensor::zeros(vec![2 * d]),
                w2: rand_tensor(bl("w2"), vec![2 * d, d], scale),
                b2: Tensor::zeros(vec![d]),
            });
        }
        Ok(Self {
            schedule: NoiseSchedule::linear(config.t_steps),
            proj_in_w: rand_tensor(s("proj_in.w"), vec![c, d], scale),
            proj_in_b: Tensor::zeros(vec![d]),
            time_emb: rand_tensor(s("time_emb"), vec![config.t_steps, d], 0.5),
            blocks,
            proj_out_w: rand_tensor(s("proj_out.w"), vec![d, c], scale),
            proj_out_b: Tensor::zeros(vec![c]),
            lora: None,
            config,
        })
    }

    /// Attach trainable LoRA deltas to every base cross-attention site.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::Precondition("LoRA rank must be >= 1".into()));
        }
        let d = self.config.model_dim;
        let td = self.config.text_dim;
        self.lora = Some(
            (0..self.config.blocks)
                .map(|i| AttnLora::new(derive_seed(seed, &format!("base_lora{i}")), d, td, rank, alpha))
                .collect(),
        );
        Ok(())
    }

    /// Names and tensors of the frozen base weights.
    pub fn base_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj_in.w".to_string(), &self.proj_in_w),
            ("proj_in.b".to_string(), &self.proj_in_b),
            ("time_emb".to_string(), &self.time_emb),
            ("proj_out.w".to_string(), &self.proj_out_w),
            ("proj_out.b".to_string(), &self.proj_out_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.attn.wq"), &b.attn.wq));
            out.push((format!("block.{i}.attn.wk"), &b.attn.wk));
            out.push((format!("block.{i}.attn.wv"), &b.attn.wv));
            out.push((format!("block.{i}.attn.wo"), &b.attn.wo));
            out.push((format!("block.{i}.ffn.w1"), &b.w1));
            out.push((format!("block.{i}.ffn.b1"), &b.b1));
            out.push((format!("block.{i}.ffn.w2"), &b.w2));
            out.push((format!("block.{i}.ffn.b2"), &b.b2));
        }
        out
    }

    /// Names and tensors of the trainable base-path LoRA parameters.
    pub fn lora_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(loras) = &self.lora {
            for (i, l) in loras.iter().enumerate() {
                for (site, delta) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                    out.push((format!("lora.{i}.{site}.a"), &delta.a));
                    out.push((format!("lora.{i}.{site}.b"), &delta.b));
                }
            }
        }
        out
    }

    pub fn lora_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let loras = self.lora.as_mut()?;
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() != 4 || parts[0] != "lora" {
            return None;
        }
        let i: usize = parts[1].parse().ok()?;
        let l = loras.get_mut(i)?;
        let delta = match parts[2] {
            "q" => &mut l.q,
            "k" => &mut l.k,
            "v" => &mut l.v,
            "o" => &mut l.o,
            _ => return None,
        };
        match parts[3] {
            "a" => Some(&mut delta.a),
            "b" => Some(&mut delta.b),
            _ => None,
        }
    }
}

/// Tape variables for the trainable parameters touched by one forward pass,
/// keyed by canonical parameter names.
pub type ParamVars = Vec<(String, Var)>;

/// Inputs an injection branch contributes to the forward pass; defined here
/// to avoid a module cycle, constructed in `inject`.
pub struct InjectionInput<'a> {
    /// Per-block cloned attention weights (frozen copies of the base).
    pub clones: &'a [AttnWeights],
    /// Per-block zero-initialized gate projections, [d, d], trainable.
    pub gates: &'a [Tensor],
    /// Per-block LoRA deltas on the cloned attention, trainable.
    pub loras: &'a [AttnLora],
    /// Failure-fact embedding sequence, [Lf, text_dim].
    pub failure_embedding: &'a Tensor,
}

fn effective_weight(tape: &mut Tape, base: Var, lora: Option<(&LoraDelta, f64)>, params: &mut ParamVars, name: &str) -> Var {
    match lora {
        None => base,
        Some((delta, scaling)) => {
            let a = tape.leaf(delta.a.clone());
            let b = tape.leaf(delta.b.clone());
            params.push((format!("{name}.a"), a));
            params.push((format!("{name}.b"), b));
            let ab = tape.matmul(a, b);
            let scaled = tape.scale(ab, scaling);
            tape.add(base, scaled)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cross_attention(
    tape: &mut Tape,
    x: Var,          // [N, d]
    text: Var,       // [L, text_dim]
    weights: &AttnWeights,
    lora: Option<(&AttnLora, &str)>,
    heads: usize,
    d: usize,
    params: &mut ParamVars,
) -> Var {
    let wq_b = tape.constant(weights.wq.clone());
    let wk_b = tape.constant(weights.wk.clone());
    let wv_b = tape.constant(weights.wv.clone());
    let wo_b = tape.constant(weights.wo.clone());
    let (wq, wk, wv, wo) = match lora {
        None => (wq_b, wk_b, wv_b, wo_b),
        Some((l, prefix)) => (
            effective_weight(tape, wq_b, Some((&l.q, l.scaling)), params, &format!("{prefix}.q")),
            effective_weight(tape, wk_b, Some((&l.k, l.scaling)), params, &format!("{prefix}.k")),
            effective_weight(tape, wv_b, Some((&l.v, l.scaling)), params, &format!("{prefix}.v")),
            effective_weight(tape, wo_b, Some((&l.o, l.scaling)), params, &format!("{prefix}.o")),
        ),
    };
    let q = tape.matmul(x, wq); // [N, d]
    let k = tape.matmul(text, wk); // [L, d]
    let v = tape.matmul(text, wv); // [L, d]
    let dh = d / heads;
    let mut head_outs = Vec::with_capacity(heads);
    for hidx in 0..heads {
        let qh = tape.slice_cols(q, hidx * dh, dh);
        let kh = tape.slice_cols(k, hidx * dh, dh);
        let vh = tape.slice_cols(v, hidx * dh, dh);
        let scores = tape.matmul_nt(qh, kh); // [N, L]
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(att, vh)); // [N, dh]
    }
    let ctx = tape.concat_cols(&head_outs); // [N, d]
    tape.matmul(ctx, wo)
}

/// Index map from [m,c,h,w] flat layout to token-major [m*h*w, c].
fn token_gather_indices(cfg: &DitConfig) -> Vec<usize> {
    let (m, c, h, w) = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    let hw = h * w;
    let mut idx = Vec::with_capacity(m * hw * c);
    for f in 0..m {
        for pos in 0..hw {
            for ch in 0..c {
                idx.push(f * c * hw + ch * hw + pos);
            }
        }
    }
    idx
}

/// Inverse map: token-major [N, c] back to [m,c,h,w] flat.
fn latent_gather_indices(cfg: &DitConfig) -> Vec<usize> {
    let (m, c, h, w) = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    let hw = h * w;
    let mut idx = Vec::with_capacity(m * c * hw);
    for f in 0..m {
        for ch in 0..c {
            for pos in 0..hw {
                idx.push((f * hw + pos) * c + ch);
            }
        }
    }
    idx
}

impl DitModel {
    /// Forward pass on an existing tape. Returns the predicted-noise node
    /// (shaped like the latent) and the trainable parameter bindings.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        latent_var: Var,
        text: &Tensor,
        t: usize,
        injection: Option<&InjectionInput>,
    ) -> Result<(Var, ParamVars)> {
        let cfg = &self.config;
        if tape.value(latent_var).shape != cfg.latent_shape() {
            return Err(Error::Shape(format!(
                "latent shape {:?}, expected {:?}",
                tape.value(latent_var).shape,
                cfg.latent_shape()
            )));
        }
        if text.shape.len() != 2 || text.shape[1] != cfg.text_dim {
            return Err(Error::Shape(format!(
                "text embedding shape {:?}, expected [*, {}]",
                text.shape, cfg.text_dim
            )));
        }
        self.schedule.check(t)?;
        if let Some(inj) = injection {
            if inj.failure_embedding.shape.len() != 2
                || inj.failure_embedding.shape[1] != cfg.text_dim
            {
                return Err(Error::Shape("failure embedding width mismatch".into()));
            }
        }
        let d = cfg.model_dim;
        let n = cfg.tokens();
        let mut params: ParamVars = Vec::new();

        let tokens = tape.gather(latent_var, &token_gather_indices(cfg), vec![n, cfg.channels]);
        let w_in = tape.constant(self.proj_in_w.clone());
        let b_in = tape.constant(self.proj_in_b.clone());
        let mut x = tape.matmul(tokens, w_in);
        x = tape.add_row(x, b_in);
        let t_row = Tensor::new(
            vec![d],
            self.time_emb.data[t * d..(t + 1) * d].to_vec(),
        );
        let t_var = tape.constant(t_row);
        x = tape.add_row(x, t_var);

        let text_var = tape.constant(text.clone());
        let failure_var = injection.map(|inj| tape.constant(inj.failure_embedding.clone()));

        for (i, block) in self.blocks.iter().enumerate() {
            let lora_prefix = format!("lora.{i}");
            let lora = self
                .lora
                .as_ref()
                .map(|ls| (&ls[i], lora_prefix.as_str()));
            let attn_out = cross_attention(tape, x, text_var, &block.attn, lora, cfg.heads, d, &mut params);
            x = tape.add(x, attn_out);

            if let Some(inj) = injection {
                let prefix = format!("branch.{i}");
                let clone_out = cross_attention(
                    tape,
                    x,
                    failure_var.expect("failure embedding present"),
                    &inj.clones[i],
                    Some((&inj.loras[i], &format!("{prefix}.lora"))),
                    cfg.heads,
                    d,
                    &mut params,
                );
                let gate = tape.leaf(inj.gates[i].clone());
                params.push((format!("{prefix}.gate"), gate));
                let gated = tape.matmul(clone_out, gate);
                x = tape.add(x, gated);
            }

            let w1 = tape.constant(block.w1.clone());
            let b1 = tape.constant(block.b1.clone());
            let w2 = tape.constant(block.w2.clone());
            let b2 = tape.constant(block.b2.clone());
            let mut hdn = tape.matmul(x, w1);
            hdn = tape.add_row(hdn, b1);
            hdn = tape.silu(hdn);
            let mut ff = tape.matmul(hdn, w2);
            ff = tape.add_row(ff, b2);
            x = tape.add(x, ff);
        }

        let w_out = tape.constant(self.proj_out_w.clone());
        let b_out = tape.constant(self.proj_out_b.clone());
        let mut out = tape.matmul(x, w_out);
        out = tape.add_row(out, b_out);
        let back = tape.gather(out, &latent_gather_indices(cfg), cfg.latent_shape());
        Ok((back, params))
    }

    /// Pure forward: predicted noise as a plain tensor.
    pub fn forward(&self, latent: &LatentClip, text: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let lv = tape.constant(latent.data.clone());
        let (out, _) = self.forward_on_tape(&mut tape, lv, text, latent.timestep, None)?;
        Ok(tape.value(out).clone())
    }

    /// x̂₀ estimate from the predicted noise and the schedule.
    pub fn estimate_clean(&self, latent: &LatentClip, pred_noise: &Tensor) -> Result<LatentClip> {
        let ab = self.schedule.alpha_bar_at(latent.timestep)?;
        if pred_noise.shape != latent.data.shape {
            return Err(Error::Shape("pred_noise shape mismatch".into()));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = latent
            .data
            .data
            .iter()
            .zip(&pred_noise.data)
            .map(|(x, e)| (x - sn * e) / sa)
            .collect();
        Ok(LatentClip { data: Tensor::new(latent.data.shape.clone(), data), timestep: 0 })
    }

    /// Tape version of the x̂₀ estimate.
    pub fn estimate_clean_var(&self, tape: &mut Tape, latent_var: Var, pred_var: Var, t: usize) -> Result<Var> {
        let ab = self.schedule.alpha_bar_at(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let scaled_noise = tape.scale(pred_var, sn);
        let num = tape.sub(latent_var, scaled_noise);
        Ok(tape.scale(num, 1.0 / sa))
    }
}

/// Denoising MSE between predicted and target noise.
pub fn denoise_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::Shape("denoise_loss shape mismatch".into()));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n)
}

/// Fixed differentiable decoder: per-frame affine map into pixel space
/// followed by a sigmoid squash. Column L1 norms are capped so the decoder
/// is a contraction (sigmoid slope ≤ 1/4 times a ≤4 column norm).
#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub weight: Tensor, // [c*h*w, 3*H*W]
    pub config: DitConfig,
}

impl ToyDecoder {
    pub fn new(config: DitConfig, seed: u64) -> Self {
        let d_in = config.channels * config.height * config.width;
        let d_out = 3 * config.pixel_height * config.pixel_width;
        let mut weight = rand_tensor(derive_seed(seed, "decoder"), vec![d_in, d_out], 1.0);
        // Normalize each output column to L1 norm 3.6 (< 4).
        for j in 0..d_out {
            let norm: f64 = (0..d_in).map(|i| weight.data[i * d_out + j].abs()).sum();
            if norm > 0.0 {
                let s = 3.6 / norm;
                for i in 0..d_in {
                    weight.data[i * d_out + j] *= s;
                }
            }
        }
        Self { weight, config }
    }

    /// Decode a clean latent on the tape; output [m, 3, H, W] values in (0,1).
    pub fn decode_var(&self, tape: &mut Tape, latent_var: Var) -> Result<Var> {
        let cfg = &self.config;
        let lv_shape = tape.value(latent_var).shape.clone();
        if lv_shape != cfg.latent_shape() {
            return Err(Error::Shape(format!("decode latent shape {lv_shape:?}")));
        }
        let d_in = cfg.channels * cfg.height * cfg.width;
        let frames = tape.reshape(latent_var, vec![cfg.frames, d_in]);
        let w = tape.constant(self.weight.clone());
        let pre = tape.matmul(frames, w);
        let squashed = tape.sigmoid(pre);
        Ok(tape.reshape(squashed, vec![cfg.frames, 3, cfg.pixel_height, cfg.pixel_width]))
    }

    pub fn decode(&self, latent: &LatentClip) -> Result<PixelVideo> {
        let mut tape = Tape::new();
        let lv = tape.constant(latent.data.clone());
        let out = self.decode_var(&mut tape, lv)?;
        Ok(PixelVideo { frames: tape.value(out).clone() })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DIFPHYV1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: DitConfig,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    manifest: Vec<(String, Vec<usize>)>,
}

/// Write named tensors as a binary blob with a JSON header.
pub(crate) fn write_tensor_file(
    path: &Path,
    header_json: &str,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    let hb = header_json.as_bytes();
    f.write_all(&(hb.len() as u32).to_le_bytes())?;
    f.write_all(hb)?;
    for (_, t) in tensors {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_tensor_file(path: &Path) -> Result<(String, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let hlen = u32::from_le_bytes(len) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header = String::from_utf8(hbuf).map_err(|e| Error::Config(e.to_string()))?;
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    Ok((header, body))
}

fn tensors_from_body(manifest: &[(String, Vec<usize>)], body: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut off = 0;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let end = off + n * 8;
        if end > body.len() {
            return Err(Error::Config("checkpoint body truncated".into()));
        }
        let data: Vec<f64> = body[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name.clone(), Tensor::new(shape.clone(), data)));
        off = end;
    }
    Ok(out)
}

/// Save the model (base weights and any base-path LoRA) as one binary file.
pub fn save_checkpoint(path: &Path, model: &DitModel) -> Result<()> {
    let mut tensors = model.base_tensors();
    tensors.extend(model.lora_tensors());
    let (rank, alpha) = match model.lora.as_ref().and_then(|l| l.first()) {
        Some(l) => (Some(l.rank), Some(l.scaling * l.rank as f64)),
        None => (None, None),
    };
    let header = CheckpointHeader {
        version: 1,
        config: model.config.clone(),
        lora_rank: rank,
        lora_alpha: alpha,
        manifest: tensors.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Json(e.to_string()))?;
    write_tensor_file(path, &json, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<DitModel> {
    let (hjson, body) = read_tensor_file(path)?;
    let header: CheckpointHeader =
        serde_json::from_str(&hjson).map_err(|e| Error::Json(e.to_string()))?;
    let mut model = DitModel::new(header.config.clone(), 0)?;
    if let (Some(rank), Some(alpha)) = (header.lora_rank, header.lora_alpha) {
        model.attach_lora(rank, alpha, 0)?;
    }
    let tensors = tensors_from_body(&header.manifest, &body)?;
    for (name, tensor) in tensors {
        let slot = match name.as_str() {
            "proj_in.w" => Some(&mut model.proj_in_w),
            "proj_in.b" => Some(&mut model.proj_in_b),
            "time_emb" => Some(&mut model.time_emb),
            "proj_out.w" => Some(&mut model.proj_out_w),
            "proj_out.b" => Some(&mut model.proj_out_b),
            n if n.starts_with("block.") => {
                let parts: Vec<&str> = n.split('.').collect();
                let i: usize = parts[1].parse().map_err(|_| Error::Config(format!("bad name {n}")))?;
                let b = &mut model.blocks[i];
                Some(match (parts[2], parts[3]) {
                    ("attn", "wq") => &mut b.attn.wq,
                    ("attn", "wk") => &mut b.attn.wk,
                    ("attn", "wv") => &mut b.attn.wv,
                    ("attn", "wo") => &mut b.attn.wo,
                    ("ffn", "w1") => &mut b.w1,
                    ("ffn", "b1") => &mut b.b1,
                    ("ffn", "w2") => &mut b.w2,
                    ("ffn", "b2") => &mut b.b2,
                    _ => return Err(Error::Config(format!("unknown tensor {n}"))),
                })
            }
            n if n.starts_with("lora.") => model.lora_tensor_mut(n),
            _ => return Err(Error::Config(format!("unknown tensor {name}"))),
        };
        match slot {
            Some(s) => *s = tensor,
            None => return Err(Error::Config(format!("no slot for tensor {name}"))),
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{embed_text, randn_tensor};

    fn small_config() -> DitConfig {
        DitConfig { frames: 2, channels: 2, height: 4, width: 4, pixel_height: 8, pixel_width: 8, model_dim: 8, heads: 2, text_dim: 4, ..DitConfig::default() }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let latent = LatentClip::new(randn_tensor(1, cfg.latent_shape()), 3, &cfg).unwrap();
        let text = embed_text("a ball rolls", cfg.text_dim, 9);
        let a = model.forward(&latent, &text).unwrap();
        let b = model.forward(&latent, &text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, cfg.latent_shape());
    }

    #[test]
    fn mismatched_latent_shape_is_shape_error() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let bad = Tensor::zeros(vec![2, 2, 5, 4]);
        let mut tape = Tape::new();
        let lv = tape.constant(bad);
        let text = embed_text("x", cfg.text_dim, 9);
        assert!(matches!(
            model.forward_on_tape(&mut tape, lv, &text, 0, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn denoise_loss_fixtures() {
        let a = randn_tensor(5, vec![2, 2, 4, 4]);
        assert_eq!(denoise_loss(&a, &a).unwrap(), 0.0);
        let shifted = Tensor::new(a.shape.clone(), a.data.iter().map(|v| v + 1.0).collect());
        assert!((denoise_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);
        // independent two-line oracle
        let b = randn_tensor(6, a.shape.clone());
        let oracle: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / a.len() as f64;
        assert!((denoise_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn estimate_clean_identity_at_t_zero() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let x = randn_tensor(7, cfg.latent_shape());
        let latent = LatentClip::new(x.clone(), 0, &cfg).unwrap();
        let noise = randn_tensor(8, cfg.latent_shape());
        let rec = model.estimate_clean(&latent, &noise).unwrap();
        assert_eq!(rec.data, x);
    }

    #[test]
    fn estimate_clean_inverts_corruption() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let clean = randn_tensor(7, cfg.latent_shape());
        let noise = randn_tensor(8, cfg.latent_shape());
        for t in [1, 10, 25, 49] {
            let noisy = model.schedule.corrupt(&clean, &noise, t).unwrap();
            let latent = LatentClip { data: noisy, timestep: t };
            let rec = model.estimate_clean(&latent, &noise).unwrap();
            assert!(rec.data.max_abs_diff(&clean) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn invalid_timestep_is_schedule_error() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let latent = LatentClip { data: Tensor::zeros(cfg.latent_shape()), timestep: cfg.t_steps };
        let noise = Tensor::zeros(cfg.latent_shape());
        assert!(matches!(model.estimate_clean(&latent, &noise), Err(Error::Schedule(_))));
    }

    #[test]
    fn zero_latent_decodes_to_mid_gray() {
        let cfg = small_config();
        let dec = ToyDecoder::new(cfg.clone(), 3);
        let latent = LatentClip { data: Tensor::zeros(cfg.latent_shape()), timestep: 0 };
        let video = dec.decode(&latent).unwrap();
        for v in &video.frames.data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_is_contractive_on_random_pairs() {
        let cfg = small_config();
        let dec = ToyDecoder::new(cfg.clone(), 3);
        for s in 0..20u64 {
            let a = randn_tensor(100 + s, cfg.latent_shape());
            let b = randn_tensor(200 + s, cfg.latent_shape());
            let va = dec.decode(&LatentClip { data: a.clone(), timestep: 0 }).unwrap();
            let vb = dec.decode(&LatentClip { data: b.clone(), timestep: 0 }).unwrap();
            let d_in = a.max_abs_diff(&b);
            let d_out = va.frames.max_abs_diff(&vb.frames);
            assert!(d_out <= d_in, "seed {s}: out {d_out} > in {d_in}");
        }
    }

    #[test]
    fn denoise_gradient_matches_finite_differences() {
        let cfg = small_config();
        let model = DitModel::new(cfg.clone(), 42).unwrap();
        let text = embed_text("a ball rolls", cfg.text_dim, 9);
        let x = randn_tensor(11, cfg.latent_shape());
        let target = randn_tensor(12, cfg.latent_shape());
        let t = 5;

        let loss_of = |latent: &Tensor| -> f64 {
            let lc = LatentClip { data: latent.clone(), timestep: t };
            let pred = model.forward(&lc, &text).unwrap();
            denoise_loss(&pred, &target).unwrap()
        };

        let mut tape = Tape::new();
        let lv = tape.leaf(x.clone());
        let (pred, _) = model.forward_on_tape(&mut tape, lv, &text, t, None).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(pred, tv);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(lv, &x);

        let h = 1e-5;
        for e in (0..x.len()).step_by(7) {
            let mut plus = x.clone();
            plus.data[e] += h;
            let mut minus = x.clone();
            minus.data[e] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = g.data[e];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5,
                "elem {e}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = small_config();
        let mut model = DitModel::new(cfg.clone(), 42).unwrap();
        model.attach_lora(4, 8.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let latent = LatentClip::new(randn_tensor(1, cfg.latent_shape()), 3, &cfg).unwrap();
        let text = embed_text("a ball rolls", cfg.text_dim, 9);
        assert_eq!(model.forward(&latent, &text).unwrap(), loaded.forward(&latent, &text).unwrap());
    }
}
