//! Physics-aware fine-tuning loop and two-pass inference.
//!
//! Each step corrupts a clean latent, predicts the noise, and on
//! verification steps decodes the clean estimate and scores it with the
//! verifier to form the combined objective. When facts fail, the same
//! timestep is re-run with the injection branch conditioned on the failed
//! facts and a second optimizer update is taken; a seeded coin skips
//! injection for a configurable fraction of steps.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{PhenomenonFact, PromptTemplates};
use crate::dit::{save_checkpoint, DitModel, LatentClip, PixelVideo, ToyDecoder};
use crate::error::{Error, Result};
use crate::inject::{save_branch, InjectionBranch};
use crate::losses::{
    phenomena_loss_var, quality_loss_var, total_loss_var, FactReduction, LossBreakdown,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::{derive_seed, embed_text, randn_tensor, seeded_rng};
use crate::verifier::{
    collect_failures, verify_commonsense_on_tape, verify_fact_on_tape, verify_semantic_on_tape,
    FactVerdict, MllmClient, DEFAULT_MATCH_THRESHOLD,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub skip_injection_prob: f64,
    /// Verify (and apply the physics losses) every this many steps.
    pub verify_every: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    pub match_threshold: f64,
    /// Save a checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            skip_injection_prob: 0.1,
            verify_every: 1,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 100,
            seed: 0,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skip_injection_prob) {
            return Err(Error::Config(format!(
                "skip_injection_prob {} outside [0,1]",
                self.skip_injection_prob
            )));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.verify_every == 0 {
            return Err(Error::Config("verify_every must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config("match_threshold outside [0,1]".into()));
        }
        Ok(())
    }
}

/// One training example: a clean latent with its conditioning.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub clean: Tensor,
    pub text: Tensor,
    pub prompt_text: String,
    pub facts: Vec<PhenomenonFact>,
}

impl TrainBatch {
    /// A synthetic example with a random clean latent and embedded prompt.
    pub fn synthetic(
        model: &DitModel,
        seed: u64,
        prompt_text: &str,
        facts: Vec<PhenomenonFact>,
    ) -> Self {
        let cfg = &model.config;
        Self {
            clean: randn_tensor(derive_seed(seed, "clean"), cfg.latent_shape()),
            text: embed_text(prompt_text, cfg.text_dim, derive_seed(seed, "text")),
            prompt_text: prompt_text.to_string(),
            facts,
        }
    }
}

/// Record of one training step, written as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub t: usize,
    pub losses: LossBreakdown,
    pub verdicts: Vec<FactVerdict>,
    pub injected: bool,
    pub resampled: bool,
    pub skipped: bool,
}

/// Plain SGD with momentum, velocity buffers keyed by parameter name.
struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdMomentum {
    fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: HashMap::new() }
    }

    fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for i in 0..param.len() {
            v[i] = self.momentum * v[i] - self.lr * grad.data[i];
            param.data[i] += v[i];
        }
    }
}

/// Optional output sinks for a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log_path: Option<PathBuf>,
    pub model_checkpoint: Option<PathBuf>,
    pub branch_checkpoint: Option<PathBuf>,
}

pub struct Trainer<'a> {
    pub model: DitModel,
    pub branch: InjectionBranch,
    pub decoder: ToyDecoder,
    pub client: &'a dyn MllmClient,
    pub templates: &'a PromptTemplates,
    pub config: TrainConfig,
    pub outputs: TrainOutputs,
    optimizer: SgdMomentum,
}

struct StepLoss {
    total: Var,
    breakdown: LossBreakdown,
    verdicts: Vec<FactVerdict>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: DitModel,
        branch: InjectionBranch,
        decoder: ToyDecoder,
        client: &'a dyn MllmClient,
        templates: &'a PromptTemplates,
        config: TrainConfig,
        outputs: TrainOutputs,
    ) -> Result<Self> {
        config.validate()?;
        if model.lora.is_none() {
            return Err(Error::Precondition(
                "model must have LoRA attached before training".into(),
            ));
        }
        let optimizer = SgdMomentum::new(config.learning_rate, config.momentum);
        Ok(Self { model, branch, decoder, client, templates, config, outputs, optimizer })
    }

    /// Build the step objective on a tape: denoise MSE always, plus the
    /// physics terms when `verify` is set.
    fn build_objective(
        &self,
        tape: &mut Tape,
        batch: &TrainBatch,
        noisy: &Tensor,
        noise: &Tensor,
        t: usize,
        verify: bool,
        injection: Option<&crate::dit::InjectionInput>,
    ) -> Result<(StepLoss, crate::dit::ParamVars)> {
        let latent = tape.constant(noisy.clone());
        let target = tape.constant(noise.clone());
        let (pred, params) = self.model.forward_on_tape(tape, latent, &batch.text, t, injection)?;
        let denoise = tape.mse(pred, target);

        if !verify {
            let total_v = tape.value(denoise).item();
            return Ok((
                StepLoss {
                    total: denoise,
                    breakdown: LossBreakdown {
                        denoise: total_v,
                        phenomena: 0.0,
                        commonsense: 0.0,
                        semantic: 0.0,
                        beta: self.config.beta,
                        total: total_v,
                    },
                    verdicts: Vec::new(),
                },
                params,
            ));
        }

        let clean_hat = self.model.estimate_clean_var(tape, latent, pred, t)?;
        let video = self.decoder.decode_var(tape, clean_hat)?;
        let mut verdicts = Vec::new();
        let mut score_vars = Vec::new();
        for fact in &batch.facts {
            let v = verify_fact_on_tape(
                tape,
                video,
                fact,
                self.client,
                self.templates,
                self.config.match_threshold,
            )?;
            score_vars.push(v.score);
            verdicts.push(v.verdict);
        }
        let phen = phenomena_loss_var(tape, &score_vars, FactReduction::Sum)?;
        let com_score =
            verify_commonsense_on_tape(tape, video, &batch.prompt_text, self.client, self.templates)?;
        let sem_score =
            verify_semantic_on_tape(tape, video, &batch.prompt_text, self.client, self.templates)?;
        let com = quality_loss_var(tape, com_score);
        let sem = quality_loss_var(tape, sem_score);
        let total = total_loss_var(tape, denoise, phen, com, sem, self.config.beta);
        let breakdown = LossBreakdown {
            denoise: tape.value(denoise).item(),
            phenomena: tape.value(phen).item(),
            commonsense: tape.value(com).item(),
            semantic: tape.value(sem).item(),
            beta: self.config.beta,
            total: tape.value(total).item(),
        };
        Ok((StepLoss { total, breakdown, verdicts }, params))
    }

    /// Backprop and apply one optimizer update over the pass's parameters.
    fn update(&mut self, tape: &Tape, total: Var, params: &crate::dit::ParamVars) -> Result<()> {
        let grads = tape.backward(total)?;
        for (name, var) in params {
            let grad = match grads.try_get(*var) {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(p) = self.model.lora_tensor_mut(name) {
                self.optimizer.apply(name, p, &grad);
            } else if let Some(p) = self.branch.tensor_mut(name) {
                self.optimizer.apply(name, p, &grad);
            } else {
                return Err(Error::Precondition(format!("unknown trainable parameter {name}")));
            }
        }
        Ok(())
    }

    fn save_checkpoints(&self) -> Result<()> {
        if let Some(p) = &self.outputs.model_checkpoint {
            save_checkpoint(p, &self.model)?;
        }
        if let Some(p) = &self.outputs.branch_checkpoint {
            save_branch(p, &self.branch)?;
        }
        Ok(())
    }

    /// One full training step; `skip` is the pre-drawn injection-skip coin.
    pub fn train_step(
        &mut self,
        step: usize,
        batch: &TrainBatch,
        t: usize,
        noise: &Tensor,
        skip: bool,
    ) -> Result<StepReport> {
        let noisy = self.model.schedule.corrupt(&batch.clean, noise, t)?;
        let verify = step % self.config.verify_every == 0;

        let mut tape = Tape::new();
        let (loss, params) = self.build_objective(&mut tape, batch, &noisy, noise, t, verify, None)?;
        if !loss.breakdown.total.is_finite() {
            self.save_checkpoints()?;
            return Err(Error::Diverged(format!(
                "non-finite loss {} at step {step}",
                loss.breakdown.total
            )));
        }
        self.update(&tape, loss.total, &params)?;

        let failures = collect_failures(&loss.verdicts);
        let resampled = verify && !failures.is_empty() && !skip;
        if resampled {
            let emb = self.branch.encode_failure_facts(&failures)?;
            let mut tape2 = Tape::new();
            let (loss2, params2) = {
                let input = self.branch.as_input(&emb);
                self.build_objective(&mut tape2, batch, &noisy, noise, t, verify, Some(&input))?
            };
            if !loss2.breakdown.total.is_finite() {
                self.save_checkpoints()?;
                return Err(Error::Diverged(format!(
                    "non-finite injected loss at step {step}"
                )));
            }
            self.update(&tape2, loss2.total, &params2)?;
        }

        Ok(StepReport {
            step,
            t,
            losses: loss.breakdown,
            verdicts: loss.verdicts,
            injected: resampled,
            resampled,
            skipped: skip,
        })
    }

    /// Run the configured number of steps, cycling through the batches.
    pub fn run(&mut self, batches: &[TrainBatch]) -> Result<Vec<StepReport>> {
        if batches.is_empty() {
            return Err(Error::EmptyInput("no training batches".into()));
        }
        let mut rng_t = seeded_rng(derive_seed(self.config.seed, "timestep"));
        let mut rng_skip = seeded_rng(derive_seed(self.config.seed, "skip"));
        let noise_seed = derive_seed(self.config.seed, "noise");
        let t_steps = self.model.config.t_steps;
        let shape = self.model.config.latent_shape();

        let mut log = match &self.outputs.log_path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(std::io::BufWriter::new(std::fs::File::create(p)?))
            }
            None => None,
        };

        let mut reports = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let t = rng_t.gen_range(0..t_steps);
            let skip = rng_skip.gen::<f64>() < self.config.skip_injection_prob;
            let noise = randn_tensor(derive_seed(noise_seed, &step.to_string()), shape.clone());
            let batch = &batches[step % batches.len()];
            let report = self.train_step(step, batch, t, &noise, skip)?;
            if let Some(w) = &mut log {
                let line = serde_json::to_string(&report).map_err(|e| Error::Json(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            if self.config.checkpoint_every > 0 && (step + 1) % self.config.checkpoint_every == 0 {
                self.save_checkpoints()?;
            }
            reports.push(report);
        }
        if let Some(w) = &mut log {
            w.flush()?;
        }
        self.save_checkpoints()?;
        Ok(reports)
    }
}

/// Outcome of (possibly two-pass) inference.
#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub video: PixelVideo,
    /// Whether a second, injected generation actually ran.
    pub second_pass: bool,
    pub failures: Vec<PhenomenonFact>,
}

/// Deterministic reverse diffusion from seeded noise; when `injection` is
/// set the branch conditions every denoising step.
fn generate(
    model: &DitModel,
    decoder: &ToyDecoder,
    text: &Tensor,
    seed: u64,
    injection: Option<&crate::dit::InjectionInput>,
) -> Result<PixelVideo> {
    let cfg = &model.config;
    let mut x = randn_tensor(derive_seed(seed, "init_noise"), cfg.latent_shape());
    for t in (0..cfg.t_steps).rev() {
        let pred = {
            let mut tape = Tape::new();
            let lv = tape.constant(x.clone());
            let (out, _) = model.forward_on_tape(&mut tape, lv, text, t, injection)?;
            tape.value(out).clone()
        };
        let clip = LatentClip::new(x, t, cfg)?;
        let clean = model.estimate_clean(&clip, &pred)?;
        if t == 0 {
            x = clean.data;
        } else {
            // Deterministic update: re-noise the clean estimate to t-1.
            let ab_prev = model.schedule.alpha_bar_at(t - 1)?;
            let (sa, sn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x = Tensor::new(
                clean.data.shape.clone(),
                clean
                    .data
                    .data
                    .iter()
                    .zip(&pred.data)
                    .map(|(c, e)| sa * c + sn * e)
                    .collect(),
            );
        }
    }
    decoder.decode(&LatentClip::new(x, 0, cfg)?)
}

/// One- or two-pass generation. Pass 1 generates without injection; with
/// `passes == 2` the output is verified and, if any fact fails, generation
/// re-runs once with the branch conditioned on the failures.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    prompt_text: &str,
    facts: &[PhenomenonFact],
    passes: u8,
    model: &DitModel,
    branch: &InjectionBranch,
    decoder: &ToyDecoder,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
    match_threshold: f64,
    seed: u64,
) -> Result<InferOutcome> {
    if !(1..=2).contains(&passes) {
        return Err(Error::Config(format!("passes must be 1 or 2, got {passes}")));
    }
    let text = embed_text(prompt_text, model.config.text_dim, derive_seed(seed, "text"));
    let first = generate(model, decoder, &text, seed, None)?;
    if passes == 1 {
        return Ok(InferOutcome { video: first, second_pass: false, failures: Vec::new() });
    }
    let mut verdicts = Vec::new();
    for fact in facts {
        verdicts.push(crate::verifier::verify_fact(
            &first,
            fact,
            client,
            templates,
            match_threshold,
        )?);
    }
    let failures = collect_failures(&verdicts);
    if failures.is_empty() {
        return Ok(InferOutcome { video: first, second_pass: false, failures });
    }
    let emb = branch.encode_failure_facts(&failures)?;
    let input = branch.as_input(&emb);
    let second = generate(model, decoder, &text, seed, Some(&input))?;
    Ok(InferOutcome { video: second, second_pass: true, failures })
}
