//! Physics-informed training losses and the combined objective.
//!
//! Phenomena loss pulls every fact's expected binary score toward 1,
//! commonsense and semantic losses pull the 1..5 quality scores toward 5
//! (normalized by τ = 5), and the total blends them with the denoising
//! objective through β.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::verifier::FactVerdict;

pub const TAU: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 0.1;

/// Per-step loss components; `total = denoise + beta * (phen + com + sem)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub denoise: f64,
    pub phenomena: f64,
    pub commonsense: f64,
    pub semantic: f64,
    pub beta: f64,
    pub total: f64,
}

/// Whether the phenomena reduction sums over facts (the written form) or
/// averages (n-robust option).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactReduction {
    #[default]
    Sum,
    Mean,
}

/// Σ over facts of (E(f_i) - 1)².
pub fn phenomena_loss(verdicts: &[FactVerdict]) -> Result<f64> {
    phenomena_loss_with(verdicts, FactReduction::Sum)
}

pub fn phenomena_loss_with(verdicts: &[FactVerdict], reduction: FactReduction) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::EmptyFactList);
    }
    let sum: f64 = verdicts.iter().map(|v| (v.expected - 1.0).powi(2)).sum();
    Ok(match reduction {
        FactReduction::Sum => sum,
        FactReduction::Mean => sum / verdicts.len() as f64,
    })
}

/// (score/τ - 1)² for the commonsense score in [1,5].
pub fn commonsense_loss(score: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&score) {
        return Err(Error::Range(format!("commonsense score {score} outside [1,5]")));
    }
    Ok((score / TAU - 1.0).powi(2))
}

/// Same contract as `commonsense_loss`, applied to the semantic score.
pub fn semantic_loss(score: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&score) {
        return Err(Error::Range(format!("semantic score {score} outside [1,5]")));
    }
    Ok((score / TAU - 1.0).powi(2))
}

/// Combine components into the training objective.
pub fn total_loss(denoise: f64, phen: f64, com: f64, sem: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [("denoise", denoise), ("phenomena", phen), ("commonsense", com), ("semantic", sem)] {
        if v < 0.0 {
            return Err(Error::NegativeComponent(format!("{name} = {v}")));
        }
    }
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(LossBreakdown {
        denoise,
        phenomena: phen,
        commonsense: com,
        semantic: sem,
        beta,
        total: denoise + beta * (phen + com + sem),
    })
}

/// Tape version of the phenomena loss over expected-score nodes.
pub fn phenomena_loss_var(
    tape: &mut Tape,
    expected: &[Var],
    reduction: FactReduction,
) -> Result<Var> {
    if expected.is_empty() {
        return Err(Error::EmptyFactList);
    }
    let mut acc: Option<Var> = None;
    for &e in expected {
        let d = tape.add_scalar(e, -1.0);
        let sq = tape.mul(d, d);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
    }
    let sum = acc.unwrap();
    Ok(match reduction {
        FactReduction::Sum => sum,
        FactReduction::Mean => tape.scale(sum, 1.0 / expected.len() as f64),
    })
}

/// Tape version of (score/τ - 1)²; shared by the two quality losses.
pub fn quality_loss_var(tape: &mut Tape, score: Var) -> Var {
    let scaled = tape.scale(score, 1.0 / TAU);
    let d = tape.add_scalar(scaled, -1.0);
    tape.mul(d, d)
}

/// Tape version of the total objective.
pub fn total_loss_var(tape: &mut Tape, denoise: Var, phen: Var, com: Var, sem: Var, beta: f64) -> Var {
    let pc = tape.add(phen, com);
    let pcs = tape.add(pc, sem);
    let scaled = tape.scale(pcs, beta);
    tape.add(denoise, scaled)
}
