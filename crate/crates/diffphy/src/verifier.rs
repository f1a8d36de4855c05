//! Multimodal verification of decoded videos.
//!
//! A pluggable [`MllmClient`] scores a video against a question by emitting
//! full-vocabulary token logits. Logits live on the autodiff tape so a
//! differentiable backend (the mock) lets the expected score backpropagate
//! into video pixels and, through the decoder, into the latent.

use std::collections::BTreeMap;

use crate::context::{PhenomenonFact, PromptTemplates, render_template};
use crate::dit::PixelVideo;
use crate::error::{Error, Result};
use crate::score::{expected_score_var, ScoreSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::{derive_seed, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Verdict for one phenomenon fact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactVerdict {
    pub fact: PhenomenonFact,
    /// Expected binary score in [0,1].
    pub expected: f64,
    /// `expected >= match_threshold`; ties count as matched.
    pub matched: bool,
}

/// Plausibility and prompt-adherence scores, each in [1,5].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityScores {
    pub commonsense: f64,
    pub semantic: f64,
}

/// Verifier backend. Implementations must be usable from multiple threads.
pub trait MllmClient: Send + Sync {
    /// Token vocabulary the logits are aligned with.
    fn vocab(&self) -> &[String];

    /// Full-vocabulary logits [V] for (video, question) as a tape node.
    /// Non-differentiable backends may return a constant node.
    fn score_logits_var(
        &self,
        tape: &mut Tape,
        video: Var,
        question: &str,
        spec: &ScoreSpec,
    ) -> Result<Var>;

    /// Whether gradients flow from the logits back into the video node.
    fn differentiable(&self) -> bool;

    /// Value-level logits for callers outside a training tape.
    fn score_logits(
        &self,
        video: &PixelVideo,
        question: &str,
        spec: &ScoreSpec,
    ) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(video.frames.clone());
        let logits = self.score_logits_var(&mut tape, v, question, spec)?;
        let values = tape.value(logits);
        Ok(self
            .vocab()
            .iter()
            .cloned()
            .zip(values.data.iter().copied())
            .collect())
    }
}

/// Differentiable expected score for (video node, question, spec).
///
/// Filters the vocabulary down to the score spec's token groups and runs the
/// softmax-weighted average on the tape. Errors with `EmptySupport` when no
/// spec token resolves in the backend vocabulary.
pub fn expected_score_on_tape(
    tape: &mut Tape,
    video: Var,
    question: &str,
    spec: &ScoreSpec,
    client: &dyn MllmClient,
) -> Result<Var> {
    let logits = client.score_logits_var(tape, video, question, spec)?;
    let mut indices = Vec::new();
    let mut token_scores = Vec::new();
    for (i, tok) in client.vocab().iter().enumerate() {
        if let Some(s) = spec.score_of(tok) {
            indices.push(i);
            token_scores.push(s as f64);
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptySupport);
    }
    let selected = tape.gather(logits, &indices, vec![indices.len()]);
    expected_score_var(tape, selected, &token_scores)
}

/// Fact verdict plus its differentiable score node.
pub struct VerdictVar {
    pub verdict: FactVerdict,
    pub score: Var,
}

pub fn verify_fact_on_tape(
    tape: &mut Tape,
    video: Var,
    fact: &PhenomenonFact,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
    match_threshold: f64,
) -> Result<VerdictVar> {
    if fact.text.is_empty() {
        return Err(Error::Precondition("fact text is empty".into()));
    }
    let question = render_template(&templates.fact_check, &[("fact", &fact.text)]);
    let spec = ScoreSpec::binary();
    let score = expected_score_on_tape(tape, video, &question, &spec, client)?;
    let expected = tape.value(score).item();
    Ok(VerdictVar {
        verdict: FactVerdict { fact: fact.clone(), expected, matched: expected >= match_threshold },
        score,
    })
}

/// Value-level fact verification.
pub fn verify_fact(
    video: &PixelVideo,
    fact: &PhenomenonFact,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
    match_threshold: f64,
) -> Result<FactVerdict> {
    if video.frames.is_empty() {
        return Err(Error::Precondition("video is empty".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(video.frames.clone());
    Ok(verify_fact_on_tape(&mut tape, v, fact, client, templates, match_threshold)?.verdict)
}

fn quality_on_tape(
    tape: &mut Tape,
    video: Var,
    template: &str,
    prompt_text: &str,
    client: &dyn MllmClient,
) -> Result<Var> {
    let question = render_template(template, &[("prompt", prompt_text)]);
    expected_score_on_tape(tape, video, &question, &ScoreSpec::five_point(), client)
}

pub fn verify_commonsense_on_tape(
    tape: &mut Tape,
    video: Var,
    prompt_text: &str,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
) -> Result<Var> {
    quality_on_tape(tape, video, &templates.commonsense, prompt_text, client)
}

pub fn verify_semantic_on_tape(
    tape: &mut Tape,
    video: Var,
    prompt_text: &str,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
) -> Result<Var> {
    quality_on_tape(tape, video, &templates.semantic, prompt_text, client)
}

pub fn verify_commonsense(
    video: &PixelVideo,
    prompt_text: &str,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(video.frames.clone());
    let s = verify_commonsense_on_tape(&mut tape, v, prompt_text, client, templates)?;
    Ok(tape.value(s).item())
}

pub fn verify_semantic(
    video: &PixelVideo,
    prompt_text: &str,
    client: &dyn MllmClient,
    templates: &PromptTemplates,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(video.frames.clone());
    let s = verify_semantic_on_tape(&mut tape, v, prompt_text, client, templates)?;
    Ok(tape.value(s).item())
}

/// Unmatched facts in fact-id order.
pub fn collect_failures(verdicts: &[FactVerdict]) -> Vec<PhenomenonFact> {
    let mut out: Vec<PhenomenonFact> = verdicts
        .iter()
        .filter(|v| !v.matched)
        .map(|v| v.fact.clone())
        .collect();
    out.sort_by_key(|f| f.id);
    out
}

/// The deterministic mock verifier's behavior.
#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Logits are affine in the video's mean pixel value: higher-score
    /// tokens gain logit mass as the video brightens. Fully differentiable;
    /// `gain` sets the slope.
    Statistic { gain: f64 },
    /// Every fact matches exactly (all mass on token "1"); quality scores
    /// sit at a fixed mid level.
    AllMatched,
    /// Fact questions containing any of these needles fail; all other facts
    /// match.
    FailMatching(Vec<String>),
    /// Constant logit tables keyed by a question substring; first match
    /// wins, remaining questions fall back to `AllMatched` behavior.
    Rigged(Vec<(String, Vec<(String, f64)>)>),
}

/// Deterministic mock MLLM over a fixed 32-token vocabulary.
pub struct MockMllm {
    seed: u64,
    vocab: Vec<String>,
    behavior: MockBehavior,
}

const MOCK_VOCAB: &[&str] = &[
    "0", "1", "2", "3", "4", "5", "zero", "one", "two", "three", "four", "five", "yes", "no",
    "maybe", "good", "bad", "high", "low", "fast", "slow", "the", "a", "video", "scene",
    "motion", "light", "color", "frame", "object", "true", "false",
];

impl MockMllm {
    pub fn new(seed: u64, behavior: MockBehavior) -> Self {
        Self {
            seed,
            vocab: MOCK_VOCAB.iter().map(|s| s.to_string()).collect(),
            behavior,
        }
    }

    fn is_fact_question(question: &str) -> bool {
        question.starts_with("Does the video match")
    }

    /// Constant logits: listed pairs as given, everything else far below.
    fn constant_logits(&self, tape: &mut Tape, pairs: &[(String, f64)]) -> Var {
        let mut data = vec![-30.0; self.vocab.len()];
        for (tok, z) in pairs {
            if let Some(i) = self.vocab.iter().position(|v| v == tok) {
                data[i] = *z;
            }
        }
        tape.constant(Tensor::new(vec![self.vocab.len()], data))
    }

    fn matched_pairs(pass: bool) -> Vec<(String, f64)> {
        if pass {
            vec![("1".to_string(), 30.0), ("0".to_string(), -30.0)]
        } else {
            vec![("1".to_string(), -30.0), ("0".to_string(), 30.0)]
        }
    }

    fn quality_pairs() -> Vec<(String, f64)> {
        // All mass on "4": fixed mid-high quality for the rigged behaviors.
        vec![("4".to_string(), 30.0)]
    }

    fn statistic_logits(
        &self,
        tape: &mut Tape,
        video: Var,
        question: &str,
        spec: &ScoreSpec,
        gain: f64,
    ) -> Var {
        // stat = mean pixel in [0,1]; logit_i = a_i * (stat - 1/2) + c_i
        // where a_i grows with the token's score, so brighter-than-average
        // videos score higher. Centering at 1/2 keeps the expected score
        // mid-range (unsaturated) for typical videos.
        let stat = tape.mean(video);
        let v = self.vocab.len();
        let stat_vec = tape.gather(stat, &vec![0; v], vec![v]);
        let stat_vec = tape.add_scalar(stat_vec, -0.5);
        let mid = (spec.min_score() + spec.max_score()) as f64 / 2.0;
        let mut slope = vec![0.0; v];
        let mut bias = vec![0.0; v];
        let mut rng = seeded_rng(derive_seed(self.seed, question));
        for (i, tok) in self.vocab.iter().enumerate() {
            match spec.score_of(tok) {
                Some(s) => {
                    slope[i] = gain * (s as f64 - mid);
                    bias[i] = 0.0;
                }
                None => {
                    slope[i] = 0.0;
                    bias[i] = -8.0 + rng.gen_range(-1.0..1.0);
                }
            }
        }
        let slope_c = tape.constant(Tensor::new(vec![v], slope));
        let bias_c = tape.constant(Tensor::new(vec![v], bias));
        let scaled = tape.mul(stat_vec, slope_c);
        tape.add(scaled, bias_c)
    }
}

impl MllmClient for MockMllm {
    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn score_logits_var(
        &self,
        tape: &mut Tape,
        video: Var,
        question: &str,
        spec: &ScoreSpec,
    ) -> Result<Var> {
        if tape.value(video).is_empty() {
            return Err(Error::Precondition("video is empty".into()));
        }
        let logits = match &self.behavior {
            MockBehavior::Statistic { gain } => {
                self.statistic_logits(tape, video, question, spec, *gain)
            }
            MockBehavior::AllMatched => {
                if Self::is_fact_question(question) {
                    self.constant_logits(tape, &Self::matched_pairs(true))
                } else {
                    self.constant_logits(tape, &Self::quality_pairs())
                }
            }
            MockBehavior::FailMatching(needles) => {
                if Self::is_fact_question(question) {
                    let fails = needles.iter().any(|n| question.contains(n.as_str()));
                    self.constant_logits(tape, &Self::matched_pairs(!fails))
                } else {
                    self.constant_logits(tape, &Self::quality_pairs())
                }
            }
            MockBehavior::Rigged(table) => {
                match table.iter().find(|(needle, _)| question.contains(needle.as_str())) {
                    Some((_, pairs)) => self.constant_logits(tape, pairs),
                    None if Self::is_fact_question(question) => {
                        self.constant_logits(tape, &Self::matched_pairs(true))
                    }
                    None => self.constant_logits(tape, &Self::quality_pairs()),
                }
            }
        };
        Ok(logits)
    }

    fn differentiable(&self) -> bool {
        matches!(self.behavior, MockBehavior::Statistic { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rand_tensor;

    fn fact(id: usize, text: &str) -> PhenomenonFact {
        PhenomenonFact { id, text: text.to_string(), tags: vec![] }
    }

    fn gray_video() -> PixelVideo {
        PixelVideo { frames: Tensor::new(vec![4, 3, 8, 8], vec![0.5; 4 * 3 * 64]) }
    }

    #[test]
    fn rigged_all_mass_gives_expected_one() {
        let t = PromptTemplates::default();
        let client = MockMllm::new(1, MockBehavior::AllMatched);
        let v = verify_fact(&gray_video(), &fact(1, "the cup falls"), &client, &t, 0.5).unwrap();
        assert_eq!(v.expected, 1.0);
        assert!(v.matched);
    }

    #[test]
    fn log3_fixture_gives_expected_three_quarters() {
        let t = PromptTemplates::default();
        let client = MockMllm::new(
            1,
            MockBehavior::Rigged(vec![(
                "the cup falls".to_string(),
                vec![("yes".to_string(), 3f64.ln()), ("0".to_string(), 0.0)],
            )]),
        );
        let v = verify_fact(&gray_video(), &fact(1, "the cup falls"), &client, &t, 0.5).unwrap();
        assert!((v.expected - 0.75).abs() < 1e-12);
        assert!(v.matched);
    }

    #[test]
    fn uniform_logits_tie_counts_as_matched() {
        let t = PromptTemplates::default();
        let client = MockMllm::new(
            1,
            MockBehavior::Rigged(vec![(
                "the cup falls".to_string(),
                vec![
                    ("0".to_string(), 0.7),
                    ("no".to_string(), 0.7),
                    ("1".to_string(), 0.7),
                    ("yes".to_string(), 0.7),
                ],
            )]),
        );
        let v = verify_fact(&gray_video(), &fact(1, "the cup falls"), &client, &t, 0.5).unwrap();
        assert!((v.expected - 0.5).abs() < 1e-12);
        assert!(v.matched, "tie at threshold counts as matched");
    }

    #[test]
    fn quality_scores_hit_their_extremes() {
        let t = PromptTemplates::default();
        let top = MockMllm::new(
            1,
            MockBehavior::Rigged(vec![("plausibility".to_string(), vec![("5".to_string(), 30.0)])]),
        );
        let s = verify_commonsense(&gray_video(), "a ball", &top, &t).unwrap();
        assert_eq!(s, 5.0);
        let bottom = MockMllm::new(
            1,
            MockBehavior::Rigged(vec![("plausibility".to_string(), vec![("1".to_string(), 30.0)])]),
        );
        let s = verify_commonsense(&gray_video(), "a ball", &bottom, &t).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn shared_logit_fixture_matches_score_estimator() {
        let t = PromptTemplates::default();
        // Φ={1,5} mass comes out of the 5-point spec here; rig "1", "one",
        // "5" to the shared fixture and expect the same 2.689 value.
        let client = MockMllm::new(
            1,
            MockBehavior::Rigged(vec![(
                "semantic".to_string(),
                vec![
                    ("1".to_string(), 2.0),
                    ("one".to_string(), 1.0),
                    ("5".to_string(), 2.0),
                ],
            )]),
        );
        let s = verify_semantic(&gray_video(), "a ball", &client, &t).unwrap();
        assert!((s - 2.689).abs() < 1e-3);
    }

    #[test]
    fn statistic_mock_scores_fall_in_range() {
        let t = PromptTemplates::default();
        let client = MockMllm::new(3, MockBehavior::Statistic { gain: 4.0 });
        for s in 0..5u64 {
            let frames = rand_tensor(s, vec![4, 3, 8, 8], 0.5);
            let frames = Tensor::new(frames.shape.clone(), frames.data.iter().map(|v| v + 0.5).collect());
            let video = PixelVideo { frames };
            let f = verify_fact(&video, &fact(1, "x moves"), &client, &t, 0.5).unwrap();
            assert!(f.expected >= 0.0 && f.expected <= 1.0);
            let c = verify_commonsense(&video, "x", &client, &t).unwrap();
            assert!((1.0..=5.0).contains(&c));
        }
    }

    #[test]
    fn collect_failures_preserves_id_order() {
        let mk = |id, matched| FactVerdict { fact: fact(id, "f"), expected: 0.0, matched };
        let verdicts = vec![mk(1, true), mk(2, false), mk(3, true), mk(4, false)];
        let fails = collect_failures(&verdicts);
        assert_eq!(fails.iter().map(|f| f.id).collect::<Vec<_>>(), vec![2, 4]);
        assert!(collect_failures(&[mk(1, true)]).is_empty());
        let eight: Vec<FactVerdict> = (1..=8).map(|i| mk(i, ![2, 5, 7].contains(&i))).collect();
        assert_eq!(collect_failures(&eight).len(), 3);
    }

    #[test]
    fn statistic_gradient_matches_finite_differences() {
        let t = PromptTemplates::default();
        let client = MockMllm::new(3, MockBehavior::Statistic { gain: 4.0 });
        assert!(client.differentiable());
        let base = gray_video();
        let f = fact(1, "the scene brightens");

        let expected_of = |video: &PixelVideo| -> f64 {
            verify_fact(video, &f, &client, &t, 0.5).unwrap().expected
        };

        let mut tape = Tape::new();
        let v = tape.leaf(base.frames.clone());
        let vv = verify_fact_on_tape(&mut tape, v, &f, &client, &t, 0.5).unwrap();
        let grads = tape.backward(vv.score).unwrap();
        let g = grads.get(v, &base.frames);

        let h = 1e-4;
        for e in (0..base.frames.len()).step_by(37) {
            let mut plus = base.clone();
            plus.frames.data[e] += h;
            let mut minus = base.clone();
            minus.frames.data[e] -= h;
            let fd = (expected_of(&plus) - expected_of(&minus)) / (2.0 * h);
            let an = g.data[e];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10) < 1e-4,
                "pixel {e}: fd={fd} an={an}"
            );
        }
    }
}
