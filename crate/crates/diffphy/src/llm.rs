//! Pluggable text-LLM client plus the deterministic mock backend.
//!
//! The mock resolves a completion in two stages: an exact fixture table
//! keyed by the SHA-256 of the rendered prompt, then a template-aware
//! fallthrough generator seeded by (prompt hash, seed). Same prompt and
//! seed always produce the same bytes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::util::{content_hash, derive_seed, seeded_rng, tokenize};
use rand::Rng;

/// Decoding knobs forwarded to the backend. The mock only honors `seed`.
#[derive(Debug, Clone)]
pub struct DecodeParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { max_tokens: 1024, temperature: 0.0, seed: 0 }
    }
}

/// A text completion backend. Implementations must be safe to call from
/// multiple threads with independent in-flight requests.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String>;
    fn name(&self) -> &str;
}

/// Deterministic mock LLM.
pub struct MockLlm {
    seed: u64,
    fixtures: HashMap<String, String>,
    /// When set, every call fails; used to exercise ClientError paths.
    fail: bool,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "its", "it", "is", "are", "was", "to", "of", "on", "in", "and", "with",
    "from", "into", "over", "onto", "by", "at", "for", "his", "her", "their", "then", "down",
    "up", "off", "as", "that", "this",
];

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed, fixtures: HashMap::new(), fail: false }
    }

    pub fn failing() -> Self {
        Self { seed: 0, fixtures: HashMap::new(), fail: true }
    }

    /// Register an exact canned completion for a rendered prompt.
    pub fn register_fixture(&mut self, prompt: &str, completion: &str) {
        self.fixtures.insert(content_hash(prompt), completion.to_string());
    }

    fn scene_of(prompt: &str) -> String {
        // Templates carry the user text after a "Scene:"-style marker.
        for marker in ["Input scene:\n", "Scene: ", "Now process:\n\""] {
            if let Some(pos) = prompt.find(marker) {
                let rest = &prompt[pos + marker.len()..];
                let end = rest.find('\n').unwrap_or(rest.len());
                return rest[..end].trim().trim_matches('"').to_string();
            }
        }
        prompt.lines().next().unwrap_or("").to_string()
    }

    fn entities_of(scene: &str) -> Vec<String> {
        tokenize(scene)
            .into_iter()
            .filter(|t| t.len() >= 3 && !STOPWORDS.contains(&t.as_str()))
            .take(4)
            .collect()
    }

    fn gen_attributes(&self, scene: &str) -> String {
        if scene.to_lowercase().contains("candle") {
            return "PRINCIPLE: gravity | INITIATOR: a cat | AFFECTED: candle | INTERACTION: the cat nudges the candle and gravity pulls it over\n\
                    PRINCIPLE: combustion | INITIATOR: candle | AFFECTED: flame | INTERACTION: the wick feeds the flame which bends as the candle tips"
                .to_string();
        }
        let ents = Self::entities_of(scene);
        let principles = ["gravity", "friction", "momentum", "elasticity"];
        let mut rng = seeded_rng(derive_seed(self.seed, scene));
        let mut lines = Vec::new();
        let n = 1 + rng.gen_range(0..2usize);
        for i in 0..n.max(1) {
            let p = principles[rng.gen_range(0..principles.len())];
            let init = if ents.len() > 1 { ents[i % ents.len()].clone() } else { "an external force".to_string() };
            let aff = ents.get((i + 1) % ents.len().max(1)).cloned().unwrap_or_else(|| "the scene".to_string());
            lines.push(format!(
                "PRINCIPLE: {p} | INITIATOR: {init} | AFFECTED: {aff} | INTERACTION: {init} acts on {aff} under {p}"
            ));
        }
        lines.join("\n")
    }

    fn gen_phenomena(&self, scene: &str) -> String {
        if scene.to_lowercase().contains("candle") {
            return "1. The candle changes position from upright to lying down [tags: Gravity]\n\
                    2. The candle's flame is taller when burning intensely [tags: Combustion]\n\
                    3. Wax pools near the wick as heat builds [tags: Thermal]"
                .to_string();
        }
        let ents = Self::entities_of(scene);
        let mut rng = seeded_rng(derive_seed(self.seed, &format!("phen:{scene}")));
        let n = 3 + rng.gen_range(0..3usize);
        let mut lines = Vec::new();
        for i in 0..n {
            let e = ents.get(i % ents.len().max(1)).cloned().unwrap_or_else(|| "the object".to_string());
            let (fact, tag) = match i % 4 {
                0 => (format!("The {e} changes its state of motion"), "Inertia"),
                1 => (format!("The {e} stays in contact with its supporting surface"), "Friction"),
                2 => (format!("The {e} accelerates downward when unsupported"), "Gravity"),
                _ => (format!("The {e} transfers momentum on impact"), "Conservation of Momentum"),
            };
            lines.push(format!("{}. {fact} [tags: {tag}]", i + 1));
        }
        lines.join("\n")
    }

    fn gen_enhancement(&self, scene: &str) -> String {
        // Keep every original entity by leading with the scene text itself.
        let atmosphere = " The motion unfolds smoothly, with natural lighting and steady framing that keep every object clearly visible.";
        let mut text = format!("{}{}", scene.trim_end_matches('.'), ".");
        text.push_str(atmosphere);
        // Trim trailing words down to the 70-word budget; the scene text at
        // the front is preserved.
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() > 70 {
            words[..70].join(" ")
        } else {
            text
        }
    }

    fn gen_rules(&self, scene: &str) -> String {
        if scene.to_lowercase().contains("segway") {
            return SEGWAY_RULES_FIXTURE.to_string();
        }
        let ents = Self::entities_of(scene);
        let e = ents.first().cloned().unwrap_or_else(|| "object".to_string());
        let rules = format!(
            "{{\n  \"The {e} moves across the scene.\": [\"Inertia\"],\n  \"The {e} presses against the ground.\": [\"Gravity\"]\n}}"
        );
        let mut out = format!("<physics_rules>\n{rules}\n</physics_rules>\n");
        for i in 1..=5 {
            out.push_str(&format!(
                "<rewrite{i}>{scene} The {e} keeps its momentum while friction with the ground steadies each movement (variant {i}).</rewrite{i}>\n"
            ));
        }
        out
    }
}

/// Canned rules-extraction output for the Segway caption.
pub const SEGWAY_RULES_FIXTURE: &str = r#"<physics_rules>
{
  "The Segway wheels rotate.": ["Friction"],
  "The rider and Segway move forward.": ["Conservation of Momentum"],
  "The rider's shadow length changes as the sun's angle changes.": ["Reflection"],
  "The Segway should experience a change in speed when going over speed bumps": ["Friction"]
}
</physics_rules>
<rewrite1>A Segway navigates speed bumps, its rubber tires generating friction as they rotate against the pavement. The rider leans forward, conserving momentum through the obstacle course while their elongated shadow reflects the low sun angle. Each bump momentarily reduces speed as friction increases between wheels and concrete.</rewrite1>
<rewrite2>Over each small speed bump the Segway slows briefly, wheel friction gripping the asphalt while the balanced rider carries their shared momentum forward.</rewrite2>
<rewrite3>The Segway's wheels rotate against the road surface (friction), and rider plus machine keep moving forward (conservation of momentum) as small bumps nudge their speed.</rewrite3>
<rewrite4>A rider glides on a Segway across a row of speed bumps; every crossing trades a little speed to friction while balance keeps the pair upright.</rewrite4>
<rewrite5>Bump by bump the Segway rolls on, tires flexing with friction, momentum conserved in the steady forward drift of rider and machine.</rewrite5>
"#;

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String> {
        if self.fail {
            return Err(Error::Client("mock configured to fail".into()));
        }
        if let Some(fx) = self.fixtures.get(&content_hash(prompt)) {
            return Ok(fx.clone());
        }
        let scene = Self::scene_of(prompt);
        let out = if prompt.starts_with("TASK: PHYSICAL_ATTRIBUTES") {
            self.gen_attributes(&scene)
        } else if prompt.starts_with("TASK: PHYSICAL_PHENOMENA") {
            self.gen_phenomena(&scene)
        } else if prompt.starts_with("TASK: ENHANCE_PROMPT") {
            self.gen_enhancement(&scene)
        } else if prompt.starts_with("TASK: EXTRACT_PHYSICS_RULES") {
            self.gen_rules(&scene)
        } else {
            self.gen_enhancement(&scene)
        };
        Ok(out)
    }

    fn name(&self) -> &str {
        "mock-llm"
    }
}
