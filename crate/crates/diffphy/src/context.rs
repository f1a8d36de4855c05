//! Chain-of-thought physical context reasoning.
//!
//! Turns a short user prompt into structured physical attributes, a list of
//! checkable phenomenon facts, and an enhanced prompt, via a pluggable
//! [`LlmClient`]. Also hosts the tagged rules-document parser used by the
//! dataset pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{DecodeParams, LlmClient};
use crate::util::{content_hash, word_count};

pub const MAX_PROMPT_CHARS: usize = 2_000;
pub const ENHANCED_WORD_LIMIT: usize = 70;
pub const DEFAULT_MAX_FACTS: usize = 8;

/// Validated user prompt: trimmed, nonempty, bounded length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserPrompt {
    text: String,
}

impl UserPrompt {
    pub fn new(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Precondition("prompt must be nonempty".into()));
        }
        if trimmed.chars().count() > MAX_PROMPT_CHARS {
            return Err(Error::Precondition(format!(
                "prompt exceeds {MAX_PROMPT_CHARS} characters"
            )));
        }
        Ok(Self { text: trimmed.to_string() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn content_key(&self) -> String {
        content_hash(&self.text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhysicalAttribute {
    pub principle: String,
    pub initiator: String,
    pub affected: String,
    pub interaction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhenomenonFact {
    /// Ordinal id, 1-based and contiguous within a fact list.
    pub id: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhysicalContext {
    pub attributes: Vec<PhysicalAttribute>,
    pub phenomena: Vec<PhenomenonFact>,
    pub enhanced_prompt: String,
}

/// Plain-text prompt templates with `{placeholder}` substitution.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub attributes: String,
    pub phenomena: String,
    pub enhance: String,
    pub rules: String,
    pub fact_check: String,
    pub commonsense: String,
    pub semantic: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            attributes: include_str!("../templates/attributes.txt").to_string(),
            phenomena: include_str!("../templates/phenomena.txt").to_string(),
            enhance: include_str!("../templates/enhance.txt").to_string(),
            rules: include_str!("../templates/rules.txt").to_string(),
            fact_check: include_str!("../templates/fact_check.txt").to_string(),
            commonsense: include_str!("../templates/commonsense.txt").to_string(),
            semantic: include_str!("../templates/semantic.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Load overrides from a directory of `<name>.txt` files; missing files
    /// keep the built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("attributes", &mut t.attributes),
            ("phenomena", &mut t.phenomena),
            ("enhance", &mut t.enhance),
            ("rules", &mut t.rules),
            ("fact_check", &mut t.fact_check),
            ("commonsense", &mut t.commonsense),
            ("semantic", &mut t.semantic),
        ] {
            let p = dir.join(format!("{name}.txt"));
            if p.exists() {
                *slot = std::fs::read_to_string(p)?;
            }
        }
        Ok(t)
    }
}

pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn attributes_summary(attributes: &[PhysicalAttribute]) -> String {
    attributes
        .iter()
        .map(|a| {
            format!(
                "- {} ({} -> {}): {}",
                a.principle, a.initiator, a.affected, a.interaction
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn phenomena_summary(phenomena: &[PhenomenonFact]) -> String {
    phenomena
        .iter()
        .map(|f| format!("{}. {}", f.id, f.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Step 1+2 of the CoT pipeline: structured physical attributes.
pub fn reason_attributes(
    prompt: &UserPrompt,
    client: &dyn LlmClient,
    templates: &PromptTemplates,
    params: &DecodeParams,
) -> Result<Vec<PhysicalAttribute>> {
    let rendered = render_template(&templates.attributes, &[("prompt", prompt.text())]);
    let raw = client.complete(&rendered, params)?;
    let attrs = parse_attributes(&raw)?;
    if attrs.is_empty() {
        return Err(Error::Parse { reason: "no attribute lines found".into(), raw });
    }
    Ok(attrs)
}

fn parse_attributes(raw: &str) -> Result<Vec<PhysicalAttribute>> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let line = line.trim();
        if !line.contains("PRINCIPLE:") {
            continue;
        }
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        for part in line.split('|') {
            let part = part.trim();
            if let Some((key, val)) = part.split_once(':') {
                fields.insert(
                    match key.trim() {
                        "PRINCIPLE" => "principle",
                        "INITIATOR" => "initiator",
                        "AFFECTED" => "affected",
                        "INTERACTION" => "interaction",
                        _ => continue,
                    },
                    val.trim().to_string(),
                );
            }
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or_else(|| Error::Parse {
                    reason: format!("attribute line missing {k}"),
                    raw: raw.to_string(),
                })
        };
        out.push(PhysicalAttribute {
            principle: get("principle")?,
            initiator: get("initiator")?,
            affected: get("affected")?,
            interaction: fields.get("interaction").cloned().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Outcome of phenomena reasoning; `truncated` is set when the completion
/// carried more facts than `max_facts`.
#[derive(Debug, Clone)]
pub struct PhenomenaOutcome {
    pub facts: Vec<PhenomenonFact>,
    pub truncated: bool,
}

pub fn reason_phenomena(
    prompt: &UserPrompt,
    attributes: &[PhysicalAttribute],
    client: &dyn LlmClient,
    templates: &PromptTemplates,
    params: &DecodeParams,
    max_facts: usize,
) -> Result<PhenomenaOutcome> {
    if attributes.is_empty() {
        return Err(Error::Precondition("attributes must be nonempty".into()));
    }
    let rendered = render_template(
        &templates.phenomena,
        &[
            ("prompt", prompt.text()),
            ("attributes", &attributes_summary(attributes)),
        ],
    );
    let raw = client.complete(&rendered, params)?;
    let mut facts = parse_phenomena(&raw)?;
    if facts.is_empty() {
        return Err(Error::Parse { reason: "no numbered fact lines found".into(), raw });
    }
    let truncated = facts.len() > max_facts;
    facts.truncate(max_facts);
    // Reassign contiguous ids after truncation.
    for (i, f) in facts.iter_mut().enumerate() {
        f.id = i + 1;
    }
    Ok(PhenomenaOutcome { facts, truncated })
}

fn parse_phenomena(raw: &str) -> Result<Vec<PhenomenonFact>> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let line = line.trim();
        let Some((num, rest)) = line.split_once('.') else { continue };
        if num.parse::<usize>().is_err() {
            continue;
        }
        let rest = rest.trim();
        let (text, tags) = match rest.rfind("[tags:") {
            Some(pos) => {
                let tag_str = rest[pos + 6..].trim_end_matches(']').trim();
                let tags = tag_str
                    .split(';')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .collect();
                (rest[..pos].trim().to_string(), tags)
            }
            None => (rest.to_string(), Vec::new()),
        };
        if text.is_empty() {
            continue;
        }
        out.push(PhenomenonFact { id: out.len() + 1, text, tags });
    }
    Ok(out)
}

/// Entities whose preservation the enhancement contract checks: the literal
/// initiator/affected strings the attribute reasoner produced, restricted to
/// those actually named in the user prompt (hallucinated entities are
/// allowed to be absent from the original text).
pub fn prompt_entities(prompt: &UserPrompt, attributes: &[PhysicalAttribute]) -> Vec<String> {
    let lower = prompt.text().to_lowercase();
    let mut out = Vec::new();
    for a in attributes {
        for e in [&a.initiator, &a.affected] {
            let el = e.to_lowercase();
            if lower.contains(&el) && !out.contains(&el) {
                out.push(el);
            }
        }
    }
    out
}

fn enhancement_violation(text: &str, entities: &[String]) -> Option<String> {
    if word_count(text) > ENHANCED_WORD_LIMIT {
        return Some(format!(
            "enhanced prompt has {} words (limit {ENHANCED_WORD_LIMIT})",
            word_count(text)
        ));
    }
    let lower = text.to_lowercase();
    for e in entities {
        if !lower.contains(e) {
            return Some(format!("entity {e:?} missing from enhanced prompt"));
        }
    }
    None
}

/// Step 5: the enhanced prompt, with one automatic retry when the completion
/// breaks the 70-word or entity-preservation contract.
pub fn enhance_prompt(
    prompt: &UserPrompt,
    attributes: &[PhysicalAttribute],
    phenomena: &[PhenomenonFact],
    client: &dyn LlmClient,
    templates: &PromptTemplates,
    params: &DecodeParams,
) -> Result<String> {
    if attributes.is_empty() || phenomena.is_empty() {
        return Err(Error::Precondition(
            "attributes and phenomena must be populated before enhancement".into(),
        ));
    }
    let entities = prompt_entities(prompt, attributes);
    let mut last_violation = String::new();
    for attempt in 1..=2 {
        let rendered = render_template(
            &templates.enhance,
            &[
                ("prompt", prompt.text()),
                ("attributes", &attributes_summary(attributes)),
                ("phenomena", &phenomena_summary(phenomena)),
                ("attempt", &attempt.to_string()),
            ],
        );
        let raw = client.complete(&rendered, params)?;
        let text = raw.trim().to_string();
        match enhancement_violation(&text, &entities) {
            None => return Ok(text),
            Some(v) => last_violation = v,
        }
    }
    Err(Error::Validation(last_violation))
}

/// Full CoT pipeline: attributes, phenomena, enhanced prompt.
pub fn reason_context(
    prompt: &UserPrompt,
    client: &dyn LlmClient,
    templates: &PromptTemplates,
    params: &DecodeParams,
    max_facts: usize,
) -> Result<PhysicalContext> {
    let attributes = reason_attributes(prompt, client, templates, params)?;
    let outcome = reason_phenomena(prompt, &attributes, client, templates, params, max_facts)?;
    let enhanced_prompt =
        enhance_prompt(prompt, &attributes, &outcome.facts, client, templates, params)?;
    Ok(PhysicalContext { attributes, phenomena: outcome.facts, enhanced_prompt })
}

/// Persist a reasoned context as JSON keyed by the prompt's content hash.
pub fn save_context(dir: &Path, prompt: &UserPrompt, ctx: &PhysicalContext) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", prompt.content_key()));
    let json = serde_json::to_string_pretty(ctx)
        .map_err(|e| Error::Json(e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn load_context(dir: &Path, prompt: &UserPrompt) -> Result<Option<PhysicalContext>> {
    let path = dir.join(format!("{}.json", prompt.content_key()));
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let ctx = serde_json::from_str(&text).map_err(|e| Error::Json(e.to_string()))?;
    Ok(Some(ctx))
}

/// Parsed tagged rules document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRules {
    /// observation -> physics-principle labels
    pub rules: BTreeMap<String, Vec<String>>,
    /// Up to five rewrites; fewer than five is tolerated with `short` set.
    pub rewrites: Vec<String>,
    pub short: bool,
}

fn extract_tag<'a>(raw: &'a str, tag: &str) -> Result<Option<&'a str>> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    match (raw.find(&open), raw.find(&close)) {
        (Some(a), Some(b)) if b >= a + open.len() => Ok(Some(&raw[a + open.len()..b])),
        (None, None) => Ok(None),
        _ => Err(Error::Tag(format!("unbalanced <{tag}> block"))),
    }
}

/// Parse a `<physics_rules>` + `<rewriteN>` document.
pub fn parse_structured_rules(raw: &str) -> Result<ParsedRules> {
    let rules_block = extract_tag(raw, "physics_rules")?
        .ok_or_else(|| Error::Tag("missing <physics_rules> block".into()))?;
    let rules: BTreeMap<String, Vec<String>> = serde_json::from_str(rules_block.trim())
        .map_err(|e| Error::Json(e.to_string()))?;
    let mut rewrites = Vec::new();
    for i in 1..=5 {
        match extract_tag(raw, &format!("rewrite{i}"))? {
            Some(text) => rewrites.push(text.trim().to_string()),
            None => break,
        }
    }
    let short = rewrites.len() < 5;
    Ok(ParsedRules { rules, rewrites, short })
}

/// Canonical serialization; `parse_structured_rules` inverts it exactly.
pub fn serialize_structured_rules(rules: &ParsedRules) -> String {
    let json = serde_json::to_string_pretty(&rules.rules).expect("rule map serializes");
    let mut out = format!("<physics_rules>\n{json}\n</physics_rules>\n");
    for (i, r) in rules.rewrites.iter().enumerate() {
        out.push_str(&format!("<rewrite{n}>{r}</rewrite{n}>\n", n = i + 1));
    }
    out
}
