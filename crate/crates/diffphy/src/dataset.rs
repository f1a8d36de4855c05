//! Dataset curation: ingest video/caption records, drop unrealistic scenes
//! via a pluggable realism classifier, annotate captions with structured
//! physics rules through the text LLM, and emit a JSON-lines corpus with a
//! manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{parse_structured_rules, render_template, PromptTemplates};
use crate::error::{Error, Result};
use crate::llm::{DecodeParams, LlmClient};

pub const DEFAULT_REALISM_THRESHOLD: f64 = 0.5;

/// One curated training record. `caption` stays the training text; the
/// rewrites ride along as auxiliary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub video_ref: String,
    pub caption: String,
    #[serde(default)]
    pub physics_rules: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub rewrites: Vec<String>,
    pub category: String,
    pub realism_score: f64,
    /// Set when rule extraction failed twice; the record is kept without
    /// rules for manual review.
    #[serde(default)]
    pub needs_review: bool,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record {} has an empty caption",
                self.video_ref
            )));
        }
        if !(0.0..=1.0).contains(&self.realism_score) {
            return Err(Error::Range(format!(
                "realism_score {} outside [0,1]",
                self.realism_score
            )));
        }
        if self.rewrites.len() > 5 {
            return Err(Error::Validation("more than 5 rewrites".into()));
        }
        Ok(())
    }
}

/// Zero-shot realism scoring backend.
pub trait RealismClassifier: Send + Sync {
    /// Probability in [0,1] that the caption describes realistic footage.
    fn realism(&self, caption: &str) -> Result<f64>;
}

/// Keyword-rule mock: captions mentioning cartoon/animation/game content
/// score low, everything else scores high.
#[derive(Debug, Clone, Default)]
pub struct KeywordClassifier;

const UNREAL_MARKERS: &[&str] = &[
    "cartoon", "animated", "animation", "anime", "game", "gameplay", "cgi", "render",
];

impl RealismClassifier for KeywordClassifier {
    fn realism(&self, caption: &str) -> Result<f64> {
        let lower = caption.to_lowercase();
        if UNREAL_MARKERS.iter().any(|m| lower.contains(m)) {
            Ok(0.05)
        } else {
            Ok(0.95)
        }
    }
}

/// Rigged classifier for tests: per-caption-substring scores with a default.
#[derive(Debug, Clone)]
pub struct RiggedClassifier {
    pub table: Vec<(String, f64)>,
    pub default: f64,
}

impl RealismClassifier for RiggedClassifier {
    fn realism(&self, caption: &str) -> Result<f64> {
        for (needle, score) in &self.table {
            if caption.contains(needle.as_str()) {
                return Ok(*score);
            }
        }
        Ok(self.default)
    }
}

/// Outcome of the realism filter; dropped records are logged, not mutated.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub accepted: Vec<DatasetRecord>,
    /// (video_ref, realism_score) of each dropped record.
    pub dropped: Vec<(String, f64)>,
}

/// Score captions and keep records at or above the threshold. Contents are
/// never mutated apart from recording the classifier's score.
pub fn filter_realistic(
    records: &[DatasetRecord],
    classifier: &dyn RealismClassifier,
    threshold: f64,
) -> Result<FilterOutcome> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0,1]")));
    }
    let mut accepted = Vec::new();
    let mut dropped = Vec::new();
    for r in records {
        r.validate()?;
        let score = classifier.realism(&r.caption)?;
        if score >= threshold {
            let mut kept = r.clone();
            kept.realism_score = score;
            accepted.push(kept);
        } else {
            dropped.push((r.video_ref.clone(), score));
        }
    }
    Ok(FilterOutcome { accepted, dropped })
}

/// Extract structured physics rules for one record's caption. A malformed
/// completion is retried once; a second failure flags the record for review
/// and keeps it without rules.
pub fn annotate(
    record: &DatasetRecord,
    client: &dyn LlmClient,
    templates: &PromptTemplates,
    params: &DecodeParams,
) -> Result<DatasetRecord> {
    record.validate()?;
    let mut out = record.clone();
    let mut last_err = None;
    for attempt in 0..2 {
        let prompt = render_template(&templates.rules, &[("prompt", &record.caption)]);
        let mut p = params.clone();
        p.seed = params.seed.wrapping_add(attempt);
        let raw = client.complete(&prompt, &p)?;
        match parse_structured_rules(&raw) {
            Ok(parsed) => {
                out.physics_rules = parsed.rules;
                out.rewrites = parsed.rewrites;
                out.needs_review = false;
                return Ok(out);
            }
            Err(e @ (Error::Tag(_) | Error::Json(_) | Error::Parse { .. })) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let _ = last_err;
    out.needs_review = true;
    out.physics_rules.clear();
    out.rewrites.clear();
    Ok(out)
}

/// Corpus manifest written next to the emitted JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub needs_review: usize,
    pub category_histogram: BTreeMap<String, usize>,
}

/// Write records as JSON-lines plus a manifest JSON. Byte-deterministic for
/// the same records, so re-running the pipeline is idempotent.
pub fn emit(records: &[DatasetRecord], jsonl_path: &Path, manifest_path: &Path) -> Result<Manifest> {
    for r in records {
        r.validate()?;
    }
    if let Some(parent) = jsonl_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(jsonl_path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Json(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    let mut category_histogram: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *category_histogram.entry(r.category.clone()).or_default() += 1;
    }
    let manifest = Manifest {
        count: records.len(),
        needs_review: records.iter().filter(|r| r.needs_review).count(),
        category_histogram,
    };
    if let Some(parent) = manifest_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json(e.to_string()))?;
    std::fs::write(manifest_path, json)?;
    Ok(manifest)
}

/// Load an emitted JSONL corpus back into records.
pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Json(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Read raw input rows (video_ref, caption, category) from CSV (with a
/// header) or JSON-lines, by extension.
pub fn read_input(path: &Path) -> Result<Vec<DatasetRecord>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let fresh = |video_ref: String, caption: String, category: String| DatasetRecord {
        video_ref,
        caption,
        physics_rules: BTreeMap::new(),
        rewrites: Vec::new(),
        category,
        realism_score: 0.0,
        needs_review: false,
    };
    match ext {
        "csv" => {
            let mut rdr = csv::Reader::from_reader(std::fs::File::open(path)?);
            let headers = rdr.headers().map_err(|e| Error::Parse {
                reason: e.to_string(),
                raw: String::new(),
            })?.clone();
            let idx = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Parse {
                        reason: format!("missing CSV column {name}"),
                        raw: headers.iter().collect::<Vec<_>>().join(","),
                    })
            };
            let (vi, ci, gi) = (idx("video_ref")?, idx("caption")?, idx("category")?);
            let mut out = Vec::new();
            for row in rdr.records() {
                let row = row.map_err(|e| Error::Parse { reason: e.to_string(), raw: String::new() })?;
                out.push(fresh(
                    row.get(vi).unwrap_or_default().to_string(),
                    row.get(ci).unwrap_or_default().to_string(),
                    row.get(gi).unwrap_or_default().to_string(),
                ));
            }
            Ok(out)
        }
        "jsonl" | "ndjson" => load_records(path),
        other => Err(Error::Config(format!("unsupported input extension {other:?}"))),
    }
}
