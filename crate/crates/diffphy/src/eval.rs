//! Benchmark aggregation: per-video physical-commonsense (PC) and semantic
//! adherence (SA) scores, the joint overall rule, and per-category means.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored video.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub video_id: String,
    pub category: String,
    /// Physical commonsense, 1..5.
    pub pc: f64,
    /// Semantic adherence, 1..5.
    pub sa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phenomena_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_score: Option<f64>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pc", self.pc), ("sa", self.sa)] {
            if !(1.0..=5.0).contains(&v) {
                return Err(Error::Range(format!(
                    "{name} = {v} outside [1,5] for video {}",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// 1 iff both PC and SA are at least 4; ties at exactly 4.0 pass.
pub fn overall(record: &EvalRecord) -> Result<u8> {
    record.validate()?;
    Ok(u8::from(record.pc >= 4.0 && record.sa >= 4.0))
}

/// Aggregated means for one category (or the corpus).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CategoryStats {
    pub count: usize,
    pub pc_mean: f64,
    pub sa_mean: f64,
    pub overall_mean: f64,
    pub phenomena_mean: Option<f64>,
    pub order_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_category: BTreeMap<String, CategoryStats>,
    /// Mean over all records (categories weighted by video count).
    pub weighted: CategoryStats,
    /// Mean of the per-category means (categories weighted equally).
    pub unweighted: CategoryStats,
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn optional_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(mean_of(values))
    }
}

fn stats_for(records: &[&EvalRecord]) -> Result<CategoryStats> {
    let pcs: Vec<f64> = records.iter().map(|r| r.pc).collect();
    let sas: Vec<f64> = records.iter().map(|r| r.sa).collect();
    let overalls: Vec<f64> = records
        .iter()
        .map(|r| overall(r).map(f64::from))
        .collect::<Result<_>>()?;
    let phen: Vec<f64> = records.iter().filter_map(|r| r.phenomena_score).collect();
    let ord: Vec<f64> = records.iter().filter_map(|r| r.order_score).collect();
    Ok(CategoryStats {
        count: records.len(),
        pc_mean: mean_of(&pcs),
        sa_mean: mean_of(&sas),
        overall_mean: mean_of(&overalls),
        phenomena_mean: optional_mean(&phen),
        order_mean: optional_mean(&ord),
    })
}

/// Per-category and corpus-level means. Unweighted corpus means average the
/// per-category means; weighted means average over all records directly.
pub fn aggregate(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records".into()));
    }
    let mut by_cat: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        by_cat.entry(r.category.clone()).or_default().push(r);
    }
    let mut per_category = BTreeMap::new();
    for (cat, rs) in &by_cat {
        per_category.insert(cat.clone(), stats_for(rs)?);
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let weighted = stats_for(&all)?;
    let cats: Vec<&CategoryStats> = per_category.values().collect();
    let unweighted = CategoryStats {
        count: records.len(),
        pc_mean: mean_of(&cats.iter().map(|c| c.pc_mean).collect::<Vec<_>>()),
        sa_mean: mean_of(&cats.iter().map(|c| c.sa_mean).collect::<Vec<_>>()),
        overall_mean: mean_of(&cats.iter().map(|c| c.overall_mean).collect::<Vec<_>>()),
        phenomena_mean: optional_mean(
            &cats.iter().filter_map(|c| c.phenomena_mean).collect::<Vec<_>>(),
        ),
        order_mean: optional_mean(&cats.iter().filter_map(|c| c.order_mean).collect::<Vec<_>>()),
    };
    Ok(EvalSummary { per_category, weighted, unweighted })
}

/// Read JSON-lines evaluation records; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Json(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write the per-category table (plus weighted/unweighted corpus rows) as CSV.
pub fn write_csv(path: &Path, summary: &EvalSummary) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "count", "pc", "sa", "overall", "phenomena", "order"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut row = |name: &str, s: &CategoryStats| -> Result<()> {
        w.write_record([
            name,
            &s.count.to_string(),
            &format!("{:.6}", s.pc_mean),
            &format!("{:.6}", s.sa_mean),
            &format!("{:.6}", s.overall_mean),
            &fmt_opt(s.phenomena_mean),
            &fmt_opt(s.order_mean),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))
    };
    for (cat, s) in &summary.per_category {
        row(cat, s)?;
    }
    row("ALL (weighted)", &summary.weighted)?;
    row("ALL (unweighted)", &summary.unweighted)?;
    w.flush()?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &EvalSummary) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Json(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Render a per-category bar chart of one metric as an uncompressed PGM
/// image (simple grayscale bars, tallest bar = highest mean).
pub fn write_bar_chart(path: &Path, summary: &EvalSummary, metric: &str) -> Result<()> {
    let values: Vec<(String, f64)> = summary
        .per_category
        .iter()
        .map(|(cat, s)| {
            let v = match metric {
                "pc" => s.pc_mean,
                "sa" => s.sa_mean,
                "overall" => s.overall_mean,
                other => return Err(Error::Config(format!("unknown plot metric {other}"))),
            };
            Ok((cat.clone(), v))
        })
        .collect::<Result<_>>()?;
    let max = values.iter().map(|(_, v)| *v).fold(f64::MIN, f64::max).max(1e-9);
    let (bar_w, gap, height) = (24usize, 8usize, 120usize);
    let width = values.len() * (bar_w + gap) + gap;
    let mut pixels = vec![255u8; width * height];
    for (i, (_, v)) in values.iter().enumerate() {
        let h = ((v / max) * (height as f64 - 2.0)).round() as usize;
        let x0 = gap + i * (bar_w + gap);
        for y in height - h..height {
            for x in x0..x0 + bar_w {
                pixels[y * width + x] = 64;
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "P5\n{width} {height}\n255")?;
    f.write_all(&pixels)?;
    Ok(())
}
