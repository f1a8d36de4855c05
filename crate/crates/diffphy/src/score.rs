//! Continuous expected score from verifier token logits.
//!
//! A verifier answers with text tokens. Each integer score `s` owns a group
//! of token spellings (e.g. "1" and "one" both mean score 1). We softmax the
//! logits of all grouped tokens only — everything else is filtered out — and
//! return the score-weighted average. The result is smooth in every retained
//! logit, which is what lets it drive gradient updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Score support and per-score token groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSpec {
    /// Ordered integer score support.
    pub support: Vec<i64>,
    /// Token spellings for each score. Matching is case-insensitive.
    pub groups: BTreeMap<i64, Vec<String>>,
}

impl ScoreSpec {
    pub fn new(support: Vec<i64>, groups: BTreeMap<i64, Vec<String>>) -> Result<Self> {
        let spec = Self { support, groups };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::Config("score support is empty".into()));
        }
        let mut sorted = self.support.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.support.len() {
            return Err(Error::Config("duplicate scores in support".into()));
        }
        let keys: Vec<i64> = self.groups.keys().copied().collect();
        if keys != sorted {
            return Err(Error::Config(
                "token groups must cover exactly the support".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (s, toks) in &self.groups {
            if toks.is_empty() {
                return Err(Error::Config(format!("empty token group for score {s}")));
            }
            for t in toks {
                if !seen.insert(t.to_lowercase()) {
                    return Err(Error::Config(format!(
                        "token {t:?} appears in more than one group"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Standard 1..5 quality spec with word variants.
    pub fn five_point() -> Self {
        let mut groups = BTreeMap::new();
        let words = ["one", "two", "three", "four", "five"];
        for (i, w) in words.iter().enumerate() {
            let s = i as i64 + 1;
            groups.insert(s, vec![s.to_string(), (*w).to_string()]);
        }
        Self { support: vec![1, 2, 3, 4, 5], groups }
    }

    /// Binary matched/not-matched spec for fact verification.
    pub fn binary() -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(0, vec!["0".to_string(), "no".to_string()]);
        groups.insert(1, vec!["1".to_string(), "yes".to_string()]);
        Self { support: vec![0, 1], groups }
    }

    pub fn min_score(&self) -> i64 {
        *self.support.iter().min().unwrap()
    }

    pub fn max_score(&self) -> i64 {
        *self.support.iter().max().unwrap()
    }

    /// Score owning a token spelling, case-insensitive.
    pub fn score_of(&self, token: &str) -> Option<i64> {
        let lower = token.to_lowercase();
        for (s, toks) in &self.groups {
            if toks.iter().any(|t| t.to_lowercase() == lower) {
                return Some(*s);
            }
        }
        None
    }
}

/// Logits for a subset of tokens. Absent tokens carry no probability mass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LogitVector {
    pub logits: BTreeMap<String, f64>,
}

impl LogitVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        let mut lv = Self::new();
        for (t, z) in pairs {
            lv.insert(t, *z);
        }
        lv
    }

    /// Non-finite logits are treated as excluded and not stored.
    pub fn insert(&mut self, token: &str, logit: f64) {
        if logit.is_finite() {
            self.logits.insert(token.to_string(), logit);
        }
    }

    pub fn get_ci(&self, token: &str) -> Option<f64> {
        let lower = token.to_lowercase();
        self.logits
            .iter()
            .find(|(k, _)| k.to_lowercase() == lower)
            .map(|(_, v)| *v)
    }
}

/// Tokens retained in score order: (token, score, logit).
fn grouped_logits(logits: &LogitVector, spec: &ScoreSpec) -> Vec<(String, i64, f64)> {
    let mut out = Vec::new();
    for s in &spec.support {
        for tok in &spec.groups[s] {
            if let Some(z) = logits.get_ci(tok) {
                out.push((tok.clone(), *s, z));
            }
        }
    }
    out
}

/// Expected score: softmax over the grouped logits, then score-weighted sum.
pub fn expected_score(logits: &LogitVector, spec: &ScoreSpec) -> Result<f64> {
    let entries = grouped_logits(logits, spec);
    if entries.is_empty() {
        return Err(Error::EmptySupport);
    }
    let zmax = entries.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = entries.iter().map(|e| (e.2 - zmax).exp()).sum();
    let mut e = 0.0;
    for (_, s, z) in &entries {
        e += *s as f64 * (z - zmax).exp() / denom;
    }
    Ok(e)
}

/// Expected score plus its gradient with respect to each retained logit:
/// dE/dz_t = p_t (s_t - E).
pub fn expected_score_grad(
    logits: &LogitVector,
    spec: &ScoreSpec,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let entries = grouped_logits(logits, spec);
    if entries.is_empty() {
        return Err(Error::EmptySupport);
    }
    let zmax = entries.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = entries.iter().map(|e| (e.2 - zmax).exp()).sum();
    let probs: Vec<f64> = entries.iter().map(|e| (e.2 - zmax).exp() / denom).collect();
    let e: f64 = entries
        .iter()
        .zip(&probs)
        .map(|((_, s, _), p)| *s as f64 * p)
        .sum();
    let mut grad = BTreeMap::new();
    for ((tok, s, _), p) in entries.iter().zip(&probs) {
        grad.insert(tok.clone(), p * (*s as f64 - e));
    }
    Ok((e, grad))
}

/// Tape-level expected score over a logit vector node.
///
/// `logit_var` is a flat tensor whose element `i` is the logit of a token
/// with score `token_scores[i]`. Returns a differentiable scalar node.
pub fn expected_score_var(tape: &mut Tape, logit_var: Var, token_scores: &[f64]) -> Result<Var> {
    let n = tape.value(logit_var).len();
    if n == 0 || token_scores.len() != n {
        return Err(Error::EmptySupport);
    }
    let row = tape.reshape(logit_var, vec![1, n]);
    let probs = tape.softmax_rows(row);
    let weights = tape.constant(Tensor::new(vec![1, token_scores.len()], token_scores.to_vec()));
    let weighted = tape.mul(probs, weights);
    Ok(tape.sum(weighted))
}

/// Drop everything outside the score spec's token groups from a full-vocabulary
/// logit map. Spec tokens missing from the vocabulary are reported back as
/// warnings rather than failing the call.
pub fn filter_valid_tokens(
    raw_logits: &BTreeMap<String, f64>,
    spec: &ScoreSpec,
) -> Result<(LogitVector, Vec<String>)> {
    let mut out = LogitVector::new();
    let mut warnings = Vec::new();
    let lower_vocab: BTreeMap<String, (&String, f64)> = raw_logits
        .iter()
        .map(|(k, v)| (k.to_lowercase(), (k, *v)))
        .collect();
    for s in &spec.support {
        for tok in &spec.groups[s] {
            match lower_vocab.get(&tok.to_lowercase()) {
                Some((orig, z)) => out.insert(orig, *z),
                None => warnings.push(format!("spec token {tok:?} not in vocabulary")),
            }
        }
    }
    if out.logits.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent brute-force oracle: explicit exp/normalize loop with no
    /// max subtraction and no shared code with `expected_score`.
    pub(crate) fn oracle_expected_score(logits: &LogitVector, spec: &ScoreSpec) -> Option<f64> {
        let mut pairs: Vec<(f64, f64)> = Vec::new(); // (score, logit)
        for (s, toks) in &spec.groups {
            for t in toks {
                for (k, z) in &logits.logits {
                    if k.to_lowercase() == t.to_lowercase() {
                        pairs.push((*s as f64, *z));
                    }
                }
            }
        }
        if pairs.is_empty() {
            return None;
        }
        let denom: f64 = pairs.iter().map(|(_, z)| z.exp()).sum();
        Some(pairs.iter().map(|(s, z)| s * z.exp() / denom).sum())
    }

    #[test]
    fn all_mass_on_single_group_gives_that_score() {
        let spec = ScoreSpec::five_point();
        let logits = LogitVector::from_pairs(&[("3", 1.7)]);
        assert!((expected_score(&logits, &spec).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_group_fixture_matches_hand_softmax() {
        let mut groups = BTreeMap::new();
        groups.insert(1, vec!["1".into(), "one".into()]);
        groups.insert(5, vec!["5".into()]);
        let spec = ScoreSpec::new(vec![1, 5], groups).unwrap();
        let logits = LogitVector::from_pairs(&[("1", 2.0), ("one", 1.0), ("5", 2.0)]);
        let e = expected_score(&logits, &spec).unwrap();
        let oracle = oracle_expected_score(&logits, &spec).unwrap();
        assert!((e - oracle).abs() < 1e-12);
        // p(1) = (e^2 + e^1) / (2 e^2 + e^1), p(5) = e^2 / (...)
        let d = 2.0 * 2f64.exp() + 1f64.exp();
        let p1 = (2f64.exp() + 1f64.exp()) / d;
        let p5 = 2f64.exp() / d;
        assert!((p1 - 0.5777).abs() < 1e-3 && (p5 - 0.4223).abs() < 1e-3);
        assert!((e - 2.689).abs() < 1e-3);
        assert!((e - (p1 + 5.0 * p5)).abs() < 1e-12);
    }

    #[test]
    fn binary_fixture_gives_three_quarters() {
        let spec = ScoreSpec::binary();
        let logits = LogitVector::from_pairs(&[("yes", 3f64.ln()), ("0", 0.0)]);
        let e = expected_score(&logits, &spec).unwrap();
        assert!((e - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_support_is_an_error() {
        let spec = ScoreSpec::binary();
        let logits = LogitVector::from_pairs(&[("banana", 1.0)]);
        assert!(matches!(expected_score(&logits, &spec), Err(Error::EmptySupport)));
    }

    #[test]
    fn filter_keeps_only_grouped_tokens() {
        let spec = ScoreSpec::binary();
        let mut raw = BTreeMap::new();
        raw.insert("1".to_string(), 0.3);
        raw.insert("one".to_string(), 0.1);
        raw.insert("banana".to_string(), 9.0);
        raw.insert("no".to_string(), -0.2);
        let (lv, warnings) = filter_valid_tokens(&raw, &spec).unwrap();
        assert_eq!(lv.logits.len(), 2); // "1" and "no"; "one" not in binary groups
        assert!(!lv.logits.contains_key("banana"));
        assert_eq!(warnings.len(), 2); // "0" and "yes" unresolved
    }

    #[test]
    fn unresolvable_spec_token_warns() {
        let mut groups = BTreeMap::new();
        groups.insert(5, vec!["5".into(), "fünf".into()]);
        let spec = ScoreSpec::new(vec![5], groups).unwrap();
        let mut raw = BTreeMap::new();
        raw.insert("5".to_string(), 1.0);
        let (lv, warnings) = filter_valid_tokens(&raw, &spec).unwrap();
        assert_eq!(lv.logits.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("fünf"));
    }

    #[test]
    fn no_resolvable_token_is_empty_support() {
        let spec = ScoreSpec::binary();
        let raw = BTreeMap::from([("banana".to_string(), 1.0)]);
        assert!(matches!(filter_valid_tokens(&raw, &spec), Err(Error::EmptySupport)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ScoreSpec::five_point();
        let logits = LogitVector::from_pairs(&[
            ("1", 0.5),
            ("two", -0.3),
            ("3", 1.1),
            ("four", 0.0),
            ("5", 0.9),
        ]);
        let (_, grad) = expected_score_grad(&logits, &spec).unwrap();
        let h = 1e-5;
        for tok in ["1", "two", "3", "four", "5"] {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            *plus.logits.get_mut(tok).unwrap() += h;
            *minus.logits.get_mut(tok).unwrap() -= h;
            let fd = (expected_score(&plus, &spec).unwrap()
                - expected_score(&minus, &spec).unwrap())
                / (2.0 * h);
            let an = grad[tok];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5,
                "token {tok}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn tape_expected_score_matches_pure_path() {
        let spec = ScoreSpec::five_point();
        let logits = LogitVector::from_pairs(&[("1", 0.4), ("3", -0.2), ("five", 1.3)]);
        let pure = expected_score(&logits, &spec).unwrap();
        let entries = grouped_logits(&logits, &spec);
        let zs: Vec<f64> = entries.iter().map(|e| e.2).collect();
        let scores: Vec<f64> = entries.iter().map(|e| e.1 as f64).collect();
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::new(vec![zs.len()], zs));
        let e = expected_score_var(&mut tape, lv, &scores).unwrap();
        assert!((tape.value(e).item() - pure).abs() < 1e-12);
    }

    #[test]
    fn rejects_cross_group_duplicate_tokens() {
        let mut groups = BTreeMap::new();
        groups.insert(0, vec!["no".into()]);
        groups.insert(1, vec!["No".into()]);
        assert!(ScoreSpec::new(vec![0, 1], groups).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance_and_bounds(
            zs in proptest::collection::vec(-20.0f64..20.0, 1..10),
            shift in -50.0f64..50.0,
        ) {
            let spec = ScoreSpec::five_point();
            let tokens = ["1", "two", "3", "four", "5", "one", "2", "three", "4"];
            let mut a = LogitVector::new();
            let mut b = LogitVector::new();
            for (i, z) in zs.iter().enumerate() {
                a.insert(tokens[i], *z);
                b.insert(tokens[i], *z + shift);
            }
            let ea = expected_score(&a, &spec).unwrap();
            let eb = expected_score(&b, &spec).unwrap();
            prop_assert!((ea - eb).abs() < 1e-9);
            prop_assert!(ea >= 1.0 - 1e-12 && ea <= 5.0 + 1e-12);
        }

        #[test]
        fn raising_top_group_logit_never_decreases_expectation(
            base in -3.0f64..3.0, bump in 0.0f64..5.0,
        ) {
            let spec = ScoreSpec::five_point();
            let mut a = LogitVector::from_pairs(&[("1", 0.2), ("3", -0.1), ("5", base)]);
            let ea = expected_score(&a, &spec).unwrap();
            a.insert("5", base + bump);
            let eb = expected_score(&a, &spec).unwrap();
            prop_assert!(eb + 1e-12 >= ea);
        }
    }
}
