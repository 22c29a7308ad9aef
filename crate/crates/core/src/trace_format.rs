//! Trace fixture files.
//!
//! One JSON document per line; blank lines and lines starting with `#` are
//! skipped. Fields, in the order they are written:
//!
//! | field              | type                 | notes                                              |
//! |--------------------|----------------------|----------------------------------------------------|
//! | `prompt`           | string               | prompt label                                       |
//! | `ground_truth`     | string               | answer for hypothesis 0                            |
//! | `candidates`       | array of strings     | sampled answers, hypotheses `1..`                  |
//! | `verifier`         | `0` or `1`           | final-answer check of this rollout                 |
//! | `probs`            | array of number rows | `1 + len(candidates)` rows of `T + 1` values       |
//! | `observed_rewards` | array of numbers     | optional; defaults to progress of row 0, length `T`|
//!
//! Numbers are written with shortest round-trip formatting, so parsing and
//! re-serializing a file written by [`serialize_documents`] reproduces it byte
//! for byte.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::advantage::{CotTrace, StepAdvantages};
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisSet;

const FIELDS: [&str; 6] = [
    "prompt",
    "ground_truth",
    "candidates",
    "verifier",
    "probs",
    "observed_rewards",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceDocument {
    pub prompt: String,
    pub ground_truth: String,
    pub candidates: Vec<String>,
    #[serde(serialize_with = "verifier_as_bit")]
    pub verifier: bool,
    pub probs: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_rewards: Option<Vec<f64>>,
}

fn verifier_as_bit<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

impl TraceDocument {
    /// Ground truth followed by the candidates, duplicates kept.
    pub fn answers(&self) -> Vec<String> {
        std::iter::once(self.ground_truth.clone())
            .chain(self.candidates.iter().cloned())
            .collect()
    }

    pub fn hypotheses(&self) -> Result<HypothesisSet<String>> {
        HypothesisSet::from_answers(self.answers(), true)
    }

    pub fn to_trace(&self) -> Result<CotTrace> {
        match &self.observed_rewards {
            Some(r) => CotTrace::new(&self.prompt, self.probs.clone(), self.verifier, r.clone()),
            None => CotTrace::from_probs(&self.prompt, self.probs.clone(), self.verifier),
        }
    }
}

struct LineCtx {
    line: usize,
}

impl LineCtx {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn string(&self, obj: &Map<String, Value>, field: &str) -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.err(field, "expected a string")),
            None => Err(self.err(field, "missing")),
        }
    }

    fn number(&self, v: &Value, field: &str) -> Result<f64> {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(field, format!("expected a finite number, got {v}")))
    }

    fn numbers(&self, v: &Value, field: &str) -> Result<Vec<f64>> {
        let items = v
            .as_array()
            .ok_or_else(|| self.err(field, "expected an array of numbers"))?;
        items
            .iter()
            .enumerate()
            .map(|(k, x)| self.number(x, &format!("{field}[{k}]")))
            .collect()
    }
}

/// Parses one trace document, reporting errors against `line` (1-based).
pub fn parse_document(text: &str, line: usize) -> Result<TraceDocument> {
    let ctx = LineCtx { line };
    let value: Value = serde_json::from_str(text).map_err(|e| ctx.err("document", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ctx.err("document", "expected a JSON object"))?;
    if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(ctx.err(unknown, "unknown field"));
    }

    let prompt = ctx.string(obj, "prompt")?;
    let ground_truth = ctx.string(obj, "ground_truth")?;
    let candidates = match obj.get("candidates") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(k, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ctx.err(&format!("candidates[{k}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(ctx.err("candidates", "expected an array of strings")),
        None => return Err(ctx.err("candidates", "missing")),
    };
    let verifier = match obj.get("verifier").and_then(Value::as_u64) {
        Some(0) => false,
        Some(1) => true,
        _ if obj.contains_key("verifier") => return Err(ctx.err("verifier", "expected 0 or 1")),
        _ => return Err(ctx.err("verifier", "missing")),
    };
    let rows = match obj.get("probs") {
        Some(Value::Array(rows)) => rows,
        Some(_) => return Err(ctx.err("probs", "expected an array of rows")),
        None => return Err(ctx.err("probs", "missing")),
    };
    let probs = rows
        .iter()
        .enumerate()
        .map(|(i, row)| ctx.numbers(row, &format!("probs[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let observed_rewards = obj
        .get("observed_rewards")
        .map(|v| ctx.numbers(v, "observed_rewards"))
        .transpose()?;

    if probs.len() != candidates.len() + 1 {
        return Err(ctx.err(
            "probs",
            format!("expected {} rows (ground truth + candidates), got {}", candidates.len() + 1, probs.len()),
        ));
    }
    let cols = probs[0].len();
    if cols < 2 {
        return Err(ctx.err("probs[0]", "need at least two contexts"));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != cols {
            return Err(ctx.err(&format!("probs[{i}]"), format!("expected {cols} values, got {}", row.len())));
        }
        if let Some((k, p)) = row.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(ctx.err(&format!("probs[{i}][{k}]"), format!("probability {p} outside [0, 1]")));
        }
    }
    if let Some(r) = &observed_rewards {
        if r.len() != cols - 1 {
            return Err(ctx.err("observed_rewards", format!("expected {} values, got {}", cols - 1, r.len())));
        }
    }

    Ok(TraceDocument {
        prompt,
        ground_truth,
        candidates,
        verifier,
        probs,
        observed_rewards,
    })
}

/// Parses a whole fixture file.
pub fn parse_documents(text: &str) -> Result<Vec<TraceDocument>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(k, l)| parse_document(l, k + 1))
        .collect()
}

pub fn serialize_document(doc: &TraceDocument) -> Result<String> {
    Ok(serde_json::to_string(doc)?)
}

pub fn serialize_documents(docs: &[TraceDocument]) -> Result<String> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serialize_document(doc)?);
        out.push('\n');
    }
    Ok(out)
}

/// Advantages for one trace alongside the answers they were computed for.
#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    pub prompt: String,
    pub answers: Vec<String>,
    #[serde(flatten)]
    pub advantages: StepAdvantages,
}

pub fn reports_csv(reports: &[TraceReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", StepAdvantages::CSV_HEADER);
    for (k, r) in reports.iter().enumerate() {
        for row in r.advantages.csv_rows(k, &r.answers) {
            let _ = writeln!(out, "{row}");
        }
    }
    out
}

pub fn reports_json(reports: &[TraceReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(reports)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{"prompt":"q1","ground_truth":"12","candidates":["12","7"],"verifier":1,"probs":[[0.1,0.35,0.8],[0.1,0.35,0.8],[0.3,0.2,0.05]]}"#;

    #[test]
    fn parses_and_round_trips() {
        let doc = parse_document(SAMPLE, 1).unwrap();
        assert_eq!(doc.answers(), vec!["12", "12", "7"]);
        assert!(doc.verifier);
        assert_eq!(serialize_document(&doc).unwrap(), SAMPLE);
        let trace = doc.to_trace().unwrap();
        assert_eq!(trace.num_steps(), 2);
        assert!((trace.observed_rewards[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn explicit_rewards_round_trip() {
        let text = r#"{"prompt":"p","ground_truth":"a","candidates":[],"verifier":0,"probs":[[0.5,0.5]],"observed_rewards":[0.125]}"#;
        let doc = parse_document(text, 1).unwrap();
        assert_eq!(doc.observed_rewards, Some(vec![0.125]));
        assert_eq!(serialize_document(&doc).unwrap(), text);
    }

    #[test]
    fn awkward_floats_survive() {
        let mut doc = parse_document(SAMPLE, 1).unwrap();
        doc.probs[2] = vec![0.1 + 0.2, 1.0 / 3.0, 5e-324];
        let text = serialize_document(&doc).unwrap();
        assert_eq!(parse_document(&text, 1).unwrap(), doc);
    }

    fn parse_error(text: &str) -> (usize, String) {
        match parse_documents(text) {
            Err(Error::Parse { line, field, .. }) => (line, field),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_line_and_field() {
        let bad_prob = SAMPLE.replace("0.05", "1.5");
        assert_eq!(parse_error(&format!("{SAMPLE}\n\n{bad_prob}\n")), (3, "probs[2][2]".into()));
        let no_verifier = SAMPLE.replace(r#""verifier":1,"#, "");
        assert_eq!(parse_error(&no_verifier), (1, "verifier".into()));
        let bit = SAMPLE.replace(r#""verifier":1"#, r#""verifier":2"#);
        assert_eq!(parse_error(&bit), (1, "verifier".into()));
        let ragged = SAMPLE.replace("[0.3,0.2,0.05]", "[0.3,0.2]");
        assert_eq!(parse_error(&ragged), (1, "probs[2]".into()));
        let rows = SAMPLE.replace(r#","7""#, "");
        assert_eq!(parse_error(&rows), (1, "probs".into()));
        let extra = SAMPLE.replace(r#""prompt""#, r#""tokens":[],"prompt""#);
        assert_eq!(parse_error(&extra), (1, "tokens".into()));
        assert_eq!(parse_error("# header\n{not json"), (2, "document".into()));
        let cand = SAMPLE.replace(r#""7""#, "7");
        assert_eq!(parse_error(&cand), (1, "candidates[1]".into()));
    }

    #[test]
    fn csv_has_one_row_per_step_and_hypothesis() {
        let doc = parse_document(SAMPLE, 1).unwrap();
        let adv = crate::advantage::step_advantages(
            &doc.to_trace().unwrap(),
            &doc.hypotheses().unwrap(),
            crate::bayes::ConsistencyParams::finite(1.0).unwrap(),
        )
        .unwrap();
        let report = TraceReport {
            prompt: doc.prompt.clone(),
            answers: doc.answers(),
            advantages: adv,
        };
        let csv = reports_csv(&[report]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], StepAdvantages::CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}
