//! Splitting raw model output into reasoning and answer, and reading ids or
//! strings out of the answer span.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no <answer>...</answer> span in model output")]
    NoAnswerTag,
    #[error("answer span contains no integers: `{0}`")]
    NoIntegers(String),
}

const OPEN: &str = "<answer>";
const CLOSE: &str = "</answer>";

/// Raw model output split into its parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub raw: String,
    /// Text before the answer span with think tags removed; logged only.
    pub thinking: Option<String>,
    /// Contents of the last complete `<answer>` span.
    pub answer_payload: Option<String>,
}

impl GenerationResult {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let (thinking, answer_payload) = match locate_answer(&raw) {
            Some((open, start, end)) => (
                clean_thinking(&raw[..open]),
                Some(raw[start..end].to_string()),
            ),
            None => (clean_thinking(&raw), None),
        };
        Self {
            raw,
            thinking,
            answer_payload,
        }
    }

    pub fn payload(&self) -> Result<&str, ParseError> {
        self.answer_payload
            .as_deref()
            .ok_or(ParseError::NoAnswerTag)
    }
}

/// The last `</answer>` and the nearest `<answer>` before it, which gives
/// the innermost span when tags nest. Returns (open tag, payload start,
/// payload end).
fn locate_answer(raw: &str) -> Option<(usize, usize, usize)> {
    let end = raw.rfind(CLOSE)?;
    let open = raw[..end].rfind(OPEN)?;
    Some((open, open + OPEN.len(), end))
}

fn clean_thinking(text: &str) -> Option<String> {
    let cleaned = text.replace("<think>", "").replace("</think>", "");
    let trimmed = cleaned.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Ids read from an answer span.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSelection {
    /// Selected ids in answer order, deduplicated, all within `1..=max_id`.
    pub ids: Vec<usize>,
    /// Ids above `max_id`, dropped.
    pub dropped: Vec<u64>,
    /// The answer contained 0, which empties the selection.
    pub none_selected: bool,
}

/// Reads the integers of the answer span (every maximal run of ASCII
/// digits). Any 0 means "nothing selected"; out-of-range ids are dropped and
/// reported in [`IdSelection::dropped`].
pub fn extract_ids(result: &GenerationResult, max_id: usize) -> Result<IdSelection, ParseError> {
    let payload = result.payload()?;
    let numbers = digit_runs(payload);
    if numbers.is_empty() {
        return Err(ParseError::NoIntegers(payload.to_string()));
    }
    let mut selection = IdSelection::default();
    if numbers.contains(&0) {
        selection.none_selected = true;
        return Ok(selection);
    }
    for n in numbers {
        if n > max_id as u64 {
            selection.dropped.push(n);
        } else if !selection.ids.contains(&(n as usize)) {
            selection.ids.push(n as usize);
        }
    }
    Ok(selection)
}

/// Values of maximal digit runs; runs too long for `u64` saturate.
fn digit_runs(s: &str) -> Vec<u64> {
    let mut out = Vec::new();
    let mut current: Option<u64> = None;
    for b in s.bytes() {
        if b.is_ascii_digit() {
            let d = u64::from(b - b'0');
            current = Some(current.unwrap_or(0).saturating_mul(10).saturating_add(d));
        } else if let Some(n) = current.take() {
            out.push(n);
        }
    }
    out.extend(current);
    out
}

/// Splits the answer span on commas outside double quotes, trims each
/// piece, strips one pair of enclosing quotes and drops empties.
pub fn extract_strings(result: &GenerationResult) -> Result<Vec<String>, ParseError> {
    let payload = result.payload()?;
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut quoted = false;
    for ch in payload.chars() {
        match ch {
            '"' => {
                quoted = !quoted;
                current.push(ch);
            }
            ',' if !quoted => pieces.push(core::mem::take(&mut current)),
            _ => current.push(ch),
        }
    }
    pieces.push(current);
    Ok(pieces
        .into_iter()
        .filter_map(|p| {
            let t = p.trim();
            let t = t
                .strip_prefix('"')
                .and_then(|x| x.strip_suffix('"'))
                .map(str::trim)
                .unwrap_or(t);
            (!t.is_empty()).then(|| t.to_string())
        })
        .collect())
}

/// The output language allowed under constrained decoding: an answer span
/// holding `0` or candidate ids `1..=max_id` (one, or a `", "`-separated list
/// when `multi`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdConstraint {
    pub max_id: usize,
    pub multi: bool,
}

impl IdConstraint {
    pub fn new(max_id: usize, multi: bool) -> Self {
        Self { max_id, multi }
    }

    /// The same language as a regular expression, for servers that support
    /// guided decoding.
    pub fn regex(&self) -> String {
        let mut ids = String::new();
        for i in 1..=self.max_id {
            if i > 1 {
                ids.push('|');
            }
            ids.push_str(&i.to_string());
        }
        let body = match (self.max_id, self.multi) {
            (0, _) => "0".to_string(),
            (_, false) => alloc::format!("0|{ids}"),
            (_, true) => alloc::format!("0|(?:{ids})(?:, (?:{ids}))*"),
        };
        alloc::format!("<answer>(?:{body})</answer>")
    }

    fn is_id(&self, s: &str) -> bool {
        !s.is_empty()
            && s.bytes().all(|b| b.is_ascii_digit())
            && !s.starts_with('0')
            && s.parse::<usize>()
                .is_ok_and(|n| (1..=self.max_id).contains(&n))
    }

    /// Whether `output` is exactly a string of the constrained language.
    pub fn matches(&self, output: &str) -> bool {
        let Some(body) = output
            .strip_prefix(OPEN)
            .and_then(|s| s.strip_suffix(CLOSE))
        else {
            return false;
        };
        if body == "0" {
            return true;
        }
        if self.multi {
            body.split(", ").all(|id| self.is_id(id))
        } else {
            self.is_id(body)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(raw: &str, max: usize) -> Result<IdSelection, ParseError> {
        extract_ids(&GenerationResult::from_raw(raw), max)
    }

    #[test]
    fn id_examples() {
        assert_eq!(ids("<answer>2, 5</answer>", 6).unwrap().ids, vec![2, 5]);
        let zero = ids("<answer>0</answer>", 6).unwrap();
        assert!(zero.ids.is_empty() && zero.none_selected);
        let over = ids("<answer>7</answer>", 3).unwrap();
        assert!(over.ids.is_empty());
        assert_eq!(over.dropped, vec![7]);
        assert_eq!(
            ids("<answer>3 1 3, ID 2</answer>", 3).unwrap().ids,
            vec![3, 1, 2]
        );
        assert_eq!(
            ids("<answer>2, 0</answer>", 3).unwrap().ids,
            Vec::<usize>::new()
        );
    }

    #[test]
    fn id_errors() {
        assert_eq!(ids("I pick 2", 3), Err(ParseError::NoAnswerTag));
        assert_eq!(
            ids("<answer>none</answer>", 3),
            Err(ParseError::NoIntegers("none".into()))
        );
        assert_eq!(ids("<answer>2", 3), Err(ParseError::NoAnswerTag));
    }

    #[test]
    fn last_answer_wins_and_thinking_is_split() {
        let r = GenerationResult::from_raw(
            "<think>maybe <answer>1</answer>? no</think>\n<answer>3</answer>",
        );
        assert_eq!(r.answer_payload.as_deref(), Some("3"));
        assert_eq!(r.thinking.as_deref(), Some("maybe <answer>1</answer>? no"));
        let nested = GenerationResult::from_raw("<answer>x <answer>4</answer>");
        assert_eq!(nested.answer_payload.as_deref(), Some("4"));
        assert_eq!(
            GenerationResult::from_raw("<answer>1</answer>").thinking,
            None
        );
    }

    #[test]
    fn huge_numbers_are_dropped() {
        let r = ids("<answer>99999999999999999999999</answer>", 5).unwrap();
        assert!(r.ids.is_empty());
        assert_eq!(r.dropped, vec![u64::MAX]);
    }

    #[test]
    fn string_examples() {
        let s = |raw: &str| extract_strings(&GenerationResult::from_raw(raw)).unwrap();
        assert_eq!(
            s("<answer>sepsis, anthrax exposure</answer>"),
            vec!["sepsis", "anthrax exposure"]
        );
        assert!(s("<answer></answer>").is_empty());
        assert_eq!(
            s("<answer>\"fever, chills\", cough</answer>"),
            vec!["fever, chills", "cough"]
        );
        assert_eq!(s("<answer> , a ,, </answer>"), vec!["a"]);
        assert_eq!(
            extract_strings(&GenerationResult::from_raw("none")),
            Err(ParseError::NoAnswerTag)
        );
    }

    #[test]
    fn constraint_language() {
        let single = IdConstraint::new(3, false);
        assert!(single.matches("<answer>0</answer>"));
        assert!(single.matches("<answer>3</answer>"));
        assert!(!single.matches("<answer>4</answer>"));
        assert!(!single.matches("<answer>1, 2</answer>"));
        assert!(!single.matches("<answer>01</answer>"));
        assert!(!single.matches("think <answer>1</answer>"));
        let multi = IdConstraint::new(12, true);
        assert!(multi.matches("<answer>1, 12, 3</answer>"));
        assert!(!multi.matches("<answer>1,2</answer>"));
        assert!(!multi.matches("<answer>0, 1</answer>"));
        assert!(!multi.matches("<answer>13</answer>"));
        assert_eq!(single.regex(), "<answer>(?:0|1|2|3)</answer>");
        assert_eq!(IdConstraint::new(0, true).regex(), "<answer>(?:0)</answer>");
    }
}
