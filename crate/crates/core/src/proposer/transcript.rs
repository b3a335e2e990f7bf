//! Parsers for raw vision-language model answers.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Proposal, ProposalSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// "Choose from the following" answers naming classes in free text.
    Choice,
    /// Answers holding a `{label: score}` dictionary.
    Score,
    /// One "Is [CLASS] in the painting?" answer per class.
    #[serde(rename = "yesno", alias = "yes-no")]
    YesNo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmTranscript {
    pub image_id: String,
    pub kind: QueryKind,
    /// Queried class, for per-class kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub response: String,
}

/// A score answer whose dictionary could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreParseError {
    /// Byte offset into the response.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ScoreParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.message, self.offset)
    }
}

impl std::error::Error for ScoreParseError {}

fn is_trim_char(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation()
}

/// Lowercased label with surrounding punctuation and whitespace removed.
fn label_key(label: &str) -> String {
    label.trim_matches(is_trim_char).to_lowercase()
}

fn find_chars(hay: &[char], needle: &[char]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Classes named anywhere in a free-text answer, each with score 1.
///
/// Matching is case-insensitive substring containment. Longer labels are
/// matched first and their text masked out, so a label contained in a longer
/// matched label is not counted again.
pub fn zscp_parse_choice<S: AsRef<str>>(t: &VlmTranscript, vocabulary: &[S]) -> ProposalSet {
    let mut text: Vec<char> = t.response.to_lowercase().chars().collect();
    let keys: Vec<Vec<char>> = vocabulary
        .iter()
        .map(|l| label_key(l.as_ref()).chars().collect())
        .collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].len().cmp(&keys[a].len()).then(a.cmp(&b)));

    let mut hit = vec![false; keys.len()];
    for i in order {
        let key = &keys[i];
        while let Some(pos) = find_chars(&text, key) {
            hit[i] = true;
            for c in &mut text[pos..pos + key.len()] {
                *c = '\0';
            }
        }
    }
    ProposalSet {
        image_id: t.image_id.clone(),
        proposals: vocabulary
            .iter()
            .zip(hit)
            .filter(|(_, h)| *h)
            .map(|(l, _)| Proposal {
                label: l.as_ref().to_string(),
                score: 1.0,
            })
            .collect(),
    }
}

/// Byte range of the first balanced `{...}` in `s`, quotes respected.
fn first_dictionary(s: &str) -> Result<Option<(usize, usize)>, ScoreParseError> {
    let Some(open) = s.find('{') else {
        return Ok(None);
    };
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s[open..].char_indices() {
        let i = open + i;
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(Some((open, i)));
                }
            }
            _ => {}
        }
    }
    Err(ScoreParseError {
        offset: open,
        message: "unbalanced dictionary".into(),
    })
}

/// Splits the dictionary body at top-level commas; yields `(offset, entry)`.
fn split_entries(body: &str, base: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in body.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' | '[' | '(' => depth += 1,
            '}' | ']' | ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push((base + start, &body[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push((base + start, &body[start..]));
    out
}

/// `(key, value text, value offset)` of one `key: value` entry.
fn split_entry(entry: &str, base: usize) -> Result<(String, &str, usize), ScoreParseError> {
    let lead = entry.len() - entry.trim_start().len();
    let rest = &entry[lead..];
    let (key, after_key) = match rest.chars().next() {
        Some(q @ ('"' | '\'')) => {
            let body = &rest[1..];
            let mut escaped = false;
            let mut close = None;
            for (i, c) in body.char_indices() {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    close = Some(i);
                    break;
                }
            }
            let close = close.ok_or_else(|| ScoreParseError {
                offset: base + lead,
                message: "unterminated key".into(),
            })?;
            (body[..close].to_string(), lead + 1 + close + 1)
        }
        _ => {
            let colon = rest.find(':').ok_or_else(|| ScoreParseError {
                offset: base + lead,
                message: "expected ':' after key".into(),
            })?;
            (rest[..colon].trim().to_string(), lead + colon)
        }
    };
    let tail = &entry[after_key..];
    let colon_rel = tail.len() - tail.trim_start().len();
    if !tail[colon_rel..].starts_with(':') {
        return Err(ScoreParseError {
            offset: base + after_key + colon_rel,
            message: "expected ':' after key".into(),
        });
    }
    let value_start = after_key + colon_rel + 1;
    Ok((key, &entry[value_start..], base + value_start))
}

/// Classes scored strictly above `tau` in the first dictionary of the answer.
///
/// An answer without a dictionary (including the literal `None`) proposes
/// nothing. Keys are matched case-insensitively against the vocabulary and
/// unknown keys are ignored; the first occurrence of a class wins. Scores are
/// clipped to `[0, 1]`.
pub fn zscp_parse_score<S: AsRef<str>>(
    t: &VlmTranscript,
    vocabulary: &[S],
    tau: f64,
) -> Result<ProposalSet, ScoreParseError> {
    let mut set = ProposalSet::empty(t.image_id.clone());
    let Some((open, close)) = first_dictionary(&t.response)? else {
        return Ok(set);
    };
    let body = &t.response[open + 1..close];
    let keys: Vec<String> = vocabulary.iter().map(|l| label_key(l.as_ref())).collect();
    let mut scores: Vec<Option<f64>> = vec![None; keys.len()];
    for (offset, entry) in split_entries(body, open + 1) {
        if entry.trim().is_empty() {
            continue;
        }
        let (key, value, value_offset) = split_entry(entry, offset)?;
        let value_trimmed = value.trim();
        let score: f64 = value_trimmed.parse().map_err(|_| ScoreParseError {
            offset: value_offset + (value.len() - value.trim_start().len()),
            message: format!("expected a number, found {value_trimmed:?}"),
        })?;
        if !score.is_finite() {
            return Err(ScoreParseError {
                offset: value_offset,
                message: "score is not finite".into(),
            });
        }
        let key = label_key(&key);
        if let Some(i) = keys.iter().position(|k| *k == key) {
            scores[i].get_or_insert(score.clamp(0.0, 1.0));
        }
    }
    for (label, score) in vocabulary.iter().zip(scores) {
        if let Some(s) = score {
            if s > tau {
                set.proposals.push(Proposal {
                    label: label.as_ref().to_string(),
                    score: s,
                });
            }
        }
    }
    Ok(set)
}

/// True iff the answer contains the word "yes" (any case).
pub fn yesno_parse(t: &VlmTranscript) -> bool {
    t.response
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w.eq_ignore_ascii_case("yes"))
}

/// Aggregates per-class yes/no answers of one image. Answers without a label
/// or with a label outside the vocabulary are ignored; the count of ignored
/// answers is returned alongside the set.
pub fn yesno_propose<'a, S, I>(image_id: &str, transcripts: I, vocabulary: &[S]) -> (ProposalSet, usize)
where
    S: AsRef<str>,
    I: IntoIterator<Item = &'a VlmTranscript>,
{
    let mut positive = vec![false; vocabulary.len()];
    let mut ignored = 0;
    for t in transcripts {
        let idx = t
            .label
            .as_deref()
            .and_then(|l| vocabulary.iter().position(|v| v.as_ref() == l));
        match idx {
            Some(i) => positive[i] |= yesno_parse(t),
            None => ignored += 1,
        }
    }
    let set = ProposalSet {
        image_id: image_id.to_string(),
        proposals: vocabulary
            .iter()
            .zip(positive)
            .filter(|(_, p)| *p)
            .map(|(l, _)| Proposal {
                label: l.as_ref().to_string(),
                score: 1.0,
            })
            .collect(),
    };
    (set, ignored)
}
