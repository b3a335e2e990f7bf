//! Conditioning prompts for the diffusion model and queries for the
//! vision-language model.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default usable token length of the text encoder conditioning the diffusion model.
pub const DEFAULT_TOKEN_BUDGET: usize = 75;

/// Labels that take the indefinite article in template prompts.
pub const ARTICLE_LABELS: [&str; 3] = ["person", "baby", "naked person"];

/// Ordered `source -> rendered` label substitutions. Unlisted labels render as themselves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct LabelRemapTable {
    pairs: Vec<(String, String)>,
}

impl LabelRemapTable {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (src, _) in &pairs {
            if !seen.insert(src.as_str()) {
                return Err(Error::DuplicateId(src.clone()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Renames used for IconArt classes.
    pub fn iconart() -> Self {
        Self {
            pairs: [
                ("Saint Sebastien", "person"),
                ("child Jesus", "baby"),
                ("nudity", "naked person"),
            ]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<Vec<(String, String)>> for LabelRemapTable {
    type Error = Error;

    fn try_from(pairs: Vec<(String, String)>) -> Result<Self> {
        Self::new(pairs)
    }
}

impl From<LabelRemapTable> for Vec<(String, String)> {
    fn from(t: LabelRemapTable) -> Self {
        t.pairs
    }
}

pub fn remap_label<'a>(label: &'a str, table: &'a LabelRemapTable) -> &'a str {
    table
        .pairs
        .iter()
        .find(|(src, _)| src == label)
        .map_or(label, |(_, dst)| dst.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Template,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub rendered_label: String,
    pub mode: PromptMode,
    pub fallback: bool,
}

pub fn template_prompt(label: &str) -> PromptSpec {
    let text = if ARTICLE_LABELS.contains(&label) {
        format!("A painting of a {label}")
    } else {
        format!("A painting of {label}")
    };
    PromptSpec {
        text,
        rendered_label: label.to_string(),
        mode: PromptMode::Template,
        fallback: false,
    }
}

/// Locates `needle` in `haystack` without regard to case and returns the
/// matching slice of `haystack` as written.
fn find_ignoring_case<'a>(haystack: &'a str, needle: &str) -> Option<&'a str> {
    let want: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    if want.is_empty() {
        return Some("");
    }
    haystack.char_indices().find_map(|(start, _)| {
        let mut got = Vec::with_capacity(want.len());
        for (off, ch) in haystack[start..].char_indices() {
            got.extend(ch.to_lowercase());
            if !want.starts_with(&got) {
                return None;
            }
            if got.len() == want.len() {
                return Some(&haystack[start..start + off + ch.len_utf8()]);
            }
        }
        None
    })
}

/// Uses the caption verbatim when it names the label within the token budget,
/// otherwise prepends the template prompt.
///
/// `token_start` is the label's first token index as reported by whoever
/// tokenized the caption; `None` means the label was not found. Truncation to
/// the budget is left to the consumer of the prompt.
pub fn caption_prompt(
    caption: &str,
    label: &str,
    budget: usize,
    token_start: Option<usize>,
) -> PromptSpec {
    let found = find_ignoring_case(caption, label);
    let in_budget = token_start.is_some_and(|s| s < budget);
    if let (Some(found), true) = (found, in_budget) {
        return PromptSpec {
            text: caption.to_string(),
            rendered_label: found.to_string(),
            mode: PromptMode::Caption,
            fallback: false,
        };
    }
    let template = template_prompt(label);
    PromptSpec {
        text: format!("{}. {}", template.text, caption),
        rendered_label: label.to_string(),
        mode: PromptMode::Caption,
        fallback: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmQueryKind {
    ChoiceArtdl,
    ChoiceIconart,
    Score,
    #[serde(rename = "yesno", alias = "yes-no")]
    YesNo,
    Caption,
}

impl std::str::FromStr for VlmQueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown query kind {s:?}")))
    }
}

/// One query to send to the vision-language model; `label` is set for per-class kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmQuery {
    pub kind: VlmQueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub text: String,
}

const SCORE_PROMPT: [&str; 5] = [
    "Which of the Christian iconographic symbols are in the painting? Choose from the following: [CLASSES]",
    "For each symbol, give a score from 0 to 1 of how confident you are.",
    "Put your answer in a dictionary first and then reason your answer.",
    "Be as accurate as possible.",
    "If none of the symbols are present, output 'None'",
];

pub fn build_vlm_query<S: AsRef<str>>(vocabulary: &[S], kind: VlmQueryKind) -> Result<Vec<VlmQuery>> {
    if vocabulary.is_empty() {
        return Err(Error::Config("query vocabulary is empty".into()));
    }
    let classes = vocabulary
        .iter()
        .map(|s| s.as_ref())
        .collect::<Vec<_>>()
        .join(", ");
    let set_query = |template: String| {
        vec![VlmQuery {
            kind,
            label: None,
            text: template.replace("[CLASSES]", &classes),
        }]
    };
    let per_class = |template: &str| {
        vocabulary
            .iter()
            .map(|l| VlmQuery {
                kind,
                label: Some(l.as_ref().to_string()),
                text: template.replace("[CLASS]", l.as_ref()),
            })
            .collect()
    };
    Ok(match kind {
        VlmQueryKind::ChoiceArtdl => {
            set_query("Who is in the painting? Choose from the following: [CLASSES]".into())
        }
        VlmQueryKind::ChoiceIconart => set_query(
            "Which of the options are in the painting? Choose from the following: [CLASSES]"
                .into(),
        ),
        VlmQueryKind::Score => set_query(SCORE_PROMPT.join("\n")),
        VlmQueryKind::YesNo => per_class("Is [CLASS] in the painting?"),
        VlmQueryKind::Caption => per_class(
            "Describe the visual elements in the image in one sentence. Include the term \"[CLASS]\".",
        ),
    })
}
