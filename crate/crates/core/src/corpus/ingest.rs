use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::tokenize::{split_sentences, tokenize};
use super::{MAX_SENTENCE_TOKENS, MIN_REVIEW_SENTENCES, MIN_SENTENCE_TOKENS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One review per line; the review id is the 1-based line number.
    Plain,
    /// One `{"id": ..., "text": ...}` object per line.
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "text" | "txt" => Ok(CorpusFormat::Plain),
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReview {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub malformed: usize,
    pub too_few_sentences: usize,
    pub bad_sentence_length: usize,
    pub retained: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub reviews: Vec<RawReview>,
    pub stats: IngestStats,
}

#[derive(Deserialize)]
struct JsonReview {
    id: serde_json::Value,
    text: String,
}

/// Read a raw corpus and keep reviews with at least ten sentences whose
/// sentences all have between five and thirty tokens.
pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_str(&text, format))
}

pub(crate) fn ingest_str(text: &str, format: CorpusFormat) -> Ingested {
    let mut stats = IngestStats::default();
    let mut reviews = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let (id, body) = match format {
            CorpusFormat::Plain => ((lineno + 1).to_string(), line.to_string()),
            CorpusFormat::Jsonl => match serde_json::from_str::<JsonReview>(line) {
                Ok(r) => {
                    let id = match r.id {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    (id, r.text)
                }
                Err(_) => {
                    stats.malformed += 1;
                    continue;
                }
            },
        };
        let sentences = split_sentences(tokenize(&body));
        if sentences.len() < MIN_REVIEW_SENTENCES {
            stats.too_few_sentences += 1;
            continue;
        }
        if sentences
            .iter()
            .any(|s| s.len() < MIN_SENTENCE_TOKENS || s.len() > MAX_SENTENCE_TOKENS)
        {
            stats.bad_sentence_length += 1;
            continue;
        }
        reviews.push(RawReview { id, sentences });
    }
    stats.retained = reviews.len();
    Ingested { reviews, stats }
}
