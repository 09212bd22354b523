//! Review corpus: JSONL loading, validation, filtering and sentence splitting.
//!
//! One review per line:
//!
//! ```text
//! {"review_id": "r1", "product_id": "p1", "involvement": 1, "stars": 5,
//!  "helpful_votes": 3, "total_votes": 4, "post_date": "2014-03-01", "text": "..."}
//! ```
//!
//! An optional `"reviewer_id"` enables the per-reviewer cap in [`filter_corpus`].
//! Blank lines and lines starting with `#` are skipped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub product_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
    /// 1 for high-involvement products.
    pub involvement: u8,
    pub stars: u8,
    pub helpful_votes: u32,
    pub total_votes: u32,
    pub post_date: NaiveDate,
    pub text: String,
    #[serde(skip)]
    pub sentences: Vec<String>,
}

impl Review {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=5).contains(&self.stars) {
            return Err(format!("stars must be in 1..=5, got {}", self.stars));
        }
        if self.involvement > 1 {
            return Err(format!("involvement must be 0 or 1, got {}", self.involvement));
        }
        if self.helpful_votes > self.total_votes {
            return Err(format!(
                "helpful_votes ({}) exceeds total_votes ({})",
                self.helpful_votes, self.total_votes
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewCorpus {
    pub reviews: Vec<Review>,
    /// Reference date for review age.
    pub snapshot_date: NaiveDate,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Defaults to the latest post date in the file.
    pub snapshot_date: Option<NaiveDate>,
}

impl ReviewCorpus {
    pub fn new(reviews: Vec<Review>, snapshot_date: Option<NaiveDate>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(reviews.len());
        for r in &reviews {
            if !seen.insert(r.review_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate review_id `{}`",
                    r.review_id
                )));
            }
            r.validate()
                .map_err(|m| Error::Validation(format!("review `{}`: {m}", r.review_id)))?;
        }
        let latest = reviews.iter().map(|r| r.post_date).max();
        let snapshot_date = match (snapshot_date, latest) {
            (Some(s), Some(l)) if s < l => {
                return Err(Error::Validation(format!(
                    "snapshot date {s} precedes latest post date {l}"
                )))
            }
            (Some(s), _) => s,
            (None, Some(l)) => l,
            (None, None) => NaiveDate::MIN,
        };
        Ok(ReviewCorpus {
            reviews,
            snapshot_date,
        })
    }

    /// Number of reviews (K).
    pub fn num_reviews(&self) -> usize {
        self.reviews.len()
    }

    /// Total number of split sentences (N).
    pub fn num_sentences(&self) -> usize {
        self.reviews.iter().map(|r| r.sentences.len()).sum()
    }

    pub fn is_split(&self) -> bool {
        self.reviews
            .iter()
            .all(|r| !r.sentences.is_empty() || r.text.trim().is_empty())
    }

    /// Populates `sentences` on every review.
    pub fn split(mut self) -> Self {
        self.reviews
            .par_iter_mut()
            .for_each(|r| r.sentences = split_sentences(&r.text));
        self
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.reviews {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }
}

pub fn load_reviews(path: &Path, options: &LoadOptions) -> Result<ReviewCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reviews(BufReader::new(file), path, options)
}

pub fn parse_reviews<R: BufRead>(
    reader: R,
    path: &Path,
    options: &LoadOptions,
) -> Result<ReviewCorpus> {
    let mut reviews = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let review: Review = serde_json::from_str(trimmed).map_err(|e| {
            let mut msg = e.to_string();
            if let Some(pos) = msg.find(" at line ") {
                msg.truncate(pos);
            }
            parse_err(msg)
        })?;
        review.validate().map_err(parse_err)?;
        if let Some(first) = seen.insert(review.review_id.clone(), lineno) {
            return Err(Error::Validation(format!(
                "duplicate review_id `{}` on lines {first} and {lineno}",
                review.review_id
            )));
        }
        reviews.push(review);
    }
    ReviewCorpus::new(reviews, options.snapshot_date)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusFilters {
    /// Keep reviews with at least this many total votes.
    pub min_votes: Option<u32>,
    /// Keep reviews posted in this year or later.
    pub min_post_year: Option<i32>,
    /// Keep at most this many reviews per reviewer: earliest post date first,
    /// ties broken by review id. Reviews without a reviewer id are never capped.
    pub max_reviews_per_reviewer: Option<usize>,
}

pub fn filter_corpus(corpus: &ReviewCorpus, filters: &CorpusFilters) -> ReviewCorpus {
    let mut kept: Vec<&Review> = corpus
        .reviews
        .iter()
        .filter(|r| filters.min_votes.is_none_or(|m| r.total_votes >= m))
        .filter(|r| filters.min_post_year.is_none_or(|y| r.post_date.year() >= y))
        .collect();

    if let Some(cap) = filters.max_reviews_per_reviewer {
        let mut by_reviewer: HashMap<&str, Vec<&Review>> = HashMap::new();
        for r in &kept {
            if let Some(id) = r.reviewer_id.as_deref() {
                by_reviewer.entry(id).or_default().push(r);
            }
        }
        let mut allowed: HashSet<&str> = HashSet::new();
        for group in by_reviewer.values_mut() {
            group.sort_by(|a, b| {
                (a.post_date, a.review_id.as_str()).cmp(&(b.post_date, b.review_id.as_str()))
            });
            allowed.extend(group.iter().take(cap).map(|r| r.review_id.as_str()));
        }
        kept.retain(|r| r.reviewer_id.is_none() || allowed.contains(r.review_id.as_str()));
    }

    ReviewCorpus {
        reviews: kept.into_iter().cloned().collect(),
        snapshot_date: corpus.snapshot_date,
    }
}

/// Mean star rating per product, the focal review included.
pub fn product_averages(corpus: &ReviewCorpus) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in &corpus.reviews {
        let e = sums.entry(r.product_id.clone()).or_default();
        e.0 += u64::from(r.stars);
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s as f64 / n as f64))
        .collect()
}

const ABBREVIATIONS: &[&str] = &["dr", "mr", "mrs", "e.g", "i.e", "vs", "etc", "u.s"];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opening_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

fn ends_with_abbreviation(before_period: &str) -> bool {
    let word = before_period
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.iter().any(|a| word.eq_ignore_ascii_case(a))
}

/// Rule-based sentence splitter.
///
/// A boundary is a run of `.`, `?` or `!` (plus closing quotes or brackets)
/// followed by whitespace and then an uppercase letter, a digit or an opening
/// quote. A lone period after a known abbreviation, or between two digits,
/// never ends a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;

    while i < chars.len() {
        let (pos, c) = chars[i];
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && is_terminal(chars[j].1) {
            j += 1;
        }
        let lone_period = c == '.' && j == i + 1;
        while j < chars.len() && is_closing(chars[j].1) {
            j += 1;
        }
        let end = chars.get(j).map_or(text.len(), |&(p, _)| p);

        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let followed_by_space = k > j;
        let next_ok = chars
            .get(k)
            .is_some_and(|&(_, n)| n.is_uppercase() || n.is_ascii_digit() || is_opening_quote(n));

        let decimal = lone_period
            && i > 0
            && chars[i - 1].1.is_ascii_digit()
            && chars.get(i + 1).is_some_and(|&(_, n)| n.is_ascii_digit());
        let abbreviation = lone_period && ends_with_abbreviation(&text[start..pos]);

        if followed_by_space && next_ok && !decimal && !abbreviation {
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            start = end;
        }
        i = j.max(i + 1);
    }

    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}
