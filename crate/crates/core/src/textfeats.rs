//! Review-level covariates: readability, lexicon shares, review age, and the
//! feature table handed to the regression.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::argmetrics::{rac, rac_neutral, NeutralBand, PolaritySequence};
use crate::corpus::{filter_corpus, product_averages, CorpusFilters, Review, ReviewCorpus};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::mil::{predict_sentence, PolarityModel};

/// Lowercased NFC words; internal apostrophes are kept (`don't`), other
/// punctuation separates words, and tokens without a letter are dropped.
pub fn words(text: &str) -> Vec<String> {
    let normalized: String = text
        .nfc()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect::<String>()
        .to_lowercase();
    normalized
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| w.chars().any(char::is_alphabetic))
        .map(str::to_string)
        .collect()
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Vowel-group syllable estimate.
///
/// Counts maximal runs of `aeiouy`, then drops a silent final `e` (a lone `e`
/// after a consonant) unless the word ends in consonant + `le`. Never below 1.
pub fn count_syllables(word: &str) -> Result<usize> {
    let letters: Vec<char> = word
        .chars()
        .filter(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    if letters.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot count syllables of `{word}`"
        )));
    }
    let mut groups = 0usize;
    let mut prev_vowel = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    let n = letters.len();
    if n >= 2 && letters[n - 1] == 'e' && !is_vowel(letters[n - 2]) {
        let consonant_le = n >= 3 && letters[n - 2] == 'l' && !is_vowel(letters[n - 3]);
        if !consonant_le {
            groups = groups.saturating_sub(1);
        }
    }
    Ok(groups.max(1))
}

/// `0.4 · (words / sentences + 100 · complex_words / words)`, where a complex
/// word has three or more syllables.
pub fn gunning_fog<S: AsRef<str>>(text: &str, sentences: &[S]) -> Result<f64> {
    let ws = words(text);
    if ws.is_empty() {
        return Err(Error::InvalidArgument("text contains no words".into()));
    }
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("text has no sentences".into()));
    }
    let mut complex = 0usize;
    for w in &ws {
        if count_syllables(w)? >= 3 {
            complex += 1;
        }
    }
    let n = ws.len() as f64;
    Ok(0.4 * (n / sentences.len() as f64 + 100.0 * complex as f64 / n))
}

/// A word category; `*`-suffixed entries match as prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub name: String,
    exact: HashSet<String>,
    prefixes: Vec<String>,
}

impl Lexicon {
    pub fn new<I, S>(name: impl Into<String>, terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut exact = HashSet::new();
        let mut prefixes = Vec::new();
        for t in terms {
            let t = t.as_ref().trim().to_lowercase();
            if let Some(p) = t.strip_suffix('*') {
                if !p.is_empty() {
                    prefixes.push(p.to_string());
                }
            } else if !t.is_empty() {
                exact.insert(t);
            }
        }
        prefixes.sort();
        prefixes.dedup();
        Lexicon {
            name: name.into(),
            exact,
            prefixes,
        }
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, word: &str) -> bool {
        self.exact.contains(word) || self.prefixes.iter().any(|p| word.starts_with(p.as_str()))
    }
}

/// Reads `# name: <category>` followed by one term per line.
pub fn parse_lexicon<R: BufRead>(reader: R, path: &Path) -> Result<Lexicon> {
    let mut name = None;
    let mut terms = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(n) = rest.trim().strip_prefix("name:") {
                if name.is_some() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: "second `# name:` header".into(),
                    });
                }
                name = Some(n.trim().to_string());
            }
            continue;
        }
        if !t.is_empty() {
            terms.push(t.to_string());
        }
    }
    let parse_err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: message.into(),
    };
    let name = name.ok_or_else(|| parse_err("missing `# name: <category>` header"))?;
    let lex = Lexicon::new(name, terms);
    if lex.is_empty() {
        return Err(parse_err("lexicon has no terms"));
    }
    Ok(lex)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(std::io::BufReader::new(f), path)
}

/// Matched tokens over all tokens; 0 for an empty token list.
pub fn lexicon_fraction<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| lexicon.matches(t.as_ref())).count();
    hits as f64 / tokens.len() as f64
}

/// Whole days from `post_date` to `snapshot_date`.
pub fn review_age(post_date: NaiveDate, snapshot_date: NaiveDate) -> Result<f64> {
    let days = snapshot_date.signed_duration_since(post_date).num_days();
    if days < 0 {
        return Err(Error::InvalidArgument(format!(
            "snapshot {snapshot_date} precedes post date {post_date}"
        )));
    }
    Ok(days as f64)
}

/// Regression covariates in feature-file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regressor {
    PAvg,
    PType,
    RAge,
    RCog,
    REmo,
    RRead,
    RStars,
    RLength,
    RAC,
}

impl Regressor {
    pub const ALL: [Regressor; 9] = [
        Regressor::PAvg,
        Regressor::PType,
        Regressor::RAge,
        Regressor::RCog,
        Regressor::REmo,
        Regressor::RRead,
        Regressor::RStars,
        Regressor::RLength,
        Regressor::RAC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regressor::PAvg => "PAvg",
            Regressor::PType => "PType",
            Regressor::RAge => "RAge",
            Regressor::RCog => "RCog",
            Regressor::REmo => "REmo",
            Regressor::RRead => "RRead",
            Regressor::RStars => "RStars",
            Regressor::RLength => "RLength",
            Regressor::RAC => "RAC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ReviewFeatureRow {
    pub review_id: String,
    pub product_id: String,
    pub PAvg: f64,
    pub PType: u8,
    pub RAge: f64,
    pub RCog: f64,
    pub REmo: f64,
    pub RRead: f64,
    pub RStars: u8,
    pub RLength: usize,
    pub RAC: f64,
    pub RHVotes: u32,
    pub RVotes: u32,
}

impl ReviewFeatureRow {
    pub fn value(&self, r: Regressor) -> f64 {
        match r {
            Regressor::PAvg => self.PAvg,
            Regressor::PType => f64::from(self.PType),
            Regressor::RAge => self.RAge,
            Regressor::RCog => self.RCog,
            Regressor::REmo => self.REmo,
            Regressor::RRead => self.RRead,
            Regressor::RStars => f64::from(self.RStars),
            Regressor::RLength => self.RLength as f64,
            Regressor::RAC => self.RAC,
        }
    }
}

/// Column store matching the feature CSV: identifiers, the nine covariates
/// as reals, and the vote counts.
///
/// CSV layout (after optional `#` comment lines):
/// `review_id,product_id,PAvg,PType,RAge,RCog,REmo,RRead,RStars,RLength,RAC,RHVotes,RVotes`
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub review_ids: Vec<String>,
    pub product_ids: Vec<String>,
    pub covariates: [Vec<f64>; 9],
    pub helpful: Vec<u32>,
    pub total: Vec<u32>,
}

pub const FEATURE_COLUMNS: [&str; 13] = [
    "review_id",
    "product_id",
    "PAvg",
    "PType",
    "RAge",
    "RCog",
    "REmo",
    "RRead",
    "RStars",
    "RLength",
    "RAC",
    "RHVotes",
    "RVotes",
];

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.review_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.review_ids.is_empty()
    }

    pub fn column(&self, r: Regressor) -> &[f64] {
        &self.covariates[r.index()]
    }

    pub fn column_mut(&mut self, r: Regressor) -> &mut Vec<f64> {
        &mut self.covariates[r.index()]
    }

    pub fn push(
        &mut self,
        review_id: String,
        product_id: String,
        values: [f64; 9],
        helpful: u32,
        total: u32,
    ) {
        self.review_ids.push(review_id);
        self.product_ids.push(product_id);
        for (col, v) in self.covariates.iter_mut().zip(values) {
            col.push(v);
        }
        self.helpful.push(helpful);
        self.total.push(total);
    }

    pub fn from_rows(rows: &[ReviewFeatureRow]) -> Self {
        let mut t = FeatureTable::default();
        for r in rows {
            t.push(
                r.review_id.clone(),
                r.product_id.clone(),
                Regressor::ALL.map(|g| r.value(g)),
                r.RHVotes,
                r.RVotes,
            );
        }
        t
    }

    /// Rows for which `keep` holds, in order.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut t = FeatureTable::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            t.push(
                self.review_ids[i].clone(),
                self.product_ids[i].clone(),
                std::array::from_fn(|c| self.covariates[c][i]),
                self.helpful[i],
                self.total[i],
            );
        }
        t
    }

    /// Writes `header_comment` (if any) as a `#` line, then the CSV.
    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}").map_err(|e| Error::io("<writer>", e))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(FEATURE_COLUMNS)?;
        for i in 0..self.len() {
            let mut rec = vec![self.review_ids[i].clone(), self.product_ids[i].clone()];
            rec.extend(self.covariates.iter().map(|c| format!("{}", c[i])));
            rec.push(self.helpful[i].to_string());
            rec.push(self.total[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let idx: Vec<usize> = FEATURE_COLUMNS
            .iter()
            .map(|c| find(c))
            .collect::<Result<_>>()?;
        let mut t = FeatureTable::default();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(n + 2, |p| p.line() as usize);
            let perr = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            };
            let field = |k: usize| rec.get(idx[k]).unwrap_or("");
            let mut values = [0.0; 9];
            for (k, v) in values.iter_mut().enumerate() {
                let raw = field(k + 2);
                *v = raw
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| perr(format!("`{}` is not a finite number: `{raw}`", FEATURE_COLUMNS[k + 2])))?;
            }
            let count = |k: usize| {
                field(k)
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| perr(format!("`{}` is not a count: `{}`", FEATURE_COLUMNS[k], field(k))))
            };
            let (h, tot) = (count(11)?, count(12)?);
            if h > tot {
                return Err(perr(format!("RHVotes {h} exceeds RVotes {tot}")));
            }
            t.push(field(0).to_string(), field(1).to_string(), values, h, tot);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RacVariant {
    Standard,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RacConfig {
    pub variant: RacVariant,
    pub band: NeutralBand,
}

impl Default for RacConfig {
    fn default() -> Self {
        RacConfig {
            variant: RacVariant::Standard,
            band: NeutralBand::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureConfig {
    pub filters: CorpusFilters,
    pub rac: RacConfig,
}

pub struct Lexicons {
    pub cognitive: Lexicon,
    pub emotive: Lexicon,
}

/// Per-sentence positive-polarity probabilities for one review.
pub fn sentence_probabilities(
    review: &Review,
    model: &PolarityModel,
    embedder: &Embedder,
) -> Result<Vec<f64>> {
    review
        .sentences
        .iter()
        .map(|s| predict_sentence(model, &embedder.embed_text(s)?.values))
        .collect()
}

fn feature_row(
    review: &Review,
    product_avg: f64,
    snapshot: NaiveDate,
    model: &PolarityModel,
    embedder: &Embedder,
    lexicons: &Lexicons,
    config: &FeatureConfig,
) -> Result<ReviewFeatureRow> {
    if review.sentences.is_empty() {
        return Err(Error::Validation("review has no sentences".into()));
    }
    let probs = sentence_probabilities(review, model, embedder)?;
    let rac_value = match config.rac.variant {
        RacVariant::Standard => rac(&PolaritySequence::from_probabilities(probs)?),
        RacVariant::Neutral => rac_neutral(&probs, config.rac.band)?,
    };
    let ws = words(&review.text);
    Ok(ReviewFeatureRow {
        review_id: review.review_id.clone(),
        product_id: review.product_id.clone(),
        PAvg: product_avg,
        PType: review.involvement,
        RAge: review_age(review.post_date, snapshot)?,
        RCog: lexicon_fraction(&ws, &lexicons.cognitive),
        REmo: lexicon_fraction(&ws, &lexicons.emotive),
        RRead: gunning_fog(&review.text, &review.sentences)?,
        RStars: review.stars,
        RLength: review.sentences.len(),
        RAC: rac_value,
        RHVotes: review.helpful_votes,
        RVotes: review.total_votes,
    })
}

/// One row per review that passes `config.filters`, in corpus order.
///
/// Product averages are taken over the filtered corpus. Unsplit corpora are
/// split first.
pub fn build_feature_rows(
    corpus: &ReviewCorpus,
    model: &PolarityModel,
    embedder: &Embedder,
    lexicons: &Lexicons,
    config: &FeatureConfig,
) -> Result<Vec<ReviewFeatureRow>> {
    if model.dim() != embedder.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: embedder.dim(),
        });
    }
    let mut filtered = filter_corpus(corpus, &config.filters);
    if !filtered.is_split() {
        filtered = filtered.split();
    }
    let averages = product_averages(&filtered);
    let snapshot = filtered.snapshot_date;
    filtered
        .reviews
        .par_iter()
        .map(|r| {
            feature_row(
                r,
                averages[&r.product_id],
                snapshot,
                model,
                embedder,
                lexicons,
                config,
            )
            .map_err(|e| e.in_review(&r.review_id))
        })
        .collect()
}
