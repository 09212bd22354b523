//! Subcommand implementations behind the command-line tool.
//!
//! Each command reads everything it needs from a [`PipelineConfig`], writes
//! its artifacts under the output directory and returns a short summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{require, PipelineConfig};
use crate::corpus::{load_reviews, LoadOptions, ReviewCorpus};
use crate::embed::{embed_corpus, Embedder, Embedding};
use crate::error::{Error, Result};
use crate::glmm::{
    build_design, fit, marginal_effects, report, write_marginal_effects_csv, GlmmFit, ModelSpec,
    INTERACTION,
};
use crate::mil::{confusion, train, Confusion, ModelFile, TrainingBag};
use crate::synth::{generate_glmm_corpus, generate_mil_corpus};
use crate::textfeats::{build_feature_rows, load_lexicon, FeatureConfig, FeatureTable, Lexicons, Regressor};

/// Star rule for review-level training labels; 3-star reviews are excluded.
pub fn star_label(stars: u8) -> Option<u8> {
    match stars {
        4..=5 => Some(1),
        1..=2 => Some(0),
        _ => None,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_corpus(config: &PipelineConfig, path: &Path) -> Result<ReviewCorpus> {
    let opts = LoadOptions {
        snapshot_date: config.snapshot_date,
    };
    Ok(load_reviews(path, &opts)?.split())
}

fn load_model(config: &PipelineConfig, embedder: &Embedder) -> Result<ModelFile> {
    let path = config.model_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "model artifact {} does not exist; run `train` first",
            path.display()
        )));
    }
    let file = ModelFile::load(&path)?;
    let expected = embedder.fingerprint();
    if file.model.embedder != expected {
        return Err(Error::Config(format!(
            "model was trained with embedder `{}` but the config selects `{expected}`",
            file.model.embedder
        )));
    }
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub bags: usize,
    pub sentences: usize,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn cmd_train(config: &PipelineConfig) -> Result<TrainOutcome> {
    let source = config
        .paths
        .training_corpus
        .clone()
        .or_else(|| config.paths.corpus.clone());
    let path = require(&source, "paths.training_corpus (or paths.corpus)")?;
    let embedder = config.build_embedder()?;
    let corpus = load_corpus(config, &path)?;

    let mut labels = Vec::new();
    let kept: Vec<_> = corpus
        .reviews
        .into_iter()
        .filter(|r| !r.sentences.is_empty())
        .filter_map(|r| star_label(r.stars).map(|l| (r, l)))
        .map(|(r, l)| {
            labels.push(l);
            r
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no reviews with a 1-2 or 4-5 star rating",
            path.display()
        )));
    }
    let training = ReviewCorpus {
        reviews: kept,
        snapshot_date: corpus.snapshot_date,
    };
    let embeddings: Vec<Embedding> = embed_corpus(&training, &embedder)?
        .into_iter()
        .map(|s| s.embedding)
        .collect();
    let mut bags = Vec::with_capacity(training.reviews.len());
    let mut next = 0;
    for (r, &label) in training.reviews.iter().zip(&labels) {
        let n = r.sentences.len();
        bags.push(TrainingBag {
            sentences: (next..next + n).collect(),
            label,
        });
        next += n;
    }

    let mut model = train(&bags, &embeddings, &config.mil)?;
    model.embedder = embedder.fingerprint();
    let trace = std::mem::take(&mut model.trace);

    let model_path = config.model_path();
    let file = ModelFile::new(model, config.fingerprint());
    let w = create(&model_path)?;
    let mut w = w;
    file.write(&mut w)?;
    finish(w, &model_path)?;

    let log_path = config.output_dir().join("train_log.csv");
    let mut log = create(&log_path)?;
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "# {}", config.header()).map_err(io)?;
    writeln!(log, "# bags={} sentences={} exact_pairs={}", bags.len(), embeddings.len(),
        embeddings.len().saturating_mul(embeddings.len()) <= config.mil.pair_budget).map_err(io)?;
    writeln!(log, "iteration,loss").map_err(io)?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(log, "{i},{l}").map_err(io)?;
    }
    finish(log, &log_path)?;

    Ok(TrainOutcome {
        model_path,
        log_path,
        bags: bags.len(),
        sentences: embeddings.len(),
        iterations: file.model.iterations,
        initial_loss: file.model.initial_loss,
        final_loss: file.model.final_loss,
    })
}

#[derive(Debug, Clone)]
pub struct FeaturesOutcome {
    pub path: PathBuf,
    pub rows: usize,
}

pub fn cmd_features(config: &PipelineConfig) -> Result<FeaturesOutcome> {
    let embedder = config.build_embedder()?;
    let model = load_model(config, &embedder)?.model;
    let corpus_path = require(&config.paths.corpus, "paths.corpus")?;
    let lexicons = Lexicons {
        cognitive: load_lexicon(&require(&config.paths.cognitive_lexicon, "paths.cognitive_lexicon")?)?,
        emotive: load_lexicon(&require(&config.paths.emotive_lexicon, "paths.emotive_lexicon")?)?,
    };
    let corpus = load_corpus(config, &corpus_path)?;
    let fc = FeatureConfig {
        filters: config.filters.clone(),
        rac: config.rac.clone(),
    };
    let rows = build_feature_rows(&corpus, &model, &embedder, &lexicons, &fc)?;
    if rows.is_empty() {
        return Err(Error::Validation("no reviews left after filtering".into()));
    }
    let table = FeatureTable::from_rows(&rows);
    let path = config.features_path();
    let mut w = create(&path)?;
    table.write_csv(&mut w, Some(&config.header()))?;
    finish(w, &path)?;
    Ok(FeaturesOutcome {
        path,
        rows: table.len(),
    })
}

#[derive(Debug, Clone)]
pub struct RegressOutcome {
    pub report_text: String,
    pub text_path: PathBuf,
    pub csv_path: PathBuf,
    pub effects_path: Option<PathBuf>,
    pub notes: Vec<String>,
}

fn binary_ptype(table: &FeatureTable) -> bool {
    let col = table.column(Regressor::PType);
    col.iter().all(|&v| v == 0.0 || v == 1.0)
        && col.contains(&0.0)
        && col.contains(&1.0)
}

pub fn cmd_regress(config: &PipelineConfig) -> Result<RegressOutcome> {
    let features = config.features_path();
    if !features.exists() {
        return Err(Error::Config(format!(
            "feature table {} does not exist; run `features` first",
            features.display()
        )));
    }
    let table = FeatureTable::load(&features)?;
    if table.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", features.display())));
    }
    let g = &config.glmm;
    let mut fits: Vec<(String, GlmmFit)> = Vec::new();
    let mut notes = Vec::new();
    let mut models = g.models.clone();
    models.sort();
    models.dedup();
    for &label in &models {
        let mut spec = ModelSpec::nested(label).expect("validated model letter");
        spec.standardize_interaction = g.standardize_interaction;
        let design = build_design(&table, &spec)?;
        let f = fit(&design, &table.helpful, &table.total, &g.fit)?;
        fits.push((format!("({label})"), f));
    }
    if g.ptype_subsets {
        if binary_ptype(&table) {
            let mut spec = ModelSpec::nested('d').expect("model d").without(Regressor::PType);
            spec.standardize_interaction = g.standardize_interaction;
            for level in [0.0, 1.0] {
                let col = table.column(Regressor::PType);
                let sub = table.subset(|i| col[i] == level);
                let design = build_design(&sub, &spec)?;
                let f = fit(&design, &sub.helpful, &sub.total, &g.fit)?;
                fits.push((format!("PType={level}"), f));
            }
        } else {
            notes.push("PType is not a 0/1 column with both levels; subset fits skipped".into());
        }
    }
    for (label, f) in &fits {
        for w in &f.warnings {
            notes.push(format!("{label}: {w}"));
        }
    }

    let labeled: Vec<(&str, &GlmmFit)> = fits.iter().map(|(l, f)| (l.as_str(), f)).collect();
    let rep = report(&labeled);
    let header = config.header();
    let out = config.output_dir();

    let text_path = out.join("regression.txt");
    let report_text = rep.to_text();
    let mut w = create(&text_path)?;
    write!(w, "# {header}\n{report_text}").map_err(|e| Error::io(&text_path, e))?;
    finish(w, &text_path)?;

    let csv_path = out.join("regression.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "# {header}").map_err(|e| Error::io(&csv_path, e))?;
    rep.write_csv(&mut w)?;
    finish(w, &csv_path)?;

    let effects_path = match fits.iter().find(|(l, _)| l == "(d)") {
        Some((_, f)) => {
            let me = marginal_effects(f, Regressor::RLength.name(), INTERACTION, &g.moderator_grid)?;
            let p = out.join("marginal_effects.csv");
            let mut w = create(&p)?;
            write_marginal_effects_csv(&me, &mut w, Some(&header))?;
            finish(w, &p)?;
            Some(p)
        }
        None => None,
    };

    let failed: Vec<&str> = fits
        .iter()
        .filter(|(_, f)| !f.converged)
        .map(|(l, _)| l.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::NotConverged(format!(
            "fits {} did not converge (report written to {})",
            failed.join(", "),
            text_path.display()
        )));
    }
    Ok(RegressOutcome {
        report_text,
        text_path,
        csv_path,
        effects_path,
        notes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub sentences: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Reads `sentence_text,label` rows; `#` lines are comments.
pub fn read_labeled_sentences(path: &Path) -> Result<Vec<(String, u8)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(std::io::BufReader::new(f));
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (ti, li) = (col("sentence_text")?, col("label")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let label = match rec.get(li).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("label must be 0 or 1, got {:?}", other.unwrap_or("")),
                })
            }
        };
        out.push((rec.get(ti).unwrap_or_default().to_string(), label));
    }
    Ok(out)
}

pub fn cmd_eval(config: &PipelineConfig) -> Result<EvalOutcome> {
    let embedder = config.build_embedder()?;
    let model = load_model(config, &embedder)?.model;
    let path = require(&config.paths.labeled_sentences, "paths.labeled_sentences")?;
    let rows = read_labeled_sentences(&path)?;
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: no labeled sentences", path.display())));
    }
    let labeled = rows
        .iter()
        .map(|(s, l)| Ok((embedder.embed_text(s)?, *l)))
        .collect::<Result<Vec<_>>>()?;
    let c = confusion(&model, &labeled)?;
    Ok(EvalOutcome {
        sentences: c.total(),
        accuracy: c.accuracy(),
        confusion: c,
    })
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub corpus_path: PathBuf,
    pub gold_path: PathBuf,
    pub features_path: PathBuf,
    pub manifest_path: PathBuf,
    pub reviews: usize,
    pub sentences: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'a str,
    config_fingerprint: String,
    spec: &'a crate::synth::SynthSpec,
    planted_beta: Vec<(String, f64)>,
    sigma2_alpha: f64,
    product_intercepts: &'a [f64],
    files: [&'a str; 3],
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<SynthOutcome> {
    let spec = &config.synth;
    let mil = generate_mil_corpus(spec)?;
    let glmm = generate_glmm_corpus(spec)?;
    let out = config.output_dir();
    let header = config.header();

    let corpus_path = out.join("corpus.jsonl");
    let mut w = create(&corpus_path)?;
    writeln!(w, "# {header}").map_err(|e| Error::io(&corpus_path, e))?;
    mil.review_corpus()?.write_jsonl(&mut w)?;
    finish(w, &corpus_path)?;

    let gold_path = out.join("gold_sentences.csv");
    let mut w = create(&gold_path)?;
    writeln!(w, "# {header}").map_err(|e| Error::io(&gold_path, e))?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["review_id", "position", "sentence_text", "label"])?;
        let mut k = 0;
        for r in &mil.reviews {
            for (pos, s) in r.sentences.iter().enumerate() {
                c.write_record([
                    r.review_id.as_str(),
                    &pos.to_string(),
                    s,
                    &mil.gold[k].to_string(),
                ])?;
                k += 1;
            }
        }
        c.flush().map_err(|e| Error::io(&gold_path, e))?;
    }
    finish(w, &gold_path)?;

    let features_path = out.join("synth_features.csv");
    let mut w = create(&features_path)?;
    glmm.table.write_csv(&mut w, Some(&header))?;
    finish(w, &features_path)?;

    let mut names = vec!["Intercept".to_string()];
    names.extend(Regressor::ALL.iter().map(|r| r.name().to_string()));
    names.push(INTERACTION.into());
    let manifest = Manifest {
        generator: crate::GENERATOR,
        config_fingerprint: config.fingerprint(),
        spec,
        planted_beta: names.into_iter().zip(spec.beta).collect(),
        sigma2_alpha: spec.sigma2_alpha,
        product_intercepts: &glmm.alpha,
        files: ["corpus.jsonl", "gold_sentences.csv", "synth_features.csv"],
    };
    let manifest_path = out.join("manifest.json");
    let mut w = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w).map_err(|e| Error::io(&manifest_path, e))?;
    finish(w, &manifest_path)?;

    Ok(SynthOutcome {
        corpus_path,
        gold_path,
        features_path,
        manifest_path,
        reviews: mil.reviews.len(),
        sentences: mil.num_sentences(),
    })
}
