use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use argchange::config::PipelineConfig;
use argchange::pipeline;
use argchange::Error;

#[derive(Parser)]
#[command(name = "argchange", version, about = "Argumentation changes and review helpfulness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the classifier and generator seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the sentence polarity classifier from review-level labels.
    Train(Common),
    /// Compute the per-review feature table.
    Features(Common),
    /// Fit the nested helpfulness regressions and marginal effects.
    Regress(Common),
    /// Score the classifier on labeled sentences.
    Eval(Common),
    /// Write synthetic corpora with planted ground truth.
    Synth(Common),
    /// Print the default configuration or validate a config file.
    Config {
        #[arg(long)]
        dump_defaults: bool,
        #[arg(long, value_name = "PATH", required_unless_present = "dump_defaults")]
        config: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.override_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.paths.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let o = pipeline::cmd_train(&load(&c)?)?;
            println!(
                "trained on {} bags / {} sentences in {} iterations; loss {:.6} -> {:.6}",
                o.bags, o.sentences, o.iterations, o.initial_loss, o.final_loss
            );
            println!("model: {}", o.model_path.display());
            println!("log:   {}", o.log_path.display());
        }
        Command::Features(c) => {
            let o = pipeline::cmd_features(&load(&c)?)?;
            println!("{} rows written to {}", o.rows, o.path.display());
        }
        Command::Regress(c) => {
            let o = pipeline::cmd_regress(&load(&c)?)?;
            print!("{}", o.report_text);
            for n in &o.notes {
                eprintln!("note: {n}");
            }
            println!("report: {}, {}", o.text_path.display(), o.csv_path.display());
            if let Some(p) = o.effects_path {
                println!("marginal effects: {}", p.display());
            }
        }
        Command::Eval(c) => {
            let o = pipeline::cmd_eval(&load(&c)?)?;
            let m = o.confusion;
            println!("sentences: {}", o.sentences);
            println!("accuracy:  {:.4}", o.accuracy);
            println!(
                "confusion: tp={} fp={} tn={} fn={}",
                m.true_positive, m.false_positive, m.true_negative, m.false_negative
            );
        }
        Command::Synth(c) => {
            let o = pipeline::cmd_synth(&load(&c)?)?;
            println!("{} reviews, {} sentences", o.reviews, o.sentences);
            for p in [&o.corpus_path, &o.gold_path, &o.features_path, &o.manifest_path] {
                println!("wrote {}", p.display());
            }
        }
        Command::Config {
            dump_defaults,
            config,
        } => {
            let cfg = match config {
                Some(p) if !dump_defaults => PipelineConfig::load(&p)?,
                _ => PipelineConfig::default(),
            };
            println!("# {}", cfg.header());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
