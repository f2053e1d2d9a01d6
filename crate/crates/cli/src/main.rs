use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bap_core::analysis::{render_analysis_table, Lexicons};
use bap_core::corpus::Split;
use bap_core::eval::MatchMode;
use bap_core::pipeline::{
    cmd_ablate, cmd_analyze, cmd_convert, cmd_eval, cmd_index, cmd_report, cmd_run, render_ablation_table,
    render_comparison, render_eval_table, run_label, EmbedderSpec, ProviderSpec, RunConfig, RunManifest,
};
use bap_core::prompting::PromptConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bap", version, about = "Builder action prediction evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Echo,
    Nn,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Multiset,
    OrderedPrefix,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw or normalized corpus into per-split JSONL files.
    Convert {
        /// Raw root (with splits.json) or normalized JSONL file/directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Build the retrieval index over the training split.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `lexical`, `lexical:<dim>` or a remote embedder config file.
        #[arg(long, default_value = "lexical")]
        embedder: String,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
    },
    /// Prompt a provider for every turn of a split.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Score a stored run.
    Eval {
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long, value_enum, default_value = "multiset")]
        match_mode: Mode,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Category and builder-mistake analysis of a stored run.
    Analyze {
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        lexicon_dir: Option<PathBuf>,
        /// CSV of game_id,turn_index,label.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Run and score the ten prompt ablation configurations on the dev split.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Run id prefix; defaults to `ablation-<provider>`.
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Compare stored runs with each other and with published numbers.
    Report {
        #[arg(required = true)]
        run_ids: Vec<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        lexicon_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "echo")]
    provider: ProviderKind,
    /// TOML or JSON endpoint description for `--provider remote`.
    #[arg(long)]
    provider_config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Number of in-context examples.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Optional sections to include, e.g. `system,env,task,other`.
    #[arg(long)]
    prompt_sections: Option<String>,
    #[arg(long, default_value = "default")]
    template_set: String,
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// Render example outputs without cancelling place/pick pairs.
    #[arg(long)]
    net_clean_examples: bool,
    #[arg(long, default_value = "lexical")]
    embedder: String,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = ".bap-cache")]
    cache_dir: PathBuf,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    parallel: Option<usize>,
    /// Only the first N turns of the split.
    #[arg(long)]
    limit: Option<usize>,
    /// Reserved; decoding is greedy and retrieval exact, so nothing is sampled.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn config(&self, split: Split) -> anyhow::Result<RunConfig> {
        let provider = match self.provider {
            ProviderKind::Echo => ProviderSpec::Echo,
            ProviderKind::Nn => ProviderSpec::NearestNeighbor,
            ProviderKind::Remote => ProviderSpec::Remote {
                config: self.provider_config.clone().context("--provider remote needs --provider-config")?,
            },
        };
        let mut prompt = PromptConfig {
            k_examples: self.k,
            template_set: self.template_set.clone(),
            net_clean_examples: self.net_clean_examples,
            ..PromptConfig::default()
        };
        if let Some(list) = &self.prompt_sections {
            prompt.set_sections(list)?;
        }
        if self.seed.is_some() {
            log::info!("--seed has no effect: nothing in a run is sampled");
        }
        Ok(RunConfig {
            model_id: self.model.clone(),
            prompt,
            template_dir: self.template_dir.clone(),
            embedder: EmbedderSpec::parse(&self.embedder)?,
            index_path: self.index.clone(),
            runs_dir: self.runs_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            parallel: self.parallel,
            limit: self.limit,
            ..RunConfig::new(&self.corpus, split, provider)
        })
    }
}

fn lexicons(dir: Option<&Path>) -> anyhow::Result<Lexicons> {
    Ok(match dir {
        Some(d) => Lexicons::load_dir(d)?,
        None => Lexicons::builtin(),
    })
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value).expect("serializable")),
        Format::Table => print!("{}", table()),
    }
}

/// Exit status 1 when some turns failed.
fn execute(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Convert { corpus, out, format } => {
            let report = cmd_convert(&corpus, &out)?;
            emit(format, &report, || {
                let mut s = format!("{:<6} {:>8} {:>8}\n", "split", "games", "pairs");
                for st in &report.stats {
                    s.push_str(&format!("{:<6} {:>8} {:>8}\n", st.split.as_str(), st.game_count, st.pair_count));
                }
                s
            });
            Ok(0)
        }
        Command::Index { corpus, out, embedder, parallel } => {
            let index = cmd_index(&corpus, &out, &EmbedderSpec::parse(&embedder)?, parallel)?;
            println!("{} entries, {} dimensions, embedder {} -> {}", index.len(), index.dimension, index.provider_name, out.display());
            Ok(0)
        }
        Command::Run { run, split, run_id, format } => {
            let split: Split = split.parse()?;
            let cfg = RunConfig { run_id, ..run.config(split)? };
            let (manifest, outcome) = cmd_run(&cfg)?;
            emit(format, &outcome, || {
                format!(
                    "run {}: {} turns, {} reused, {} cache hits, {} provider calls, {} failed\n",
                    outcome.run_id, outcome.turns, outcome.reused, outcome.cache_hits, outcome.provider_calls, outcome.failed
                )
            });
            Ok(u8::from(!manifest.is_complete()))
        }
        Command::Eval { run_id, runs_dir, match_mode, format } => {
            let mode = match match_mode {
                Mode::Multiset => MatchMode::Multiset,
                Mode::OrderedPrefix => MatchMode::OrderedPrefix,
            };
            let report = cmd_eval(&runs_dir, &run_id, mode)?;
            let manifest = RunManifest::load(&runs_dir, &run_id)?;
            emit(format, &report, || render_eval_table(&[(run_label(&manifest), report.overall, report.variant_net_gold)]));
            Ok(0)
        }
        Command::Analyze { run_id, runs_dir, lexicon_dir, annotations, format } => {
            let lx = lexicons(lexicon_dir.as_deref())?;
            let report = cmd_analyze(&runs_dir, &run_id, &lx, annotations.as_deref())?;
            emit(format, &report, || render_analysis_table(&report));
            Ok(0)
        }
        Command::Ablate { run, prefix, format } => {
            let cfg = run.config(Split::Dev)?;
            let prefix = prefix.unwrap_or_else(|| {
                let kind = match run.provider {
                    ProviderKind::Echo => "echo",
                    ProviderKind::Nn => "nn",
                    ProviderKind::Remote => "remote",
                };
                format!("ablation-{kind}")
            });
            let report = cmd_ablate(&cfg, &prefix)?;
            emit(format, &report, || render_ablation_table(&report));
            Ok(u8::from(report.failed_turns() > 0))
        }
        Command::Report { run_ids, runs_dir, lexicon_dir, format } => {
            let lx = lexicons(lexicon_dir.as_deref())?;
            let report = cmd_report(&runs_dir, &run_ids, &lx)?;
            emit(format, &report, || render_comparison(&report));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
