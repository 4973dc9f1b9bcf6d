use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use disco::pipeline::{self, ExperimentManifest, RunKind};
use disco::trainer::Objective;

#[derive(Parser)]
#[command(
    name = "disco",
    version,
    about = "Score-distillation experiments for conversational sparse retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ObjectiveArg {
    DiscoKld,
    ConvdrMse,
    InfonceOnly,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::DiscoKld => Objective::DiscoKld,
            ObjectiveArg::ConvdrMse => Objective::ConvdrMse,
            ObjectiveArg::InfonceOnly => Objective::InfonceOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    /// Trained student on the conversation context.
    Student,
    /// Frozen encoder on a rewrite.
    Teacher,
    /// Frozen encoder on the last utterance only.
    Utterance,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, conversations, qrels and vocabulary.
    Synth(Common),
    /// Encode the corpus with the frozen encoder and build the index.
    Index(Common),
    /// Score rewrites with the teachers and mine hard negatives.
    TeacherScores {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rewrite tags.
        #[arg(long, value_delimiter = ',')]
        teachers: Option<Vec<String>>,
    },
    /// Train a student encoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
    },
    /// Retrieve for the held-out conversations and write a TREC run.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, value_enum, default_value = "student")]
        query: QueryArg,
        /// Student to load (defaults to the manifest objective).
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Rewrite tag for `--query teacher` (defaults to the first teacher).
        #[arg(long)]
        rewrite: Option<String>,
    },
    /// Fuse two runs by averaged min-max normalized scores.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Two run tags (defaults to the manifest objective and `teacher`).
        #[arg(long, value_delimiter = ',', num_args = 1)]
        runs: Option<Vec<String>>,
    },
    /// Evaluate a run against the held-out qrels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run tag (defaults to the manifest objective).
        #[arg(long)]
        run: Option<String>,
    },
    /// Train and evaluate one student per lambda_q in the manifest sweep.
    SweepLambda(Common),
}

fn load(common: &Common) -> anyhow::Result<ExperimentManifest> {
    let mut m = ExperimentManifest::load(&common.manifest)?;
    if let Some(seed) = common.seed {
        m.seed = seed;
    }
    if let Some(out) = &common.out {
        m.paths.outputs = std::env::current_dir()?.join(out);
    }
    m.validate()
        .with_context(|| format!("invalid manifest {}", common.manifest.display()))?;
    Ok(m)
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let summary = match cli.command {
        Command::Synth(c) => pipeline::cmd_synth(&load(&c)?)?,
        Command::Index(c) => pipeline::cmd_index(&load(&c)?)?,
        Command::TeacherScores { common, teachers } => {
            let mut m = load(&common)?;
            if let Some(t) = teachers {
                m.teachers = t;
                m.validate()?;
            }
            pipeline::cmd_teacher_scores(&m)?
        }
        Command::Train { common, objective } => {
            let mut m = load(&common)?;
            if let Some(o) = objective {
                m.train.objective = o.into();
            }
            pipeline::cmd_train(&m)?
        }
        Command::Retrieve {
            common,
            k,
            query,
            objective,
            rewrite,
        } => {
            let m = load(&common)?;
            let kind = match query {
                QueryArg::Student => {
                    RunKind::Student(objective.map(Objective::from).unwrap_or(m.train.objective))
                }
                QueryArg::Teacher => {
                    RunKind::Teacher(rewrite.unwrap_or_else(|| m.teachers[0].clone()))
                }
                QueryArg::Utterance => RunKind::Utterance,
            };
            anyhow::ensure!(k > 0, "--k must be positive");
            pipeline::cmd_retrieve(&m, &kind, k)?
        }
        Command::Fuse { common, runs } => {
            let m = load(&common)?;
            let runs =
                runs.unwrap_or_else(|| vec![m.train.objective.to_string(), "teacher".into()]);
            anyhow::ensure!(runs.len() == 2, "--runs takes exactly two tags");
            pipeline::cmd_fuse(&m, &runs[0], &runs[1])?
        }
        Command::Evaluate { common, run } => {
            let m = load(&common)?;
            let tag = run.unwrap_or_else(|| m.train.objective.to_string());
            pipeline::cmd_evaluate(&m, &tag)?
        }
        Command::SweepLambda(c) => pipeline::cmd_sweep_lambda(&load(&c)?)?,
    };
    Ok(summary)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("json value")
        ),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
