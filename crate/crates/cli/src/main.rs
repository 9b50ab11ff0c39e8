//! `mace`: generate task corpora, train, evaluate, query oracles and run
//! gradient checks.

mod config;
mod corpus;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mace_core::bcm::{LinearGaussianScm, TaskBundle};
use mace_core::diffengine::Tensor;
use mace_core::evalsuite::{emit_report, kl_report, nlpid_report, BcmPrior};
use mace_core::formats::{atomic_write, import_table, read_bundle, read_numeric_csv, write_bundle, TableImport};
use mace_core::model::{gradient_check, AttentionVariant, Model, ModelConfig};
use mace_core::oracle::{
    ident_graph_posterior, ident_posterior_interventional, linear_scm_do, nonident_graph_posterior,
    nonident_posterior_interventional, suff_stats, Direction, IdentPriors, NonIdentPriors,
};
use mace_core::training::{load_checkpoint, train_loop, Trainer, TaskSource};
use mace_core::Error;
use serde_json::{json, Value};

use config::RunConfig;
use corpus::{generate_corpus, load_corpus};

/// Relative error above which `gradcheck` fails.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mace", version, about = "Amortized interventional inference toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write `count` task bundles and a manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Meta-train a model on a corpus or a fresh task stream.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `generate`.
        #[arg(long, conflicts_with = "stream")]
        corpus: Option<PathBuf>,
        /// Draw fresh tasks from the generator (the default).
        #[arg(long)]
        stream: bool,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.mack` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the `eval` protocol section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a corpus drawn from a different task prior than training.
        #[arg(long)]
        allow_ood: bool,
    },
    /// Print exact posterior or do-calculus quantities as JSON.
    Oracle {
        #[arg(long, value_enum)]
        case: OracleCase,
        /// Two-column CSV or `.macd` bundle (ident, nonident), or SCM JSON / `.macd` (linear-do).
        #[arg(long)]
        data: PathBuf,
        /// Intervention value.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<f64>,
        /// Intervened node (0-based); defaults to the bundle's, else 1.
        #[arg(long)]
        int_node: Option<usize>,
        /// Outcome node for linear-do; defaults to the bundle's, else the other node.
        #[arg(long)]
        outcome: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_w: f64,
        #[arg(long, default_value_t = 3.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        /// Uses its `model` section; default is the tiny config in both attention variants.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Convert an external numeric CSV into a standardized bundle.
    ImportCsv {
        #[arg(long)]
        csv: PathBuf,
        /// Leading rows that are observational.
        #[arg(long)]
        obs_rows: usize,
        /// Intervened column, by name or index.
        #[arg(long)]
        int_node: String,
        /// Outcome column, by name or index.
        #[arg(long)]
        outcome: String,
        /// Column holding the intervention values (not a node); defaults to the intervened column.
        #[arg(long)]
        int_col_values: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Nlpid,
    KlCurve,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleCase {
    Ident,
    Nonident,
    LinearDo,
}

/// A failure reported as one JSON line and mapped to an exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match e {
            Error::Config(_) | Error::Invalid(_) => (2, "config"),
            Error::NonFinite(_) | Error::Numeric(_) | Error::Invariant(_) | Error::Shape { .. } => (3, "numeric"),
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) => (4, "io"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MACE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate {
            config,
            count,
            seed,
            out_dir,
        } => {
            let run = RunConfig::load(config.as_deref())?;
            generate_corpus(&run, count, seed, &out_dir)?;
            Ok(())
        }
        Command::Train {
            config,
            corpus,
            stream: _,
            out,
            resume,
        } => cmd_train(config.as_deref(), corpus.as_deref(), &out, resume),
        Command::Eval {
            checkpoint,
            corpus,
            metric,
            out,
            config,
            allow_ood,
        } => cmd_eval(&checkpoint, &corpus, metric, &out, config.as_deref(), allow_ood),
        Command::Oracle {
            case,
            data,
            x,
            int_node,
            outcome,
            sigma,
            sigma_w,
            alpha,
            beta,
            eta,
        } => {
            let value = match case {
                OracleCase::Ident | OracleCase::Nonident => {
                    let prior = match case {
                        OracleCase::Ident => BcmPrior::Ident(IdentPriors { sigma, sigma_w }),
                        _ => BcmPrior::Nonident(NonIdentPriors { alpha, beta, eta }),
                    };
                    two_node_oracle(prior, &data, x, int_node)?
                }
                OracleCase::LinearDo => linear_do_oracle(&data, x, int_node, outcome)?,
            };
            println!("{value}");
            Ok(())
        }
        Command::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), seed),
        Command::ImportCsv {
            csv,
            obs_rows,
            int_node,
            outcome,
            int_col_values,
            out,
        } => {
            let table = read_numeric_csv(&csv)?;
            let spec = TableImport {
                obs_rows,
                int_node,
                outcome,
                int_values_column: int_col_values,
            };
            let bundle = import_table(&table, &spec)?;
            write_bundle(&out, &bundle, None)?;
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn cmd_train(config: Option<&Path>, corpus: Option<&Path>, out: &Path, resume: bool) -> CliResult<()> {
    let run = RunConfig::load(config)?;
    let train = run.train_config();
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let source = match corpus {
        Some(dir) => {
            let c = load_corpus(dir)?;
            if c.manifest.prior_digest != run.generator.prior_digest() {
                return Err(Error::Config("corpus was generated from a different task prior than the config".into()).into());
            }
            TaskSource::Corpus(std::sync::Arc::new(c.tasks))
        }
        None => TaskSource::for_config(&train)?,
    };
    let ckpt_path = out.join("checkpoint.mack");
    let mut trainer = if resume && ckpt_path.exists() {
        let ck = load_checkpoint(&ckpt_path)?;
        ck.expect_model(&run.model)?;
        Trainer::resume_with_source(train, ck, source)?
    } else {
        let model = Model::init(run.model.clone(), run.train.init_seed)?;
        let mut t = Trainer::with_model_and_source(train, model, source)?;
        t.run_digest = Some(run.digest());
        t
    };
    write_json(
        &out.join("run.json"),
        &json!({"run_digest": run.digest(), "config": run}),
    )?;
    let (ck, log) = train_loop(&mut trainer, out, run.train.checkpoint_every, Vec::new())?;
    println!(
        "{}",
        json!({"step": ck.step, "tasks_seen": ck.tasks_seen, "final_loss": log.last().map(|r| r.loss)})
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    metric: Metric,
    out: &Path,
    config: Option<&Path>,
    allow_ood: bool,
) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    let ood = corpus.manifest.prior_digest != ck.generator_digest;
    if ood && !allow_ood {
        return Err(Error::Config(
            "corpus task prior differs from the checkpoint's training prior; pass --allow-ood to evaluate anyway".into(),
        )
        .into());
    }
    let protocol = RunConfig::load(config)?.eval;
    let model = Model::from_parts(ck.model_config.clone(), ck.params.clone())?;
    let kind = corpus.manifest.generator.family.name();
    let report = match metric {
        Metric::Nlpid => nlpid_report(&model, &corpus.tasks, kind)?,
        Metric::KlCurve => {
            let prior = BcmPrior::from_family(&corpus.manifest.generator.family).ok();
            kl_report(&model, &corpus.tasks, prior, kind, &protocol)?
        }
    };
    emit_report(&report, out)?;
    write_json(
        &out.join("eval.json"),
        &json!({
            "run_digest": ck.run_digest,
            "corpus_run_digest": corpus.manifest.run_digest,
            "checkpoint_train_digest": ck.train_digest,
            "ood": ood,
            "rows": report.rows.len(),
        }),
    )?;
    Ok(())
}

/// Two-column data from a CSV or a bundle's observational rows, plus the
/// bundle's intervention node when there is one.
fn two_node_data(path: &Path) -> CliResult<(Tensor, Option<usize>)> {
    if path.extension().is_some_and(|e| e == "macd") {
        let (b, _) = read_bundle(path)?;
        return Ok((b.obs, Some(b.int_node)));
    }
    let table = read_numeric_csv(path)?;
    if table.columns.len() != 2 {
        return Err(Error::Config(format!("expected two columns, found {}", table.columns.len())).into());
    }
    let data = table.rows.concat();
    Ok((Tensor::new(vec![table.rows.len(), 2], data)?, None))
}

fn two_node_oracle(prior: BcmPrior, data: &Path, x: Option<f64>, int_node: Option<usize>) -> CliResult<Value> {
    let (obs, bundle_j) = two_node_data(data)?;
    if obs.shape()[1] != 2 {
        return Err(Error::Config("two-node oracles need two-node data".into()).into());
    }
    let st = suff_stats(&obs)?;
    let j = int_node.or(bundle_j).unwrap_or(1);
    let direction = Direction::from_int_node(j)?;
    let (case, graph) = match prior {
        BcmPrior::Ident(p) => ("ident", ident_graph_posterior(&st, &p)?),
        BcmPrior::Nonident(p) => ("nonident", nonident_graph_posterior(&st, &p)?),
    };
    let mut value = json!({
        "case": case,
        "n": st.n,
        "graphs": ["X2->X1", "X1->X2", "none"],
        "graph_posterior": graph,
    });
    if let Some(x) = x {
        value["interventional"] = match prior {
            BcmPrior::Ident(p) => {
                let m = ident_posterior_interventional(&st, &p, direction, x)?;
                json!({"family": "gaussian_mixture", "int_node": j, "x": x, "weights": m.weights, "means": m.means, "stds": m.stds})
            }
            BcmPrior::Nonident(p) => {
                let m = nonident_posterior_interventional(&st, &p, direction, x)?;
                json!({"family": "student_t_mixture", "int_node": j, "x": x, "weights": m.weights, "dofs": m.dofs, "locs": m.locs, "scales": m.scales})
            }
        };
    }
    Ok(value)
}

fn linear_do_oracle(data: &Path, x: Option<f64>, int_node: Option<usize>, outcome: Option<usize>) -> CliResult<Value> {
    let x = x.ok_or_else(|| Error::Config("linear-do needs --x".into()))?;
    let (scm, roles): (LinearGaussianScm, Option<(usize, usize)>) = if data.extension().is_some_and(|e| e == "macd") {
        let (b, _): (TaskBundle, _) = read_bundle(data)?;
        let scm = b
            .metadata
            .and_then(|m| m.scm)
            .ok_or_else(|| Error::Config("bundle carries no linear SCM".into()))?;
        (scm, Some((b.int_node, b.outcome_node)))
    } else {
        let text = std::fs::read_to_string(data).map_err(Error::from)?;
        let scm: LinearGaussianScm = serde_json::from_str(&text).map_err(|e| Error::Config(format!("SCM JSON: {e}")))?;
        (scm, None)
    };
    let j = int_node.or(roles.map(|r| r.0)).unwrap_or(0);
    let i = outcome
        .or(roles.map(|r| r.1))
        .unwrap_or(if j == 0 { 1 } else { 0 });
    let g = linear_scm_do(&scm, j, x, i)?;
    Ok(json!({"case": "linear_do", "int_node": j, "outcome": i, "x": x, "mean": g.mean, "var": g.var}))
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64) -> CliResult<()> {
    let configs = match config {
        Some(p) => vec![RunConfig::load(Some(p))?.model],
        None => vec![
            ModelConfig::tiny(AttentionVariant::MaskedSelf),
            ModelConfig::tiny(AttentionVariant::SelfPlusCross),
        ],
    };
    let mut worst: f64 = 0.0;
    for c in &configs {
        let r = gradient_check(c, seed)?;
        println!(
            "{}",
            json!({
                "attention_variant": c.attention_variant,
                "seed": seed,
                "checked": r.checked,
                "max_rel_error": r.max_rel_error,
                "worst_param": r.worst_param,
                "worst_index": r.worst_index,
                "passed": r.max_rel_error < GRADCHECK_TOLERANCE,
            })
        );
        worst = worst.max(r.max_rel_error);
    }
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(Error::Numeric(format!("gradient check max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}")).into());
    }
    Ok(())
}
