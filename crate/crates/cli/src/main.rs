//! `iman`: synthetic data generation, staged training, clustering and
//! verification evaluation.

mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use iman_core::clusterer::{cluster_pipeline, ClusterConfig, PseudoLabeling};
use iman_core::dataio::{generate_domains, labels_csv, Dataset, Domain};
use iman_core::evalkit::{all_pairs, evaluate, select_difficult_pairs, PairList};
use iman_core::pipeline::{
    mi_adapt, pre_adapt, pretrain, reports_to_json, run_iman, ModelState, Stage, StageReport,
};

use config::{parse_list, RunConfig};
use error::{CliError, EXIT_NO_CLUSTERS};

#[derive(Parser, Debug)]
#[command(
    name = "iman",
    version,
    about = "Unsupervised domain adaptation with MMD, pseudo-labels and mutual information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Pretrain,
    Preadapt,
    Miadapt,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain benchmark and its pair lists.
    Gen {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Classes per domain.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        /// Checkpoint whose embeddings score the difficult pairs; raw target
        /// features are used without one.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run one training stage, or the full alternating procedure.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Checkpoint to continue from (required by preadapt and miadapt).
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Pseudo-labels for preadapt; clustered from the checkpoint when absent.
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
        /// Stage report (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Cluster target embeddings into pseudo-labels.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
        #[arg(long)]
        min_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score verification pairs and write a report, ROC and 2-D projection.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Source data; enables the MMD discrepancy entry.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated FAR values, e.g. 0.001,0.01,0.1.
        #[arg(long)]
        far: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn load_dataset(path: &Path, what: &str) -> Result<Dataset, CliError> {
    require_file(path, what)?;
    Dataset::load_csv(path).map_err(|e| CliError::io(format!("{what} {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<ModelState, CliError> {
    require_file(path, "checkpoint")?;
    ModelState::load_checkpoint(path)
        .map_err(|e| CliError::io(format!("checkpoint {}: {e}", path.display())))
}

fn cmd_gen(
    out: &Path,
    config: Option<&Path>,
    classes: Option<usize>,
    per_class: Option<usize>,
    reference: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let mut spec = cfg.data.clone();
    if let Some(c) = classes {
        spec.classes = c;
    }
    if let Some(p) = per_class {
        spec.per_class = p;
    }
    spec.validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let domains = generate_domains(&spec)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;

    let target = &domains.target;
    let all = all_pairs(&domains.target_labels);
    let features = match reference {
        Some(path) => load_checkpoint(path)?.embed(target.features())?,
        None => target.features().clone(),
    };
    let genuine = all.genuine_count();
    let k_pos = cfg.k_pos.min(genuine);
    let k_neg = cfg.k_neg.min(all.len() - genuine);
    let difficult = select_difficult_pairs(&features, &domains.target_labels, k_pos, k_neg)?;

    write(&out.join("source.csv"), domains.source.to_csv_string())?;
    write(&out.join("target.csv"), target.to_csv_string())?;
    write(
        &out.join("hidden_target_labels.csv"),
        labels_csv(target.ids(), &domains.target_labels),
    )?;
    write(&out.join("pairs_all.csv"), all.to_csv_string(target.ids()))?;
    write(
        &out.join("pairs_difficult.csv"),
        difficult.to_csv_string(target.ids()),
    )?;
    println!(
        "source {} rows, target {} rows, {} pairs, {} difficult pairs (seed {}, config {})",
        domains.source.len(),
        target.len(),
        all.len(),
        difficult.len(),
        cfg.seed,
        &cfg.hash[..12]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    stage: StageArg,
    config: Option<&Path>,
    source: &Path,
    target: &Path,
    checkpoint_in: Option<&Path>,
    checkpoint_out: &Path,
    pseudo_labels: Option<&Path>,
    report: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let source = load_dataset(source, "source data")?;
    let target = load_dataset(target, "target data")?;
    if source.domain() != Domain::Source || source.labels().is_none() {
        return Err(CliError::usage(
            "source data must be a labeled source-domain file",
        ));
    }
    let target = target.unlabeled();
    let started = Instant::now();

    let need_checkpoint = |what: &str| -> Result<ModelState, CliError> {
        match checkpoint_in {
            Some(p) => load_checkpoint(p),
            None => Err(CliError::new(
                error::EXIT_STAGE_ORDER,
                format!("{what} needs --checkpoint-in from an earlier stage"),
            )),
        }
    };
    let (model, reports): (ModelState, Vec<StageReport>) = match stage {
        StageArg::Pretrain => {
            let mut model = ModelState::new(&cfg.train.layer_dims, source.classes(), cfg.seed)?;
            let r = pretrain(&source, &target, &mut model, &cfg.train)?;
            (model, vec![r])
        }
        StageArg::Preadapt => {
            let mut model = need_checkpoint("preadapt")?;
            if model.stage() < Stage::Pretrained {
                return Err(CliError::new(
                    error::EXIT_STAGE_ORDER,
                    "preadapt needs a pretrained checkpoint",
                ));
            }
            let pseudo = match pseudo_labels {
                Some(p) => {
                    require_file(p, "pseudo-labels")?;
                    PseudoLabeling::load_csv(p)?
                }
                None => cluster_pipeline(&model.embed(target.features())?, &cfg.train.cluster)?,
            };
            let r = pre_adapt(&source, &target, &pseudo, &mut model, &cfg.train)?;
            (model, vec![r])
        }
        StageArg::Miadapt => {
            let mut model = need_checkpoint("miadapt")?;
            let r = mi_adapt(&source, &target, &mut model, &cfg.train)?;
            (model, vec![r])
        }
        StageArg::Full => {
            let run = run_iman(&source, &target, &cfg.train, |rec, _| {
                eprintln!(
                    "iteration {}: {} clusters, {} assigned",
                    rec.iteration, rec.n_clusters, rec.assigned
                );
            })?;
            if !run.converged {
                eprintln!("alternation stopped at max iterations without convergence");
            }
            (run.model, run.reports)
        }
    };
    model.save_checkpoint(checkpoint_out)?;
    write(report, reports_to_json(&reports, &cfg.hash, cfg.seed))?;
    for r in &reports {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    eprintln!(
        "{} stage(s) done in {:.1}s; final stage {}",
        reports.len(),
        started.elapsed().as_secs_f64(),
        model.stage().as_str()
    );
    Ok(())
}

fn cmd_cluster(
    checkpoint: &Path,
    target: &Path,
    config: Option<&Path>,
    lambda: Option<f64>,
    min_size: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = load_checkpoint(checkpoint)?;
    let target = load_dataset(target, "target data")?;
    let cc = ClusterConfig::new(
        lambda.unwrap_or(cfg.train.cluster.lambda),
        min_size.unwrap_or(cfg.train.cluster.min_size),
    )
    .map_err(|e| CliError::usage(e.to_string()))?;
    let pseudo = cluster_pipeline(&model.embed(target.features())?, &cc)?;
    pseudo.save_csv(out)?;
    println!(
        "n_clusters={} assigned={} abandoned={}",
        pseudo.n_clusters(),
        pseudo.assigned_count(),
        pseudo.abandoned_count()
    );
    if pseudo.n_clusters() == 0 {
        return Err(CliError::new(
            EXIT_NO_CLUSTERS,
            format!(
                "no cluster reached {} members at lambda {}; lower lambda or min_size",
                cc.min_size, cc.lambda
            ),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    target: &Path,
    pairs: &Path,
    source: Option<&Path>,
    config: Option<&Path>,
    far: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let far = match far {
        Some(text) => {
            parse_list::<f64>(text).map_err(|e| CliError::usage(format!("--far: {e}")))?
        }
        None => cfg.far.clone(),
    };
    let model = load_checkpoint(checkpoint)?;
    let target = load_dataset(target, "target data")?;
    require_file(pairs, "pairs file")?;
    let pairs = PairList::load_csv(pairs, &target)
        .map_err(|e| CliError::io(format!("{}: {e}", pairs.display())))?;
    let source = source.map(|p| load_dataset(p, "source data")).transpose()?;
    let eval = evaluate(
        &model,
        &target,
        &pairs,
        source.as_ref(),
        &far,
        &cfg.train.bandwidth_scales,
        &cfg.hash,
    )?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("report.json"), eval.report.to_json())?;
    write(&out.join("roc.csv"), eval.roc.to_csv_string())?;
    write(
        &out.join("projection.csv"),
        eval.projection.to_csv_string(target.ids()),
    )?;
    let r = &eval.report;
    println!(
        "accuracy {:.4} +/- {:.4} over {} pairs",
        r.accuracy_mean, r.accuracy_std, r.n_pairs
    );
    for t in &r.tar_at_far {
        println!("TAR@FAR={} {:.4}", t.far, t.tar);
    }
    if let Some(m) = r.mmd_discrepancy {
        println!("mmd2 {m:.6}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            out,
            config,
            classes,
            per_class,
            reference,
        } => cmd_gen(
            &out,
            config.as_deref(),
            classes,
            per_class,
            reference.as_deref(),
        ),
        Command::Train {
            stage,
            config,
            source,
            target,
            checkpoint_in,
            checkpoint_out,
            pseudo_labels,
            report,
        } => cmd_train(
            stage,
            config.as_deref(),
            &source,
            &target,
            checkpoint_in.as_deref(),
            &checkpoint_out,
            pseudo_labels.as_deref(),
            &report,
        ),
        Command::Cluster {
            checkpoint,
            target,
            config,
            lambda,
            min_size,
            out,
        } => cmd_cluster(
            &checkpoint,
            &target,
            config.as_deref(),
            lambda,
            min_size,
            &out,
        ),
        Command::Eval {
            checkpoint,
            target,
            pairs,
            source,
            config,
            far,
            out,
        } => cmd_eval(
            &checkpoint,
            &target,
            &pairs,
            source.as_deref(),
            config.as_deref(),
            far.as_deref(),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                error::EXIT_USAGE as u8
            } else {
                0
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
