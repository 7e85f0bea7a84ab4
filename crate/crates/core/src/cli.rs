//! The `arf` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::anchors::{build_candidate_index, AnchorLayout, CaptionTable, RetrievalMode};
use crate::benchgen::generate_benchmark;
use crate::contrastive::{CheckReport, GradCheckDims};
use crate::error::{ArfError, Result};
use crate::evaluation::{ensemble_sweep, evaluate_splits, parse_split_list, Metrics, SplitKind};
use crate::experiment::{mean_accuracy, run_seed, Variant};
use crate::io::bundle::{read_bundle, write_bundle};
use crate::io::checkpoint::{read_checkpoint, write_checkpoint};
use crate::io::config::RunConfig;
use crate::io::records::{
    caption_table_from_file, read_index, write_curve, write_index, write_log,
};
use crate::io::{atomic_write, read_json};
use crate::training::{
    composite_grad_check, parse_loss_list, pretrain, run_finetune, FinetuneData, LossTerm,
};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for usage, validation and I/O errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for a failed verification (gradient check or effect check).
pub const EXIT_VERIFY: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "arf",
    version,
    about = "Anchor-regularized robust finetuning of a toy dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON file merged over the shipped defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark into a directory.
    Benchgen {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastively pretrain on the bundle's pretraining pool.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed the candidate pool under a checkpoint.
    Precompute {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pretrained checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the bundle's test splits.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of id,ds,zsl.
        #[arg(long)]
        splits: Option<String>,
        /// Classify zero-shot images over all classes.
        #[arg(long)]
        strict_zsl: bool,
        /// Metrics JSON destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep weight-space interpolations between two checkpoints.
    Ensemble {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        /// Comma-separated mixing coefficients, strictly increasing.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        splits: Option<String>,
        #[arg(long)]
        strict_zsl: bool,
        /// Curve CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients of the full finetuning loss.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Compare finetuning variants over several seeds in memory.
    Compare {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Exit 2 unless the anchor variants show the expected effect.
        #[arg(long)]
        check: bool,
    },
    /// Render metrics files as a table.
    Report {
        /// `label=path` pairs of metrics JSON files.
        #[arg(long = "metrics", value_name = "LABEL=FILE", required = true)]
        metrics: Vec<String>,
        #[arg(long, value_enum, default_value_t = TableKind::Ds)]
        table: TableKind,
        #[arg(long, value_enum, default_value_t = TableFormat::Md)]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, required_unless_present = "print_config")]
    bundle: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    checkpoint: Option<PathBuf>,
    /// Candidate index built from the same checkpoint; needed for `ret`.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Caption JSONL (`sample_id`, `caption_feature`); defaults to the bundle's.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Comma-separated subset of cl,cap,ret.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long, value_name = "sep|merge")]
    anchor_mode: Option<AnchorLayout>,
    #[arg(long, value_name = "v2t|v2v|t2t|t2v")]
    retrieval_mode: Option<RetrievalMode>,
    #[arg(long)]
    retrieval_k: Option<usize>,
    /// Batch 512, learning rate 1e-5, weight decay 0.1, 10 epochs.
    #[arg(long)]
    paper_defaults: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved finetune config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableKind {
    /// ID, each shifted domain, their mean and the OOD mean.
    Ds,
    /// Zero-shot accuracy.
    Zsl,
    /// ID, mean DS and ZSL side by side.
    Ablation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableFormat {
    Csv,
    Md,
}

enum Outcome {
    Ok,
    VerificationFailed(String),
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::VerificationFailed(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFY
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => atomic_write(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn splits_or(arg: Option<&str>, default: &[SplitKind]) -> Result<Vec<SplitKind>> {
    arg.map(parse_split_list)
        .unwrap_or_else(|| Ok(default.to_vec()))
}

fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ArfError::InvalidArgument(format!("bad mixing coefficient {t:?}")))
        })
        .collect()
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Benchgen { config, out, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.gen.seed = s;
            }
            write_bundle(&out, &generate_benchmark(&cfg.gen)?)?;
        }
        Command::Pretrain {
            config,
            bundle,
            out,
            log,
            seed,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let b = read_bundle(&bundle)?;
            let (ck, steps) = pretrain(&b.pretrain_pool, &cfg.model, &cfg.pretrain)?;
            write_checkpoint(&out, &ck)?;
            if let Some(p) = log {
                write_log(&p, &steps)?;
            }
        }
        Command::Precompute {
            bundle,
            checkpoint,
            out,
        } => {
            let b = read_bundle(&bundle)?;
            let ck = read_checkpoint(&checkpoint)?;
            write_index(&out, &build_candidate_index(&ck, &b.candidates)?)?;
        }
        Command::Train(args) => train(args)?,
        Command::Eval {
            config,
            bundle,
            checkpoint,
            splits,
            strict_zsl,
            out,
        } => {
            let cfg = config.load()?;
            let b = read_bundle(&bundle)?;
            let ck = read_checkpoint(&checkpoint)?;
            let splits = splits_or(splits.as_deref(), &cfg.eval.splits)?;
            let mut opts = cfg.eval.options();
            opts.strict_zsl |= strict_zsl;
            let m = evaluate_splits(&ck.params, &b, &splits, opts)?;
            emit(out.as_deref(), &(serde_json::to_string_pretty(&m)? + "\n"))?;
        }
        Command::Ensemble {
            config,
            bundle,
            pretrained,
            finetuned,
            alphas,
            splits,
            strict_zsl,
            out,
        } => {
            let cfg = config.load()?;
            let b = read_bundle(&bundle)?;
            let pre = read_checkpoint(&pretrained)?;
            let ft = read_checkpoint(&finetuned)?;
            let alphas = match alphas {
                Some(a) => parse_alphas(&a)?,
                None => cfg.ensemble.alphas.clone(),
            };
            let splits = splits_or(splits.as_deref(), &cfg.eval.splits)?;
            let mut opts = cfg.eval.options();
            opts.strict_zsl |= strict_zsl;
            let curve = ensemble_sweep(&pre, &ft, &alphas, &b, &splits, opts)?;
            match out {
                Some(p) => write_curve(&p, &curve)?,
                None => emit(None, &crate::io::records::curve_to_csv(&curve))?,
            }
        }
        Command::Gradcheck {
            config,
            seed,
            eps,
            batch,
        } => {
            let cfg = config.load()?;
            let dims = GradCheckDims {
                batch,
                image_dim: cfg.gen.d_img_raw,
                text_dim: cfg.gen.d_txt_raw,
                hidden: cfg.model.hidden,
                embed_dim: cfg.model.embed_dim,
            };
            let report = composite_grad_check(seed, dims, eps)?;
            println!("{}", serde_json::to_string(&report)?);
            return Ok(gradcheck_outcome(&report));
        }
        Command::Compare {
            config,
            seeds,
            check,
        } => return compare(&config.load()?, seeds, check),
        Command::Report {
            metrics,
            table,
            format,
            out,
        } => {
            let rows = metrics
                .iter()
                .map(|pair| {
                    let (label, path) = pair.split_once('=').ok_or_else(|| {
                        ArfError::InvalidArgument(format!("expected LABEL=FILE, got {pair:?}"))
                    })?;
                    Ok((label.to_string(), read_json::<Metrics>(Path::new(path))?))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &render_table(&rows, table, format))?;
        }
    }
    Ok(Outcome::Ok)
}

fn gradcheck_outcome(r: &CheckReport) -> Outcome {
    if r.passed {
        Outcome::Ok
    } else {
        Outcome::VerificationFailed(format!(
            "max relative error {:e} at element {:?}",
            r.max_rel_err, r.worst_element
        ))
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let mut tc = cfg.finetune.clone();
    if args.paper_defaults {
        tc = tc.with_paper_defaults();
    }
    if let Some(l) = &args.losses {
        tc.enabled_losses = parse_loss_list(l)?;
    }
    if let Some(m) = args.anchor_mode {
        tc.anchor_layout = m;
    }
    if let Some(m) = args.retrieval_mode {
        tc.retrieval_mode = m;
    }
    if let Some(k) = args.retrieval_k {
        tc.retrieval_k = k;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    tc.validate()?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&tc)?);
        return Ok(());
    }
    let missing = |name: &str| ArfError::InvalidArgument(format!("--{name} is required"));
    let bundle_dir = args.bundle.ok_or_else(|| missing("bundle"))?;
    let b = read_bundle(&bundle_dir)?;
    let start = read_checkpoint(&args.checkpoint.ok_or_else(|| missing("checkpoint"))?)?;
    let out = args.out.ok_or_else(|| missing("out"))?;
    let captions = match &args.captions {
        Some(p) => caption_table_from_file(p)?,
        None => CaptionTable::from_records(&b.captions),
    };
    let index = match &args.index {
        Some(p) => Some(read_index(p)?),
        None if tc.is_active(LossTerm::Ret) => {
            return Err(ArfError::InvalidArgument(
                "--index is required when the ret loss is enabled".into(),
            ))
        }
        None => None,
    };
    let data = FinetuneData {
        samples: &b.finetune,
        prompts: &b.prompts_id,
        captions: &captions,
        candidates: &b.candidates,
        index: index.as_ref(),
    };
    let (ck, log) = run_finetune(data, &start, &tc)?;
    write_checkpoint(&out, &ck)?;
    if let Some(p) = args.log {
        write_log(&p, &log)?;
    }
    Ok(())
}

fn compare(cfg: &RunConfig, seeds: u64, check: bool) -> Result<Outcome> {
    if seeds == 0 {
        return Err(ArfError::InvalidArgument("--seeds must be >= 1".into()));
    }
    let outcomes = (0..seeds)
        .map(|s| run_seed(cfg, s, &Variant::ALL))
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::from("| Method | ID | DS | ZSL |\n|---|---|---|---|\n");
    let pre = mean_accuracy(&outcomes, None);
    let _ = writeln!(
        text,
        "| zero-shot | {:.2} | {:.2} | {:.2} |",
        pre.id, pre.ds, pre.zsl
    );
    for v in Variant::ALL {
        let m = mean_accuracy(&outcomes, Some(v));
        let _ = writeln!(
            text,
            "| {} | {:.2} | {:.2} | {:.2} |",
            v.name(),
            m.id,
            m.ds,
            m.zsl
        );
    }
    print!("{text}");
    if !check {
        return Ok(Outcome::Ok);
    }
    let base = mean_accuracy(&outcomes, Some(Variant::Baseline));
    let arf = mean_accuracy(&outcomes, Some(Variant::Arf));
    let wins = |v: Variant| {
        outcomes
            .iter()
            .filter(|o| {
                o.metrics(v).unwrap().accuracy("zsl")
                    > o.metrics(Variant::Baseline).unwrap().accuracy("zsl")
            })
            .count() as u64
    };
    let needed = (seeds * 8).div_ceil(10);
    let mut failures = Vec::new();
    if arf.zsl - base.zsl < 5.0 {
        failures.push(format!("ZSL gain {:.2} < 5", arf.zsl - base.zsl));
    }
    if (arf.id - base.id).abs() > 2.0 {
        failures.push(format!("ID gap {:.2} > 2", (arf.id - base.id).abs()));
    }
    if arf.ds < base.ds {
        failures.push(format!("DS {:.2} below baseline {:.2}", arf.ds, base.ds));
    }
    for v in [Variant::ClCap, Variant::ClRet] {
        if wins(v) < needed {
            failures.push(format!(
                "{} beats the baseline on {} of {seeds} seeds",
                v.name(),
                wins(v)
            ));
        }
    }
    Ok(if failures.is_empty() {
        Outcome::Ok
    } else {
        Outcome::VerificationFailed(failures.join("; "))
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

fn render_table(rows: &[(String, Metrics)], kind: TableKind, format: TableFormat) -> String {
    let ds_names: Vec<String> = {
        let mut n: Vec<String> = rows
            .iter()
            .flat_map(|(_, m)| {
                m.splits
                    .iter()
                    .filter(|s| s.is_ds())
                    .map(|s| s.split_name.clone())
            })
            .collect();
        n.sort();
        n.dedup();
        n
    };
    let mut header = vec!["Method".to_string()];
    match kind {
        TableKind::Ds => {
            header.push("ID".into());
            header.extend(ds_names.iter().cloned());
            header.push("Avg. DS".into());
            header.push("Avg. OOD".into());
        }
        TableKind::Zsl => header.push("ZSL".into()),
        TableKind::Ablation => {
            header.extend(["ID", "Avg. DS", "ZSL"].map(String::from));
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, m)| {
            let mut r = vec![label.clone()];
            match kind {
                TableKind::Ds => {
                    r.push(fmt_acc(m.accuracy("id")));
                    r.extend(ds_names.iter().map(|n| fmt_acc(m.accuracy(n))));
                    r.push(fmt_acc(m.mean_ds()));
                    r.push(fmt_acc(m.avg_ood));
                }
                TableKind::Zsl => r.push(fmt_acc(m.accuracy("zsl"))),
                TableKind::Ablation => {
                    r.push(fmt_acc(m.accuracy("id")));
                    r.push(fmt_acc(m.mean_ds()));
                    r.push(fmt_acc(m.accuracy("zsl")));
                }
            }
            r
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for r in std::iter::once(&header).chain(&body) {
                let _ = writeln!(out, "{}", r.join(","));
            }
        }
        TableFormat::Md => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for r in &body {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::SplitRecord;

    #[test]
    fn alphas_parse() {
        assert_eq!(parse_alphas("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_alphas("0,x").is_err());
    }

    #[test]
    fn tables_render() {
        let m = Metrics::from_records(vec![
            SplitRecord {
                split_name: "id".into(),
                n: 2,
                correct: 2,
                accuracy_percent: 100.0,
            },
            SplitRecord {
                split_name: "ds_1".into(),
                n: 2,
                correct: 1,
                accuracy_percent: 50.0,
            },
        ]);
        let rows = vec![("ft".to_string(), m)];
        assert_eq!(
            render_table(&rows, TableKind::Ds, TableFormat::Csv),
            "Method,ID,ds_1,Avg. DS,Avg. OOD\nft,100.0,50.0,50.0,50.0\n"
        );
        let md = render_table(&rows, TableKind::Zsl, TableFormat::Md);
        assert_eq!(md, "| Method | ZSL |\n|---|---|\n| ft | - |\n");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["arf", "--bogus"]), EXIT_USAGE);
        assert_eq!(
            run_cli(["arf", "train", "--losses", "cl,xyz", "--print-config"]),
            EXIT_USAGE
        );
        assert_eq!(
            run_cli(["arf", "train", "--print-config", "--paper-defaults"]),
            EXIT_OK
        );
    }
}
