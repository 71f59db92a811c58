use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cgf_harness::ablation::run_ablation;
use cgf_harness::config::RunConfig;
use cgf_harness::data::{generate_dataset, vocabulary_text, Shape};
use cgf_harness::dump::{dump_masks, write_mask, write_ppm};
use cgf_harness::eval::{evaluate, load_checkpoint};
use cgf_harness::gradcheck::{full_check_config, full_model_check, op_checks, CheckLine};
use cgf_harness::split::{Dataset, SplitName};
use cgf_harness::train::{train_to_dir, LOG_HEADER};
use cgf_core::metrics::MetricReport;

#[derive(Parser)]
#[command(name = "cgf", version, about = "Language-guided grouping segmentation on synthetic scenes")]
struct Cli {
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and keep the best val-seen checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val-seen")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Check the whole model instead of single ops.
        #[arg(long)]
        full: bool,
        /// Random scalars per parameter group with `--full`.
        #[arg(long, default_value_t = 20)]
        per_group: usize,
    },
    /// Write predicted, ground-truth and grouping maps as graymaps.
    DumpMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val-seen")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render synthetic scenes with their masks and expressions.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Restores a checkpoint and rebuilds the dataset it was trained on.
fn checkpoint_split(ckpt: &Path, split: &str, seed: Option<u64>) -> Result<(RunConfig, cgf_core::model::Model, cgf_core::ParamStore, Dataset, SplitName)> {
    let (mut cfg, model, store) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let name: SplitName = split.parse()?;
    let data = Dataset::build(&cfg)?;
    Ok((cfg, model, store, data, name))
}

fn print_checks(lines: &[CheckLine]) -> bool {
    let mut ok = true;
    for l in lines {
        println!("{}\t{}\t{:.3e}\t{}", l.name, l.checked, l.max_rel_err, if l.passed() { "ok" } else { "FAIL" });
        ok &= l.passed();
    }
    ok
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            println!("{LOG_HEADER}");
            let outcome = train_to_dir(&cfg, &out, |e| println!("{e}"))?;
            println!("best epoch {} val mIoU {:.6}", outcome.best_epoch, outcome.best_val_miou);
        }
        Command::Eval { ckpt, split, out } => {
            let (cfg, model, store, data, name) = checkpoint_split(&ckpt, &split, cli.seed)?;
            let set = data.subset(name);
            if set.is_empty() {
                bail!("split {name} is empty");
            }
            let ev = evaluate(&model, &store, &set, cfg.threshold)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let row = ev.report.csv_row(name.as_str());
            fs::write(out.join("metrics.csv"), format!("{}\n{row}\n", MetricReport::CSV_HEADER))?;
            fs::write(out.join("referent_accuracy.txt"), format!("{:.6}\n", ev.referent_accuracy))?;
            println!("{}\n{row}\nreferent accuracy {:.6}", MetricReport::CSV_HEADER, ev.referent_accuracy);
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            println!("{}", cgf_harness::ablation::CSV_HEADER);
            run_ablation(&cfg, &out, |r| println!("{}", r.csv_row()))?;
        }
        Command::Gradcheck { full, per_group } => {
            let seed = cli.seed.unwrap_or(0);
            let lines = if full { full_model_check(&full_check_config(), seed, per_group)? } else { op_checks(seed)? };
            if !print_checks(&lines) {
                bail!("gradient check failed");
            }
        }
        Command::DumpMasks { ckpt, split, out } => {
            let (cfg, model, store, data, name) = checkpoint_split(&ckpt, &split, cli.seed)?;
            let paths = dump_masks(&model, &store, &data.subset(name), cfg.threshold, &out)?;
            println!("wrote {} files to {}", paths.len(), out.display());
        }
        Command::GenData { out, count, image_size } => {
            let seed = cli.seed.unwrap_or(0);
            let samples = generate_dataset(seed, count, Shape::ALL, image_size)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut index = String::from("sample\tcategory\ttokens\texpression\n");
            for (i, s) in samples.iter().enumerate() {
                write_ppm(&out.join(format!("{i:04}.ppm")), &s.image)?;
                write_mask(&out.join(format!("{i:04}_gt.pgm")), &s.mask)?;
                let tokens: Vec<String> = s.expression.iter().map(usize::to_string).collect();
                let attrs = s.objects[s.referent].attrs;
                index.push_str(&format!("{i:04}\t{}\t{}\t{}\n", s.category, tokens.join(" "), attrs.phrase()));
            }
            fs::write(out.join("expressions.tsv"), index)?;
            fs::write(out.join("vocabulary.txt"), vocabulary_text())?;
            println!("wrote {count} scenes to {}", out.display());
        }
    }
    Ok(())
}
