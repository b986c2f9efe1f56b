use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use megl::checkpoint::Checkpoint;
use megl::data::{generate_synthetic, load_manifest, read_image, write_mask, Split, SyntheticSpec};
use megl::trainer::{evaluate, load_split, measure_efficiency, train, Model, CHECKPOINT_FILE, HISTORY_FILE};
use megl::{load_config, Result};

#[derive(Parser)]
#[command(name = "megl", about = "Explanation-guided image classification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on one split of its manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use this manifest instead of the one recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Skip caption generation and text metrics.
        #[arg(long)]
        no_text: bool,
    },
    /// Predict, explain and describe a single image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix; writes `<out>.saliency.png` and `<out>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Classification-path size and latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        timed: usize,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Render a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Print record, rationale, mask and class counts of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    num_samples: usize,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let outcome = train(&cfg)?;
            for r in &outcome.history {
                let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
                println!(
                    "epoch {} total {:.4} pred {:.4} visual {} dc {} textual {} val_acc {} val_miou {}",
                    r.epoch,
                    r.total,
                    r.pred,
                    f(r.visual),
                    f(r.dc),
                    f(r.textual),
                    f(r.val_accuracy),
                    f(r.val_miou)
                );
            }
            let dir = Path::new(&cfg.output_dir);
            println!("checkpoint = {}", dir.join(CHECKPOINT_FILE).display());
            println!("history = {}", dir.join(HISTORY_FILE).display());
        }
        Command::Eval { checkpoint, split, manifest, no_text } => {
            let mut model = Model::from_checkpoint(Checkpoint::load(&checkpoint)?);
            if let Some(m) = manifest {
                model.config.manifest = m.to_string_lossy().into_owned();
            }
            let which: Split = split.parse()?;
            let samples = load_split(&model.config, &model.vocab, which)?;
            print!("{}", evaluate(&model, &samples, !no_text)?.to_text());
        }
        Command::Explain { checkpoint, image, out } => {
            let model = Model::from_checkpoint(Checkpoint::load(&checkpoint)?);
            let e = model.explain_image(&read_image(&image)?)?;
            let prefix = out.unwrap_or_else(|| image.with_extension(""));
            let png = PathBuf::from(format!("{}.saliency.png", prefix.display()));
            write_mask(&e.saliency, &png)?;
            let (lo, hi) = e
                .saliency
                .grid()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let report = format!(
                "predicted = {}\nclass = {}\nsaliency = {}\nsaliency_min = {lo:.6}\nsaliency_max = {hi:.6}\nrationale = {}\n",
                e.predicted,
                e.class_name,
                png.display(),
                e.rationale
            );
            std::fs::write(format!("{}.txt", prefix.display()), &report)?;
            print!("{report}");
        }
        Command::Data { command: DataCommand::Synth(a) } => {
            let spec = SyntheticSpec {
                num_samples: a.num_samples,
                num_classes: a.num_classes,
                visual_annotation_fraction: a.fraction,
                image_size: a.image_size,
                noise_level: a.noise,
                seed: a.seed,
            };
            let m = generate_synthetic(&spec, &a.out)?;
            let s = m.stats();
            println!("manifest = {}", a.out.join("manifest.tsv").display());
            println!("total = {}\nwith_text = {}\nwith_visual = {}\nclasses = {}", s.total, s.with_text, s.with_visual, s.classes);
        }
        Command::Data { command: DataCommand::Stats { manifest } } => {
            let s = load_manifest(&manifest)?.stats();
            println!("total = {}\nwith_text = {}\nwith_visual = {}\nclasses = {}", s.total, s.with_text, s.with_visual, s.classes);
        }
        Command::Bench { checkpoint, warmup, timed } => {
            let e = measure_efficiency(&checkpoint, warmup, timed)?;
            println!("param_count = {}\nlatency_ms = {:.6}\nfps = {:.6}", e.param_count, e.latency_ms, e.fps);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
