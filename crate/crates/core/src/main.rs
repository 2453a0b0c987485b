use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mctse::clue::{ClueSet, ClueSubset};
use mctse::data::{materialize_wavs, simulate, Manifest, SimConfig, Split};
use mctse::dccrn::{extract, Checkpoint};
use mctse::signal::{read_wav, write_wav, WavFormat};
use mctse::train::{attention_csv, evaluate, train, Corruption, CorruptionSpec, TrainConfig};
use mctse::{Error, Result};

#[derive(Parser)]
#[command(name = "mctse", version, about = "Multi-clue target sound extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture manifest.
    Simulate {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        valid: usize,
        /// Examples per test split.
        #[arg(long)]
        test: usize,
        #[arg(long = "unseen-classes", default_value_t = 0)]
        unseen_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Also write <id>_mix.wav and <id>_target.wav.
        #[arg(long)]
        wav: bool,
    },
    /// Train stage 1 (tag clue) or stage 2 (fused clues).
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; every field is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to start from (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the target from a mixture WAV.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mix: PathBuf,
        /// tag=ID[,text=T1:T2:...][,video=FILE]
        #[arg(long)]
        clues: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean SNR improvement per clue subset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subsets such as tag,tag+text; "all" for all seven.
        #[arg(long, default_value = "all")]
        subsets: String,
        #[arg(long, default_value = "test-seen")]
        split: String,
        /// text, video or both.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump head-averaged clue attention for one manifest example.
    Attention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        example: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_subsets(s: &str) -> Result<Vec<ClueSubset>> {
    if s.trim() == "all" {
        return Ok(ClueSubset::all_nonempty());
    }
    s.split(',').map(|p| ClueSubset::parse(p.trim())).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            classes,
            train,
            valid,
            test,
            unseen_classes,
            seed,
            out,
            wav,
        } => {
            let cfg = SimConfig {
                classes,
                train,
                valid,
                test,
                unseen: unseen_classes,
                seed,
            };
            let mut manifest = simulate(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            if wav {
                materialize_wavs(&mut manifest, &out)?;
            }
            manifest.write(out.join("manifest.jsonl"))?;
            eprintln!("wrote {} examples to {}", manifest.len(), out.display());
        }
        Command::Train {
            stage,
            manifest,
            config,
            init,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = stage;
            cfg.validate()?;
            let manifest = Manifest::read(&manifest)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let mut metrics = String::from("epoch,lr,steps,train_loss,valid_loss,best\n");
            let outcome = train(&manifest, &cfg, init.as_ref(), &mut |e| {
                eprintln!(
                    "epoch {:3}  lr {:.3e}  train {:.4}  valid {:.4}{}",
                    e.epoch,
                    e.lr,
                    e.train_loss,
                    e.valid_loss,
                    if e.best { "  *" } else { "" }
                );
                metrics.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.epoch, e.lr, e.steps, e.train_loss, e.valid_loss, e.best
                ));
            })?;
            outcome.checkpoint.save(&out)?;
            write_file(
                &PathBuf::from(format!("{}.metrics.csv", out.display())),
                &metrics,
            )?;
        }
        Command::Extract {
            ckpt,
            mix,
            clues,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let clues = ClueSet::parse_arg(&clues)?;
            let mixture = read_wav(&mix)?;
            let result = extract(&mixture, &clues, &ckpt)?;
            write_wav(&out, &result.audio, WavFormat::Float32)?;
        }
        Command::Evaluate {
            ckpt,
            manifest,
            subsets,
            split,
            corrupt,
            seed,
            report,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let manifest = Manifest::read(&manifest)?;
            let split = Split::parse(&split)?;
            let records: Vec<_> = manifest.split(split).collect();
            if records.is_empty() {
                return Err(Error::Input(format!("manifest has no {split} examples")));
            }
            let corruption = corrupt
                .map(|c| Corruption::parse(&c).map(|kind| CorruptionSpec { kind, seed }))
                .transpose()?;
            let rep = evaluate(
                &records,
                split.name(),
                &ckpt,
                &parse_subsets(&subsets)?,
                corruption,
            )?;
            for s in &rep.summary {
                eprintln!(
                    "{:>15}  n={:<4} SNRi {:+.3} dB",
                    s.subset.to_string(),
                    s.count,
                    s.mean_snri
                );
            }
            rep.write_csv(&report)?;
        }
        Command::Attention {
            ckpt,
            manifest,
            example,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let manifest = Manifest::read(&manifest)?;
            let ex = manifest.find(&example)?.example()?;
            write_file(&out, &attention_csv(&ex.mixture, &ex.clues, &ckpt)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
