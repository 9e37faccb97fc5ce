//! Command-line front end for the HOI generation pipeline.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hoigen_core::config::{parse_kv, RunConfig};
use hoigen_core::eval::batch_report;
use hoigen_core::runner;
use std::io::Write;
use std::path::PathBuf;

/// Print a line, tolerating a closed pipe (e.g. `hoigen ... | head`).
macro_rules! say {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout(), $($arg)*);
    };
}

#[derive(Parser)]
#[command(
    name = "hoigen",
    about = "Training-free human-object-interaction image generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file (see docs/config.md).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Modules to run: g | g,r | g,r,c
    #[arg(long)]
    modules: Option<String>,
    /// Backbone: toy | ldm-adapter
    #[arg(long)]
    backbone: Option<String>,
    /// VLM provider: mock | remote
    #[arg(long)]
    vlm: Option<String>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config
                .load_file(path)
                .with_context(|| format!("loading {}", path.display()))?;
        }
        let mut kv = std::collections::BTreeMap::new();
        if let Some(seed) = self.seed {
            kv.insert("seed".to_string(), seed.to_string());
        }
        if let Some(modules) = &self.modules {
            kv.insert("modules".to_string(), modules.clone());
        }
        if let Some(backbone) = &self.backbone {
            kv.insert("backbone".to_string(), backbone.clone());
        }
        if let Some(vlm) = &self.vlm {
            kv.insert("vlm".to_string(), vlm.clone());
        }
        if let Some(out) = &self.out {
            kv.insert("out".to_string(), out.display().to_string());
        }
        for entry in &self.set {
            let parsed = parse_kv(entry)?;
            if parsed.is_empty() {
                bail!("--set needs key=value, got {entry:?}");
            }
            kv.extend(parsed);
        }
        config.apply(&kv)?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate one image from a prompt or subject|verb|object triplet.
    Generate {
        /// Free-form "a man is carrying a bicycle" or "man|carry|bicycle".
        prompt: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every prompt in a file (one per line, # comments).
    Batch {
        prompt_file: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score finished runs with the configured embedder.
    Evaluate {
        /// Run ids under the output root; all runs when omitted.
        #[arg(long = "run")]
        runs: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump attention maps of a finished run at one step.
    InspectAttention {
        run_id: String,
        /// Denoising step to capture (counts down the schedule).
        #[arg(long)]
        step: usize,
        /// Restrict to one layer.
        #[arg(long)]
        layer: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { prompt, config } => {
            let config = config.build()?;
            let outcome = runner::run_generate(&prompt, &config)?;
            say!("run {}", outcome.manifest.run_id);
            say!("dir {}", outcome.run_dir.display());
            say!("manifest-hash {}", outcome.manifest.content_hash());
            if let Some(selected) = outcome.manifest.selected_index {
                say!("selected-candidate {selected}");
            }
            if let Some(needs) = outcome.manifest.needs_correction {
                say!(
                    "correction {}",
                    if needs { "applied" } else { "bypassed (no changes)" }
                );
            }
            Ok(())
        }
        Command::Batch {
            prompt_file,
            config,
        } => {
            let config = config.build()?;
            let outcome = runner::run_batch(&prompt_file, &config)?;
            say!("batch {}", outcome.batch_dir.display());
            say!(
                "runs {} ok, {} failed",
                outcome.manifests.len(),
                outcome.failures.len()
            );
            for failure in &outcome.failures {
                eprintln!(
                    "line {}: {}: {}",
                    failure.line, failure.prompt, failure.error
                );
            }
            if !outcome.scores.is_empty() {
                let report = batch_report(&outcome.scores)?;
                say!(
                    "scores n={} clip={:.3} verb={:.3}",
                    report.count, report.mean_clip_score, report.mean_verb_clip_score
                );
            }
            Ok(())
        }
        Command::Evaluate { runs, config } => {
            let config = config.build()?;
            let run_ids = if runs.is_empty() {
                discover_runs(&config)?
            } else {
                runs
            };
            if run_ids.is_empty() {
                bail!("no runs found under {}", config.out_root.display());
            }
            let mut records = Vec::new();
            for id in &run_ids {
                let manifest =
                    runner::RunManifest::load(&config.out_root.join(id).join("manifest.json"))?;
                match runner::evaluate_run(&manifest, &config)? {
                    Some(record) => {
                        say!(
                            "{}\t{:.3}\t{:.3}",
                            record.run_id, record.clip_score, record.verb_clip_score
                        );
                        records.push(record);
                    }
                    None => bail!("no embedder configured; set embedder = hash"),
                }
            }
            let report = batch_report(&records)?;
            say!(
                "mean over {}: clip={:.3} verb={:.3}",
                report.count, report.mean_clip_score, report.mean_verb_clip_score
            );
            Ok(())
        }
        Command::InspectAttention {
            run_id,
            step,
            layer,
            config,
        } => {
            let config = config.build()?;
            let report =
                runner::inspect_attention(&config.out_root, &run_id, step, layer.as_deref())?;
            if let Some(warning) = report.warning {
                eprintln!("warning: {warning}");
            }
            for file in &report.files {
                say!("{}", file.display());
            }
            Ok(())
        }
    }
}

fn discover_runs(config: &RunConfig) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = match std::fs::read_dir(&config.out_root) {
        Ok(e) => e,
        Err(_) => return Ok(ids),
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.join("manifest.json").exists() && path.join("final.png").exists() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
