//! `esc`: train, evaluate and inspect the segmentation model from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use escnet::config::PromptKinds;
use escnet::correlation::correlate;
use escnet::escnet::image_batch;
use escnet::export::{write_pgm, Legend, LegendEntry};
use escnet::harness::ablate::{ablate, AblationPlan};
use escnet::harness::gradcheck::{gradcheck, Scope};
use escnet::harness::metrics::miou;
use escnet::harness::pretrain::{pretrain_encoders, pretrain_sam_analog};
use escnet::harness::synth::{class_names, sample};
use escnet::harness::train::{data_seeds, eval_set, evaluate, load_checkpoint, train, vocabulary, Arm, Pretrained};
use escnet::{ppg, EscNet, ModelConfig};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "esc", version, about = "Open-vocabulary segmentation on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; every file the command writes goes here.
    #[arg(long, global = true, default_value = "esc-out")]
    out: PathBuf,
    /// Root seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dotted config override, e.g. `--set lr_head=1e-3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one arm and write metrics.jsonl plus per-epoch checkpoints.
    Train {
        #[arg(long, default_value = "pretrained_sam")]
        arm: String,
        /// Directory holding encoders.esc and sam_blocks.esc.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out synthetic set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment held-out samples and write label maps as PGM plus a legend.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// First held-out sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Write the pseudo prompts of one held-out sample as PGM masks plus JSON.
    Ppg {
        /// Checkpoint whose encoders produce the correlation; the configured
        /// model with its initial weights otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference gradient check in float64.
    Gradcheck {
        /// linear, correlation, vlf, samblock or all.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Train every arm and prompt combination over several seeds.
    Ablate {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Arms to train, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = ["none".to_string(), "random_sam".to_string(), "pretrained_sam".to_string()])]
        arms: Vec<String>,
        /// Prompt combinations such as `points+masks`, comma separated; all
        /// seven by default.
        #[arg(long, value_delimiter = ',')]
        prompts: Vec<String>,
    },
    /// Align the encoders, then pretrain the two-way blocks.
    PretrainSam {
        /// Reuse an existing encoder archive instead of aligning afresh.
        #[arg(long)]
        encoders: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common) -> Result<ModelConfig> {
    let base = match &common.config {
        Some(path) => {
            if !path.exists() {
                bail!("config file not found: {}", path.display());
            }
            ModelConfig::load(path)?
        }
        None => ModelConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn class_legend(images: Vec<String>, classes: &[usize]) -> Legend {
    let names = class_names();
    Legend {
        images,
        entries: classes
            .iter()
            .map(|&c| LegendEntry {
                value: c as u8,
                label: names.get(c).cloned().unwrap_or_else(|| format!("class {c}")),
            })
            .collect(),
        extra: serde_json::Value::Null,
    }
}

fn run(command: Command, cfg: ModelConfig, out: &Path) -> Result<()> {
    match command {
        Command::Train { arm, pretrained } => {
            let arm: Arm = arm.parse()?;
            let init = pretrained.as_deref().map(Pretrained::in_dir).unwrap_or_default();
            let outcome = train(&cfg, arm, &init, out)?;
            write_json(&out.join("final_eval.json"), &outcome.final_eval)?;
            println!("{arm}: held-out mIoU {:.4}", outcome.final_eval.miou);
        }
        Command::Eval { checkpoint } => {
            let (ckpt_cfg, _store, model) = load_checkpoint(&checkpoint)?;
            let classes = vocabulary(&ckpt_cfg);
            let (loss, report) = evaluate(&model, &eval_set(&ckpt_cfg), &classes, ckpt_cfg.batch_size)?;
            write_json(&out.join("eval.json"), &json!({ "loss": loss, "report": report }))?;
            println!("loss {loss:.4} mIoU {:.4}", report.miou);
        }
        Command::Predict { checkpoint, index, count } => {
            let (ckpt_cfg, _store, model) = load_checkpoint(&checkpoint)?;
            let classes = vocabulary(&ckpt_cfg);
            let (_, eval_seed) = data_seeds(&ckpt_cfg);
            let size = ckpt_cfg.image_size;
            let mut images = Vec::new();
            let mut scores = Vec::new();
            for i in index..index + count {
                let s = sample(eval_seed, i, size);
                let x = image_batch(&[s.image.clone()], size, model.dtype())?;
                let pred = &model.predict(&x, &classes)?.labels[0];
                let pred_name = format!("pred_{i:04}.pgm");
                let gt_name = format!("gt_{i:04}.pgm");
                write_pgm(&out.join(&pred_name), size, size, pred)?;
                write_pgm(&out.join(&gt_name), size, size, &s.gt)?;
                let m = miou(pred, &s.gt, &classes).miou;
                scores.push(json!({ "index": i, "miou": m }));
                println!("sample {i}: mIoU {m:.4} -> {pred_name}");
                images.extend([pred_name, gt_name]);
            }
            let mut legend = class_legend(images, &classes);
            legend.extra = json!({ "checkpoint": checkpoint, "samples": scores });
            legend.save(&out.join("legend.json"))?;
        }
        Command::Ppg { checkpoint, index } => {
            let (cfg, model) = match checkpoint {
                Some(path) => {
                    let (c, _store, m) = load_checkpoint(&path)?;
                    (c, m)
                }
                None => {
                    let (_store, m) = EscNet::init(&cfg)?;
                    (cfg, m)
                }
            };
            let (_, eval_seed) = data_seeds(&cfg);
            let s = sample(eval_seed, index, cfg.image_size);
            let x = image_batch(&[s.image.clone()], cfg.image_size, model.dtype())?;
            let (v, t) = model.encode(&x, &s.class_ids)?;
            let corr = correlate(&v, &t)?;
            let prompts = ppg::generate(&corr, &cfg, model.ppg_seed(0))?;
            let (h, w) = (prompts.height, prompts.width);
            let names = class_names();
            let mut images = Vec::new();
            let mut classes_json = Vec::new();
            for (&cid, cp) in s.class_ids.iter().zip(&prompts.classes) {
                // grey level k marks region k (1-based), 0 is outside every region
                let mut regions = vec![0u8; h * w];
                for (k, m) in cp.masks.iter().enumerate() {
                    for (p, &on) in m.iter().enumerate() {
                        if on {
                            regions[p] = (k + 1) as u8;
                        }
                    }
                }
                let name = format!("ppg_class{cid}.pgm");
                write_pgm(&out.join(&name), w, h, &regions)?;
                images.push(name.clone());
                classes_json.push(json!({
                    "class_id": cid,
                    "name": names[cid],
                    "image": name,
                    "points": cp.points,
                    "boxes": cp.boxes,
                }));
            }
            let entries = std::iter::once(LegendEntry { value: 0, label: "outside every region".into() })
                .chain((0..cfg.prompts_per_class).map(|k| LegendEntry {
                    value: (k + 1) as u8,
                    label: format!("region {k}"),
                }))
                .collect();
            Legend {
                images,
                entries,
                extra: json!({ "index": index, "grid": [h, w], "classes": classes_json }),
            }
            .save(&out.join("legend.json"))?;
            println!("prompts for {} classes of sample {index}", s.class_ids.len());
        }
        Command::Gradcheck { scope } => {
            let scope: Scope = scope.parse()?;
            let report = gradcheck(scope, cfg.seed)?;
            write_json(&out.join("gradcheck.json"), &report)?;
            println!(
                "{}: max relative error {:.3e} over {} coordinates (tolerance {:.0e})",
                scope.name(),
                report.max_relative_error,
                report.checked,
                report.tolerance
            );
            if !report.passed {
                bail!("gradient check `{}` exceeded its tolerance", scope.name());
            }
        }
        Command::Ablate { pretrained, seeds, arms, prompts } => {
            let arms = arms.iter().map(|a| a.parse()).collect::<escnet::Result<Vec<Arm>>>()?;
            let prompt_kinds = if prompts.is_empty() {
                AblationPlan::default().prompt_kinds
            } else {
                prompts.iter().map(|p| PromptKinds::from_label(p)).collect::<escnet::Result<_>>()?
            };
            let plan = AblationPlan { seeds, arms, prompt_kinds };
            let report = ablate(&cfg, &plan, &Pretrained::in_dir(&pretrained), out)?;
            print!("{}", report.table());
        }
        Command::PretrainSam { encoders } => {
            let encoders = match encoders {
                Some(path) => path,
                None => {
                    let r = pretrain_encoders(&cfg, out)?;
                    println!("encoders: cell accuracy {:.3}", r.cell_accuracy);
                    r.archive
                }
            };
            let r = pretrain_sam_analog(&cfg, Some(&encoders), out)?;
            write_json(&out.join("pretrain_report.json"), &r)?;
            println!("two-way blocks: mean probe IoU {:.3}", r.mean_probe_iou);
        }
    }
    Ok(())
}

fn start(cli: Cli) -> std::result::Result<(), (u8, anyhow::Error)> {
    // failures before any work starts count as usage errors
    let usage = |e: anyhow::Error| (1u8, e);
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    let cfg = resolve_config(&cli.common).map_err(usage)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(|e| (2, e))?;
    write_json(&out.join("config.json"), &cfg).map_err(|e| (2, e))?;
    run(cli.command, cfg, &out).map_err(|e| (2, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match start(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
