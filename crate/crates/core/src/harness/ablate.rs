//! Ablation runner: the two-way-block arms and the prompt-kind combinations,
//! trained with identical budgets over several seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::{ModelConfig, PromptKinds};
use crate::error::{EscError, Result};
use crate::harness::train::{train, Arm, Pretrained};

/// Prompt-kind combinations compared with the pretrained arm.
pub const PROMPT_COMBINATIONS: [PromptKinds; 7] = [
    PromptKinds { points: true, boxes: false, masks: false },
    PromptKinds { points: false, boxes: true, masks: false },
    PromptKinds { points: false, boxes: false, masks: true },
    PromptKinds { points: true, boxes: false, masks: true },
    PromptKinds { points: true, boxes: true, masks: false },
    PromptKinds { points: false, boxes: true, masks: true },
    PromptKinds { points: true, boxes: true, masks: true },
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Prompt kinds trained with the pretrained arm.
    pub prompt_kinds: Vec<PromptKinds>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            arms: Arm::ALL.to_vec(),
            prompt_kinds: PROMPT_COMBINATIONS.to_vec(),
        }
    }
}

/// One training run of the ablation.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub group: String,
    pub label: String,
    pub seed: u64,
    pub miou: f64,
    pub eval_loss: f64,
    pub wall_time: f64,
    pub dir: PathBuf,
    #[serde(skip)]
    pub config: ModelConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub label: String,
    pub miou: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

pub const ARM_GROUP: &str = "arms";
pub const PROMPT_GROUP: &str = "prompts";

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Dotted keys whose values differ between two configurations.
pub fn differing_keys(a: &ModelConfig, b: &ModelConfig) -> Result<Vec<String>> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, va) in x {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match y.get(k) {
                        Some(vb) => walk(&key, va, vb, out),
                        None => out.push(key),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(a)?, &serde_json::to_value(b)?, &mut out);
    Ok(out)
}

impl AblationReport {
    pub fn row(&self, group: &str, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group == group && r.label == label)
    }

    pub fn median_of(&self, group: &str, label: &str) -> Option<f64> {
        self.row(group, label).map(|r| r.median)
    }

    /// Aligned text table: one row per arm or prompt combination.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("{:>8}", format!("seed {s}"))).collect();
        let _ = writeln!(out, "{:<8} {:<width$} {} {:>8}", "group", "label", seeds.join(" "), "median");
        for r in &self.rows {
            let cells: Vec<String> = r.miou.iter().map(|m| format!("{m:>8.4}")).collect();
            let _ = writeln!(out, "{:<8} {:<width$} {} {:>8.4}", r.group, r.label, cells.join(" "), r.median);
        }
        out
    }
}

fn run_one(
    cfg: &ModelConfig,
    arm: Arm,
    init: &Pretrained,
    dir: &Path,
    group: &str,
    label: &str,
) -> Result<AblationRun> {
    let outcome = train(cfg, arm, init, dir)?;
    let eval = outcome
        .records
        .iter()
        .rev()
        .find(|r| r.split == "eval")
        .map_or(f64::NAN, |r| r.loss);
    log::info!("ablation {group}/{label} seed {}: miou {:.4}", cfg.seed, outcome.final_eval.miou);
    Ok(AblationRun {
        group: group.into(),
        label: label.into(),
        seed: cfg.seed,
        miou: outcome.final_eval.miou,
        eval_loss: eval,
        wall_time: outcome.records.last().map_or(0.0, |r| r.wall_time),
        dir: dir.to_path_buf(),
        config: outcome.cfg,
    })
}

/// Trains every arm and prompt combination of `plan` for each seed, then
/// writes `report.json` and `table.txt` under `out_dir`. The pretrained
/// prompt run with the configured prompt kinds is shared with the arm table.
pub fn ablate(cfg: &ModelConfig, plan: &AblationPlan, init: &Pretrained, out_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    if plan.seeds.is_empty() {
        return Err(EscError::Invalid("ablation needs at least one seed".into()));
    }
    let needs_sam = plan.arms.contains(&Arm::PretrainedSam) || !plan.prompt_kinds.is_empty();
    if needs_sam && init.sam.as_deref().is_none_or(|p| !p.exists()) {
        return Err(EscError::Invalid(
            "the pretrained arm needs a pretrained block archive; run pretrain-sam first".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| EscError::io(out_dir, e))?;
    let mut runs: Vec<AblationRun> = Vec::new();
    for &seed in &plan.seeds {
        let seeded = ModelConfig { seed, ..cfg.clone() };
        for &arm in &plan.arms {
            let dir = out_dir.join(ARM_GROUP).join(arm.name()).join(format!("seed{seed}"));
            runs.push(run_one(&seeded, arm, init, &dir, ARM_GROUP, arm.name())?);
        }
        for &kinds in &plan.prompt_kinds {
            let label = kinds.label();
            let shared = runs
                .iter()
                .find(|r| r.group == ARM_GROUP && r.label == Arm::PretrainedSam.name() && r.seed == seed)
                .filter(|_| kinds == cfg.prompts)
                .cloned();
            let run = match shared {
                Some(r) => AblationRun { group: PROMPT_GROUP.into(), label, ..r },
                None => {
                    let c = ModelConfig { prompts: kinds, ..seeded.clone() };
                    let dir = out_dir.join(PROMPT_GROUP).join(&label).join(format!("seed{seed}"));
                    run_one(&c, Arm::PretrainedSam, init, &dir, PROMPT_GROUP, &label)?
                }
            };
            runs.push(run);
        }
    }

    let mut rows: Vec<AblationRow> = Vec::new();
    for run in &runs {
        match rows.iter_mut().find(|r| r.group == run.group && r.label == run.label) {
            Some(row) => row.miou.push(run.miou),
            None => rows.push(AblationRow {
                group: run.group.clone(),
                label: run.label.clone(),
                miou: vec![run.miou],
                median: 0.0,
            }),
        }
    }
    rows.iter_mut().for_each(|r| r.median = median(&r.miou));
    let report = AblationReport {
        seeds: plan.seeds.clone(),
        rows,
        runs,
    };
    let json = out_dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| EscError::io(&json, e))?;
    let table = out_dir.join("table.txt");
    fs::write(&table, report.table()).map_err(|e| EscError::io(&table, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    }

    #[test]
    fn arms_differ_only_in_the_block_switch() {
        let cfg = ModelConfig::default();
        let keys = differing_keys(&Arm::None.apply(&cfg), &Arm::RandomSam.apply(&cfg)).unwrap();
        assert_eq!(keys, vec!["sam_blocks".to_string()]);
        let pm = ModelConfig { prompts: PromptKinds::from_label("points").unwrap(), ..cfg.clone() };
        assert_eq!(differing_keys(&cfg, &pm).unwrap(), vec!["prompts.masks".to_string()]);
    }

    #[test]
    fn missing_sam_archive_is_rejected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let err = ablate(&ModelConfig::tiny(), &AblationPlan::default(), &Pretrained::default(), dir.path());
        assert!(matches!(err, Err(EscError::Invalid(_))));
    }

    #[test]
    fn tiny_ablation_writes_report_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            epochs: 1,
            samples_per_epoch: 2,
            batch_size: 2,
            eval_samples: 2,
            ..ModelConfig::tiny()
        };
        let plan = AblationPlan {
            seeds: vec![0],
            arms: vec![Arm::None, Arm::RandomSam],
            prompt_kinds: vec![],
        };
        let report = ablate(&cfg, &plan, &Pretrained::default(), dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(dir.path().join("report.json").exists());
        let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
        assert!(table.contains("random_sam"));
        assert!(report.median_of(ARM_GROUP, "none").is_some());
    }
}
