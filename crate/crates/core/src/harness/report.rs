//! Cross-run aggregation: per-task result tables, ablation tables, and
//! per-stage training summaries, rendered as Markdown plus structured JSON.
//!
//! A report scans every run directory under one root, groups runs by task
//! and by (method, ablation), and averages evaluation means across seeds.
//! Missing artifacts are reported as warnings, never fabricated; a single
//! seed yields a mean with no deviation and a warning saying so.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Method, RunConfig};
use crate::curriculum::Split;

use super::{load_run_config, mean_std, read_metrics, write_json, EvalReport, HarnessError, RunDir, TrainRecord};

/// One run's artifacts, as found on disk.
#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    /// Split name → evaluation report, for the splits that were evaluated.
    pub evals: BTreeMap<String, EvalReport>,
    pub metrics: Vec<TrainRecord>,
}

/// Scans a runs root for directories holding a config snapshot.
pub fn collect_runs(root: &Path) -> Result<Vec<RunSummary>, HarnessError> {
    let entries = fs::read_dir(root).map_err(|source| HarnessError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut runs = Vec::new();
    for entry in entries.flatten() {
        let dir = entry.path();
        if !dir.is_dir() || !dir.join("config.json").exists() {
            continue;
        }
        let cfg = load_run_config(&dir)?;
        let rd = RunDir::open(&dir);
        let mut evals = BTreeMap::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let path = rd.eval_dir().join(format!("{}.json", split.name()));
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                evals.insert(split.name().to_string(), serde_json::from_str(&text)?);
            }
        }
        let metrics = if rd.metrics_path().exists() {
            read_metrics(&rd.metrics_path())?
        } else {
            Vec::new()
        };
        runs.push(RunSummary { dir, cfg, evals, metrics });
    }
    runs.sort_by_key(|r| r.dir.clone());
    Ok(runs)
}

/// Cross-seed statistics of one split column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitStat {
    pub mean: f64,
    /// Sample standard deviation across seeds; absent with a single seed.
    pub std: Option<f64>,
    pub seeds: usize,
    /// Whether this is the best mean in its column of the table.
    pub best: bool,
}

/// One table row: a method (possibly ablated) aggregated across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    /// Split name → cross-seed statistics.
    pub splits: BTreeMap<String, SplitStat>,
}

impl MethodRow {
    /// Row label as rendered in tables.
    pub fn label(&self) -> String {
        if self.ablation == Ablation::None {
            self.method.to_string()
        } else {
            format!("{} {}", self.method, self.ablation)
        }
    }
}

/// Mean batch return per curriculum stage for one method variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageCurve {
    pub method: Method,
    pub ablation: Ablation,
    pub stage: usize,
    /// Updates aggregated into this point, across seeds.
    pub updates: usize,
    pub mean_return: f64,
}

/// Everything reported for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// Unablated methods.
    pub rows: Vec<MethodRow>,
    /// Context-stack variants (the unablated row first, for reference).
    pub ablation_rows: Vec<MethodRow>,
    pub stage_curves: Vec<StageCurve>,
}

/// The aggregated report across every run under a root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub tasks: Vec<TaskReport>,
    pub warnings: Vec<String>,
}

fn method_order(m: Method) -> usize {
    crate::config::METHODS.iter().position(|x| *x == m).unwrap_or(usize::MAX)
}

fn ablation_order(a: Ablation) -> usize {
    crate::config::ABLATIONS.iter().position(|x| *x == a).unwrap_or(usize::MAX)
}

/// Builds cross-seed rows from grouped runs, recording single-seed and
/// missing-split warnings.
fn build_rows(
    task: &str,
    groups: &BTreeMap<(usize, usize), Vec<&RunSummary>>,
    warnings: &mut Vec<String>,
) -> Vec<MethodRow> {
    let mut rows = Vec::new();
    for runs in groups.values() {
        let method = runs[0].cfg.method;
        let ablation = runs[0].cfg.ablation;
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.cfg.seed).collect();
        seeds.sort_unstable();
        let mut splits = BTreeMap::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let name = split.name();
            let means: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.evals.get(name).map(|e| e.mean))
                .collect();
            if means.is_empty() {
                continue;
            }
            if means.len() < runs.len() {
                warnings.push(format!(
                    "{task}/{method}{}: only {}/{} seeds have a {name} evaluation",
                    if ablation == Ablation::None { String::new() } else { format!("+{ablation}") },
                    means.len(),
                    runs.len(),
                ));
            }
            let (mean, std) = mean_std(&means);
            if std.is_none() {
                warnings.push(format!(
                    "{task}/{method}{}: single seed on the {name} split, no deviation reported",
                    if ablation == Ablation::None { String::new() } else { format!("+{ablation}") },
                ));
            }
            splits.insert(
                name.to_string(),
                SplitStat { mean, std, seeds: means.len(), best: false },
            );
        }
        rows.push(MethodRow { method, ablation, seeds, splits });
    }
    rows
}

/// Flags the best mean per split column.
fn flag_best(rows: &mut [MethodRow]) {
    for split in ["train", "validation", "test"] {
        let best = rows
            .iter()
            .filter_map(|r| r.splits.get(split).map(|s| s.mean))
            .fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            continue;
        }
        for row in rows.iter_mut() {
            if let Some(stat) = row.splits.get_mut(split) {
                stat.best = stat.mean == best;
            }
        }
    }
}

/// Aggregates every run under `root` and writes `report.md` and
/// `report.json` there.
pub fn emit_report(root: &Path) -> Result<Report, HarnessError> {
    let runs = collect_runs(root)?;
    if runs.is_empty() {
        return Err(HarnessError::NoRuns(root.to_path_buf()));
    }

    let mut warnings = Vec::new();
    let mut by_task: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for run in &runs {
        by_task.entry(run.cfg.task.id().to_string()).or_default().push(run);
        if run.evals.is_empty() {
            warnings.push(format!(
                "{} has no evaluation artifacts; its row may be missing",
                run.dir.display()
            ));
        }
    }

    let mut tasks = Vec::new();
    for (task, task_runs) in &by_task {
        // Group by (method, ablation) in reporting order.
        let mut groups: BTreeMap<(usize, usize), Vec<&RunSummary>> = BTreeMap::new();
        for run in task_runs {
            groups
                .entry((method_order(run.cfg.method), ablation_order(run.cfg.ablation)))
                .or_default()
                .push(run);
        }

        let all_rows = build_rows(task, &groups, &mut warnings);
        let mut rows: Vec<MethodRow> =
            all_rows.iter().filter(|r| r.ablation == Ablation::None).cloned().collect();
        flag_best(&mut rows);
        // The ablation table lists context-stack variants, with the
        // unablated row repeated for reference when it exists.
        let mut ablation_rows: Vec<MethodRow> = all_rows
            .iter()
            .filter(|r| r.method.has_context())
            .filter(|r| {
                r.ablation != Ablation::None
                    || all_rows
                        .iter()
                        .any(|o| o.method == r.method && o.ablation != Ablation::None)
            })
            .cloned()
            .collect();
        flag_best(&mut ablation_rows);

        // Stage curves: mean batch return per curriculum stage, across the
        // updates and seeds of each variant.
        let mut stage_curves = Vec::new();
        for runs_in_group in groups.values() {
            let method = runs_in_group[0].cfg.method;
            let ablation = runs_in_group[0].cfg.ablation;
            let mut per_stage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for run in runs_in_group {
                for record in &run.metrics {
                    per_stage.entry(record.stage).or_default().push(record.mean_return);
                }
            }
            for (stage, returns) in per_stage {
                let (mean_return, _) = mean_std(&returns);
                stage_curves.push(StageCurve {
                    method,
                    ablation,
                    stage,
                    updates: returns.len(),
                    mean_return,
                });
            }
        }

        tasks.push(TaskReport { task: task.clone(), rows, ablation_rows, stage_curves });
    }

    let report = Report { tasks, warnings };
    write_json(&root.join("report.json"), &report)?;
    let markdown = render_markdown(&report);
    let md_path = root.join("report.md");
    fs::write(&md_path, markdown)
        .map_err(|source| HarnessError::Io { path: md_path, source })?;
    Ok(report)
}

fn fmt_stat(stat: Option<&SplitStat>) -> String {
    let Some(s) = stat else { return "—".to_string() };
    let body = match s.std {
        Some(sd) => format!("{:.2} ± {:.2}", s.mean, sd),
        None => format!("{:.2}", s.mean),
    };
    if s.best {
        format!("**{body}**")
    } else {
        body
    }
}

fn render_table(out: &mut String, header: &str, rows: &[MethodRow]) {
    out.push_str(&format!("| {header} | train | validation | test | seeds |\n"));
    out.push_str("|---|---|---|---|---|\n");
    for row in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            row.label(),
            fmt_stat(row.splits.get("train")),
            fmt_stat(row.splits.get("validation")),
            fmt_stat(row.splits.get("test")),
            row.seeds.len(),
        ));
    }
}

/// Renders the report as Markdown. Returns are mean ± sample deviation
/// across seeds; the best column entries are bold; absent data shows as a
/// dash.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::from("# Results\n");
    for task in &report.tasks {
        out.push_str(&format!("\n## {}\n\n", task.task));
        if task.rows.is_empty() {
            out.push_str("No evaluated methods.\n");
        } else {
            out.push_str("Final greedy returns per split (mean ± std across seeds).\n\n");
            render_table(&mut out, "method", &task.rows);
        }
        if !task.ablation_rows.is_empty() {
            out.push_str("\n### context-stack ablations\n\n");
            render_table(&mut out, "variant", &task.ablation_rows);
        }
        if !task.stage_curves.is_empty() {
            out.push_str("\n### training by curriculum stage\n\n");
            out.push_str("| variant | stage | updates | mean return |\n|---|---|---|---|\n");
            for c in &task.stage_curves {
                let label = if c.ablation == Ablation::None {
                    c.method.to_string()
                } else {
                    format!("{} {}", c.method, c.ablation)
                };
                out.push_str(&format!(
                    "| {} | {} | {} | {:.2} |\n",
                    label, c.stage, c.updates, c.mean_return
                ));
            }
        }
    }
    if !report.warnings.is_empty() {
        out.push_str("\n## warnings\n\n");
        for w in &report.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ActorShape, CriticShape};
    use crate::exec::ExecMode;
    use crate::harness::{evaluate_run, run_sweep, run_training, SweepSpec};
    use tempfile::TempDir;

    fn tiny_spec(methods: Vec<Method>, ablations: Vec<Ablation>, seeds: Vec<u64>) -> SweepSpec {
        SweepSpec {
            preset: "spread-desk".into(),
            methods,
            ablations,
            seeds,
            episodes: Some(8),
            eval_rollouts: Some(2),
            exec: Some(ExecMode::Sequential),
        }
    }

    /// Shrinks every sweep config through the preset overrides alone; the
    /// full desk network shapes would make this test slow.
    fn shrunken_configs(spec: &SweepSpec) -> Vec<RunConfig> {
        crate::harness::sweep_configs(spec)
            .unwrap()
            .into_iter()
            .map(|mut cfg| {
                cfg.actor = ActorShape { mlp_widths: vec![16, 16], rnn_dim: 8 };
                cfg.critic = CriticShape {
                    value_widths: vec![16],
                    embed_dim: 4,
                    phi_widths: vec![12],
                    tokens: 2,
                    size_feature: true,
                };
                cfg.learner.epochs = 2;
                cfg.learner.minibatch_pairs = 64;
                cfg.update_every = 4;
                cfg
            })
            .collect()
    }

    #[test]
    fn report_aggregates_methods_ablations_and_warnings() {
        let root = TempDir::new().unwrap();
        // Two seeds of mappo and pc3d, one gate_off variant, one single-seed
        // ippo run to trip the deviation warning.
        let mut configs = shrunken_configs(&tiny_spec(
            vec![Method::Mappo, Method::Pc3d],
            vec![Ablation::None, Ablation::GateOff],
            vec![0, 1],
        ));
        configs.extend(shrunken_configs(&tiny_spec(
            vec![Method::Ippo],
            vec![Ablation::None],
            vec![0],
        )));
        for cfg in &configs {
            let out = run_training(&cfg, root.path(), None, None).unwrap();
            evaluate_run(&cfg, &out.run_dir).unwrap();
        }

        let report = emit_report(root.path()).unwrap();
        assert!(root.path().join("report.md").exists());
        assert!(root.path().join("report.json").exists());

        assert_eq!(report.tasks.len(), 1);
        let task = &report.tasks[0];
        assert_eq!(task.task, "spread");
        let labels: Vec<String> = task.rows.iter().map(|r| r.label()).collect();
        assert_eq!(labels, vec!["ippo", "mappo", "pc3d"]);
        let mappo = &task.rows[1];
        assert_eq!(mappo.seeds, vec![0, 1]);
        assert!(mappo.splits["train"].std.is_some(), "two seeds give a deviation");
        let ippo = &task.rows[0];
        assert!(ippo.splits["train"].std.is_none(), "one seed gives none");
        assert!(
            report.warnings.iter().any(|w| w.contains("single seed")),
            "missing deviation must be called out: {:?}",
            report.warnings
        );

        // Ablation table: pc3d reference row plus the gate_off variant.
        let ablation_labels: Vec<String> =
            task.ablation_rows.iter().map(|r| r.label()).collect();
        assert_eq!(ablation_labels, vec!["pc3d", "pc3d gate_off"]);

        // Exactly one best flag per populated split column of the main table.
        for split in ["train", "test"] {
            let flags = task
                .rows
                .iter()
                .filter(|r| r.splits.get(split).is_some_and(|s| s.best))
                .count();
            assert_eq!(flags, 1, "{split} column needs exactly one best row");
        }

        assert!(!task.stage_curves.is_empty());
        let md = render_markdown(&report);
        assert!(md.contains("## spread"));
        assert!(md.contains("### context-stack ablations"));
        assert!(md.contains("**"), "best entries are bold");
        assert!(md.contains("± "), "multi-seed rows show a deviation");
    }

    #[test]
    fn empty_root_is_an_error() {
        let root = TempDir::new().unwrap();
        assert!(matches!(
            emit_report(root.path()),
            Err(HarnessError::NoRuns(_))
        ));
    }

    #[test]
    fn unevaluated_runs_warn_instead_of_fabricating() {
        let root = TempDir::new().unwrap();
        let cfg = shrunken_configs(&tiny_spec(
            vec![Method::Mappo],
            vec![Ablation::None],
            vec![0],
        ))
        .remove(0);
        run_training(&cfg, root.path(), None, None).unwrap();
        // No evaluate_run: the table must not invent numbers.
        let report = emit_report(root.path()).unwrap();
        let task = &report.tasks[0];
        assert!(task.rows[0].splits.is_empty());
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("no evaluation artifacts")));
        let md = render_markdown(&report);
        assert!(md.contains("—"), "missing cells render as dashes");
    }

    #[test]
    fn sweep_feeds_report_end_to_end() {
        let root = TempDir::new().unwrap();
        // Use tiny widths via direct configs rather than the sweep's preset
        // shapes, then check run_sweep + emit_report compose.
        let configs = shrunken_configs(&tiny_spec(
            vec![Method::Ippo],
            vec![Ablation::None],
            vec![0, 1],
        ));
        for cfg in &configs {
            let out = run_training(&cfg, root.path(), None, None).unwrap();
            evaluate_run(&cfg, &out.run_dir).unwrap();
        }
        let report = emit_report(root.path()).unwrap();
        assert_eq!(report.tasks[0].rows[0].seeds.len(), 2);
        // run_sweep itself must also compose on a fresh root (full desk
        // shapes, minimal budget, single method/seed to stay quick).
        let root2 = TempDir::new().unwrap();
        let spec = SweepSpec {
            preset: "spread-desk".into(),
            methods: vec![Method::Ippo],
            ablations: vec![Ablation::None],
            seeds: vec![0],
            episodes: Some(2),
            eval_rollouts: Some(1),
            exec: Some(ExecMode::Sequential),
        };
        run_sweep(&spec, root2.path(), None).unwrap();
        let report2 = emit_report(root2.path()).unwrap();
        assert_eq!(report2.tasks[0].rows.len(), 1);
    }
}
