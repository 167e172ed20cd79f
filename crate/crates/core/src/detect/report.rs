use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{
    roc_auroc, detection_counts, tsd_matrix, uniform_edges, validate_edges, weighted_precision_at, DetectError,
    DetectionCounts, EvalRecord, Roc, TaskKind, TaskSpec, TsdMatrix, DEFAULT_BINS, DEFAULT_DELTA,
};
use crate::io::{IoError, PredictionSet};
use crate::seg_metrics::{class_metrics, ClassMetrics, ConfusionMatrix, LOG_FLOOR, MAX_POINT_LOSS};
use crate::taxonomy::{ClassId, ClassTable};
use crate::trust::TrustValue;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOptions {
    pub tasks: Vec<TaskKind>,
    /// Thresholds for the TP/TN/FP/FN sweep.
    pub delta_grid: Vec<f64>,
    /// Threshold of the single-point weighted precision.
    pub delta: f64,
    pub tsd_edges: Vec<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            delta_grid: uniform_edges(DEFAULT_BINS),
            delta: DEFAULT_DELTA,
            tsd_edges: uniform_edges(DEFAULT_BINS),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTaskResult {
    pub class: ClassId,
    pub task: TaskKind,
    pub roc: Roc,
    /// One entry per `delta_grid` value.
    pub counts: Vec<(f64, DetectionCounts)>,
    pub wpre_at: Option<f64>,
}

/// Everything `evaluate` writes, in deterministic class and task order.
#[derive(Clone, Debug)]
pub struct Report {
    pub method: Option<String>,
    pub options: ReportOptions,
    pub confusion: ConfusionMatrix,
    pub metrics: Vec<ClassMetrics>,
    pub loss: Option<Vec<Option<f64>>>,
    /// Ordered by task, then class.
    pub results: Vec<ClassTaskResult>,
    pub tsd: Vec<TsdMatrix>,
}

/// Pairs each non-IGNORE point with its trust value.
pub fn records_from_scores(preds: &PredictionSet, scores: &[TrustValue]) -> Vec<EvalRecord> {
    assert_eq!(preds.len(), scores.len(), "one score per point");
    (0..preds.len())
        .into_par_iter()
        .filter_map(|i| preds.gt(i).map(|gt| EvalRecord { gt, pd: preds.predicted(i), trust: scores[i].trust }))
        .collect()
}

impl Report {
    /// Evaluates every ID class under every requested task. Task IO is
    /// dropped when the table declares no OOD classes.
    pub fn build(records: &[EvalRecord], table: &ClassTable, options: ReportOptions) -> Result<Self, DetectError> {
        validate_edges(&options.tsd_edges)?;
        let mut confusion = ConfusionMatrix::for_table(table);
        for (i, r) in records.iter().enumerate() {
            confusion.record(Some(r.gt), r.pd, i)?;
        }
        let mut tasks = options.tasks.clone();
        tasks.sort();
        tasks.dedup();
        if table.ood_set().is_empty() {
            tasks.retain(|&t| t != TaskKind::Io);
        }
        let options = ReportOptions { tasks, ..options };

        let id = table.num_id_classes();
        let mut by_class: Vec<Vec<EvalRecord>> = vec![Vec::new(); id];
        for r in records {
            by_class[r.pd.index()].push(*r);
        }

        let jobs: Vec<(TaskKind, ClassId)> =
            options.tasks.iter().flat_map(|&t| (0..id as u16).map(move |c| (t, ClassId(c)))).collect();
        let results = jobs
            .par_iter()
            .map(|&(task, class)| {
                let recs = &by_class[class.index()];
                let spec = TaskSpec::new(task, class, id);
                ClassTaskResult {
                    class,
                    task,
                    roc: roc_auroc(recs, &spec),
                    counts: options.delta_grid.iter().map(|&d| (d, detection_counts(recs, &spec, d))).collect(),
                    wpre_at: weighted_precision_at(recs, &spec, options.delta, &confusion),
                }
            })
            .collect();
        let tsd = (0..id as u16)
            .into_par_iter()
            .map(|c| tsd_matrix(&by_class[c as usize], ClassId(c), &confusion, &options.tsd_edges))
            .collect::<Result<_, _>>()?;

        Ok(Self {
            method: None,
            metrics: class_metrics(&confusion),
            confusion,
            loss: None,
            options,
            results,
            tsd,
        })
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = Some(method.into());
        self
    }

    pub fn with_loss(mut self, loss: Vec<Option<f64>>) -> Self {
        self.loss = Some(loss);
        self
    }

    pub fn tasks(&self) -> &[TaskKind] {
        &self.options.tasks
    }

    pub fn result(&self, class: ClassId, task: TaskKind) -> Option<&ClassTaskResult> {
        self.results.iter().find(|r| r.class == class && r.task == task)
    }

    pub fn auroc(&self, class: ClassId, task: TaskKind) -> Option<f64> {
        self.result(class, task).and_then(|r| r.roc.auroc)
    }

    /// Writes the CSV bundle plus `report.json` metadata into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, table: &ClassTable) -> Result<(), IoError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        let ids: Vec<ClassId> = table.id_classes().collect();

        let mut w = csv::Writer::from_path(dir.join("auroc.csv"))?;
        let mut header = vec!["class_id".to_string(), "class".into(), "scale_group".into()];
        header.extend(self.tasks().iter().map(|t| t.name().to_string()));
        w.write_record(&header)?;
        for &c in &ids {
            let mut row = class_cells(table, c);
            row.extend(self.tasks().iter().map(|&t| opt(self.auroc(c, t))));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| IoError::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("wpre_at.csv"))?;
        let mut header = vec!["class_id".to_string(), "class".into(), "delta".into()];
        header.extend(self.tasks().iter().map(|t| t.name().to_string()));
        w.write_record(&header)?;
        for &c in &ids {
            let mut row = vec![c.to_string(), table.class_name(c).to_string(), self.options.delta.to_string()];
            row.extend(self.tasks().iter().map(|&t| opt(self.result(c, t).and_then(|r| r.wpre_at))));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| IoError::io(dir, e))?;

        for &task in self.tasks() {
            let mut w = csv::Writer::from_path(dir.join(format!("counts_{task}.csv")))?;
            w.write_record(["class_id", "class", "delta", "tp", "tn", "fp", "fn", "tpr", "fpr"])?;
            for r in self.results.iter().filter(|r| r.task == task) {
                for (d, k) in &r.counts {
                    w.write_record([
                        r.class.to_string(),
                        table.class_name(r.class).to_string(),
                        d.to_string(),
                        k.tp.to_string(),
                        k.tn.to_string(),
                        k.fp.to_string(),
                        k.fn_.to_string(),
                        opt(k.tpr()),
                        opt(k.fpr()),
                    ])?;
                }
            }
            w.flush().map_err(|e| IoError::io(dir, e))?;
        }

        for r in &self.results {
            let name = format!("roc_{}_{}.csv", file_stem(table.class_name(r.class)), r.task);
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(["threshold", "fpr", "tpr"])?;
            for p in &r.roc.curve {
                w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
            }
            w.flush().map_err(|e| IoError::io(dir, e))?;
        }

        for t in &self.tsd {
            write_tsd_csv(t, table, dir.join(format!("tsd_{}.csv", file_stem(table.class_name(t.class)))))?;
        }

        write_confusion_csv(&self.confusion, table, dir.join("confusion.csv"))?;
        let mut extra: Vec<(String, Vec<Option<f64>>)> = self
            .tasks()
            .iter()
            .map(|&t| (format!("auroc_{t}"), ids.iter().map(|&c| self.auroc(c, t)).collect()))
            .collect();
        extra.push((
            format!("wpre_at_{}", self.options.delta),
            ids.iter().map(|&c| self.result(c, TaskKind::CwOod).or(self.result(c, TaskKind::Cw)).and_then(|r| r.wpre_at)).collect(),
        ));
        if let Some(loss) = &self.loss {
            extra.push(("loss".into(), loss.clone()));
        }
        write_metrics_csv(&self.metrics, &self.confusion, table, &extra, dir.join("metrics.csv"))?;

        let meta = Metadata {
            table: table.name().to_string(),
            method: self.method.clone(),
            tasks: self.tasks().iter().map(|t| t.name()).collect(),
            delta: self.options.delta,
            delta_grid: self.options.delta_grid.clone(),
            tsd_edges: self.options.tsd_edges.clone(),
            tsd_bins: "left-open (lo, hi]; trust exactly 0 is placed in the first bin",
            wpre_at_task: if self.tasks().contains(&TaskKind::CwOod) { "cwood" } else { "cw" },
            log_floor: LOG_FLOOR,
            loss_clip_nats: MAX_POINT_LOSS,
            loss_note: "per-point losses are capped by the probability floor; values near the cap are clipped",
            absent: "empty cell means the value is undefined (empty denominator)",
            classes: ids.iter().map(|&c| (c.0, table.class_name(c).to_string())).collect(),
        };
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| IoError::io(&path, e))
    }
}

#[derive(Serialize)]
struct Metadata {
    table: String,
    method: Option<String>,
    tasks: Vec<&'static str>,
    delta: f64,
    delta_grid: Vec<f64>,
    tsd_edges: Vec<f64>,
    tsd_bins: &'static str,
    wpre_at_task: &'static str,
    log_floor: f64,
    loss_clip_nats: f64,
    loss_note: &'static str,
    absent: &'static str,
    classes: BTreeMap<u16, String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn class_cells(table: &ClassTable, c: ClassId) -> Vec<String> {
    vec![c.to_string(), table.class_name(c).to_string(), table.scale_group(c).to_string()]
}

/// Class names reduced to a file-name-safe form.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' { ch.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn write_tsd_csv(t: &TsdMatrix, table: &ClassTable, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> =
        ["pd_class", "gt_class_id", "gt_class", "band", "gt_points", "p"].iter().map(|s| s.to_string()).collect();
    header.extend(t.edges.windows(2).map(|e| format!("{}-{}", e[0], e[1])));
    w.write_record(&header)?;
    for row in &t.rows {
        let mut rec = vec![
            table.class_name(t.class).to_string(),
            row.gt.to_string(),
            table.class_name(row.gt).to_string(),
            row.band.name().to_string(),
            row.gt_total.to_string(),
            row.marginal().to_string(),
        ];
        rec.extend(row.q.iter().map(|q| q.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Long-form confusion: one row per (ground truth, prediction) pair.
pub fn write_confusion_csv(cm: &ConfusionMatrix, table: &ClassTable, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gt_class_id", "gt_class", "pd_class_id", "pd_class", "count", "gt_points", "ratio"])?;
    for r in cm.gt_ids() {
        for c in cm.pd_ids() {
            w.write_record([
                r.to_string(),
                table.class_name(r).to_string(),
                c.to_string(),
                table.class_name(c).to_string(),
                cm.count(r, c).to_string(),
                cm.gt_total(r).to_string(),
                opt(cm.ratio(r, c)),
            ])?;
        }
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// One row per ID class; `extra` appends named per-class columns.
pub fn write_metrics_csv(
    metrics: &[ClassMetrics],
    cm: &ConfusionMatrix,
    table: &ClassTable,
    extra: &[(String, Vec<Option<f64>>)],
    path: impl AsRef<Path>,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "class_id", "class", "scale_group", "present", "iou", "pre", "rec", "wpre", "not_pre", "not_wpre", "eta",
        "gt_points", "pd_points",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(extra.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (i, m) in metrics.iter().enumerate() {
        let c = m.class.unwrap_or(ClassId(i as u16));
        let mut row = class_cells(table, c);
        row.push(m.present.to_string());
        row.extend([m.iou, m.pre, m.rec, m.wpre, m.not_pre, m.not_wpre, m.eta].map(opt));
        row.push(cm.gt_total(c).to_string());
        row.push(cm.pd_total(c).to_string());
        row.extend(extra.iter().map(|(_, v)| opt(v.get(i).copied().flatten())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}
