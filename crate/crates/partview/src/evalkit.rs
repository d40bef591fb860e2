//! Classification, retrieval and report emission.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::agg::classification_forward;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::region::AnchorGrid;
use crate::shapegen::{Dataset, ViewSet};
use crate::tensor::Tape;

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        self.counts.iter().enumerate().map(|(i, r)| r[i]).sum()
    }

    pub fn instance_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    /// Mean of the per-class accuracies over classes that appear.
    pub fn class_accuracy(&self) -> f64 {
        let mut acc = 0.0;
        let mut classes = 0usize;
        for (i, row) in self.counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n > 0 {
                acc += row[i] as f64 / n as f64;
                classes += 1;
            }
        }
        if classes == 0 {
            0.0
        } else {
            acc / classes as f64
        }
    }

    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut out = String::new();
        out.push_str("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&class_names[i]);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub struct ClassificationReport {
    pub instance_accuracy: f64,
    pub class_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Predicted class of one shape (argmax of the class probabilities).
pub fn predict_class(model: &ModelState, anchors: &AnchorGrid, vs: &ViewSet) -> Result<usize> {
    let tape = Tape::new();
    let (out, _) = classification_forward(&tape, model, anchors, vs)?;
    let probs = out.probs.to_vec();
    Ok(probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap())
}

pub fn classification_report(
    model: &ModelState,
    anchors: &AnchorGrid,
    shapes: &[ViewSet],
) -> Result<ClassificationReport> {
    if shapes.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut confusion = ConfusionMatrix::new(model.cfg.classes);
    for vs in shapes {
        let pred = predict_class(model, anchors, vs)?;
        confusion.counts[vs.class_id][pred] += 1;
    }
    Ok(ClassificationReport {
        instance_accuracy: confusion.instance_accuracy(),
        class_accuracy: confusion.class_accuracy(),
        confusion,
    })
}

/// Global feature of every shape in the slice.
pub fn extract_features(
    model: &ModelState,
    anchors: &AnchorGrid,
    shapes: &[ViewSet],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(shapes.len());
    for vs in shapes {
        let tape = Tape::new();
        let (g, _) = classification_forward(&tape, model, anchors, vs)?;
        out.push((vs.class_id, g.feature.to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    /// (recall, precision) at the 11 standard recall points 0.0 ..= 1.0.
    pub points: Vec<(f64, f64)>,
    pub map: f64,
}

pub struct RetrievalReport {
    pub map: f64,
    pub curve: PrCurve,
    /// Queries skipped because their class has a single instance.
    pub skipped_queries: usize,
}

/// Every shape queries the rest; relevance is class identity; ranking is by
/// ascending Euclidean distance (ties by index). AP per query averages
/// precision at each relevant rank; the curve interpolates precision at the
/// 11 standard recall points and averages over queries.
pub fn retrieval_report(features: &[(usize, Vec<f64>)]) -> Result<RetrievalReport> {
    if features.len() < 2 {
        return Err(Error::EmptyTestSet);
    }
    let n = features.len();
    let mut aps = Vec::new();
    let mut skipped = 0usize;
    let recall_points: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut curve_acc = vec![0.0f64; recall_points.len()];

    for q in 0..n {
        let relevant_total = features
            .iter()
            .enumerate()
            .filter(|(i, (c, _))| *i != q && *c == features[q].0)
            .count();
        if relevant_total == 0 {
            skipped += 1;
            continue;
        }
        let mut order: Vec<usize> = (0..n).filter(|&i| i != q).collect();
        let dist = |i: usize| -> f64 {
            features[q]
                .1
                .iter()
                .zip(&features[i].1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        order.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));

        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut pr: Vec<(f64, f64)> = Vec::with_capacity(order.len());
        for (rank, &i) in order.iter().enumerate() {
            if features[i].0 == features[q].0 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
            pr.push((
                hits as f64 / relevant_total as f64,
                hits as f64 / (rank + 1) as f64,
            ));
        }
        aps.push(ap / relevant_total as f64);
        for (pi, &rp) in recall_points.iter().enumerate() {
            let best = pr
                .iter()
                .filter(|(r, _)| *r >= rp - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            curve_acc[pi] += best;
        }
    }
    if aps.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let queries = aps.len() as f64;
    let map = aps.iter().sum::<f64>() / queries;
    let points: Vec<(f64, f64)> = recall_points
        .iter()
        .zip(&curve_acc)
        .map(|(&r, &p)| (r, p / queries))
        .collect();
    Ok(RetrievalReport {
        map,
        curve: PrCurve { points, map },
        skipped_queries: skipped,
    })
}

#[derive(Serialize)]
pub struct Metrics {
    pub instance_acc: f64,
    pub class_acc: f64,
    pub det_map: f64,
    pub retrieval_map: f64,
}

/// Writes `metrics.json`, `confusion.csv`, `pr_curve.csv`, `detections.json`
/// and self-contained gnuplot scripts that reproduce the figures offline.
pub fn emit_reports(
    out_dir: &Path,
    metrics: &Metrics,
    confusion: &ConfusionMatrix,
    class_names: &[String],
    curve: &PrCurve,
    detections: &[crate::detect::Detection],
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mpath = out_dir.join("metrics.json");
    let json = serde_json::to_vec_pretty(metrics).map_err(|e| Error::json(&mpath, e))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    confusion.write_csv(&out_dir.join("confusion.csv"), class_names)?;

    let pr_path = out_dir.join("pr_curve.csv");
    let mut f = std::fs::File::create(&pr_path).map_err(|e| Error::io(&pr_path, e))?;
    writeln!(f, "recall,precision").map_err(|e| Error::io(&pr_path, e))?;
    for (r, p) in &curve.points {
        writeln!(f, "{r:.1},{p:.6}").map_err(|e| Error::io(&pr_path, e))?;
    }

    crate::detect::write_detections(&out_dir.join("detections.json"), detections)?;

    let pr_gp = out_dir.join("pr_curve.gp");
    std::fs::write(
        &pr_gp,
        "set datafile separator ','\n\
         set xlabel 'recall'\nset ylabel 'precision'\n\
         set xrange [0:1]\nset yrange [0:1.05]\nset grid\n\
         set terminal pngcairo size 640,480\nset output 'pr_curve.png'\n\
         plot 'pr_curve.csv' every ::1 using 1:2 with linespoints title 'retrieval PR'\n",
    )
    .map_err(|e| Error::io(&pr_gp, e))?;

    let cm_gp = out_dir.join("confusion.gp");
    std::fs::write(
        &cm_gp,
        "set datafile separator ','\n\
         set terminal pngcairo size 640,560\nset output 'confusion.png'\n\
         set title 'classification confusion matrix'\n\
         set palette defined (0 'white', 1 'steelblue')\n\
         set view map\n\
         plot 'confusion.csv' matrix rowheaders columnheaders every ::1 using 1:2:3 with image notitle\n",
    )
    .map_err(|e| Error::io(&cm_gp, e))?;

    let tc_gp = out_dir.join("train_curve.gp");
    std::fs::write(
        &tc_gp,
        "set datafile separator ','\n\
         set xlabel 'step'\nset ylabel 'loss'\nset grid\n\
         set terminal pngcairo size 800,480\nset output 'train_curve.png'\n\
         plot 'train.csv' every ::1 using 1:3 with lines title 'loss'\n",
    )
    .map_err(|e| Error::io(&tc_gp, e))?;
    Ok(())
}

/// Convenience: load a split of a dataset directory.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<ViewSet>> {
    let ds = Dataset::open(dir)?;
    let mut out = Vec::new();
    for e in ds.manifest.split_ids(split) {
        out.push(ds.load_shape(&e.id)?);
    }
    Ok(out)
}
