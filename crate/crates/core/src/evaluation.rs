//! Group-robustness metrics and attribution quality scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super_autograd::{Graph, Tensor};

use crate::attribution::{gradcam_batch, resample_grid, AttributionMap, MapSource};
use crate::data::{GroupedDataset, Image, Mask, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::model::{Head, ModelParams};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAccuracy {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    /// Keyed by `(label, attribute)`.
    pub groups: BTreeMap<(usize, usize), GroupAccuracy>,
    pub worst: f64,
    /// Sample-weighted accuracy over the split.
    pub average: f64,
    /// Population variance of per-group accuracies in percent units.
    pub variance_pct: f64,
    pub n_eval: usize,
}

impl MetricsReport {
    pub fn per_group_acc(&self) -> BTreeMap<(usize, usize), f64> {
        self.groups.iter().map(|(k, g)| (*k, g.accuracy)).collect()
    }
}

/// Population variance.
pub fn group_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Metrics from `(label, attribute, predicted)` triples over the full label × attribute grid.
pub fn metrics_from_predictions(
    split: Split,
    outcomes: &[(usize, usize, usize)],
    n_classes: usize,
    n_attributes: usize,
) -> Result<MetricsReport> {
    let mut groups: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for y in 0..n_classes {
        for z in 0..n_attributes {
            groups.insert((y, z), (0, 0));
        }
    }
    for &(y, z, pred) in outcomes {
        let entry = groups
            .get_mut(&(y, z))
            .ok_or_else(|| Error::Invalid(format!("group ({y}, {z}) outside the {n_classes}x{n_attributes} grid")))?;
        entry.0 += 1;
        entry.1 += usize::from(pred == y);
    }
    if let Some((&(label, attribute), _)) = groups.iter().find(|(_, (n, _))| *n == 0) {
        return Err(Error::EmptyGroup { label, attribute, split: split.to_string() });
    }
    let groups: BTreeMap<_, _> = groups
        .into_iter()
        .map(|(k, (count, correct))| (k, GroupAccuracy { count, correct, accuracy: correct as f64 / count as f64 }))
        .collect();
    let worst = groups.values().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    let n_eval: usize = groups.values().map(|g| g.count).sum();
    let correct: usize = groups.values().map(|g| g.correct).sum();
    let pct: Vec<f64> = groups.values().map(|g| 100.0 * g.accuracy).collect();
    Ok(MetricsReport {
        split,
        groups,
        worst,
        average: correct as f64 / n_eval as f64,
        variance_pct: group_variance(&pct),
        n_eval,
    })
}

/// Head-1 predictions for every sample of `split`.
pub fn evaluate(params: &ModelParams, ds: &GroupedDataset, split: Split) -> Result<MetricsReport> {
    let records: Vec<&SampleRecord> = ds.split(split).collect();
    if records.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let mut outcomes = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        let preds = params.predict(&images)?;
        outcomes.extend(chunk.iter().zip(preds).map(|(r, p)| (r.label, r.attribute, p)));
    }
    metrics_from_predictions(split, &outcomes, ds.n_classes(), ds.n_attributes())
}

/// IoU between `{map ≥ threshold}` and the mask, after resampling the mask to the map grid.
pub fn attribution_iou(map: &AttributionMap, mask: &Mask, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("IoU threshold must lie in (0, 1), got {threshold}")));
    }
    let grid = resample_grid(&mask.as_f64(), mask.height, mask.width, map.height(), map.width());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &g) in map.values().iter().zip(&grid) {
        let (a, b) = (m >= threshold, g >= 0.5);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// GradCAM maps of `head` for the true-label logit of each record.
pub fn head_maps(params: &ModelParams, records: &[&SampleRecord], head: Head) -> Result<Vec<AttributionMap>> {
    let (h, w) = params.config.feature_size();
    let n_classes = params.config.n_classes;
    let source = match head {
        Head::Relevant => MapSource::Head1,
        Head::Irrelevant => MapSource::Head2,
    };
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let g = Graph::new();
        let bound = params.bind(&g, false);
        let x = g.constant(Image::batch(chunk.iter().map(|r| &r.image)));
        let enc = bound.encode(x);
        let maps = g.param(enc.maps.value());
        let logits = bound.logits_from_maps(maps, head);
        let mut pick = Tensor::zeros(&[chunk.len(), n_classes]);
        for (i, r) in chunk.iter().enumerate() {
            pick.data_mut()[i * n_classes + r.label] = 1.0;
        }
        let cam = gradcam_batch(maps, logits.mul_const(pick).sum(), false, false)?;
        for row in cam.map.value().data().chunks(h * w) {
            out.push(AttributionMap::new(h, w, row.iter().map(|v| v.clamp(0.0, 1.0)).collect(), source)?);
        }
    }
    Ok(out)
}

/// Mean IoU of a head's maps against the foreground masks of `records`.
pub fn mean_head_iou(params: &ModelParams, records: &[&SampleRecord], head: Head, threshold: f64) -> Result<f64> {
    let maps = head_maps(params, records, head)?;
    let mut total = 0.0;
    for (map, r) in maps.iter().zip(records) {
        let mask = r
            .foreground_mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no foreground mask", r.id)))?;
        total += attribution_iou(map, mask, threshold)?;
    }
    Ok(total / records.len().max(1) as f64)
}

pub const REPORT_HEADER: [&str; 5] = ["split", "group_label", "group_attr", "count", "accuracy"];
pub const REPORT_FOOTER: [&str; 3] = ["worst", "average", "variance_pct"];

pub fn report_to_string(report: &MetricsReport) -> Result<String> {
    if report.groups.is_empty() {
        return Err(Error::Invalid("report has no groups".into()));
    }
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("report serialisation: {e}"));
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for (&(y, z), g) in &report.groups {
        w.write_record([report.split.to_string(), y.to_string(), z.to_string(), g.count.to_string(), g.accuracy.to_string()])
            .map_err(csv_err)?;
    }
    w.write_record(REPORT_FOOTER).map_err(csv_err)?;
    w.write_record([report.worst.to_string(), report.average.to_string(), report.variance_pct.to_string()])
        .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("report serialisation: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn report_emit(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = report_to_string(report)?;
    fs::write(path, text).map_err(Error::io(path))
}

pub fn report_parse(text: &str) -> Result<MetricsReport> {
    let bad = |what: String| Error::Schema(format!("report: {what}"));
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?;
    if rows.len() < 4 || rows[0].iter().ne(REPORT_HEADER) {
        return Err(bad("missing header".into()));
    }
    let footer = rows.len() - 2;
    if rows[footer].iter().ne(REPORT_FOOTER) {
        return Err(bad("missing footer".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("`{s}` is not a number")))};
    let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("`{s}` is not a count")))};
    let mut split = None;
    let mut groups = BTreeMap::new();
    for row in &rows[1..footer] {
        if row.len() != 5 {
            return Err(bad(format!("group row has {} fields", row.len())));
        }
        let s: Split = row[0].parse()?;
        if split.is_some_and(|p| p != s) {
            return Err(bad("rows mix splits".into()));
        }
        split = Some(s);
        let (count, accuracy) = (int(&row[3])?, num(&row[4])?);
        let correct = (accuracy * count as f64).round() as usize;
        groups.insert((int(&row[1])?, int(&row[2])?), GroupAccuracy { count, correct, accuracy });
    }
    let values = &rows[footer + 1];
    if values.len() != 3 {
        return Err(bad("footer must hold three values".into()));
    }
    Ok(MetricsReport {
        split: split.expect("at least one group row"),
        n_eval: groups.values().map(|g| g.count).sum(),
        groups,
        worst: num(&values[0])?,
        average: num(&values[1])?,
        variance_pct: num(&values[2])?,
    })
}
