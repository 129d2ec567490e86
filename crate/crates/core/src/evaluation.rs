//! Robustness analytics over classifier predictions on kept counterfactuals.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::CounterfactualSample;

pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    #[serde(rename = "true_class")]
    pub class_id: u32,
    #[serde(rename = "predicted_class")]
    pub predicted_class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model_id: String,
    pub entries: Vec<Prediction>,
}

/// Names the model and shift a predictions CSV belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_id: String,
    pub shift: String,
}

impl PredictionSet {
    pub fn read_csv<R: Read>(model_id: &str, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["sample_id", "true_class", "predicted_class"] {
            return Err(Error::invalid(
                "header",
                format!("expected sample_id,true_class,predicted_class, got {headers:?}"),
            ));
        }
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<Prediction>, _>>()?;
        Ok(PredictionSet {
            model_id: model_id.to_string(),
            entries,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Kept-status lookup for the samples predictions may refer to.
#[derive(Debug, Clone, Default)]
pub struct SampleIndex {
    entries: BTreeMap<String, (u32, bool)>,
}

impl SampleIndex {
    pub fn insert(&mut self, sample_id: impl Into<String>, class_id: u32, kept: bool) {
        self.entries.insert(sample_id.into(), (class_id, kept));
    }

    pub fn from_samples(samples: &[CounterfactualSample]) -> Self {
        let mut index = SampleIndex::default();
        for s in samples {
            index.insert(s.sample_id.clone(), s.class_id, s.kept == Some(true));
        }
        index
    }

    pub fn get(&self, sample_id: &str) -> Option<(u32, bool)> {
        self.entries.get(sample_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracies {
    pub accuracy: BTreeMap<u32, f64>,
    pub counts: BTreeMap<u32, usize>,
    pub excluded: Vec<u32>,
}

/// Per-class accuracy over classes with at least `min_count` kept, predicted samples.
pub fn per_class_accuracy(
    predictions: &PredictionSet,
    index: &SampleIndex,
    min_count: usize,
) -> Result<ClassAccuracies> {
    let mut seen = HashSet::new();
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for p in &predictions.entries {
        if !seen.insert(p.sample_id.as_str()) {
            return Err(Error::invalid(
                "sample_id",
                format!("{} predicted twice by {}", p.sample_id, predictions.model_id),
            ));
        }
        match index.get(&p.sample_id) {
            None => return Err(Error::UnknownSample(p.sample_id.clone())),
            Some((_, false)) => return Err(Error::RejectedSample(p.sample_id.clone())),
            Some((class_id, true)) if class_id != p.class_id => {
                return Err(Error::invalid(
                    "true_class",
                    format!("{} is class {class_id}, not {}", p.sample_id, p.class_id),
                ))
            }
            Some(_) => {}
        }
        let t = tally.entry(p.class_id).or_default();
        t.0 += usize::from(p.predicted_class_id == p.class_id);
        t.1 += 1;
    }
    let mut out = ClassAccuracies {
        accuracy: BTreeMap::new(),
        counts: BTreeMap::new(),
        excluded: Vec::new(),
    };
    for (class_id, (correct, total)) in tally {
        out.counts.insert(class_id, total);
        if total >= min_count.max(1) {
            out.accuracy.insert(class_id, correct as f64 / total as f64);
        } else {
            out.excluded.push(class_id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model_id: String,
    pub shift_name: String,
    pub eligible_classes: BTreeSet<u32>,
    pub per_class_accuracy: BTreeMap<u32, f64>,
    pub shift_accuracy: f64,
    pub base_accuracy_same_classes: f64,
    pub drop: f64,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Predictions and kept-status index for one (model, shift) run.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationInput<'a> {
    pub predictions: &'a PredictionSet,
    pub index: &'a SampleIndex,
}

/// Shift accuracy over shift-eligible classes against base accuracy on the same classes.
pub fn evaluate_model(
    shift_name: &str,
    shift: EvaluationInput<'_>,
    base: EvaluationInput<'_>,
    min_count: usize,
) -> Result<ModelEvaluation> {
    if shift.predictions.model_id != base.predictions.model_id {
        return Err(Error::invalid(
            "model_id",
            format!(
                "shift predictions from {} but base from {}",
                shift.predictions.model_id, base.predictions.model_id
            ),
        ));
    }
    let on_shift = per_class_accuracy(shift.predictions, shift.index, min_count)?;
    let on_base = per_class_accuracy(base.predictions, base.index, 1)?;
    if on_shift.accuracy.is_empty() {
        return Err(Error::NoEligibleClasses);
    }
    let base_accs = on_shift
        .accuracy
        .keys()
        .map(|c| on_base.accuracy.get(c).copied().ok_or(Error::MissingBaseClass(*c)))
        .collect::<Result<Vec<f64>>>()?;
    let shift_accuracy = mean(on_shift.accuracy.values().copied());
    let base_accuracy_same_classes = mean(base_accs.into_iter());
    Ok(ModelEvaluation {
        model_id: shift.predictions.model_id.clone(),
        shift_name: shift_name.to_string(),
        eligible_classes: on_shift.accuracy.keys().copied().collect(),
        per_class_accuracy: on_shift.accuracy,
        shift_accuracy,
        base_accuracy_same_classes,
        drop: base_accuracy_same_classes - shift_accuracy,
    })
}

/// Mean accuracy drop across models for one shift.
pub fn absolute_impact(evaluations: &[ModelEvaluation]) -> Result<f64> {
    let first = evaluations.first().ok_or(Error::EmptyInput("evaluations"))?;
    if let Some(other) = evaluations.iter().find(|e| e.shift_name != first.shift_name) {
        return Err(Error::MixedShifts(first.shift_name.clone(), other.shift_name.clone()));
    }
    Ok(mean(evaluations.iter().map(|e| e.drop)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit<T> {
    pub slope: T,
    pub intercept: T,
}

/// Ordinary least squares of shift accuracy on base accuracy.
///
/// Deviations are taken from the first point before averaging, so constant
/// coordinates produce exactly zero deviations.
pub fn id_ood_slope<T: Scalar>(points: &[(T, T)]) -> Result<LineFit<T>> {
    if points.len() < 2 {
        return Err(Error::SlopeUndefined(format!(
            "{} model(s); at least 2 are needed",
            points.len()
        )));
    }
    let n = T::of(points.len() as f64);
    let (x0, y0) = points[0];
    let dx_mean = points.iter().map(|p| p.0 - x0).sum::<T>() / n;
    let dy_mean = points.iter().map(|p| p.1 - y0).sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for &(x, y) in points {
        let dx = (x - x0) - dx_mean;
        let dy = (y - y0) - dy_mean;
        sxx = sxx + dx * dx;
        sxy = sxy + dx * dy;
    }
    if sxx == T::zero() {
        return Err(Error::SlopeUndefined("base accuracies are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = (y0 + dy_mean) - slope * (x0 + dx_mean);
    Ok(LineFit { slope, intercept })
}

/// Worker votes on one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub image_id: String,
    /// Image origin, e.g. "generated" or "control".
    pub source: String,
    pub n_workers: u32,
    pub n_selected: u32,
}

impl VoteTally {
    pub fn from_selections(image_id: &str, source: &str, selections: &[bool]) -> Self {
        VoteTally {
            image_id: image_id.to_string(),
            source: source.to_string(),
            n_workers: selections.len() as u32,
            n_selected: selections.iter().filter(|s| **s).count() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFrequencyRecord {
    pub image_id: String,
    pub n_workers: u32,
    pub n_selected: u32,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub mean_frequency: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub records: Vec<SelectionFrequencyRecord>,
    pub by_source: BTreeMap<String, SourceSummary>,
}

pub fn selection_frequency(votes: &[VoteTally]) -> Result<SelectionSummary> {
    let mut records = Vec::with_capacity(votes.len());
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for v in votes {
        if v.n_workers == 0 {
            return Err(Error::invalid("n_workers", format!("{} has no votes", v.image_id)));
        }
        if v.n_selected > v.n_workers {
            return Err(Error::invalid(
                "n_selected",
                format!(
                    "{}: {} selections from {} workers",
                    v.image_id, v.n_selected, v.n_workers
                ),
            ));
        }
        let frequency = v.n_selected as f64 / v.n_workers as f64;
        let s = sums.entry(v.source.clone()).or_default();
        s.0 += frequency;
        s.1 += 1;
        records.push(SelectionFrequencyRecord {
            image_id: v.image_id.clone(),
            n_workers: v.n_workers,
            n_selected: v.n_selected,
            frequency,
        });
    }
    Ok(SelectionSummary {
        records,
        by_source: sums
            .into_iter()
            .map(|(k, (sum, n))| {
                (
                    k,
                    SourceSummary {
                        mean_frequency: sum / n as f64,
                        n_images: n,
                    },
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub base_acc: f64,
    pub shift_acc: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub shift: String,
    pub absolute_impact: f64,
    pub id_ood_slope: Option<f64>,
    pub intercept: Option<f64>,
    pub n_models: usize,
    pub n_eligible_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_undefined_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub shift_name: String,
    /// One row per model, in the order evaluations were given.
    pub rows: Vec<ReportRow>,
    pub summary: ShiftSummary,
}

impl ShiftReport {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.base_acc, r.shift_acc)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_report_rows(&self.rows, writer)
    }

    pub fn summary_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.summary)?)
    }
}

pub fn write_report_rows<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_report_rows<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn build_shift_report(shift_name: &str, evaluations: &[ModelEvaluation]) -> Result<ShiftReport> {
    let absolute_impact = absolute_impact(evaluations)?;
    if evaluations[0].shift_name != shift_name {
        return Err(Error::MixedShifts(
            shift_name.to_string(),
            evaluations[0].shift_name.clone(),
        ));
    }
    let rows: Vec<ReportRow> = evaluations
        .iter()
        .map(|e| ReportRow {
            model_id: e.model_id.clone(),
            base_acc: e.base_accuracy_same_classes,
            shift_acc: e.shift_accuracy,
            drop: e.drop,
        })
        .collect();
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.base_acc, r.shift_acc)).collect();
    let (slope, intercept, reason) = match id_ood_slope(&points) {
        Ok(fit) => (Some(fit.slope), Some(fit.intercept), None),
        Err(Error::SlopeUndefined(reason)) => (None, None, Some(reason)),
        Err(e) => return Err(e),
    };
    let classes: BTreeSet<u32> = evaluations
        .iter()
        .flat_map(|e| e.eligible_classes.iter().copied())
        .collect();
    Ok(ShiftReport {
        shift_name: shift_name.to_string(),
        summary: ShiftSummary {
            shift: shift_name.to_string(),
            absolute_impact,
            id_ood_slope: slope,
            intercept,
            n_models: rows.len(),
            n_eligible_classes: classes.len(),
            slope_undefined_reason: reason,
        },
        rows,
    })
}

const SVG_SIZE: f64 = 360.0;
const SVG_MARGIN: f64 = 40.0;

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Axes {
        let (mut x, mut y) = ((f64::MAX, f64::MIN), (f64::MAX, f64::MIN));
        for (px, py) in points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |(lo, hi): (f64, f64)| {
            if lo > hi {
                (0.0, 1.0)
            } else if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                let p = (hi - lo) * 0.08;
                (lo - p, hi + p)
            }
        };
        Axes { x: pad(x), y: pad(y) }
    }

    fn to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let span = SVG_SIZE - 2.0 * SVG_MARGIN;
        (
            SVG_MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * span,
            SVG_SIZE - SVG_MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * span,
        )
    }
}

fn svg_frame(title: &str, x_label: &str, y_label: &str, axes: &Axes) -> String {
    let mut s = String::new();
    let end = SVG_SIZE - SVG_MARGIN;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#,
        SVG_SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{SVG_MARGIN} {SVG_MARGIN} V{end} H{end}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label} [{:.3}, {:.3}]</text>"#,
        SVG_SIZE / 2.0,
        SVG_SIZE - 10.0,
        axes.x.0,
        axes.x.1
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label} [{:.3}, {:.3}]</text>"#,
        SVG_SIZE / 2.0,
        SVG_SIZE / 2.0,
        axes.y.0,
        axes.y.1
    );
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Shift accuracy against base accuracy per model, with the fitted line.
pub fn scatter_svg(report: &ShiftReport) -> String {
    let points = report.points();
    let axes = Axes::fit(points.iter().copied());
    let mut s = svg_frame(
        &format!("{}: shift vs base accuracy", escape(&report.shift_name)),
        "base accuracy",
        "shift accuracy",
        &axes,
    );
    if let (Some(m), Some(b)) = (report.summary.id_ood_slope, report.summary.intercept) {
        let (x1, y1) = axes.to_px((axes.x.0, m * axes.x.0 + b));
        let (x2, y2) = axes.to_px((axes.x.1, m * axes.x.1 + b));
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="steelblue"/>"#
        );
    }
    for (row, p) in report.rows.iter().zip(&points) {
        let (x, y) = axes.to_px(*p);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="crimson"><title>{}</title></circle>"#,
            escape(&row.model_id)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Slope against absolute impact, one point per shift with a defined slope.
pub fn impact_vs_slope_svg(summaries: &[ShiftSummary]) -> String {
    let points: Vec<(&str, (f64, f64))> = summaries
        .iter()
        .filter_map(|s| s.id_ood_slope.map(|m| (s.shift.as_str(), (s.absolute_impact, m))))
        .collect();
    let axes = Axes::fit(points.iter().map(|p| p.1));
    let mut s = svg_frame("ID/OOD slope vs absolute impact", "absolute impact", "slope", &axes);
    for (name, p) in points {
        let (x, y) = axes.to_px(p);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="darkorange"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 4.0,
            y - 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
