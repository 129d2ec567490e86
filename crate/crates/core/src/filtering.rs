//! Embedding-similarity quality control for generated candidates.
//!
//! Each candidate is scored against an object caption and (for non-base
//! shifts) a shift caption. Object thresholds come from a low percentile of
//! reference-image scores; shift thresholds from a human walk over a
//! percentile grid. A candidate is kept when both scores reach their
//! thresholds (non-strict comparison).

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{CaptionPair, ClassThreshold, CounterfactualSample, ShiftSpec, YieldStats};

pub const DEFAULT_CLASS_PERCENTILE: f64 = 20.0;
pub const DEFAULT_INSPECTION_COUNT: usize = 5;
pub const DEFAULT_PERCENTILE_GRID: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

pub fn build_captions(class_label: &str, spec: &ShiftSpec) -> CaptionPair {
    let c_class = if spec.style_flag {
        format!("a {class_label}")
    } else {
        format!("a photo of a {class_label}")
    };
    let c_shift = if spec.is_base() {
        None
    } else if spec.style_flag {
        Some(spec.caption_fragment.clone())
    } else {
        Some(format!("a photo {}", spec.caption_fragment))
    };
    CaptionPair { c_class, c_shift }
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine similarity".into(),
            expected: u.len(),
            found: v.len(),
        });
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok(dot.max(-T::one()).min(T::one()))
}

/// Element at 1-indexed rank `ceil(p/100 * n)` of the ascending sort.
pub fn nearest_rank_percentile<T: Scalar>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile values"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid("percentile", format!("{p} outside (0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("values", "non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// `(x, fraction of scores <= x)` for each grid point.
pub fn similarity_cdf<T: Scalar>(scores: &[T], grid: &[T]) -> Result<Vec<(T, f64)>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("similarity scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len() as f64;
    Ok(grid
        .iter()
        .map(|&x| {
            let count = sorted.partition_point(|&s| s <= x);
            (x, count as f64 / n)
        })
        .collect())
}

/// Caption embeddings computed once per (class, shift) batch.
#[derive(Debug, Clone)]
pub struct CaptionEmbeddings {
    pub captions: CaptionPair,
    pub class: Vec<f64>,
    pub shift: Option<Vec<f64>>,
}

impl CaptionEmbeddings {
    pub fn new<E: EmbeddingBackend + ?Sized>(captions: CaptionPair, embedder: &E) -> Result<Self> {
        let class = embedder.embed_text(&captions.c_class)?;
        let shift = captions
            .c_shift
            .as_deref()
            .map(|c| embedder.embed_text(c))
            .transpose()?;
        Ok(CaptionEmbeddings { captions, class, shift })
    }
}

/// Sets `sim_class` (and `sim_shift` for non-base shifts) on every generated sample.
///
/// `load_image` resolves a sample's pixels; samples whose image cannot be
/// read are marked failed. Already-failed samples pass through unchanged.
pub fn score_batch<E, L>(
    samples: &[CounterfactualSample],
    class_label: &str,
    spec: &ShiftSpec,
    embedder: &E,
    load_image: L,
) -> Result<Vec<CounterfactualSample>>
where
    E: EmbeddingBackend + ?Sized,
    L: Fn(&CounterfactualSample) -> Result<RgbImage> + Sync,
{
    let captions = CaptionEmbeddings::new(build_captions(class_label, spec), embedder)?;
    Ok(samples
        .par_iter()
        .map(|s| {
            let mut s = s.clone();
            if s.is_failed() {
                return s;
            }
            let scored = load_image(&s).and_then(|img| {
                let v = embedder.embed_image(&img)?;
                let class = cosine_similarity(&v, &captions.class)?;
                let shift = captions.shift.as_ref().map(|t| cosine_similarity(&v, t)).transpose()?;
                Ok((class, shift))
            });
            match scored {
                Ok((class, shift)) => {
                    s.sim_class = Some(class);
                    s.sim_shift = shift;
                }
                Err(e) => s.failure = Some(format!("scoring: {e}")),
            }
            s
        })
        .collect())
}

pub fn class_threshold_from_scores(class_id: u32, scores: &[f64], percentile: f64) -> Result<ClassThreshold> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("reference images"));
    }
    Ok(ClassThreshold {
        class_id,
        value: nearest_rank_percentile(scores, percentile)?,
        percentile,
        n_reference: scores.len(),
    })
}

/// Object-presence threshold from held-out real images of the class.
pub fn calibrate_class_threshold<E: EmbeddingBackend + ?Sized>(
    class_id: u32,
    reference_images: &[RgbImage],
    class_label: &str,
    embedder: &E,
    percentile: f64,
) -> Result<ClassThreshold> {
    if reference_images.is_empty() {
        return Err(Error::EmptyInput("reference images"));
    }
    let caption = embedder.embed_text(&format!("a photo of a {class_label}"))?;
    let scores = reference_images
        .par_iter()
        .map(|img| cosine_similarity(&embedder.embed_image(img)?, &caption))
        .collect::<Result<Vec<f64>>>()?;
    class_threshold_from_scores(class_id, &scores, percentile)
}

/// Images offered to an inspector at one grid percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRequest {
    pub shift_name: String,
    pub percentile: f64,
    pub score: f64,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionVerdict {
    pub percentile: f64,
    pub sample_ids: Vec<String>,
    pub all_exhibit_shift: bool,
    pub inspector_id: String,
}

pub trait Inspector {
    fn inspect(&mut self, request: &InspectionRequest) -> InspectionVerdict;
}

/// Accepts exactly the percentiles at or above `from`; the test and script stand-in for a human.
#[derive(Debug, Clone)]
pub struct ScriptedInspector {
    pub accept_from: f64,
    pub inspector_id: String,
}

impl ScriptedInspector {
    pub fn accepting_from(accept_from: f64) -> Self {
        ScriptedInspector {
            accept_from,
            inspector_id: format!("scripted-accept-from-{accept_from}"),
        }
    }
}

impl Inspector for ScriptedInspector {
    fn inspect(&mut self, request: &InspectionRequest) -> InspectionVerdict {
        InspectionVerdict {
            percentile: request.percentile,
            sample_ids: request.sample_ids.clone(),
            all_exhibit_shift: request.percentile >= self.accept_from,
            inspector_id: self.inspector_id.clone(),
        }
    }
}

impl<F: FnMut(&InspectionRequest) -> InspectionVerdict> Inspector for F {
    fn inspect(&mut self, request: &InspectionRequest) -> InspectionVerdict {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CalibrationState {
    Offering(InspectionRequest),
    Calibrated { percentile: f64, threshold: f64 },
    Uncalibratable,
}

/// Ascending walk over a percentile grid, one verdict at a time.
///
/// Drives both the in-process calibration and the service's interactive sessions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftCalibrationSession {
    shift_name: String,
    grid: Vec<f64>,
    inspection_count: usize,
    /// (sample_id, sim_shift), sorted by sample id.
    scores: Vec<(String, f64)>,
    position: usize,
    verdicts: Vec<InspectionVerdict>,
    state: CalibrationState,
}

impl ShiftCalibrationSession {
    pub fn new(
        spec: &ShiftSpec,
        scored: &[CounterfactualSample],
        grid: &[f64],
        inspection_count: usize,
    ) -> Result<Self> {
        if spec.is_base() {
            return Err(Error::invalid("shift", "the base shift has no shift threshold"));
        }
        if grid.is_empty() {
            return Err(Error::EmptyInput("percentile grid"));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid", "percentiles must be strictly ascending"));
        }
        if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
            return Err(Error::invalid("grid", format!("percentile {p} outside (0, 100]")));
        }
        if inspection_count == 0 {
            return Err(Error::invalid("inspection_count", "must be at least 1"));
        }
        let mut scores: Vec<(String, f64)> = scored
            .iter()
            .filter(|s| !s.is_failed() && s.shift_name == spec.name)
            .map(|s| {
                s.sim_shift
                    .map(|v| (s.sample_id.clone(), v))
                    .ok_or_else(|| Error::UnscoredSample(s.sample_id.clone()))
            })
            .collect::<Result<_>>()?;
        if scores.is_empty() {
            return Err(Error::EmptyInput("scored samples"));
        }
        scores.sort_by(|a, b| a.0.cmp(&b.0));
        let mut session = ShiftCalibrationSession {
            shift_name: spec.name.clone(),
            grid: grid.to_vec(),
            inspection_count,
            scores,
            position: 0,
            verdicts: Vec::new(),
            state: CalibrationState::Uncalibratable,
        };
        session.state = CalibrationState::Offering(session.offer(0)?);
        Ok(session)
    }

    fn score_at(&self, percentile: f64) -> Result<f64> {
        let values: Vec<f64> = self.scores.iter().map(|(_, v)| *v).collect();
        nearest_rank_percentile(&values, percentile)
    }

    fn offer(&self, position: usize) -> Result<InspectionRequest> {
        let percentile = self.grid[position];
        let score = self.score_at(percentile)?;
        let mut by_distance: Vec<&(String, f64)> = self.scores.iter().collect();
        // stable sort keeps sample-id order among equal distances
        by_distance.sort_by(|a, b| (a.1 - score).abs().total_cmp(&(b.1 - score).abs()));
        Ok(InspectionRequest {
            shift_name: self.shift_name.clone(),
            percentile,
            score,
            sample_ids: by_distance
                .into_iter()
                .take(self.inspection_count)
                .map(|(id, _)| id.clone())
                .collect(),
        })
    }

    pub fn shift_name(&self) -> &str {
        &self.shift_name
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn verdicts(&self) -> &[InspectionVerdict] {
        &self.verdicts
    }

    pub fn current_request(&self) -> Option<&InspectionRequest> {
        match &self.state {
            CalibrationState::Offering(req) => Some(req),
            _ => None,
        }
    }

    /// Records a verdict for the percentile currently offered and advances.
    pub fn submit(&mut self, verdict: InspectionVerdict) -> Result<&CalibrationState> {
        let Some(request) = self.current_request() else {
            return Err(Error::Calibration(format!("session for {} is closed", self.shift_name)));
        };
        if verdict.percentile != request.percentile {
            return Err(Error::Calibration(format!(
                "verdict for percentile {} but {} is offered",
                verdict.percentile, request.percentile
            )));
        }
        if verdict.sample_ids.is_empty() {
            return Err(Error::invalid("sample_ids", "inspected list is empty"));
        }
        let accepted = verdict.all_exhibit_shift;
        let score = request.score;
        self.verdicts.push(verdict);
        self.state = if accepted {
            CalibrationState::Calibrated {
                percentile: self.grid[self.position],
                threshold: score,
            }
        } else if self.position + 1 < self.grid.len() {
            self.position += 1;
            CalibrationState::Offering(self.offer(self.position)?)
        } else {
            CalibrationState::Uncalibratable
        };
        Ok(&self.state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCalibration {
    pub shift_name: String,
    pub percentile: f64,
    pub threshold: f64,
    pub verdicts: Vec<InspectionVerdict>,
}

/// Lowest grid percentile whose inspected samples all show the shift.
///
/// Every verdict is returned, on success and inside [`Error::Uncalibratable`].
pub fn calibrate_shift_threshold<I: Inspector + ?Sized>(
    spec: &ShiftSpec,
    scored: &[CounterfactualSample],
    grid: &[f64],
    inspection_count: usize,
    inspector: &mut I,
) -> Result<ShiftCalibration> {
    let mut session = ShiftCalibrationSession::new(spec, scored, grid, inspection_count)?;
    while let Some(request) = session.current_request().cloned() {
        session.submit(inspector.inspect(&request))?;
    }
    match session.state {
        CalibrationState::Calibrated { percentile, threshold } => Ok(ShiftCalibration {
            shift_name: spec.name.clone(),
            percentile,
            threshold,
            verdicts: session.verdicts,
        }),
        _ => Err(Error::Uncalibratable {
            shift: spec.name.clone(),
            verdicts: session.verdicts,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub sample_id: String,
    pub sim_class: f64,
    pub sim_shift: Option<f64>,
    pub tau_class: f64,
    pub tau_shift: Option<f64>,
    pub kept: bool,
}

impl FilterDecision {
    pub fn decide(
        sample_id: &str,
        sim_class: f64,
        sim_shift: Option<f64>,
        tau_class: f64,
        tau_shift: Option<f64>,
    ) -> Result<Self> {
        let shift_ok = match (tau_shift, sim_shift) {
            (None, _) => true,
            (Some(tau), Some(sim)) => sim >= tau,
            (Some(_), None) => return Err(Error::UnscoredSample(sample_id.to_string())),
        };
        Ok(FilterDecision {
            sample_id: sample_id.to_string(),
            sim_class,
            sim_shift,
            tau_class,
            tau_shift,
            kept: sim_class >= tau_class && shift_ok,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<CounterfactualSample>,
    /// Every input sample with `kept` set; failed samples keep `kept = None`.
    pub annotated: Vec<CounterfactualSample>,
    pub decisions: Vec<FilterDecision>,
    pub yield_stats: YieldStats,
}

/// Filters one class's candidates for one shift.
pub fn filter_batch(
    scored: &[CounterfactualSample],
    tau_class: &ClassThreshold,
    spec: &ShiftSpec,
) -> Result<FilterOutcome> {
    let mut thresholds = BTreeMap::new();
    thresholds.insert(tau_class.class_id, tau_class.clone());
    filter_samples(scored, &thresholds, spec)
}

/// Filters candidates of several classes, each against its own class threshold.
pub fn filter_samples(
    scored: &[CounterfactualSample],
    class_thresholds: &BTreeMap<u32, ClassThreshold>,
    spec: &ShiftSpec,
) -> Result<FilterOutcome> {
    let tau_shift = if spec.is_base() {
        None
    } else {
        Some(
            spec.shift_threshold
                .ok_or_else(|| Error::invalid("threshold", format!("shift {} has no threshold", spec.name)))?,
        )
    };
    let mut kept = Vec::new();
    let mut annotated = Vec::with_capacity(scored.len());
    let mut decisions = Vec::new();
    for sample in scored {
        let mut sample = sample.clone();
        if sample.shift_name != spec.name {
            return Err(Error::invalid(
                "shift_name",
                format!(
                    "{} belongs to {}, not {}",
                    sample.sample_id, sample.shift_name, spec.name
                ),
            ));
        }
        if !sample.is_failed() {
            let sim_class = sample
                .sim_class
                .ok_or_else(|| Error::UnscoredSample(sample.sample_id.clone()))?;
            let tau_class = class_thresholds
                .get(&sample.class_id)
                .ok_or(Error::UnknownClass(sample.class_id))?
                .value;
            let decision =
                FilterDecision::decide(&sample.sample_id, sim_class, sample.sim_shift, tau_class, tau_shift)?;
            sample.kept = Some(decision.kept);
            if decision.kept {
                kept.push(sample.clone());
            }
            decisions.push(decision);
        }
        annotated.push(sample);
    }
    let yield_stats = YieldStats::new(scored.len(), kept.len());
    Ok(FilterOutcome {
        kept,
        annotated,
        decisions,
        yield_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ShiftRegistry;

    fn sample(id: usize, sim_class: f64, sim_shift: Option<f64>) -> CounterfactualSample {
        CounterfactualSample {
            sample_id: format!("s{id:03}"),
            image_ref: format!("s{id:03}.png"),
            class_id: 1,
            shift_name: "in_the_grass".into(),
            seed: id as u64,
            prompt: "p".into(),
            sim_class: Some(sim_class),
            sim_shift,
            kept: None,
            failure: None,
        }
    }

    #[test]
    fn captions() {
        let reg = ShiftRegistry::default_registry();
        let c = build_captions("plate", reg.get("in_the_grass").unwrap());
        assert_eq!(c.c_class, "a photo of a plate");
        assert_eq!(c.c_shift.as_deref(), Some("a photo in the grass"));
        let c = build_captions("newt", reg.get("pencil_sketch").unwrap());
        assert_eq!(c.c_class, "a newt");
        let c = build_captions("dog", reg.base().unwrap());
        assert_eq!(
            c,
            CaptionPair {
                c_class: "a photo of a dog".into(),
                c_shift: None
            }
        );
    }

    #[test]
    fn cosine_values() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0, 0.0], &[s, s, 0.0]).unwrap();
        assert!((c - s).abs() < 1e-12);
        let c32 = cosine_similarity(&[1.0f32, 0.0], &[1.0000001f32, 0.0]).unwrap();
        assert!(c32 <= 1.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn percentile_examples() {
        let values: Vec<f64> = (0..10).map(|i| 0.10 + 0.05 * i as f64).collect();
        assert_eq!(nearest_rank_percentile(&values, 20.0).unwrap(), values[1]);
        assert_eq!(nearest_rank_percentile(&[0.3], 37.0).unwrap(), 0.3);
        assert_eq!(nearest_rank_percentile(&values, 100.0).unwrap(), values[9]);
        assert_eq!(nearest_rank_percentile(&[0.1, 0.2, 0.3, 0.4], 50.0).unwrap(), 0.2);
        assert!(nearest_rank_percentile::<f64>(&[], 20.0).is_err());
        assert!(nearest_rank_percentile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(
            similarity_cdf(&[0.5], &[0.4, 0.5, 0.6]).unwrap(),
            vec![(0.4, 0.0), (0.5, 1.0), (0.6, 1.0)]
        );
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(similarity_cdf(&scores, &[0.5]).unwrap()[0].1, 0.5);
        assert!(similarity_cdf::<f64>(&[], &[0.5]).is_err());
    }

    #[test]
    fn shift_calibration_degenerate_inspectors() {
        let reg = ShiftRegistry::default_registry();
        let spec = reg.get("in_the_grass").unwrap();
        let scored: Vec<_> = (0..20).map(|i| sample(i, 0.5, Some(i as f64 / 20.0))).collect();
        let grid = [20.0, 40.0, 60.0, 80.0];
        let mut yes = ScriptedInspector::accepting_from(0.0);
        let cal = calibrate_shift_threshold(spec, &scored, &grid, 5, &mut yes).unwrap();
        let values: Vec<f64> = scored.iter().map(|s| s.sim_shift.unwrap()).collect();
        assert_eq!(cal.threshold, nearest_rank_percentile(&values, 20.0).unwrap());
        assert_eq!(cal.verdicts.len(), 1);
        let mut no = ScriptedInspector::accepting_from(f64::INFINITY);
        match calibrate_shift_threshold(spec, &scored, &grid, 5, &mut no) {
            Err(Error::Uncalibratable { verdicts, .. }) => assert_eq!(verdicts.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn session_rejects_out_of_turn_verdicts() {
        let reg = ShiftRegistry::default_registry();
        let spec = reg.get("in_the_grass").unwrap();
        let scored: Vec<_> = (0..10).map(|i| sample(i, 0.5, Some(i as f64))).collect();
        let mut session = ShiftCalibrationSession::new(spec, &scored, &[10.0, 50.0], 3).unwrap();
        let offered = session.current_request().unwrap().clone();
        assert_eq!(offered.sample_ids.len(), 3);
        let wrong = InspectionVerdict {
            percentile: 50.0,
            sample_ids: offered.sample_ids.clone(),
            all_exhibit_shift: true,
            inspector_id: "h".into(),
        };
        assert!(session.submit(wrong).is_err());
        assert!(session.verdicts().is_empty());
    }

    #[test]
    fn filter_yield_enumeration() {
        let reg = ShiftRegistry::default_registry();
        let spec = reg.get("in_the_grass").unwrap();
        let tau = ClassThreshold {
            class_id: 1,
            value: 0.2,
            percentile: 20.0,
            n_reference: 10,
        };
        let scored: Vec<_> = (0..10)
            .map(|i| sample(i, 0.3, Some(if i < 3 { 0.1 } else { 0.127 })))
            .collect();
        let out = filter_batch(&scored, &tau, spec).unwrap();
        assert_eq!(out.yield_stats.yield_fraction, Some(0.7));
        assert_eq!(out.kept.len(), 7);
    }

    #[test]
    fn vacuous_thresholds_keep_all_generated() {
        let mut spec = ShiftRegistry::default_registry().get("in_the_grass").unwrap().clone();
        spec.shift_threshold = Some(-1.0);
        let tau = ClassThreshold {
            class_id: 1,
            value: -1.0,
            percentile: 20.0,
            n_reference: 1,
        };
        let mut scored: Vec<_> = (0..4).map(|i| sample(i, -0.5, Some(-0.9))).collect();
        scored[0].failure = Some("boom".into());
        scored[0].sim_class = None;
        let out = filter_batch(&scored, &tau, &spec).unwrap();
        assert_eq!(out.yield_stats, YieldStats::new(4, 3));
        spec.shift_threshold = Some(1.0);
        assert!(filter_batch(&scored, &tau, &spec).unwrap().kept.is_empty());
    }

    #[test]
    fn unscored_sample_rejected() {
        let spec = ShiftRegistry::default_registry().get("in_the_grass").unwrap().clone();
        let tau = ClassThreshold {
            class_id: 1,
            value: 0.0,
            percentile: 20.0,
            n_reference: 1,
        };
        let scored = vec![sample(0, 0.5, None)];
        assert!(matches!(
            filter_batch(&scored, &tau, &spec),
            Err(Error::UnscoredSample(_))
        ));
    }
}
