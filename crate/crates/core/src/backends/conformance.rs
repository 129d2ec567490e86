//! Contract checks runnable against any backend implementation.

use image::RgbImage;

use super::{EmbeddingBackend, GenerativeBackend};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Violations found by a conformance run; empty means the backend conforms.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConformanceReport {
    pub failures: Vec<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, msg: impl Into<String>) {
        self.failures.push(msg.into());
    }
}

/// Checks generation determinism and the objective's output shape and finiteness.
///
/// `prompts` are rendered verbatim; the objective is probed at `probes`
/// against the first generated image using `template`.
pub fn check_generative<B: GenerativeBackend + ?Sized>(
    backend: &B,
    prompts: &[&str],
    template: &str,
    probes: &[Vec<f64>],
) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let dim = backend.text_embedding_dim();
    if dim == 0 {
        report.fail("text_embedding_dim is zero");
    }
    let mut target: Option<RgbImage> = None;
    for (i, prompt) in prompts.iter().enumerate() {
        let seed = i as u64;
        match (backend.generate(prompt, seed), backend.generate(prompt, seed)) {
            (Ok(a), Ok(b)) => {
                if a.width() == 0 || a.height() == 0 {
                    report.fail(format!("generate({prompt:?}) returned an empty image"));
                }
                if !backend.is_stochastic() && a.as_raw() != b.as_raw() {
                    report.fail(format!("generate({prompt:?}, {seed}) is not deterministic"));
                }
                target.get_or_insert(a);
            }
            (Err(e), _) | (_, Err(e)) => report.fail(format!("generate({prompt:?}) failed: {e}")),
        }
    }
    let Some(target) = target else {
        report.fail("no prompt generated an image to probe the objective with");
        return report;
    };
    for (i, v) in probes.iter().enumerate() {
        match backend.inversion_objective(v, &target, template, i as u64) {
            Ok(obj) => {
                if obj.gradient.len() != dim {
                    report.fail(format!(
                        "gradient has length {} but text_embedding_dim is {dim}",
                        obj.gradient.len()
                    ));
                }
                if !obj.loss.is_finite() || obj.loss < 0.0 {
                    report.fail(format!("loss {} is not a finite non-negative real", obj.loss));
                }
                if obj.gradient.iter().any(|g| !g.is_finite()) {
                    report.fail(format!("probe {i}: gradient is not finite"));
                }
                if !backend.is_stochastic() {
                    if let Ok(again) = backend.inversion_objective(v, &target, template, i as u64) {
                        if again != obj {
                            report.fail(format!("probe {i}: objective is not deterministic"));
                        }
                    }
                }
            }
            Err(e) => report.fail(format!("probe {i}: objective failed: {e}")),
        }
    }
    report
}

/// Checks unit norm, dimension and determinism of both embedding maps.
pub fn check_embedding<B: EmbeddingBackend + ?Sized>(
    backend: &B,
    images: &[RgbImage],
    texts: &[&str],
) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let dim = backend.dim();
    let mut check = |what: String, a: crate::error::Result<Vec<f64>>, b: crate::error::Result<Vec<f64>>| match (a, b) {
        (Ok(a), Ok(b)) => {
            if a.len() != dim {
                report.fail(format!("{what}: length {} != dim {dim}", a.len()));
            }
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                report.fail(format!("{what}: norm {norm} is not 1"));
            }
            if !backend.is_stochastic() && a != b {
                report.fail(format!("{what}: not deterministic"));
            }
        }
        (Err(e), _) | (_, Err(e)) => report.fail(format!("{what}: {e}")),
    };
    for (i, img) in images.iter().enumerate() {
        check(
            format!("embed_image #{i}"),
            backend.embed_image(img),
            backend.embed_image(img),
        );
    }
    for text in texts {
        check(
            format!("embed_text({text:?})"),
            backend.embed_text(text),
            backend.embed_text(text),
        );
    }
    report
}
