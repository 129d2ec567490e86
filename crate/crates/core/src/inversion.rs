//! Per-class token learning against a frozen generative backend.

use chrono::{DateTime, Utc};
use image::RgbImage;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::GenerativeBackend;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::types::{check_template, ClassToken, Provenance};

/// Neutral templates cycled during inversion.
pub const DEFAULT_TEMPLATES: [&str; 5] = [
    "a photo of a {token}",
    "a rendering of a {token}",
    "a cropped photo of the {token}",
    "a close-up photo of a {token}",
    "a good photo of a {token}",
];

/// Starting point of the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    /// The backend's embedding of a fixed word (e.g. a broad category such as "pet").
    Word(String),
    /// The backend's embedding of the first word of the class label.
    LabelFirstWord,
    Zero,
    RandomUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub init: TokenInit,
    pub template_set: Vec<String>,
    /// Objective draws averaged per step.
    pub batch_size: usize,
    /// Dataset slug used in token strings, `<slug-id>`.
    pub token_slug: String,
    /// Pins the provenance timestamp; `None` stamps the current time.
    pub created_at: Option<DateTime<Utc>>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 3000,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
            seed: 0,
            init: TokenInit::LabelFirstWord,
            template_set: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            batch_size: 1,
            token_slug: "class".into(),
            created_at: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be a positive real"));
        }
        for (field, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.template_set.is_empty() {
            return Err(Error::invalid("template_set", "must not be empty"));
        }
        self.template_set.iter().try_for_each(|t| check_template(t))
    }
}

/// One objective query within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepDraw {
    pub image_index: usize,
    pub template_index: usize,
    pub noise_seed: u64,
}

/// Draws for `step`; a counter-based stream so any step can be replayed alone.
pub fn step_draws(seed: u64, step: u64, n_images: usize, n_templates: usize, batch: usize) -> Vec<StepDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch)
        .map(|_| StepDraw {
            image_index: rng.random_range(0..n_images),
            template_index: rng.random_range(0..n_templates),
            noise_seed: rng.next_u64(),
        })
        .collect()
}

pub fn initial_embedding<B: GenerativeBackend + ?Sized>(
    class_label: &str,
    backend: &B,
    config: &InversionConfig,
) -> Result<Vec<f32>> {
    let dim = backend.text_embedding_dim();
    let v = match &config.init {
        TokenInit::Zero => vec![0.0; dim],
        TokenInit::Word(word) => backend.word_embedding(word)?,
        TokenInit::LabelFirstWord => {
            let word = class_label
                .split_whitespace()
                .next()
                .ok_or_else(|| Error::invalid("class_label", "empty label"))?;
            backend.word_embedding(word)?
        }
        TokenInit::RandomUnit => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u64::MAX);
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.iter().map(|x| (x / norm) as f32).collect()
        }
    };
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "initial embedding".into(),
            expected: dim,
            found: v.len(),
        });
    }
    Ok(v)
}

/// Learns a token and returns it with the mean loss of every step.
pub fn learn_token_traced<B: GenerativeBackend + ?Sized>(
    class_id: u32,
    class_label: &str,
    images: &[RgbImage],
    backend: &B,
    config: &InversionConfig,
) -> Result<(ClassToken, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::EmptyInput("class images"));
    }
    config.validate()?;
    let dim = backend.text_embedding_dim();
    let init = initial_embedding(class_label, backend, config)?;
    let mut params: Vec<f64> = init.iter().map(|&x| x as f64).collect();
    let mut optimizer = AdamW::new(
        dim,
        AdamWConfig {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
        },
    );
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut grad = vec![0.0; dim];
    for step in 0..config.steps {
        let draws = step_draws(
            config.seed,
            step,
            images.len(),
            config.template_set.len(),
            config.batch_size,
        );
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for draw in &draws {
            let obj = backend.inversion_objective(
                &params,
                &images[draw.image_index],
                &config.template_set[draw.template_index],
                draw.noise_seed,
            )?;
            if obj.gradient.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "objective gradient".into(),
                    expected: dim,
                    found: obj.gradient.len(),
                });
            }
            if !obj.loss.is_finite() {
                return Err(Error::NonFinite { step, what: "loss" });
            }
            if obj.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { step, what: "gradient" });
            }
            loss += obj.loss;
            grad.iter_mut().zip(&obj.gradient).for_each(|(a, g)| *a += g);
        }
        let scale = 1.0 / draws.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss * scale);
        optimizer.step(&mut params, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                step,
                what: "embedding",
            });
        }
    }
    let embedding = if config.steps == 0 {
        init
    } else {
        params.iter().map(|&p| p as f32).collect()
    };
    let token = ClassToken {
        class_id,
        class_label: class_label.to_string(),
        token_string: ClassToken::token_string_for(&config.token_slug, class_id),
        embedding,
        provenance: Provenance {
            steps: config.steps,
            learning_rate: config.learning_rate,
            seed: config.seed,
            backend_id: backend.backend_id().to_string(),
            created_at: config.created_at.unwrap_or_else(Utc::now),
        },
    };
    token.validate()?;
    Ok((token, losses))
}

pub fn learn_token<B: GenerativeBackend + ?Sized>(
    class_id: u32,
    class_label: &str,
    images: &[RgbImage],
    backend: &B,
    config: &InversionConfig,
) -> Result<ClassToken> {
    learn_token_traced(class_id, class_label, images, backend, config).map(|(t, _)| t)
}

/// Training images of one class.
#[derive(Debug, Clone)]
pub struct ClassImages {
    pub class_id: u32,
    pub class_label: String,
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    FailFast,
    ContinueAndReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFailure {
    pub class_id: u32,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct LearnAllReport {
    /// Sorted by class id.
    pub tokens: Vec<ClassToken>,
    pub failures: Vec<ClassFailure>,
}

/// Learns every class independently, up to `parallelism` classes at a time.
///
/// Under fail-fast the failure of the lowest class id is returned.
pub fn learn_all_tokens<B: GenerativeBackend + ?Sized>(
    classes: &[ClassImages],
    backend: &B,
    config: &InversionConfig,
    parallelism: usize,
    policy: FailurePolicy,
) -> Result<LearnAllReport> {
    config.validate()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = classes.iter().find(|c| !seen.insert(c.class_id)) {
        return Err(Error::DuplicateClass(dup.class_id));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;
    let mut results: Vec<(u32, Result<ClassToken>)> = pool.install(|| {
        classes
            .par_iter()
            .map(|c| {
                (
                    c.class_id,
                    learn_token(c.class_id, &c.class_label, &c.images, backend, config),
                )
            })
            .collect()
    });
    results.sort_by_key(|(id, _)| *id);
    let mut tokens = Vec::new();
    let mut failures = Vec::new();
    for (class_id, result) in results {
        match result {
            Ok(token) => tokens.push(token),
            Err(e) if policy == FailurePolicy::FailFast => return Err(e),
            Err(e) => failures.push(ClassFailure {
                class_id,
                error: e.to_string(),
            }),
        }
    }
    Ok(LearnAllReport { tokens, failures })
}
