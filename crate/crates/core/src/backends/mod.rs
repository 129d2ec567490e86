//! Backend contracts the pipeline programs against.
//!
//! A generative backend renders prompts and exposes the inversion objective
//! with only the token embedding trainable; an embedding backend maps images
//! and text into one unit-norm space. [`toy`] provides deterministic
//! reference implementations; [`conformance`] checks any implementation.

pub mod conformance;
pub mod toy;

use image::RgbImage;

use crate::error::Result;

/// Loss and gradient of the inversion objective at one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

pub trait GenerativeBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn text_embedding_dim(&self) -> usize;

    /// Setup-phase only; generation must not run concurrently with registration.
    fn register_token(&mut self, token: &str, embedding: &[f32]) -> Result<()>;

    fn has_token(&self, token: &str) -> bool;

    /// Text-space embedding of an ordinary vocabulary word, used to initialise inversion.
    fn word_embedding(&self, word: &str) -> Result<Vec<f32>>;

    fn generate(&self, prompt: &str, seed: u64) -> Result<RgbImage>;

    /// `template` contains the `{token}` placeholder in place of the learned token.
    fn inversion_objective(
        &self,
        embedding: &[f64],
        image: &RgbImage,
        template: &str,
        noise_seed: u64,
    ) -> Result<Objective>;

    /// Stochastic backends are exempt from bit-determinism checks.
    fn is_stochastic(&self) -> bool {
        false
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn is_stochastic(&self) -> bool {
        false
    }
}

/// An image classifier under evaluation.
pub trait ClassifierBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn predict(&self, image: &RgbImage) -> Result<u32>;
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn text_embedding_dim(&self) -> usize {
        (**self).text_embedding_dim()
    }
    fn register_token(&mut self, token: &str, embedding: &[f32]) -> Result<()> {
        (**self).register_token(token, embedding)
    }
    fn has_token(&self, token: &str) -> bool {
        (**self).has_token(token)
    }
    fn word_embedding(&self, word: &str) -> Result<Vec<f32>> {
        (**self).word_embedding(word)
    }
    fn generate(&self, prompt: &str, seed: u64) -> Result<RgbImage> {
        (**self).generate(prompt, seed)
    }
    fn inversion_objective(
        &self,
        embedding: &[f64],
        image: &RgbImage,
        template: &str,
        noise_seed: u64,
    ) -> Result<Objective> {
        (**self).inversion_objective(embedding, image, template, noise_seed)
    }
    fn is_stochastic(&self) -> bool {
        (**self).is_stochastic()
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        (**self).embed_image(image)
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_text(text)
    }
    fn is_stochastic(&self) -> bool {
        (**self).is_stochastic()
    }
}

/// Scales `v` to unit length, or returns `fallback` when `v` is zero.
pub(crate) fn normalize_or(mut v: Vec<f64>, fallback: usize) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[fallback] = 1.0;
    }
    v
}
