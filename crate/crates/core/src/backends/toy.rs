//! Deterministic desk-scale backends.
//!
//! The toy world draws a centred disk over a background. The disk colour is
//! `0.5 + v[0..3]` for token embedding `v`, passed through the affine colour
//! operations named by shift keywords in the prompt, so the inversion
//! objective is quadratic in `v` and its optimum is available in closed form.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{normalize_or, ClassifierBackend, EmbeddingBackend, GenerativeBackend, Objective};
use crate::error::{Error, Result};
use crate::types::TOKEN_PLACEHOLDER;

pub const TOY_GENERATOR_ID: &str = "toy-generator-v1";
pub const TOY_EMBEDDER_ID: &str = "toy-embedder-v1";

pub const DEFAULT_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
pub const DEFAULT_TEXT_DIM: usize = 8;
pub const TOY_EMBEDDING_DIM: usize = 12;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[rustfmt::skip]
const COLOR_WORDS: [(&str, [f64; 3]); 14] = [
    ("red",     [0.90, 0.10, 0.10]),
    ("green",   [0.10, 0.75, 0.20]),
    ("blue",    [0.10, 0.20, 0.90]),
    ("yellow",  [0.90, 0.85, 0.10]),
    ("cyan",    [0.10, 0.80, 0.85]),
    ("magenta", [0.85, 0.10, 0.80]),
    ("orange",  [0.95, 0.55, 0.10]),
    ("purple",  [0.50, 0.15, 0.70]),
    ("brown",   [0.50, 0.30, 0.15]),
    ("pink",    [1.00, 0.60, 0.75]),
    ("white",   [1.00, 1.00, 1.00]),
    ("black",   [0.00, 0.00, 0.00]),
    ("gray",    [0.50, 0.50, 0.50]),
    ("grey",    [0.50, 0.50, 0.50]),
];

pub fn color_word(word: &str) -> Option<[f64; 3]> {
    COLOR_WORDS.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

/// What a shift keyword does to a toy scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftEffect {
    Background([f64; 3]),
    Tint { color: [f64; 3], strength: f64 },
    Grayscale,
}

pub fn keyword_effect(word: &str) -> Option<ShiftEffect> {
    use ShiftEffect::*;
    let tint = |color, strength| Some(Tint { color, strength });
    match word {
        "grass" => Some(Background([0.25, 0.60, 0.20])),
        "beach" | "sand" => Some(Background([0.90, 0.80, 0.55])),
        "forest" => Some(Background([0.10, 0.35, 0.12])),
        "water" => Some(Background([0.15, 0.35, 0.80])),
        "road" => Some(Background([0.30, 0.30, 0.32])),
        "rocks" => Some(Background([0.55, 0.50, 0.45])),
        "snow" => Some(Background([1.00, 1.00, 1.00])),
        "studio" => Some(Background([0.05, 0.05, 0.05])),
        "flower" => Some(Background([0.95, 0.60, 0.80])),
        "person" => Some(Background([0.85, 0.65, 0.50])),
        "rain" => tint([0.40, 0.45, 0.55], 0.21),
        "fog" => tint([0.85, 0.85, 0.85], 0.30),
        "sunlight" => tint([1.00, 0.97, 0.85], 0.18),
        "dusk" => tint([0.65, 0.35, 0.25], 0.24),
        "night" => tint([0.03, 0.03, 0.10], 0.30),
        "oil" | "painting" | "panting" => tint([0.60, 0.45, 0.25], 0.15),
        "embroidery" => tint([0.90, 0.85, 0.70], 0.18),
        "sketch" | "pencil" => Some(Grayscale),
        w => color_word(w).map(|color| Tint { color, strength: 0.3 }),
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Affine colour map `c -> m c + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorMap {
    pub m: [[f64; 3]; 3],
    pub b: [f64; 3],
}

impl ColorMap {
    pub const IDENTITY: ColorMap = ColorMap {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        b: [0.0; 3],
    };

    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|j| self.m[i][j] * c[j]).sum::<f64>() + self.b[i])
    }

    /// Blend from the identity (`t = 0`) to `self` (`t = 1`).
    fn partial(&self, t: f64) -> ColorMap {
        let id = ColorMap::IDENTITY;
        ColorMap {
            m: std::array::from_fn(|i| std::array::from_fn(|j| id.m[i][j] + t * (self.m[i][j] - id.m[i][j]))),
            b: std::array::from_fn(|i| t * self.b[i]),
        }
    }

    /// `other` after `self`.
    fn then(&self, other: &ColorMap) -> ColorMap {
        let m = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| other.m[i][k] * self.m[k][j]).sum()));
        ColorMap {
            m,
            b: other.apply(self.b),
        }
    }

    fn of_effect(effect: &ShiftEffect) -> ColorMap {
        match *effect {
            ShiftEffect::Background(_) => ColorMap::IDENTITY,
            ShiftEffect::Tint { color, strength } => {
                let keep = 1.0 - strength;
                let mut map = ColorMap::IDENTITY;
                for (i, c) in color.into_iter().enumerate() {
                    map.m[i][i] = keep;
                    map.b[i] = strength * c;
                }
                map
            }
            ShiftEffect::Grayscale => ColorMap {
                m: [LUMA; 3],
                b: [0.0; 3],
            },
        }
    }
}

/// Scene parameters a prompt selects: background plus a colour map applied to everything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub background: [f64; 3],
    pub color_map: ColorMap,
}

impl Scene {
    /// Recognised keywords apply in prompt order; unknown words are ignored.
    pub fn from_text(text: &str) -> Scene {
        let mut background = DEFAULT_BACKGROUND;
        let mut color_map = ColorMap::IDENTITY;
        for word in words(text) {
            match keyword_effect(&word) {
                Some(ShiftEffect::Background(bg)) => background = bg,
                Some(effect) => color_map = color_map.then(&ColorMap::of_effect(&effect)),
                None => {}
            }
        }
        Scene { background, color_map }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClass {
    pub label: String,
    pub color: [f64; 3],
}

/// Geometry, noise and class palette shared by the toy backends.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub size: u32,
    pub disk_radius_frac: f64,
    pub noise_amplitude: f64,
    pub classes: BTreeMap<u32, ToyClass>,
}

impl Default for ToyWorld {
    fn default() -> Self {
        ToyWorld {
            size: 32,
            disk_radius_frac: 0.3,
            noise_amplitude: 0.02,
            classes: BTreeMap::new(),
        }
    }
}

impl ToyWorld {
    /// `n` classes labelled "<colour> disk", ids `0..n`.
    pub fn with_classes(n: usize) -> Self {
        let mut world = ToyWorld::default();
        for i in 0..n {
            let named = COLOR_WORDS[..8].get(i);
            let class = if let Some(&(name, color)) = named {
                ToyClass {
                    label: format!("{name} disk"),
                    color,
                }
            } else {
                // evenly spaced hues beyond the named palette
                let h = (i as f64 * 0.618_033_988_75).fract() * 6.0;
                let x = 1.0 - (h % 2.0 - 1.0).abs();
                let (r, g, b) = match h as u32 {
                    0 => (1.0, x, 0.0),
                    1 => (x, 1.0, 0.0),
                    2 => (0.0, 1.0, x),
                    3 => (0.0, x, 1.0),
                    4 => (x, 0.0, 1.0),
                    _ => (1.0, 0.0, x),
                };
                ToyClass {
                    label: format!("hue {i} disk"),
                    color: [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b],
                }
            };
            world.classes.insert(i as u32, class);
        }
        world
    }

    pub fn class(&self, class_id: u32) -> Result<&ToyClass> {
        self.classes.get(&class_id).ok_or(Error::UnknownClass(class_id))
    }

    pub fn in_disk(&self, x: u32, y: u32) -> bool {
        disk_mask(self.size, self.disk_radius_frac, x, y)
    }

    /// Noise-free render; disk colour and background after the scene colour map, unclamped.
    pub fn render_clean(&self, disk_color: [f64; 3], scene: &Scene) -> Vec<[f64; 3]> {
        let fg = scene.color_map.apply(disk_color);
        let bg = scene.color_map.apply(scene.background);
        let mut out = Vec::with_capacity((self.size * self.size) as usize);
        for y in 0..self.size {
            for x in 0..self.size {
                out.push(if self.in_disk(x, y) { fg } else { bg });
            }
        }
        out
    }

    /// Clamped, seeded-noise, 8-bit render.
    pub fn render(&self, disk_color: [f64; 3], scene: &Scene, noise_key: &[u8]) -> RgbImage {
        let mut rng = ChaCha8Rng::from_seed(Sha256::digest(noise_key).into());
        let clean = self.render_clean(disk_color, scene);
        let amp = self.noise_amplitude;
        let mut img = RgbImage::new(self.size, self.size);
        for (pixel, c) in img.pixels_mut().zip(clean) {
            *pixel = Rgb(std::array::from_fn(|i| {
                let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                ((c[i] + noise).clamp(0.0, 1.0) * 255.0).round() as u8
            }));
        }
        img
    }

    /// An input-dataset photo of `class_id`: its palette disk on a seeded
    /// background, either a gray level in [0.15, 0.95] with a small cast or
    /// an arbitrary colour.
    pub fn dataset_image(&self, class_id: u32, seed: u64) -> Result<RgbImage> {
        let (class, key, mut rng) = self.photo_rng(class_id, seed, "dataset")?;
        let scene = Scene {
            background: random_background(&mut rng),
            color_map: ColorMap::IDENTITY,
        };
        Ok(self.render(class.color, &scene, key.as_bytes()))
    }

    /// A photo of `class_id` taken in the field: like [`Self::dataset_image`],
    /// but with probability 0.8 the scene of a random shift keyword applies at
    /// a strength uniform in [0.3, 1].
    pub fn field_image(&self, class_id: u32, seed: u64) -> Result<RgbImage> {
        let (class, key, mut rng) = self.photo_rng(class_id, seed, "field")?;
        let mut scene = Scene {
            background: random_background(&mut rng),
            color_map: ColorMap::IDENTITY,
        };
        if rng.random_bool(0.8) {
            let word = SCENE_WORDS[rng.random_range(0..SCENE_WORDS.len())];
            let strength = rng.random_range(0.3..=1.0);
            match keyword_effect(word) {
                Some(ShiftEffect::Background(bg)) => {
                    scene.background =
                        std::array::from_fn(|i| scene.background[i] + strength * (bg[i] - scene.background[i]))
                }
                Some(effect) => scene.color_map = ColorMap::of_effect(&effect).partial(strength),
                None => {}
            }
        }
        Ok(self.render(class.color, &scene, key.as_bytes()))
    }

    fn photo_rng(&self, class_id: u32, seed: u64, kind: &str) -> Result<(&ToyClass, String, ChaCha8Rng)> {
        let class = self.class(class_id)?;
        let key = format!("{kind}\u{0}{}\u{0}{seed}", class.label);
        let rng = ChaCha8Rng::from_seed(Sha256::digest(format!("{key}\u{0}scene")).into());
        Ok((class, key, rng))
    }
}

/// Keywords with a scene effect, one per distinct effect.
const SCENE_WORDS: [&str; 17] = [
    "grass", "beach", "forest", "water", "road", "rocks", "snow", "studio", "flower", "person", "rain", "fog",
    "sunlight", "dusk", "night", "painting", "sketch",
];

fn random_background(rng: &mut ChaCha8Rng) -> [f64; 3] {
    if rng.random_bool(0.5) {
        let level = rng.random_range(0.15..=0.95);
        std::array::from_fn(|_| level + rng.random_range(-0.08..=0.08))
    } else {
        std::array::from_fn(|_| rng.random_range(0.1..=0.9))
    }
}

fn disk_mask(size: u32, radius_frac: f64, x: u32, y: u32) -> bool {
    let c = (size as f64 - 1.0) / 2.0;
    let r = radius_frac * size as f64;
    let (dx, dy) = (x as f64 - c, y as f64 - c);
    dx * dx + dy * dy <= r * r
}

fn pixel_f64(p: &Rgb<u8>) -> [f64; 3] {
    std::array::from_fn(|i| p.0[i] as f64 / 255.0)
}

/// Per-sample imperfection of the toy generator.
///
/// With probability `shift_miss_rate` a sample renders its scene only
/// partially (strength uniform in `[0, 1)`); with probability
/// `object_miss_rate` the disk colour washes towards the background by a
/// fraction uniform in `[0.3, 0.8)`. Both draws are keyed on prompt and seed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ToyVariation {
    pub shift_miss_rate: f64,
    pub object_miss_rate: f64,
}

impl ToyVariation {
    pub const NONE: ToyVariation = ToyVariation {
        shift_miss_rate: 0.0,
        object_miss_rate: 0.0,
    };
}

/// Toy text-to-image backend.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    world: ToyWorld,
    dim: usize,
    tokens: BTreeMap<String, Vec<f32>>,
    variation: ToyVariation,
}

impl ToyGenerator {
    pub fn new(world: ToyWorld, dim: usize) -> Result<Self> {
        if dim < 3 {
            return Err(Error::invalid("dim", "toy text embeddings need at least 3 components"));
        }
        Ok(ToyGenerator {
            world,
            dim,
            tokens: BTreeMap::new(),
            variation: ToyVariation::NONE,
        })
    }

    pub fn with_variation(mut self, variation: ToyVariation) -> Result<Self> {
        for (field, rate) in [
            ("shift_miss_rate", variation.shift_miss_rate),
            ("object_miss_rate", variation.object_miss_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::invalid(field, format!("{rate} is not a probability")));
            }
        }
        self.variation = variation;
        Ok(self)
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    /// Disk colour a token embedding projects to before scene effects.
    pub fn disk_color(embedding: &[f64]) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 + embedding[i])
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(Error::DimensionMismatch {
                context: "toy text embedding".into(),
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }
}

impl GenerativeBackend for ToyGenerator {
    fn backend_id(&self) -> &str {
        TOY_GENERATOR_ID
    }

    fn text_embedding_dim(&self) -> usize {
        self.dim
    }

    fn register_token(&mut self, token: &str, embedding: &[f32]) -> Result<()> {
        crate::types::validate_token_string(token)?;
        self.check_dim(embedding.len())?;
        self.tokens.insert(token.to_string(), embedding.to_vec());
        Ok(())
    }

    fn has_token(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    fn word_embedding(&self, word: &str) -> Result<Vec<f32>> {
        let word = word.trim().to_lowercase();
        if word.is_empty() {
            return Err(Error::invalid("word", "empty initializer word"));
        }
        let mut v = vec![0.0f32; self.dim];
        match color_word(&word) {
            Some(c) => (0..3).for_each(|i| v[i] = (c[i] - 0.5) as f32),
            None => {
                let h = Sha256::digest(word.as_bytes());
                (0..3).for_each(|i| v[i] = (h[i] as f32 / 255.0 - 0.5) * 0.2);
            }
        }
        Ok(v)
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<RgbImage> {
        let mut found: Option<(&str, &[f32])> = None;
        let mut count = 0;
        for (token, emb) in &self.tokens {
            let n = prompt.matches(token.as_str()).count();
            if n > 0 {
                count += n;
                found = Some((token, emb));
            }
        }
        if count > 1 {
            return Err(Error::Backend(format!(
                "prompt {prompt:?} contains {count} registered tokens"
            )));
        }
        let (scene_text, v) = match found {
            Some((token, emb)) => (prompt.replace(token, " "), emb.iter().map(|&x| x as f64).collect()),
            None => (prompt.to_string(), vec![0.0; self.dim]),
        };
        let mut scene = Scene::from_text(&scene_text);
        let mut disk = Self::disk_color(&v);
        let mut key = prompt.as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(&seed.to_le_bytes());
        if self.variation != ToyVariation::NONE {
            let mut vkey = key.clone();
            vkey.extend_from_slice(b"\0variation");
            let mut rng = ChaCha8Rng::from_seed(Sha256::digest(&vkey).into());
            let (shift_draw, strength) = (rng.random::<f64>(), rng.random::<f64>());
            let (object_draw, wash) = (rng.random::<f64>(), rng.random_range(0.3..0.8));
            if shift_draw < self.variation.shift_miss_rate {
                scene.background = std::array::from_fn(|i| {
                    DEFAULT_BACKGROUND[i] + strength * (scene.background[i] - DEFAULT_BACKGROUND[i])
                });
                scene.color_map = scene.color_map.partial(strength);
            }
            if object_draw < self.variation.object_miss_rate {
                disk = std::array::from_fn(|i| disk[i] + wash * (scene.background[i] - disk[i]));
            }
        }
        Ok(self.world.render(disk, &scene, &key))
    }

    fn inversion_objective(
        &self,
        embedding: &[f64],
        image: &RgbImage,
        template: &str,
        _noise_seed: u64,
    ) -> Result<Objective> {
        self.check_dim(embedding.len())?;
        crate::types::check_template(template)?;
        if image.dimensions() != (self.world.size, self.world.size) {
            return Err(Error::DimensionMismatch {
                context: "toy target image side".into(),
                expected: self.world.size as usize,
                found: image.width() as usize,
            });
        }
        let scene = Scene::from_text(&template.replace(TOKEN_PLACEHOLDER, " "));
        let render = self.world.render_clean(Self::disk_color(embedding), &scene);
        let m = scene.color_map.m;
        let n = (self.world.size * self.world.size) as f64 * 3.0;
        let mut loss = 0.0;
        let mut grad3 = [0.0; 3];
        for ((x, y, pixel), out) in image.enumerate_pixels().zip(&render) {
            let target = pixel_f64(pixel);
            let r: [f64; 3] = std::array::from_fn(|i| out[i] - target[i]);
            loss += r.iter().map(|e| e * e).sum::<f64>();
            if self.world.in_disk(x, y) {
                for (k, g) in grad3.iter_mut().enumerate() {
                    *g += (0..3).map(|i| m[i][k] * r[i]).sum::<f64>();
                }
            }
        }
        let mut gradient = vec![0.0; self.dim];
        for k in 0..3 {
            gradient[k] = 2.0 * grad3[k] / n;
        }
        Ok(Objective {
            loss: loss / n,
            gradient,
        })
    }
}

/// Toy joint image/text embedding.
///
/// Image features: mean RGB, disk RGB, background RGB (each relative to
/// mid-gray), disk/background
/// contrast, grayscale indicator and a constant photo component. Text
/// embeddings sum fixed per-keyword vectors laid out on the same features.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    disk_radius_frac: f64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        ToyEmbedder {
            disk_radius_frac: ToyWorld::default().disk_radius_frac,
        }
    }
}

/// Colour features are measured from mid-gray.
const NEUTRAL: f64 = 0.5;
/// Component every caption shares, whatever its words.
const TEXT_COMMON: f64 = 1.0;
/// Weight of the mean and background blocks relative to the disk block.
const SCENE_WEIGHT: f64 = 0.5;
const F_MEAN: usize = 0;
const F_FG: usize = 3;
const F_BG: usize = 6;
const F_CONTRAST: usize = 9;
const F_GRAY: usize = 10;
const F_PHOTO: usize = 11;

impl ToyEmbedder {
    pub fn new(world: &ToyWorld) -> Self {
        ToyEmbedder {
            disk_radius_frac: world.disk_radius_frac,
        }
    }

    /// Raw (unnormalised) image features.
    pub fn image_features(&self, image: &RgbImage) -> Vec<f64> {
        let size = image.width().min(image.height());
        let (mut all, mut fg, mut bg) = ([0.0; 3], [0.0; 3], [0.0; 3]);
        let (mut n_fg, mut n_bg, mut saturation) = (0usize, 0usize, 0.0);
        for (x, y, p) in image.enumerate_pixels() {
            let c = pixel_f64(p);
            let inside = x < size && y < size && disk_mask(size, self.disk_radius_frac, x, y);
            let acc = if inside {
                n_fg += 1;
                &mut fg
            } else {
                n_bg += 1;
                &mut bg
            };
            for i in 0..3 {
                acc[i] += c[i];
                all[i] += c[i];
            }
            saturation += c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
        }
        let total = (n_fg + n_bg).max(1) as f64;
        let mut f = vec![0.0; TOY_EMBEDDING_DIM];
        for i in 0..3 {
            f[F_MEAN + i] = all[i] / total - NEUTRAL;
            f[F_FG + i] = fg[i] / n_fg.max(1) as f64 - NEUTRAL;
            f[F_BG + i] = bg[i] / n_bg.max(1) as f64 - NEUTRAL;
        }
        f[F_CONTRAST] = (0..3).map(|i| (f[F_FG + i] - f[F_BG + i]).abs()).sum::<f64>() / 3.0;
        f[F_GRAY] = 1.0 - (4.0 * saturation / total).clamp(0.0, 1.0);
        f[F_PHOTO] = 0.5;
        scene_weighted(f)
    }

    /// Fixed basis vector of one word; `None` for words outside the dictionary.
    pub fn word_basis(word: &str) -> Option<Vec<f64>> {
        let mut v = vec![0.0; TOY_EMBEDDING_DIM];
        match word {
            "photo" => v[F_PHOTO] = 1.0,
            "disk" | "object" => v[F_CONTRAST] = 0.5,
            w => {
                if let Some(c) = color_word(w) {
                    for i in 0..3 {
                        v[F_FG + i] = c[i] - NEUTRAL;
                        v[F_MEAN + i] = 0.3 * (c[i] - NEUTRAL);
                    }
                } else {
                    match keyword_effect(w)? {
                        ShiftEffect::Background(g) => {
                            for i in 0..3 {
                                v[F_BG + i] = g[i] - NEUTRAL;
                                v[F_MEAN + i] = 0.5 * (g[i] - NEUTRAL);
                            }
                        }
                        ShiftEffect::Tint { color, .. } => {
                            for i in 0..3 {
                                v[F_MEAN + i] = color[i] - NEUTRAL;
                                v[F_FG + i] = 0.5 * (color[i] - NEUTRAL);
                                v[F_BG + i] = 0.5 * (color[i] - NEUTRAL);
                            }
                        }
                        ShiftEffect::Grayscale => v[F_GRAY] = 1.5,
                    }
                }
            }
        }
        Some(scene_weighted(v))
    }
}

fn scene_weighted(mut v: Vec<f64>) -> Vec<f64> {
    for i in 0..3 {
        v[F_MEAN + i] *= SCENE_WEIGHT;
        v[F_BG + i] *= SCENE_WEIGHT;
    }
    v
}

impl EmbeddingBackend for ToyEmbedder {
    fn backend_id(&self) -> &str {
        TOY_EMBEDDER_ID
    }

    fn dim(&self) -> usize {
        TOY_EMBEDDING_DIM
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::invalid("image", "empty image"));
        }
        Ok(normalize_or(self.image_features(image), F_PHOTO))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; TOY_EMBEDDING_DIM];
        sum[F_PHOTO] = TEXT_COMMON;
        for word in words(text) {
            if let Some(basis) = Self::word_basis(&word) {
                sum.iter_mut().zip(basis).for_each(|(s, b)| *s += b);
            }
        }
        Ok(normalize_or(sum, F_PHOTO))
    }
}

/// Nearest-palette classifier over a mix of the central patch and the whole image.
///
/// `background_mix` is the weight on the whole-image mean; larger values make
/// the model more sensitive to background shifts.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    model_id: String,
    palette: Vec<(u32, [f64; 3])>,
    patch_radius_frac: f64,
    background_mix: f64,
}

impl ToyClassifier {
    pub fn new(world: &ToyWorld, background_mix: f64) -> Self {
        ToyClassifier {
            model_id: format!("toy-mix-{background_mix:.2}"),
            palette: world.classes.iter().map(|(&id, c)| (id, c.color)).collect(),
            patch_radius_frac: world.disk_radius_frac * 0.5,
            background_mix,
        }
    }

    /// `n` models with background mix spread over `[0, 0.6]`.
    pub fn sweep(world: &ToyWorld, n: usize) -> Vec<ToyClassifier> {
        (0..n)
            .map(|i| {
                let mix = if n > 1 { 0.6 * i as f64 / (n - 1) as f64 } else { 0.0 };
                ToyClassifier::new(world, mix)
            })
            .collect()
    }
}

impl ClassifierBackend for ToyClassifier {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn predict(&self, image: &RgbImage) -> Result<u32> {
        let size = image.width().min(image.height());
        let (mut patch, mut all) = ([0.0; 3], [0.0; 3]);
        let (mut n_patch, mut n_all) = (0usize, 0usize);
        for (x, y, p) in image.enumerate_pixels() {
            let c = pixel_f64(p);
            if x < size && y < size && disk_mask(size, self.patch_radius_frac, x, y) {
                n_patch += 1;
                (0..3).for_each(|i| patch[i] += c[i]);
            }
            n_all += 1;
            (0..3).for_each(|i| all[i] += c[i]);
        }
        if n_all == 0 {
            return Err(Error::invalid("image", "empty image"));
        }
        let feature: [f64; 3] = std::array::from_fn(|i| {
            (1.0 - self.background_mix) * patch[i] / n_patch.max(1) as f64 + self.background_mix * all[i] / n_all as f64
        });
        self.palette
            .iter()
            .map(|(id, c)| {
                let d: f64 = (0..3).map(|i| (c[i] - feature[i]).powi(2)).sum();
                (*id, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(id, _)| id)
            .ok_or_else(|| Error::invalid("palette", "classifier has no classes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> ToyGenerator {
        ToyGenerator::new(ToyWorld::with_classes(8), DEFAULT_TEXT_DIM).unwrap()
    }

    fn patch_mean(img: &RgbImage, world: &ToyWorld, inside: bool) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for (x, y, p) in img.enumerate_pixels() {
            if world.in_disk(x, y) == inside {
                let c = pixel_f64(p);
                (0..3).for_each(|i| acc[i] += c[i]);
                n += 1.0;
            }
        }
        acc.map(|a| a / n)
    }

    #[test]
    fn red_token_renders_red_disk() {
        let mut g = generator();
        let mut red = vec![0.0f32; DEFAULT_TEXT_DIM];
        red[0] = 0.5;
        red[1] = -0.5;
        red[2] = -0.5;
        g.register_token("<class-0>", &red).unwrap();
        let img = g.generate("A photo of a <class-0>", 0).unwrap();
        let fg = patch_mean(&img, g.world(), true);
        let amp = g.world().noise_amplitude + 0.5 / 255.0;
        assert!((fg[0] - 1.0).abs() <= amp, "{fg:?}");
        assert!(fg[1] <= amp && fg[2] <= amp, "{fg:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut g = generator();
        g.register_token("<class-1>", &[0.1; DEFAULT_TEXT_DIM]).unwrap();
        let a = g.generate("A photo of a <class-1> in the snow", 7).unwrap();
        let b = g.generate("A photo of a <class-1> in the snow", 7).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        let c = g.generate("A photo of a <class-1> in the snow", 8).unwrap();
        assert_ne!(a.as_raw(), c.as_raw());
    }

    #[test]
    fn snow_background_is_white() {
        let mut g = generator();
        g.register_token("<class-1>", &[0.0; DEFAULT_TEXT_DIM]).unwrap();
        let img = g.generate("A photo of a <class-1> in the snow", 3).unwrap();
        for (x, y, p) in img.enumerate_pixels() {
            if !g.world().in_disk(x, y) {
                let c = pixel_f64(p);
                assert!(c.iter().all(|&v| v >= 1.0 - 0.02 - 0.5 / 255.0), "{c:?}");
            }
        }
    }

    #[test]
    fn two_registered_tokens_rejected() {
        let mut g = generator();
        g.register_token("<class-1>", &[0.0; DEFAULT_TEXT_DIM]).unwrap();
        g.register_token("<class-2>", &[0.0; DEFAULT_TEXT_DIM]).unwrap();
        assert!(g.generate("a <class-1> and a <class-2>", 0).is_err());
    }

    #[test]
    fn wrong_dimension_rejected() {
        let g = generator();
        let img = RgbImage::new(32, 32);
        assert!(matches!(
            g.inversion_objective(&[0.0; 3], &img, "a {token}", 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let e = ToyEmbedder::default();
        let a = e.embed_text("a photo of a plate").unwrap();
        assert_eq!(a, e.embed_text("a photo of a plate").unwrap());
        for v in [
            a,
            e.embed_text("zzz qqq").unwrap(),
            e.embed_image(&RgbImage::new(8, 8)).unwrap(),
        ] {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn red_image_closer_to_red_text() {
        let e = ToyEmbedder::default();
        let img = RgbImage::from_pixel(32, 32, Rgb([255, 0, 0]));
        let iv = e.embed_image(&img).unwrap();
        let dot = |t: &str| {
            let tv = e.embed_text(t).unwrap();
            iv.iter().zip(&tv).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!(dot("red") > dot("blue"));
    }

    #[test]
    fn color_map_composition_matches_sequential_application() {
        let scene = Scene::from_text("a pencil sketch at night in the fog");
        let c = [0.2, 0.7, 0.4];
        let mut expected = c;
        for effect in [
            ShiftEffect::Grayscale,
            keyword_effect("night").unwrap(),
            keyword_effect("fog").unwrap(),
        ] {
            expected = ColorMap::of_effect(&effect).apply(expected);
        }
        let got = scene.color_map.apply(c);
        for i in 0..3 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_recovers_palette() {
        let world = ToyWorld::with_classes(8);
        let clf = ToyClassifier::new(&world, 0.0);
        for id in 0..8 {
            let img = world.dataset_image(id, 1).unwrap();
            assert_eq!(clf.predict(&img).unwrap(), id);
        }
    }
}
