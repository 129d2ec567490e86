//! Prompt rendering and candidate generation.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::GenerativeBackend;
use crate::error::{Error, Result};
use crate::registry::ShiftRegistry;
use crate::types::{check_template, ClassToken, CounterfactualSample, ShiftSpec, TOKEN_PLACEHOLDER};

pub fn render_prompt(spec: &ShiftSpec, token: &ClassToken) -> Result<String> {
    render_template(&spec.prompt_template, &token.token_string)
}

pub fn render_template(template: &str, token_string: &str) -> Result<String> {
    check_template(template)?;
    Ok(template.replacen(TOKEN_PLACEHOLDER, token_string, 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub class_id: u32,
    pub shift_name: String,
    pub n: usize,
    pub base_seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self, registry: &ShiftRegistry, library: &[ClassToken]) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if self.base_seed.checked_add(self.n as u64 - 1).is_none() {
            return Err(Error::invalid("base_seed", "seed schedule overflows"));
        }
        registry.get(&self.shift_name)?;
        find_token(library, self.class_id)?;
        Ok(())
    }
}

pub fn find_token(library: &[ClassToken], class_id: u32) -> Result<&ClassToken> {
    library
        .iter()
        .find(|t| t.class_id == class_id)
        .ok_or(Error::UnknownClass(class_id))
}

/// A sample record together with its pixels (absent for failed generations).
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: CounterfactualSample,
    pub image: Option<RgbImage>,
}

pub fn image_ref_for(sample_id: &str) -> String {
    format!("{sample_id}.png")
}

/// Generates `request.n` candidates with seeds `base_seed..base_seed + n`, in seed order.
pub fn generate_batch<B: GenerativeBackend + ?Sized>(
    request: &GenerationRequest,
    registry: &ShiftRegistry,
    library: &[ClassToken],
    backend: &B,
) -> Result<Vec<GeneratedSample>> {
    request.validate(registry, library)?;
    let spec = registry.get(&request.shift_name)?;
    let token = find_token(library, request.class_id)?;
    if !backend.has_token(&token.token_string) {
        return Err(Error::Backend(format!(
            "token {} is not registered with {}",
            token.token_string,
            backend.backend_id()
        )));
    }
    let prompt = render_prompt(spec, token)?;
    let out: Vec<GeneratedSample> = (0..request.n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = request.base_seed + i;
            let sample_id = CounterfactualSample::sample_id_for(&spec.name, request.class_id, seed);
            let (image, failure) = match backend.generate(&prompt, seed) {
                Ok(img) => (Some(img), None),
                Err(e) => (None, Some(e.to_string())),
            };
            GeneratedSample {
                sample: CounterfactualSample {
                    image_ref: image_ref_for(&sample_id),
                    sample_id,
                    class_id: request.class_id,
                    shift_name: spec.name.clone(),
                    seed,
                    prompt: prompt.clone(),
                    sim_class: None,
                    sim_shift: None,
                    kept: None,
                    failure,
                },
                image,
            }
        })
        .collect();
    if out.iter().all(|s| s.image.is_none()) {
        return Err(Error::AllFailed(out.len()));
    }
    Ok(out)
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

/// Directory of `<sample_id>.png` images with `<sample_id>.json` sidecars.
#[derive(Debug, Clone)]
pub struct SampleStore {
    root: PathBuf,
}

impl SampleStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SampleStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn sidecar_path(&self, sample_id: &str) -> PathBuf {
        self.root.join(format!("{sample_id}.json"))
    }

    pub fn image_path(&self, sample: &CounterfactualSample) -> PathBuf {
        self.root.join(&sample.image_ref)
    }

    /// Writes images and sidecars; existing identical files are left untouched,
    /// differing ones are an error.
    pub fn write(&self, samples: &[GeneratedSample]) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for s in samples {
            if let Some(img) = &s.image {
                write_once(&self.image_path(&s.sample), &encode_png(img)?)?;
            }
            let json = serde_json::to_vec_pretty(&s.sample)?;
            write_once(&self.sidecar_path(&s.sample.sample_id), &json)?;
        }
        Ok(())
    }

    pub fn read_sample(&self, sample_id: &str) -> Result<CounterfactualSample> {
        let path = self.sidecar_path(sample_id);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::UnknownSample(sample_id.to_string())),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn read_image(&self, sample: &CounterfactualSample) -> Result<RgbImage> {
        let path = self.image_path(sample);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_png(&bytes)
    }

    /// Every sidecar in the store, ordered by (shift, class, seed).
    pub fn list(&self) -> Result<Vec<CounterfactualSample>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.root, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push(serde_json::from_slice::<CounterfactualSample>(&bytes)?);
            }
        }
        out.sort_by(|a, b| (&a.shift_name, a.class_id, a.seed).cmp(&(&b.shift_name, b.class_id, b.seed)));
        Ok(out)
    }
}

/// Additive write: creates `path`, or verifies it already holds `bytes`.
pub fn write_once(path: &Path, bytes: &[u8]) -> Result<()> {
    match fs::read(path) {
        Ok(existing) if existing == bytes => Ok(()),
        Ok(_) => Err(Error::invalid(
            "path",
            format!("{} exists with different content", path.display()),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let tmp = path.with_extension("partial");
            {
                use std::io::Write;
                let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
                let mut w = BufWriter::new(file);
                w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
                w.flush().map_err(|e| Error::io(&tmp, e))?;
            }
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}
