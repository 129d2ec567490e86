//! Domain records shared by every stage of the pipeline.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the shift-free entry in every registry.
pub const BASE_SHIFT: &str = "base";

/// Placeholder that every prompt template must contain exactly once.
pub const TOKEN_PLACEHOLDER: &str = "{token}";

/// How a class token was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub backend_id: String,
    pub created_at: DateTime<Utc>,
}

/// A learned text-space embedding standing in for one dataset class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassToken {
    pub class_id: u32,
    pub class_label: String,
    pub token_string: String,
    pub embedding: Vec<f32>,
    pub provenance: Provenance,
}

impl ClassToken {
    /// `<slug-id>`; the angle brackets keep token strings out of natural vocabulary.
    pub fn token_string_for(slug: &str, class_id: u32) -> String {
        format!("<{slug}-{class_id}>")
    }

    pub fn validate(&self) -> Result<()> {
        validate_token_string(&self.token_string)?;
        if let Some(i) = self.embedding.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(
                "embedding",
                format!("{}: component {i} is not finite", self.token_string),
            ));
        }
        Ok(())
    }
}

pub fn validate_token_string(token: &str) -> Result<()> {
    let ok = token.len() > 2
        && token.starts_with('<')
        && token.ends_with('>')
        && !token[1..token.len() - 1].contains(['<', '>'])
        && !token.chars().any(char::is_whitespace);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            "token_string",
            format!("{token:?} must look like <name> without whitespace"),
        ))
    }
}

/// A named distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub name: String,
    pub prompt_template: String,
    pub caption_fragment: String,
    pub style_flag: bool,
    #[serde(rename = "threshold")]
    pub shift_threshold: Option<f64>,
}

impl ShiftSpec {
    pub fn is_base(&self) -> bool {
        self.name == BASE_SHIFT
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("name", "shift name is empty"));
        }
        // names become file and sample-id components
        if !self
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::invalid(
                "name",
                format!("{:?} may only contain ASCII letters, digits, '_' and '-'", self.name),
            ));
        }
        check_template(&self.prompt_template)?;
        if let Some(t) = self.shift_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::invalid(
                    "threshold",
                    format!("{}: {t} outside [-1, 1]", self.name),
                ));
            }
        }
        Ok(())
    }
}

/// Rejects templates that do not contain the placeholder exactly once.
pub fn check_template(template: &str) -> Result<()> {
    match template.matches(TOKEN_PLACEHOLDER).count() {
        1 => Ok(()),
        0 => Err(Error::InvalidTemplate {
            template: template.to_string(),
            reason: "missing {token} placeholder".into(),
        }),
        n => Err(Error::InvalidTemplate {
            template: template.to_string(),
            reason: format!("{{token}} appears {n} times"),
        }),
    }
}

/// Captions used to score object presence and shift presence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub c_class: String,
    pub c_shift: Option<String>,
}

/// One generated image and everything known about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub sample_id: String,
    pub image_ref: String,
    pub class_id: u32,
    pub shift_name: String,
    pub seed: u64,
    pub prompt: String,
    pub sim_class: Option<f64>,
    pub sim_shift: Option<f64>,
    pub kept: Option<bool>,
    /// Set when generation or scoring failed; such samples count toward yield denominators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CounterfactualSample {
    pub fn sample_id_for(shift_name: &str, class_id: u32, seed: u64) -> String {
        format!("{shift_name}__c{class_id}__s{seed}")
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn is_scored(&self, base: bool) -> bool {
        self.sim_class.is_some() && (base || self.sim_shift.is_some())
    }
}

/// Per-class object-presence threshold and how it was derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub class_id: u32,
    pub value: f64,
    pub percentile: f64,
    pub n_reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldStats {
    pub total: usize,
    pub kept: usize,
    pub yield_fraction: Option<f64>,
}

impl YieldStats {
    pub fn new(total: usize, kept: usize) -> Self {
        debug_assert!(kept <= total);
        YieldStats {
            total,
            kept,
            yield_fraction: (total > 0).then(|| kept as f64 / total as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_string_convention() {
        let s = ClassToken::token_string_for("class", 207);
        assert_eq!(s, "<class-207>");
        validate_token_string(&s).unwrap();
        assert!(validate_token_string("plate").is_err());
        assert!(validate_token_string("<a b>").is_err());
        assert!(validate_token_string("<>").is_err());
    }

    #[test]
    fn template_placeholder_count() {
        check_template("A photo of a {token}").unwrap();
        assert!(check_template("A photo").is_err());
        assert!(check_template("{token} and {token}").is_err());
    }

    #[test]
    fn threshold_range() {
        let mut spec = ShiftSpec {
            name: "x".into(),
            prompt_template: "a {token}".into(),
            caption_fragment: "x".into(),
            style_flag: false,
            shift_threshold: Some(1.5),
        };
        assert!(spec.validate().is_err());
        spec.shift_threshold = Some(-1.0);
        spec.validate().unwrap();
    }

    #[test]
    fn yield_undefined_on_empty() {
        assert_eq!(YieldStats::new(0, 0).yield_fraction, None);
        assert_eq!(YieldStats::new(10, 7).yield_fraction, Some(0.7));
    }
}
