//! Shift registry: the shipped default table and its JSON persistence.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ShiftSpec, BASE_SHIFT};

// name, template, caption fragment, style, threshold, reference yield (%)
type Row = (&'static str, &'static str, &'static str, bool, Option<f64>, f64);

#[rustfmt::skip]
const DEFAULT_ROWS: [Row; 24] = [
    (BASE_SHIFT,           "A photo of a {token}",                                 "",                                false, None,        92.6),
    ("in_the_grass",       "A photo of a {token} in the grass",                    "in the grass",                    false, Some(0.127), 80.3),
    ("in_the_beach",       "A photo of a {token} in the beach",                    "in the beach",                    false, Some(0.175), 62.9),
    ("in_the_forest",      "A photo of a {token} in the forest",                   "in the forest",                   false, Some(0.153), 67.3),
    ("in_the_water",       "A photo of a {token} in the water",                    "in the water",                    false, Some(0.163), 60.1),
    ("on_the_road",        "A photo of a {token} in the road",                     "on the road",                     false, Some(0.154), 64.5),
    ("on_the_rocks",       "A photo of a {token} in the rocks",                    "on the rocks",                    false, Some(0.124), 76.6),
    ("in_the_snow",        "A photo of a {token} in the snow",                     "in the snow",                     false, Some(0.160), 73.2),
    ("in_the_rain",        "A photo of a {token} in the rain",                     "in the rain",                     false, Some(0.173), 48.3),
    ("in_the_fog",         "A photo of a {token} in the fog",                      "in the fog",                      false, Some(0.152), 59.3),
    ("in_bright_sunlight", "A photo of a {token} in bright sunlight",              "in bright sunlight",              false, Some(0.124), 89.9),
    ("at_dusk",            "A photo of a {token} at dusk",                         "at dusk",                         false, Some(0.158), 61.9),
    ("at_night",           "A photo of a {token} at night",                        "at night",                        false, Some(0.147), 61.1),
    ("studio_lighting",    "A photo of a {token} in studio lighting",              "in studio lighting",              false, Some(0.140), 66.6),
    ("blue",               "A photo of a blue {token}",                            "blue",                            false, Some(0.163), 59.1),
    ("green",              "A photo of a green {token}",                           "green",                           false, Some(0.190), 51.3),
    ("red",                "A photo of a red {token}",                             "red",                             false, Some(0.167), 59.6),
    ("yellow",             "A photo of a yellow {token}",                          "yellow",                          false, Some(0.212), 43.3),
    ("orange",             "A photo of a orange {token}",                          "orange",                          false, Some(0.216), 41.0),
    ("person_and_a",       "A photo of a person and a {token}",                    "of a person",                     false, Some(0.181), 29.9),
    ("and_a_flower",       "A photo of a {token} and a flower",                    "and a flower",                    false, Some(0.148), 61.9),
    ("oil_painting",       "An oil panting of a {token}",                          "an oil painting",                 true,  Some(0.214), 67.2),
    ("pencil_sketch",      "A black and white pencil sketch of a {token}",         "a black and white pencil sketch", true,  Some(0.223), 61.8),
    ("embroidery",         "An embroidery of a {token}",                           "an embroidery",                   true,  Some(0.259), 33.0),
];

/// Base entry plus the 23 benchmark shifts with their filter thresholds.
pub fn default_shift_registry() -> Vec<ShiftSpec> {
    DEFAULT_ROWS
        .iter()
        .map(|&(name, template, fragment, style, threshold, _)| ShiftSpec {
            name: name.to_string(),
            prompt_template: template.to_string(),
            caption_fragment: fragment.to_string(),
            style_flag: style,
            shift_threshold: threshold,
        })
        .collect()
}

/// Percentage of candidates surviving both filters in the ImageNet-scale
/// reference run, for comparison by real-backend smoke runs.
pub fn reference_yield_percent(shift_name: &str) -> Option<f64> {
    DEFAULT_ROWS.iter().find(|row| row.0 == shift_name).map(|row| row.5)
}

/// A validated, name-unique collection of shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRegistry {
    specs: Vec<ShiftSpec>,
}

impl ShiftRegistry {
    pub fn new(specs: Vec<ShiftSpec>) -> Result<Self> {
        let mut names = HashSet::new();
        for spec in &specs {
            spec.validate()?;
            if !names.insert(spec.name.as_str()) {
                return Err(Error::DuplicateShift(spec.name.clone()));
            }
        }
        Ok(ShiftRegistry { specs })
    }

    pub fn default_registry() -> Self {
        ShiftRegistry::new(default_shift_registry()).expect("default registry is valid")
    }

    pub fn get(&self, name: &str) -> Result<&ShiftSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownShift(name.to_string()))
    }

    pub fn base(&self) -> Result<&ShiftSpec> {
        self.get(BASE_SHIFT)
    }

    pub fn specs(&self) -> &[ShiftSpec] {
        &self.specs
    }

    /// Returns a new registry with `name`'s threshold replaced.
    pub fn with_threshold(&self, name: &str, threshold: f64) -> Result<Self> {
        self.get(name)?;
        let specs = self
            .specs
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if s.name == name {
                    s.shift_threshold = Some(threshold);
                }
                s
            })
            .collect();
        ShiftRegistry::new(specs)
    }

    /// Appends an ad-hoc shift, as formed from free text.
    pub fn with_spec(&self, spec: ShiftSpec) -> Result<Self> {
        let mut specs = self.specs.clone();
        specs.push(spec);
        ShiftRegistry::new(specs)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.specs)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        ShiftRegistry::new(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
