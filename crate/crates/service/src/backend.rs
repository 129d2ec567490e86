use std::fmt;
use std::str::FromStr;

use shiftkit::backends::toy::{ToyEmbedder, ToyGenerator, ToyVariation, ToyWorld, DEFAULT_TEXT_DIM};
use shiftkit::backends::{EmbeddingBackend, GenerativeBackend};
use shiftkit::ClassToken;

use crate::adapter::{RemoteEmbedder, RemoteGenerator};
use crate::error::{Result, ServiceError};

/// Number of palette classes in the toy world used by the toy backends.
pub const TOY_CLASSES: usize = 8;

/// Sample imperfection of the toy generator, so filtering has something to reject.
pub const TOY_VARIATION: ToyVariation = ToyVariation {
    shift_miss_rate: 0.3,
    object_miss_rate: 0.15,
};

/// Which backend pair the pipeline runs on: the built-in toy, or an adapter URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Toy,
    Adapter(String),
}

impl FromStr for BackendChoice {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendChoice::Toy),
            _ => match s.strip_prefix("adapter:") {
                Some(url) if url.starts_with("http://") => Ok(BackendChoice::Adapter(url.to_string())),
                _ => Err(ServiceError::invalid(
                    "backend",
                    format!("{s:?}: expected \"toy\" or \"adapter:http://host:port\""),
                )),
            },
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Toy => f.write_str("toy"),
            BackendChoice::Adapter(url) => write!(f, "adapter:{url}"),
        }
    }
}

pub fn toy_world() -> ToyWorld {
    ToyWorld::with_classes(TOY_CLASSES)
}

impl BackendChoice {
    pub fn generator(&self) -> Result<Box<dyn GenerativeBackend>> {
        Ok(match self {
            BackendChoice::Toy => {
                Box::new(ToyGenerator::new(toy_world(), DEFAULT_TEXT_DIM)?.with_variation(TOY_VARIATION)?)
            }
            BackendChoice::Adapter(url) => Box::new(RemoteGenerator::connect(url)?),
        })
    }

    /// A generator with every token of `library` registered.
    pub fn generator_with(&self, library: &[ClassToken]) -> Result<Box<dyn GenerativeBackend>> {
        let mut g = self.generator()?;
        for t in library {
            if !g.has_token(&t.token_string) {
                g.register_token(&t.token_string, &t.embedding)?;
            }
        }
        Ok(g)
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingBackend>> {
        Ok(match self {
            BackendChoice::Toy => Box::new(ToyEmbedder::new(&toy_world())),
            BackendChoice::Adapter(url) => Box::new(RemoteEmbedder::connect(url)?),
        })
    }
}
