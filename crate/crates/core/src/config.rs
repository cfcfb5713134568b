use std::fmt;

use serde::{Deserialize, Serialize};

/// A validation problem attached to a config field path such as `generators[0].top_p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Config file or body that could not be turned into a typed config.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {}", crate::builder::join_issues(.0))]
    Invalid(Vec<FieldError>),
}

fn serde_field(path: &str) -> String {
    if path == "." || path.is_empty() {
        "(root)".to_string()
    } else {
        path.to_string()
    }
}

/// Deserializes a JSON value, reporting the failing field path.
pub fn from_value<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T, Vec<FieldError>> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = serde_field(&e.path().to_string());
        vec![FieldError::new(field, e.into_inner().to_string())]
    })
}

/// Parses TOML text, reporting the failing field path.
pub fn from_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, Vec<FieldError>> {
    let de = toml::Deserializer::parse(text).map_err(|e| vec![FieldError::new("(toml)", e.message().to_string())])?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = serde_field(&e.path().to_string());
        vec![FieldError::new(field, e.into_inner().message().to_string())]
    })
}

/// Loads a `.json` or TOML config file.
pub fn load_file<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| vec![FieldError::new("(json)", e.to_string())])
            .and_then(from_value)
    } else {
        from_toml(&text)
    };
    parsed.map_err(ConfigError::Invalid)
}
