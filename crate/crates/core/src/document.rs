//! Structured-text document encoding shared by config files, control-plane
//! messages and metrics exports.
//!
//! Documents are JSON trees whose field names match the Rust type fields.
//! Decoding errors carry the path of the offending field.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("document error at `{path}`: {message}")]
pub struct DocumentError {
    pub path: String,
    pub message: String,
}

/// Encodes a value as a pretty-printed document.
pub fn to_document<T: Serialize + ?Sized>(value: &T) -> String {
    // Every type in this crate serializes infallibly (string map keys only).
    serde_json::to_string_pretty(value).expect("document encoding is infallible")
}

/// Encodes a value as a document tree.
pub fn to_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("document encoding is infallible")
}

/// Decodes a document, reporting the field path on failure.
pub fn from_document<T: DeserializeOwned>(text: &str) -> Result<T, DocumentError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| DocumentError {
        path: display_path(&err.path().to_string()),
        message: err.inner().to_string(),
    })
}

/// Decodes a value out of an already parsed document tree.
pub fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, DocumentError> {
    serde_path_to_error::deserialize(value).map_err(|err| DocumentError {
        path: display_path(&err.path().to_string()),
        message: err.into_inner().to_string(),
    })
}

fn display_path(path: &str) -> String {
    if path == "." || path.is_empty() {
        "$".to_string()
    } else {
        path.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Inner {
        value: u32,
    }

    #[derive(Debug, Deserialize)]
    #[allow(dead_code)]
    struct Outer {
        items: Vec<Inner>,
    }

    #[test]
    fn error_names_the_field_path() {
        let err = from_document::<Outer>(r#"{"items":[{"value":1},{"value":"x"}]}"#).unwrap_err();
        assert_eq!(err.path, "items[1].value");
    }

    #[test]
    fn unknown_field_is_reported() {
        let err = from_document::<Outer>(r#"{"items":[{"value":1,"bogus":2}]}"#).unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
    }
}
