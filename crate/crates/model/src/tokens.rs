use serde::{Deserialize, Serialize};
use skilledit_core::MaskSpan;

use crate::error::{ModelError, Result};

/// Per-frame codebook indices, one per book.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub clip_id: String,
    pub tokens: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<MaskSpan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks that every frame has `books` indices below `codes`.
    pub fn validate(&self, books: usize, codes: usize) -> Result<()> {
        for (t, tup) in self.tokens.iter().enumerate() {
            if tup.len() != books {
                return Err(ModelError::InvalidArgument(format!(
                    "frame {t} has {} indices, expected {books}",
                    tup.len()
                )));
            }
            if let Some(&bad) = tup.iter().find(|&&k| k >= codes) {
                return Err(ModelError::InvalidArgument(format!(
                    "frame {t} index {bad} outside codebook of {codes}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("token sequences always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ModelError::InvalidArgument(format!("token JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let t = TokenSequence { clip_id: "a".into(), tokens: vec![vec![1, 2], vec![3, 0]], span: None };
        assert_eq!(t.to_json(), r#"{"clip_id":"a","tokens":[[1,2],[3,0]]}"#);
        assert_eq!(TokenSequence::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn validation() {
        let t = TokenSequence { clip_id: "a".into(), tokens: vec![vec![1, 2], vec![3]], span: None };
        assert!(t.validate(2, 4).is_err());
        let t = TokenSequence { clip_id: "a".into(), tokens: vec![vec![1, 4]], span: None };
        assert!(t.validate(2, 4).is_err());
    }
}
