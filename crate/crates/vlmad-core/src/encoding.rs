//! Supervision encoding: freeform text to feature vectors, structured
//! actions to one-hot labels.
//!
//! Text features are stored raw; the temperature softmax in the loss is
//! the sole normalizer.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::annotation::{ActionFamily, ActionVocabulary, FreeformAnnotation, StructuredActionAnnotation};
use crate::error::{Error, Result};
use crate::hash::{fnv1a_with, to_unit_interval, FNV_OFFSET};

/// Default text embedding dimension for the mock encoders.
pub const DEFAULT_MOCK_DIM: usize = 512;

/// Text-to-vector contract. Implementations must be deterministic for a
/// fixed input and emit a constant dimension.
pub trait TextEncoder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn embedding_dim(&self) -> usize;
    fn encoder_id(&self) -> String;
}

/// Mock encoder: `embed(s)[k] = hash(s, k)` mapped to [-1, 1].
pub struct HashTextEncoder {
    pub dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl TextEncoder for HashTextEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::Encoding {
                field: "<text>".into(),
                message: "cannot embed an empty string".into(),
            });
        }
        Ok((0..self.dim)
            .map(|k| {
                let h = fnv1a_with(FNV_OFFSET, text.as_bytes());
                to_unit_interval(fnv1a_with(h, &(k as u64).to_le_bytes()))
            })
            .collect())
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encoder_id(&self) -> String {
        format!("hash-{}", self.dim)
    }
}

/// Bag-of-words variant: mean of per-token hash embeddings, so texts that
/// share most of their words land close together. Used by the synthetic
/// harness, where supervision strings are templated per maneuver class.
pub struct BagOfWordsHashEncoder {
    pub dim: usize,
}

impl BagOfWordsHashEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl TextEncoder for BagOfWordsHashEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::Encoding {
                field: "<text>".into(),
                message: "cannot embed an empty string".into(),
            });
        }
        let word_encoder = HashTextEncoder::new(self.dim);
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            let normalized: String = tok
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            if normalized.is_empty() {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(word_encoder.embed(&normalized)?) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        Ok(acc)
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encoder_id(&self) -> String {
        format!("bow-{}", self.dim)
    }
}

/// Three raw text feature vectors, dimension shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeatureTriple {
    pub y_c: Vec<f64>,
    pub y_f: Vec<f64>,
    pub y_r: Vec<f64>,
}

impl TextFeatureTriple {
    pub fn dim(&self) -> usize {
        self.y_c.len()
    }
}

/// Three one-hot action labels (sizes 4 / 4 / 5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLabelTriple {
    pub y_control: Vec<f64>,
    pub y_turn: Vec<f64>,
    pub y_lane: Vec<f64>,
}

/// Embed the three freeform fields independently. No normalization here.
pub fn encode_freeform(
    ann: &FreeformAnnotation,
    enc: &dyn TextEncoder,
) -> Result<TextFeatureTriple> {
    let embed_field = |name: &str, text: &str| -> Result<Vec<f64>> {
        enc.embed(text).map_err(|e| Error::Encoding {
            field: name.to_string(),
            message: e.to_string(),
        })
    };
    Ok(TextFeatureTriple {
        y_c: embed_field("current_action", &ann.current_action)?,
        y_f: embed_field("future_action", &ann.future_action)?,
        y_r: embed_field("reasoning", &ann.reasoning)?,
    })
}

fn one_hot(labels: &[&'static str], label: &str, family: ActionFamily) -> Result<Vec<f64>> {
    let idx = labels.iter().position(|l| *l == label).ok_or_else(|| Error::Encoding {
        field: family.name().to_string(),
        message: format!("label {label:?} not in vocabulary"),
    })?;
    let mut v = vec![0.0; labels.len()];
    v[idx] = 1.0;
    Ok(v)
}

/// One-hot encode a structured annotation. Index order is the vocabulary's
/// declared (prompt list) order.
pub fn encode_actions(
    ann: &StructuredActionAnnotation,
    vocab: &ActionVocabulary,
) -> Result<ActionLabelTriple> {
    Ok(ActionLabelTriple {
        y_control: one_hot(&vocab.control, &ann.control_action, ActionFamily::Control)?,
        y_turn: one_hot(&vocab.turn, &ann.turn_action, ActionFamily::Turn)?,
        y_lane: one_hot(&vocab.lane, &ann.lane_action, ActionFamily::Lane)?,
    })
}

/// Inverse of the one-hot encoding for one family.
pub fn decode_action(
    one_hot: &[f64],
    family: ActionFamily,
    vocab: &ActionVocabulary,
) -> Result<String> {
    let labels = vocab.labels(family);
    if one_hot.len() != labels.len() {
        return Err(Error::Encoding {
            field: family.name().to_string(),
            message: format!("one-hot length {} != {}", one_hot.len(), labels.len()),
        });
    }
    let ones: Vec<usize> = one_hot
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    if ones.len() != 1 || one_hot.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Encoding {
            field: family.name().to_string(),
            message: "not a one-hot vector".into(),
        });
    }
    Ok(labels[ones[0]].to_string())
}

/// One cached supervision entry, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionEntry {
    pub sample_id: String,
    pub dim: usize,
    pub y_c: Vec<f64>,
    pub y_f: Vec<f64>,
    pub y_r: Vec<f64>,
    pub y_control: Vec<f64>,
    pub y_turn: Vec<f64>,
    pub y_lane: Vec<f64>,
}

pub fn cache_write(path: &Path, entries: &[SupervisionEntry]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn cache_read(path: &Path) -> Result<Vec<SupervisionEntry>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Store(format!("cache line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_encoder_matches_independent_rule() {
        // independent re-implementation of the hash rule
        let oracle = |s: &str, k: usize| -> f64 {
            let mut h: u64 = 0xcbf29ce484222325;
            for &b in s.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for &b in &(k as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (h as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let enc = HashTextEncoder::new(16);
        let v = enc.embed("stop").unwrap();
        for (k, &x) in v.iter().enumerate() {
            assert_eq!(x, oracle("stop", k));
        }
    }

    #[test]
    fn identical_fields_embed_identically() {
        let enc = HashTextEncoder::new(32);
        let ann = FreeformAnnotation {
            current_action: "same".into(),
            future_action: "same".into(),
            reasoning: "same".into(),
        };
        let t = encode_freeform(&ann, &enc).unwrap();
        assert_eq!(t.y_c, t.y_f);
        assert_eq!(t.y_f, t.y_r);
    }

    #[test]
    fn empty_field_is_an_encoding_error() {
        let enc = HashTextEncoder::new(8);
        let ann = FreeformAnnotation {
            current_action: String::new(),
            future_action: "x".into(),
            reasoning: "y".into(),
        };
        let err = encode_freeform(&ann, &enc).unwrap_err();
        assert!(matches!(err, Error::Encoding { ref field, .. } if field == "current_action"));
    }

    #[test]
    fn one_hot_index_order_follows_prompt_lists() {
        let vocab = ActionVocabulary::default();
        let ann = StructuredActionAnnotation {
            control_action: "go straight".into(),
            turn_action: "turn left".into(),
            lane_action: "none".into(),
        };
        let t = encode_actions(&ann, &vocab).unwrap();
        assert_eq!(t.y_control, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.y_turn, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.y_lane, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_13_labels_round_trip() {
        let vocab = ActionVocabulary::default();
        for (family, labels) in [
            (ActionFamily::Control, &vocab.control),
            (ActionFamily::Turn, &vocab.turn),
            (ActionFamily::Lane, &vocab.lane),
        ] {
            for label in labels.iter() {
                let mut ann = StructuredActionAnnotation {
                    control_action: vocab.control[0].into(),
                    turn_action: vocab.turn[0].into(),
                    lane_action: vocab.lane[0].into(),
                };
                match family {
                    ActionFamily::Control => ann.control_action = (*label).into(),
                    ActionFamily::Turn => ann.turn_action = (*label).into(),
                    ActionFamily::Lane => ann.lane_action = (*label).into(),
                }
                let enc = encode_actions(&ann, &vocab).unwrap();
                let hot = match family {
                    ActionFamily::Control => &enc.y_control,
                    ActionFamily::Turn => &enc.y_turn,
                    ActionFamily::Lane => &enc.y_lane,
                };
                assert_eq!(hot.iter().sum::<f64>(), 1.0);
                assert_eq!(decode_action(hot, family, &vocab).unwrap(), *label);
            }
        }
    }

    #[test]
    fn bow_encoder_is_word_order_sensitive_but_class_separable() {
        let enc = BagOfWordsHashEncoder::new(64);
        let a = enc.embed("the vehicle turns left at the junction").unwrap();
        let b = enc.embed("the vehicle turns left at the crossing").unwrap();
        let c = enc.embed("the vehicle stops for a red light now").unwrap();
        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        assert!(dist(&a, &b) < dist(&a, &c));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let entries = vec![SupervisionEntry {
            sample_id: "s0".into(),
            dim: 2,
            y_c: vec![0.1, -0.9],
            y_f: vec![0.2, 0.3],
            y_r: vec![-0.5, 0.5],
            y_control: vec![1.0, 0.0, 0.0, 0.0],
            y_turn: vec![0.0, 0.0, 0.0, 1.0],
            y_lane: vec![0.0, 0.0, 0.0, 0.0, 1.0],
        }];
        cache_write(&path, &entries).unwrap();
        assert_eq!(cache_read(&path).unwrap(), entries);
    }
}
