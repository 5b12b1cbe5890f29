//! The report grammar:
//!
//! ```text
//! report   := sentence* "no other findings ."
//! sentence := "there is a" SIZE KIND "in the" VERT HORIZ "."
//! ```
//!
//! Sentences appear in quadrant order (upper left, upper right, lower left,
//! lower right), which makes the grammar invertible.

use super::scene::{PlacedShape, Quadrant, SceneSpec, ShapeKind, ShapeSize};
use crate::error::{Error, Result};

pub const CLOSING: &str = "no other findings .";
pub const SENTENCE_TOKENS: usize = 10;
pub const CLOSING_TOKENS: usize = 4;

/// Deterministic report text for a scene.
pub fn templatize(scene: &SceneSpec) -> String {
    let mut shapes = scene.shapes.clone();
    shapes.sort();
    let mut out = String::new();
    for s in &shapes {
        out.push_str(&format!("there is a {s} . "));
    }
    out.push_str(CLOSING);
    out
}

/// Token count of the report for a scene with `shapes` shapes.
pub fn report_len(shapes: usize) -> usize {
    shapes * SENTENCE_TOKENS + CLOSING_TOKENS
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Contract(format!("report outside grammar: {}", msg.into()))
}

/// Inverse of [`templatize`]: recovers the scene (with seed 0) or rejects text
/// that the grammar cannot produce.
pub fn parse_report(text: &str) -> Result<SceneSpec> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut shapes: Vec<PlacedShape> = Vec::new();
    let mut rest = &tokens[..];
    loop {
        match rest {
            ["no", "other", "findings", "."] => break,
            ["there", "is", "a", size, kind, "in", "the", vert, horiz, ".", tail @ ..] => {
                let size = ShapeSize::ALL
                    .into_iter()
                    .find(|s| s.word() == *size)
                    .ok_or_else(|| parse_err(format!("size {size:?}")))?;
                let kind = ShapeKind::ALL
                    .into_iter()
                    .find(|k| k.word() == *kind)
                    .ok_or_else(|| parse_err(format!("kind {kind:?}")))?;
                let quadrant = Quadrant::ALL
                    .into_iter()
                    .find(|q| q.words() == (*vert, *horiz))
                    .ok_or_else(|| parse_err(format!("quadrant {vert:?} {horiz:?}")))?;
                if shapes.last().is_some_and(|last| last.quadrant >= quadrant) {
                    return Err(parse_err("sentences out of quadrant order"));
                }
                shapes.push(PlacedShape { quadrant, kind, size });
                rest = tail;
            }
            _ => return Err(parse_err(format!("unexpected tokens {rest:?}"))),
        }
    }
    SceneSpec::new(shapes, 0).map_err(|e| parse_err(e.to_string()))
}
