//! Data types and file formats: masks, sample bundles and checkpoints.

mod bundle;
mod checkpoint;
mod rle;

pub use bundle::{
    bundle_to_json, load_bundles, parse_bundle, read_bundles_file, write_bundles,
    write_bundles_file, GroundTruth, HandEntry, HandSide, ObjectProposal, PhraseEntry,
    SampleBundle, VisualView,
};
pub(crate) use bundle::RleWire;
pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, AdapterKind, ModelState, PerAdapter, CHECKPOINT_VERSION,
};
pub use rle::{
    decode_rle, encode_rle, mask_intersection_area, mask_iou, mask_union_area, rect_mask, RleMask,
};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Result, WishError};

/// Little-endian `f32` payload, base64 encoded. Values are rounded to single
/// precision on the way out.
pub fn encode_f32_b64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32_b64(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| WishError::Corrupt(format!("base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(WishError::Corrupt(format!(
            "{} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(WishError::NonFinite("embedding payload"));
    }
    Ok(values)
}
