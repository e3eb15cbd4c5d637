//! Reference configurations.

use crate::flops::calibrate_prompt_tokens;
use crate::model::{DecoderConfig, DecoderShape, ModelError, TokenLayout};
use crate::search::SearchConfig;

/// Fraction of prefill FLOPs left when every visual token is pruned, used to
/// back out the prompt length of the 7B reference layout.
pub const ZERO_VISUAL_RETAINED: f64 = 0.186;

pub const VISUAL_TOKENS_7B: u32 = 576;

/// 32 layers, hidden and key/value width 4096, MLP width 11008.
pub fn llama_7b_shape() -> DecoderShape {
    DecoderShape::new(32, 4096, 4096, 11008).expect("static shape")
}

/// 7B decoder with 576 visual tokens split at `r_percent` and a text prompt
/// whose length is calibrated so that dropping every visual token retains
/// [`ZERO_VISUAL_RETAINED`] of the FLOPs. All non-visual tokens sit in the
/// `text` group.
pub fn vision_7b(r_percent: f64) -> Result<DecoderConfig, ModelError> {
    let shape = llama_7b_shape();
    let text = calibrate_prompt_tokens(&shape, VISUAL_TOKENS_7B as u64, ZERO_VISUAL_RETAINED);
    let layout = TokenLayout::visual_split(0, VISUAL_TOKENS_7B, r_percent, text as u32)?;
    Ok(DecoderConfig::new(shape, layout))
}

/// Search settings used with the 7B reference: danger layer 12, free search
/// over the deeper half, 15 thresholds.
pub fn vision_7b_search() -> SearchConfig {
    SearchConfig {
        danger_layer: 12,
        ..SearchConfig::default()
    }
}
