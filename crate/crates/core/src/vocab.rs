//! Fixed 64-token vocabulary shared by the text encoder, the synthetic corpus
//! and the pseudo-prompt strategies.

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 64;

/// Prepended to every non-empty prompt.
pub const BOS: TokenId = 0;
/// The empty prompt encodes to this single token.
pub const NULL: TokenId = 1;

pub const FIRST_TRIGGER: TokenId = 2;
pub const TRIGGER_COUNT: usize = 20;
pub const FIRST_ATTRIBUTE: TokenId = FIRST_TRIGGER + TRIGGER_COUNT as TokenId;
pub const ATTRIBUTE_COUNT: usize = VOCAB_SIZE - 2 - TRIGGER_COUNT;

/// Attribute words, in token order starting at [`FIRST_ATTRIBUTE`].
pub const ATTRIBUTE_WORDS: [&str; ATTRIBUTE_COUNT] = [
    // shapes
    "disk", "cross", "bar", "ring", "checker",
    // scale buckets
    "small", "medium", "large",
    // texture buckets
    "smooth", "striped", "rippled",
    // intensity buckets
    "dim", "bright", "vivid",
    // free-form style words
    "natural lighting", "portrait", "photorealistic", "best quality", "realistic",
    "ultra detailed", "standing", "highres", "detailed face", "solo", "masterpiece",
    "outdoors", "film grain", "illustration", "soft light", "raw photo", "street",
    "from side", "looking at viewer", "sitting", "centered", "symmetric", "sharp",
    "minimal", "monochrome", "glowing", "high contrast", "studio",
];

pub const SHAPE_TOKENS: TokenId = FIRST_ATTRIBUTE;
pub const SCALE_TOKENS: TokenId = FIRST_ATTRIBUTE + 5;
pub const TEXTURE_TOKENS: TokenId = FIRST_ATTRIBUTE + 8;
pub const INTENSITY_TOKENS: TokenId = FIRST_ATTRIBUTE + 11;
pub const STYLE_TOKENS: TokenId = FIRST_ATTRIBUTE + 14;
pub const STYLE_COUNT: usize = ATTRIBUTE_COUNT - 14;

pub fn trigger(index: usize) -> TokenId {
    assert!(index < TRIGGER_COUNT, "trigger index {index} out of range");
    FIRST_TRIGGER + index as TokenId
}

pub fn is_trigger(tok: TokenId) -> bool {
    (FIRST_TRIGGER..FIRST_ATTRIBUTE).contains(&tok)
}

pub fn is_attribute(tok: TokenId) -> bool {
    (FIRST_ATTRIBUTE..VOCAB_SIZE as TokenId).contains(&tok)
}

pub fn word(tok: TokenId) -> String {
    match tok {
        BOS => "[BOS]".into(),
        NULL => "[NULL]".into(),
        t if is_trigger(t) => format!("<sks{}>", t - FIRST_TRIGGER),
        t if is_attribute(t) => ATTRIBUTE_WORDS[(t - FIRST_ATTRIBUTE) as usize].into(),
        t => format!("<unk{t}>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_vocab() {
        assert_eq!(ATTRIBUTE_COUNT, 42);
        assert_eq!(STYLE_TOKENS as usize + STYLE_COUNT, VOCAB_SIZE);
        let triggers = (0..VOCAB_SIZE as TokenId).filter(|t| is_trigger(*t)).count();
        let attrs = (0..VOCAB_SIZE as TokenId).filter(|t| is_attribute(*t)).count();
        assert_eq!(triggers + attrs + 2, VOCAB_SIZE);
        assert_eq!(word(trigger(3)), "<sks3>");
        assert_eq!(word(FIRST_ATTRIBUTE), "disk");
    }
}
