//! Two-step tokenization: the prompt goes through the provider's ordinary
//! tokenizer, subpixel values go through a 256-entry lookup table that maps
//! each value to the single vocabulary token spelling its decimal form.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{OrderingMode, SymbolSequence};

/// Token identifier in a provider vocabulary.
pub type TokenId = u32;

/// Default task prompt for channel-joint coding.
pub const JOINT_PROMPT: &str = "Every three values denote an RGB pixel of a flattened image. \
Predict the next RGB pixel based on the previous pixels.";

/// Default task prompt for channel-independent coding. The `R/G/B` marker is
/// replaced by the coded channel's letter when a session starts.
pub const INDEPENDENT_PROMPT: &str = "R/G/B channel of a flattened RGB image. \
Predict the next sub-pixel based on previous sub-pixels.";

const CHANNEL_MARKER: &str = "R/G/B";

/// First 8 bytes (little-endian) of the SHA-256 digest.
pub fn fingerprint64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Bijection between subpixel values and vocabulary token IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitalTokenMap {
    forward: [TokenId; 256],
    inverse: HashMap<TokenId, u8>,
}

impl DigitalTokenMap {
    /// Probes `vocab_probe` with the decimal string of every value 0..=255.
    pub fn build<F>(mut vocab_probe: F) -> Result<Self>
    where
        F: FnMut(&str) -> Vec<TokenId>,
    {
        let mut forward = [0; 256];
        for (z, slot) in forward.iter_mut().enumerate() {
            let ids = vocab_probe(&z.to_string());
            match ids.as_slice() {
                [id] => *slot = *id,
                _ => {
                    return Err(Error::TokenizerUnsuitable(format!(
                        "value {z} tokenizes to {} tokens {ids:?}, expected exactly one",
                        ids.len()
                    )))
                }
            }
        }
        Self::from_ids(forward)
    }

    /// Validates an already gathered list of 256 token IDs.
    pub fn from_ids(forward: [TokenId; 256]) -> Result<Self> {
        let mut inverse = HashMap::with_capacity(256);
        for (z, &id) in forward.iter().enumerate() {
            if let Some(prev) = inverse.insert(id, z as u8) {
                return Err(Error::TokenizerUnsuitable(format!(
                    "values {prev} and {z} share token id {id}"
                )));
            }
        }
        Ok(Self { forward, inverse })
    }

    /// The map used by built-in providers: token ID equals the value.
    pub fn identity() -> Self {
        let mut forward = [0; 256];
        for (z, slot) in forward.iter_mut().enumerate() {
            *slot = z as TokenId;
        }
        Self::from_ids(forward).expect("identity map is bijective")
    }

    pub fn forward(&self, value: u8) -> TokenId {
        self.forward[value as usize]
    }

    pub fn forward_ids(&self) -> &[TokenId; 256] {
        &self.forward
    }

    pub fn inverse(&self, id: TokenId) -> Option<u8> {
        self.inverse.get(&id).copied()
    }

    /// 64-bit hash of the 256 forward IDs, stored in container headers.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(256 * 4);
        for id in &self.forward {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        fingerprint64(&bytes)
    }
}

/// Task prompt prepended to each coded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    pub text: String,
    pub enabled: bool,
}

impl PromptConfig {
    pub fn disabled() -> Self {
        Self {
            text: String::new(),
            enabled: false,
        }
    }

    pub fn custom(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            enabled: true,
        }
    }

    /// The stock prompt for an ordering mode.
    pub fn default_for(mode: OrderingMode) -> Self {
        match mode {
            OrderingMode::ChannelJoint => Self::custom(JOINT_PROMPT),
            OrderingMode::ChannelIndependent => Self::custom(INDEPENDENT_PROMPT),
        }
    }

    /// Text actually installed in a session: empty when disabled, with the
    /// `R/G/B` marker narrowed to one letter for per-channel sessions.
    pub fn effective_text(&self, channel: Option<u8>) -> String {
        if !self.enabled {
            return String::new();
        }
        match channel {
            Some(k) if self.text.contains(CHANNEL_MARKER) => {
                let letter = ["R", "G", "B"].get(k as usize).copied().unwrap_or("R/G/B");
                self.text.replacen(CHANNEL_MARKER, letter, 1)
            }
            _ => self.text.clone(),
        }
    }

    /// The form stored in container headers; empty means disabled.
    pub fn header_text(&self) -> &str {
        if self.enabled {
            &self.text
        } else {
            ""
        }
    }

    pub fn from_header_text(text: &str) -> Self {
        if text.is_empty() {
            Self::disabled()
        } else {
            Self::custom(text)
        }
    }
}

/// Prompt tokens followed by symbol tokens, with no separators between symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedContext {
    pub prompt_ids: Vec<TokenId>,
    pub symbol_ids: Vec<TokenId>,
}

impl TokenizedContext {
    pub fn len(&self) -> usize {
        self.prompt_ids.len() + self.symbol_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full(&self) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(self.len());
        ids.extend_from_slice(&self.prompt_ids);
        ids.extend_from_slice(&self.symbol_ids);
        ids
    }
}

pub fn tokenize_context<F>(
    prompt: &PromptConfig,
    seq: &SymbolSequence,
    map: &DigitalTokenMap,
    prompt_tokenizer: F,
) -> TokenizedContext
where
    F: FnOnce(&str) -> Vec<TokenId>,
{
    let text = prompt.effective_text(seq.channel);
    let prompt_ids = if text.is_empty() {
        Vec::new()
    } else {
        prompt_tokenizer(&text)
    };
    TokenizedContext {
        prompt_ids,
        symbol_ids: seq.symbols.iter().map(|&s| map.forward(s)).collect(),
    }
}

pub fn detokenize_symbols(ids: &[TokenId], map: &DigitalTokenMap) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            map.inverse(id).ok_or_else(|| {
                Error::CorruptStream(format!("token id {id} is not a digital token"))
            })
        })
        .collect()
}

/// Word-level tokenizer used by the built-in providers for prompt text: runs of
/// alphanumerics form one token, every other non-space character is its own
/// token. IDs start at 256 so they never collide with the identity map.
pub fn word_tokenize(text: &str) -> Vec<TokenId> {
    let mut ids = Vec::new();
    let mut word = String::new();
    let push = |w: &str, ids: &mut Vec<TokenId>| {
        ids.push(256 + (fingerprint64(w.as_bytes()) % (1 << 20)) as TokenId);
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            push(&word, &mut ids);
            word.clear();
        }
        if !ch.is_whitespace() {
            push(ch.encode_utf8(&mut [0; 4]), &mut ids);
        }
    }
    if !word.is_empty() {
        push(&word, &mut ids);
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(symbols: Vec<u8>) -> SymbolSequence {
        SymbolSequence {
            symbols,
            ordering: OrderingMode::ChannelJoint,
            channel: None,
        }
    }

    #[test]
    fn identity_map() {
        let m = DigitalTokenMap::identity();
        for z in 0..=255u8 {
            assert_eq!(m.forward(z), z as u32);
            assert_eq!(m.inverse(z as u32), Some(z));
        }
        assert_eq!(m.inverse(256), None);
    }

    #[test]
    fn build_from_probe() {
        let m = DigitalTokenMap::build(|s| vec![1000 + s.parse::<u32>().unwrap() * 3]).unwrap();
        assert_eq!(m.forward(0), 1000);
        assert_eq!(m.forward(255), 1765);
        assert_eq!(m.inverse(1003), Some(1));
    }

    #[test]
    fn multi_token_value_rejected() {
        let err = DigitalTokenMap::build(|s| {
            if s == "255" {
                vec![2, 55]
            } else {
                vec![s.parse().unwrap()]
            }
        })
        .unwrap_err();
        match err {
            Error::TokenizerUnsuitable(msg) => assert!(msg.contains("255"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        // values 254 and 255 collapse onto one token
        let err = DigitalTokenMap::build(|s| vec![s.parse::<u32>().unwrap().min(254)]);
        assert!(matches!(err, Err(Error::TokenizerUnsuitable(_))));
    }

    #[test]
    fn fingerprint_tracks_ids() {
        let a = DigitalTokenMap::identity();
        let b = DigitalTokenMap::build(|s| vec![s.parse::<u32>().unwrap() + 1]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), DigitalTokenMap::identity().fingerprint());
    }

    #[test]
    fn empty_prompt_context() {
        let ctx = tokenize_context(
            &PromptConfig::disabled(),
            &seq(vec![10, 255]),
            &DigitalTokenMap::identity(),
            |_| panic!("tokenizer must not run for a disabled prompt"),
        );
        assert!(ctx.prompt_ids.is_empty());
        assert_eq!(ctx.symbol_ids, vec![10, 255]);
    }

    #[test]
    fn nineteen_token_prompt_plus_patch() {
        // a provider tokenizer that splits the stock prompt into 19 tokens
        let ctx = tokenize_context(
            &PromptConfig::default_for(OrderingMode::ChannelJoint),
            &seq(vec![0; 768]),
            &DigitalTokenMap::identity(),
            |_| (0..19).map(|i| 10_000 + i).collect(),
        );
        assert_eq!(ctx.prompt_ids.len(), 19);
        assert_eq!(ctx.len(), 787);
        assert_eq!(&ctx.full()[..19], &ctx.prompt_ids[..]);
    }

    #[test]
    fn per_channel_prompt_variant() {
        let p = PromptConfig::default_for(OrderingMode::ChannelIndependent);
        assert!(p.effective_text(Some(1)).starts_with("G channel of"));
        assert!(p.effective_text(None).starts_with("R/G/B channel of"));
        assert_eq!(PromptConfig::disabled().effective_text(Some(0)), "");
    }

    #[test]
    fn detokenize_examples() {
        let m = DigitalTokenMap::identity();
        assert_eq!(detokenize_symbols(&[10, 255], &m).unwrap(), vec![10, 255]);
        let all: Vec<u32> = (0..=255u8).map(|z| m.forward(z)).collect();
        assert_eq!(
            detokenize_symbols(&all, &m).unwrap(),
            (0..=255u8).collect::<Vec<_>>()
        );
        assert!(matches!(
            detokenize_symbols(&[4096], &m),
            Err(Error::CorruptStream(_))
        ));
    }

    #[test]
    fn word_tokenizer_counts() {
        assert!(word_tokenize("").is_empty());
        assert_eq!(word_tokenize("a b, c.").len(), 5);
        assert_eq!(word_tokenize(JOINT_PROMPT).len(), 23);
        assert!(word_tokenize(JOINT_PROMPT).iter().all(|&id| id >= 256));
    }

    proptest! {
        #[test]
        fn token_layer_lossless(symbols in proptest::collection::vec(any::<u8>(), 0..800), offset in 0u32..50_000) {
            let m = DigitalTokenMap::build(|s| vec![offset + 7 * s.parse::<u32>().unwrap()]).unwrap();
            let ctx = tokenize_context(&PromptConfig::custom("x y z"), &seq(symbols.clone()), &m, word_tokenize);
            prop_assert_eq!(ctx.symbol_ids.len(), symbols.len());
            prop_assert_eq!(detokenize_symbols(&ctx.symbol_ids, &m).unwrap(), symbols);
        }
    }
}
