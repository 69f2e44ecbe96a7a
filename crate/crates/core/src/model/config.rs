use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmoTerConfig {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    /// Hidden width of the emotion MLP.
    pub emotion_hidden: usize,
    /// Weight of the emotion hidden state in the fusion sum.
    pub intensity: f64,
    /// Weight of the language-modeling loss.
    pub c1: f64,
    /// Weight of the emotion-classification loss.
    pub c2: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// Hide the emotion tag from both encoders and read the emotion head at
    /// `<eos>` instead of the tag position.
    pub mask_emotion_tag: bool,
}

impl EmoTerConfig {
    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Settings from the original full-scale training runs.
    pub fn paper(vocab_size: usize, num_users: usize, num_items: usize) -> Self {
        EmoTerConfig {
            embed_dim: 512,
            ffn_dim: 2048,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 2,
            emotion_hidden: 64,
            intensity: 1.0,
            c1: 1.0,
            c2: 1.0,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            vocab_size,
            num_users,
            num_items,
            mask_emotion_tag: false,
        }
    }

    /// Laptop-sized variant used by tests and the default CLI profile.
    pub fn desk(vocab_size: usize, num_users: usize, num_items: usize) -> Self {
        EmoTerConfig {
            embed_dim: 64,
            ffn_dim: 128,
            ..Self::paper(vocab_size, num_users, num_items)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embed_dim == 0 || self.attention_heads == 0 || !self.embed_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of attention_heads {}",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.ffn_dim == 0 || self.emotion_hidden == 0 {
            return bad("ffn_dim and emotion_hidden must be positive".into());
        }
        if self.vocab_size <= crate::corpus::Vocabulary::NUM_SPECIAL || self.num_users == 0 || self.num_items == 0 {
            return bad("vocabulary, user, and item tables must be non-empty".into());
        }
        if self.max_len < 6 {
            return bad(format!("max_len {} is too short", self.max_len));
        }
        for (name, v) in [("intensity", self.intensity), ("c1", self.c1), ("c2", self.c2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Flat `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("attention_heads", self.attention_heads.to_string()),
            ("emotion_hidden", self.emotion_hidden.to_string()),
            ("intensity", self.intensity.to_string()),
            ("c1", self.c1.to_string()),
            ("c2", self.c2.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_users", self.num_users.to_string()),
            ("num_items", self.num_items.to_string()),
            ("mask_emotion_tag", self.mask_emotion_tag.to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line '{line}' has no '='")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .remove(key)
                .ok_or_else(|| Error::InvalidArgument(format!("model config is missing '{key}'")))?;
            raw.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{raw}' for '{key}'")))
        }
        let cfg = EmoTerConfig {
            embed_dim: take(&mut map, "embed_dim")?,
            ffn_dim: take(&mut map, "ffn_dim")?,
            encoder_layers: take(&mut map, "encoder_layers")?,
            decoder_layers: take(&mut map, "decoder_layers")?,
            attention_heads: take(&mut map, "attention_heads")?,
            emotion_hidden: take(&mut map, "emotion_hidden")?,
            intensity: take(&mut map, "intensity")?,
            c1: take(&mut map, "c1")?,
            c2: take(&mut map, "c2")?,
            max_len: take(&mut map, "max_len")?,
            vocab_size: take(&mut map, "vocab_size")?,
            num_users: take(&mut map, "num_users")?,
            num_items: take(&mut map, "num_items")?,
            mask_emotion_tag: take(&mut map, "mask_emotion_tag")?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::InvalidArgument(format!("unknown model config key '{k}'")));
        }
        Ok(cfg)
    }
}
