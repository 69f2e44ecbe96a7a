//! Flat `key=value` run configuration. Later sources win: profile
//! defaults, then the config file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emoter_core::lexicon::EmotionCategory;
use emoter_core::model::EmoTerConfig;
use emoter_core::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile '{other}' (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

/// Every accepted key with its default under each profile. An empty value
/// means "unset".
fn defaults(profile: Profile) -> Vec<(&'static str, String)> {
    let model = match profile {
        Profile::Desk => EmoTerConfig::desk(0, 0, 0),
        Profile::Paper => EmoTerConfig::paper(0, 0, 0),
    };
    let train = match profile {
        Profile::Desk => TrainConfig::desk(),
        Profile::Paper => TrainConfig::paper(),
    };
    vec![
        ("profile", profile.to_string()),
        ("seed", "0".into()),
        ("out", "out".into()),
        ("records", String::new()),
        ("lexicon", String::new()),
        ("data", String::new()),
        ("model", String::new()),
        ("generated", String::new()),
        ("baseline", String::new()),
        ("emotion", String::new()),
        ("splits", "1".into()),
        ("max_len", model.max_len.to_string()),
        ("embed_dim", model.embed_dim.to_string()),
        ("ffn_dim", model.ffn_dim.to_string()),
        ("encoder_layers", model.encoder_layers.to_string()),
        ("decoder_layers", model.decoder_layers.to_string()),
        ("attention_heads", model.attention_heads.to_string()),
        ("emotion_hidden", model.emotion_hidden.to_string()),
        ("intensity", model.intensity.to_string()),
        ("c1", model.c1.to_string()),
        ("c2", model.c2.to_string()),
        ("mask_emotion_tag", model.mask_emotion_tag.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("learning_rate", train.learning_rate.to_string()),
        ("clip", train.clip.to_string()),
        ("max_epochs", train.max_epochs.to_string()),
        ("patience", train.patience.to_string()),
        ("target_loss", String::new()),
        ("gradcheck_coords", "200".into()),
        ("gradcheck_epsilon", "1e-5".into()),
        ("synth_users", "20".into()),
        ("synth_items", "20".into()),
        ("synth_records", "200".into()),
        ("synth_distribution", "0.6,0.05,0.1,0.1,0.05,0.1".into()),
    ]
}

pub fn parse_kv(text: &str, source: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{source}:{}: expected key=value, got '{line}'", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    order: Vec<&'static str>,
}

impl RunConfig {
    /// Resolves `file` and `overrides` on top of the selected profile.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, String> {
        let file_pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                parse_kv(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        let pick =
            |pairs: &[(String, String)]| pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.clone());
        let profile: Profile = pick(overrides)
            .or_else(|| pick(&file_pairs))
            .unwrap_or_else(|| "desk".into())
            .parse()?;
        let base = defaults(profile);
        let order: Vec<&'static str> = base.iter().map(|(k, _)| *k).collect();
        let mut values: BTreeMap<String, String> = base.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (k, v) in file_pairs.iter().chain(overrides) {
            if !values.contains_key(k) {
                return Err(format!("unknown config key '{k}'"));
            }
            values.insert(k.clone(), v.clone());
        }
        let cfg = RunConfig { values, order };
        cfg.model_template()?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| format!("invalid value '{raw}' for '{key}'"))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, String> {
        self.path(key)
            .ok_or_else(|| format!("'{key}' is required for this command"))
    }

    pub fn emotion(&self) -> Result<Option<EmotionCategory>, String> {
        self.optional("emotion")
    }

    pub fn distribution(&self) -> Result<[f64; 6], String> {
        let parts: Vec<f64> = self
            .raw("synth_distribution")
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| "synth_distribution must be six comma-separated numbers".to_string())?;
        parts
            .try_into()
            .map_err(|_| "synth_distribution must have exactly six entries".to_string())
    }

    /// Model config with zero-sized tables; the trainer fills those in from
    /// the vocabulary.
    pub fn model_template(&self) -> Result<EmoTerConfig, String> {
        Ok(EmoTerConfig {
            embed_dim: self.get("embed_dim")?,
            ffn_dim: self.get("ffn_dim")?,
            encoder_layers: self.get("encoder_layers")?,
            decoder_layers: self.get("decoder_layers")?,
            attention_heads: self.get("attention_heads")?,
            emotion_hidden: self.get("emotion_hidden")?,
            intensity: self.get("intensity")?,
            c1: self.get("c1")?,
            c2: self.get("c2")?,
            max_len: self.get("max_len")?,
            vocab_size: 0,
            num_users: 0,
            num_items: 0,
            mask_emotion_tag: self.get("mask_emotion_tag")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            clip: self.get("clip")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            seed: self.get("seed")?,
            target_loss: self.optional("target_loss")?,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in &self.order {
            s.push_str(&format!("{k}={}\n", self.values[*k]));
        }
        s
    }
}
