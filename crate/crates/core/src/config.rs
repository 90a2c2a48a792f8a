//! Model and training configuration, the shipped presets, and the flat
//! `key = value` text format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// `n_w`; must match pretrained vectors when those are loaded.
    pub word_dim: usize,
    /// `n_t`
    pub type_dim: usize,
    /// `n_p`
    pub position_dim: usize,
    /// `n_e`, the width of the concatenated BLSTM output.
    pub lstm_dim: usize,
    /// Per-direction hidden size; `None` means `lstm_dim / 2`.
    pub lstm_hidden: Option<usize>,
    /// `n_s = n_b`
    pub pair_dim: usize,
    /// Maximum walk length `l`.
    pub walk_length: usize,
    pub beta: f64,
    /// When false, edges are built from the two entity vectors only.
    pub use_context: bool,
    /// Drop every mention's tokens from the context, not just the targets'.
    pub exclude_all_mentions: bool,
    pub freeze_words: bool,
    pub input_dropout: f64,
    pub output_dropout: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub average_params: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Baseline,
    L1,
    L2,
    L4,
    L8,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Baseline, Preset::L1, Preset::L2, Preset::L4, Preset::L8];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::L1 => "l1",
            Preset::L2 => "l2",
            Preset::L4 => "l4",
            Preset::L8 => "l8",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name}")))
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::preset(Preset::L4)
    }
}

impl Config {
    /// Tuned settings for each model variant.
    pub fn preset(p: Preset) -> Self {
        let base = Config {
            word_dim: 200,
            type_dim: 20,
            position_dim: 25,
            lstm_dim: 100,
            lstm_hidden: None,
            pair_dim: 100,
            walk_length: 1,
            beta: 1.0,
            use_context: true,
            exclude_all_mentions: false,
            freeze_words: false,
            input_dropout: 0.0,
            output_dropout: 0.0,
            learning_rate: 0.001,
            l2: 0.0,
            grad_clip: 10.0,
            batch_size: 10,
            patience: 5,
            max_epochs: 100,
            seed: 1,
            average_params: true,
        };
        match p {
            Preset::Baseline => Config {
                type_dim: 15,
                use_context: false,
                input_dropout: 0.3,
                output_dropout: 0.03,
                learning_rate: 0.0018,
                l2: 3.2e-5,
                grad_clip: 25.63,
                ..base
            },
            Preset::L1 => Config {
                type_dim: 25,
                input_dropout: 0.13,
                output_dropout: 0.38,
                learning_rate: 0.0017,
                l2: 6.1e-5,
                grad_clip: 30.0,
                ..base
            },
            Preset::L2 => Config {
                walk_length: 2,
                beta: 0.72,
                input_dropout: 0.25,
                output_dropout: 0.37,
                learning_rate: 0.003,
                l2: 0.0001,
                grad_clip: 8.6,
                ..base
            },
            Preset::L4 => Config {
                walk_length: 4,
                beta: 0.77,
                input_dropout: 0.11,
                output_dropout: 0.32,
                learning_rate: 0.002,
                l2: 5.7e-5,
                grad_clip: 24.4,
                ..base
            },
            Preset::L8 => Config {
                walk_length: 8,
                beta: 0.88,
                input_dropout: 0.49,
                output_dropout: 0.36,
                learning_rate: 0.001,
                l2: 1.88e-5,
                grad_clip: 10.5,
                ..base
            },
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm_hidden.unwrap_or(self.lstm_dim / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("type_dim", self.type_dim),
            ("position_dim", self.position_dim),
            ("pair_dim", self.pair_dim),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        match self.lstm_hidden {
            Some(0) => return bad("lstm_hidden must be positive".into()),
            Some(h) if 2 * h != self.lstm_dim => {
                return bad(format!(
                    "lstm_hidden {h} implies lstm_dim {}, but lstm_dim is {}",
                    2 * h,
                    self.lstm_dim
                ))
            }
            None if self.lstm_dim == 0 || !self.lstm_dim.is_multiple_of(2) => {
                return bad(format!("lstm_dim {} must be positive and even", self.lstm_dim))
            }
            _ => {}
        }
        if !self.walk_length.is_power_of_two() {
            return bad(format!("walk_length {} is not a power of two", self.walk_length));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        for (name, v) in [("input_dropout", self.input_dropout), ("output_dropout", self.output_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.l2 >= 0.0) {
            return bad("learning_rate and l2 must be non-negative".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 21] = [
        "word_dim",
        "type_dim",
        "position_dim",
        "lstm_dim",
        "lstm_hidden",
        "pair_dim",
        "walk_length",
        "beta",
        "use_context",
        "exclude_all_mentions",
        "freeze_words",
        "input_dropout",
        "output_dropout",
        "learning_rate",
        "l2",
        "grad_clip",
        "batch_size",
        "patience",
        "max_epochs",
        "seed",
        "average_params",
    ];

    /// Sets one field from its text form. `preset` resets every field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "preset" => *self = Config::preset(Preset::from_name(value)?),
            "word_dim" => self.word_dim = num(key, value)?,
            "type_dim" => self.type_dim = num(key, value)?,
            "position_dim" => self.position_dim = num(key, value)?,
            "lstm_dim" => self.lstm_dim = num(key, value)?,
            "lstm_hidden" => {
                self.lstm_hidden = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "pair_dim" => self.pair_dim = num(key, value)?,
            "walk_length" => self.walk_length = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "use_context" => self.use_context = flag(key, value)?,
            "exclude_all_mentions" => self.exclude_all_mentions = flag(key, value)?,
            "freeze_words" => self.freeze_words = flag(key, value)?,
            "input_dropout" => self.input_dropout = num(key, value)?,
            "output_dropout" => self.output_dropout = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "l2" => self.l2 = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "average_params" => self.average_params = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key in a fixed order; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden = match self.lstm_hidden {
            Some(h) => h.to_string(),
            None => "auto".to_string(),
        };
        let fields: [(&str, String); 21] = [
            ("word_dim", self.word_dim.to_string()),
            ("type_dim", self.type_dim.to_string()),
            ("position_dim", self.position_dim.to_string()),
            ("lstm_dim", self.lstm_dim.to_string()),
            ("lstm_hidden", hidden),
            ("pair_dim", self.pair_dim.to_string()),
            ("walk_length", self.walk_length.to_string()),
            ("beta", self.beta.to_string()),
            ("use_context", self.use_context.to_string()),
            ("exclude_all_mentions", self.exclude_all_mentions.to_string()),
            ("freeze_words", self.freeze_words.to_string()),
            ("input_dropout", self.input_dropout.to_string()),
            ("output_dropout", self.output_dropout.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("l2", self.l2.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("average_params", self.average_params.to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for entry in parse_key_values(text)? {
            self.set(&entry.key, &entry.value).map_err(|e| Error::Parse {
                line: entry.line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a flat config document into entries. `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<KeyValue>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key or value".into(),
            });
        }
        out.push(KeyValue {
            line: i + 1,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}
