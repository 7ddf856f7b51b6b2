//! Flat key=value run configuration shared by the command line tools.
//!
//! One file drives generation, model shape, training, noise, and lattice
//! geometry. Keys are consumed as they are read; leftovers are reported as
//! errors so typos never silently fall back to defaults.

use crate::error::{Result, TcpnError};
use crate::lattice::LatticeParams;
use crate::model::ModelConfig;
use crate::synth::{CategorySpec, GenConfig, NoiseConfig, NoiseTarget, ValueGrammar};
use crate::train::{LossWeights, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

/// Parsed key=value file. Getters remove the key, so `ensure_consumed`
/// can flag anything no builder recognized.
#[derive(Debug, Default)]
pub struct ConfigFile {
    map: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> ConfigFile {
        ConfigFile::default()
    }

    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TcpnError::Config(format!("line {}: expected key=value, got {:?}", lineno + 1, line))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(TcpnError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(TcpnError::Config(format!("line {}: duplicate key {:?}", lineno + 1, key)));
            }
        }
        Ok(ConfigFile { map })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)?;
        ConfigFile::parse(&text)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_parsed(key, "a non-negative integer")
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take_parsed(key, "a non-negative integer")
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed(key, "a number")
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(Some(true)),
                "false" | "0" | "no" | "off" => Ok(Some(false)),
                other => Err(TcpnError::Config(format!("{key}: expected a boolean, got {other:?}"))),
            },
        }
    }

    /// Comma-separated integers; an empty value means an empty list.
    pub fn take_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim().parse::<usize>().map_err(|_| {
                        TcpnError::Config(format!("{key}: expected comma-separated integers, got {part:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| TcpnError::Config(format!("{key}: expected {kind}, got {v:?}"))),
        }
    }

    pub fn ensure_consumed(&self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(|k| k.as_str()).collect();
        Err(TcpnError::Config(format!("unrecognized config keys: {}", keys.join(", "))))
    }

    /// Generator settings. The `seed` argument is the command line value and
    /// is overridden by a `seed` key in the file.
    pub fn gen_config(&mut self, seed: u64) -> Result<GenConfig> {
        let mut cfg = GenConfig::standard(seed);
        if let Some(n) = self.take_usize("num_docs")? {
            cfg.num_docs = n;
        }
        if let Some(n) = self.take_usize("word_pool_size")? {
            cfg.word_pool_size = n;
        }
        if let Some(spec) = self.take_str("categories") {
            cfg.categories = parse_categories(&spec)?;
        }
        if let Some(p) = self.take_f64("duplicate_prob")? {
            cfg.duplicate_prob = p;
        }
        if let Some(n) = self.take_usize("min_rows")? {
            cfg.min_rows = n;
        }
        if let Some(n) = self.take_usize("max_rows")? {
            cfg.max_rows = n;
        }
        if let Some(s) = self.take_u64("seed")? {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings layered over the defaults.
    pub fn train_config(&mut self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(n) = self.take_usize("epochs")? {
            cfg.epochs = n;
            // The default decay schedule targets the default budget; a
            // shorter explicit budget keeps only the decays it reaches.
            cfg.decay_epochs.retain(|&e| e <= n);
        }
        if let Some(n) = self.take_usize("batch_size")? {
            cfg.batch_size = n;
        }
        if let Some(s) = self.take_u64("train_seed")? {
            cfg.seed = s;
        }
        if let Some(x) = self.take_f64("lr")? {
            cfg.lr = x;
        }
        if let Some(list) = self.take_usize_list("decay_epochs")? {
            cfg.decay_epochs = list;
        }
        if let Some(n) = self.take_usize("eval_every")? {
            cfg.eval_every = n;
        }
        if let Some(x) = self.take_f64("early_stop_loss")? {
            cfg.early_stop_loss = Some(x);
        }
        if let Some(b) = self.take_bool("early_stop_on_perfect_f1")? {
            cfg.early_stop_on_perfect_f1 = b;
        }
        if let Some(n) = self.take_usize("max_len")? {
            cfg.max_len = n;
        }
        let mut w = LossWeights::default();
        if let Some(x) = self.take_f64("lambda_s")? {
            w.lambda_s = x;
        }
        if let Some(x) = self.take_f64("lambda_c")? {
            w.lambda_c = x;
        }
        if let Some(x) = self.take_f64("lambda_n")? {
            w.lambda_n = x;
        }
        cfg.weights = w;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model shape layered over `base`. `vocab_size` and `num_categories`
    /// are derived from the dataset; a file value must match the derived one.
    pub fn model_config(&mut self, base: ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base;
        if let Some(n) = self.take_usize("d")? {
            cfg.d = n;
        }
        if let Some(n) = self.take_usize("depth")? {
            cfg.depth = n;
        }
        if let Some(b) = self.take_bool("use_coord")? {
            cfg.use_coord = b;
        }
        if let Some(b) = self.take_bool("use_unet")? {
            cfg.use_unet = b;
        }
        if let Some(b) = self.take_bool("use_residual")? {
            cfg.use_residual = b;
        }
        if let Some(n) = self.take_usize("model_max_len")? {
            cfg.max_len = n;
        }
        if let Some(n) = self.take_usize("vocab_size")? {
            if n != base.vocab_size {
                return Err(TcpnError::Config(format!(
                    "vocab_size is derived from the data ({}); remove the key or match it",
                    base.vocab_size
                )));
            }
        }
        if let Some(n) = self.take_usize("num_categories")? {
            if n != base.num_categories {
                return Err(TcpnError::Config(format!(
                    "num_categories is derived from the data ({}); remove the key or match it",
                    base.num_categories
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Optional evaluation-time noise; None when no noise key is present.
    pub fn noise_config(&mut self) -> Result<Option<NoiseConfig>> {
        let p_sub = self.take_f64("p_sub")?;
        let p_del = self.take_f64("p_del")?;
        let target = match self.take_str("noise_target") {
            None => None,
            Some(v) => Some(parse_noise_target(&v)?),
        };
        if p_sub.is_none() && p_del.is_none() && target.is_none() {
            return Ok(None);
        }
        let cfg = NoiseConfig {
            p_sub: p_sub.unwrap_or(0.0),
            p_del: p_del.unwrap_or(0.0),
            target: target.unwrap_or(NoiseTarget::All),
        };
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn lattice_params(&mut self) -> Result<LatticeParams> {
        let mut p = LatticeParams::default();
        if let Some(x) = self.take_f64("r_t")? {
            p.r_t = x;
        }
        if let Some(x) = self.take_f64("r_r")? {
            p.r_r = x;
        }
        p.validate()?;
        Ok(p)
    }
}

pub fn parse_noise_target(s: &str) -> Result<NoiseTarget> {
    match s {
        "all" => Ok(NoiseTarget::All),
        "values" => Ok(NoiseTarget::Values),
        other => Err(TcpnError::Config(format!("noise target must be all or values, got {other:?}"))),
    }
}

/// Compact category list: `NAME:date | NAME:amount | NAME:words:MIN:MAX |
/// NAME:code:LEN`, comma separated. Example:
/// `DATE:date,TOTAL:amount,NAME:words:2:4,CODE:code:12`.
pub fn parse_categories(spec: &str) -> Result<Vec<CategorySpec>> {
    let mut out = Vec::new();
    for item in spec.split(',') {
        let item = item.trim();
        if item.is_empty() {
            return Err(TcpnError::Config("empty category entry".into()));
        }
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() < 2 || parts[0].is_empty() {
            return Err(TcpnError::Config(format!(
                "category {item:?}: expected NAME:kind[:args]"
            )));
        }
        let name = parts[0].to_string();
        let grammar = match (parts[1], parts.len()) {
            ("date", 2) => ValueGrammar::Date,
            ("amount", 2) => ValueGrammar::Amount,
            ("words", 4) => {
                let min_words = parse_arg(item, parts[2])?;
                let max_words = parse_arg(item, parts[3])?;
                ValueGrammar::Words { min_words, max_words }
            }
            ("code", 3) => ValueGrammar::Code { len: parse_arg(item, parts[2])? },
            ("date" | "amount" | "words" | "code", _) => {
                return Err(TcpnError::Config(format!("category {item:?}: wrong argument count")))
            }
            (other, _) => {
                return Err(TcpnError::Config(format!(
                    "category {item:?}: unknown kind {other:?} (date, amount, words, code)"
                )))
            }
        };
        if out.iter().any(|c: &CategorySpec| c.name == name) {
            return Err(TcpnError::Config(format!("duplicate category name {name:?}")));
        }
        out.push(CategorySpec { name, grammar });
    }
    if out.is_empty() {
        return Err(TcpnError::Config("category list is empty".into()));
    }
    Ok(out)
}

fn parse_arg(item: &str, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| TcpnError::Config(format!("category {item:?}: bad integer {s:?}")))
}
