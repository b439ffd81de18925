//! Plain-text `key = value` settings files covering every model and
//! training field by its struct name. Unknown or repeated keys are errors so
//! a typo can never silently fall back to a default.

use std::collections::HashSet;
use std::path::Path;

use caprmil::{Aggregator, CaprmilConfig, Error, Result, TrainConfig};

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: CaprmilConfig,
    pub train: TrainConfig,
    /// Field names the file actually set (lets commands distinguish "left at
    /// default" from "pinned by the operator", e.g. for d_in inference).
    pub explicit: HashSet<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: CaprmilConfig::default(),
            train: TrainConfig::default(),
            explicit: HashSet::new(),
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                parse(&text)
            }
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "line {line_no}: cannot parse {key} value {value:?}"
        ))
    })
}

fn parse_aggregator(value: &str, line_no: usize) -> Result<Aggregator> {
    match value.to_ascii_lowercase().as_str() {
        "mean" => Ok(Aggregator::Mean),
        "attn" => Ok(Aggregator::Attn),
        "gattn" => Ok(Aggregator::GAttn),
        other => Err(Error::config(format!(
            "line {line_no}: unknown aggregator {other:?} (expected mean, attn, or gattn)"
        ))),
    }
}

pub fn parse(text: &str) -> Result<Settings> {
    let mut settings = Settings::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {line_no}: expected `key = value`, got {raw:?}"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !settings.explicit.insert(key.to_string()) {
            return Err(Error::config(format!(
                "line {line_no}: key {key} set twice"
            )));
        }
        let m = &mut settings.model;
        let t = &mut settings.train;
        match key {
            "d_in" => m.d_in = parse_value(key, value, line_no)?,
            "d_model" => m.d_model = parse_value(key, value, line_no)?,
            "n_blocks" => m.n_blocks = parse_value(key, value, line_no)?,
            "n_heads" => m.n_heads = parse_value(key, value, line_no)?,
            "n_clusters" => m.n_clusters = parse_value(key, value, line_no)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, value, line_no)?,
            "dropout_p" => m.dropout_p = parse_value(key, value, line_no)?,
            "aggregator" => m.aggregator = parse_aggregator(value, line_no)?,
            "n_classes" => m.n_classes = parse_value(key, value, line_no)?,
            "attn_hidden" => m.attn_hidden = parse_value(key, value, line_no)?,
            "max_epochs" => t.max_epochs = parse_value(key, value, line_no)?,
            "base_lr" => t.base_lr = parse_value(key, value, line_no)?,
            "weight_decay" => t.weight_decay = parse_value(key, value, line_no)?,
            "beta1" => t.beta1 = parse_value(key, value, line_no)?,
            "beta2" => t.beta2 = parse_value(key, value, line_no)?,
            "eps" => t.eps = parse_value(key, value, line_no)?,
            "warmup_epochs" => t.warmup_epochs = parse_value(key, value, line_no)?,
            "warmup_start_lr" => t.warmup_start_lr = parse_value(key, value, line_no)?,
            "min_lr" => t.min_lr = parse_value(key, value, line_no)?,
            "early_stop_patience" => t.early_stop_patience = parse_value(key, value, line_no)?,
            "early_stop_min_delta" => t.early_stop_min_delta = parse_value(key, value, line_no)?,
            "seed" => t.seed = parse_value(key, value, line_no)?,
            "grad_accum_bags" => t.grad_accum_bags = parse_value(key, value, line_no)?,
            other => {
                return Err(Error::config(format!(
                    "line {line_no}: unknown settings key {other:?}"
                )))
            }
        }
    }
    Ok(settings)
}
