//! `key=value` run configuration with layered overrides: built-in defaults,
//! then a config file, then `CLOWER_<KEY>` environment variables, then
//! command-line flags.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use clower_core::model::ModelConfig;
use clower_core::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "CLOWER_";

fn defaults() -> Vec<(&'static str, String)> {
    let m = ModelConfig::desk(0);
    let t = TrainConfig::default();
    vec![
        ("d_model", m.d_model.to_string()),
        ("n_layers", m.n_layers.to_string()),
        ("n_heads", m.n_heads.to_string()),
        ("ffn_dim", m.ffn_dim.to_string()),
        ("max_seq_len", m.max_seq_len.to_string()),
        ("dropout", format!("{:?}", m.dropout)),
        ("init_std", format!("{:?}", m.init_std)),
        ("lr", format!("{:?}", t.lr)),
        ("weight_decay", format!("{:?}", t.weight_decay)),
        ("warmup_steps", t.warmup_steps.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("steps", t.steps.to_string()),
        ("lambda", format!("{:?}", t.lambda)),
        ("mu", format!("{:?}", t.mu)),
        ("tau", format!("{:?}", t.tau)),
        ("k", t.k.to_string()),
        ("mask_rate", format!("{:?}", t.mask_rate)),
        ("swap_prob", format!("{:?}", t.swap_prob)),
        ("seed", t.seed.to_string()),
        ("no_tcl", t.no_tcl.to_string()),
        ("no_scl", t.no_scl.to_string()),
        ("no_sop", t.no_sop.to_string()),
        ("sop_source", t.sop_source.as_str().into()),
        ("similarity", "cosine".into()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
    ]
}

/// Every recognized key.
pub fn keys() -> Vec<&'static str> {
    defaults().into_iter().map(|(k, _)| k).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Reads `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {raw:?}", n + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl Settings {
    /// Applies one layer of overrides; unknown keys are an error.
    pub fn apply<I, K, V>(&mut self, layer: I, origin: &str) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        for (k, v) in layer {
            let k = k.into();
            match self.values.get_mut(&k) {
                Some(slot) => *slot = v.into(),
                None => bail!("unknown setting {k:?} from {origin}"),
            }
        }
        Ok(())
    }

    /// Picks `CLOWER_<KEY>` variables (key upper-cased) out of `vars`.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let known = keys();
        let layer: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                known.contains(&key.as_str()).then_some((key, v))
            })
            .collect();
        self.apply(layer, "environment")
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key).with_context(|| format!("missing setting {key}"))?;
        v.parse().map_err(|e| anyhow::anyhow!("setting {key}={v:?}: {e}"))
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            d_model: self.parse("d_model")?,
            n_layers: self.parse("n_layers")?,
            n_heads: self.parse("n_heads")?,
            ffn_dim: self.parse("ffn_dim")?,
            max_seq_len: self.parse("max_seq_len")?,
            vocab_size,
            dropout: self.parse("dropout")?,
            init_std: self.parse("init_std")?,
            layer_norm_eps: ModelConfig::desk(0).layer_norm_eps,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let similarity = match self.get("similarity") {
            Some("cosine") => clower_core::losses::Similarity::Cosine,
            Some("dot") => clower_core::losses::Similarity::Dot,
            other => bail!("setting similarity={other:?}: expected cosine or dot"),
        };
        let c = TrainConfig {
            lr: self.parse("lr")?,
            weight_decay: self.parse("weight_decay")?,
            warmup_steps: self.parse("warmup_steps")?,
            batch_size: self.parse("batch_size")?,
            steps: self.parse("steps")?,
            lambda: self.parse("lambda")?,
            mu: self.parse("mu")?,
            tau: self.parse("tau")?,
            k: self.parse("k")?,
            mask_rate: self.parse("mask_rate")?,
            swap_prob: self.parse("swap_prob")?,
            seed: self.parse("seed")?,
            no_tcl: self.parse("no_tcl")?,
            no_scl: self.parse("no_scl")?,
            no_sop: self.parse("no_sop")?,
            sop_source: self.parse("sop_source")?,
            similarity,
            checkpoint_every: self.parse("checkpoint_every")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// All settings as sorted `key=value` lines.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let mut s = Settings::default();
        s.apply(parse_config_text("steps = 10 # short\nlr=0.1\n\n").unwrap(), "file").unwrap();
        s.apply_env(vec![("CLOWER_STEPS".to_string(), "20".to_string()), ("HOME".into(), "/x".into())]).unwrap();
        s.apply([("seed", "5")], "flags").unwrap();
        let t = s.train_config().unwrap();
        assert_eq!((t.steps, t.lr, t.seed), (20, 0.1, 5));
    }

    #[test]
    fn resolved_round_trips() {
        let s = Settings::default();
        let mut again = Settings::default();
        again.apply(parse_config_text(&s.resolved()).unwrap(), "file").unwrap();
        assert_eq!(s, again);
        assert_eq!(s.train_config().unwrap(), TrainConfig::default());
        assert_eq!(s.model_config(50).unwrap(), ModelConfig::desk(50));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut s = Settings::default();
        assert!(s.apply([("learning_rate", "1")], "file").is_err());
        assert!(parse_config_text("steps").is_err());
        s.apply([("steps", "many")], "file").unwrap();
        assert!(s.train_config().is_err());
    }
}
