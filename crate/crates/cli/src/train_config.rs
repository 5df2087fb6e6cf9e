//! Training configuration from an optional TOML file plus flag overrides.
//! Each flag writes exactly one key of `TrainConfig`.

use std::path::{Path, PathBuf};

use clap::Args;
use eventsb::trainer::TrainConfig;
use toml::Value;

use crate::failure::{CliResult, Failure};

/// Flag name, config key.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("--direction", "direction"),
    ("--bins", "bins"),
    ("--size", "size"),
    ("--batch-size", "batch_size"),
    ("--iterations", "iterations"),
    ("--seed", "seed"),
    ("--cap", "cap"),
    ("--augment", "augment"),
    ("--checkpoint-every", "checkpoint_every"),
    ("--lr", "generator_optimizer.lr"),
    ("--critic-lr", "critic_optimizer.lr"),
    ("--lambda-sb", "weights.lambda_sb"),
    ("--lambda-sc", "weights.lambda_sc"),
    ("--lambda-tc", "weights.lambda_tc"),
    ("--negatives", "contrastive.negatives"),
    ("--tc-locations", "contrastive.tc_locations"),
    ("--sc-locations", "contrastive.sc_locations"),
    ("--tau", "bridge.tau"),
    ("--base-channels", "generator.base_channels"),
    ("--latent-dim", "generator.latent_dim"),
    ("--critic-channels", "critic.base_channels"),
];

pub fn key_table() -> String {
    let mut s = String::from("Config keys set by each flag (flags override --config):\n");
    for (flag, key) in TRAIN_KEYS {
        s.push_str(&format!("  {flag:<20} {key}\n"));
    }
    s
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// TOML file with the full or partial training configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// day_to_night or night_to_day [key: direction]
    #[arg(long)]
    pub direction: Option<String>,
    /// Temporal bins, one of 1, 3, 8 [key: bins]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Square crop side [key: size]
    #[arg(long)]
    pub size: Option<usize>,
    /// [key: batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [key: iterations]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Defaults to $EVENTSB_SEED [key: seed]
    #[arg(long, env = "EVENTSB_SEED")]
    pub seed: Option<u64>,
    /// Count clipping cap [key: cap]
    #[arg(long)]
    pub cap: Option<f64>,
    /// Random crop and flip [key: augment]
    #[arg(long)]
    pub augment: Option<bool>,
    /// 0 saves only the final checkpoint [key: checkpoint_every]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Generator and projection-head learning rate [key: generator_optimizer.lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [key: critic_optimizer.lr]
    #[arg(long)]
    pub critic_lr: Option<f64>,
    /// [key: weights.lambda_sb]
    #[arg(long)]
    pub lambda_sb: Option<f64>,
    /// [key: weights.lambda_sc]
    #[arg(long)]
    pub lambda_sc: Option<f64>,
    /// [key: weights.lambda_tc]
    #[arg(long)]
    pub lambda_tc: Option<f64>,
    /// Shuffled negatives per location [key: contrastive.negatives]
    #[arg(long)]
    pub negatives: Option<usize>,
    /// [key: contrastive.tc_locations]
    #[arg(long)]
    pub tc_locations: Option<usize>,
    /// Locations at 256x256, scaled with size [key: contrastive.sc_locations]
    #[arg(long)]
    pub sc_locations: Option<usize>,
    /// Bridge noise scale [key: bridge.tau]
    #[arg(long)]
    pub tau: Option<f64>,
    /// [key: generator.base_channels]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// [key: generator.latent_dim]
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// [key: critic.base_channels]
    #[arg(long)]
    pub critic_channels: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(&'static str, Value)> {
        let mut out = Vec::new();
        let mut put = |key: &'static str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        let int = |v: Option<usize>| v.map(|v| Value::Integer(v as i64));
        put("direction", self.direction.clone().map(Value::String));
        put("bins", int(self.bins));
        put("size", int(self.size));
        put("batch_size", int(self.batch_size));
        put("iterations", int(self.iterations));
        put("seed", self.seed.map(|v| Value::Integer(v as i64)));
        put("cap", self.cap.map(Value::Float));
        put("augment", self.augment.map(Value::Boolean));
        put("checkpoint_every", int(self.checkpoint_every));
        put("generator_optimizer.lr", self.lr.map(Value::Float));
        put("critic_optimizer.lr", self.critic_lr.map(Value::Float));
        put("weights.lambda_sb", self.lambda_sb.map(Value::Float));
        put("weights.lambda_sc", self.lambda_sc.map(Value::Float));
        put("weights.lambda_tc", self.lambda_tc.map(Value::Float));
        put("contrastive.negatives", int(self.negatives));
        put("contrastive.tc_locations", int(self.tc_locations));
        put("contrastive.sc_locations", int(self.sc_locations));
        put("bridge.tau", self.tau.map(Value::Float));
        put("generator.base_channels", int(self.base_channels));
        put("generator.latent_dim", int(self.latent_dim));
        put("critic.base_channels", int(self.critic_channels));
        out
    }

    /// Defaults for the requested bin count, then the file, then flags.
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let file = match &self.config {
            Some(p) => Some(read_toml(p)?),
            None => None,
        };
        let file_bins = file
            .as_ref()
            .and_then(|v| v.get("bins"))
            .and_then(Value::as_integer)
            .map(|b| b as usize);
        let bins = self.bins.or(file_bins).unwrap_or(3);
        eventsb::events::check_supported_bins(bins)?;
        let mut value = Value::try_from(TrainConfig::for_bins(bins))
            .map_err(|e| Failure::usage(format!("default config: {e}")))?;
        if let Some(file) = file {
            merge(&mut value, file, "")?;
        }
        for (key, v) in self.overrides() {
            set_key(&mut value, key, v)?;
        }
        let cfg: TrainConfig = value
            .try_into()
            .map_err(|e| Failure::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_toml(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    text.parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Overlays `src` onto `dst`, refusing keys `dst` does not have.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> CliResult<()> {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Failure::usage(format!("unknown config key {path}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = coerce(d, s);
            Ok(())
        }
    }
}

/// Lets integer literals stand in for float keys.
fn coerce(existing: &Value, v: Value) -> Value {
    match (existing, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

fn set_key(root: &mut Value, key: &str, v: Value) -> CliResult<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .get_mut(part)
            .ok_or_else(|| Failure::usage(format!("unknown config key {key}")))?;
    }
    *cur = coerce(cur, v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_flag_sets_its_listed_key() {
        let flags = TrainFlags {
            direction: Some("night_to_day".into()),
            bins: Some(3),
            size: Some(32),
            batch_size: Some(2),
            iterations: Some(7),
            seed: Some(9),
            cap: Some(4.0),
            augment: Some(false),
            checkpoint_every: Some(3),
            lr: Some(1e-3),
            critic_lr: Some(2e-3),
            lambda_sb: Some(0.5),
            lambda_sc: Some(0.25),
            lambda_tc: Some(0.125),
            negatives: Some(4),
            tc_locations: Some(16),
            sc_locations: Some(128),
            tau: Some(0.02),
            base_channels: Some(12),
            latent_dim: Some(4),
            critic_channels: Some(8),
            config: None,
        };
        let keys: Vec<&str> = flags.overrides().iter().map(|(k, _)| *k).collect();
        let listed: Vec<&str> = TRAIN_KEYS.iter().map(|(_, k)| *k).collect();
        assert_eq!(keys, listed);
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.generator_optimizer.lr, 1e-3);
        assert_eq!(cfg.critic.base_channels, 8);
        assert_eq!(cfg.weights.lambda_tc, 0.125);
        assert!(!cfg.augment);
    }

    #[test]
    fn file_values_are_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "iterations = 5\ncap = 6\n[generator]\nbase_channels = 9\n").unwrap();
        let flags = TrainFlags {
            config: Some(p.clone()),
            iterations: Some(11),
            ..Default::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.iterations, 11);
        assert_eq!(cfg.cap, 6.0);
        assert_eq!(cfg.generator.base_channels, 9);
        std::fs::write(&p, "iterationz = 5\n").unwrap();
        let err = TrainFlags {
            config: Some(p),
            ..Default::default()
        }
        .resolve()
        .unwrap_err();
        assert!(err.message.contains("iterationz"));
    }
}
