//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Values may be quoted. Unknown
//! keys, duplicate keys and malformed values are errors that name the key
//! and the 1-based line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TransformKind, DEFAULT_TPS_GRID};
use crate::losses::LossWeights;
use crate::networks::{NetworkConfig, DEFAULT_CODE_DIM, DEFAULT_LOC_SIZE};

pub const DEFAULT_IMAGE_SIZE: usize = 256;
pub const DEFAULT_LR: f64 = 2e-4;
pub const VALID_KINDS: [&str; 3] = ["affine", "homography", "tps"];

const REQUIRED: [&str; 7] = [
    "transform_kind",
    "batch_size",
    "steps",
    "seed",
    "domain_x_dir",
    "domain_y_dir",
    "checkpoint_dir",
];

const OPTIONAL: [&str; 18] = [
    "tps_grid",
    "image_size",
    "code_dim",
    "lr_g",
    "lr_d",
    "lambda_acl",
    "lambda_scl",
    "lambda_idt",
    "lambda_adv",
    "lambda_rml",
    "checkpoint_every",
    "channels",
    "loc_size",
    "gen_width",
    "res_blocks",
    "disc_width",
    "replay_buffer",
    "log_every",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Learning rate of the spatial modules and generators.
    pub lr_g: f64,
    /// Learning rate of the image and transform discriminators.
    pub lr_d: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many completed steps (and at the end).
    pub checkpoint_every: u64,
    /// Emit an info-level progress line every this many steps.
    pub log_every: u64,
    pub domain_x_dir: PathBuf,
    pub domain_y_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl TrainConfig {
    /// A config with every default filled in.
    pub fn new(
        kind: TransformKind,
        batch_size: usize,
        steps: u64,
        seed: u64,
        domain_x_dir: PathBuf,
        domain_y_dir: PathBuf,
        checkpoint_dir: PathBuf,
    ) -> Self {
        Self {
            network: NetworkConfig::new(kind, DEFAULT_IMAGE_SIZE),
            batch_size,
            steps,
            lr_g: DEFAULT_LR,
            lr_d: DEFAULT_LR,
            weights: LossWeights::default(),
            seed,
            checkpoint_every: 1000,
            log_every: 100,
            domain_x_dir,
            domain_y_dir,
            checkpoint_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", 0, "must be positive"));
        }
        for (key, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, 0, format!("must be positive, got {v}")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", 0, "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", 0, "must be positive"));
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(key: &str, line: usize, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, line, format!("cannot parse {raw:?}: {e}")))
}

fn parse_kind(line: usize, raw: &str, grid: usize) -> Result<TransformKind> {
    match raw {
        "affine" => Ok(TransformKind::Affine),
        "homography" => Ok(TransformKind::Homography),
        "tps" => Ok(TransformKind::Tps { grid }),
        other => Err(Error::config(
            "transform_kind",
            line,
            format!("unknown kind {other:?}; valid values are {}", VALID_KINDS.join(", ")),
        )),
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Parse config text. Relative directories are resolved against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<TrainConfig> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::config(content, line, "expected `key = value`"));
        };
        let key = k.trim();
        if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
            return Err(Error::config(key, line, "unknown key"));
        }
        if let Some((prev, _)) = entries.get(key) {
            return Err(Error::config(key, line, format!("duplicate key (first set on line {prev})")));
        }
        entries.insert(key.to_string(), (line, unquote(v).to_string()));
    }
    for key in REQUIRED {
        if !entries.contains_key(key) {
            return Err(Error::config(key, 0, "required key is missing"));
        }
    }

    fn get<T: FromStr>(e: &BTreeMap<String, (usize, String)>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        e.get(key).map(|(l, v)| parse_value(key, *l, v)).transpose()
    }
    let line_of = |key: &str| entries.get(key).map(|(l, _)| *l).unwrap_or(0);
    let dir = |key: &str| -> PathBuf {
        let p = PathBuf::from(&entries[key].1);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let grid = get(&entries, "tps_grid")?.unwrap_or(DEFAULT_TPS_GRID);
    let (kl, kv) = &entries["transform_kind"];
    let kind = parse_kind(*kl, kv, grid)?;
    let image_size = get(&entries, "image_size")?.unwrap_or(DEFAULT_IMAGE_SIZE);

    let mut cfg = TrainConfig::new(
        kind,
        get(&entries, "batch_size")?.expect("required"),
        get(&entries, "steps")?.expect("required"),
        get(&entries, "seed")?.expect("required"),
        dir("domain_x_dir"),
        dir("domain_y_dir"),
        dir("checkpoint_dir"),
    );
    let mut net = NetworkConfig::new(kind, image_size);
    net.code_dim = get(&entries, "code_dim")?.unwrap_or(DEFAULT_CODE_DIM);
    net.channels = get(&entries, "channels")?.unwrap_or(net.channels);
    net.loc_size = get(&entries, "loc_size")?.unwrap_or(DEFAULT_LOC_SIZE);
    net.gen_width = get(&entries, "gen_width")?.unwrap_or(net.gen_width);
    net.res_blocks = get(&entries, "res_blocks")?.unwrap_or(net.res_blocks);
    net.disc_width = get(&entries, "disc_width")?.unwrap_or(net.disc_width);
    cfg.network = net;

    cfg.lr_g = get(&entries, "lr_g")?.unwrap_or(DEFAULT_LR);
    cfg.lr_d = get(&entries, "lr_d")?.unwrap_or(DEFAULT_LR);
    let d = LossWeights::default();
    cfg.weights = LossWeights {
        lambda_acl: get(&entries, "lambda_acl")?.unwrap_or(d.lambda_acl),
        lambda_scl: get(&entries, "lambda_scl")?.unwrap_or(d.lambda_scl),
        lambda_idt: get(&entries, "lambda_idt")?.unwrap_or(d.lambda_idt),
        lambda_adv: get(&entries, "lambda_adv")?.unwrap_or(d.lambda_adv),
        lambda_rml: get(&entries, "lambda_rml")?.unwrap_or(d.lambda_rml),
    };
    cfg.checkpoint_every = get(&entries, "checkpoint_every")?.unwrap_or(cfg.checkpoint_every);
    cfg.log_every = get(&entries, "log_every")?.unwrap_or(cfg.log_every);
    if get::<usize>(&entries, "replay_buffer")?.unwrap_or(0) != 0 {
        return Err(Error::config(
            "replay_buffer",
            line_of("replay_buffer"),
            "discriminator replay is reserved; only 0 is supported",
        ));
    }

    // Re-attach line numbers to validation failures.
    cfg.validate().map_err(|e| match e {
        Error::Config { key, message, .. } => {
            let line = line_of(&key);
            Error::Config { key, line, message }
        }
        other => other,
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "transform_kind = homography\nbatch_size = 4\nsteps = 10\nseed = 1\n\
        domain_x_dir = x\ndomain_y_dir = y\ncheckpoint_dir = ck\n";

    #[test]
    fn minimal_fills_defaults() {
        let c = parse_config_str(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.network.image_size, 256);
        assert_eq!(c.network.code_dim, 16);
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.lr_g, 2e-4);
        assert_eq!(c.domain_x_dir, PathBuf::from("/base/x"));
    }

    #[test]
    fn unknown_key_names_line() {
        let text = format!("{MINIMAL}# comment\nwarp_speed = 3\n");
        match parse_config_str(&text, Path::new(".")) {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "warp_speed");
                assert_eq!(line, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
