//! Line-oriented `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! later files or flags override earlier values through [`KvMap::merge`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{MolfError, Result};
use crate::vae::VaeConfig;
use crate::velocity::{VelocityConfig, VelocityKind};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MolfError::Config(format!("line {}: expected key=value, found `{line}`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(MolfError::Config(format!("line {}: empty key", i + 1)));
            }
            if m.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(MolfError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(m)
    }

    /// One `key=value` line per entry, sorted by key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    /// Hex SHA-256 of [`KvMap::to_text`], shortened to 16 characters.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parsed value, or `default` when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => parse_field(key, v),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .entries
            .get(key)
            .ok_or_else(|| MolfError::Config(format!("missing field `{key}`")))?;
        parse_field(key, v)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(MolfError::Config(format!("field `{key}`: `{v}` is not a boolean"))),
        }
    }

    /// Comma-separated list.
    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v.split(',').map(|p| parse_field(key, p.trim())).collect(),
        }
    }
}

fn parse_field<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| MolfError::Config(format!("field `{key}`: cannot parse `{v}`")))
}

pub fn vae_config_to_kv(c: &VaeConfig, out: &mut KvMap) {
    out.set("vae.gene_dim", c.gene_dim);
    out.set("vae.latent_dim", c.latent_dim);
    out.set("vae.tokens", c.tokens);
    out.set("vae.hidden", c.hidden);
    out.set("vae.heads", c.heads);
    out.set("vae.layers", c.layers);
    out.set("vae.beta", c.beta);
    let widths: Vec<String> = c.decoder_hidden.iter().map(|w| w.to_string()).collect();
    out.set("vae.decoder_hidden", widths.join(","));
    out.set("vae.decoder_zero_init", c.decoder_zero_init);
}

pub fn vae_config_from_kv(m: &KvMap) -> Result<VaeConfig> {
    let c = VaeConfig {
        gene_dim: m.require("vae.gene_dim")?,
        latent_dim: m.require("vae.latent_dim")?,
        tokens: m.require("vae.tokens")?,
        hidden: m.require("vae.hidden")?,
        heads: m.require("vae.heads")?,
        layers: m.require("vae.layers")?,
        beta: m.require("vae.beta")?,
        decoder_hidden: m.list_or("vae.decoder_hidden", Vec::new())?,
        decoder_zero_init: m.bool_or("vae.decoder_zero_init", false)?,
    };
    c.validate().map_err(|e| MolfError::Config(e.to_string()))?;
    Ok(c)
}

pub fn velocity_config_to_kv(c: &VelocityConfig, out: &mut KvMap) {
    out.set("flow.latent_dim", c.latent_dim);
    out.set("flow.cond_dim", c.cond_dim);
    out.set("flow.n_types", c.n_types);
    out.set("flow.hidden", c.hidden);
    out.set("flow.heads", c.heads);
    out.set("flow.time_dim", c.time_dim);
    out.set("flow.pe", c.pe_enabled);
    out.set("flow.pe_base", c.pe_base);
    out.set("flow.self_attention", c.backbone_self_attention);
    out.set(
        "flow.kind",
        match c.kind {
            VelocityKind::Moe => "moe",
            VelocityKind::Dense => "dense",
        },
    );
    out.set("flow.experts", c.experts);
    out.set("flow.top_k", c.top_k);
    out.set("flow.expert_dim", c.expert_dim);
    out.set("flow.expert_heads", c.expert_heads);
    out.set("flow.ff_mult", c.ff_mult);
}

pub fn velocity_config_from_kv(m: &KvMap) -> Result<VelocityConfig> {
    let kind = match m.require::<String>("flow.kind")?.as_str() {
        "moe" => VelocityKind::Moe,
        "dense" => VelocityKind::Dense,
        other => return Err(MolfError::Config(format!("field `flow.kind`: unknown kind `{other}`"))),
    };
    let c = VelocityConfig {
        latent_dim: m.require("flow.latent_dim")?,
        cond_dim: m.require("flow.cond_dim")?,
        n_types: m.require("flow.n_types")?,
        hidden: m.require("flow.hidden")?,
        heads: m.require("flow.heads")?,
        time_dim: m.require("flow.time_dim")?,
        pe_enabled: m.bool_or("flow.pe", true)?,
        pe_base: m.require("flow.pe_base")?,
        backbone_self_attention: m.bool_or("flow.self_attention", true)?,
        kind,
        experts: m.require("flow.experts")?,
        top_k: m.require("flow.top_k")?,
        expert_dim: m.require("flow.expert_dim")?,
        expert_heads: m.require("flow.expert_heads")?,
        ff_mult: m.require("flow.ff_mult")?,
    };
    c.validate().map_err(|e| MolfError::Config(e.to_string()))?;
    Ok(c)
}
