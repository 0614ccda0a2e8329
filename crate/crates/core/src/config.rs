//! Model configuration: number of states, chain variant and the design split.

use crate::error::{Error, Result};
use crate::kv::KvFile;
use std::path::Path;

/// How the latent chain laws are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVariant {
    /// Multinomial-logit laws, linear in the dropout time.
    Parametric,
    /// One raw probability table per observed dropout stratum.
    Saturated,
}

impl ChainVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainVariant::Parametric => "parametric",
            ChainVariant::Saturated => "saturated",
        }
    }
}

impl std::str::FromStr for ChainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(ChainVariant::Parametric),
            "saturated" => Ok(ChainVariant::Saturated),
            other => Err(Error::InvalidConfig(format!(
                "unknown chain_variant `{other}` (expected `parametric` or `saturated`)"
            ))),
        }
    }
}

/// Model schema: states, chain variant, and which covariate columns carry
/// fixed effects versus state-varying effects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of latent states J.
    pub n_states: usize,
    pub chain_variant: ChainVariant,
    /// Covariate columns entering the fixed-effect predictor x1.
    pub fixed_columns: Vec<String>,
    /// Covariate columns entering the state-varying predictor x2.
    pub state_columns: Vec<String>,
    /// Prepend a constant-1 column to x2.
    pub random_intercept: bool,
    /// Panel horizon T; defaults to the maximum observed time.
    pub horizon: Option<usize>,
}

impl ModelConfig {
    pub fn new(n_states: usize) -> Self {
        Self {
            n_states,
            chain_variant: ChainVariant::Parametric,
            fixed_columns: Vec::new(),
            state_columns: Vec::new(),
            random_intercept: false,
            horizon: None,
        }
    }

    /// Length of the fixed-effect design vector x1.
    pub fn p1(&self) -> usize {
        self.fixed_columns.len()
    }

    /// Length of the state-varying design vector x2 (incl. intercept).
    pub fn p2(&self) -> usize {
        self.state_columns.len() + usize::from(self.random_intercept)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 1 {
            return Err(Error::InvalidConfig("n_states must be >= 1".into()));
        }
        for c in &self.fixed_columns {
            if self.state_columns.contains(c) {
                return Err(Error::InvalidConfig(format!(
                    "column `{c}` listed in both fixed_columns and state_columns"
                )));
            }
        }
        if self.n_states > 1 && self.p2() == 0 {
            return Err(Error::InvalidConfig(
                "n_states > 1 requires state_columns or random_intercept \
                 (otherwise states are indistinguishable)"
                    .into(),
            ));
        }
        if self.horizon == Some(0) {
            return Err(Error::InvalidConfig("horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "n_states",
            "chain_variant",
            "fixed_columns",
            "state_columns",
            "random_intercept",
            "horizon",
        ];
        for key in kv.keys() {
            if !KNOWN.contains(&key) {
                return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
            }
        }
        let n_states = kv
            .get_parsed::<usize>("n_states")?
            .ok_or_else(|| Error::InvalidConfig("missing required key `n_states`".into()))?;
        let chain_variant = match kv.get("chain_variant") {
            Some(raw) => raw.parse()?,
            None => ChainVariant::Parametric,
        };
        let cfg = Self {
            n_states,
            chain_variant,
            fixed_columns: parse_columns(kv.get("fixed_columns")),
            state_columns: parse_columns(kv.get("state_columns")),
            random_intercept: kv.get_bool("random_intercept")?.unwrap_or(false),
            horizon: kv.get_parsed::<usize>("horizon")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("n_states", self.n_states);
        kv.push("chain_variant", self.chain_variant.as_str());
        kv.push("fixed_columns", self.fixed_columns.join(","));
        kv.push("state_columns", self.state_columns.join(","));
        kv.push("random_intercept", self.random_intercept);
        if let Some(t) = self.horizon {
            kv.push("horizon", t);
        }
        kv
    }
}

fn parse_columns(raw: Option<&str>) -> Vec<String> {
    raw.map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect()
    })
    .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let kv = KvFile::parse(
            "n_states = 2\nchain_variant = saturated\nfixed_columns = x,z\n\
             state_columns =\nrandom_intercept = true\nhorizon = 10\n",
            "cfg",
        )
        .unwrap();
        let cfg = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.n_states, 2);
        assert_eq!(cfg.chain_variant, ChainVariant::Saturated);
        assert_eq!(cfg.fixed_columns, vec!["x", "z"]);
        assert!(cfg.state_columns.is_empty());
        assert!(cfg.random_intercept);
        assert_eq!(cfg.horizon, Some(10));
        assert_eq!(cfg.p1(), 2);
        assert_eq!(cfg.p2(), 1);
    }

    #[test]
    fn rejects_overlapping_columns() {
        let mut cfg = ModelConfig::new(2);
        cfg.fixed_columns = vec!["x".into()];
        cfg.state_columns = vec!["x".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let kv = KvFile::parse("n_states = 2\nn_stats = 3\n", "cfg").unwrap();
        assert!(ModelConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = ModelConfig::new(3);
        cfg.fixed_columns = vec!["age".into(), "skin".into()];
        cfg.random_intercept = true;
        cfg.horizon = Some(5);
        let again = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, again);
    }
}
