//! TOML benchmark configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::PairCondition;
use super::synth::SynthParams;
use super::HarnessError;
use crate::mitigation::{Strategy, DEFAULT_K};
use crate::similarity::{Direction, Mechanism};

pub const THREADS_ENV: &str = "PATCHPROBE_THREADS";

fn all_mechanisms() -> Vec<Mechanism> {
    Mechanism::ALL.to_vec()
}

fn default_k() -> usize {
    DEFAULT_K
}

fn one() -> usize {
    1
}

fn synthetic() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Pair manifests (JSONL).
    #[serde(default)]
    pub pairs: Vec<PathBuf>,
    /// Triplet manifests (JSONL).
    #[serde(default)]
    pub triplets: Vec<PathBuf>,
    /// Domain-comparison manifests (JSONL).
    #[serde(default)]
    pub domain: Vec<PathBuf>,
    #[serde(default = "all_mechanisms")]
    pub mechanisms: Vec<Mechanism>,
    #[serde(default)]
    pub mitigations: Vec<Strategy>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub maxsim_direction: Direction,
    #[serde(default)]
    pub synthetic: Option<SyntheticSuite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSuite {
    #[serde(default)]
    pub families: Vec<SyntheticFamily>,
    #[serde(default)]
    pub attention: Option<SyntheticAttention>,
    #[serde(default)]
    pub domain: Option<SyntheticDomain>,
}

/// `pairs` collapse pairs sharing everything but the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFamily {
    pub name: String,
    pub condition: PairCondition,
    #[serde(default = "synthetic")]
    pub dataset: String,
    #[serde(default = "synthetic")]
    pub model_id: String,
    #[serde(default = "one")]
    pub pairs: usize,
    pub n: usize,
    pub d: usize,
    pub changes: usize,
    pub angle: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl SyntheticFamily {
    /// Parameters of the `index`-th pair; seeds derive from the config seed.
    pub fn params(&self, base_seed: u64, index: usize) -> SynthParams {
        SynthParams {
            n: self.n,
            d: self.d,
            change_count: self.changes,
            change_angle: self.angle,
            jitter: self.jitter,
            seed: base_seed.wrapping_add(index as u64),
        }
    }

    pub fn pair_id(&self, index: usize) -> String {
        format!("{}-{index:04}", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAttention {
    #[serde(default = "synthetic")]
    pub dataset: String,
    #[serde(default = "synthetic")]
    pub model_id: String,
    pub n: usize,
    pub d: usize,
    pub layout_fractions: Vec<f64>,
}

/// Natural-analogue pair vs one pair of the named collapse family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomain {
    pub family: String,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        Ok(cfg.resolved(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn resolved(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.pairs.iter_mut().for_each(fix);
        self.triplets.iter_mut().for_each(fix);
        self.domain.iter_mut().for_each(fix);
        fix(&mut self.out_dir);
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1".into());
        }
        if self.mechanisms.is_empty() && self.mitigations.is_empty() {
            return bad("nothing to score: mechanisms and mitigations are both empty".into());
        }
        if let Some(s) = &self.synthetic {
            let mut names = std::collections::BTreeSet::new();
            for f in &s.families {
                if !names.insert(f.name.as_str()) {
                    return bad(format!("duplicate synthetic family {:?}", f.name));
                }
                if f.pairs == 0 {
                    return bad(format!("synthetic family {:?} has zero pairs", f.name));
                }
                f.params(self.seed, 0)
                    .validate()
                    .map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", f.name)))?;
            }
            if let Some(a) = &s.attention {
                if a.layout_fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad("layout fractions must lie in [0, 1]".into());
                }
            }
            if let Some(d) = &s.domain {
                if !names.contains(d.family.as_str()) {
                    return bad(format!("domain comparison names unknown family {:?}", d.family));
                }
            }
        }
        Ok(())
    }

    /// `PATCHPROBE_THREADS`, when set, replaces the configured parallelism.
    pub fn apply_env_override(&mut self) -> Result<(), HarnessError> {
        if let Some(n) = threads_from_env()? {
            self.parallelism = n;
        }
        Ok(())
    }
}

pub fn threads_from_env() -> Result<Option<usize>, HarnessError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(HarnessError::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = BenchConfig::from_toml("out_dir = \"out\"").unwrap();
        assert_eq!(cfg.mechanisms, Mechanism::ALL.to_vec());
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.parallelism, 1);
        assert_eq!(cfg.maxsim_direction, Direction::AToB);
        assert!(cfg.synthetic.is_none());
    }

    #[test]
    fn full_config_parses_and_resolves() {
        let text = r#"
            pairs = ["pairs.jsonl"]
            mechanisms = ["mean", "minpatch"]
            mitigations = ["varwgt", "topkr"]
            k = 10
            out_dir = "results"
            parallelism = 4
            seed = 9
            maxsim_direction = "symmetric"

            [[synthetic.families]]
            name = "micro"
            condition = "micro"
            pairs = 3
            n = 100
            d = 32
            changes = 1
            angle = 1.5707963267948966

            [synthetic.domain]
            family = "micro"
        "#;
        let cfg = BenchConfig::from_toml(text).unwrap().resolved(Path::new("/base"));
        assert_eq!(cfg.pairs, vec![PathBuf::from("/base/pairs.jsonl")]);
        assert_eq!(cfg.out_dir, PathBuf::from("/base/results"));
        assert_eq!(cfg.mitigations, vec![Strategy::VarWgt, Strategy::TopKR]);
        let fam = &cfg.synthetic.as_ref().unwrap().families[0];
        assert_eq!(fam.pair_id(2), "micro-0002");
        assert_eq!(fam.params(cfg.seed, 2).seed, 11);
    }

    #[test]
    fn invalid_configs() {
        for text in [
            "out_dir = \"o\"\nparallelism = 0",
            "out_dir = \"o\"\nk = -1",
            "out_dir = \"o\"\nmechanisms = []",
            "out_dir = \"o\"\nmechanisms = [\"median\"]",
            "out_dir = \"o\"\nbogus = 1",
            "parallelism = 2",
            "out_dir = \"o\"\n[[synthetic.families]]\nname = \"a\"\ncondition = \"micro\"\nn = 5\nd = 4\nchanges = 5\nangle = 1.0",
            "out_dir = \"o\"\n[synthetic.domain]\nfamily = \"missing\"",
        ] {
            assert!(BenchConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
