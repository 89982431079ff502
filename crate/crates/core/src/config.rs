//! Run configuration files: `[section]` headers with `key = value` lines.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, DatasetContainer, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{ConstraintTier, RetrainConfig, TierName};
use crate::search::SearchConfig;
use crate::supernet::SupernetConfig;

/// Where the search and evaluation data come from.
///
/// The source is either `synthetic` or the `train` file. A `test` file or
/// `test_count` trailing samples form the test split. What remains is
/// split into train and validation by `split`, unless `val` names a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub test_count: Option<usize>,
    /// Train fraction of the non-test samples.
    pub split: f64,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            train: None,
            val: None,
            test: None,
            test_count: None,
            split: 0.5,
        }
    }
}

/// The three splits used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: DatasetContainer,
    pub val: DatasetContainer,
    pub test: Option<DatasetContainer>,
}

impl DataConfig {
    /// Loads or generates the splits. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<DataSplits> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let source = match (&self.synthetic, &self.train) {
            (Some(spec), None) => generate_synthetic(spec)?,
            (None, Some(p)) => DatasetContainer::read(resolve(p))?,
            (Some(_), Some(_)) => return Err(Error::Config("data: give either synthetic or train, not both".into())),
            (None, None) => return Err(Error::Config("data: no synthetic spec or train file".into())),
        };
        let (rest, test) = match (&self.test, self.test_count) {
            (Some(p), None) => (source, Some(DatasetContainer::read(resolve(p))?)),
            (None, Some(n)) => {
                if n >= source.len() {
                    return Err(Error::Config(format!("test_count {n} leaves no training samples of {}", source.len())));
                }
                let cut = source.len() - n;
                (source.slice(0, cut)?, Some(source.slice(cut, source.len())?))
            }
            (None, None) => (source, None),
            (Some(_), Some(_)) => return Err(Error::Config("data: give either test or test_count, not both".into())),
        };
        let (train, val) = match &self.val {
            Some(p) => (rest, DatasetContainer::read(resolve(p))?),
            None => rest.split_at_fraction(self.split)?,
        };
        Ok(DataSplits {
            train: train.with_split(Split::Train),
            val: val.with_split(Split::Val),
            test: test.map(|t| t.with_split(Split::Test)),
        })
    }
}

/// Evaluation campaign defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Architectures drawn per searched supernet.
    pub samples: usize,
    /// Sizes drawn per supernet for tier derivation.
    pub size_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 3,
            size_samples: 300,
            seed: 0,
        }
    }
}

/// A whole run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub supernet: SupernetConfig,
    pub search: SearchConfig,
    pub data: DataConfig,
    pub retrain: RetrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.search.validate()?;
        self.retrain.validate()?;
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return Err(Error::Config(format!("data.split must lie in (0, 1), got {}", self.data.split)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TierEntry {
    c_lower: f64,
    c_upper: f64,
    lower_pct: u32,
    upper_pct: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TiersFile {
    #[serde(rename = "S")]
    s: TierEntry,
    #[serde(rename = "M")]
    m: TierEntry,
    #[serde(rename = "L")]
    l: TierEntry,
}

/// Renders tiers as `[S]`, `[M]`, `[L]` sections.
pub fn tiers_to_text(tiers: &[ConstraintTier; 3]) -> Result<String> {
    let entry = |t: &ConstraintTier| TierEntry {
        c_lower: t.c_lower,
        c_upper: t.c_upper,
        lower_pct: t.lower_pct,
        upper_pct: t.upper_pct,
    };
    let file = TiersFile {
        s: entry(&tiers[0]),
        m: entry(&tiers[1]),
        l: entry(&tiers[2]),
    };
    toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_tiers(text: &str) -> Result<[ConstraintTier; 3]> {
    let f: TiersFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let tier = |name, e: TierEntry| -> Result<ConstraintTier> {
        if !(e.c_lower <= e.c_upper) {
            return Err(Error::Config(format!("tier {name}: c_lower {} exceeds c_upper {}", e.c_lower, e.c_upper)));
        }
        Ok(ConstraintTier {
            name,
            lower_pct: e.lower_pct,
            upper_pct: e.upper_pct,
            c_lower: e.c_lower,
            c_upper: e.c_upper,
        })
    };
    Ok([tier(TierName::S, f.s)?, tier(TierName::M, f.m)?, tier(TierName::L, f.l)?])
}
