//! Run configuration: an optional TOML file, then command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use era_core::train::classifier::ClassifierConfig;
use era_core::train::grpo::ToyGrpoConfig;
use era_core::train::sac::SacConfig;
use era_core::EnvKind;
use serde::{Deserialize, Serialize};

/// Bad flags, bad config files, or inputs that cannot be combined. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainKind {
    Sac,
    SacEra,
    Classifier,
    GrpoToy,
    GrpoEraToy,
}

impl TrainKind {
    pub const NAMES: [&'static str; 5] = ["sac", "sac-era", "classifier", "grpo-toy", "grpo-era-toy"];

    pub fn name(self) -> &'static str {
        match self {
            TrainKind::Sac => "sac",
            TrainKind::SacEra => "sac-era",
            TrainKind::Classifier => "classifier",
            TrainKind::GrpoToy => "grpo-toy",
            TrainKind::GrpoEraToy => "grpo-era-toy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sac" => TrainKind::Sac,
            "sac-era" => TrainKind::SacEra,
            "classifier" => TrainKind::Classifier,
            "grpo-toy" => TrainKind::GrpoToy,
            "grpo-era-toy" => TrainKind::GrpoEraToy,
            _ => return None,
        })
    }

    fn default_steps(self) -> usize {
        match self {
            TrainKind::Sac | TrainKind::SacEra => 20_000,
            TrainKind::Classifier => 0,
            TrainKind::GrpoToy | TrainKind::GrpoEraToy => 300,
        }
    }
}

/// The on-disk layout. `seeds` is required; everything else has a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Vec<u64>,
    pub steps: Option<usize>,
    pub env: Option<EnvKind>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub grpo: ToyGrpoConfig,
}

impl FileConfig {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage(format!("{}: {e}", path.display())),
        };
        match toml::from_str(&text) {
            Ok(c) => Ok(c),
            Err(e) => usage(format!("{}: {e}", path.display())),
        }
    }
}

/// Flags that override config keys; `None` leaves the key alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub env: Option<EnvKind>,
    pub steps: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub omega_low: Option<f64>,
    pub omega_high: Option<f64>,
    pub k: Option<f64>,
    pub h0: Option<f64>,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub tau: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Everything one `train` invocation needs, validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kind: TrainKind,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub env: EnvKind,
    pub out_dir: PathBuf,
    pub sac: SacConfig,
    pub classifier: ClassifierConfig,
    pub grpo: ToyGrpoConfig,
}

fn reject(kind: TrainKind, flag: &str, given: bool) -> anyhow::Result<()> {
    if given {
        usage(format!("{flag} does not apply to `train {}`", kind.name()))
    } else {
        Ok(())
    }
}

impl RunConfig {
    pub fn build(kind: TrainKind, file: Option<FileConfig>, o: Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(f) => RunConfig {
                kind,
                seeds: f.seeds,
                steps: f.steps.unwrap_or(kind.default_steps()),
                env: f.env.unwrap_or(EnvKind::Pointmass),
                out_dir: f.out_dir.unwrap_or_else(|| PathBuf::from("era-runs")),
                sac: f.sac,
                classifier: f.classifier,
                grpo: f.grpo,
            },
            None => RunConfig {
                kind,
                seeds: vec![0],
                steps: kind.default_steps(),
                env: EnvKind::Pointmass,
                out_dir: PathBuf::from("era-runs"),
                sac: SacConfig::default(),
                classifier: ClassifierConfig::default(),
                grpo: ToyGrpoConfig::default(),
            },
        };
        let is_sac = matches!(kind, TrainKind::Sac | TrainKind::SacEra);
        if !is_sac {
            reject(kind, "--env", o.env.is_some())?;
            reject(kind, "--sigma-min", o.sigma_min.is_some())?;
            reject(kind, "--sigma-max", o.sigma_max.is_some())?;
        }
        if kind == TrainKind::Classifier {
            reject(kind, "--steps", o.steps.is_some())?;
        }
        if kind != TrainKind::GrpoEraToy {
            reject(kind, "--omega-low", o.omega_low.is_some())?;
            reject(kind, "--omega-high", o.omega_high.is_some())?;
            reject(kind, "--k", o.k.is_some())?;
        }
        if matches!(kind, TrainKind::Sac | TrainKind::GrpoToy | TrainKind::GrpoEraToy) {
            reject(kind, "--h0", o.h0.is_some())?;
        }
        if matches!(kind, TrainKind::GrpoToy | TrainKind::GrpoEraToy) {
            reject(kind, "--tau", o.tau.is_some())?;
        }

        if let Some(v) = o.env {
            cfg.env = v;
        }
        if let Some(v) = o.steps {
            cfg.steps = v;
        }
        if let Some(v) = o.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = o.out_dir {
            cfg.out_dir = v;
        }
        if let Some(v) = o.omega_low {
            cfg.grpo.era.omega_low = v;
        }
        if let Some(v) = o.omega_high {
            cfg.grpo.era.omega_high = if v.is_infinite() { None } else { Some(v) };
        }
        if let Some(v) = o.k {
            cfg.grpo.era.k = v;
        }
        if let Some(v) = o.h0 {
            match kind {
                TrainKind::SacEra => cfg.sac.target_entropy = Some(v),
                _ => cfg.classifier.target_entropy = Some(v),
            }
        }
        if let Some(v) = o.sigma_min {
            cfg.sac.sigma_min = v;
        }
        if let Some(v) = o.sigma_max {
            cfg.sac.sigma_max = v;
        }
        if let Some(v) = o.tau {
            match kind {
                TrainKind::Classifier => cfg.classifier.tau = v,
                _ => cfg.sac.tau = v,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return usage("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return usage("seeds must be distinct");
        }
        let checked = match self.kind {
            TrainKind::Sac | TrainKind::SacEra => {
                if self.steps == 0 {
                    return usage("--steps must be positive");
                }
                self.sac.validate().and_then(|_| {
                    if self.kind == TrainKind::SacEra {
                        self.sac.era_config(self.env.act_dim()).map(|_| ())
                    } else {
                        Ok(())
                    }
                })
            }
            TrainKind::Classifier => self.classifier.validate(),
            TrainKind::GrpoToy | TrainKind::GrpoEraToy => {
                if self.steps == 0 {
                    return usage("--steps must be positive");
                }
                self.grpo.validate()
            }
        };
        match checked {
            Ok(()) => Ok(()),
            Err(e) => usage(e.to_string()),
        }
    }

    /// The section that configures this run, for record headers.
    pub fn section(&self) -> serde_json::Value {
        let v = match self.kind {
            TrainKind::Sac | TrainKind::SacEra => serde_json::to_value(&self.sac),
            TrainKind::Classifier => serde_json::to_value(&self.classifier),
            TrainKind::GrpoToy | TrainKind::GrpoEraToy => serde_json::to_value(&self.grpo),
        };
        v.unwrap_or(serde_json::Value::Null)
    }
}

/// A comma-separated seed list as one flag value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<SeedList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed {p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(SeedList)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> anyhow::Result<FileConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        FileConfig::read(&p)
    }

    #[test]
    fn missing_and_unknown_fields_are_usage_errors() {
        let e = file("steps = 10\n").unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        assert!(e.to_string().contains("seeds"), "{e}");
        let e = file("seeds = [0]\n[sac]\ngama = 0.9\n").unwrap_err();
        assert!(e.to_string().contains("gama"), "{e}");
    }

    #[test]
    fn flags_override_file_values() {
        let f = file("seeds = [4]\nsteps = 50\n[grpo]\nlr = 0.01\n[grpo.era]\nomega_low = 0.3\nk = 3.0\n").unwrap();
        let o = Overrides {
            omega_low: Some(0.45),
            seeds: Some(vec![1, 2]),
            ..Overrides::default()
        };
        let cfg = RunConfig::build(TrainKind::GrpoEraToy, Some(f), o).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.grpo.lr, 0.01);
        assert_eq!(cfg.grpo.era.omega_low, 0.45);
        assert_eq!(cfg.grpo.era.k, 3.0);
    }

    #[test]
    fn flags_for_other_kinds_are_rejected() {
        let o = Overrides {
            omega_low: Some(0.45),
            ..Overrides::default()
        };
        assert!(RunConfig::build(TrainKind::Sac, None, o).is_err());
        let o = Overrides {
            sigma_min: Some(2.0),
            sigma_max: Some(1.0),
            ..Overrides::default()
        };
        let e = RunConfig::build(TrainKind::SacEra, None, o).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("0,1, 2").unwrap(), SeedList(vec![0, 1, 2]));
        assert!(parse_seeds("0,x").is_err());
    }
}
