//! Experiment configuration files (TOML) and sweep specifications.

use std::path::{Path, PathBuf};

use fplab_core::attacks::{AttackKind, AttackSpec};
use fplab_core::classifier::ClassifierArch;
use fplab_core::data::{synth_texture_dataset, Dataset};
use fplab_core::defenses::DefenseSpec;
use fplab_core::fl::FederationConfig;
use fplab_core::psg::{GeneratorLossForm, NoiseDist, PsgConfig};
use fplab_core::rng::{derive_seed, TAG_PSG};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image_folder, split_dataset};
use crate::error::{HarnessError, Result};

const TAG_DATA: u64 = 0x10;

/// Where the experiment's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_size")]
        size: usize,
    },
    Folder {
        path: PathBuf,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_classes() -> usize {
    4
}
fn default_per_class() -> usize {
    100
}
fn default_test_per_class() -> usize {
    50
}
fn default_size() -> usize {
    16
}
fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: default_classes(),
            per_class: default_per_class(),
            test_per_class: default_test_per_class(),
            size: default_size(),
        }
    }
}

/// Generator training knobs. Source, target and seed come from the
/// federation section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsgSettings {
    pub iterations: u32,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub noise_dist: NoiseDist,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub arch_scale: usize,
    pub generator_loss_form: GeneratorLossForm,
}

impl Default for PsgSettings {
    fn default() -> Self {
        let d = PsgConfig::default();
        Self {
            iterations: d.iterations,
            batch_size: d.batch_size,
            noise_dim: d.noise_dim,
            noise_dist: d.noise_dist,
            gen_lr: d.gen_lr,
            disc_lr: d.disc_lr,
            beta1: d.beta1,
            beta2: d.beta2,
            arch_scale: d.arch_scale,
            generator_loss_form: d.generator_loss_form,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub boost: Option<f64>,
}

/// One experiment: everything needed to reproduce a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub classifier: ClassifierArch,
    pub dataset: DatasetSpec,
    pub federation: FederationConfig,
    pub psg: PsgSettings,
    pub attack: AttackSettings,
    pub defense: DefenseSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/experiment"),
            classifier: ClassifierArch::default(),
            dataset: DatasetSpec::default(),
            federation: FederationConfig::default(),
            psg: PsgSettings::default(),
            attack: AttackSettings::default(),
            defense: DefenseSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Validation(m) => HarnessError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Field-level consistency checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Validation(m));
        let f = &self.federation;
        f.validate().map_err(|e| HarnessError::Validation(format!("federation: {e}")))?;
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, per_class, test_per_class, size } => {
                if *num_classes < 2 || *size < 8 {
                    return fail("dataset: synthetic data needs num_classes >= 2 and size >= 8".into());
                }
                if *per_class == 0 || *test_per_class == 0 {
                    return fail("dataset: per_class and test_per_class must be positive".into());
                }
                if f.source_class >= *num_classes || f.target_class >= *num_classes {
                    return fail("federation: source/target class outside the dataset's classes".into());
                }
                if num_classes * per_class < f.n_clients {
                    return fail("dataset: fewer training samples than clients".into());
                }
            }
            DatasetSpec::Folder { size, test_fraction, .. } => {
                if *size < 8 {
                    return fail("dataset: size must be at least 8".into());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return fail("dataset: test_fraction must be in (0, 1)".into());
                }
            }
        }
        if let DatasetSpec::Synthetic { num_classes, .. } = self.dataset {
            self.attack_spec().validate(num_classes).map_err(|e| HarnessError::Validation(format!("attack: {e}")))?;
        }
        if self.attack.kind == AttackKind::Poicgan {
            self.psg_config().validate().map_err(|e| HarnessError::Validation(format!("psg: {e}")))?;
        }
        self.defense
            .resolve(f.pmr, f.clients_per_round)
            .map_err(|e| HarnessError::Validation(format!("defense: {e}")))?;
        Ok(())
    }

    /// Generator settings with the run's labels and a seed derived from the
    /// federation seed.
    pub fn psg_config(&self) -> PsgConfig {
        let p = &self.psg;
        PsgConfig {
            iterations: p.iterations,
            batch_size: p.batch_size,
            noise_dim: p.noise_dim,
            noise_dist: p.noise_dist,
            source: self.federation.source_class,
            target: self.federation.target_class,
            gen_lr: p.gen_lr,
            disc_lr: p.disc_lr,
            beta1: p.beta1,
            beta2: p.beta2,
            arch_scale: p.arch_scale,
            generator_loss_form: p.generator_loss_form,
            seed: derive_seed(self.federation.seed, &[TAG_PSG]),
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        let kind = self.attack.kind;
        AttackSpec {
            kind,
            source: self.federation.source_class,
            target: self.federation.target_class,
            boost: self.attack.boost,
            psg: (kind == AttackKind::Poicgan).then(|| self.psg_config()),
        }
    }

    /// Train and test splits. Unreadable image files are skipped and
    /// reported in the returned warnings.
    pub fn load_data(&self) -> Result<(Dataset, Dataset, Vec<String>)> {
        let seed = derive_seed(self.federation.seed, &[TAG_DATA]);
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, per_class, test_per_class, size } => {
                let train = synth_texture_dataset(*num_classes, *per_class, *size, derive_seed(seed, &[0]))?;
                let test = synth_texture_dataset(*num_classes, *test_per_class, *size, derive_seed(seed, &[1]))?;
                Ok((train, test, Vec::new()))
            }
            DatasetSpec::Folder { path, size, test_fraction } => {
                let (all, warnings) = load_image_folder(path, *size)?;
                let (train, test) = split_dataset(&all, *test_fraction, derive_seed(seed, &[2]))?;
                let k = train.num_classes();
                self.attack_spec().validate(k).map_err(|e| HarnessError::Validation(format!("attack: {e}")))?;
                if self.federation.source_class >= k || self.federation.target_class >= k {
                    return Err(HarnessError::Validation("federation: source/target class outside the dataset's classes".into()));
                }
                Ok((train, test, warnings))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Pmr,
    PsgIterations,
    ScalingFactor,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Pmr => "pmr",
            SweepParam::PsgIterations => "psg_iterations",
            SweepParam::ScalingFactor => "scaling_factor",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pmr" => Ok(SweepParam::Pmr),
            "psg_iterations" => Ok(SweepParam::PsgIterations),
            "scaling_factor" => Ok(SweepParam::ScalingFactor),
            other => Err(HarnessError::Validation(format!(
                "unknown sweep parameter {other:?}; expected pmr, psg_iterations or scaling_factor"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Degenerate single-value sweeps are accepted so a sweep can reproduce
    /// one run; everything else follows the usual contract.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::Validation("sweep needs at least one value and one seed".into()));
        }
        for &v in &self.values {
            let ok = match self.param {
                SweepParam::Pmr => (0.0..=1.0).contains(&v),
                SweepParam::PsgIterations => v >= 1.0 && v.fract() == 0.0,
                SweepParam::ScalingFactor => v > 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(HarnessError::Validation(format!("invalid {} value {v}", self.param.name())));
            }
        }
        Ok(())
    }

    /// Base config with the swept value and seed applied.
    pub fn apply(&self, base: &ExperimentConfig, value: f64, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self.param {
            SweepParam::Pmr => cfg.federation.pmr = value,
            SweepParam::PsgIterations => cfg.psg.iterations = value as u32,
            SweepParam::ScalingFactor => cfg.federation.scaling_factor = value,
        }
        cfg.federation.seed = seed;
        cfg
    }
}

/// Parses a comma-separated list.
pub fn parse_csv_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| HarnessError::Validation(format!("bad {what} entry {s:?}"))))
        .collect()
}

/// Reference desk-scale configuration: 4-class 16x16 textures, 20 clients,
/// 100 rounds.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(include_str!("../configs/desk.toml")).expect("bundled desk config is valid")
}
