//! Federated protocol primitives and the round-loop driver.

mod simulation;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::round;
use crate::nn::OptimizerKind;
use crate::params::ParamVector;
use crate::rng::{derived_rng, TAG_SAMPLE};

pub use simulation::{attacker_dataset, run_federation, FederationOutcome, FederationSetup, NoopObserver, RoundObserver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Malicious,
}

/// A local model submitted to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ParamVector,
    pub sample_count: usize,
    pub round: u32,
    pub role: Role,
}

/// Protocol and threat-model knobs of one federation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Fraction of all clients controlled by the attacker; `k = round(pmr * N)`.
    pub pmr: f64,
    /// First poisoned round. `None` means 50 for runs of at least 200
    /// rounds and `rounds / 4` otherwise.
    pub poison_start_round: Option<u32>,
    pub scaling_factor: f64,
    /// Fraction of a malicious client's shard replaced by poison samples.
    pub poison_ratio: f64,
    pub source_class: usize,
    pub target_class: usize,
    /// Round whose local models feed the stealth metric; `None` is the last.
    pub mis_round: Option<u32>,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 20,
            clients_per_round: 10,
            rounds: 200,
            local_epochs: 2,
            learning_rate: 1e-4,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            pmr: 0.4,
            poison_start_round: None,
            scaling_factor: 1.0,
            poison_ratio: 1.0,
            source_class: 0,
            target_class: 1,
            mis_round: None,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_clients == 0 {
            return fail("n_clients must be positive".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return fail(alloc::format!(
                "clients_per_round must be in [1, {}], got {}",
                self.n_clients, self.clients_per_round
            ));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pmr) {
            return fail(alloc::format!("pmr must be in [0, 1], got {}", self.pmr));
        }
        if !(self.scaling_factor > 0.0 && self.scaling_factor.is_finite()) {
            return fail("scaling_factor must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.poison_ratio) {
            return fail(alloc::format!("poison_ratio must be in [0, 1], got {}", self.poison_ratio));
        }
        if self.source_class == self.target_class {
            return fail("source_class and target_class must differ".into());
        }
        Ok(())
    }

    /// Number of attacker-controlled clients.
    pub fn malicious_count(&self) -> usize {
        (round(self.pmr * self.n_clients as f64) as usize).min(self.n_clients)
    }

    pub fn effective_poison_start(&self) -> u32 {
        self.poison_start_round.unwrap_or(if self.rounds >= 200 { 50 } else { self.rounds / 4 })
    }
}

/// Named per-round diagnostic emitted by the aggregation rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiagValue {
    Number(f64),
    Ids(Vec<u32>),
}

pub type Diagnostics = BTreeMap<String, DiagValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub selected_ids: Vec<u32>,
    pub acc: f64,
    pub asr: f64,
    pub defense_diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_snapshot_ref: Option<String>,
}

/// Draws `m` distinct client ids from `[0, pool_size)`, sorted ascending. The
/// draw depends only on `(seed, round)`.
pub fn sample_clients(pool_size: usize, m: usize, seed: u64, round: u32) -> Result<Vec<u32>> {
    if m == 0 || m > pool_size {
        return Err(Error::config(alloc::format!("cannot sample {m} of {pool_size} clients")));
    }
    let mut rng = derived_rng(seed, &[TAG_SAMPLE, u64::from(round)]);
    let mut ids: Vec<u32> =
        rand::seq::index::sample(&mut rng, pool_size, m).into_iter().map(|i| i as u32).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-count weighted average of the submitted parameters.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::EmptyAggregation)?;
    let dim = first.params.dim();
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::InvalidInput("updates carry no samples".into()));
    }
    let mut out = vec![0.0; dim];
    for u in updates {
        first.params.ensure_same_dim(&u.params)?;
        let weight = u.sample_count as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(u.params.as_slice()) {
            *o += weight * v;
        }
    }
    ParamVector::new(out)
}

/// Model-replacement scaling: `global + gamma * (local - global)`.
pub fn scale_update(global: &ParamVector, local: &ParamVector, gamma: f64) -> Result<ParamVector> {
    global.ensure_same_dim(local)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(alloc::format!("scaling factor {gamma} must be positive")));
    }
    if gamma == 1.0 {
        return Ok(local.clone());
    }
    let out = global
        .as_slice()
        .iter()
        .zip(local.as_slice())
        .map(|(g, l)| g + gamma * (l - g))
        .collect();
    ParamVector::new(out)
}
