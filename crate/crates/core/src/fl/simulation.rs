use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::attacks::{build_malicious_client, AttackKind, AttackSpec, MaliciousClient};
use crate::classifier::{Classifier, ClassifierArch, TrainOptions};
use crate::data::{partition_dataset, Dataset, PartitionScheme, Shard};
use crate::defenses::{aggregate, DefenseSpec};
use crate::error::{Error, Result};
use crate::metrics::{mis_from_updates, ConfusionMatrix, MisReport};
use crate::params::ParamVector;
use crate::psg::{train_psg, PoisonGenerator};
use crate::rng::{derive_seed, TAG_DEFENSE, TAG_INIT, TAG_LOCAL, TAG_POISON};

use super::{sample_clients, scale_update, ClientUpdate, FederationConfig, Role, RoundRecord};

/// Everything a federation run needs besides the observer.
#[derive(Clone, Debug)]
pub struct FederationSetup<'a> {
    pub config: FederationConfig,
    pub arch: ClassifierArch,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub attack: AttackSpec,
    pub defense: DefenseSpec,
    /// Skips poison-generator training when supplied.
    pub generator: Option<Arc<PoisonGenerator>>,
}

/// Hook called after every aggregation.
pub trait RoundObserver {
    fn on_round(&mut self, record: &RoundRecord, global: &ParamVector, updates: &[ClientUpdate]) -> Result<()>;
}

pub struct NoopObserver;

impl RoundObserver for NoopObserver {
    fn on_round(&mut self, _: &RoundRecord, _: &ParamVector, _: &[ClientUpdate]) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub initial_params: ParamVector,
    pub final_params: ParamVector,
    pub final_confusion: ConfusionMatrix,
    /// Round whose local models were scored for stealth, and the score.
    pub mis: Option<(u32, MisReport)>,
    pub generator: Option<Arc<PoisonGenerator>>,
}

struct Client {
    shard: Shard,
    attack: Option<MaliciousClient>,
}

fn check_setup(setup: &FederationSetup<'_>) -> Result<()> {
    let c = &setup.config;
    c.validate()?;
    let k = setup.train.num_classes();
    if setup.test.num_classes() != k {
        return Err(Error::config("train and test sets disagree on the number of classes"));
    }
    if c.source_class >= k || c.target_class >= k {
        return Err(Error::config("source/target class outside the dataset's classes"));
    }
    if setup.train.image_shape() != setup.test.image_shape() {
        return Err(Error::config("train and test images differ in shape"));
    }
    setup.attack.validate(k)?;
    if setup.attack.kind != AttackKind::None
        && (setup.attack.source != c.source_class || setup.attack.target != c.target_class)
    {
        return Err(Error::config("attack source/target must match the federation's"));
    }
    Ok(())
}

fn pooled(shards: &[Shard], num_classes: usize) -> Result<Dataset> {
    let samples = shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    Dataset::new(samples, num_classes, None)
}

/// The clean data held by the attacker-controlled clients of a run, which
/// is what the poison generator is trained on.
pub fn attacker_dataset(train: &Dataset, config: &FederationConfig) -> Result<Dataset> {
    config.validate()?;
    let shards = partition_dataset(train, config.n_clients, PartitionScheme::Iid, config.seed)?;
    pooled(&shards[..config.malicious_count()], train.num_classes())
}

/// Runs `config.rounds` rounds of sampling, local training, aggregation and
/// evaluation. Clients `0..k` are attacker-controlled and deviate from round
/// `effective_poison_start()` onwards.
pub fn run_federation(setup: &FederationSetup<'_>, observer: &mut dyn RoundObserver) -> Result<FederationOutcome> {
    check_setup(setup)?;
    let c = &setup.config;
    let shape = setup
        .train
        .image_shape()
        .ok_or_else(|| Error::InvalidDataset("training set is empty".into()))?;
    let num_classes = setup.train.num_classes();
    let classifier = Classifier::new(setup.arch, shape, num_classes)?;
    let defense = setup.defense.resolve(c.pmr, c.clients_per_round)?;
    let shards = partition_dataset(setup.train, c.n_clients, PartitionScheme::Iid, c.seed)?;
    let k = if setup.attack.kind == AttackKind::None { 0 } else { c.malicious_count() };

    let generator = match (setup.attack.kind, &setup.generator, &setup.attack.psg) {
        (AttackKind::Poicgan, Some(g), _) => Some(g.clone()),
        (AttackKind::Poicgan, None, Some(psg)) if k > 0 => {
            Some(Arc::new(train_psg(&pooled(&shards[..k], num_classes)?, psg)?))
        }
        _ => None,
    };
    let clients: Vec<Client> = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| {
            let attack = if id < k {
                Some(build_malicious_client(&setup.attack, shard.clone(), generator.clone(), c.poison_ratio)?)
            } else {
                None
            };
            Ok(Client { shard, attack })
        })
        .collect::<Result<_>>()?;

    let opts = TrainOptions {
        epochs: c.local_epochs,
        lr: c.learning_rate,
        batch_size: c.batch_size,
        optimizer: c.optimizer,
    };
    let initial = classifier.init_params(derive_seed(c.seed, &[TAG_INIT]));
    let mut global = initial.clone();
    let mut records = Vec::with_capacity(c.rounds as usize);
    let poison_start = c.effective_poison_start();
    let mis_limit = c.mis_round.unwrap_or(u32::MAX);
    let mut mis_updates: Option<(u32, Vec<ClientUpdate>)> = None;

    for round in 0..c.rounds {
        let step = || -> Result<(ParamVector, RoundRecord, Vec<ClientUpdate>)> {
            let selected = sample_clients(c.n_clients, c.clients_per_round, c.seed, round)?;
            let poisoned = round >= poison_start;
            let train_one = |&id: &u32| -> Result<ClientUpdate> {
                let client = &clients[id as usize];
                let seed = derive_seed(c.seed, &[TAG_LOCAL, u64::from(round), u64::from(id)]);
                let (params, role) = match (&client.attack, poisoned) {
                    (Some(attack), true) => {
                        let data = attack.training_shard(derive_seed(
                            c.seed,
                            &[TAG_POISON, u64::from(round), u64::from(id)],
                        ))?;
                        let local = classifier.local_train(&global, &data, &opts, seed)?;
                        let local = attack.finalize(&global, local)?;
                        (scale_update(&global, &local, c.scaling_factor)?, Role::Malicious)
                    }
                    _ => (classifier.local_train(&global, &client.shard, &opts, seed)?, Role::Benign),
                };
                Ok(ClientUpdate { client_id: id, params, sample_count: client.shard.len(), round, role })
            };
            #[cfg(feature = "parallel")]
            let updates: Vec<ClientUpdate> = {
                use rayon::prelude::*;
                selected.par_iter().map(train_one).collect::<Result<_>>()?
            };
            #[cfg(not(feature = "parallel"))]
            let updates: Vec<ClientUpdate> = selected.iter().map(train_one).collect::<Result<_>>()?;

            let (next, diagnostics) =
                aggregate(&defense, &updates, &global, derive_seed(c.seed, &[TAG_DEFENSE, u64::from(round)]))?;
            if !next.is_finite() {
                return Err(Error::Divergence("aggregated model is not finite".into()));
            }
            let cm = ConfusionMatrix::evaluate(&classifier, &next, setup.test)?;
            let record = RoundRecord {
                round,
                selected_ids: selected,
                acc: cm.accuracy()?,
                asr: cm.attack_success_rate(c.source_class, c.target_class)?,
                defense_diagnostics: diagnostics,
                update_snapshot_ref: None,
            };
            Ok((next, record, updates))
        };
        let (next, record, updates) = step().map_err(|e| e.in_round(round))?;
        observer.on_round(&record, &next, &updates).map_err(|e| e.in_round(round))?;
        let both_roles = updates.iter().any(|u| u.role == Role::Malicious) && updates.iter().any(|u| u.role == Role::Benign);
        if both_roles && round <= mis_limit {
            mis_updates = Some((round, updates));
        }
        global = next;
        records.push(record);
    }

    let mis = match mis_updates {
        Some((round, updates)) => Some((round, mis_from_updates(&updates)?)),
        None => None,
    };
    let final_confusion = ConfusionMatrix::evaluate(&classifier, &global, setup.test)?;
    Ok(FederationOutcome { records, initial_params: initial, final_params: global, final_confusion, mis, generator })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_texture_dataset;
    use crate::nn::OptimizerKind;

    fn data() -> (Dataset, Dataset) {
        (synth_texture_dataset(4, 40, 16, 1).unwrap(), synth_texture_dataset(4, 25, 16, 2).unwrap())
    }

    fn config(rounds: u32) -> FederationConfig {
        FederationConfig {
            n_clients: 8,
            clients_per_round: 4,
            rounds,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            pmr: 0.0,
            seed: 3,
            ..Default::default()
        }
    }

    fn setup<'a>(c: FederationConfig, train: &'a Dataset, test: &'a Dataset) -> FederationSetup<'a> {
        FederationSetup {
            config: c,
            arch: ClassifierArch::default(),
            train,
            test,
            attack: AttackSpec::default(),
            defense: DefenseSpec::default(),
            generator: None,
        }
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let (train, test) = data();
        let out = run_federation(&setup(config(0), &train, &test), &mut NoopObserver).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_params, out.initial_params);
        assert!(out.mis.is_none());
    }

    #[test]
    fn benign_run_learns_and_is_reproducible() {
        let (train, test) = data();
        let s = setup(config(15), &train, &test);
        let a = run_federation(&s, &mut NoopObserver).unwrap();
        let last = a.records.last().unwrap();
        assert!(last.acc > 0.8, "acc {}", last.acc);
        assert!(a.records.iter().all(|r| r.selected_ids.len() == 4));
        let b = run_federation(&s, &mut NoopObserver).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn label_flip_run_records_roles_and_stealth() {
        let (train, test) = data();
        let c = FederationConfig { pmr: 0.5, poison_start_round: Some(1), ..config(3) };
        let mut s = setup(c, &train, &test);
        s.attack = AttackSpec { kind: AttackKind::TdpLabelFlip, source: 0, target: 1, ..Default::default() };
        let out = run_federation(&s, &mut NoopObserver).unwrap();
        let (round, report) = out.mis.unwrap();
        assert!(round >= 1);
        assert!(report.mis > 0.0);
        assert_eq!(report.points.len(), 4);
    }

    #[test]
    fn mismatched_attack_labels_are_rejected() {
        let (train, test) = data();
        let mut s = setup(config(1), &train, &test);
        s.attack = AttackSpec { kind: AttackKind::TdpLabelFlip, source: 2, target: 3, ..Default::default() };
        assert!(matches!(run_federation(&s, &mut NoopObserver), Err(Error::InvalidConfig(_))));
    }

    struct Failing;

    impl RoundObserver for Failing {
        fn on_round(&mut self, r: &RoundRecord, _: &ParamVector, _: &[ClientUpdate]) -> Result<()> {
            if r.round == 1 {
                return Err(Error::InvalidInput("stop".into()));
            }
            Ok(())
        }
    }

    #[test]
    fn errors_carry_the_round() {
        let (train, test) = data();
        let err = run_federation(&setup(config(3), &train, &test), &mut Failing).unwrap_err();
        assert!(matches!(err, Error::Round { round: 1, .. }));
    }
}
