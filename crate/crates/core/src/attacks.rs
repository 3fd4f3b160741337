//! Malicious client behaviors: the generator-driven attack and the two
//! baselines (label flipping and update boosting).

use alloc::borrow::Cow;
use alloc::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{mix_poison_evicting, Shard};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::psg::{flip_source_labels, generate_poison_set, PoisonGenerator, PsgConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Poicgan,
    TdpLabelFlip,
    TmpBoost,
    /// Reserved; selecting it is a configuration error.
    Ada,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub source: usize,
    pub target: usize,
    /// Update multiplier, `tmp_boost` only.
    pub boost: Option<f64>,
    /// Generator settings, `poicgan` only.
    pub psg: Option<PsgConfig>,
}

impl AttackSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.kind == AttackKind::Ada {
            return fail("attack kind `ada` is reserved and not implemented");
        }
        if self.kind != AttackKind::None {
            if self.source == self.target {
                return fail("attack source and target must differ");
            }
            if self.source >= num_classes || self.target >= num_classes {
                return fail("attack source/target outside the label space");
            }
        }
        match (self.kind, self.boost) {
            (AttackKind::TmpBoost, Some(b)) if b > 0.0 && b.is_finite() => {}
            (AttackKind::TmpBoost, _) => return fail("tmp_boost needs a positive `boost`"),
            (_, Some(_)) => return fail("`boost` is only valid for tmp_boost"),
            _ => {}
        }
        match (&self.psg, self.kind) {
            (Some(p), AttackKind::Poicgan) => {
                p.validate()?;
                if p.source != self.source || p.target != self.target {
                    return fail("psg source/target must match the attack's");
                }
            }
            (None, AttackKind::Poicgan) => return fail("poicgan needs a `psg` configuration"),
            (Some(_), _) => return fail("`psg` is only valid for poicgan"),
            (None, _) => {}
        }
        Ok(())
    }
}

/// Relabels every sample of class `s` in the shard as `t`.
pub fn tdp_label_flip(shard: &Shard, s: usize, t: usize) -> Result<Shard> {
    Ok(Shard { samples: flip_source_labels(&shard.samples, s, t)?, origin: shard.origin.clone() })
}

/// `global + boost * (local - global)`.
pub fn tmp_boost(global: &ParamVector, local: &ParamVector, boost: f64) -> Result<ParamVector> {
    crate::fl::scale_update(global, local, boost)
}

/// An attack bound to one client's clean shard. Immutable once built.
#[derive(Clone, Debug)]
pub struct MaliciousClient {
    spec: AttackSpec,
    shard: Shard,
    generator: Option<Arc<PoisonGenerator>>,
    poison_ratio: f64,
}

/// Binds `spec` to `shard`. `generator` must be supplied exactly for
/// `poicgan`; `poison_ratio` is the share of the shard replaced by poison.
pub fn build_malicious_client(
    spec: &AttackSpec,
    shard: Shard,
    generator: Option<Arc<PoisonGenerator>>,
    poison_ratio: f64,
) -> Result<MaliciousClient> {
    if spec.kind == AttackKind::Ada {
        return Err(Error::config("attack kind `ada` is reserved and not implemented"));
    }
    if !(0.0..=1.0).contains(&poison_ratio) {
        return Err(Error::config(alloc::format!("poison ratio {poison_ratio} outside [0, 1]")));
    }
    match (spec.kind, &generator) {
        (AttackKind::Poicgan, None) => return Err(Error::config("poicgan client needs a trained generator")),
        (AttackKind::Poicgan, Some(g)) if g.target_label != spec.target => {
            return Err(Error::config("generator target differs from the attack target"))
        }
        (AttackKind::Poicgan, Some(_)) => {}
        (_, Some(_)) => return Err(Error::config("only poicgan clients take a generator")),
        (_, None) => {}
    }
    Ok(MaliciousClient { spec: spec.clone(), shard, generator, poison_ratio })
}

impl MaliciousClient {
    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn clean_shard(&self) -> &Shard {
        &self.shard
    }

    /// The data trained on in a poisoned round; `seed` drives poison sampling
    /// and mixing. Generated samples replace the clean source-class samples
    /// before anything else, so the client never trains on a correctly
    /// labelled source image while its budget allows.
    pub fn training_shard(&self, seed: u64) -> Result<Cow<'_, Shard>> {
        match self.spec.kind {
            AttackKind::None | AttackKind::TmpBoost => Ok(Cow::Borrowed(&self.shard)),
            AttackKind::TdpLabelFlip => {
                Ok(Cow::Owned(tdp_label_flip(&self.shard, self.spec.source, self.spec.target)?))
            }
            AttackKind::Poicgan => {
                let generator = self.generator.as_deref().expect("checked at construction");
                let count = crate::math::round(self.poison_ratio * self.shard.len() as f64) as usize;
                let poison = generate_poison_set(generator, count, seed)?;
                Ok(Cow::Owned(mix_poison_evicting(
                    &self.shard,
                    &poison,
                    self.poison_ratio,
                    Some(self.spec.source),
                    seed,
                )?))
            }
            AttackKind::Ada => unreachable!("rejected at construction"),
        }
    }

    /// Post-training transformation of the local model before submission.
    pub fn finalize(&self, global: &ParamVector, local: ParamVector) -> Result<ParamVector> {
        match (self.spec.kind, self.spec.boost) {
            (AttackKind::TmpBoost, Some(b)) => tmp_boost(global, &local, b),
            _ => Ok(local),
        }
    }
}
