//! Robust aggregation rules: Krum, robust learning rate (sign voting) and a
//! simplified FLAME (cosine clustering, norm clipping, Gaussian noise).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{aggregate_fedavg, ClientUpdate, DiagValue, Diagnostics};
use crate::math::{ceil, dot, norm, round, squared_distance};
use crate::params::ParamVector;
use crate::rng::{derived_rng, TAG_DEFENSE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    Krum,
    Rlr,
    Flame,
}

/// Defense selection. Unset hyperparameters are derived from the round size
/// by [`DefenseSpec::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Assumed number of Byzantine updates; default `round(pmr * m)`.
    pub krum_f: Option<usize>,
    /// Minimum |sign sum| to keep the learning rate positive; default `ceil(m/2) + 1`.
    pub rlr_threshold: Option<usize>,
    pub rlr_lr: f64,
    /// Noise std as a multiple of the median admitted norm.
    pub flame_noise: f64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self { kind: DefenseKind::None, krum_f: None, rlr_threshold: None, rlr_lr: 1.0, flame_noise: 0.001 }
    }
}

/// A defense with every hyperparameter fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Defense {
    FedAvg,
    Krum { f: usize },
    Rlr { threshold: usize, lr: f64 },
    Flame { noise: f64 },
}

impl DefenseSpec {
    pub fn resolve(&self, pmr: f64, m: usize) -> Result<Defense> {
        match self.kind {
            DefenseKind::None => Ok(Defense::FedAvg),
            DefenseKind::Krum => {
                let f = self.krum_f.unwrap_or(round(pmr * m as f64) as usize);
                if m < f + 3 {
                    return Err(Error::config(alloc::format!(
                        "krum with f={f} needs at least {} clients per round, got {m}",
                        f + 3
                    )));
                }
                Ok(Defense::Krum { f })
            }
            DefenseKind::Rlr => {
                let threshold = self.rlr_threshold.unwrap_or(ceil(m as f64 / 2.0) as usize + 1);
                if threshold == 0 {
                    return Err(Error::config("rlr threshold must be at least 1"));
                }
                if !(self.rlr_lr > 0.0 && self.rlr_lr.is_finite()) {
                    return Err(Error::config("rlr_lr must be positive"));
                }
                Ok(Defense::Rlr { threshold, lr: self.rlr_lr })
            }
            DefenseKind::Flame => {
                if !(self.flame_noise >= 0.0 && self.flame_noise.is_finite()) {
                    return Err(Error::config("flame_noise must be non-negative"));
                }
                if m < 2 {
                    return Err(Error::config("flame needs at least 2 clients per round"));
                }
                Ok(Defense::Flame { noise: self.flame_noise })
            }
        }
    }
}

fn check_dims(updates: &[ClientUpdate], global: Option<&ParamVector>) -> Result<()> {
    let first = &updates.first().ok_or(Error::EmptyAggregation)?.params;
    for u in updates {
        first.ensure_same_dim(&u.params)?;
    }
    if let Some(g) = global {
        g.ensure_same_dim(first)?;
    }
    Ok(())
}

/// Krum score of every update: the sum of squared distances to its
/// `n - f - 2` nearest other updates.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<f64>> {
    check_dims(updates, None)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::config(alloc::format!("krum needs n >= f + 3, got n={n}, f={f}")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(updates[i].params.as_slice(), updates[j].params.as_slice());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let keep = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_unstable_by(f64::total_cmp);
            row[..keep].iter().sum()
        })
        .collect())
}

/// The update with the lowest Krum score; ties go to the lowest client id.
pub fn krum_select(updates: &[ClientUpdate], f: usize) -> Result<&ClientUpdate> {
    let scores = krum_scores(updates, f)?;
    let best = (0..updates.len())
        .min_by(|&a, &b| {
            scores[a].total_cmp(&scores[b]).then(updates[a].client_id.cmp(&updates[b].client_id))
        })
        .expect("non-empty");
    Ok(&updates[best])
}

/// Sign-vote aggregation. Coordinates where fewer than `threshold` deltas
/// agree in sign have their step reversed.
pub fn rlr_aggregate(updates: &[ClientUpdate], global: &ParamVector, threshold: usize, lr: f64) -> Result<ParamVector> {
    Ok(rlr_with_flips(updates, global, threshold, lr)?.0)
}

fn rlr_with_flips(
    updates: &[ClientUpdate],
    global: &ParamVector,
    threshold: usize,
    lr: f64,
) -> Result<(ParamVector, usize)> {
    check_dims(updates, Some(global))?;
    if threshold == 0 {
        return Err(Error::config("rlr threshold must be at least 1"));
    }
    let n = updates.len() as f64;
    let g = global.as_slice();
    let mut flips = 0;
    let out = (0..g.len())
        .map(|j| {
            let mut votes = 0i64;
            let mut sum = 0.0;
            for u in updates {
                let d = u.params.as_slice()[j] - g[j];
                votes += if d > 0.0 { 1 } else if d < 0.0 { -1 } else { 0 };
                sum += d;
            }
            let rate = if votes.unsigned_abs() as usize >= threshold {
                lr
            } else {
                flips += 1;
                -lr
            };
            g[j] + rate * (sum / n)
        })
        .collect();
    Ok((ParamVector::new(out)?, flips))
}

/// Cosine distance, taken as 1 when either vector is zero.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Outcome of the FLAME admission and clipping stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FlameReport {
    /// Indices (into the update list) of admitted updates, ascending.
    pub admitted: Vec<usize>,
    /// Admitted indices whose delta was shrunk.
    pub clipped: Vec<usize>,
    pub median_norm: f64,
}

/// Largest connected component of the graph linking updates whose cosine
/// distance is at most the median pairwise distance. Ties favour the
/// component containing the lowest index.
pub fn flame_admit(deltas: &[Vec<f64>]) -> Vec<usize> {
    let n = deltas.len();
    let mut dist = vec![0.0; n * n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&deltas[i], &deltas[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            pairs.push(d);
        }
    }
    if pairs.is_empty() {
        return (0..n).collect();
    }
    pairs.sort_unstable_by(f64::total_cmp);
    let threshold = median_sorted(&pairs);
    let mut comp = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = start;
        let mut members = vec![start];
        let mut k = 0;
        while k < members.len() {
            let i = members[k];
            for j in 0..n {
                if comp[j] == usize::MAX && dist[i * n + j] <= threshold {
                    comp[j] = start;
                    members.push(j);
                }
            }
            k += 1;
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    best.sort_unstable();
    best
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// FLAME-style aggregation; `seed` drives the injected noise.
pub fn flame_aggregate(updates: &[ClientUpdate], global: &ParamVector, noise: f64, seed: u64) -> Result<ParamVector> {
    Ok(flame_with_report(updates, global, noise, seed)?.0)
}

fn flame_with_report(
    updates: &[ClientUpdate],
    global: &ParamVector,
    noise: f64,
    seed: u64,
) -> Result<(ParamVector, FlameReport)> {
    check_dims(updates, Some(global))?;
    if updates.len() < 2 {
        return Err(Error::config("flame needs at least 2 updates"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("flame noise must be non-negative"));
    }
    let deltas: Vec<Vec<f64>> = updates.iter().map(|u| u.params.delta_from(global)).collect::<Result<_>>()?;
    let admitted = flame_admit(&deltas);
    let mut norms: Vec<f64> = admitted.iter().map(|&i| norm(&deltas[i])).collect();
    let raw_norms = norms.clone();
    norms.sort_unstable_by(f64::total_cmp);
    let median_norm = median_sorted(&norms);
    let dim = global.dim();
    let mut mean = vec![0.0; dim];
    let mut clipped = Vec::new();
    if median_norm > 0.0 {
        for (&i, &nrm) in admitted.iter().zip(&raw_norms) {
            let factor = if nrm > median_norm {
                clipped.push(i);
                median_norm / nrm
            } else {
                1.0
            };
            for (m, d) in mean.iter_mut().zip(&deltas[i]) {
                *m += factor * d;
            }
        }
        let k = admitted.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
    }
    let std = noise * median_norm;
    let mut out: Vec<f64> = global.as_slice().iter().zip(&mean).map(|(g, m)| g + m).collect();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(alloc::format!("{e}")))?;
        let mut rng = derived_rng(seed, &[TAG_DEFENSE]);
        out.iter_mut().for_each(|o| *o += normal.sample(&mut rng));
    }
    Ok((ParamVector::new(out)?, FlameReport { admitted, clipped, median_norm }))
}

fn ids(updates: &[ClientUpdate], idx: impl IntoIterator<Item = usize>) -> DiagValue {
    DiagValue::Ids(idx.into_iter().map(|i| updates[i].client_id).collect())
}

fn diag(entries: Vec<(&str, DiagValue)>) -> Diagnostics {
    entries.into_iter().map(|(k, v)| (String::from(k), v)).collect()
}

/// Aggregates one round's updates under `defense`, returning the new global
/// model and named diagnostics.
pub fn aggregate(
    defense: &Defense,
    updates: &[ClientUpdate],
    global: &ParamVector,
    seed: u64,
) -> Result<(ParamVector, Diagnostics)> {
    match *defense {
        Defense::FedAvg => Ok((aggregate_fedavg(updates)?, Diagnostics::new())),
        Defense::Krum { f } => {
            let chosen = krum_select(updates, f)?;
            let excluded: Vec<u32> =
                updates.iter().map(|u| u.client_id).filter(|&id| id != chosen.client_id).collect();
            Ok((
                chosen.params.clone(),
                diag(vec![
                    ("selected", DiagValue::Ids(vec![chosen.client_id])),
                    ("excluded", DiagValue::Ids(excluded)),
                ]),
            ))
        }
        Defense::Rlr { threshold, lr } => {
            let (params, flips) = rlr_with_flips(updates, global, threshold, lr)?;
            Ok((params, diag(vec![("flipped_coords", DiagValue::Number(flips as f64))])))
        }
        Defense::Flame { noise } => {
            let (params, report) = flame_with_report(updates, global, noise, seed)?;
            let excluded = (0..updates.len()).filter(|i| !report.admitted.contains(i));
            Ok((
                params,
                diag(vec![
                    ("admitted", ids(updates, report.admitted.iter().copied())),
                    ("excluded", ids(updates, excluded)),
                    ("clipped", ids(updates, report.clipped.iter().copied())),
                    ("median_norm", DiagValue::Number(report.median_norm)),
                ]),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::Role;

    fn up(id: u32, v: Vec<f64>) -> ClientUpdate {
        ClientUpdate { client_id: id, params: ParamVector::new(v).unwrap(), sample_count: 1, round: 0, role: Role::Benign }
    }

    /// Exhaustive Krum: for each candidate, enumerate every subset of size
    /// n-f-2 of the others and take the smallest distance sum.
    fn krum_oracle(updates: &[ClientUpdate], f: usize) -> u32 {
        let n = updates.len();
        let keep = n - f - 2;
        let mut best: Option<(f64, u32)> = None;
        for i in 0..n {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut score = f64::INFINITY;
            for mask in 0u32..(1 << others.len()) {
                if mask.count_ones() as usize != keep {
                    continue;
                }
                let s: f64 = others
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask & (1 << b) != 0)
                    .map(|(_, &j)| {
                        updates[i].params.as_slice().iter().zip(updates[j].params.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    })
                    .sum();
                score = score.min(s);
            }
            let id = updates[i].client_id;
            best = match best {
                Some((bs, bid)) if bs < score || (bs == score && bid < id) => Some((bs, bid)),
                _ => Some((score, id)),
            };
        }
        best.unwrap().1
    }

    #[test]
    fn krum_examples() {
        let same: Vec<_> = [3, 1, 2, 5].iter().map(|&id| up(id, vec![1.0, 1.0])).collect();
        assert_eq!(krum_select(&same, 1).unwrap().client_id, 1);
        let ups = vec![up(0, vec![0.0]), up(1, vec![0.0]), up(2, vec![0.0]), up(3, vec![10.0])];
        let chosen = krum_select(&ups, 1).unwrap();
        assert_eq!(chosen.params.as_slice(), &[0.0]);
        assert_eq!(chosen.client_id, krum_oracle(&ups, 1));
        assert!(matches!(krum_select(&ups[..3], 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rlr_examples() {
        let g = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let ups = vec![up(0, vec![1.0, 1.0]), up(1, vec![1.0, -1.0]), up(2, vec![1.0, -1.0])];
        let out = rlr_aggregate(&ups, &g, 2, 1.0).unwrap();
        // coordinate 0: |s|=3 keeps +lr; coordinate 1: |s|=1 flips to -lr
        assert_eq!(out.as_slice(), &[1.0, 1.0 / 3.0]);
        let same_sign = vec![up(0, vec![1.0, -2.0]), up(1, vec![3.0, -4.0])];
        assert_eq!(rlr_aggregate(&same_sign, &g, 2, 0.5).unwrap().as_slice(), &[1.0, -1.5]);
        let zero = vec![up(0, vec![0.0, 0.0]), up(1, vec![0.0, 0.0])];
        assert_eq!(rlr_aggregate(&zero, &g, 1, 1.0).unwrap(), g);
        assert!(rlr_aggregate(&ups, &ParamVector::zeros(3), 2, 1.0).is_err());
    }

    #[test]
    fn flame_examples() {
        let g = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let same = vec![up(0, vec![2.0, 3.0]), up(1, vec![2.0, 3.0]), up(2, vec![2.0, 3.0])];
        assert_eq!(flame_aggregate(&same, &g, 0.0, 0).unwrap().as_slice(), &[2.0, 3.0]);

        let mut ups: Vec<_> = (0..4).map(|i| up(i, vec![1.0 + 0.1 * i as f64, 0.0])).collect();
        ups.push(up(4, vec![-1.0, 0.0]));
        let (out, report) = flame_with_report(&ups, &g, 0.0, 0).unwrap();
        assert_eq!(report.admitted, vec![0, 1, 2, 3]);
        assert!(out.as_slice()[0] > 0.0 && out.as_slice()[1] == 0.0);

        // one delta of norm 10 among norm-2 deltas is clipped to 2
        let ups = vec![up(0, vec![2.0, 0.0]), up(1, vec![2.0, 0.0]), up(2, vec![10.0, 0.0])];
        let (out, report) = flame_with_report(&ups, &g, 0.0, 0).unwrap();
        assert_eq!(report.median_norm, 2.0);
        assert_eq!(report.clipped, vec![2]);
        assert_eq!(out.as_slice(), &[2.0, 0.0]);

        let zeros = vec![up(0, vec![0.0, 0.0]), up(1, vec![0.0, 0.0])];
        assert_eq!(flame_aggregate(&zeros, &g, 0.5, 0).unwrap(), g);
        assert!(flame_aggregate(&zeros[..1], &g, 0.0, 0).is_err());
    }

    #[test]
    fn flame_noise_averages_out() {
        let g = ParamVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        let ups = vec![up(0, vec![1.0, 0.5, -0.2]), up(1, vec![0.8, 0.6, -0.1]), up(2, vec![1.2, 0.4, -0.3])];
        let exact = flame_aggregate(&ups, &g, 0.0, 0).unwrap();
        let (_, report) = flame_with_report(&ups, &g, 0.0, 0).unwrap();
        let lambda = 0.05;
        let std = lambda * report.median_norm;
        let reps = 10_000;
        let mut mean = vec![0.0; 3];
        for seed in 0..reps {
            let noisy = flame_aggregate(&ups, &g, lambda, seed).unwrap();
            for (m, v) in mean.iter_mut().zip(noisy.as_slice()) {
                *m += v / reps as f64;
            }
        }
        let se = std / libm::sqrt(reps as f64);
        for (m, e) in mean.iter().zip(exact.as_slice()) {
            assert!((m - e).abs() <= 3.0 * se, "{m} vs {e}");
        }
    }

    #[test]
    fn defaults_resolve_from_round_size() {
        let spec = DefenseSpec { kind: DefenseKind::Krum, ..Default::default() };
        assert_eq!(spec.resolve(0.4, 10).unwrap(), Defense::Krum { f: 4 });
        assert!(spec.resolve(0.4, 4).is_err());
        let spec = DefenseSpec { kind: DefenseKind::Rlr, ..Default::default() };
        assert_eq!(spec.resolve(0.4, 10).unwrap(), Defense::Rlr { threshold: 6, lr: 1.0 });
        assert_eq!(DefenseSpec::default().resolve(0.4, 10).unwrap(), Defense::FedAvg);
    }

    #[test]
    fn aggregate_reports_diagnostics() {
        let g = ParamVector::new(vec![0.0]).unwrap();
        let ups = vec![up(4, vec![0.0]), up(7, vec![0.1]), up(9, vec![0.0]), up(12, vec![10.0])];
        let (p, d) = aggregate(&Defense::Krum { f: 1 }, &ups, &g, 0).unwrap();
        assert_eq!(p.as_slice(), &[0.0]);
        assert_eq!(d["selected"], DiagValue::Ids(vec![4]));
        assert_eq!(d["excluded"], DiagValue::Ids(vec![7, 9, 12]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<ClientUpdate>, usize)> {
            (0usize..2, 1usize..5).prop_flat_map(|(f, dim)| {
                let n_min = f + 3;
                (n_min..=6).prop_flat_map(move |n| {
                    (
                        proptest::collection::vec(proptest::collection::vec(-3i32..3, dim), n),
                        proptest::collection::hash_set(0u32..50, n),
                    )
                        .prop_map(move |(vals, ids)| {
                            let ups = vals
                                .into_iter()
                                .zip(ids)
                                .map(|(v, id)| up(id, v.into_iter().map(f64::from).collect()))
                                .collect();
                            (ups, f)
                        })
                })
            })
        }

        proptest! {
            #[test]
            fn krum_matches_exhaustive_oracle((ups, f) in instance()) {
                let chosen = krum_select(&ups, f).unwrap();
                prop_assert_eq!(chosen.client_id, krum_oracle(&ups, f));
                prop_assert!(ups.iter().any(|u| u == chosen));
                let mut rev = ups.clone();
                rev.reverse();
                prop_assert_eq!(krum_select(&rev, f).unwrap().client_id, chosen.client_id);
            }

            #[test]
            fn rlr_unanimous_is_mean_step(base in proptest::collection::vec(0.01f64..5.0, 3), scales in proptest::collection::vec(0.1f64..3.0, 1..6), signs in proptest::collection::vec(any::<bool>(), 3), lr in 0.1f64..2.0) {
                let g = ParamVector::new(vec![0.5, -0.5, 1.0]).unwrap();
                let dir: Vec<f64> = base.iter().zip(&signs).map(|(b, &s)| if s { *b } else { -*b }).collect();
                let ups: Vec<ClientUpdate> = scales.iter().enumerate().map(|(i, c)| {
                    up(i as u32, g.as_slice().iter().zip(&dir).map(|(gv, d)| gv + c * d).collect())
                }).collect();
                let n = ups.len();
                let out = rlr_aggregate(&ups, &g, n, lr).unwrap();
                for j in 0..3 {
                    let mean = ups.iter().map(|u| u.params.as_slice()[j] - g.as_slice()[j]).sum::<f64>() / n as f64;
                    prop_assert!((out.as_slice()[j] - (g.as_slice()[j] + lr * mean)).abs() <= 1e-12);
                }
            }

            #[test]
            fn flame_without_noise_is_deterministic(vals in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..7)) {
                let g = ParamVector::zeros(3);
                let ups: Vec<ClientUpdate> = vals.into_iter().enumerate().map(|(i, v)| up(i as u32, v)).collect();
                prop_assert_eq!(flame_aggregate(&ups, &g, 0.0, 1).unwrap(), flame_aggregate(&ups, &g, 0.0, 2).unwrap());
            }
        }
    }
}
