//! Evaluation metrics: accuracy, attack success rate and the model
//! indistinguishability score (inverse distance between role centroids of
//! PCA-projected local models).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{ClientUpdate, Role};
use crate::math::{abs, sqrt};
use crate::params::ParamVector;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(truth.len(), predicted.len()));
        }
        let mut counts = vec![0; num_classes * num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidInput(alloc::format!("label pair ({t}, {p}) out of range")));
            }
            counts[t * num_classes + p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    /// Evaluates `params` on every test sample.
    pub fn evaluate(classifier: &Classifier, params: &ParamVector, test: &Dataset) -> Result<Self> {
        let predicted = classifier.predict(params, test.samples())?;
        let truth: Vec<usize> = test.samples().iter().map(|s| s.label).collect();
        Self::from_predictions(test.num_classes(), &truth, &predicted)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidInput("accuracy of an empty test set".into()));
        }
        Ok(self.correct() as f64 / total as f64)
    }

    /// Share of class-`s` samples predicted as `t`.
    pub fn attack_success_rate(&self, s: usize, t: usize) -> Result<f64> {
        if s == t {
            return Err(Error::config("source and target must differ"));
        }
        if s >= self.num_classes || t >= self.num_classes {
            return Err(Error::InvalidInput("source/target out of range".into()));
        }
        let n_source = self.row_total(s);
        if n_source == 0 {
            return Err(Error::InvalidInput("test set has no source-class samples".into()));
        }
        Ok(self.get(s, t) as f64 / n_source as f64)
    }

    /// Per-class recall; `None` for classes absent from the test set.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let n = self.row_total(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect()
    }
}

pub fn accuracy(classifier: &Classifier, params: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty test set".into()));
    }
    ConfusionMatrix::evaluate(classifier, params, test)?.accuracy()
}

pub fn attack_success_rate(
    classifier: &Classifier,
    params: &ParamVector,
    test: &Dataset,
    s: usize,
    t: usize,
) -> Result<f64> {
    ConfusionMatrix::evaluate(classifier, params, test)?.attack_success_rate(s, t)
}

/// Eigen-decomposition of a symmetric matrix (row-major, `n x n`) by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (abs(theta) + sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// Rows projected onto the leading principal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// One entry per input row, `out_dims` coordinates each.
    pub points: Vec<Vec<f64>>,
    /// Variance captured by each output component.
    pub variances: Vec<f64>,
    /// Components missing because the data has lower rank; they are zero.
    pub degenerate_components: Vec<usize>,
}

/// PCA of the mean-centred rows through the `m x m` Gram matrix, so the cost
/// is independent of the parameter dimension. Each principal axis is signed
/// so that its largest-magnitude entry is positive.
pub fn pca_project<R: AsRef<[f64]>>(rows: &[R], out_dims: usize) -> Result<Projection> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::InvalidInput("pca needs at least 2 rows".into()));
    }
    let d = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::InvalidInput("pca rows differ in length".into()));
    }
    if out_dims == 0 || out_dims > m.min(d) {
        return Err(Error::InvalidInput(alloc::format!(
            "out_dims {out_dims} must be in [1, {}]",
            m.min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (acc, v) in mean.iter_mut().zip(r.as_ref()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centred: Vec<Vec<f64>> =
        rows.iter().map(|r| r.as_ref().iter().zip(&mean).map(|(v, mu)| v - mu).collect()).collect();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let g = crate::math::dot(&centred[i], &centred[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, m);
    let lambda_max = values[0].max(0.0);
    let mut points = vec![vec![0.0; out_dims]; m];
    let mut variances = Vec::with_capacity(out_dims);
    let mut degenerate = Vec::new();
    for k in 0..out_dims {
        let lambda = values[k];
        if lambda_max == 0.0 || lambda <= 1e-10 * lambda_max {
            degenerate.push(k);
            variances.push(0.0);
            continue;
        }
        let root = sqrt(lambda);
        let u: Vec<f64> = (0..m).map(|i| vectors[i * m + k]).collect();
        // principal axis in parameter space: Xc^T u / sqrt(lambda)
        let mut best = 0.0f64;
        for j in 0..d {
            let vj: f64 = (0..m).map(|i| centred[i][j] * u[i]).sum::<f64>() / root;
            if abs(vj) > abs(best) {
                best = vj;
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            points[i][k] = sign * root * u[i];
        }
        variances.push(lambda / (m - 1) as f64);
    }
    Ok(Projection { points, variances, degenerate_components: degenerate })
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<'a> {
        Num(f64),
        Str(&'a str),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str("inf") => Ok(f64::INFINITY),
            Repr::Str(other) => Err(serde::de::Error::custom(alloc::format!("expected number or \"inf\", got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedModel {
    pub client_id: u32,
    pub role: Role,
    pub point: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisReport {
    pub benign_centroid: [f64; 2],
    pub poisoned_centroid: [f64; 2],
    pub distance: f64,
    /// `1 / distance`; `inf` when the centroids coincide.
    #[serde(with = "inf_as_string")]
    pub mis: f64,
    pub points: Vec<ProjectedModel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn centroid<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> [f64; 2] {
    let mut c = [0.0; 2];
    let mut n = 0usize;
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
        n += 1;
    }
    [c[0] / n as f64, c[1] / n as f64]
}

/// Score from already projected points.
pub fn mis(points: &[ProjectedModel]) -> Result<MisReport> {
    let of = |role: Role| points.iter().filter(move |p| p.role == role).map(|p| &p.point);
    if of(Role::Benign).next().is_none() || of(Role::Malicious).next().is_none() {
        return Err(Error::InvalidInput("mis needs at least one benign and one poisoned model".into()));
    }
    let benign = centroid(of(Role::Benign));
    let poisoned = centroid(of(Role::Malicious));
    let (dx, dy) = (benign[0] - poisoned[0], benign[1] - poisoned[1]);
    let distance = sqrt(dx * dx + dy * dy);
    let mut diagnostics = Vec::new();
    let score = if distance < 1e-12 {
        diagnostics.push(String::from("centroids coincide; score is unbounded"));
        f64::INFINITY
    } else {
        1.0 / distance
    };
    Ok(MisReport {
        benign_centroid: benign,
        poisoned_centroid: poisoned,
        distance,
        mis: score,
        points: points.to_vec(),
        diagnostics,
    })
}

/// Projects the submitted local models to 2-D and scores them by role.
pub fn mis_from_updates(updates: &[ClientUpdate]) -> Result<MisReport> {
    let rows: Vec<&[f64]> = updates.iter().map(|u| u.params.as_slice()).collect();
    let proj = pca_project(&rows, 2)?;
    let points: Vec<ProjectedModel> = updates
        .iter()
        .zip(&proj.points)
        .map(|(u, p)| ProjectedModel { client_id: u.client_id, role: u.role, point: [p[0], p[1]] })
        .collect();
    let mut report = mis(&points)?;
    for k in &proj.degenerate_components {
        report.diagnostics.push(alloc::format!("principal component {k} is degenerate and set to zero"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn pm(role: Role, x: f64, y: f64) -> ProjectedModel {
        ProjectedModel { client_id: 0, role, point: [x, y] }
    }

    #[test]
    fn accuracy_and_asr_arithmetic() {
        let truth = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3];
        let pred = [1, 1, 1, 0, 1, 1, 2, 2, 3, 3];
        let cm = ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap();
        assert_eq!(cm.attack_success_rate(0, 1).unwrap(), 0.75);
        assert_eq!(cm.accuracy().unwrap(), 0.7);
        let off: u64 = (0..4).flat_map(|t| (0..4).map(move |p| (t, p))).filter(|(t, p)| t != p).map(|(t, p)| cm.get(t, p)).sum();
        assert_eq!(cm.accuracy().unwrap(), 1.0 - off as f64 / cm.total() as f64);
        assert_eq!(cm.per_class_accuracy()[0], Some(0.25));

        let nine = ConfusionMatrix::from_predictions(2, &[0; 10], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(nine.accuracy().unwrap(), 0.9);
        let all_t = ConfusionMatrix::from_predictions(3, &[0, 0, 2], &[1, 1, 1]).unwrap();
        assert_eq!(all_t.attack_success_rate(0, 1).unwrap(), 1.0);
        assert!(all_t.attack_success_rate(1, 2).is_err());
        assert!(ConfusionMatrix::from_predictions(2, &[], &[]).unwrap().accuracy().is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for k in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * vecs[c * 3 + k]).sum();
                assert!((av - vals[k] * vecs[r * 3 + k]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn pca_recovers_axis_aligned_points() {
        let pts = [[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let proj = pca_project(&pts, 2).unwrap();
        for (p, q) in pts.iter().zip(&proj.points) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12, "{p:?} {q:?}");
        }
    }

    #[test]
    fn pca_flags_rank_deficiency() {
        let dir = [1.0, -2.0, 0.5, 3.0, 1.5];
        let rows: Vec<Vec<f64>> = [-2.0, -0.5, 0.0, 1.0, 4.0].iter().map(|t| dir.iter().map(|d| t * d + 1.0).collect()).collect();
        let proj = pca_project(&rows, 2).unwrap();
        assert_eq!(proj.degenerate_components, vec![1]);
        assert!(proj.points.iter().all(|p| p[1].abs() < 1e-9));
    }

    #[test]
    fn pca_matches_dense_oracle() {
        let mut rng = rng_from(8);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let proj = pca_project(&rows, 2).unwrap();

        let x = nalgebra::DMatrix::from_fn(8, 6, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let xc = nalgebra::DMatrix::from_fn(8, 6, |i, j| x[(i, j)] - mean[j]);
        let cov = xc.transpose() * &xc / 7.0;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..6).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &col) in idx.iter().take(2).enumerate() {
            let mut v = eig.eigenvectors.column(col).into_owned();
            let (mut best, mut best_abs) = (0.0, -1.0);
            for &e in v.iter() {
                if e.abs() > best_abs {
                    best_abs = e.abs();
                    best = e;
                }
            }
            if best < 0.0 {
                v = -v;
            }
            let coords = &xc * v;
            for i in 0..8 {
                assert!((coords[i] - proj.points[i][k]).abs() < 1e-8, "row {i} comp {k}");
            }
            assert!((eig.eigenvalues[col] - proj.variances[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn mis_examples() {
        let r = mis(&[pm(Role::Benign, 0.0, 0.0), pm(Role::Malicious, 3.0, 4.0)]).unwrap();
        assert_eq!(r.distance, 5.0);
        assert!((r.mis - 0.2).abs() < 1e-15);
        let r = mis(&[pm(Role::Benign, 2.0, -1.0), pm(Role::Malicious, 3.0, -1.0)]).unwrap();
        assert_eq!(r.mis, 1.0);
        let r = mis(&[pm(Role::Benign, 1.0, 1.0), pm(Role::Malicious, 1.0, 1.0)]).unwrap();
        assert!(r.mis.is_infinite() && !r.diagnostics.is_empty());
        assert!(mis(&[pm(Role::Benign, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn infinite_score_round_trips_as_string() {
        let r = mis(&[pm(Role::Benign, 1.0, 1.0), pm(Role::Malicious, 1.0, 1.0)]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mis\":\"inf\""));
        let back: MisReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud() -> impl Strategy<Value = Vec<ProjectedModel>> {
            proptest::collection::vec((any::<bool>(), -10.0f64..10.0, -10.0f64..10.0), 2..12).prop_map(|v| {
                let mut pts: Vec<ProjectedModel> = v
                    .into_iter()
                    .map(|(b, x, y)| pm(if b { Role::Benign } else { Role::Malicious }, x, y))
                    .collect();
                pts[0].role = Role::Benign;
                pts[1].role = Role::Malicious;
                pts
            })
        }

        proptest! {
            #[test]
            fn mis_invariances(pts in cloud(), dx in -5.0f64..5.0, dy in -5.0f64..5.0, c in 0.1f64..10.0) {
                let base = mis(&pts).unwrap();
                prop_assume!(base.distance > 1e-6);
                let shifted: Vec<_> = pts.iter().map(|p| pm(p.role, p.point[0] + dx, p.point[1] + dy)).collect();
                let s = mis(&shifted).unwrap();
                prop_assert!((s.mis - base.mis).abs() <= 1e-10 * base.mis.max(1.0));
                let scaled: Vec<_> = pts.iter().map(|p| pm(p.role, c * p.point[0], c * p.point[1])).collect();
                let sc = mis(&scaled).unwrap();
                prop_assert!((sc.mis - base.mis / c).abs() <= 1e-12 * base.mis.max(1.0));
                let swapped: Vec<_> = pts.iter().map(|p| pm(if p.role == Role::Benign { Role::Malicious } else { Role::Benign }, p.point[0], p.point[1])).collect();
                prop_assert_eq!(mis(&swapped).unwrap().mis, base.mis);
                prop_assert!((base.mis * base.distance - 1.0).abs() < 1e-12);
            }

            #[test]
            fn projection_is_centred(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 3..9)) {
                let proj = pca_project(&rows, 2).unwrap();
                for k in 0..2 {
                    let mean: f64 = proj.points.iter().map(|p| p[k]).sum::<f64>() / rows.len() as f64;
                    prop_assert!(mean.abs() < 1e-9);
                }
            }
        }
    }
}
