//! Distributional, cluster, task and reward metrics for a sampler.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ode_sample, DiscreteSchedule};
use crate::nn::Mlp;
use crate::reward::{NamedReward, RewardModel, RewardSuite};
use crate::scalar::Scalar;
use crate::teacher::GaussianMixture;
use crate::tensor::Tensor;

/// Anything that produces conditional samples.
pub trait Sampler<T: Scalar> {
    fn sample(&self, labels: &[usize], rng: &mut dyn RngCore) -> Result<Tensor<T>>;
}

/// Samples straight from the mixture.
impl<T: Scalar> Sampler<T> for GaussianMixture {
    fn sample(&self, labels: &[usize], rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        self.sample_real(labels, rng)
    }
}

/// Deterministic few-step sampling of a velocity network from Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSampler<'a, T> {
    pub model: &'a Mlp<T>,
    pub schedule: &'a DiscreteSchedule,
}

impl<T: Scalar> Sampler<T> for GeneratorSampler<'_, T> {
    fn sample(&self, labels: &[usize], rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        let z = Tensor::randn(&[labels.len(), self.model.config().input_dim], rng);
        ode_sample(self.model, &z, self.schedule, labels)
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            context: "sample set dimension",
            expected: vec![a.cols()],
            actual: vec![b.cols()],
        });
    }
    Ok(())
}

fn project<T: Scalar>(x: &Tensor<T>, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = x
        .iter_rows()
        .map(|row| row.iter().zip(dir).map(|(v, d)| v.as_f64() * d).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// 1-D 2-Wasserstein distance between two sorted samples. Unequal sizes are
/// compared at `max(n, m)` evenly spaced quantile levels.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len().max(b.len());
    let pick = |s: &[f64], i: usize| s[((i as f64 + 0.5) / m as f64 * s.len() as f64) as usize];
    let sum: f64 = if a.len() == b.len() {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    } else {
        (0..m).map(|i| (pick(a, i) - pick(b, i)).powi(2)).sum()
    };
    (sum / m as f64).sqrt()
}

/// Mean over `n_projections` random unit directions of the 1-D 2-Wasserstein
/// distance between the projected samples.
pub fn sliced_w2<T: Scalar, R: Rng + ?Sized>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pair(a, b)?;
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let dim = a.cols();
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v /= n);
        total += w2_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(total / n_projections as f64)
}

/// Exact 2-Wasserstein distance between two equally sized sample sets by
/// optimal assignment. Cubic in the sample count.
pub fn exact_w2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    if a.rows() != b.rows() {
        return Err(Error::InvalidArgument("exact W2 needs equally sized sets".into()));
    }
    let n = a.rows();
    let cost = |i: usize, j: usize| -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum()
    };
    // Shortest augmenting path assignment with potentials, 1-based.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let total: f64 = (1..=n).map(|j| cost(matched[j] - 1, j - 1)).sum();
    Ok((total / n as f64).sqrt())
}

fn rows_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(i);
    }
    out
}

fn mean_pairwise_distance<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            let d2: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            sum += d2.sqrt();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Per-condition mean pairwise distance and its average over conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub per_condition: BTreeMap<usize, f64>,
    pub average: f64,
}

/// Mean Euclidean distance over unordered pairs within each condition.
/// Conditions with fewer than two samples are skipped.
pub fn cluster_compactness<T: Scalar>(samples: &Tensor<T>, labels: &[usize]) -> Result<Compactness> {
    samples.ensure_shape("compactness samples", &[labels.len(), samples.cols()])?;
    let mut per_condition = BTreeMap::new();
    for (label, idx) in rows_by_label(labels) {
        if idx.len() < 2 {
            log::warn!("condition {label} has {} sample(s); excluded from compactness", idx.len());
            continue;
        }
        per_condition.insert(label, mean_pairwise_distance(samples, &idx));
    }
    let average = if per_condition.is_empty() {
        0.0
    } else {
        per_condition.values().sum::<f64>() / per_condition.len() as f64
    };
    Ok(Compactness { per_condition, average })
}

/// Fraction of samples whose diagonal Mahalanobis distance to every
/// component of their own condition exceeds `threshold_sigma`.
pub fn outlier_fraction<T: Scalar>(
    samples: &Tensor<T>,
    labels: &[usize],
    reference: &GaussianMixture,
    threshold_sigma: f64,
) -> Result<f64> {
    if !(threshold_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold_sigma} must be positive")));
    }
    samples.ensure_shape("outlier samples", &[labels.len(), reference.dim()])?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut outliers = 0usize;
    for (row, &label) in samples.iter_rows().zip(labels) {
        let comps = reference.components_for(label)?;
        let nearest = comps
            .iter()
            .map(|&k| {
                let c = &reference.components()[k];
                row.iter()
                    .zip(&c.mean)
                    .zip(&c.variance)
                    .map(|((x, m), v)| (x.as_f64() - m).powi(2) / v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if nearest > threshold_sigma {
            outliers += 1;
        }
    }
    Ok(outliers as f64 / labels.len() as f64)
}

/// Per-task accuracy and the mean over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub per_task: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Rule-based checks on conditional samples.
///
/// * `single`: the sample's most responsible component carries its label.
/// * `two`: two samples with distinct labels, generated in one batch, are
///   both correct.
/// * `position`: the sample lies in the half-plane facing its label's mean.
pub fn task_accuracy<T: Scalar, S: Sampler<T> + ?Sized>(
    sampler: &S,
    reference: &GaussianMixture,
    n_per_task: usize,
    rng: &mut dyn RngCore,
) -> Result<TaskAccuracy> {
    if n_per_task < 100 {
        return Err(Error::InvalidArgument(format!("n_per_task {n_per_task} < 100")));
    }
    let n_labels = reference.n_labels();
    let mode = RewardModel::ModeCorrectness {
        reference: reference.clone(),
    };
    let fraction = |v: &[T]| v.iter().map(|r| r.as_f64()).sum::<f64>() / v.len() as f64;
    let mut per_task = BTreeMap::new();

    let labels: Vec<usize> = (0..n_per_task).map(|i| i % n_labels).collect();
    let x = sampler.sample(&labels, rng)?;
    per_task.insert("single".to_string(), fraction(&mode.score_raw(&x, &labels)?));

    if n_labels >= 2 {
        let firsts: Vec<usize> = (0..n_per_task).map(|_| rng.gen_range(0..n_labels)).collect();
        let seconds: Vec<usize> = firsts
            .iter()
            .map(|&a| (a + 1 + rng.gen_range(0..n_labels - 1)) % n_labels)
            .collect();
        let both: Vec<usize> = firsts.iter().chain(&seconds).copied().collect();
        let x = sampler.sample(&both, rng)?;
        let ok = mode.score_raw(&x, &both)?;
        let pairs = (0..n_per_task)
            .filter(|&i| ok[i] > T::lit(0.5) && ok[i + n_per_task] > T::lit(0.5))
            .count();
        per_task.insert("two".to_string(), pairs as f64 / n_per_task as f64);
    }

    let dirs = (0..n_labels)
        .map(|l| reference.conditional_mean(l))
        .collect::<Result<Vec<_>>>()?;
    let x = sampler.sample(&labels, rng)?;
    let inside = x
        .iter_rows()
        .zip(&labels)
        .filter(|(row, &l)| row.iter().zip(&dirs[l]).map(|(v, d)| v.as_f64() * d).sum::<f64>() > 0.0)
        .count();
    per_task.insert("position".to_string(), inside as f64 / n_per_task as f64);

    let overall = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(TaskAccuracy { per_task, overall })
}

/// Mean reward of generated samples, split into trained and unseen rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub trained: BTreeMap<String, f64>,
    pub unseen: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated and reference samples per condition.
    pub n_per_condition: usize,
    pub n_projections: usize,
    pub outlier_sigma: f64,
    pub n_per_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_condition: 1000,
            n_projections: 64,
            outlier_sigma: 3.0,
            n_per_task: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sliced W2 to reference samples, averaged over conditions.
    pub sliced_w2: f64,
    pub compactness: Compactness,
    pub outlier_fraction: f64,
    pub task_accuracy: TaskAccuracy,
    pub reward_table: RewardTable,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Flat `(column, value)` pairs in a fixed order.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut cols = vec![("sliced_w2".to_string(), self.sliced_w2)];
        cols.push(("compactness".into(), self.compactness.average));
        for (c, v) in &self.compactness.per_condition {
            cols.push((format!("compactness_c{c}"), *v));
        }
        cols.push(("outlier_fraction".into(), self.outlier_fraction));
        for (k, v) in &self.task_accuracy.per_task {
            cols.push((format!("task_{k}"), *v));
        }
        cols.push(("task_overall".into(), self.task_accuracy.overall));
        for (k, v) in &self.reward_table.trained {
            cols.push((format!("trained_{k}"), *v));
        }
        for (k, v) in &self.reward_table.unseen {
            cols.push((format!("unseen_{k}"), *v));
        }
        cols
    }

    pub fn csv_header(&self) -> String {
        self.columns().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    /// Values printed with round-trip precision.
    pub fn csv_row(&self) -> String {
        self.columns()
            .into_iter()
            .map(|(_, v)| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn ensure_finite(&self) -> Result<()> {
        match self.columns().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(Error::NonFinite(format!("eval field {k} = {v}"))),
            None => Ok(()),
        }
    }
}

fn mean_reward<T: Scalar>(r: &NamedReward, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = r.reward.score_raw(x, labels)?;
    Ok(s.iter().map(|v| v.as_f64()).sum::<f64>() / s.len().max(1) as f64)
}

/// Every metric for `sampler` against the reference mixture. The trained
/// table also carries `total`, the weighted training objective.
pub fn full_eval<T: Scalar, S: Sampler<T> + ?Sized>(
    sampler: &S,
    reference: &GaussianMixture,
    rewards: &RewardSuite,
    config: &EvalConfig,
    rng: &mut dyn RngCore,
) -> Result<EvalReport> {
    if config.n_per_condition < 2 {
        return Err(Error::InvalidArgument("n_per_condition must be at least 2".into()));
    }
    let n_labels = reference.n_labels();
    let labels: Vec<usize> = (0..n_labels)
        .flat_map(|l| std::iter::repeat(l).take(config.n_per_condition))
        .collect();
    let x = sampler.sample(&labels, rng)?;
    x.ensure_finite("evaluated samples")?;
    let real: Tensor<T> = reference.sample_real(&labels, rng)?;

    let mut w2 = 0.0;
    for idx in rows_by_label(&labels).values() {
        w2 += sliced_w2(&x.select_rows(idx), &real.select_rows(idx), config.n_projections, rng)?;
    }
    let sliced_w2 = w2 / n_labels as f64;

    let mut trained = BTreeMap::new();
    let mut total = 0.0;
    for r in &rewards.trained {
        let m = mean_reward(r, &x, &labels)?;
        total += r.weight * m;
        trained.insert(r.name.clone(), m);
    }
    trained.insert("total".to_string(), total);
    let unseen = rewards
        .unseen
        .iter()
        .map(|r| Ok((r.name.clone(), mean_reward(r, &x, &labels)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let report = EvalReport {
        sliced_w2,
        compactness: cluster_compactness(&x, &labels)?,
        outlier_fraction: outlier_fraction(&x, &labels, reference, config.outlier_sigma)?,
        task_accuracy: task_accuracy(sampler, reference, config.n_per_task, rng)?,
        reward_table: RewardTable { trained, unseen },
    };
    report.ensure_finite()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[50, 2], &mut r);
        assert!(sliced_w2(&a, &a, 16, &mut r).unwrap() < 1e-12);
        let perm: Vec<usize> = (0..50).rev().collect();
        assert!(sliced_w2(&a, &a.select_rows(&perm), 16, &mut r).unwrap() < 1e-12);
        assert!(exact_w2(&a, &a.select_rows(&perm)).unwrap() < 1e-12);
    }

    #[test]
    fn point_masses_in_one_dimension() {
        let a = Tensor::<f64>::full(&[10, 1], 0.0);
        let b = Tensor::<f64>::full(&[7, 1], 2.5);
        assert!((sliced_w2(&a, &b, 3, &mut rng()).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn point_masses_in_two_dimensions() {
        // E|u_1| = 2 / pi for a uniform direction in the plane
        let a = Tensor::<f64>::full(&[4, 2], 0.0);
        let b = Tensor::<f64>::from_f64(&[4, 2], &[3.0, 0.0, 3.0, 0.0, 3.0, 0.0, 3.0, 0.0]).unwrap();
        let n = 20_000;
        let est = sliced_w2(&a, &b, n, &mut rng()).unwrap();
        let expected = 3.0 * 2.0 / std::f64::consts::PI;
        // std of 3|u_1| is 3 sqrt(1/2 - 4/pi^2)
        let se = 3.0 * (0.5 - 4.0 / std::f64::consts::PI.powi(2)).sqrt() / (n as f64).sqrt();
        assert!((est - expected).abs() < 4.0 * se, "{est} vs {expected}");
    }

    #[test]
    fn normal_against_itself_is_near_zero() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[10_000, 2], &mut r);
        let b = Tensor::<f64>::randn(&[10_000, 2], &mut r);
        assert!(sliced_w2(&a, &b, 64, &mut r).unwrap() <= 0.05);
    }

    #[test]
    fn exact_w2_matches_brute_force() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[5, 2], &mut r);
        let b = Tensor::<f64>::randn(&[5, 2], &mut r);
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..5).collect();
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = (0..5)
                .map(|i| a.row(i).iter().zip(b.row(p[i])).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum();
            best = best.min(c);
        });
        assert!((exact_w2(&a, &b).unwrap() - (best / 5.0).sqrt()).abs() < 1e-12);
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn compactness_basics() {
        let same = Tensor::<f64>::full(&[5, 2], 1.5);
        assert_eq!(cluster_compactness(&same, &[0; 5]).unwrap().average, 0.0);
        let two = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 3.0, 0.0]).unwrap();
        assert!((cluster_compactness(&two, &[1, 1]).unwrap().per_condition[&1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn compactness_skips_singletons() {
        let x = Tensor::<f64>::from_f64(&[3, 1], &[0.0, 1.0, 9.0]).unwrap();
        let c = cluster_compactness(&x, &[0, 0, 1]).unwrap();
        assert_eq!(c.per_condition.len(), 1);
        assert_eq!(c.average, 1.0);
    }

    #[test]
    fn uniform_square_mean_distance() {
        // (2 + sqrt 2 + 5 asinh 1) / 15
        let constant = (2.0 + 2f64.sqrt() + 5.0 * 1f64.asinh()) / 15.0;
        let mut r = rng();
        let vals: Vec<f64> = (0..200).map(|_| r.gen()).collect();
        let x = Tensor::<f64>::from_f64(&[100, 2], &vals).unwrap();
        let c = cluster_compactness(&x, &[0; 100]).unwrap().average;
        assert!((c - constant).abs() < 0.1 * constant, "{c}");
    }

    #[test]
    fn outliers_by_arithmetic() {
        let world = GaussianMixture::ring_world();
        let mean = world.conditional_mean(0).unwrap();
        let c = &world.components()[world.components_for(0).unwrap()[0]];
        let sigma = c.variance[0].sqrt();
        let mut rows = vec![c.mean.clone(); 99];
        rows.push(vec![c.mean[0] + 10.0 * sigma, c.mean[1]]);
        let x = Tensor::<f64>::from_rows(&rows).unwrap();
        assert_eq!(outlier_fraction(&x, &[0; 100], &world, 3.0).unwrap(), 0.01);
        let at_means = Tensor::<f64>::from_rows(&vec![mean; 10]).unwrap();
        assert_eq!(outlier_fraction(&at_means, &[0; 10], &world, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn mixture_outliers_follow_chi_square_tail() {
        let world = GaussianMixture::ring_world();
        let mut r = rng();
        let labels: Vec<usize> = (0..40_000).map(|i| i % 4).collect();
        let x: Tensor<f64> = world.sample_real(&labels, &mut r).unwrap();
        let tail = (-4.5f64).exp();
        let f = outlier_fraction(&x, &labels, &world, 3.0).unwrap();
        assert!((f - tail).abs() < 0.005, "{f} vs {tail}");
    }

    /// Returns a fixed point per label.
    struct Fixed(Vec<Vec<f64>>);

    impl Sampler<f64> for Fixed {
        fn sample(&self, labels: &[usize], _rng: &mut dyn RngCore) -> Result<Tensor<f64>> {
            Tensor::from_rows(&labels.iter().map(|&l| self.0[l].clone()).collect::<Vec<_>>())
        }
    }

    #[test]
    fn oracle_generator_is_perfect() {
        let world = GaussianMixture::ring_world();
        let main: Vec<Vec<f64>> = (0..4)
            .map(|l| world.components()[world.components_for(l).unwrap()[0]].mean.clone())
            .collect();
        let acc = task_accuracy(&Fixed(main), &world, 100, &mut rng()).unwrap();
        assert_eq!(acc.overall, 1.0);
        assert!(acc.per_task.values().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_mode_generator_scores_zero() {
        let world = GaussianMixture::ring_world();
        let opposite: Vec<Vec<f64>> = (0..4).map(|l| world.conditional_mean((l + 2) % 4).unwrap()).collect();
        let acc = task_accuracy(&Fixed(opposite), &world, 100, &mut rng()).unwrap();
        assert_eq!(acc.per_task["single"], 0.0);
        assert_eq!(acc.per_task["two"], 0.0);
        assert_eq!(acc.per_task["position"], 0.0);
    }

    #[test]
    fn rejects_small_task_suites() {
        let world = GaussianMixture::ring_world();
        assert!(task_accuracy::<f64, _>(&world, &world, 99, &mut rng()).is_err());
    }

    #[test]
    fn report_is_deterministic_and_complete() {
        let world = GaussianMixture::ring_world();
        let suite = RewardSuite {
            trained: vec![NamedReward {
                name: "axis".into(),
                weight: 1.0,
                reward: RewardModel::axis(&[1.0, 0.0]),
            }],
            unseen: vec![NamedReward {
                name: "mode".into(),
                weight: 1.0,
                reward: RewardModel::ModeCorrectness { reference: world.clone() },
            }],
        };
        let cfg = EvalConfig {
            n_per_condition: 100,
            n_projections: 8,
            outlier_sigma: 3.0,
            n_per_task: 100,
        };
        let run = || {
            full_eval::<f64, _>(&world, &world, &suite, &cfg, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap()
                .to_json()
                .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        for key in ["sliced_w2", "compactness", "outlier_fraction", "task_accuracy", "reward_table"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["reward_table"]["trained"].get("total").is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sliced_w2_is_symmetric(seed in 0u64..1000, n in 2usize..40) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(&[n, 2], &mut r);
            let b = Tensor::<f64>::randn(&[n, 2], &mut r);
            let ab = sliced_w2(&a, &b, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ba = sliced_w2(&b, &a, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn compactness_is_translation_invariant_and_scales(
            seed in 0u64..1000, shift in -5.0f64..5.0, scale in 0.1f64..10.0
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[12, 2], &mut r);
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let base = cluster_compactness(&x, &labels).unwrap().average;
            let moved = cluster_compactness(&x.map(|v| v + shift), &labels).unwrap().average;
            let scaled = cluster_compactness(&x.scale(scale), &labels).unwrap().average;
            prop_assert!((base - moved).abs() < 1e-9 * (1.0 + base));
            prop_assert!((scaled - scale * base).abs() < 1e-9 * (1.0 + scaled));
        }
    }
}
