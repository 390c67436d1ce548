//! Modality adaptation distances between auxiliary and source descriptors.
//!
//! All three distances use the linear kernel `k(x, y) = x·y`. Gradients are
//! produced only for the source side; the auxiliary encoder is frozen, so its
//! descriptors are treated as constants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Source,
    Auxiliary,
}

/// Video-level descriptors (temporal means of hidden sequences) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    pub descriptors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub modality: Modality,
}

impl DescriptorBatch {
    pub fn new(descriptors: Vec<Vec<f64>>, labels: Vec<usize>, modality: Modality) -> Result<Self> {
        if descriptors.len() != labels.len() {
            return Err(Error::shape(
                "DescriptorBatch::new",
                format!("{} descriptors", descriptors.len()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(first) = descriptors.first() {
            if let Some(bad) = descriptors.iter().find(|d| d.len() != first.len()) {
                return Err(Error::shape("DescriptorBatch::new", first.len(), bad.len()));
            }
        }
        Ok(DescriptorBatch {
            descriptors,
            labels,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> DescriptorBatch {
        DescriptorBatch {
            descriptors: indices.iter().map(|&i| self.descriptors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            modality: self.modality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationLevel {
    None,
    Domain,
    Category,
    Sample,
    Joint,
}

impl AdaptationLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationLevel::None => "none",
            AdaptationLevel::Domain => "domain",
            AdaptationLevel::Category => "category",
            AdaptationLevel::Sample => "sample",
            AdaptationLevel::Joint => "joint",
        }
    }
}

/// Per-level weights for the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelWeights {
    pub domain: f64,
    pub category: f64,
    pub sample: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        LevelWeights {
            domain: 1.0,
            category: 1.0,
            sample: 1.0,
        }
    }
}

/// Which distance to add to the classification loss, and how strongly.
///
/// For `Joint` the distance is `w_D d_D + w_C d_C + w_S d_S` using
/// `joint_weights`, and `lambda` scales that sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub level: AdaptationLevel,
    pub lambda: f64,
    pub joint_weights: LevelWeights,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig::none()
    }
}

impl AdaptationConfig {
    pub fn none() -> Self {
        AdaptationConfig {
            level: AdaptationLevel::None,
            lambda: 0.0,
            joint_weights: LevelWeights::default(),
        }
    }

    pub fn new(level: AdaptationLevel, lambda: f64) -> Self {
        AdaptationConfig {
            level,
            lambda,
            joint_weights: LevelWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.joint_weights;
        for (name, v) in [
            ("lambda", self.lambda),
            ("joint_weights.domain", w.domain),
            ("joint_weights.category", w.category),
            ("joint_weights.sample", w.sample),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether the level needs index-aligned auxiliary counterparts.
    pub fn needs_pairing(&self) -> bool {
        matches!(self.level, AdaptationLevel::Sample | AdaptationLevel::Joint)
    }
}

/// A distance value with its gradient for every source descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

impl Distance {
    fn zero(n: usize, dim: usize) -> Self {
        Distance {
            value: 0.0,
            grad: vec![vec![0.0; dim]; n],
        }
    }
}

pub fn linear_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("linear_kernel", x.len(), y.len()));
    }
    Ok(linalg::dot(x, y))
}

/// Biased squared MMD between two sample sets (self-pairs included).
pub fn mmd_squared<X, Y, K>(x: &[X], y: &[Y], kernel: K) -> Result<f64>
where
    X: AsRef<[f64]>,
    Y: AsRef<[f64]>,
    K: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("mmd_squared"));
    }
    fn gram_mean<A: AsRef<[f64]>, B: AsRef<[f64]>>(
        a: &[A],
        b: &[B],
        kernel: &dyn Fn(&[f64], &[f64]) -> Result<f64>,
    ) -> Result<f64> {
        let mut acc = 0.0;
        for u in a {
            for v in b {
                acc += kernel(u.as_ref(), v.as_ref())?;
            }
        }
        Ok(acc / (a.len() as f64 * b.len() as f64))
    }
    Ok(gram_mean(x, x, &kernel)? + gram_mean(y, y, &kernel)? - 2.0 * gram_mean(x, y, &kernel)?)
}

fn check_dims(aux: &DescriptorBatch, src: &DescriptorBatch, op: &'static str) -> Result<()> {
    if aux.is_empty() || src.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    if aux.dim() != src.dim() {
        return Err(Error::shape(
            op,
            format!("auxiliary N={}", aux.dim()),
            format!("source N={}", src.dim()),
        ));
    }
    Ok(())
}

fn mean_of<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        linalg::add_assign(&mut acc, v);
        n += 1;
    }
    acc.iter_mut().for_each(|x| *x /= n as f64);
    acc
}

/// Linear-kernel MMD² between a group of auxiliary and source descriptors,
/// evaluated in closed form as `‖μ_src − μ_aux‖²`, with the gradient
/// `(2/m)(μ_src − μ_aux)` for each of the `m` source rows.
fn group_mmd(aux: &[&Vec<f64>], src: &[&Vec<f64>], dim: usize) -> (f64, Vec<f64>) {
    let mu_a = mean_of(aux.iter().copied(), dim);
    let mu_s = mean_of(src.iter().copied(), dim);
    let value = linalg::squared_distance(&mu_s, &mu_a);
    let scale = 2.0 / src.len() as f64;
    let grad = mu_s.iter().zip(&mu_a).map(|(s, a)| scale * (s - a)).collect();
    (value, grad)
}

/// Domain-level MMD between the two batches; the batches need not be aligned
/// and may differ in size.
pub fn domain_distance(aux: &DescriptorBatch, src: &DescriptorBatch) -> Result<Distance> {
    check_dims(aux, src, "domain_distance")?;
    let a: Vec<&Vec<f64>> = aux.descriptors.iter().collect();
    let s: Vec<&Vec<f64>> = src.descriptors.iter().collect();
    let (value, g) = group_mmd(&a, &s, src.dim());
    Ok(Distance {
        value,
        grad: vec![g; src.len()],
    })
}

/// Mean of per-class MMD² over the classes present in both batches.
pub fn category_distance(aux: &DescriptorBatch, src: &DescriptorBatch) -> Result<Distance> {
    check_dims(aux, src, "category_distance")?;
    let dim = src.dim();
    let mut aux_by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (d, &l) in aux.descriptors.iter().zip(&aux.labels) {
        aux_by_class.entry(l).or_default().push(d);
    }
    let mut src_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in src.labels.iter().enumerate() {
        src_by_class.entry(l).or_default().push(i);
    }
    let shared: Vec<usize> = src_by_class
        .keys()
        .copied()
        .filter(|c| aux_by_class.contains_key(c))
        .collect();
    if shared.is_empty() {
        return Err(Error::DegenerateBatch(
            "no class is present in both modalities".into(),
        ));
    }
    let k = shared.len() as f64;
    let mut out = Distance::zero(src.len(), dim);
    for c in shared {
        let rows = &src_by_class[&c];
        let s: Vec<&Vec<f64>> = rows.iter().map(|&i| &src.descriptors[i]).collect();
        let (v, g) = group_mmd(&aux_by_class[&c], &s, dim);
        out.value += v;
        for &i in rows {
            linalg::axpy(&mut out.grad[i], 1.0 / k, &g);
        }
    }
    out.value /= k;
    Ok(out)
}

/// Mean squared Euclidean distance between index-aligned pairs.
pub fn sample_distance(aux: &DescriptorBatch, src: &DescriptorBatch) -> Result<Distance> {
    check_dims(aux, src, "sample_distance")?;
    if aux.len() != src.len() {
        return Err(Error::Pairing(format!(
            "sample-level adaptation needs equal batch sizes, got {} auxiliary vs {} source",
            aux.len(),
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(src.len());
    for (a, r) in aux.descriptors.iter().zip(&src.descriptors) {
        value += linalg::squared_distance(a, r);
        grad.push(r.iter().zip(a).map(|(r, a)| 2.0 / n * (r - a)).collect());
    }
    Ok(Distance {
        value: value / n,
        grad,
    })
}

/// Weighted sum of the three distances. Levels with zero weight are skipped,
/// so their alignment requirements do not apply.
pub fn joint_distance(
    aux: &DescriptorBatch,
    src: &DescriptorBatch,
    weights: &LevelWeights,
) -> Result<Distance> {
    check_dims(aux, src, "joint_distance")?;
    let mut out = Distance::zero(src.len(), src.dim());
    let parts: [(f64, fn(&DescriptorBatch, &DescriptorBatch) -> Result<Distance>); 3] = [
        (weights.domain, domain_distance),
        (weights.category, category_distance),
        (weights.sample, sample_distance),
    ];
    for (w, f) in parts {
        if w == 0.0 {
            continue;
        }
        let d = f(aux, src)?;
        out.value += w * d.value;
        for (acc, g) in out.grad.iter_mut().zip(&d.grad) {
            linalg::axpy(acc, w, g);
        }
    }
    Ok(out)
}

/// The distance selected by `cfg.level`, unscaled by `lambda`. `None` gives 0.
pub fn adaptation_distance(
    cfg: &AdaptationConfig,
    aux: &DescriptorBatch,
    src: &DescriptorBatch,
) -> Result<Distance> {
    match cfg.level {
        AdaptationLevel::None => Ok(Distance::zero(src.len(), src.dim())),
        AdaptationLevel::Domain => domain_distance(aux, src),
        AdaptationLevel::Category => category_distance(aux, src),
        AdaptationLevel::Sample => sample_distance(aux, src),
        AdaptationLevel::Joint => joint_distance(aux, src, &cfg.joint_weights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]], labels: &[usize], modality: Modality) -> DescriptorBatch {
        DescriptorBatch::new(
            rows.iter().map(|r| r.to_vec()).collect(),
            labels.to_vec(),
            modality,
        )
        .unwrap()
    }

    fn aux(rows: &[&[f64]], labels: &[usize]) -> DescriptorBatch {
        batch(rows, labels, Modality::Auxiliary)
    }

    fn src(rows: &[&[f64]], labels: &[usize]) -> DescriptorBatch {
        batch(rows, labels, Modality::Source)
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(linear_kernel(&[3.0, -1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(linear_kernel(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(linear_kernel(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mmd_examples() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let y = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(mmd_squared(&x, &y, linear_kernel).unwrap(), 2.0);
        assert!(mmd_squared(&x, &x, linear_kernel).unwrap().abs() < 1e-12);
        let d = mmd_squared(&[vec![1.0, 2.0]], &[vec![4.0, -2.0]], linear_kernel).unwrap();
        assert_eq!(d, 25.0);
        assert_eq!(
            mmd_squared::<Vec<f64>, _, _>(&[], &y, linear_kernel),
            Err(Error::EmptyInput("mmd_squared"))
        );
    }

    #[test]
    fn domain_orthogonal_example() {
        let a = aux(&[&[1.0, 0.0], &[1.0, 0.0]], &[0, 0]);
        let s = src(&[&[0.0, 1.0], &[0.0, 1.0]], &[0, 0]);
        let d = domain_distance(&a, &s).unwrap();
        assert_eq!(d.value, 2.0);
        // (2/n)(μ_src − μ_aux) with n = 2
        assert_eq!(d.grad, vec![vec![-1.0, 1.0]; 2]);
        assert!(domain_distance(&a, &a).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn domain_shape_error() {
        let a = aux(&[&[1.0, 0.0]], &[0]);
        let s = src(&[&[0.0, 1.0, 2.0]], &[0]);
        assert!(matches!(domain_distance(&a, &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn category_two_class_example() {
        let a = aux(&[&[1.0, 1.0], &[0.0, 2.0]], &[0, 1]);
        let s = src(&[&[1.0, 1.0], &[0.0, 0.0]], &[0, 1]);
        let d = category_distance(&a, &s).unwrap();
        assert_eq!(d.value, 2.0);
    }

    #[test]
    fn category_requires_shared_class() {
        let a = aux(&[&[1.0, 1.0]], &[0]);
        let s = src(&[&[1.0, 1.0]], &[1]);
        assert!(matches!(
            category_distance(&a, &s),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn category_skips_classes_missing_from_one_side() {
        let a = aux(&[&[1.0, 1.0], &[0.0, 2.0]], &[0, 1]);
        let s = src(&[&[1.0, 1.0], &[0.0, 0.0], &[9.0, 9.0]], &[0, 1, 2]);
        let d = category_distance(&a, &s).unwrap();
        assert_eq!(d.value, 2.0);
        assert_eq!(d.grad[2], vec![0.0, 0.0]);
    }

    #[test]
    fn sample_example_and_pairing_error() {
        let a = aux(&[&[1.0, 1.0], &[2.0, 0.0]], &[0, 1]);
        let s = src(&[&[0.0, 0.0], &[2.0, 0.0]], &[0, 1]);
        let d = sample_distance(&a, &s).unwrap();
        assert_eq!(d.value, 1.0);
        assert_eq!(d.grad, vec![vec![-1.0, -1.0], vec![0.0, 0.0]]);
        let short = src(&[&[0.0, 0.0]], &[0]);
        assert!(matches!(sample_distance(&a, &short), Err(Error::Pairing(_))));
    }

    #[test]
    fn sample_is_quadratic_in_scale() {
        let a = aux(&[&[1.0, 1.0], &[2.0, 0.0]], &[0, 1]);
        let s = src(&[&[0.0, 0.5], &[-2.0, 0.0]], &[0, 1]);
        let scaled = |b: &DescriptorBatch, k: f64| DescriptorBatch {
            descriptors: b
                .descriptors
                .iter()
                .map(|d| d.iter().map(|v| v * k).collect())
                .collect(),
            ..b.clone()
        };
        let base = sample_distance(&a, &s).unwrap().value;
        let three = sample_distance(&scaled(&a, 3.0), &scaled(&s, 3.0)).unwrap().value;
        assert!((three - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn joint_examples() {
        let a = aux(&[&[1.0, 1.0], &[0.0, 2.0]], &[0, 1]);
        let s = src(&[&[1.0, 1.0], &[0.0, 0.0]], &[0, 1]);
        let zero = LevelWeights {
            domain: 0.0,
            category: 0.0,
            sample: 0.0,
        };
        let j = joint_distance(&a, &s, &zero).unwrap();
        assert_eq!(j.value, 0.0);
        assert!(j.grad.iter().flatten().all(|&g| g == 0.0));

        let only_c = LevelWeights {
            category: 1.0,
            ..zero
        };
        assert_eq!(
            joint_distance(&a, &s, &only_c).unwrap(),
            category_distance(&a, &s).unwrap()
        );

        // d_D: means (0.5,1.5) vs (0.5,0.5) → 1; d_C = 2; d_S = (0 + 4)/2 = 2.
        let all = joint_distance(&a, &s, &LevelWeights::default()).unwrap();
        assert!((all.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptationConfig::new(AdaptationLevel::Sample, 0.1).validate().is_ok());
        assert!(AdaptationConfig::new(AdaptationLevel::Sample, -0.1).validate().is_err());
        let mut c = AdaptationConfig::new(AdaptationLevel::Joint, 1.0);
        c.joint_weights.domain = f64::NAN;
        assert!(c.validate().is_err());
    }
}
