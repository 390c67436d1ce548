//! Seeded generator of multimodal sequence datasets.
//!
//! Each class owns a bounded linear dynamical system over a latent state.
//! The auxiliary view is a clean linear image of the latent path; the source
//! view is a different linear image plus a suffix of class-independent
//! random-walk nuisance channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rnn::SequenceBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Every source sample has an auxiliary counterpart sharing its latent path.
    Sample,
    /// Independent draws per modality from the same class families.
    Category,
    /// Independent draws, auxiliary pool in an order unrelated to the source.
    Unaligned,
}

impl Alignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Sample => "sample",
            Alignment::Category => "category",
            Alignment::Unaligned => "unaligned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub seq_len: usize,
    pub latent_dim: usize,
    /// Total source width, nuisance channels included.
    pub source_dim: usize,
    pub aux_dim: usize,
    pub nuisance_dim: usize,
    /// Random-walk step scale of the nuisance channels.
    pub nuisance_scale: f64,
    pub observation_noise: f64,
    /// Per-step latent innovation noise.
    pub process_noise: f64,
    pub alignment: Alignment,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 5,
            samples_per_class: 40,
            seq_len: 12,
            latent_dim: 6,
            source_dim: 24,
            aux_dim: 12,
            nuisance_dim: 8,
            nuisance_scale: 3.0,
            observation_noise: 0.1,
            process_noise: 0.3,
            alignment: Alignment::Sample,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("samples_per_class", self.samples_per_class),
            ("seq_len", self.seq_len),
            ("latent_dim", self.latent_dim),
            ("source_dim", self.source_dim),
            ("aux_dim", self.aux_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.nuisance_dim >= self.source_dim {
            return Err(Error::Config(format!(
                "nuisance_dim {} must leave at least one signal channel in source_dim {}",
                self.nuisance_dim, self.source_dim
            )));
        }
        for (name, v) in [
            ("nuisance_scale", self.nuisance_scale),
            ("observation_noise", self.observation_noise),
            ("process_noise", self.process_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn signal_dim(&self) -> usize {
        self.source_dim - self.nuisance_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub source: SequenceBatch,
    pub auxiliary: SequenceBatch,
    /// `pairing[i]` is the auxiliary index paired with source sample `i`.
    pub pairing: Option<Vec<usize>>,
    pub alignment: Alignment,
}

impl MultimodalDataset {
    pub fn new(
        source: SequenceBatch,
        auxiliary: SequenceBatch,
        pairing: Option<Vec<usize>>,
        alignment: Alignment,
    ) -> Result<Self> {
        if source.num_classes() != auxiliary.num_classes() {
            return Err(Error::Config(format!(
                "source has {} classes, auxiliary {}",
                source.num_classes(),
                auxiliary.num_classes()
            )));
        }
        if let Some(p) = &pairing {
            if p.len() != source.len() || auxiliary.len() != source.len() {
                return Err(Error::Pairing(format!(
                    "pairing covers {} of {} source / {} auxiliary samples",
                    p.len(),
                    source.len(),
                    auxiliary.len()
                )));
            }
            let mut seen = vec![false; p.len()];
            for (i, &j) in p.iter().enumerate() {
                if j >= seen.len() || seen[j] {
                    return Err(Error::Pairing("pairing is not a bijection".into()));
                }
                seen[j] = true;
                if source.labels()[i] != auxiliary.labels()[j] {
                    return Err(Error::Pairing(format!(
                        "paired samples {i} and {j} have different labels"
                    )));
                }
            }
        }
        Ok(MultimodalDataset {
            source,
            auxiliary,
            pairing,
            alignment,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    /// Auxiliary sequences reordered so index `i` is source `i`'s counterpart.
    pub fn paired_auxiliary(&self) -> Result<SequenceBatch> {
        let p = self
            .pairing
            .as_ref()
            .ok_or_else(|| Error::Pairing("dataset has no sample pairing".into()))?;
        Ok(self.auxiliary.subset(p))
    }

    pub fn class_histogram(labels: &[usize], classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in labels {
            h[l] += 1;
        }
        h
    }
}

/// Largest singular value by power iteration on `AᵀA`.
fn spectral_norm(a: &Matrix) -> f64 {
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let mut av = vec![0.0; a.rows()];
        linalg::gemv_acc(&mut av, a.as_slice(), &v);
        let mut atav = vec![0.0; n];
        linalg::gemv_t_acc(&mut atav, a.as_slice(), &av);
        let norm = linalg::dot(&atav, &atav).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = atav.iter().map(|x| x / norm).collect();
        sigma = norm.sqrt();
    }
    sigma
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn gaussian_vec(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

struct ClassDynamics {
    transition: Matrix,
    drive: Vec<f64>,
    start: Vec<f64>,
}

struct World {
    classes: Vec<ClassDynamics>,
    aux_proj: Matrix,
    src_proj: Matrix,
}

const SPECTRAL_RADIUS_BOUND: f64 = 0.95;

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[0xD1]));
        let k = cfg.latent_dim;
        let classes = (0..cfg.classes)
            .map(|_| {
                let raw = gaussian_matrix(k, k, 1.0, &mut rng);
                let s = spectral_norm(&raw);
                // ρ(A) ≤ ‖A‖₂, so bounding the norm bounds the spectral radius.
                let transition = if s > 0.0 {
                    raw.scale(SPECTRAL_RADIUS_BOUND / s)
                } else {
                    raw
                };
                ClassDynamics {
                    transition,
                    drive: gaussian_vec(k, 0.5, &mut rng),
                    start: gaussian_vec(k, 1.0, &mut rng),
                }
            })
            .collect();
        let proj_scale = 1.0 / (k as f64).sqrt();
        let aux_proj = gaussian_matrix(cfg.aux_dim, k, proj_scale, &mut rng);
        let src_proj = gaussian_matrix(cfg.signal_dim(), k, proj_scale, &mut rng);
        World {
            classes,
            aux_proj,
            src_proj,
        }
    }

    fn latent_path(&self, cfg: &GeneratorConfig, class: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let dyn_ = &self.classes[class];
        let k = cfg.latent_dim;
        let mut path = Matrix::zeros(cfg.seq_len, k);
        let mut z: Vec<f64> = dyn_
            .start
            .iter()
            .map(|m| m + cfg.process_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for t in 0..cfg.seq_len {
            path.row_mut(t).copy_from_slice(&z);
            let mut next = dyn_.drive.clone();
            linalg::gemv_acc(&mut next, dyn_.transition.as_slice(), &z);
            for v in &mut next {
                *v += cfg.process_noise * rng.sample::<f64, _>(StandardNormal);
            }
            z = next;
        }
        path
    }

    fn project(proj: &Matrix, path: &Matrix, noise: f64, extra: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let d = proj.rows();
        let mut out = Matrix::zeros(path.rows(), d + extra);
        for t in 0..path.rows() {
            let row = &mut out.row_mut(t)[..d];
            linalg::gemv_acc(row, proj.as_slice(), path.row(t));
            if noise > 0.0 {
                for v in row.iter_mut() {
                    *v += noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out
    }

    fn source_view(&self, cfg: &GeneratorConfig, path: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        let d = cfg.signal_dim();
        let mut x = Self::project(&self.src_proj, path, cfg.observation_noise, cfg.nuisance_dim, rng);
        let mut walk = vec![0.0; cfg.nuisance_dim];
        for t in 0..cfg.seq_len {
            for (w, slot) in walk.iter_mut().zip(&mut x.row_mut(t)[d..]) {
                *w += cfg.nuisance_scale * rng.sample::<f64, _>(StandardNormal);
                *slot = *w;
            }
        }
        x
    }

    fn aux_view(&self, cfg: &GeneratorConfig, path: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        Self::project(&self.aux_proj, path, cfg.observation_noise, 0, rng)
    }
}

const STREAM_SHARED: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_AUX: u64 = 3;
const STREAM_NOISE_SRC: u64 = 4;
const STREAM_NOISE_AUX: u64 = 5;
const STREAM_ORDER: u64 = 6;

pub fn make_dataset(cfg: &GeneratorConfig) -> Result<MultimodalDataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let rng_for = |stream: u64, class: usize, idx: usize| {
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[stream, class as u64, idx as u64]))
    };

    let total = cfg.classes * cfg.samples_per_class;
    let mut src = Vec::with_capacity(total);
    let mut aux = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for c in 0..cfg.classes {
        for i in 0..cfg.samples_per_class {
            let (src_path, aux_path) = match cfg.alignment {
                Alignment::Sample => {
                    let p = world.latent_path(cfg, c, &mut rng_for(STREAM_SHARED, c, i));
                    (p.clone(), p)
                }
                Alignment::Category | Alignment::Unaligned => (
                    world.latent_path(cfg, c, &mut rng_for(STREAM_SOURCE, c, i)),
                    world.latent_path(cfg, c, &mut rng_for(STREAM_AUX, c, i)),
                ),
            };
            src.push(world.source_view(cfg, &src_path, &mut rng_for(STREAM_NOISE_SRC, c, i)));
            aux.push(world.aux_view(cfg, &aux_path, &mut rng_for(STREAM_NOISE_AUX, c, i)));
            labels.push(c);
        }
    }

    let (aux, aux_labels, pairing) = match cfg.alignment {
        Alignment::Sample => (aux, labels.clone(), Some((0..total).collect())),
        Alignment::Category => (aux, labels.clone(), None),
        Alignment::Unaligned => {
            let mut order: Vec<usize> = (0..total).collect();
            shuffle(&mut order, &mut rng_for(STREAM_ORDER, 0, 0));
            let reordered = order.iter().map(|&i| aux[i].clone()).collect();
            let l = order.iter().map(|&i| labels[i]).collect();
            (reordered, l, None)
        }
    };

    MultimodalDataset::new(
        SequenceBatch::new(src, labels, cfg.classes)?,
        SequenceBatch::new(aux, aux_labels, cfg.classes)?,
        pairing,
        cfg.alignment,
    )
}

/// Fisher-Yates with an explicit generator so the permutation is reproducible.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: MultimodalDataset,
    pub val: MultimodalDataset,
    pub test: MultimodalDataset,
}

/// Per-class index lists cut by `fractions` after a seeded shuffle.
fn stratified_cut(
    labels: &[usize],
    classes: usize,
    fractions: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<usize>; 3]> {
    let mut out: [Vec<usize>; 3] = Default::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        shuffle(&mut idx, rng);
        let n = idx.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let counts = [n_train, n_val, n - n_train - n_val];
        for (k, &count) in counts.iter().enumerate() {
            if fractions[k] > 0.0 && count == 0 {
                return Err(Error::Config(format!(
                    "split {k} would contain no samples of class {c} ({n} available)"
                )));
            }
        }
        out[0].extend_from_slice(&idx[..n_train]);
        out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        out[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Class-stratified train/val/test split. Sample pairing is preserved: each
/// split's auxiliary batch is index-aligned with its source batch.
pub fn split(dataset: &MultimodalDataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
    }
    let classes = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[0x5B]));
    let src_parts = stratified_cut(dataset.source.labels(), classes, fractions, &mut rng)?;

    let make = |k: usize, aux_parts: &Option<[Vec<usize>; 3]>| -> Result<MultimodalDataset> {
        let src_idx = &src_parts[k];
        let source = dataset.source.subset(src_idx);
        match (&dataset.pairing, aux_parts) {
            (Some(p), _) => {
                let aux_idx: Vec<usize> = src_idx.iter().map(|&i| p[i]).collect();
                MultimodalDataset::new(
                    source,
                    dataset.auxiliary.subset(&aux_idx),
                    Some((0..src_idx.len()).collect()),
                    dataset.alignment,
                )
            }
            (None, Some(parts)) => MultimodalDataset::new(
                source,
                dataset.auxiliary.subset(&parts[k]),
                None,
                dataset.alignment,
            ),
            (None, None) => unreachable!("unpaired datasets always cut the auxiliary pool"),
        }
    };
    let aux_parts = match dataset.pairing {
        Some(_) => None,
        None => Some(stratified_cut(
            dataset.auxiliary.labels(),
            classes,
            fractions,
            &mut rng,
        )?),
    };
    Ok(Splits {
        train: make(0, &aux_parts)?,
        val: make(1, &aux_parts)?,
        test: make(2, &aux_parts)?,
    })
}
