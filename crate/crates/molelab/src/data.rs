//! Dataset representation, IDX ingestion, synthetic fixtures, and sampling.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::idx;
use crate::rng::RunRng;

/// Flat feature vectors in [0,1] with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("empty class-name list".into()));
        }
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Format(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        let k = self.class_names.len();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Format(format!("label {bad} out of range for k={k}")));
        }
        if self.features.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format("feature value outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    /// Row subset by sample index, preserving order. Labels keep their ids.
    pub fn gather(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Per-class sorted sample-index lists.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    by_class: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn build(data: &LabeledDataset) -> Self {
        let mut by_class = vec![Vec::new(); data.k()];
        for (i, &label) in data.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        ClassIndex { by_class }
    }

    pub fn class(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn population(&self, class_id: usize) -> usize {
        self.by_class[class_id].len()
    }
}

/// Load an image/label IDX pair. Features are scaled by 1/255; sample order
/// follows the file.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    class_names: Vec<String>,
) -> Result<LabeledDataset> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dims = images.rows * images.cols;
    let features = Array2::from_shape_vec(
        (images.count, dims),
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
    .expect("shape checked by idx reader");
    LabeledDataset::new(features, labels.into_iter().map(usize::from).collect(), class_names)
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class_{c}")).collect()
}

fn cluster_means(k: usize, dims: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Each class owns every k-th coordinate: high mean there, near-zero
    // elsewhere. Interleaved ownership keeps cross-class overlap small, so
    // clusters stay separable at modest dims, and the jitter keeps means
    // distinct even when dims < k leaves some classes without a coordinate
    // of their own.
    let mut means = Array2::zeros((k, dims));
    for (class, mut row) in means.rows_mut().into_iter().enumerate() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = if d % k == class {
                rng.gen_range(0.72..0.84)
            } else {
                rng.gen_range(0.005..0.035)
            };
        }
    }
    means
}

fn draw_clipped(mean_row: ndarray::ArrayView1<f64>, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, spread).expect("spread validated");
    mean_row
        .iter()
        .map(|&m| (m + noise.sample(rng)).clamp(0.0, 1.0))
        .collect()
}

/// k Gaussian clusters with distinct means on the unit hypercube, clipped to
/// [0,1]. Samples are laid out class by class, so the label histogram is
/// exactly uniform.
pub fn generate_synthetic(
    k: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    generate_confusable(k, per_class, dims, spread, &[], seed)
}

/// A deliberately confusable pair for planted-structure fixtures: `fraction`
/// of the confounding class's samples are drawn from a cluster that carries
/// the attacked class's full feature signature, so a trained model scores
/// them highly for the attacked class. `blend` controls how much of the
/// confounding class's own signature the cluster keeps on top of that: 0
/// puts it exactly on the attacked mean, values toward 1 superimpose the
/// confounding features at full strength. Ambiguous samples show both
/// classes' traits at once rather than sitting between them.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedPair {
    pub attacked: usize,
    pub confounding: usize,
    pub fraction: f64,
    #[serde(default)]
    pub blend: f64,
}

/// Synthetic clusters with planted confusable structure. With an empty plant
/// list this is a plain separable mixture.
pub fn generate_confusable(
    k: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    planted: &[PlantedPair],
    seed: u64,
) -> Result<LabeledDataset> {
    if k < 2 || per_class < 1 || dims < 1 || spread <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 2, per_class >= 1, dims >= 1, spread > 0 (got k={k}, per_class={per_class}, dims={dims}, spread={spread})"
        )));
    }
    for p in planted {
        if p.attacked >= k || p.confounding >= k || p.attacked == p.confounding {
            return Err(Error::InvalidArgument(format!(
                "planted pair ({}, {}) invalid for k={k}",
                p.attacked, p.confounding
            )));
        }
        if !(0.0..=1.0).contains(&p.fraction) {
            return Err(Error::InvalidArgument(format!(
                "planted fraction {} outside [0,1]",
                p.fraction
            )));
        }
        if !(0.0..=1.0).contains(&p.blend) {
            return Err(Error::InvalidArgument(format!(
                "planted blend {} outside [0,1]",
                p.blend
            )));
        }
    }

    let root = RunRng::new(seed);
    let means = cluster_means(k, dims, &mut root.stream("synthetic-means"));
    let mut rng = root.stream("synthetic-samples");

    let mut features = Array2::zeros((k * per_class, dims));
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        // Planted samples sit at the front of their class block so fixtures
        // can locate them by index.
        let plant = planted.iter().find(|p| p.confounding == class);
        let n_planted = plant.map_or(0, |p| (p.fraction * per_class as f64).round() as usize);
        for i in 0..per_class {
            let row = match plant {
                Some(p) if i < n_planted => {
                    let a = means.row(p.attacked);
                    let c = means.row(p.confounding);
                    let mixed: Array1<f64> =
                        ndarray::Zip::from(&a).and(&c).map_collect(|&va, &vc| {
                            va.max(p.blend * vc)
                        });
                    draw_clipped(mixed.view(), spread, &mut rng)
                }
                _ => draw_clipped(means.row(class), spread, &mut rng),
            };
            features
                .row_mut(class * per_class + i)
                .assign(&ndarray::ArrayView1::from(&row));
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, default_names(k))
}

/// n distinct indices with the given label, drawn uniformly without
/// replacement.
pub fn sample_uniform(
    data: &LabeledDataset,
    class_id: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if class_id >= data.k() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for k={}",
            data.k()
        )));
    }
    let pool: Vec<usize> = data
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class_id)
        .map(|(i, _)| i)
        .collect();
    sample_from_pool(&pool, class_id, n, rng)
}

pub(crate) fn sample_from_pool(
    pool: &[usize],
    class_id: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::InsufficientSamples(format!(
            "requested {n} samples of class {class_id}, population is {}",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, n).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idx;
    use std::collections::HashSet;

    #[test]
    fn synthetic_counts_and_labels() {
        let ds = generate_synthetic(2, 5, 3, 0.05, 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(ds.k(), 2);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 4, 5, 0.1, 7).unwrap();
        let b = generate_synthetic(3, 4, 5, 0.1, 7).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_histogram_is_uniform() {
        let ds = generate_synthetic(5, 13, 4, 0.2, 99).unwrap();
        let idx = ClassIndex::build(&ds);
        for c in 0..5 {
            assert_eq!(idx.population(c), 13);
        }
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(1, 5, 3, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 0, 3, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 5, 0, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 5, 3, 0.0, 0).is_err());
    }

    #[test]
    fn planted_samples_lead_their_class_block() {
        let plant = PlantedPair {
            attacked: 0,
            confounding: 1,
            fraction: 0.5,
            blend: 0.0,
        };
        let ds = generate_confusable(2, 4, 2, 0.001, &[plant], 3).unwrap();
        // With tiny spread, the two planted rows of class 1 hug class 0's
        // mean while the rest hug class 1's.
        let d = |i: usize, j: usize| {
            let a = ds.features.row(i);
            let b = ds.features.row(j);
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        assert!(d(4, 0) < d(4, 6), "first class-1 sample should sit in class 0's cluster");
        assert!(d(5, 0) < d(5, 6));
        assert!(d(6, 0) > d(6, 7), "unplanted class-1 samples should hug their own mean");
    }

    #[test]
    fn idx_pair_loads_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        let lbls = dir.path().join("lbls");
        idx::write_images(&imgs, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 153]).unwrap();
        idx::write_labels(&lbls, &[1, 0]).unwrap();
        let ds = load_idx(&imgs, &lbls, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dims(), 4);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.features[[0, 0]], 0.0);
        assert_eq!(ds.features[[0, 1]], 1.0);
        assert_eq!(ds.features[[0, 2]], 51.0 / 255.0);
        assert_eq!(ds.features[[1, 3]], 153.0 / 255.0);
    }

    #[test]
    fn idx_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        let lbls = dir.path().join("lbls");
        idx::write_images(&imgs, 2, 2, &[0; 8]).unwrap();
        idx::write_labels(&lbls, &[0, 0, 1]).unwrap();
        let err = load_idx(&imgs, &lbls, vec!["a".into(), "b".into()]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn sample_uniform_basics() {
        let ds = generate_synthetic(3, 10, 2, 0.1, 5).unwrap();
        let root = RunRng::new(5);
        let mut rng = root.stream("t");
        assert!(sample_uniform(&ds, 1, 0, &mut rng).unwrap().is_empty());

        let full = sample_uniform(&ds, 1, 10, &mut rng).unwrap();
        let set: HashSet<usize> = full.iter().copied().collect();
        assert_eq!(set, (10..20).collect::<HashSet<_>>());

        assert!(matches!(
            sample_uniform(&ds, 1, 11, &mut rng),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn sample_uniform_is_deterministic_per_seed() {
        let ds = generate_synthetic(2, 10, 2, 0.1, 5).unwrap();
        let draw = || {
            let mut rng = RunRng::new(11).stream("complement");
            sample_uniform(&ds, 0, 3, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sample_uniform_frequencies_are_roughly_even() {
        // chi-square style sanity: each member of a 10-strong class should be
        // drawn close to n/population of the time.
        let ds = generate_synthetic(2, 10, 2, 0.1, 5).unwrap();
        let mut rng = RunRng::new(23).stream("freq");
        let mut hits = [0u32; 10];
        let trials = 10_000;
        for _ in 0..trials {
            for i in sample_uniform(&ds, 0, 3, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        for &h in &hits {
            let freq = f64::from(h) / f64::from(trials);
            assert!((freq - 0.3).abs() < 0.05, "frequency {freq} strays from 0.3");
        }
    }

    #[test]
    fn gather_preserves_order_and_labels() {
        let ds = generate_synthetic(2, 3, 2, 0.1, 1).unwrap();
        let sub = ds.gather(&[4, 0, 5]);
        assert_eq!(sub.labels, vec![1, 0, 1]);
        assert_eq!(sub.features.row(0), ds.features.row(4));
        assert_eq!(sub.features.row(2), ds.features.row(5));
    }
}
