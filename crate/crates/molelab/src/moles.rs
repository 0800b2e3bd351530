//! Mole scoring and poison-batch assembly.
//!
//! A "mole" for the ordered pair (attacked = a, confounding = c) is a
//! training sample whose true label is c but to which the victim model
//! assigns an unusually high probability of belonging to class a. Moles are
//! ranked by that probability and the top slice is recruited, correctly
//! labeled, into a class-balanced poison batch.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_from_pool, ClassIndex, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Anything that can produce class probabilities for the samples of one
/// class. The trained victim is the usual source; an external score table can
/// stand in when the victim cannot be queried directly.
pub trait ScoreSource {
    /// Probabilities for every sample whose true label is `c`, as
    /// (sample indices into `data`, matrix of shape len(indices) x k).
    fn class_probs(
        &self,
        data: &LabeledDataset,
        index: &ClassIndex,
        c: usize,
    ) -> Result<(Vec<usize>, Array2<f64>)>;

    /// Number of classes the source can score.
    fn score_classes(&self) -> usize;

    /// Rank the samples of class `c` by the probability of class `a`,
    /// highest first. Equal scores are ordered by ascending sample index so
    /// the ranking is a total order.
    fn score_pair(
        &self,
        data: &LabeledDataset,
        index: &ClassIndex,
        a: usize,
        c: usize,
    ) -> Result<ScoreTable> {
        if a == c {
            return Err(Error::InvalidArgument(
                "attacked and confounding class must differ".into(),
            ));
        }
        if a >= self.score_classes() {
            return Err(Error::InvalidArgument(format!(
                "attacked class {a} out of range for {} score classes",
                self.score_classes()
            )));
        }
        if c >= data.k() {
            return Err(Error::InvalidArgument(format!(
                "confounding class {c} out of range for k={}",
                data.k()
            )));
        }
        let (indices, probs) = self.class_probs(data, index, c)?;
        let mut entries: Vec<(usize, f64)> = indices
            .iter()
            .zip(probs.column(a))
            .map(|(&i, &p)| (i, p))
            .collect();
        entries.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        Ok(ScoreTable {
            attacked: a,
            confounding: c,
            entries,
        })
    }
}

impl ScoreSource for Classifier {
    fn class_probs(
        &self,
        data: &LabeledDataset,
        index: &ClassIndex,
        c: usize,
    ) -> Result<(Vec<usize>, Array2<f64>)> {
        if c >= data.k() {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range for k={}",
                data.k()
            )));
        }
        let rows = index.class(c);
        let subset = data.features.select(ndarray::Axis(0), rows);
        let probs = self.softmax_probs(subset.view())?;
        Ok((rows.to_vec(), probs))
    }

    fn score_classes(&self) -> usize {
        self.k()
    }
}

/// Samples of one confounding class ranked by how strongly the victim reads
/// them as the attacked class. `entries` pairs a sample index with its score,
/// best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub attacked: usize,
    pub confounding: usize,
    pub entries: Vec<(usize, f64)>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The top-n slice of a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleSet {
    pub attacked: usize,
    pub confounding: usize,
    pub n: usize,
    pub indices: Vec<usize>,
    /// Mean score of the selected moles; 0 when the set is empty.
    pub mean_score: f64,
}

/// Take the `n` highest-scoring samples from a table.
pub fn select_moles(table: &ScoreTable, n: usize) -> Result<MoleSet> {
    if n > table.entries.len() {
        return Err(Error::InsufficientSamples(format!(
            "requested {n} moles for pair ({}, {}) but only {} samples of class {} exist",
            table.attacked,
            table.confounding,
            table.entries.len(),
            table.confounding
        )));
    }
    let indices: Vec<usize> = table.entries[..n].iter().map(|&(i, _)| i).collect();
    let mean_score = if n == 0 {
        0.0
    } else {
        table.entries[..n].iter().map(|&(_, s)| s).sum::<f64>() / n as f64
    };
    Ok(MoleSet {
        attacked: table.attacked,
        confounding: table.confounding,
        n,
        indices,
        mean_score,
    })
}

/// A class-balanced poison batch: every recruited mole set plus uniform
/// draws from each class that is not serving as a confounding class, all
/// referenced by index into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSet {
    /// (attacked, confounding) per recruited mole set.
    pub pairs: Vec<(usize, usize)>,
    pub n_per_class: usize,
    /// All member indices into the source dataset, shuffled.
    pub indices: Vec<usize>,
    /// The mole subset of `indices`, in ranking order.
    pub mole_indices: Vec<usize>,
}

impl PoisonSet {
    /// Materialize the batch as its own dataset.
    pub fn dataset(&self, source: &LabeledDataset) -> LabeledDataset {
        source.gather(&self.indices)
    }

    /// Per-class member counts over the true labels.
    pub fn histogram(&self, source: &LabeledDataset) -> Vec<usize> {
        let mut counts = vec![0usize; source.k()];
        for &i in &self.indices {
            counts[source.labels[i]] += 1;
        }
        counts
    }
}

/// Assemble a poison batch from recruited moles.
///
/// `classes` is the class universe to balance over (all classes for an
/// offline attack, the classes seen so far in a class-incremental run).
/// Every class in the universe that is not confounding for some mole set is
/// filled with `n_per_class` uniform draws; note this includes the attacked
/// classes themselves. Every mole set must hold exactly `n_per_class`
/// samples and no two may share a confounding class.
pub fn build_poison_set(
    moles: &[MoleSet],
    source: &LabeledDataset,
    index: &ClassIndex,
    classes: &[usize],
    n_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PoisonSet> {
    let mut confounding: Vec<usize> = Vec::new();
    for set in moles {
        if set.n != n_per_class {
            return Err(Error::InvalidArgument(format!(
                "mole set ({}, {}) holds {} samples, expected {n_per_class}",
                set.attacked, set.confounding, set.n
            )));
        }
        if !classes.contains(&set.confounding) || !classes.contains(&set.attacked) {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) falls outside the class universe",
                set.attacked, set.confounding
            )));
        }
        if confounding.contains(&set.confounding) {
            return Err(Error::InvalidArgument(format!(
                "class {} is confounding for more than one mole set",
                set.confounding
            )));
        }
        confounding.push(set.confounding);
    }

    let mut indices: Vec<usize> = Vec::with_capacity(classes.len() * n_per_class);
    let mut mole_indices: Vec<usize> = Vec::new();
    for set in moles {
        indices.extend_from_slice(&set.indices);
        mole_indices.extend_from_slice(&set.indices);
    }
    for &class in classes {
        if class >= source.k() {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for k={}",
                source.k()
            )));
        }
        if confounding.contains(&class) {
            continue;
        }
        indices.extend(sample_from_pool(index.class(class), class, n_per_class, rng)?);
    }
    use rand::seq::SliceRandom;
    indices.shuffle(rng);

    Ok(PoisonSet {
        pairs: moles.iter().map(|m| (m.attacked, m.confounding)).collect(),
        n_per_class,
        indices,
        mole_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_confusable, generate_synthetic, PlantedPair};
    use crate::model::{train, TrainConfig};
    use crate::rng::RunRng;
    use approx::assert_abs_diff_eq;

    /// Score source backed by a fixed table, for deterministic fixtures.
    struct Fixed {
        k: usize,
        probs: Vec<Vec<f64>>,
    }

    impl ScoreSource for Fixed {
        fn class_probs(
            &self,
            _data: &LabeledDataset,
            index: &ClassIndex,
            c: usize,
        ) -> Result<(Vec<usize>, Array2<f64>)> {
            let rows = index.class(c).to_vec();
            let mut m = Array2::zeros((rows.len(), self.k));
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..self.k {
                    m[[r, j]] = self.probs[i][j];
                }
            }
            Ok((rows, m))
        }

        fn score_classes(&self) -> usize {
            self.k
        }
    }

    fn toy_dataset(labels: Vec<usize>, k: usize) -> (LabeledDataset, ClassIndex) {
        let n = labels.len();
        let names = (0..k).map(|i| format!("c{i}")).collect();
        let data = LabeledDataset::new(ndarray::Array2::zeros((n, 2)), labels, names).unwrap();
        let index = ClassIndex::build(&data);
        (data, index)
    }

    #[test]
    fn scores_sort_descending_with_index_tiebreak() {
        let (data, index) = toy_dataset(vec![1, 1, 1, 1, 0], 2);
        let fixed = Fixed {
            k: 2,
            probs: vec![
                vec![0.3, 0.7],
                vec![0.9, 0.1],
                vec![0.3, 0.7],
                vec![0.5, 0.5],
                vec![1.0, 0.0],
            ],
        };
        let table = fixed.score_pair(&data, &index, 0, 1).unwrap();
        assert_eq!(
            table.entries,
            vec![(1, 0.9), (3, 0.5), (0, 0.3), (2, 0.3)],
            "ties on 0.3 must fall back to ascending index"
        );
    }

    #[test]
    fn same_class_pair_is_rejected() {
        let (data, index) = toy_dataset(vec![0, 1], 2);
        let fixed = Fixed {
            k: 2,
            probs: vec![vec![0.5, 0.5]; 2],
        };
        assert!(matches!(
            fixed.score_pair(&data, &index, 1, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn select_moles_takes_the_prefix() {
        let table = ScoreTable {
            attacked: 0,
            confounding: 1,
            entries: vec![(7, 0.9), (2, 0.8), (5, 0.1)],
        };
        let set = select_moles(&table, 2).unwrap();
        assert_eq!(set.indices, vec![7, 2]);
        assert_abs_diff_eq!(set.mean_score, 0.85, epsilon = 1e-12);
        assert_eq!(set.n, 2);
    }

    #[test]
    fn empty_selection_has_zero_mean() {
        let table = ScoreTable {
            attacked: 0,
            confounding: 1,
            entries: vec![(7, 0.9)],
        };
        let set = select_moles(&table, 0).unwrap();
        assert!(set.indices.is_empty());
        assert_eq!(set.mean_score, 0.0);
    }

    #[test]
    fn oversized_selection_is_an_error() {
        let table = ScoreTable {
            attacked: 0,
            confounding: 1,
            entries: vec![(7, 0.9)],
        };
        assert!(matches!(
            select_moles(&table, 2),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn selection_matches_a_brute_force_oracle() {
        // Independent oracle: enumerate all samples of the confounding class
        // and keep the n with maximal score under the same tie rule, found by
        // repeated linear scans rather than sorting.
        let data = generate_synthetic(4, 50, 6, 0.45, 91).unwrap();
        let index = ClassIndex::build(&data);
        let root = RunRng::new(92);
        let model = Classifier::new(&[6, 8, 4], &mut root.stream("init")).unwrap();
        let model = train(
            &model,
            &data,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            &mut root.stream("train"),
        )
        .unwrap();

        for (a, c) in [(0, 1), (2, 3), (3, 0)] {
            let table = model.score_pair(&data, &index, a, c).unwrap();
            let set = select_moles(&table, 7).unwrap();

            let rows = index.class(c);
            let probs = model
                .softmax_probs(data.features.select(ndarray::Axis(0), rows).view())
                .unwrap();
            let mut remaining: Vec<(usize, f64)> = rows
                .iter()
                .zip(probs.column(a))
                .map(|(&i, &p)| (i, p))
                .collect();
            let mut expected = Vec::new();
            for _ in 0..7 {
                let mut best = 0;
                for (j, &(idx, score)) in remaining.iter().enumerate() {
                    let (bidx, bscore) = remaining[best];
                    if score > bscore || (score == bscore && idx < bidx) {
                        best = j;
                    }
                }
                expected.push(remaining.remove(best).0);
            }
            assert_eq!(set.indices, expected, "pair ({a}, {c})");
        }
    }

    #[test]
    fn moles_really_look_like_the_attacked_class() {
        // On a fixture with planted near-duplicates, the top moles for the
        // planted pair should be dominated by the planted samples.
        let planted = PlantedPair {
            attacked: 0,
            confounding: 2,
            fraction: 0.2,
            blend: 0.0,
        };
        let data = generate_confusable(3, 100, 8, 0.05, &[planted], 77).unwrap();
        let index = ClassIndex::build(&data);
        let root = RunRng::new(78);
        let model = Classifier::new(&[8, 16, 3], &mut root.stream("init")).unwrap();
        let model = train(
            &model,
            &data,
            &TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            &mut root.stream("train"),
        )
        .unwrap();
        let table = model.score_pair(&data, &index, 0, 2).unwrap();
        let set = select_moles(&table, 20).unwrap();
        // Planted samples sit at the head of the class-2 block.
        let class2_start = index.class(2)[0];
        let planted_hits = set
            .indices
            .iter()
            .filter(|&&i| (class2_start..class2_start + 20).contains(&i))
            .count();
        assert!(
            planted_hits >= 15,
            "only {planted_hits}/20 moles were planted samples"
        );
    }

    #[test]
    fn poison_histogram_is_exactly_uniform() {
        let (data, index) = toy_dataset(
            (0..5).flat_map(|c| std::iter::repeat(c).take(30)).collect(),
            5,
        );
        let moles = vec![MoleSet {
            attacked: 0,
            confounding: 1,
            n: 10,
            indices: (30..40).collect(),
            mean_score: 0.5,
        }];
        let classes: Vec<usize> = (0..5).collect();
        let mut rng = RunRng::new(5).stream("poison");
        let set = build_poison_set(&moles, &data, &index, &classes, 10, &mut rng).unwrap();
        assert_eq!(set.indices.len(), 5 * 10);
        assert_eq!(set.histogram(&data), vec![10; 5]);
        // The attacked class is represented by clean samples.
        let attacked_members = set
            .indices
            .iter()
            .filter(|&&i| data.labels[i] == 0)
            .count();
        assert_eq!(attacked_members, 10);
    }

    #[test]
    fn compound_poison_balances_every_class_once() {
        let (data, index) = toy_dataset(
            (0..6).flat_map(|c| std::iter::repeat(c).take(20)).collect(),
            6,
        );
        let moles = vec![
            MoleSet {
                attacked: 0,
                confounding: 1,
                n: 5,
                indices: (20..25).collect(),
                mean_score: 0.9,
            },
            MoleSet {
                attacked: 2,
                confounding: 3,
                n: 5,
                indices: (60..65).collect(),
                mean_score: 0.8,
            },
        ];
        let classes: Vec<usize> = (0..6).collect();
        let mut rng = RunRng::new(6).stream("poison");
        let set = build_poison_set(&moles, &data, &index, &classes, 5, &mut rng).unwrap();
        assert_eq!(set.indices.len(), 6 * 5);
        assert_eq!(set.histogram(&data), vec![5; 6]);
        assert_eq!(set.pairs, vec![(0, 1), (2, 3)]);
        // Confounding-class members must be exactly the recruited moles.
        let class1: Vec<usize> = set
            .indices
            .iter()
            .copied()
            .filter(|&i| data.labels[i] == 1)
            .collect();
        let mut sorted = class1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (20..25).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_confounding_class_is_rejected() {
        let (data, index) = toy_dataset(
            (0..4).flat_map(|c| std::iter::repeat(c).take(10)).collect(),
            4,
        );
        let mole = |a: usize| MoleSet {
            attacked: a,
            confounding: 1,
            n: 2,
            indices: vec![10, 11],
            mean_score: 0.5,
        };
        let classes: Vec<usize> = (0..4).collect();
        let mut rng = RunRng::new(7).stream("poison");
        let err = build_poison_set(
            &[mole(0), mole(2)],
            &data,
            &index,
            &classes,
            2,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn mismatched_mole_count_is_rejected() {
        let (data, index) = toy_dataset(vec![0, 0, 1, 1], 2);
        let moles = vec![MoleSet {
            attacked: 0,
            confounding: 1,
            n: 1,
            indices: vec![2],
            mean_score: 0.5,
        }];
        let mut rng = RunRng::new(8).stream("poison");
        let err =
            build_poison_set(&moles, &data, &index, &[0, 1], 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn assembly_is_deterministic_per_seed() {
        let (data, index) = toy_dataset(
            (0..3).flat_map(|c| std::iter::repeat(c).take(40)).collect(),
            3,
        );
        let moles = vec![MoleSet {
            attacked: 0,
            confounding: 2,
            n: 8,
            indices: (80..88).collect(),
            mean_score: 0.4,
        }];
        let classes: Vec<usize> = (0..3).collect();
        let a = build_poison_set(
            &moles,
            &data,
            &index,
            &classes,
            8,
            &mut RunRng::new(9).stream("poison"),
        )
        .unwrap();
        let b = build_poison_set(
            &moles,
            &data,
            &index,
            &classes,
            8,
            &mut RunRng::new(9).stream("poison"),
        )
        .unwrap();
        let c = build_poison_set(
            &moles,
            &data,
            &index,
            &classes,
            8,
            &mut RunRng::new(10).stream("poison"),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn shortfall_in_a_fill_class_is_an_error() {
        let (data, index) = toy_dataset(vec![0, 0, 0, 1, 1, 1, 2], 3);
        let moles = vec![MoleSet {
            attacked: 0,
            confounding: 1,
            n: 3,
            indices: vec![3, 4, 5],
            mean_score: 0.5,
        }];
        let mut rng = RunRng::new(11).stream("poison");
        let err =
            build_poison_set(&moles, &data, &index, &[0, 1, 2], 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples(_)));
    }
}
