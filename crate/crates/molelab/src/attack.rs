//! Offline poisoning runs: fine-tune a trained victim on a poison batch and
//! measure the damage, for a single pair, for every ordered pair, or across a
//! range of recruitment sizes.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassIndex, LabeledDataset};
use crate::error::Result;
use crate::model::{evaluate, train, Classifier, EvalResult, TrainConfig};
use crate::moles::{build_poison_set, select_moles, PoisonSet, ScoreSource};
use crate::rng::RunRng;

/// Fine-tune settings used when a victim ingests a poison batch: one pass at
/// a small step size, as if the batch were one more increment of training.
pub fn attack_train_defaults() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        learning_rate: 0.002,
        momentum: 0.9,
        epochs: 1,
        lr_decay: 0.1,
        shuffle_seed: 0,
    }
}

/// Damage report for one poisoning run. Accuracies are fractions in [0, 1];
/// every `delta_*` field is expressed in percentage points (post minus pre,
/// times 100).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub pairs: Vec<(usize, usize)>,
    pub n_per_class: usize,
    /// Mean mole score per recruited pair, in `pairs` order.
    pub mean_scores: Vec<f64>,
    pub pre: EvalResult,
    pub post: EvalResult,
    pub delta_per_class: Vec<f64>,
    /// Per attacked class, in `pairs` order.
    pub delta_attacked: Vec<f64>,
    pub delta_total: f64,
}

fn outcome_from(
    poison: &PoisonSet,
    mean_scores: Vec<f64>,
    pre: EvalResult,
    post: EvalResult,
) -> AttackOutcome {
    let delta_per_class: Vec<f64> = post
        .per_class_accuracy
        .iter()
        .zip(&pre.per_class_accuracy)
        .map(|(p, b)| (p - b) * 100.0)
        .collect();
    let delta_attacked = poison
        .pairs
        .iter()
        .map(|&(a, _)| delta_per_class[a])
        .collect();
    let delta_total = (post.total_accuracy - pre.total_accuracy) * 100.0;
    AttackOutcome {
        pairs: poison.pairs.clone(),
        n_per_class: poison.n_per_class,
        mean_scores,
        pre,
        post,
        delta_per_class,
        delta_attacked,
        delta_total,
    }
}

/// Feed one poison batch to the victim and evaluate before and after.
/// Returns the outcome and the poisoned model.
pub fn attack_offline(
    victim: &Classifier,
    poison: &PoisonSet,
    source: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AttackOutcome, Classifier)> {
    let pre = evaluate(victim, test)?;
    let batch = poison.dataset(source);
    let poisoned = train(victim, &batch, cfg, rng)?;
    let post = evaluate(&poisoned, test)?;
    Ok((outcome_from(poison, Vec::new(), pre, post), poisoned))
}

/// Mean damage for every ordered (attacked, confounding) pair, as dense
/// matrices indexed `[attacked, confounding]` with NaN on the diagonal.
#[derive(Debug, Clone)]
pub struct PairMatrix {
    pub k: usize,
    pub n_per_class: usize,
    pub trials: usize,
    pub delta_attacked: Array2<f64>,
    pub delta_total: Array2<f64>,
    pub mean_score: Array2<f64>,
}

impl PairMatrix {
    /// The pair with the most negative attacked-class delta, ties broken by
    /// ascending (attacked, confounding).
    pub fn best_pair(&self) -> (usize, usize) {
        let mut best = None;
        for a in 0..self.k {
            for c in 0..self.k {
                if a == c {
                    continue;
                }
                let v = self.delta_attacked[[a, c]];
                match best {
                    None => best = Some((a, c, v)),
                    Some((_, _, bv)) if v < bv => best = Some((a, c, v)),
                    _ => {}
                }
            }
        }
        let (a, c, _) = best.expect("at least one off-diagonal pair");
        (a, c)
    }
}

/// Run the single-pair attack for every ordered pair of classes, averaging
/// damage over `trials` repetitions with independent randomness.
pub fn run_all_pairs(
    victim: &Classifier,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    n_per_class: usize,
    trials: usize,
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<PairMatrix> {
    let k = source.k();
    let classes: Vec<usize> = (0..k).collect();
    let pre = evaluate(victim, test)?;
    let mut delta_attacked = Array2::from_elem((k, k), f64::NAN);
    let mut delta_total = Array2::from_elem((k, k), f64::NAN);
    let mut mean_score = Array2::from_elem((k, k), f64::NAN);

    for c in 0..k {
        // One probability pass per confounding class covers all attacked
        // classes at once.
        let (rows, probs) = victim.class_probs(source, index, c)?;
        for a in 0..k {
            if a == c {
                continue;
            }
            let mut entries: Vec<(usize, f64)> = rows
                .iter()
                .zip(probs.column(a))
                .map(|(&i, &p)| (i, p))
                .collect();
            entries.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let table = crate::moles::ScoreTable {
                attacked: a,
                confounding: c,
                entries,
            };
            let moles = select_moles(&table, n_per_class)?;
            mean_score[[a, c]] = moles.mean_score;

            let mut acc_a = 0.0;
            let mut acc_t = 0.0;
            for t in 0..trials {
                let mut rng = base.stream_at(&format!("pair-{a}-{c}"), t as u64);
                let poison = build_poison_set(
                    std::slice::from_ref(&moles),
                    source,
                    index,
                    &classes,
                    n_per_class,
                    &mut rng,
                )?;
                let poisoned = train(victim, &poison.dataset(source), cfg, &mut rng)?;
                let post = evaluate(&poisoned, test)?;
                acc_a += (post.per_class_accuracy[a] - pre.per_class_accuracy[a]) * 100.0;
                acc_t += (post.total_accuracy - pre.total_accuracy) * 100.0;
            }
            delta_attacked[[a, c]] = acc_a / trials as f64;
            delta_total[[a, c]] = acc_t / trials as f64;
        }
    }
    Ok(PairMatrix {
        k,
        n_per_class,
        trials,
        delta_attacked,
        delta_total,
        mean_score,
    })
}

/// Damage and mole quality at one recruitment size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub mean_delta_attacked: f64,
    pub mean_delta_total: f64,
    pub mean_score: f64,
}

/// Repeat the single-pair attack across recruitment sizes. A size of zero
/// degenerates to an empty batch, which must leave the victim untouched.
pub fn sweep_n(
    victim: &Classifier,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    a: usize,
    c: usize,
    sizes: &[usize],
    trials: usize,
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<Vec<SweepPoint>> {
    let classes: Vec<usize> = (0..source.k()).collect();
    let pre = evaluate(victim, test)?;
    let table = victim.score_pair(source, index, a, c)?;
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let moles = select_moles(&table, n)?;
        let mut acc_a = 0.0;
        let mut acc_t = 0.0;
        for t in 0..trials {
            let mut rng = base.stream_at(&format!("sweep-{a}-{c}-{n}"), t as u64);
            let poison = build_poison_set(
                std::slice::from_ref(&moles),
                source,
                index,
                &classes,
                n,
                &mut rng,
            )?;
            let poisoned = train(victim, &poison.dataset(source), cfg, &mut rng)?;
            let post = evaluate(&poisoned, test)?;
            acc_a += (post.per_class_accuracy[a] - pre.per_class_accuracy[a]) * 100.0;
            acc_t += (post.total_accuracy - pre.total_accuracy) * 100.0;
        }
        points.push(SweepPoint {
            n,
            mean_delta_attacked: acc_a / trials as f64,
            mean_delta_total: acc_t / trials as f64,
            mean_score: moles.mean_score,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_confusable, PlantedPair};
    use crate::model::Classifier;

    /// Confusable fixture split into train and test halves. The planted
    /// near-duplicates of class `attacked` hide inside class `confounding`
    /// and land in the training half.
    fn fixture() -> (LabeledDataset, LabeledDataset, Classifier, RunRng) {
        let planted = PlantedPair {
            attacked: 0,
            confounding: 2,
            fraction: 0.2,
            blend: 0.0,
        };
        let all = generate_confusable(4, 250, 10, 0.09, &[planted], 121).unwrap();
        let index = ClassIndex::build(&all);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for c in 0..4 {
            let rows = index.class(c);
            train_idx.extend_from_slice(&rows[..200]);
            test_idx.extend_from_slice(&rows[200..]);
        }
        let train_set = all.gather(&train_idx);
        let test_set = all.gather(&test_idx);
        let root = RunRng::new(122);
        let model = Classifier::new(&[10, 16, 4], &mut root.stream("init")).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let victim = train(&model, &train_set, &cfg, &mut root.stream("train")).unwrap();
        (train_set, test_set, victim, root)
    }

    fn attack_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            ..attack_train_defaults()
        }
    }

    #[test]
    fn poisoning_the_planted_pair_damages_the_attacked_class() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let table = victim.score_pair(&train_set, &index, 0, 2).unwrap();
        let moles = select_moles(&table, 40).unwrap();
        assert!(moles.mean_score > 0.2, "fixture moles too weak");
        let mut rng = root.stream("attack");
        let poison = build_poison_set(
            &[moles],
            &train_set,
            &index,
            &[0, 1, 2, 3],
            40,
            &mut rng,
        )
        .unwrap();
        let (outcome, poisoned) = attack_offline(
            &victim,
            &poison,
            &train_set,
            &test_set,
            &attack_cfg(),
            &mut rng,
        )
        .unwrap();
        assert!(
            outcome.delta_attacked[0] < -5.0,
            "attacked class barely moved: {:?}",
            outcome.delta_attacked
        );
        assert!(outcome.delta_attacked[0] < outcome.delta_total);
        assert_eq!(outcome.pairs, vec![(0, 2)]);
        // The returned model really is the post-attack one.
        let re_eval = evaluate(&poisoned, &test_set).unwrap();
        assert_eq!(re_eval, outcome.post);
    }

    #[test]
    fn deltas_are_percentage_points_of_the_eval_pair() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let table = victim.score_pair(&train_set, &index, 0, 2).unwrap();
        let moles = select_moles(&table, 25).unwrap();
        let mut rng = root.stream("attack-pp");
        let poison =
            build_poison_set(&[moles], &train_set, &index, &[0, 1, 2, 3], 25, &mut rng)
                .unwrap();
        let (outcome, _) = attack_offline(
            &victim,
            &poison,
            &train_set,
            &test_set,
            &attack_cfg(),
            &mut rng,
        )
        .unwrap();
        for c in 0..4 {
            let expect = (outcome.post.per_class_accuracy[c]
                - outcome.pre.per_class_accuracy[c])
                * 100.0;
            assert_eq!(outcome.delta_per_class[c], expect);
        }
        assert_eq!(
            outcome.delta_total,
            (outcome.post.total_accuracy - outcome.pre.total_accuracy) * 100.0
        );
        assert_eq!(outcome.delta_attacked[0], outcome.delta_per_class[0]);
    }

    #[test]
    fn all_pairs_has_nan_diagonal_and_finite_cells() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let matrix = run_all_pairs(
            &victim,
            &train_set,
            &index,
            &test_set,
            15,
            1,
            &attack_cfg(),
            &root.derive("all-pairs", 0),
        )
        .unwrap();
        assert_eq!(matrix.k, 4);
        for a in 0..4 {
            for c in 0..4 {
                let v = matrix.delta_attacked[[a, c]];
                if a == c {
                    assert!(v.is_nan());
                    assert!(matrix.mean_score[[a, c]].is_nan());
                } else {
                    assert!(v.is_finite());
                    assert!(matrix.mean_score[[a, c]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn all_pairs_is_deterministic_and_matches_a_direct_run() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let base = root.derive("all-pairs", 0);
        let m1 = run_all_pairs(
            &victim, &train_set, &index, &test_set, 10, 2, &attack_cfg(), &base,
        )
        .unwrap();
        let m2 = run_all_pairs(
            &victim, &train_set, &index, &test_set, 10, 2, &attack_cfg(), &base,
        )
        .unwrap();
        let bitwise_eq = |x: &Array2<f64>, y: &Array2<f64>| {
            x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        assert!(bitwise_eq(&m1.delta_attacked, &m2.delta_attacked));
        assert!(bitwise_eq(&m1.delta_total, &m2.delta_total));
        assert!(bitwise_eq(&m1.mean_score, &m2.mean_score));

        // Reproduce cell (0, 2) trial 1 by hand with the same stream.
        let table = victim.score_pair(&train_set, &index, 0, 2).unwrap();
        let moles = select_moles(&table, 10).unwrap();
        let pre = evaluate(&victim, &test_set).unwrap();
        let mut acc = 0.0;
        for t in 0..2u64 {
            let mut rng = base.stream_at("pair-0-2", t);
            let poison = build_poison_set(
                std::slice::from_ref(&moles),
                &train_set,
                &index,
                &[0, 1, 2, 3],
                10,
                &mut rng,
            )
            .unwrap();
            let poisoned =
                train(&victim, &poison.dataset(&train_set), &attack_cfg(), &mut rng).unwrap();
            let post = evaluate(&poisoned, &test_set).unwrap();
            acc += (post.per_class_accuracy[0] - pre.per_class_accuracy[0]) * 100.0;
        }
        assert_eq!(m1.delta_attacked[[0, 2]], acc / 2.0);
    }

    #[test]
    fn best_pair_prefers_most_negative_then_lowest_indices() {
        let mut delta = Array2::from_elem((3, 3), f64::NAN);
        delta[[0, 1]] = -5.0;
        delta[[0, 2]] = -9.0;
        delta[[1, 0]] = -9.0;
        delta[[1, 2]] = 3.0;
        delta[[2, 0]] = 0.0;
        delta[[2, 1]] = -1.0;
        let m = PairMatrix {
            k: 3,
            n_per_class: 5,
            trials: 1,
            delta_attacked: delta,
            delta_total: Array2::zeros((3, 3)),
            mean_score: Array2::zeros((3, 3)),
        };
        assert_eq!(m.best_pair(), (0, 2));
    }

    #[test]
    fn zero_recruitment_leaves_the_victim_bitwise_identical() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let points = sweep_n(
            &victim,
            &train_set,
            &index,
            &test_set,
            0,
            2,
            &[0],
            3,
            &attack_cfg(),
            &root.derive("sweep", 0),
        )
        .unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].mean_delta_attacked, 0.0);
        assert_eq!(points[0].mean_delta_total, 0.0);
        assert_eq!(points[0].mean_score, 0.0);
    }

    #[test]
    fn sweep_scores_never_increase_with_n() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let points = sweep_n(
            &victim,
            &train_set,
            &index,
            &test_set,
            0,
            2,
            &[5, 10, 20, 40, 80],
            1,
            &attack_cfg(),
            &root.derive("sweep", 1),
        )
        .unwrap();
        for w in points.windows(2) {
            assert!(
                w[1].mean_score <= w[0].mean_score,
                "mean score rose from {} (n={}) to {} (n={})",
                w[0].mean_score,
                w[0].n,
                w[1].mean_score,
                w[1].n
            );
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let (train_set, test_set, victim, root) = fixture();
        let index = ClassIndex::build(&train_set);
        let run = |_: ()| {
            sweep_n(
                &victim,
                &train_set,
                &index,
                &test_set,
                0,
                2,
                &[5, 15],
                2,
                &attack_cfg(),
                &root.derive("sweep", 2),
            )
            .unwrap()
        };
        let a = run(());
        let b = run(());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean_delta_attacked, y.mean_delta_attacked);
            assert_eq!(x.mean_delta_total, y.mean_delta_total);
            assert_eq!(x.mean_score, y.mean_score);
        }
    }

}
