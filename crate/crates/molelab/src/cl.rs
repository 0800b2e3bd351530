//! Class-incremental continual learning with per-task poisoning.
//!
//! The victim sees tasks of fresh classes one at a time, growing its output
//! head per task. A naive learner fine-tunes on each task alone; a replay
//! learner mixes in a fixed-capacity exemplar store. With poisoning enabled,
//! every task after the first is followed by exactly one epoch on a compound
//! poison batch whose moles are ranked by a victim-agnostic reference scorer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_from_pool, ClassIndex, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, train, Classifier, TrainConfig};
use crate::moles::{build_poison_set, select_moles, MoleSet, ScoreSource};
use crate::optimize::{build_compound_plan, CompoundPlan, PlanMode, RegressionLine, ThresholdOn};
use crate::rng::RunRng;

/// Disjoint class partition, one entry per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<Vec<usize>>,
    pub split_seed: u64,
}

/// Random disjoint partition of the dataset's classes into equally sized
/// tasks, deterministic per seed.
pub fn split_tasks(
    data: &LabeledDataset,
    n_tasks: usize,
    classes_per_task: usize,
    split_seed: u64,
) -> Result<TaskSchedule> {
    let k = data.k();
    if n_tasks == 0 || classes_per_task == 0 || n_tasks * classes_per_task != k {
        return Err(Error::InvalidArgument(format!(
            "{n_tasks} tasks x {classes_per_task} classes do not partition k={k}"
        )));
    }
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut RunRng::new(split_seed).stream("task-split"));
    let tasks = classes
        .chunks(classes_per_task)
        .map(|c| c.to_vec())
        .collect();
    Ok(TaskSchedule { tasks, split_seed })
}

impl TaskSchedule {
    fn validate(&self, k: usize) -> Result<usize> {
        if self.tasks.is_empty() || self.tasks[0].is_empty() {
            return Err(Error::InvalidArgument("empty task schedule".into()));
        }
        let per_task = self.tasks[0].len();
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            if task.len() != per_task {
                return Err(Error::InvalidArgument(
                    "tasks must all have the same class count".into(),
                ));
            }
            for &c in task {
                if c >= k || !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} is out of range or repeated in the schedule"
                    )));
                }
            }
        }
        if seen.len() != k {
            return Err(Error::InvalidArgument(format!(
                "schedule covers {} of {k} classes",
                seen.len()
            )));
        }
        Ok(per_task)
    }
}

/// Fixed-capacity exemplar store with an equal per-class quota.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayBuffer {
    capacity: usize,
    per_class: BTreeMap<usize, Vec<usize>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn classes_seen(&self) -> usize {
        self.per_class.len()
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Current per-class quota: capacity split evenly over seen classes.
    pub fn quota(&self) -> usize {
        if self.per_class.is_empty() {
            0
        } else {
            self.capacity / self.per_class.len()
        }
    }

    pub fn stored(&self, class: usize) -> &[usize] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every stored exemplar index, grouped by ascending class id.
    pub fn exemplars(&self) -> Vec<usize> {
        self.per_class.values().flatten().copied().collect()
    }
}

/// Register a task's classes: existing classes are truncated to the new
/// quota by uniform random retention, then new classes are filled with
/// uniform random exemplars (up to quota, capped by population).
pub fn update_replay_buffer(
    buffer: &mut ReplayBuffer,
    task_classes: &[usize],
    index: &ClassIndex,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let mut new_classes: Vec<usize> = task_classes
        .iter()
        .copied()
        .filter(|c| !buffer.per_class.contains_key(c))
        .collect();
    new_classes.sort_unstable();
    let seen = buffer.per_class.len() + new_classes.len();
    if seen == 0 {
        return Ok(());
    }
    let quota = buffer.capacity / seen;
    for (&class, stored) in buffer.per_class.iter_mut() {
        if stored.len() > quota {
            *stored = sample_from_pool(stored, class, quota, rng)?;
        }
    }
    for class in new_classes {
        let pool = index.class(class);
        let take = quota.min(pool.len());
        buffer
            .per_class
            .insert(class, sample_from_pool(pool, class, take, rng)?);
    }
    Ok(())
}

/// Victim-agnostic probability source for mole scoring: a probe classifier
/// trained on the full dataset, or probabilities loaded from a file.
#[derive(Debug, Clone)]
pub enum ReferenceScorer {
    Probe(Classifier),
    Table(ScoreTableFile),
}

/// Precomputed per-sample class probabilities.
#[derive(Debug, Clone)]
pub struct ScoreTableFile {
    k: usize,
    probs: Array2<f64>,
}

impl ScoreSource for ReferenceScorer {
    fn class_probs(
        &self,
        data: &LabeledDataset,
        index: &ClassIndex,
        c: usize,
    ) -> Result<(Vec<usize>, Array2<f64>)> {
        match self {
            ReferenceScorer::Probe(model) => model.class_probs(data, index, c),
            ReferenceScorer::Table(file) => {
                if c >= data.k() {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} out of range for k={}",
                        data.k()
                    )));
                }
                let rows = index.class(c);
                Ok((rows.to_vec(), file.probs.select(ndarray::Axis(0), rows)))
            }
        }
    }

    fn score_classes(&self) -> usize {
        match self {
            ReferenceScorer::Probe(model) => model.k(),
            ReferenceScorer::Table(file) => file.k,
        }
    }
}

/// Train a probe classifier on the full dataset (all classes present).
pub fn train_reference_scorer(
    data: &LabeledDataset,
    hidden_sizes: &[usize],
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<ReferenceScorer> {
    let mut sizes = Vec::with_capacity(hidden_sizes.len() + 2);
    sizes.push(data.dims());
    sizes.extend_from_slice(hidden_sizes);
    sizes.push(data.k());
    let model = Classifier::new(&sizes, &mut base.stream("probe-init"))?;
    let trained = train(&model, data, cfg, &mut base.stream("probe-train"))?;
    Ok(ReferenceScorer::Probe(trained))
}

/// Write a score file: one row per sample with its index, true label, and
/// the k class probabilities.
pub fn write_score_file(path: &Path, data: &LabeledDataset, probs: ArrayView2<f64>) -> Result<()> {
    if probs.nrows() != data.len() || probs.ncols() != data.k() {
        return Err(Error::InvalidArgument(format!(
            "probability matrix {}x{} does not match {} samples x {} classes",
            probs.nrows(),
            probs.ncols(),
            data.len(),
            data.k()
        )));
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_index".to_string(), "true_label".to_string()];
    header.extend((0..data.k()).map(|j| format!("p{j}")));
    writer.write_record(&header)?;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut record = vec![i.to_string(), data.labels[i].to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load a score file written for exactly this dataset. Every sample must
/// appear once with its correct label and k probability columns.
pub fn load_score_file(path: &Path, data: &LabeledDataset) -> Result<ReferenceScorer> {
    let k = data.k();
    let mut reader = csv::Reader::from_path(path)?;
    let bad = |what: String| Error::Format(format!("{}: {what}", path.display()));
    let header = reader.headers()?.clone();
    if header.len() != k + 2 {
        return Err(bad(format!(
            "expected {} columns (sample_index, true_label, {} probabilities), found {}",
            k + 2,
            k,
            header.len()
        )));
    }
    let mut probs = Array2::from_elem((data.len(), k), f64::NAN);
    let mut filled = vec![false; data.len()];
    for record in reader.records() {
        let record = record?;
        if record.len() != k + 2 {
            return Err(bad(format!("row with {} columns", record.len())));
        }
        let idx: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("bad sample_index {:?}", &record[0])))?;
        if idx >= data.len() || filled[idx] {
            return Err(bad(format!("sample_index {idx} out of range or repeated")));
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("bad true_label {:?}", &record[1])))?;
        if label != data.labels[idx] {
            return Err(bad(format!(
                "sample {idx} labeled {label}, dataset says {}",
                data.labels[idx]
            )));
        }
        for j in 0..k {
            let v: f64 = record[j + 2]
                .parse()
                .map_err(|_| bad(format!("bad probability {:?}", &record[j + 2])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite probability for sample {idx}")));
            }
            probs[[idx, j]] = v;
        }
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(bad(format!("sample {missing} has no score row")));
    }
    Ok(ReferenceScorer::Table(ScoreTableFile { k, probs }))
}

/// How the victim learns each task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Naive,
    Replay,
}

/// Knobs for one continual-learning experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CLConfig {
    pub learner: Learner,
    pub poison: bool,
    pub buffer_capacity: usize,
    pub rho_threshold: f64,
    pub quantum: usize,
    pub threshold_on: ThresholdOn,
    pub hidden_sizes: Vec<usize>,
    pub task_cfg: TrainConfig,
    pub floor: f64,
    pub trials: usize,
}

impl Default for CLConfig {
    fn default() -> Self {
        CLConfig {
            learner: Learner::Naive,
            poison: true,
            buffer_capacity: 2000,
            rho_threshold: 0.1,
            quantum: 50,
            threshold_on: ThresholdOn::ROfRho,
            hidden_sizes: vec![256],
            task_cfg: TrainConfig {
                epochs: 2,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            floor: 0.1,
            trials: 5,
        }
    }
}

/// Relative accuracy changes with baseline filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMetrics {
    /// Mean over surviving classes of (poisoned - baseline) / baseline.
    pub delta_total_rel: f64,
    /// Median over surviving attacked classes of the same ratio; 0 when no
    /// attacked class survives the filter (see `surviving_attacked`).
    pub delta_attacked_rel: f64,
    pub surviving_classes: usize,
    pub surviving_attacked: usize,
}

/// Eq.-style relative metrics: classes whose baseline accuracy falls below
/// `floor` are excluded from both aggregates.
pub fn relative_metrics(
    baseline: &[f64],
    poisoned: &[f64],
    attacked: &[usize],
    floor: f64,
) -> Result<RelativeMetrics> {
    if baseline.len() != poisoned.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy vectors differ in length: {} vs {}",
            baseline.len(),
            poisoned.len()
        )));
    }
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::InvalidArgument(format!(
            "floor {floor} outside [0, 1)"
        )));
    }
    let mut total_changes = Vec::new();
    let mut attacked_changes = Vec::new();
    for (class, (&b, &p)) in baseline.iter().zip(poisoned).enumerate() {
        if b < floor {
            continue;
        }
        let rel = (p - b) / b;
        total_changes.push(rel);
        if attacked.contains(&class) {
            attacked_changes.push(rel);
        }
    }
    if total_changes.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class fell below the baseline accuracy floor".into(),
        ));
    }
    let delta_total_rel = total_changes.iter().sum::<f64>() / total_changes.len() as f64;
    let delta_attacked_rel = median(&mut attacked_changes);
    Ok(RelativeMetrics {
        delta_total_rel,
        delta_attacked_rel,
        surviving_classes: total_changes.len(),
        surviving_attacked: attacked_changes.len(),
    })
}

/// Median with the even-count convention of averaging the two central
/// values; 0 for an empty list.
fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// One task's precomputed poison material.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPoisonPlan {
    pub task: usize,
    pub pairs: Vec<(usize, usize)>,
    pub n_tilde: usize,
}

/// Results of one trial: final per-class accuracies (global class order)
/// for the untouched and poisoned branches, plus the relative metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CLTrial {
    pub baseline_per_class: Vec<f64>,
    pub poisoned_per_class: Vec<f64>,
    pub baseline_total: f64,
    pub poisoned_total: f64,
    pub delta_total_rel: f64,
    pub delta_attacked_rel: f64,
    pub surviving_classes: usize,
    pub surviving_attacked: usize,
}

/// Aggregated continual-learning report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CLReport {
    pub learner: Learner,
    pub poison: bool,
    pub floor: f64,
    pub schedule: TaskSchedule,
    /// Attacked classes across all per-task plans, ascending.
    pub attacked: Vec<usize>,
    /// Confounding classes across all per-task plans, ascending.
    pub confounding: Vec<usize>,
    pub task_plans: Vec<TaskPoisonPlan>,
    pub trials: Vec<CLTrial>,
    pub mean_delta_total_rel: f64,
    pub mean_delta_attacked_rel: f64,
    pub mean_baseline_total: f64,
    pub mean_poisoned_total: f64,
}

struct TaskPoison {
    plan: CompoundPlan,
    moles: Vec<MoleSet>,
}

struct RunContext<'a> {
    data: &'a LabeledDataset,
    index: &'a ClassIndex,
    test: &'a LabeledDataset,
    schedule: &'a TaskSchedule,
    cfg: &'a CLConfig,
    plans: Vec<Option<TaskPoison>>,
    /// Global class id -> head slot (appearance order over the schedule).
    slot_of: Vec<usize>,
    /// Class names in slot order.
    slot_names: Vec<String>,
    /// Training-row indices per task.
    task_rows: Vec<Vec<usize>>,
    classes_per_task: usize,
}

fn remap_rows(
    ctx: &RunContext,
    rows: &[usize],
    head: usize,
) -> Result<LabeledDataset> {
    let features = ctx.data.features.select(ndarray::Axis(0), rows);
    let labels: Vec<usize> = rows
        .iter()
        .map(|&i| ctx.slot_of[ctx.data.labels[i]])
        .collect();
    LabeledDataset::new(features, labels, ctx.slot_names[..head].to_vec())
}

/// Run every task once. Both branches of a trial call this with the same
/// rng root: shared steps draw from identical streams, and poison-only
/// steps draw from streams of their own, so a disabled or empty poison
/// leaves the branch bitwise identical to the baseline.
fn run_branch(ctx: &RunContext, poison_on: bool, root: &RunRng) -> Result<(Vec<f64>, f64)> {
    let k_task = ctx.classes_per_task;
    let mut sizes = Vec::with_capacity(ctx.cfg.hidden_sizes.len() + 2);
    sizes.push(ctx.data.dims());
    sizes.extend_from_slice(&ctx.cfg.hidden_sizes);
    sizes.push(k_task);
    let mut model = Classifier::new(&sizes, &mut root.stream("cl-init"))?;
    let mut buffer = ReplayBuffer::new(ctx.cfg.buffer_capacity);
    let replay = ctx.cfg.learner == Learner::Replay;
    let mut seen: Vec<usize> = Vec::new();

    for (i, task) in ctx.schedule.tasks.iter().enumerate() {
        if i > 0 {
            model = model.expand_output(k_task);
        }
        seen.extend_from_slice(task);
        let head = model.k();

        let mut rows = ctx.task_rows[i].clone();
        if replay {
            rows.extend(buffer.exemplars());
        }
        let task_set = remap_rows(ctx, &rows, head)?;
        model = train(
            &model,
            &task_set,
            &ctx.cfg.task_cfg,
            &mut root.stream(&format!("cl-train-{i}")),
        )?;

        if poison_on {
            if let Some(poison) = &ctx.plans[i] {
                let mut build_rng = root.stream(&format!("cl-poison-build-{i}"));
                let poison_set = build_poison_set(
                    &poison.moles,
                    ctx.data,
                    ctx.index,
                    &seen,
                    poison.plan.n_tilde,
                    &mut build_rng,
                )?;
                let mut rows = poison_set.indices.clone();
                if replay {
                    rows.extend(buffer.exemplars());
                }
                let poison_batch = remap_rows(ctx, &rows, head)?;
                let one_epoch = TrainConfig {
                    epochs: 1,
                    ..ctx.cfg.task_cfg.clone()
                };
                model = train(
                    &model,
                    &poison_batch,
                    &one_epoch,
                    &mut root.stream(&format!("cl-poison-train-{i}")),
                )?;
            }
        }

        if replay {
            update_replay_buffer(
                &mut buffer,
                task,
                ctx.index,
                &mut root.stream(&format!("cl-buffer-{i}")),
            )?;
            assert!(
                buffer.total() <= buffer.capacity(),
                "replay buffer exceeded its capacity"
            );
        }
    }

    let all_rows: Vec<usize> = (0..ctx.test.len()).collect();
    let features = ctx.test.features.select(ndarray::Axis(0), &all_rows);
    let labels: Vec<usize> = ctx.test.labels.iter().map(|&g| ctx.slot_of[g]).collect();
    let remapped_test = LabeledDataset::new(features, labels, ctx.slot_names.clone())?;
    let eval = evaluate(&model, &remapped_test)?;
    let mut per_class = vec![0.0; ctx.data.k()];
    for g in 0..ctx.data.k() {
        per_class[g] = eval.per_class_accuracy[ctx.slot_of[g]];
    }
    Ok((per_class, eval.total_accuracy))
}

/// Full continual-learning experiment: for each trial, run an untouched
/// branch and a poisoned branch from the same initialization and randomness,
/// then aggregate relative metrics.
pub fn run_cl(
    data: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &TaskSchedule,
    cfg: &CLConfig,
    scorer: &ReferenceScorer,
    regression: &RegressionLine,
    base: &RunRng,
) -> Result<CLReport> {
    let classes_per_task = schedule.validate(data.k())?;
    if scorer.score_classes() != data.k() {
        return Err(Error::Config(format!(
            "reference scorer covers {} classes, dataset has {}",
            scorer.score_classes(),
            data.k()
        )));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let index = ClassIndex::build(data);

    let mut slot_of = vec![usize::MAX; data.k()];
    let mut slot_names = Vec::with_capacity(data.k());
    for (slot, &class) in schedule.tasks.iter().flatten().enumerate() {
        slot_of[class] = slot;
        slot_names.push(data.class_names[class].clone());
    }
    let task_rows: Vec<Vec<usize>> = schedule
        .tasks
        .iter()
        .map(|task| {
            let mut rows = Vec::new();
            for &c in task {
                rows.extend_from_slice(index.class(c));
            }
            rows
        })
        .collect();

    // Poison plans depend only on the scorer and schedule, so they are
    // shared by every trial. The victim is never consulted here.
    let mut plans: Vec<Option<TaskPoison>> = Vec::with_capacity(schedule.tasks.len());
    plans.push(None);
    for i in 1..schedule.tasks.len() {
        if !cfg.poison {
            plans.push(None);
            continue;
        }
        let earlier: Vec<usize> = schedule.tasks[..i].iter().flatten().copied().collect();
        let mut candidates = Vec::new();
        for &a in &earlier {
            for &c in &schedule.tasks[i] {
                candidates.push((a, c));
            }
        }
        let plan = build_compound_plan(
            scorer,
            data,
            &index,
            &candidates,
            regression,
            cfg.rho_threshold,
            cfg.quantum,
            PlanMode::Cl,
            cfg.threshold_on,
        )?;
        if plan.is_empty() {
            plans.push(None);
            continue;
        }
        let mut moles = Vec::with_capacity(plan.pairs.len());
        for pair in &plan.pairs {
            let table = scorer.score_pair(data, &index, pair.attacked, pair.confounding)?;
            moles.push(select_moles(&table, plan.n_tilde)?);
        }
        plans.push(Some(TaskPoison { plan, moles }));
    }

    let mut attacked: BTreeSet<usize> = BTreeSet::new();
    let mut confounding: BTreeSet<usize> = BTreeSet::new();
    let mut task_plans = Vec::new();
    for (i, slot) in plans.iter().enumerate() {
        if let Some(poison) = slot {
            for pair in &poison.plan.pairs {
                attacked.insert(pair.attacked);
                confounding.insert(pair.confounding);
            }
            task_plans.push(TaskPoisonPlan {
                task: i,
                pairs: poison
                    .plan
                    .pairs
                    .iter()
                    .map(|p| (p.attacked, p.confounding))
                    .collect(),
                n_tilde: poison.plan.n_tilde,
            });
        }
    }
    let attacked: Vec<usize> = attacked.into_iter().collect();
    let confounding: Vec<usize> = confounding.into_iter().collect();

    let ctx = RunContext {
        data,
        index: &index,
        test,
        schedule,
        cfg,
        plans,
        slot_of,
        slot_names,
        task_rows,
        classes_per_task,
    };

    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let trial_root = base.derive("cl-trial", t as u64);
        let (baseline_per_class, baseline_total) = run_branch(&ctx, false, &trial_root)?;
        let (poisoned_per_class, poisoned_total) = run_branch(&ctx, cfg.poison, &trial_root)?;
        let metrics = relative_metrics(
            &baseline_per_class,
            &poisoned_per_class,
            &attacked,
            cfg.floor,
        )?;
        trials.push(CLTrial {
            baseline_per_class,
            poisoned_per_class,
            baseline_total,
            poisoned_total,
            delta_total_rel: metrics.delta_total_rel,
            delta_attacked_rel: metrics.delta_attacked_rel,
            surviving_classes: metrics.surviving_classes,
            surviving_attacked: metrics.surviving_attacked,
        });
    }

    let n = trials.len() as f64;
    Ok(CLReport {
        learner: cfg.learner,
        poison: cfg.poison,
        floor: cfg.floor,
        schedule: schedule.clone(),
        attacked,
        confounding,
        task_plans,
        mean_delta_total_rel: trials.iter().map(|t| t.delta_total_rel).sum::<f64>() / n,
        mean_delta_attacked_rel: trials.iter().map(|t| t.delta_attacked_rel).sum::<f64>() / n,
        mean_baseline_total: trials.iter().map(|t| t.baseline_total).sum::<f64>() / n,
        mean_poisoned_total: trials.iter().map(|t| t.poisoned_total).sum::<f64>() / n,
        trials,
    })
}
