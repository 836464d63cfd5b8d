//! Noisy-student self-training.
//!
//! A teacher trained on labelled videos assigns hard pseudo-labels to the
//! unlabelled pool. The pseudo-labels are rebalanced toward the labelled
//! class distribution, and a student (freshly initialised, or copied from
//! the teacher with `warm_start`) is trained with input augmentation and
//! dropout on mixed batches of `b` labelled and `r · b` pseudo-labelled
//! videos. The student then becomes the teacher,
//! until validation accuracy stops improving.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::NoiseSpec;
use crate::data::{class_counts, VideoSample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::{key_of, Rng};
use crate::training::{
    evaluate, fit, labelled_items, train, weights_for, EpochRecord, MetricsReport, TrainConfig,
    TrainItem, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Position in the unlabelled pool.
    pub index: usize,
    pub id: String,
    pub label: usize,
    /// Maximum softmax probability.
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for p in &self.labels {
            h[p.label] += 1;
        }
        h
    }
}

/// Labels every video with the teacher's argmax, in inference mode.
pub fn pseudo_label(teacher: &Model, unlabelled: &[VideoSample]) -> Result<PseudoLabelSet> {
    if unlabelled.is_empty() {
        return Err(Error::Input("no unlabelled videos to pseudo-label".into()));
    }
    let labels = unlabelled
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let c = teacher.classify_video(&v.frames)?;
            Ok(PseudoLabel {
                index,
                id: v.id.clone(),
                label: c.predicted(),
                confidence: c.confidence(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PseudoLabelSet { labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    /// Target class fractions; sum to 1.
    pub target: Vec<f64>,
    /// Over-represented classes keep only pseudo-labels at or above this
    /// confidence.
    pub threshold: f64,
}

impl BalanceSpec {
    pub fn from_counts(counts: &[usize], threshold: f64) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "class {c} is absent from the target distribution"
            )));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!(
                "confidence threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            target: counts.iter().map(|&n| n as f64 / total as f64).collect(),
            threshold,
        })
    }

    /// Integer class targets for `total` videos: floors of `total · t_c`,
    /// with the leftover units going to the largest remainders (lower
    /// class index on ties).
    pub fn targets(&self, total: usize) -> Vec<usize> {
        let exact: Vec<f64> = self.target.iter().map(|t| t * total as f64).collect();
        let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = out.iter().sum();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &c in order.iter().take(total.saturating_sub(assigned)) {
            out[c] += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalancedSet {
    /// Pseudo-labels after duplication and filtering; duplicates repeat.
    pub entries: Vec<PseudoLabel>,
    pub targets: Vec<usize>,
    pub warnings: Vec<String>,
}

impl BalancedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for p in &self.entries {
            h[p.label] += 1;
        }
        h
    }
}

/// Repeats `items` round-robin until `k` entries: every item appears
/// `⌊k/n⌋` times, and the first `k mod n` once more.
fn round_robin(items: &[PseudoLabel], k: usize) -> Vec<PseudoLabel> {
    (0..k).map(|j| items[j % items.len()].clone()).collect()
}

/// Resamples pseudo-labels so that class `c` holds `targets(N)[c]`
/// videos, `N` being the number of pseudo-labels.
///
/// Under-represented classes are duplicated round-robin, most confident
/// first. Over-represented classes drop everything below the threshold
/// and then their least confident videos. If the threshold leaves fewer
/// videos than the target, the survivors are duplicated. A class with no
/// pseudo-labels stays empty and is reported in `warnings`.
pub fn balance(pseudo: &PseudoLabelSet, spec: &BalanceSpec) -> Result<BalancedSet> {
    let k = spec.target.len();
    let sum: f64 = spec.target.iter().sum();
    if k == 0 || (sum - 1.0).abs() > 1e-9 || spec.target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config(
            "target fractions must be positive and sum to 1".into(),
        ));
    }
    if let Some(p) = pseudo.labels.iter().find(|p| p.label >= k) {
        return Err(Error::Input(format!(
            "pseudo-label {} of '{}' outside the {k} target classes",
            p.label, p.id
        )));
    }
    let targets = spec.targets(pseudo.len());
    let mut out = BalancedSet {
        targets: targets.clone(),
        ..BalancedSet::default()
    };
    for (c, &want) in targets.iter().enumerate() {
        let mut members: Vec<PseudoLabel> = pseudo
            .labels
            .iter()
            .filter(|p| p.label == c)
            .cloned()
            .collect();
        members.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.index.cmp(&b.index))
        });
        if members.is_empty() {
            if want > 0 {
                let msg = format!("class {c} has no pseudo-labels; it stays empty");
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
            continue;
        }
        if members.len() < want {
            out.entries.extend(round_robin(&members, want));
            continue;
        }
        members.retain(|p| p.confidence >= spec.threshold);
        if members.is_empty() {
            let msg = format!(
                "class {c}: no pseudo-label reaches confidence {}",
                spec.threshold
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        if members.len() >= want {
            members.truncate(want);
            out.entries.extend(members);
        } else {
            out.entries.extend(round_robin(&members, want));
        }
    }
    Ok(out)
}

/// One step of mixed training: indices into the labelled set and into the
/// balanced pseudo-label list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub labelled: Vec<usize>,
    pub pseudo: Vec<usize>,
}

/// Builds mixed batches of `b` labelled and `r · b` pseudo-labelled
/// samples. An epoch is one pass over the pseudo-labelled side, reshuffled
/// each epoch; the last batch of an epoch carries the remainder of that
/// pass. The labelled side is a continuous stream, reshuffled on every
/// pass and carried across epochs.
#[derive(Clone, Debug)]
pub struct BatchScheduler {
    labelled_len: usize,
    pseudo_len: usize,
    ratio: usize,
    batch: usize,
    recycle: bool,
    seed: u64,
    stream: Vec<usize>,
    cursor: usize,
    passes: u64,
}

impl BatchScheduler {
    pub fn new(
        labelled_len: usize,
        pseudo_len: usize,
        ratio: usize,
        batch: usize,
        recycle: bool,
        seed: u64,
    ) -> Result<Self> {
        if ratio == 0 || batch == 0 {
            return Err(Error::Config(
                "batch size and ratio must be at least 1".into(),
            ));
        }
        if labelled_len == 0 || pseudo_len == 0 {
            return Err(Error::Input(
                "mixed batches need both sets non-empty".into(),
            ));
        }
        let s = Self {
            labelled_len,
            pseudo_len,
            ratio,
            batch,
            recycle,
            seed,
            stream: Vec::new(),
            cursor: 0,
            passes: 0,
        };
        if !recycle && s.steps_per_epoch() * batch > labelled_len {
            return Err(Error::Config(format!(
                "an epoch needs {} labelled samples but only {labelled_len} exist and recycling is off",
                s.steps_per_epoch() * batch
            )));
        }
        Ok(s)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pseudo_len.div_ceil(self.ratio * self.batch)
    }

    fn next_labelled(&mut self) -> usize {
        if self.cursor == self.stream.len() {
            let mut rng = Rng::new(self.seed).derive(&[key_of("labelled-pass"), self.passes]);
            self.stream = rng.permutation(self.labelled_len);
            self.cursor = 0;
            self.passes += 1;
        }
        self.cursor += 1;
        self.stream[self.cursor - 1]
    }

    pub fn epoch(&mut self, epoch: usize) -> Vec<MixedBatch> {
        if !self.recycle {
            // every epoch starts a fresh pass without repeats
            self.cursor = self.stream.len();
        }
        let mut rng = Rng::new(self.seed).derive(&[key_of("pseudo-epoch"), epoch as u64]);
        let order = rng.permutation(self.pseudo_len);
        order
            .chunks(self.ratio * self.batch)
            .map(|chunk| MixedBatch {
                labelled: (0..self.batch).map(|_| self.next_labelled()).collect(),
                pseudo: chunk.to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pseudo-labelled samples per labelled sample in a batch.
    pub ratio: usize,
    /// Labelled samples per batch.
    pub labelled_batch: usize,
    /// Let the labelled stream wrap around within an epoch.
    pub recycle: bool,
    /// Start from the teacher's weights instead of a fresh initialisation.
    /// Needs identical teacher and student configs.
    pub warm_start: bool,
}

/// Trains a student, fresh or warm-started from the teacher, on labelled
/// plus balanced pseudo-labelled videos. With nothing pseudo-labelled this is exactly [`train`] on the
/// labelled set.
pub fn train_student(
    teacher: &Model,
    labelled: &[VideoSample],
    unlabelled: &[VideoSample],
    pseudo: &BalancedSet,
    val: &[VideoSample],
    cfg: &StudentConfig,
) -> Result<TrainOutcome> {
    let (t, s) = (&teacher.config, &cfg.model);
    if !t.backbone.fits_within(&s.backbone)
        || t.backbone.input_side != s.backbone.input_side
        || t.num_classes != s.num_classes
    {
        return Err(Error::Config(
            "student must be at least as deep and wide as the teacher, with the same input and classes"
                .into(),
        ));
    }
    let student = if cfg.warm_start {
        if t != s {
            return Err(Error::Config(
                "warm start needs the student config to equal the teacher's".into(),
            ));
        }
        teacher.clone()
    } else {
        Model::new(s.clone(), cfg.train.seed)?
    };
    if pseudo.is_empty() {
        return train(&student, labelled, val, &cfg.train);
    }
    if labelled.is_empty() {
        return Err(Error::Input(
            "student training needs labelled videos".into(),
        ));
    }
    let lab = labelled_items(labelled)?;
    let pse: Vec<TrainItem<'_>> = pseudo
        .entries
        .iter()
        .map(|p| {
            unlabelled
                .get(p.index)
                .map(|video| TrainItem {
                    video,
                    label: p.label,
                })
                .ok_or_else(|| Error::Input(format!("pseudo-label index {} out of range", p.index)))
        })
        .collect::<Result<_>>()?;
    let weights = weights_for(labelled, s.num_classes, &cfg.train)?;
    let mut sched = BatchScheduler::new(
        lab.len(),
        pse.len(),
        cfg.ratio,
        cfg.labelled_batch,
        cfg.recycle,
        cfg.train.seed,
    )?;
    let val = if val.is_empty() { labelled } else { val };
    fit(&student, val, &weights, &cfg.train, |epoch| {
        Ok(sched
            .epoch(epoch)
            .into_iter()
            .map(|b| {
                b.labelled
                    .iter()
                    .map(|&i| lab[i])
                    .chain(b.pseudo.iter().map(|&i| pse[i]))
                    .collect()
            })
            .collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub teacher_model: ModelConfig,
    pub teacher_train: TrainConfig,
    /// Student model; the teacher's when absent.
    pub student_model: Option<ModelConfig>,
    pub student_train: TrainConfig,
    pub ratio: usize,
    pub labelled_batch: usize,
    pub recycle: bool,
    pub warm_start: bool,
    pub confidence_threshold: f64,
    /// Stop once a generation improves validation accuracy by less than
    /// this fraction (0.001 = 0.1 percentage points). `None` runs every
    /// generation.
    pub saturation_eps: Option<f64>,
    pub max_generations: usize,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            teacher_model: ModelConfig::default(),
            teacher_train: TrainConfig::default(),
            student_model: None,
            student_train: TrainConfig {
                noise: NoiseSpec::noisy(),
                ..TrainConfig::default()
            },
            ratio: 3,
            labelled_batch: 8,
            recycle: true,
            warm_start: false,
            confidence_threshold: 0.5,
            saturation_eps: Some(0.001),
            max_generations: 4,
            seed: 0,
        }
    }
}

impl SelfTrainConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn generation_seed(&self, generation: usize) -> u64 {
        Rng::new(self.seed)
            .derive(&[key_of("generation"), generation as u64])
            .seed()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    /// Pseudo-label class counts before and after balancing (empty for the
    /// initial teacher).
    pub pseudo_histogram: Vec<usize>,
    pub balanced_histogram: Vec<usize>,
    pub validation: MetricsReport,
    pub best_accuracy: f64,
    pub best_generation: usize,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct IterationState {
    /// Index of the last generation trained (0 is the supervised teacher).
    pub generation: usize,
    /// The most recent model, which labels the next generation.
    pub teacher: Model,
    pub best: Model,
    pub best_generation: usize,
    /// Validation accuracy of every generation; length `generation + 1`.
    pub history: Vec<f64>,
    pub reports: Vec<GenerationReport>,
    pub saturated: bool,
}

impl IterationState {
    pub fn best_accuracy(&self) -> f64 {
        self.history[self.best_generation]
    }

    /// Best-so-far accuracy after each generation.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |best, &a| {
                *best = best.max(a);
                Some(*best)
            })
            .collect()
    }
}

/// Runs the teacher–student loop. `initial_teacher` skips supervised
/// training of generation 0. `on_generation` sees each report with its
/// model as soon as the generation finishes.
pub fn iterate<F>(
    labelled: &[VideoSample],
    unlabelled: &[VideoSample],
    val: &[VideoSample],
    cfg: &SelfTrainConfig,
    initial_teacher: Option<Model>,
    mut on_generation: F,
) -> Result<IterationState>
where
    F: FnMut(&GenerationReport, &Model) -> Result<()>,
{
    if cfg.max_generations == 0 {
        return Err(Error::Config("max_generations must be at least 1".into()));
    }
    if labelled.is_empty() {
        return Err(Error::Input("self-training needs labelled videos".into()));
    }
    let val = if val.is_empty() { labelled } else { val };
    let (teacher, epochs) = match initial_teacher {
        Some(t) => (t, Vec::new()),
        None => {
            let mut tc = cfg.teacher_train.clone();
            tc.seed = cfg.generation_seed(0);
            let init = Model::new(cfg.teacher_model.clone(), tc.seed)?;
            let out = train(&init, labelled, val, &tc)?;
            (
                Model::with_params(cfg.teacher_model.clone(), out.params)?,
                out.log,
            )
        }
    };
    let validation = evaluate(&teacher, val)?;
    let report = GenerationReport {
        generation: 0,
        pseudo_histogram: Vec::new(),
        balanced_histogram: Vec::new(),
        best_accuracy: validation.accuracy,
        validation,
        best_generation: 0,
        epochs,
        warnings: Vec::new(),
        config_hash: cfg.hash(),
    };
    on_generation(&report, &teacher)?;
    iterate_from(
        labelled,
        unlabelled,
        val,
        cfg,
        teacher,
        report,
        on_generation,
    )
}

fn iterate_from<F>(
    labelled: &[VideoSample],
    unlabelled: &[VideoSample],
    val: &[VideoSample],
    cfg: &SelfTrainConfig,
    teacher: Model,
    first: GenerationReport,
    mut on_generation: F,
) -> Result<IterationState>
where
    F: FnMut(&GenerationReport, &Model) -> Result<()>,
{
    let k = cfg.teacher_model.num_classes;
    let student_model = cfg
        .student_model
        .clone()
        .unwrap_or_else(|| cfg.teacher_model.clone());
    let spec = BalanceSpec::from_counts(&class_counts(labelled, k), cfg.confidence_threshold)?;
    let mut state = IterationState {
        generation: 0,
        best: teacher.clone(),
        teacher,
        best_generation: 0,
        history: vec![first.validation.accuracy],
        reports: vec![first],
        saturated: false,
    };
    for generation in 1..=cfg.max_generations {
        let (pseudo, balanced) = if unlabelled.is_empty() {
            (PseudoLabelSet::default(), BalancedSet::default())
        } else {
            let p = pseudo_label(&state.teacher, unlabelled)?;
            let b = balance(&p, &spec)?;
            (p, b)
        };
        let mut train_cfg = cfg.student_train.clone();
        train_cfg.seed = cfg.generation_seed(generation);
        let scfg = StudentConfig {
            model: student_model.clone(),
            train: train_cfg,
            ratio: cfg.ratio,
            labelled_batch: cfg.labelled_batch,
            recycle: cfg.recycle,
            warm_start: cfg.warm_start,
        };
        let out = train_student(&state.teacher, labelled, unlabelled, &balanced, val, &scfg)?;
        let student = Model::with_params(student_model.clone(), out.params)?;
        let validation = evaluate(&student, val)?;
        let acc = validation.accuracy;
        let previous = *state
            .history
            .last()
            .expect("history starts with the teacher");
        state.history.push(acc);
        state.generation = generation;
        if acc > state.best_accuracy() {
            state.best = student.clone();
            state.best_generation = generation;
        }
        let report = GenerationReport {
            generation,
            pseudo_histogram: pseudo.histogram(k),
            balanced_histogram: balanced.histogram(k),
            validation,
            best_accuracy: state.best_accuracy(),
            best_generation: state.best_generation,
            epochs: out.log,
            warnings: balanced.warnings.clone(),
            config_hash: cfg.hash(),
        };
        log::info!(
            "generation {generation}: val accuracy {acc:.4} (best {:.4})",
            state.best_accuracy()
        );
        on_generation(&report, &student)?;
        state.reports.push(report);
        state.teacher = student;
        if let Some(eps) = cfg.saturation_eps {
            if acc - previous < eps {
                state.saturated = true;
                break;
            }
        }
    }
    Ok(state)
}
