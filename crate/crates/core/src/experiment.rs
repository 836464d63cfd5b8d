//! Controlled noisy-student experiment on synthetic videos: a supervised
//! teacher, two noisy student generations, and a noise-free student
//! trained from the same teacher as the ablated arm.

use serde::{Deserialize, Serialize};

use crate::augment::NoiseSpec;
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::selftrain::{iterate, SelfTrainConfig};
use crate::synthetic::{generate, SyntheticSpec};
use crate::training::{LrSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskExperiment {
    pub data: SyntheticSpec,
    /// Data for seed `s` is drawn with `data_seed_base + s`.
    pub data_seed_base: u64,
    pub selftrain: SelfTrainConfig,
}

impl Default for DeskExperiment {
    fn default() -> Self {
        let mut model = ModelConfig::desk();
        model.backbone = BackboneConfig::new(vec![24, 48], 8);
        let teacher_train = TrainConfig {
            epochs: 20,
            schedule: LrSchedule {
                base_lr: 3e-3,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        };
        let student_train = TrainConfig {
            epochs: 8,
            noise: NoiseSpec {
                max_magnitude: 4,
                dropout_p: 0.2,
                ..NoiseSpec::noisy()
            },
            ..teacher_train.clone()
        };
        Self {
            data: SyntheticSpec {
                signal: 0.4,
                ..SyntheticSpec::default()
            },
            data_seed_base: 100,
            selftrain: SelfTrainConfig {
                teacher_model: model,
                teacher_train,
                student_model: None,
                student_train,
                warm_start: true,
                confidence_threshold: 0.3,
                saturation_eps: None,
                max_generations: 2,
                ..SelfTrainConfig::default()
            },
        }
    }
}

/// Validation accuracies of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub teacher: f64,
    pub generation1: f64,
    pub generation2: f64,
    /// First student generation with augmentation and dropout off.
    pub ablated: f64,
}

impl DeskExperiment {
    pub fn run_seed(&self, seed: u64) -> Result<SeedOutcome> {
        let d = generate(&self.data, self.data_seed_base + seed)?;
        let cfg = SelfTrainConfig {
            seed,
            ..self.selftrain.clone()
        };
        let mut teacher: Option<Model> = None;
        let noisy = iterate(
            &d.labelled,
            &d.unlabelled,
            &d.validation,
            &cfg,
            None,
            |r, m| {
                if r.generation == 0 {
                    teacher = Some(m.clone());
                }
                Ok(())
            },
        )?;
        let mut plain = cfg.clone();
        plain.student_train.noise = NoiseSpec::disabled();
        plain.max_generations = 1;
        let ablated = iterate(
            &d.labelled,
            &d.unlabelled,
            &d.validation,
            &plain,
            teacher,
            |_, _| Ok(()),
        )?;
        let at = |h: &[f64], g: usize| h.get(g).copied().unwrap_or(f64::NAN);
        Ok(SeedOutcome {
            seed,
            teacher: at(&noisy.history, 0),
            generation1: at(&noisy.history, 1),
            generation2: at(&noisy.history, 2),
            ablated: at(&ablated.history, 1),
        })
    }
}
