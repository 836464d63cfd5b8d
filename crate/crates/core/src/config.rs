//! Flat run configuration: one TOML table of typed keys, every default in
//! one place. Command-line `--set key=value` overrides go through the same
//! typed parse as the file.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | root seed for init, shuffling and noise |
//! | `channels` | [12, 24] | channels per residual block (multiples of 3) |
//! | `input_side` | 8 | frame side fed to the backbone |
//! | `hops` | 2 | spatial-attention hops |
//! | `spatial_hidden` / `channel_hidden` / `frame_hidden` | 32 / 64 / 64 | attention hidden sizes |
//! | `hop_aggregation` | "mean" | "mean" or "concat" |
//! | `all_blocks`, `spatial_attention`, `multi_region`, `channel_attention`, `frame_attention` | true | ablation switches |
//! | `epochs` | 100 | teacher / supervised epochs |
//! | `batch_size` | 16 | supervised batch |
//! | `base_lr`, `lr_decay`, `lr_every` | 1e-5, 0.6, 30 | step schedule |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | 0.9, 0.999, 1e-8 | Adam |
//! | `lambda_f` | 1.0 | weight of the attention penalty |
//! | `class_weighting` | true | inverse-frequency cross-entropy weights |
//! | `student_epochs` | 100 | epochs per student generation |
//! | `student_channels` | [] | student widths; empty means the teacher's |
//! | `augment`, `aug_ops`, `aug_min_ops`, `aug_max_ops`, `aug_min_magnitude`, `aug_max_magnitude` | true, all six, 2, 4, 0, 9 | student augmentation |
//! | `dropout`, `dropout_p` | true, 0.5 | student dropout |
//! | `ratio`, `labelled_batch`, `recycle` | 3, 8, true | mixed batches |
//! | `warm_start` | false | student starts from the teacher's weights |
//! | `confidence_threshold` | 0.5 | majority-class pseudo-label filter |
//! | `saturation_eps` | 0.001 | stop when a generation gains less; "none" disables |
//! | `generations` | 4 | maximum student generations |
//! | `synth_*` | see [`SyntheticSpec`] | synthetic data generator |
//! | `crop_side`, `face_margin`, `eye_targets`, `mouth_targets` | 224, 0.1, (0.2,0.6)/(0.8,0.6), (0.25,0.45)/(0.75,0.45) | region crops |
//! | `clip_min_frames`, `clip_area_threshold`, `clip_majority`, `clip_fixed_length` | 30, 0.2, 0.5, false | clip validation |
//! | `illumination_corrected` | false | recorded in manifests |
//! | `gradcheck_coordinates`, `gradcheck_step`, `gradcheck_floor`, `gradcheck_frames` | 200, 1e-5, 1e-6, 3 | finite-difference check |

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::HopAggregation;
use crate::augment::{AugmentOp, NoiseSpec};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::geometry::{ClipRule, CropSpec};
use crate::gradcheck::GradCheckConfig;
use crate::model::{AttentionConfig, Components, ModelConfig, NUM_CLASSES};
use crate::selftrain::SelfTrainConfig;
use crate::synthetic::SyntheticSpec;
use crate::training::{AdamConfig, LrSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub channels: Vec<usize>,
    pub input_side: usize,
    pub hops: usize,
    pub spatial_hidden: usize,
    pub channel_hidden: usize,
    pub frame_hidden: usize,
    pub hop_aggregation: HopAggregation,
    pub all_blocks: bool,
    pub spatial_attention: bool,
    pub multi_region: bool,
    pub channel_attention: bool,
    pub frame_attention: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_f: f64,
    pub class_weighting: bool,

    pub student_epochs: usize,
    pub student_channels: Vec<usize>,
    pub augment: bool,
    pub aug_ops: Vec<AugmentOp>,
    pub aug_min_ops: usize,
    pub aug_max_ops: usize,
    pub aug_min_magnitude: i32,
    pub aug_max_magnitude: i32,
    pub dropout: bool,
    pub dropout_p: f64,
    pub ratio: usize,
    pub labelled_batch: usize,
    pub recycle: bool,
    pub warm_start: bool,
    pub confidence_threshold: f64,
    #[serde(with = "optional_eps")]
    pub saturation_eps: Option<f64>,
    pub generations: usize,

    pub synth_labelled_per_class: usize,
    pub synth_validation_per_class: usize,
    pub synth_unlabelled: usize,
    pub synth_min_frames: usize,
    pub synth_max_frames: usize,
    pub synth_signal: f64,
    pub synth_pixel_noise: f64,
    pub synth_label_noise: f64,
    pub synth_pattern_seed: u64,

    pub crop_side: usize,
    pub face_margin: f64,
    pub eye_targets: [(f64, f64); 2],
    pub mouth_targets: [(f64, f64); 2],
    pub clip_min_frames: usize,
    pub clip_area_threshold: f64,
    pub clip_majority: f64,
    pub clip_fixed_length: bool,
    pub illumination_corrected: bool,

    pub gradcheck_coordinates: usize,
    pub gradcheck_step: f64,
    pub gradcheck_floor: f64,
    pub gradcheck_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk();
        let att = AttentionConfig::default();
        let comp = Components::default();
        let train = TrainConfig::default();
        let noise = NoiseSpec::noisy();
        let st = SelfTrainConfig::default();
        let synth = SyntheticSpec::default();
        let clip = ClipRule::default();
        let gc = GradCheckConfig::default();
        Self {
            seed: 0,
            channels: desk.backbone.channels_per_block.clone(),
            input_side: desk.backbone.input_side,
            hops: att.hops,
            spatial_hidden: att.spatial_hidden,
            channel_hidden: att.channel_hidden,
            frame_hidden: att.frame_hidden,
            hop_aggregation: att.hop_aggregation,
            all_blocks: comp.all_blocks,
            spatial_attention: comp.spatial_attention,
            multi_region: comp.multi_region,
            channel_attention: comp.channel_attention,
            frame_attention: comp.frame_attention,
            epochs: train.epochs,
            batch_size: train.batch_size,
            base_lr: train.schedule.base_lr,
            lr_decay: train.schedule.decay,
            lr_every: train.schedule.every,
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            lambda_f: train.lambda_f,
            class_weighting: train.class_weighting,
            student_epochs: st.student_train.epochs,
            student_channels: Vec::new(),
            augment: noise.augment,
            aug_ops: noise.ops.clone(),
            aug_min_ops: noise.min_ops,
            aug_max_ops: noise.max_ops,
            aug_min_magnitude: noise.min_magnitude,
            aug_max_magnitude: noise.max_magnitude,
            dropout: noise.dropout,
            dropout_p: noise.dropout_p,
            ratio: st.ratio,
            labelled_batch: st.labelled_batch,
            recycle: st.recycle,
            warm_start: st.warm_start,
            confidence_threshold: st.confidence_threshold,
            saturation_eps: st.saturation_eps,
            generations: st.max_generations,
            synth_labelled_per_class: synth.labelled_per_class,
            synth_validation_per_class: synth.validation_per_class,
            synth_unlabelled: synth.unlabelled,
            synth_min_frames: synth.min_frames,
            synth_max_frames: synth.max_frames,
            synth_signal: synth.signal,
            synth_pixel_noise: synth.pixel_noise,
            synth_label_noise: synth.label_noise,
            synth_pattern_seed: synth.pattern_seed,
            crop_side: 224,
            face_margin: CropSpec::face(224).face_margin,
            eye_targets: CropSpec::eyes(224).targets,
            mouth_targets: CropSpec::mouth(224).targets,
            clip_min_frames: clip.min_frames,
            clip_area_threshold: clip.area_threshold,
            clip_majority: clip.majority,
            clip_fixed_length: clip.fixed_length,
            illumination_corrected: false,
            gradcheck_coordinates: gc.coordinates,
            gradcheck_step: gc.step,
            gradcheck_floor: gc.denominator_floor,
            gradcheck_frames: 3,
        }
    }
}

/// `saturation_eps` is a number or the string "none".
mod optional_eps {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("none"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Number(x) => Ok(Some(x)),
            Raw::Text(t) if t == "none" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"none\", got \"{t}\""
            ))),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Applies `key=value` overrides in order. Values use TOML syntax; a
    /// value that does not parse as TOML is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::Usage(format!("unknown config key `{key}`")));
            }
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.student_model_config()?.validate()?;
        self.train_config().validate()?;
        self.student_train_config().validate()?;
        self.synthetic_spec().validate()?;
        for spec in self.crop_specs() {
            spec.validate()?;
        }
        self.clip_rule().validate()?;
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.ratio == 0 || self.labelled_batch == 0 {
            return Err(Error::Config(
                "ratio and labelled_batch must be positive".into(),
            ));
        }
        if self.gradcheck_frames == 0 {
            return Err(Error::Config("gradcheck_frames must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model_with_channels(self.channels.clone()))
    }

    pub fn student_model_config(&self) -> Result<ModelConfig> {
        if self.student_channels.is_empty() {
            self.model_config()
        } else {
            Ok(self.model_with_channels(self.student_channels.clone()))
        }
    }

    fn model_with_channels(&self, channels: Vec<usize>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::new(channels, self.input_side),
            attention: AttentionConfig {
                hops: self.hops,
                spatial_hidden: self.spatial_hidden,
                channel_hidden: self.channel_hidden,
                frame_hidden: self.frame_hidden,
                hop_aggregation: self.hop_aggregation,
            },
            components: Components {
                all_blocks: self.all_blocks,
                spatial_attention: self.spatial_attention,
                multi_region: self.multi_region,
                channel_attention: self.channel_attention,
                frame_attention: self.frame_attention,
            },
            num_classes: NUM_CLASSES,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                base_lr: self.base_lr,
                decay: self.lr_decay,
                every: self.lr_every,
            },
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            lambda_f: self.lambda_f,
            class_weighting: self.class_weighting,
            noise: NoiseSpec::disabled(),
            seed: self.seed,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            augment: self.augment,
            ops: self.aug_ops.clone(),
            min_ops: self.aug_min_ops,
            max_ops: self.aug_max_ops,
            min_magnitude: self.aug_min_magnitude,
            max_magnitude: self.aug_max_magnitude,
            dropout: self.dropout,
            dropout_p: self.dropout_p,
        }
    }

    pub fn student_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.student_epochs,
            noise: self.noise_spec(),
            ..self.train_config()
        }
    }

    pub fn selftrain_config(&self) -> Result<SelfTrainConfig> {
        let student = if self.student_channels.is_empty() {
            None
        } else {
            Some(self.student_model_config()?)
        };
        Ok(SelfTrainConfig {
            teacher_model: self.model_config()?,
            teacher_train: self.train_config(),
            student_model: student,
            student_train: self.student_train_config(),
            ratio: self.ratio,
            labelled_batch: self.labelled_batch,
            recycle: self.recycle,
            warm_start: self.warm_start,
            confidence_threshold: self.confidence_threshold,
            saturation_eps: self.saturation_eps,
            max_generations: self.generations,
            seed: self.seed,
        })
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            labelled_per_class: self.synth_labelled_per_class,
            validation_per_class: self.synth_validation_per_class,
            unlabelled: self.synth_unlabelled,
            min_frames: self.synth_min_frames,
            max_frames: self.synth_max_frames,
            side: self.input_side,
            signal: self.synth_signal,
            pixel_noise: self.synth_pixel_noise,
            label_noise: self.synth_label_noise,
            pattern_seed: self.synth_pattern_seed,
        }
    }

    /// Face, eyes and mouth crop specs.
    pub fn crop_specs(&self) -> [CropSpec; 3] {
        let [mut face, mut eyes, mut mouth] = CropSpec::standard(self.crop_side);
        face.face_margin = self.face_margin;
        eyes.targets = self.eye_targets;
        mouth.targets = self.mouth_targets;
        [face, eyes, mouth]
    }

    pub fn clip_rule(&self) -> ClipRule {
        ClipRule {
            min_frames: self.clip_min_frames,
            area_threshold: self.clip_area_threshold,
            majority: self.clip_majority,
            fixed_length: self.clip_fixed_length,
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            coordinates: self.gradcheck_coordinates,
            step: self.gradcheck_step,
            denominator_floor: self.gradcheck_floor,
            seed: self.seed,
        }
    }
}
