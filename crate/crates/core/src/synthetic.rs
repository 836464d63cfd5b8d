//! Synthetic region-stack videos with known ground truth.
//!
//! Each class owns a fixed spatial pattern (two Gaussian bumps with
//! per-channel colour weights) that is drawn into one region group:
//! angry, surprise and happy signal in the mouth, sad and disgust in the
//! eyes, neutral and fear in the whole face. Only a class-dependent
//! fraction of each video's frames carries the pattern. Every video also
//! gets a random brightness offset, contrast, horizontal flip, one-pixel
//! shift and per-pixel noise, so the task is learnable but not trivial.

use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::model::{Region, NUM_CLASSES};
use crate::rng::{key_of, Rng};
use crate::tensor::Tensor;

/// Region carrying each class's signal, in class-index order.
pub const SIGNAL_REGION: [Region; NUM_CLASSES] = [
    Region::Mouth, // angry
    Region::Face,  // neutral
    Region::Eyes,  // sad
    Region::Face,  // fear
    Region::Mouth, // surprise
    Region::Mouth, // happy
    Region::Eyes,  // disgust
];

/// Fraction of frames carrying the pattern, per class.
pub const SIGNAL_FRAME_FRACTION: [f64; NUM_CLASSES] = [0.8, 0.6, 0.7, 0.9, 1.0, 0.8, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub labelled_per_class: usize,
    pub validation_per_class: usize,
    /// Unlabelled videos, drawn with uniform class probabilities.
    pub unlabelled: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub side: usize,
    /// Peak amplitude of the class pattern.
    pub signal: f64,
    /// Standard deviation of the per-pixel noise.
    pub pixel_noise: f64,
    /// Probability that a labelled training video carries a wrong label.
    pub label_noise: f64,
    /// Seed of the class patterns, kept apart from the sampling seed so
    /// that every split and every seed shares one task.
    pub pattern_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            labelled_per_class: 30,
            validation_per_class: 20,
            unlabelled: 840,
            min_frames: 2,
            max_frames: 4,
            side: 8,
            signal: 0.25,
            pixel_noise: 0.1,
            label_noise: 0.1,
            pattern_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range [{}, {}] is empty or starts at 0",
                self.min_frames, self.max_frames
            )));
        }
        if self.side < 2 {
            return Err(Error::Config("image side must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label noise must lie in [0, 1]".into()));
        }
        if !(self.signal >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::Config(
                "signal and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Training videos; labels may be corrupted by label noise.
    pub labelled: Vec<VideoSample>,
    /// Clean labels, kept for analysis.
    pub labelled_truth: Vec<usize>,
    pub validation: Vec<VideoSample>,
    /// Labels stripped.
    pub unlabelled: Vec<VideoSample>,
    pub unlabelled_truth: Vec<usize>,
}

/// `3 × side × side` colour pattern per class.
pub fn class_patterns(spec: &SyntheticSpec) -> Vec<Tensor> {
    let mut rng = Rng::new(spec.pattern_seed).derive(&[key_of("patterns")]);
    let s = spec.side as f64;
    (0..NUM_CLASSES)
        .map(|_| {
            let colour: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.uniform_range(0.15, 0.85) * s,
                        rng.uniform_range(0.15, 0.85) * s,
                        rng.uniform_range(0.15, 0.3) * s,
                    )
                })
                .collect();
            let mut t = Tensor::zeros(&[3, spec.side, spec.side]);
            for y in 0..spec.side {
                for x in 0..spec.side {
                    let v: f64 = bumps
                        .iter()
                        .map(|&(cy, cx, w)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            (-d2 / (2.0 * w * w)).exp()
                        })
                        .sum();
                    for (c, &k) in colour.iter().enumerate() {
                        t.set3(c, y, x, k * v);
                    }
                }
            }
            t
        })
        .collect()
}

fn render_video(
    spec: &SyntheticSpec,
    patterns: &[Tensor],
    class: usize,
    id: String,
    rng: &mut Rng,
) -> VideoSample {
    let n = rng.int_inclusive(spec.min_frames as i64, spec.max_frames as i64) as usize;
    let side = spec.side;
    let region = SIGNAL_REGION[class] as usize;
    let signal_frames = ((SIGNAL_FRAME_FRACTION[class] * n as f64).round() as usize).clamp(1, n);
    let mut carries = vec![false; n];
    for i in rng.permutation(n).into_iter().take(signal_frames) {
        carries[i] = true;
    }
    let brightness = rng.uniform_range(-0.08, 0.08);
    let contrast = rng.uniform_range(0.8, 1.2);
    let flip = rng.bernoulli(0.5);
    let (dy, dx) = (rng.int_inclusive(-1, 1), rng.int_inclusive(-1, 1));
    let base: Vec<f64> = (0..9).map(|_| rng.uniform_range(0.4, 0.6)).collect();
    let pattern = &patterns[class];
    let frames = carries
        .iter()
        .map(|&on| {
            let mut f = Tensor::zeros(&[9, side, side]);
            for c in 0..9 {
                for y in 0..side {
                    for x in 0..side {
                        let mut v = base[c];
                        if on && c / 3 == region {
                            let sy = (y as i64 - dy).clamp(0, side as i64 - 1) as usize;
                            let sx = (x as i64 - dx).clamp(0, side as i64 - 1) as usize;
                            let sx = if flip { side - 1 - sx } else { sx };
                            v += spec.signal * pattern.at3(c % 3, sy, sx);
                        }
                        v = 0.5 + contrast * (v - 0.5) + brightness;
                        v += spec.pixel_noise * rng.normal();
                        f.set3(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
            f
        })
        .collect();
    VideoSample::new(id, frames, Some(class))
}

/// Draws labelled, validation and unlabelled splits from one task.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let patterns = class_patterns(spec);
    let root = Rng::new(seed);
    let split = |name: &str, classes: Vec<usize>| -> Vec<VideoSample> {
        classes
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let id = format!("{name}-{i:05}");
                let mut rng = root.derive(&[key_of(name), i as u64]);
                render_video(spec, &patterns, c, id, &mut rng)
            })
            .collect()
    };
    let per_class = |n: usize| {
        (0..NUM_CLASSES)
            .flat_map(|c| std::iter::repeat_n(c, n))
            .collect::<Vec<_>>()
    };

    let mut labelled = split("train", per_class(spec.labelled_per_class));
    let labelled_truth: Vec<usize> = labelled.iter().map(|s| s.label.unwrap()).collect();
    let mut noise_rng = root.derive(&[key_of("label-noise")]);
    for s in &mut labelled {
        if noise_rng.bernoulli(spec.label_noise) {
            let truth = s.label.unwrap();
            let other = noise_rng.below(NUM_CLASSES - 1);
            s.label = Some(if other >= truth { other + 1 } else { other });
        }
    }
    let validation = split("val", per_class(spec.validation_per_class));
    let mut class_rng = root.derive(&[key_of("unlabelled-classes")]);
    let classes: Vec<usize> = (0..spec.unlabelled)
        .map(|_| class_rng.below(NUM_CLASSES))
        .collect();
    let unlabelled: Vec<VideoSample> = split("unl", classes.clone())
        .into_iter()
        .map(|s| s.unlabelled())
        .collect();
    Ok(SyntheticData {
        labelled,
        labelled_truth,
        validation,
        unlabelled,
        unlabelled_truth: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_counts;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            labelled_per_class: 4,
            validation_per_class: 2,
            unlabelled: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(
            generate(&small(), 3).unwrap(),
            generate(&small(), 3).unwrap()
        );
        assert_ne!(
            generate(&small(), 3).unwrap().validation,
            generate(&small(), 4).unwrap().validation
        );
    }

    #[test]
    fn class_counts_match_spec() {
        let d = generate(&small(), 1).unwrap();
        assert_eq!(class_counts(&d.validation, 7), vec![2; 7]);
        assert_eq!(d.labelled.len(), 28);
        assert_eq!(d.unlabelled.len(), 10);
        assert!(d.unlabelled.iter().all(|s| s.label.is_none()));
        let spec = SyntheticSpec {
            label_noise: 0.0,
            ..small()
        };
        assert_eq!(
            class_counts(&generate(&spec, 1).unwrap().labelled, 7),
            vec![4; 7]
        );
    }

    #[test]
    fn frames_have_region_stack_shape_and_range() {
        let d = generate(&small(), 2).unwrap();
        for s in d.labelled.iter().chain(&d.unlabelled) {
            assert!((2..=4).contains(&s.frames.len()));
            for f in &s.frames {
                assert_eq!(f.shape(), &[9, 8, 8]);
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn label_noise_flips_to_other_classes() {
        let spec = SyntheticSpec {
            label_noise: 1.0,
            ..small()
        };
        let d = generate(&spec, 5).unwrap();
        for (s, &t) in d.labelled.iter().zip(&d.labelled_truth) {
            assert_ne!(s.label.unwrap(), t);
        }
    }
}
