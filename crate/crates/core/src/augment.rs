//! RandAugment-style input noise for student training.
//!
//! A plan of 2–4 operations with integer magnitudes in `[0, 9]` is drawn
//! once per video and applied identically to every frame and every region
//! channel group. Magnitude-to-parameter maps:
//!
//! | op            | effect at signed magnitude `m`                             |
//! |---------------|------------------------------------------------------------|
//! | brightness    | add `0.05 · m`                                             |
//! | contrast      | scale deviations from the channel mean by `1 + 0.09 · m`   |
//! | translate_x/y | shift by `round(|m| / 9 · 0.1 · side)` px, edge padded     |
//! | sharpness     | blend `m / 9` toward a 3×3 sharpening filter               |
//! | flip          | mirror horizontally when `m > 0`                           |
//!
//! Every op clamps its output to `[0, 1]`; magnitude 0 is an exact identity.

use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Brightness,
    Contrast,
    TranslateX,
    TranslateY,
    Sharpness,
    HorizontalFlip,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::Brightness,
        AugmentOp::Contrast,
        AugmentOp::TranslateX,
        AugmentOp::TranslateY,
        AugmentOp::Sharpness,
        AugmentOp::HorizontalFlip,
    ];

    /// Ops whose magnitude carries a random sign.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            AugmentOp::Brightness
                | AugmentOp::Contrast
                | AugmentOp::TranslateX
                | AugmentOp::TranslateY
        )
    }
}

pub const BRIGHTNESS_PER_STEP: f64 = 0.05;
pub const CONTRAST_PER_STEP: f64 = 0.09;
pub const TRANSLATE_MAX_FRACTION: f64 = 0.1;
pub const MAX_MAGNITUDE: i32 = 9;

/// Noise injected while training a student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Random input augmentation.
    pub augment: bool,
    pub ops: Vec<AugmentOp>,
    pub min_ops: usize,
    pub max_ops: usize,
    pub min_magnitude: i32,
    pub max_magnitude: i32,
    /// Dropout on the final hidden layer.
    pub dropout: bool,
    pub dropout_p: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::noisy()
    }
}

impl NoiseSpec {
    pub fn noisy() -> Self {
        Self {
            augment: true,
            ops: AugmentOp::ALL.to_vec(),
            min_ops: 2,
            max_ops: 4,
            min_magnitude: 0,
            max_magnitude: MAX_MAGNITUDE,
            dropout: true,
            dropout_p: 0.5,
        }
    }

    pub fn disabled() -> Self {
        Self {
            augment: false,
            dropout: false,
            ..Self::noisy()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.augment || self.active_dropout().is_some()
    }

    /// Dropout probability when dropout is on and non-zero.
    pub fn active_dropout(&self) -> Option<f64> {
        (self.dropout && self.dropout_p > 0.0).then_some(self.dropout_p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    /// `(op, signed magnitude)` in application order.
    pub steps: Vec<(AugmentOp, i32)>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Draws `n ∈ [min_ops, max_ops]` ops uniformly with replacement, one
/// magnitude per op, and a sign for signed ops. Empty when augmentation is
/// off.
pub fn sample_plan(spec: &NoiseSpec, rng: &mut Rng) -> AugmentPlan {
    if !spec.augment || spec.ops.is_empty() {
        return AugmentPlan::identity();
    }
    let n = rng.int_inclusive(spec.min_ops as i64, spec.max_ops as i64) as usize;
    let steps = (0..n)
        .map(|_| {
            let op = spec.ops[rng.below(spec.ops.len())];
            let m = rng.int_inclusive(i64::from(spec.min_magnitude), i64::from(spec.max_magnitude))
                as i32;
            let sign = if op.is_signed() && rng.bernoulli(0.5) {
                -1
            } else {
                1
            };
            (op, sign * m)
        })
        .collect();
    AugmentPlan { steps }
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn map_channels(frame: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let s = frame.shape();
    let plane = s[1] * s[2];
    let mut out = frame.clone();
    for (src, dst) in frame
        .data()
        .chunks(plane)
        .zip(out.data_mut().chunks_mut(plane))
    {
        f(src, dst);
    }
    out
}

fn translate(frame: &Tensor, dx: isize, dy: isize) -> Tensor {
    let (h, w) = (frame.shape()[1] as isize, frame.shape()[2] as isize);
    map_channels(frame, |src, dst| {
        for y in 0..h {
            let sy = (y - dy).clamp(0, h - 1);
            for x in 0..w {
                let sx = (x - dx).clamp(0, w - 1);
                dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
            }
        }
    })
}

fn translate_pixels(magnitude: i32, side: usize) -> isize {
    let frac = f64::from(magnitude.abs()) / f64::from(MAX_MAGNITUDE) * TRANSLATE_MAX_FRACTION;
    let px = (frac * side as f64).round() as isize;
    if magnitude < 0 {
        -px
    } else {
        px
    }
}

/// Applies one op to a `C × H × W` frame.
pub fn apply_op(frame: &Tensor, op: AugmentOp, magnitude: i32) -> Tensor {
    if magnitude == 0 {
        return frame.clone();
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let m = f64::from(magnitude);
    match op {
        AugmentOp::Brightness => {
            let delta = BRIGHTNESS_PER_STEP * m;
            map_channels(frame, |src, dst| {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = clamp_unit(s + delta);
                }
            })
        }
        AugmentOp::Contrast => {
            let factor = 1.0 + CONTRAST_PER_STEP * m;
            map_channels(frame, |src, dst| {
                let mean = src.iter().sum::<f64>() / src.len() as f64;
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = clamp_unit(mean + factor * (s - mean));
                }
            })
        }
        AugmentOp::TranslateX => translate(frame, translate_pixels(magnitude, w), 0),
        AugmentOp::TranslateY => translate(frame, 0, translate_pixels(magnitude, h)),
        AugmentOp::Sharpness => {
            let t = m.abs() / f64::from(MAX_MAGNITUDE);
            let (hi, wi) = (h as isize, w as isize);
            map_channels(frame, |src, dst| {
                let at = |y: isize, x: isize| {
                    src[(y.clamp(0, hi - 1) * wi + x.clamp(0, wi - 1)) as usize]
                };
                for y in 0..hi {
                    for x in 0..wi {
                        let sharp = 5.0 * at(y, x)
                            - at(y - 1, x)
                            - at(y + 1, x)
                            - at(y, x - 1)
                            - at(y, x + 1);
                        let v = at(y, x);
                        dst[(y * wi + x) as usize] = clamp_unit((1.0 - t) * v + t * sharp);
                    }
                }
            })
        }
        AugmentOp::HorizontalFlip => map_channels(frame, |src, dst| {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
        }),
    }
}

pub fn apply_to_frame(frame: &Tensor, plan: &AugmentPlan) -> Tensor {
    plan.steps
        .iter()
        .fold(frame.clone(), |f, &(op, m)| apply_op(&f, op, m))
}

/// Applies `plan` to every frame; the label is left untouched.
pub fn apply_plan(video: &VideoSample, plan: &AugmentPlan) -> VideoSample {
    VideoSample {
        id: video.id.clone(),
        frames: video
            .frames
            .iter()
            .map(|f| apply_to_frame(f, plan))
            .collect(),
        label: video.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(rng: &mut Rng, side: usize) -> Tensor {
        Tensor::new(
            vec![9, side, side],
            (0..9 * side * side).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fixed_seed_fixed_plan() {
        let spec = NoiseSpec::noisy();
        let a = sample_plan(&spec, &mut Rng::new(99));
        let b = sample_plan(&spec, &mut Rng::new(99));
        assert_eq!(a, b);
        assert!((2..=4).contains(&a.steps.len()));
    }

    #[test]
    fn disabled_spec_gives_empty_plan() {
        let plan = sample_plan(&NoiseSpec::disabled(), &mut Rng::new(1));
        assert!(plan.is_empty());
    }

    #[test]
    fn magnitudes_stay_in_range() {
        let spec = NoiseSpec::noisy();
        let mut rng = Rng::new(5);
        for _ in 0..2000 {
            for (op, m) in sample_plan(&spec, &mut rng).steps {
                assert!(m.abs() <= 9);
                if !op.is_signed() {
                    assert!(m >= 0);
                }
            }
        }
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut rng = Rng::new(2);
        let v = VideoSample::new("x", vec![random_frame(&mut rng, 8)], Some(3));
        assert_eq!(apply_plan(&v, &AugmentPlan::identity()), v);
    }

    #[test]
    fn zero_magnitude_is_identity_for_every_op() {
        let mut rng = Rng::new(3);
        let f = random_frame(&mut rng, 8);
        for op in AugmentOp::ALL {
            assert!(apply_op(&f, op, 0).bit_eq(&f), "{op:?}");
        }
    }

    #[test]
    fn double_flip_restores_frame() {
        let mut rng = Rng::new(4);
        let f = random_frame(&mut rng, 7);
        let plan = AugmentPlan {
            steps: vec![
                (AugmentOp::HorizontalFlip, 3),
                (AugmentOp::HorizontalFlip, 9),
            ],
        };
        assert!(apply_to_frame(&f, &plan).bit_eq(&f));
        assert!(!apply_op(&f, AugmentOp::HorizontalFlip, 1).bit_eq(&f));
    }

    #[test]
    fn brightness_shift_on_constant_image() {
        let f = Tensor::filled(&[9, 8, 8], 0.5);
        for m in [-9, -4, 3, 9] {
            let out = apply_op(&f, AugmentOp::Brightness, m);
            let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
            assert!((mean - 0.5 - 0.05 * f64::from(m)).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_shifts_content_with_edge_padding() {
        let mut f = Tensor::zeros(&[1, 10, 10]);
        f.set3(0, 4, 4, 1.0);
        let out = apply_op(&f, AugmentOp::TranslateX, 9);
        assert_eq!(out.at3(0, 4, 5), 1.0);
        assert_eq!(out.at3(0, 4, 4), 0.0);
        let out = apply_op(&f, AugmentOp::TranslateY, -9);
        assert_eq!(out.at3(0, 3, 4), 1.0);
    }

    #[test]
    fn contrast_and_sharpness_keep_constant_images() {
        let f = Tensor::filled(&[9, 6, 6], 0.3);
        for op in [AugmentOp::Contrast, AugmentOp::Sharpness] {
            let out = apply_op(&f, op, 7);
            assert!(out.max_abs_diff(&f) < 1e-12, "{op:?}");
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let mut rng = Rng::new(8);
        let spec = NoiseSpec::noisy();
        for _ in 0..200 {
            let f = random_frame(&mut rng, 8);
            let plan = sample_plan(&spec, &mut rng);
            let out = apply_to_frame(&f, &plan);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_frame_gets_the_same_transform() {
        let mut rng = Rng::new(10);
        let f = random_frame(&mut rng, 8);
        let v = VideoSample::new("x", vec![f.clone(), f.clone(), f], Some(1));
        let plan = sample_plan(&NoiseSpec::noisy(), &mut rng);
        let out = apply_plan(&v, &plan);
        assert!(out.frames[0].bit_eq(&out.frames[1]));
        assert!(out.frames[1].bit_eq(&out.frames[2]));
        assert_eq!(out.label, Some(1));
    }
}
