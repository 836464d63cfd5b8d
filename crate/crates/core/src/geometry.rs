//! Face alignment, landmark crops and unlabelled-clip validation over
//! per-frame detection records. Detection itself happens elsewhere.
//!
//! Landmark stream format, whitespace separated, `#` starts a comment:
//!
//! ```text
//! size <frame_width> <frame_height>
//! <frame_index> 0
//! <frame_index> <n_faces> <x> <y> <w> <h> <lex> <ley> <rex> <rey> <nx> <ny> <lmx> <lmy> <rmx> <rmy>
//! ```
//!
//! The box and landmarks belong to the first detected face. Landmarks are
//! left eye, right eye, nose, left mouth corner and right mouth corner in
//! pixel coordinates with y pointing down.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Region;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Landmark {
    LeftEye = 0,
    RightEye = 1,
    Nose = 2,
    LeftMouth = 3,
    RightMouth = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub bbox: BoundingBox,
    pub landmarks: [Point; 5],
}

impl Face {
    pub fn landmark(&self, l: Landmark) -> Point {
        self.landmarks[l as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub frame_index: usize,
    pub face_count: usize,
    /// Present iff `face_count ≥ 1`.
    pub face: Option<Face>,
}

/// A parsed landmark stream for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkStream {
    pub width: usize,
    pub height: usize,
    pub records: Vec<LandmarkRecord>,
}

impl LandmarkStream {
    pub fn parse(text: &str) -> Result<Self> {
        let mut size = None;
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line, msg };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields[0] == "size" {
                if size.is_some() || !records.is_empty() {
                    return Err(err("size must appear once, before any record".into()));
                }
                if fields.len() != 3 {
                    return Err(err("expected `size <width> <height>`".into()));
                }
                let w: usize = fields[1].parse().map_err(|e| err(format!("width: {e}")))?;
                let h: usize = fields[2].parse().map_err(|e| err(format!("height: {e}")))?;
                if w == 0 || h == 0 {
                    return Err(err("frame size must be positive".into()));
                }
                size = Some((w, h));
                continue;
            }
            let (width, height) =
                size.ok_or_else(|| err("missing `size` line before records".into()))?;
            let frame_index: usize = fields[0]
                .parse()
                .map_err(|e| err(format!("frame index: {e}")))?;
            let face_count: usize = fields
                .get(1)
                .ok_or_else(|| err("missing face count".into()))?
                .parse()
                .map_err(|e| err(format!("face count: {e}")))?;
            let face = if face_count == 0 {
                if fields.len() != 2 {
                    return Err(err("a frame without faces takes no box or landmarks".into()));
                }
                None
            } else {
                if fields.len() != 16 {
                    return Err(err(format!(
                        "expected 16 fields for a detected face, found {}",
                        fields.len()
                    )));
                }
                let v: Vec<f64> = fields[2..]
                    .iter()
                    .map(|f| match f.parse::<f64>() {
                        Ok(x) if x.is_finite() => Ok(x),
                        _ => Err(err(format!("bad number `{f}`"))),
                    })
                    .collect::<Result<_>>()?;
                let bbox = BoundingBox {
                    x: v[0],
                    y: v[1],
                    w: v[2],
                    h: v[3],
                };
                if bbox.w <= 0.0
                    || bbox.h <= 0.0
                    || bbox.x < 0.0
                    || bbox.y < 0.0
                    || bbox.x + bbox.w > width as f64
                    || bbox.y + bbox.h > height as f64
                {
                    return Err(err("face box empty or outside the frame".into()));
                }
                let mut landmarks = [Point::new(0.0, 0.0); 5];
                for (k, p) in landmarks.iter_mut().enumerate() {
                    *p = Point::new(v[4 + 2 * k], v[5 + 2 * k]);
                }
                Some(Face { bbox, landmarks })
            };
            records.push(LandmarkRecord {
                frame_index,
                face_count,
                face,
            });
        }
        let (width, height) = size.ok_or(Error::Parse {
            line: 0,
            msg: "missing `size` line".into(),
        })?;
        Ok(Self {
            width,
            height,
            records,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("size {} {}\n", self.width, self.height);
        for r in &self.records {
            match &r.face {
                None => writeln!(s, "{} 0", r.frame_index).unwrap(),
                Some(f) => {
                    let b = f.bbox;
                    write!(
                        s,
                        "{} {} {} {} {} {}",
                        r.frame_index, r.face_count, b.x, b.y, b.w, b.h
                    )
                    .unwrap();
                    for p in &f.landmarks {
                        write!(s, " {} {}", p.x, p.y).unwrap();
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

/// Angle of the eye line against the horizontal, `atan2(Δy, Δx)`, in image
/// coordinates. Rotating by `−θ` about the eye midpoint levels the eyes.
pub fn alignment_angle(left_eye: Point, right_eye: Point) -> Result<f64> {
    let (dx, dy) = (right_eye.x - left_eye.x, right_eye.y - left_eye.y);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::Geometry("eye landmarks coincide".into()));
    }
    Ok(dy.atan2(dx))
}

/// `[[a, b, c], [d, e, f]]` mapping `(x, y)` to `(ax + by + c, dx + ey + f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.0;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::Geometry("transform is not invertible".into()));
        }
        let (a, b, d, e) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Affine([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [d, e, -(d * m[0][2] + e * m[1][2])],
        ]))
    }

    /// Singular values of the linear part, largest first.
    pub fn singular_values(&self) -> (f64, f64) {
        let m = &self.0;
        let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        // Split into conformal and anti-conformal parts; avoids the
        // cancellation of the discriminant form when the values are equal.
        let q = (a + d).hypot(c - b);
        let r = (a - d).hypot(c + b);
        ((q + r) / 2.0, (q - r).abs() / 2.0)
    }

    /// The rotation + uniform scale + translation taking `p1 → q1` and
    /// `p2 → q2`, solved as `z ↦ αz + β` over complex numbers.
    pub fn similarity(p1: Point, p2: Point, q1: Point, q2: Point) -> Result<Affine> {
        let (dpx, dpy) = (p2.x - p1.x, p2.y - p1.y);
        let (dqx, dqy) = (q2.x - q1.x, q2.y - q1.y);
        let n = dpx * dpx + dpy * dpy;
        if n == 0.0 {
            return Err(Error::Geometry("anchor landmarks coincide".into()));
        }
        let ar = (dqx * dpx + dqy * dpy) / n;
        let ai = (dqy * dpx - dqx * dpy) / n;
        if ar == 0.0 && ai == 0.0 {
            return Err(Error::Geometry("crop targets coincide".into()));
        }
        let tx = q1.x - (ar * p1.x - ai * p1.y);
        let ty = q1.y - (ai * p1.x + ar * p1.y);
        Ok(Affine([[ar, -ai, tx], [ai, ar, ty]]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub region: Region,
    /// Normalised output positions of the two anchors (eyes or mouth
    /// corners). Unused by the face crop.
    pub targets: [(f64, f64); 2],
    pub side: usize,
    /// Fractional enlargement of the detection box for the face crop.
    pub face_margin: f64,
}

impl CropSpec {
    pub fn face(side: usize) -> Self {
        Self {
            region: Region::Face,
            targets: [(0.2, 0.6), (0.8, 0.6)],
            side,
            face_margin: 0.1,
        }
    }

    pub fn eyes(side: usize) -> Self {
        Self {
            region: Region::Eyes,
            targets: [(0.2, 0.6), (0.8, 0.6)],
            side,
            face_margin: 0.1,
        }
    }

    /// Not given by the source; chosen symmetric to the eye crop.
    pub fn mouth(side: usize) -> Self {
        Self {
            region: Region::Mouth,
            targets: [(0.25, 0.45), (0.75, 0.45)],
            side,
            face_margin: 0.1,
        }
    }

    /// Face, eyes and mouth specs, in channel order.
    pub fn standard(side: usize) -> [CropSpec; 3] {
        [Self::face(side), Self::eyes(side), Self::mouth(side)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::Config("crop side must be positive".into()));
        }
        let inside = |v: f64| v > 0.0 && v < 1.0;
        if !self.targets.iter().all(|&(x, y)| inside(x) && inside(y)) {
            return Err(Error::Config(format!(
                "crop targets {:?} must lie inside (0, 1)²",
                self.targets
            )));
        }
        if self.targets[0] == self.targets[1] {
            return Err(Error::Config("crop targets coincide".into()));
        }
        if !(self.face_margin >= 0.0 && self.face_margin.is_finite()) {
            return Err(Error::Config("face margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Transform from frame pixels to crop pixels for one region.
pub fn crop_transform(record: &LandmarkRecord, spec: &CropSpec) -> Result<Affine> {
    spec.validate()?;
    let face = record
        .face
        .as_ref()
        .ok_or_else(|| Error::Geometry(format!("frame {} has no landmarks", record.frame_index)))?;
    let s = spec.side as f64;
    let target = |i: usize| Point::new(spec.targets[i].0 * s, spec.targets[i].1 * s);
    match spec.region {
        Region::Eyes => Affine::similarity(
            face.landmark(Landmark::LeftEye),
            face.landmark(Landmark::RightEye),
            target(0),
            target(1),
        ),
        Region::Mouth => Affine::similarity(
            face.landmark(Landmark::LeftMouth),
            face.landmark(Landmark::RightMouth),
            target(0),
            target(1),
        ),
        Region::Face => {
            // Enlarged square box around the detection centre, levelled by
            // the eye-line angle.
            let theta = alignment_angle(
                face.landmark(Landmark::LeftEye),
                face.landmark(Landmark::RightEye),
            )?;
            let extent = face.bbox.w.max(face.bbox.h) * (1.0 + spec.face_margin);
            let k = s / extent;
            let (cos, sin) = (theta.cos(), theta.sin());
            let c = face.bbox.center();
            // p' = k·R(−θ)(p − c) + (s/2, s/2)
            let (a, b, d, e) = (k * cos, k * sin, -k * sin, k * cos);
            Ok(Affine([
                [a, b, s / 2.0 - (a * c.x + b * c.y)],
                [d, e, s / 2.0 - (d * c.x + e * c.y)],
            ]))
        }
    }
}

/// Bilinear sample of channel `c` of a `C × H × W` image at `(x, y)`, with
/// coordinates clamped to the image edge.
pub fn bilinear(image: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = image.at3(c, y0, x0) * (1.0 - fx) + image.at3(c, y0, x1) * fx;
    let bottom = image.at3(c, y1, x0) * (1.0 - fx) + image.at3(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Samples face, eyes and mouth crops of a `3 × H × W` frame in `[0, 1]`
/// into one `9 × S × S` stack. All specs must share one side.
pub fn build_region_stack(
    frame: &Tensor,
    record: &LandmarkRecord,
    specs: &[CropSpec; 3],
) -> Result<Tensor> {
    if frame.shape().len() != 3
        || frame.shape()[0] != 3
        || frame.shape()[1] == 0
        || frame.shape()[2] == 0
    {
        return Err(Error::shape(
            "build_region_stack",
            frame.shape(),
            &[3, 0, 0],
        ));
    }
    let side = specs[0].side;
    if specs.iter().any(|s| s.side != side) {
        return Err(Error::Config(
            "region crops must share one output side".into(),
        ));
    }
    let mut out = Tensor::zeros(&[9, side, side]);
    for (r, spec) in specs.iter().enumerate() {
        let inv = crop_transform(record, spec)?.inverse()?;
        for v in 0..side {
            for u in 0..side {
                let src = inv.apply(Point::new(u as f64, v as f64));
                for c in 0..3 {
                    let value = bilinear(frame, c, src.x, src.y).clamp(0.0, 1.0);
                    out.set3(3 * r + c, v, u, value);
                }
            }
        }
    }
    Ok(out)
}

/// Region stacks for every frame that has landmarks; other frames are
/// skipped with one diagnostic each.
pub fn build_video_stacks(
    frames: &[Tensor],
    records: &[LandmarkRecord],
    specs: &[CropSpec; 3],
) -> Result<(Vec<Tensor>, Vec<String>)> {
    if frames.len() != records.len() {
        return Err(Error::Input(format!(
            "{} frames but {} landmark records",
            frames.len(),
            records.len()
        )));
    }
    let mut stacks = Vec::new();
    let mut skipped = Vec::new();
    for (f, r) in frames.iter().zip(records) {
        match build_region_stack(f, r, specs) {
            Ok(t) => stacks.push(t),
            Err(e @ Error::Geometry(_)) => {
                skipped.push(format!("frame {} skipped: {e}", r.frame_index))
            }
            Err(e) => return Err(e),
        }
    }
    Ok((stacks, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRule {
    /// Minimum run of consecutive single-face frames.
    pub min_frames: usize,
    /// Box area over frame area needed on a frame to count towards the
    /// majority.
    pub area_threshold: f64,
    /// Strictly more than this fraction of the frames must pass.
    pub majority: f64,
    /// Emit the first `min_frames` frames of each qualifying run instead of
    /// the whole run.
    pub fixed_length: bool,
}

impl Default for ClipRule {
    fn default() -> Self {
        Self {
            min_frames: 30,
            area_threshold: 0.2,
            majority: 0.5,
            fixed_length: false,
        }
    }
}

impl ClipRule {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 {
            return Err(Error::Config("clip length f must be at least 1".into()));
        }
        if !(self.area_threshold > 0.0 && self.area_threshold < 1.0) {
            return Err(Error::Config("area threshold τ must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.majority) {
            return Err(Error::Config("majority fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpan {
    /// Frame index of the first frame.
    pub start: usize,
    pub length: usize,
}

/// Maximal runs of single-face frames that are long enough and whose face
/// box is large enough on a strict majority of the frames.
pub fn validate_clips(stream: &LandmarkStream, rule: &ClipRule) -> Result<Vec<ClipSpan>> {
    rule.validate()?;
    let records = &stream.records;
    if let Some(first) = records.first() {
        for (i, r) in records.iter().enumerate() {
            if r.frame_index != first.frame_index + i {
                return Err(Error::Input(format!(
                    "landmark records out of order or with a gap at frame {}",
                    r.frame_index
                )));
            }
        }
    }
    let frame_area = (stream.width * stream.height) as f64;
    let large = |r: &LandmarkRecord| {
        r.face
            .as_ref()
            .is_some_and(|f| f.bbox.area() / frame_area >= rule.area_threshold)
    };
    let mut spans = Vec::new();
    let mut i = 0;
    while i < records.len() {
        if records[i].face_count != 1 {
            i += 1;
            continue;
        }
        let start = i;
        while i < records.len() && records[i].face_count == 1 {
            i += 1;
        }
        let length = i - start;
        if length < rule.min_frames {
            continue;
        }
        let length = if rule.fixed_length {
            rule.min_frames
        } else {
            length
        };
        let passing = records[start..start + length]
            .iter()
            .filter(|r| large(r))
            .count();
        if passing as f64 > rule.majority * length as f64 {
            spans.push(ClipSpan {
                start: records[start].frame_index,
                length,
            });
        }
    }
    Ok(spans)
}
