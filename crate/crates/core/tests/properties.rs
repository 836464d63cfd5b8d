use proptest::prelude::*;

use fer_core::data::{FrameSource, Manifest, ManifestEntry, CLASS_NAMES};
use fer_core::geometry::{
    alignment_angle, validate_clips, Affine, BoundingBox, ClipRule, Face, LandmarkRecord,
    LandmarkStream, Point,
};
use fer_core::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    (1usize..3, 1usize..4).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1e3f64..1e3, 9 * h * w)
            .prop_map(move |d| Tensor::new(vec![9, h, w], d).unwrap())
    })
}

fn entry() -> impl Strategy<Value = ManifestEntry> {
    let frames = prop_oneof![
        prop::collection::vec(tensor(), 1..3).prop_map(FrameSource::Inline),
        prop::collection::vec("[a-z0-9_/]{1,12}\\.png", 1..4).prop_map(FrameSource::Paths),
    ];
    (
        "[A-Za-z0-9_-]{1,10}",
        prop::option::of(0..CLASS_NAMES.len()),
        frames,
    )
        .prop_map(|(id, label, frames)| ManifestEntry { id, label, frames })
}

fn point() -> impl Strategy<Value = Point> {
    (-500.0f64..500.0, -500.0f64..500.0).prop_map(|(x, y)| Point::new(x, y))
}

fn face(w: f64, h: f64) -> impl Strategy<Value = Face> {
    (
        0.0..w - 2.0,
        0.0..h - 2.0,
        0.05f64..1.0,
        0.05f64..1.0,
        prop::collection::vec(point(), 5),
    )
        .prop_map(move |(x, y, fw, fh, pts)| {
            let bbox = BoundingBox {
                x,
                y,
                w: (fw * (w - x)).max(1.0),
                h: (fh * (h - y)).max(1.0),
            };
            Face {
                bbox,
                landmarks: [pts[0], pts[1], pts[2], pts[3], pts[4]],
            }
        })
}

fn record(i: usize, w: f64, h: f64) -> impl Strategy<Value = LandmarkRecord> {
    prop_oneof![
        1 => Just(LandmarkRecord { frame_index: i, face_count: 0, face: None }),
        1 => (2usize..4, face(w, h)).prop_map(move |(n, f)| LandmarkRecord { frame_index: i, face_count: n, face: Some(f) }),
        4 => face(w, h).prop_map(move |f| LandmarkRecord { frame_index: i, face_count: 1, face: Some(f) }),
    ]
}

fn stream() -> impl Strategy<Value = LandmarkStream> {
    (0usize..60).prop_flat_map(|n| {
        let records: Vec<_> = (0..n).map(|i| record(i + 3, 64.0, 48.0)).collect();
        records.prop_map(|records| LandmarkStream {
            width: 64,
            height: 48,
            records,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(entries in prop::collection::vec(entry(), 0..5), corrected: bool) {
        let mut m = Manifest::new("prop");
        m.illumination_corrected = corrected;
        m.entries = entries;
        let back = Manifest::parse(&m.to_text().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn landmark_stream_round_trips(s in stream()) {
        prop_assert_eq!(LandmarkStream::parse(&s.to_text()).unwrap(), s);
    }

    /// A similarity maps both anchors exactly and scales every direction by
    /// `|q₂ − q₁| / |p₂ − p₁|`.
    #[test]
    fn similarity_hits_anchors_with_equal_singular_values(p1 in point(), p2 in point(), q1 in point(), q2 in point()) {
        let dp = ((p2.x - p1.x).powi(2) + (p2.y - p1.y).powi(2)).sqrt();
        let dq = ((q2.x - q1.x).powi(2) + (q2.y - q1.y).powi(2)).sqrt();
        prop_assume!(dp > 1e-3 && dq > 1e-3);
        let t = Affine::similarity(p1, p2, q1, q2).unwrap();
        for (p, q) in [(p1, q1), (p2, q2)] {
            let r = t.apply(p);
            prop_assert!((r.x - q.x).abs() < 1e-6 && (r.y - q.y).abs() < 1e-6);
        }
        let (s1, s2) = t.singular_values();
        let want = dq / dp;
        prop_assert!((s1 - want).abs() <= 1e-9 * want && (s2 - want).abs() <= 1e-6 * want);
        let back = t.inverse().unwrap();
        let r = back.apply(t.apply(p1));
        prop_assert!((r.x - p1.x).abs() < 1e-6 && (r.y - p1.y).abs() < 1e-6);
    }

    /// Mirroring the frame swaps the eyes and negates the roll angle.
    #[test]
    fn mirrored_eyes_negate_the_angle(l in point(), r in point(), width in 1.0f64..1000.0) {
        prop_assume!((l.x - r.x).abs() + (l.y - r.y).abs() > 1e-6);
        let a = alignment_angle(l, r).unwrap();
        let mirror = |p: Point| Point::new(width - p.x, p.y);
        let b = alignment_angle(mirror(r), mirror(l)).unwrap();
        // ±π both describe a horizontal line pointing left.
        let wrapped = ((a + b + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)) - std::f64::consts::PI;
        prop_assert!(wrapped.abs() < 1e-9, "{} vs {}", a, b);
    }

    /// Spans are disjoint, ordered, long enough, contain only single-face
    /// frames, and pass the area majority.
    #[test]
    fn clip_spans_respect_the_rule(
        s in stream(),
        f in 1usize..12,
        tau in 0.01f64..0.5,
        majority in 0.0f64..0.9,
        fixed: bool,
    ) {
        let rule = ClipRule { min_frames: f, area_threshold: tau, majority, fixed_length: fixed };
        let spans = validate_clips(&s, &rule).unwrap();
        let first = s.records.first().map_or(0, |r| r.frame_index);
        let mut end = 0;
        for span in &spans {
            let lo = span.start - first;
            prop_assert!(lo >= end);
            prop_assert!(span.length >= f);
            if fixed {
                prop_assert_eq!(span.length, f);
            }
            let frames = &s.records[lo..lo + span.length];
            prop_assert!(frames.iter().all(|r| r.face_count == 1));
            let area = (s.width * s.height) as f64;
            let passing = frames
                .iter()
                .filter(|r| r.face.as_ref().unwrap().bbox.area() / area >= tau)
                .count();
            prop_assert!(passing as f64 > majority * span.length as f64);
            end = lo + span.length;
        }
    }
}
