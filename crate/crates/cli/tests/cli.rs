use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fer"))
        .args(args)
        .output()
        .expect("failed to spawn fer")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny synthetic corpus: 2 clean labelled videos per class, short clips.
const SMALL: &[&str] = &[
    "--set",
    "synth_labelled_per_class=2",
    "--set",
    "synth_validation_per_class=1",
    "--set",
    "synth_unlabelled=14",
    "--set",
    "synth_min_frames=2",
    "--set",
    "synth_max_frames=3",
    "--set",
    "synth_label_noise=0",
    "--set",
    "channels=[6, 12]",
];

fn gen_data(dir: &Path) {
    let mut args = vec!["gen-data", "--out", p(dir)];
    args.extend_from_slice(SMALL);
    let o = fer(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_on_default_model() {
    let o = fer(&["gradcheck", "--set", "gradcheck_coordinates=40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn gradcheck_over_tolerance_is_numeric_failure() {
    let o = fer(&[
        "gradcheck",
        "--set",
        "gradcheck_coordinates=10",
        "--tolerance",
        "0",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&fer(&["train", "--bogus"])), 1);
    assert_eq!(code(&fer(&["gradcheck", "--set", "no_such_key=1"])), 1);
}

#[test]
fn existing_run_dir_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    gen_data(&out);
    let mut args = vec!["gen-data", "--out", p(&out)];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&fer(&args)), 1);
    args.push("--force");
    assert_eq!(code(&fer(&args)), 0);
}

#[test]
fn bad_manifest_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    let out = tmp.path().join("run");
    let o = fer(&["train", "--out", p(&out), "--labelled", p(&bad)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_epoch_training_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = fer(&[
            "train",
            "--out",
            p(&out),
            "--labelled",
            p(&data.join("labelled.jsonl")),
            "--epochs",
            "0",
            "--set",
            "channels=[6, 12]",
            "--set",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("model.ckpt")).unwrap()
    };
    let a = run("a", "seed=5");
    let b = run("b", "seed=5");
    let c = run("c", "seed=6");
    assert_eq!(a, b);
    assert_ne!(a, c);

    // The checkpoint evaluates with the snapshot config beside it.
    let eval = tmp.path().join("eval");
    let o = fer(&[
        "eval",
        "--out",
        p(&eval),
        "--model",
        p(&tmp.path().join("a/model.ckpt")),
        "--data",
        p(&data.join("validation.jsonl")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = fs::read_to_string(eval.join("diagnostics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 7);
}

#[test]
fn selftrain_without_saturation_runs_every_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = tmp.path().join("st");
    let o = fer(&[
        "selftrain",
        "--out",
        p(&out),
        "--labelled",
        p(&data.join("labelled.jsonl")),
        "--unlabelled",
        p(&data.join("unlabelled.jsonl")),
        "--val",
        p(&data.join("validation.jsonl")),
        "--generations",
        "4",
        "--sat-eps",
        "none",
        "--set",
        "channels=[6, 12]",
        "--set",
        "epochs=1",
        "--set",
        "student_epochs=1",
        "--set",
        "confidence_threshold=0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = fs::read_to_string(out.join("reports.jsonl")).unwrap();
    // Generation 0 is the teacher, then one report per student.
    let gens: Vec<u64> = reports
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["generation"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(gens, [0, 1, 2, 3, 4]);
    for g in 0..=4 {
        assert!(out.join(format!("gen{g}.ckpt")).is_file());
    }
    assert!(out.join("best.ckpt").is_file());

    let o = fer(&["report", "--run", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 6);
}

#[test]
fn report_without_target_is_usage_error() {
    assert_eq!(code(&fer(&["report"])), 1);
}

fn write_frames(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 8) as u8, (y * 8) as u8, (i * 40) as u8])
        });
        img.save(dir.join(format!("f{i:03}.png"))).unwrap();
    }
}

const FACE: &str = "1 4 4 24 24 10 12 22 12 16 18 11 24 21 24";

#[test]
fn preprocess_labelled_video_skips_faceless_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    write_frames(&frames, 3);
    let marks = tmp.path().join("marks.txt");
    fs::write(&marks, format!("size 32 32\n0 {FACE}\n1 0\n2 {FACE}\n")).unwrap();
    let out = tmp.path().join("pre");
    let o = fer(&[
        "preprocess",
        "--out",
        p(&out),
        "--landmarks",
        p(&marks),
        "--frames",
        p(&frames),
        "--id",
        "clip",
        "--label",
        "happy",
        "--set",
        "crop_side=8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diag = fs::read_to_string(out.join("diagnostics.txt")).unwrap();
    assert_eq!(diag.lines().count(), 1);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let entry: serde_json::Value = serde_json::from_str(manifest.lines().nth(1).unwrap()).unwrap();
    assert_eq!(entry["label"], "happy");
    assert_eq!(entry["frame_count"], 2);
}

#[test]
fn preprocess_cuts_validated_clips_from_unlabelled_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    write_frames(&frames, 7);
    let marks = tmp.path().join("marks.txt");
    let mut text = String::from("size 32 32\n");
    for i in 0..7 {
        // frame 3 has no face, splitting the stream into runs of 3
        if i == 3 {
            text.push_str("3 0\n");
        } else {
            text.push_str(&format!("{i} {FACE}\n"));
        }
    }
    fs::write(&marks, text).unwrap();
    let out = tmp.path().join("pre");
    let o = fer(&[
        "preprocess",
        "--out",
        p(&out),
        "--landmarks",
        p(&marks),
        "--frames",
        p(&frames),
        "--id",
        "stream",
        "--set",
        "crop_side=8",
        "--set",
        "clip_min_frames=3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("clips.txt")).unwrap(),
        "stream 0 3\nstream 4 3\n"
    );
}

#[test]
fn preprocess_rejects_frame_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    write_frames(&frames, 2);
    let marks = tmp.path().join("marks.txt");
    fs::write(&marks, format!("size 32 32\n0 {FACE}\n")).unwrap();
    let o = fer(&[
        "preprocess",
        "--out",
        p(&tmp.path().join("pre")),
        "--landmarks",
        p(&marks),
        "--frames",
        p(&frames),
        "--id",
        "x",
        "--label",
        "sad",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablation_report_trains_every_rung() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = tmp.path().join("abl");
    let o = fer(&[
        "report",
        "--ablation",
        "--out",
        p(&out),
        "--labelled",
        p(&data.join("labelled.jsonl")),
        "--val",
        p(&data.join("validation.jsonl")),
        "--set",
        "channels=[6, 12]",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5]["step"], "+ frame attention");
}
