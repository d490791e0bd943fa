use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partreg::backbone::load_features;
use partreg::eval::EvalMetrics;
use partreg::io::{read_pgm, ResultDoc};

fn partreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Nonzero exit with exactly one diagnostic line on stderr.
fn assert_one_line_failure(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic: {err:?}");
    assert!(err.starts_with("error:"), "diagnostic: {err:?}");
    err
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Synthetic data, a quickly selected model and short registrations.
    fn pipeline(&self) {
        assert_ok(&partreg(&["synth", "--out", s(&self.path("data")), "--count", "2", "--seed", "3"]));
        assert_ok(&partreg(&[
            "select-parts",
            "--reference",
            s(&self.path("data/reference.pgm")),
            "--dataset",
            s(&self.path("data/samples")),
            "--out",
            s(&self.path("model.json")),
            "--iters",
            "5",
        ]));
        for i in 0..2 {
            let name = format!("sample_{i:04}");
            assert_ok(&partreg(&[
                "register",
                "--input",
                s(&self.path(&format!("data/samples/{name}.pgm"))),
                "--model",
                s(&self.path("model.json")),
                "--out",
                s(&self.path(&format!("results/{name}.json"))),
                "--scales",
                "0.9",
                "--iters",
                "3",
            ]));
        }
    }
}

#[test]
fn synth_writes_reference_samples_and_truths() {
    let ws = Workspace::new();
    assert_ok(&partreg(&["synth", "--out", s(&ws.path("d")), "--count", "3", "--seed", "5"]));
    let reference = read_pgm(&ws.path("d/reference.pgm")).unwrap();
    assert_eq!((reference.height(), reference.width()), (224, 224));
    for i in 0..3 {
        assert!(ws.path(&format!("d/samples/sample_{i:04}.pgm")).is_file());
        assert!(ws.path(&format!("d/samples/sample_{i:04}.truth.json")).is_file());
    }
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    for out in ["a", "b"] {
        assert_ok(&partreg(&["synth", "--out", s(&ws.path(out)), "--count", "2", "--seed", "9"]));
    }
    for f in ["samples/sample_0001.pgm", "samples/sample_0001.truth.json", "reference.pgm"] {
        assert_eq!(
            std::fs::read(ws.path("a").join(f)).unwrap(),
            std::fs::read(ws.path("b").join(f)).unwrap()
        );
    }
}

#[test]
fn register_eval_and_dump() {
    let ws = Workspace::new();
    ws.pipeline();

    let doc = ResultDoc::load(&ws.path("results/sample_0000.json")).unwrap();
    assert!(doc.warp_params().is_finite());

    assert_ok(&partreg(&[
        "eval",
        "--results",
        s(&ws.path("results")),
        "--truth",
        s(&ws.path("data/samples")),
        "--out",
        s(&ws.path("report.json")),
    ]));
    let report: EvalMetrics = serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report.samples.len(), 2);
    assert!(report.samples.iter().all(|m| (0.0..=1.0).contains(&m.iou) && m.center_error >= 0.0));

    assert_ok(&partreg(&[
        "dump-heatmaps",
        "--input",
        s(&ws.path("data/samples/sample_0000.pgm")),
        "--model",
        s(&ws.path("model.json")),
        "--latents",
        s(&ws.path("results/sample_0000.json")),
        "--outdir",
        s(&ws.path("dump")),
    ]));
    let files: Vec<_> = std::fs::read_dir(ws.path("dump")).unwrap().collect();
    assert_eq!(files.len(), 9 * 4 + 1);
    let g = read_pgm(&ws.path("dump/g_01.pgm")).unwrap();
    assert_eq!((g.height(), g.width()), (28, 28));
    assert!(ws.path("dump/patch.pgm").is_file());
}

#[test]
fn feature_file_backbone_round_trip() {
    let ws = Workspace::new();
    assert_ok(&partreg(&["synth", "--out", s(&ws.path("data")), "--count", "1", "--seed", "4"]));
    let input = ws.path("data/samples/sample_0000.pgm");
    assert_ok(&partreg(&["features", "--input", s(&input), "--out", s(&ws.path("f.pbrf"))]));
    let f = load_features(&ws.path("f.pbrf")).unwrap();
    assert_eq!((f.rows(), f.cols(), f.channels()), (28, 28, 32));
    for r in 0..28 {
        for c in 0..28 {
            let n: f64 = f.at(r, c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn missing_input_is_a_one_line_error() {
    let ws = Workspace::new();
    let out = partreg(&[
        "register",
        "--input",
        s(&ws.path("absent.pgm")),
        "--model",
        s(&ws.path("absent.json")),
        "--out",
        s(&ws.path("r.json")),
    ]);
    let err = assert_one_line_failure(&out);
    assert!(err.contains("absent.pgm"));
    assert!(!ws.path("r.json").exists());
}

#[test]
fn corrupt_pgm_is_a_one_line_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    let out = partreg(&["features", "--input", s(&ws.path("bad.pgm")), "--out", s(&ws.path("f.pbrf"))]);
    assert_one_line_failure(&out);
    assert!(!ws.path("f.pbrf").exists());
}

#[test]
fn bad_scale_list_is_a_usage_error() {
    let ws = Workspace::new();
    assert_ok(&partreg(&["synth", "--out", s(&ws.path("data")), "--count", "1", "--seed", "1"]));
    let out = partreg(&[
        "register",
        "--input",
        s(&ws.path("data/samples/sample_0000.pgm")),
        "--model",
        s(&ws.path("m.json")),
        "--out",
        s(&ws.path("r.json")),
        "--scales",
        "1.2:0.6:0.05",
    ]);
    let err = assert_one_line_failure(&out);
    assert!(err.contains("scale"), "{err}");
}

#[test]
fn unknown_backbone_is_a_usage_error() {
    let ws = Workspace::new();
    let out = partreg(&[
        "select-parts",
        "--reference",
        s(&ws.path("r.pgm")),
        "--dataset",
        s(&ws.path("d")),
        "--out",
        s(&ws.path("m.json")),
        "--backbone",
        "vgg",
    ]);
    assert_one_line_failure(&out);
}

#[test]
fn argument_errors_are_one_line() {
    assert_one_line_failure(&partreg(&["register"]));
    assert_one_line_failure(&partreg(&["frobnicate"]));
    assert_one_line_failure(&partreg(&[]));
}

#[test]
fn eval_without_matching_results_fails() {
    let ws = Workspace::new();
    assert_ok(&partreg(&["synth", "--out", s(&ws.path("data")), "--count", "1", "--seed", "2"]));
    std::fs::create_dir_all(ws.path("results")).unwrap();
    let out = partreg(&[
        "eval",
        "--results",
        s(&ws.path("results")),
        "--truth",
        s(&ws.path("data/samples")),
        "--out",
        s(&ws.path("report.json")),
    ]);
    assert_one_line_failure(&out);
}
