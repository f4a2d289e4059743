//! End-to-end runs of the `rescale-lab` binary on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use rescale_lab::container::{load_model, save_model};
use rescale_lab::geometry::Padding;
use rescale_lab::idx::{encode_images, encode_labels};
use rescale_lab::model::{Activation, LayerKind, LayerSpec, ModelGraph};
use rescale_lab::qcore::{quantize_rescaler, QuantParams};
use rescale_lab::tensor::QTensor;

fn write_split(dir: &Path, prefix: &str, n: usize, rng: &mut ChaCha8Rng) {
    // Class c lights up row band c, so a few float epochs learn something.
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let mut pixels = vec![0u8; n * 784];
    for (i, &l) in labels.iter().enumerate() {
        for p in 0..784 {
            let band = (p / 28) * 10 / 28;
            pixels[i * 784 + p] = if band == l as usize {
                rng.gen_range(150..=255)
            } else {
                rng.gen_range(0..40)
            };
        }
    }
    fs::write(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        encode_images(n, 28, 28, &pixels),
    )
    .unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_labels(&labels)).unwrap();
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        write_split(dir.path(), "train", 120, &mut rng);
        write_split(dir.path(), "t10k", 40, &mut rng);
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rescale-lab"))
            .args(args)
            .env("RESCALE_LAB_DATA", self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Float training plus PTQ; returns the quantized model path.
    fn quantized(&self) -> String {
        let float = self.p("float.json");
        self.ok(&[
            "train-float",
            "--epochs",
            "1",
            "--out",
            &float,
            "--log",
            &self.p("float.csv"),
        ]);
        let q = self.p("model.rqm");
        let text = self.ok(&["quantize", "--model", &float, "--calib", "100", "--out", &q]);
        assert!(text.starts_with("integer test accuracy"));
        q
    }
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new();
    let q = ws.quantized();
    let log = fs::read_to_string(ws.path("float.csv")).unwrap();
    assert!(log.starts_with("# rescale-lab v1\nepoch,loss,accuracy\n1,"), "{log}");

    let class: usize = ws
        .ok(&[
            "infer",
            "--model",
            &q,
            "--input",
            &ws.p("t10k-images-idx3-ubyte"),
            "--index",
            "3",
            "--k",
            "4",
        ])
        .trim()
        .parse()
        .unwrap();
    assert!(class < 10);

    ws.ok(&[
        "sweep",
        "--model",
        &q,
        "--k-list",
        "32,8,2",
        "--out",
        &ws.p("sweep.csv"),
    ]);
    let sweep = fs::read_to_string(ws.path("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "# rescale-lab v1");
    assert_eq!(lines.len(), 2 + 3, "{sweep}");
    assert!(lines[2].starts_with("32,"));

    let analysis = ws.ok(&["analyze", "--model", &q, "--k", "3", "--probes", "20"]);
    assert!(analysis.lines().count() > 10, "{analysis}");

    let tuned = ws.p("tuned.rqm");
    let report = ws.ok(&[
        "finetune",
        "--model",
        &q,
        "--k",
        "3",
        "--epochs",
        "1",
        "--lr",
        "50",
        "--out",
        &tuned,
        "--log",
        &ws.p("ft.csv"),
    ]);
    assert!(report.contains("epoch 1:"), "{report}");
    assert_eq!(load_model(&tuned).unwrap().k, 3);
    assert!(fs::read_to_string(ws.path("ft.csv"))
        .unwrap()
        .contains("epoch,loss,int_accuracy"));

    let parity = ws.ok(&[
        "parity",
        "--model",
        &tuned,
        "--k",
        "3",
        "--batches",
        "3",
        "--batch-size",
        "2",
    ]);
    assert!(parity.starts_with("pass:"), "{parity}");
}

#[test]
fn outputs_are_deterministic() {
    let ws = Workspace::new();
    let q = ws.quantized();
    let first = fs::read(&q).unwrap();
    let float_json = fs::read(ws.path("float.json")).unwrap();
    ws.quantized();
    assert_eq!(fs::read(&q).unwrap(), first);
    assert_eq!(fs::read(ws.path("float.json")).unwrap(), float_json);
    let sweep = |name: &str| {
        ws.ok(&["sweep", "--model", &q, "--k-list", "16,4,2", "--out", &ws.p(name)]);
        fs::read(ws.path(name)).unwrap()
    };
    assert_eq!(sweep("a.csv"), sweep("b.csv"));
    let analyze = || ws.ok(&["analyze", "--model", &q, "--k", "5", "--probes", "10"]);
    assert_eq!(analyze(), analyze());
}

/// Flatten, then a dense layer with all-zero weights: every logit ties.
fn zero_model() -> ModelGraph {
    let p = QuantParams::new(1.0 / 255.0, -128).unwrap();
    let out = QuantParams::new(0.1, 0).unwrap();
    let dense = LayerSpec {
        kind: LayerKind::Dense,
        weights: Some(QTensor::weights(vec![0; 10 * 784], vec![10, 784], vec![0.01; 10], 0).unwrap()),
        bias: Some(vec![0; 10]),
        activation: Activation::None,
        stride: (1, 1),
        padding: Padding::Valid,
        window: (1, 1),
        output: out,
        rescalers: vec![quantize_rescaler(0.01 / 255.0 / 0.1, 32).unwrap(); 10],
    };
    ModelGraph {
        name: "zero".into(),
        input_shape: vec![28, 28, 1],
        input: p,
        layers: vec![LayerSpec::flatten(p), dense],
        k: 32,
    }
}

#[test]
fn infer_breaks_ties_toward_class_zero() {
    let ws = Workspace::new();
    save_model(&zero_model(), ws.path("zero.rqm")).unwrap();
    fs::write(ws.path("blank.raw"), [0u8; 784]).unwrap();
    let out = ws.ok(&["infer", "--model", &ws.p("zero.rqm"), "--input", &ws.p("blank.raw")]);
    assert_eq!(out.trim(), "0");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["sweep", "--bogus"]).status.code(), Some(2));
    assert_eq!(ws.run(&[]).status.code(), Some(2));

    fs::write(ws.path("junk.rqm"), b"not a model").unwrap();
    let out = ws.run(&["parity", "--model", &ws.p("junk.rqm"), "--k", "8"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(
        ws.run(&["parity", "--model", &ws.p("missing.rqm"), "--k", "8"])
            .status
            .code(),
        Some(3)
    );

    save_model(&zero_model(), ws.path("zero.rqm")).unwrap();
    let bad_k = ws.run(&[
        "infer",
        "--model",
        &ws.p("zero.rqm"),
        "--input",
        &ws.p("t10k-images-idx3-ubyte"),
        "--k",
        "1",
    ]);
    assert_eq!(bad_k.status.code(), Some(4));
}
