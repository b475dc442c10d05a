use std::path::Path;

use ace_cli::exit;
use ace_core::dataio::read_png;
use ace_core::gradcore::{AdamState, Checkpoint, Tensor};
use ace_core::model::{Model, ModelSpec};
use ace_core::pyramid::ImageShape;

fn ace(args: &[&str]) -> i32 {
    ace_cli::run(std::iter::once("ace").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_checkpoint(path: &Path, poison: bool) {
    let spec = ModelSpec {
        image: ImageShape {
            channels: 3,
            side: 8,
        },
        residual_hidden: 3,
        coarse_hidden: 2,
        classifier_widths: [2, 2, 2],
        ..ModelSpec::default()
    };
    let mut model = Model::init(spec, 1);
    if poison {
        for (name, t) in model.params.trainable.iter_mut() {
            if name.ends_with(".out.b") {
                t.data_mut()[0] = f64::NAN;
            }
        }
    }
    model
        .params
        .buffers
        .insert("meta.train_count".into(), Tensor::vector(vec![20.0]));
    Checkpoint {
        params: model.params,
        adam: AdamState::new(1e-3, 100.0),
    }
    .save(path)
    .unwrap();
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(ace(&["--help"]), exit::OK);
    assert_eq!(ace(&["generate", "--help"]), exit::OK);
    assert_eq!(ace(&["--version"]), exit::OK);
    assert_eq!(ace(&[]), exit::USAGE);
    assert_eq!(ace(&["paint"]), exit::USAGE);
    assert_eq!(
        ace(&["reconstruct", "--checkpoint", "x", "--set", "validation"]),
        exit::USAGE
    );
    assert_eq!(
        ace(&["train", "--run", "2", "--config", "x.cfg"]),
        exit::USAGE
    );
    assert_eq!(
        ace(&[
            "train",
            "--run",
            "2",
            "--config",
            "x.cfg",
            "--registry",
            "r.csv"
        ]),
        exit::USAGE
    );
    assert_eq!(
        ace(&[
            "train",
            "--run",
            "1",
            "--config",
            "x.cfg",
            "--registry",
            "r.csv"
        ]),
        exit::USAGE
    );
}

#[test]
fn bad_inputs_exit_2_and_non_finite_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        ace(&[
            "baseline",
            "--checkpoint",
            s(&dir.path().join("missing.ace")),
            "--out",
            s(&out)
        ]),
        exit::BAD_INPUT
    );

    let garbage = dir.path().join("garbage.ace");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        ace(&["baseline", "--checkpoint", s(&garbage), "--out", s(&out)]),
        exit::BAD_INPUT
    );

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = many\n").unwrap();
    assert_eq!(
        ace(&[
            "train",
            "--config",
            s(&cfg),
            "--data-dir",
            s(dir.path()),
            "--out",
            s(&out)
        ]),
        exit::BAD_INPUT
    );

    let data = dir.path().join("data");
    assert_eq!(
        ace(&["synth-data", "--seed", "2", "--out", s(&data)]),
        exit::OK
    );
    let poisoned = dir.path().join("nan.ace");
    tiny_checkpoint(&poisoned, true);
    let code = ace(&[
        "reconstruct",
        "--checkpoint",
        s(&poisoned),
        "--set",
        "train",
        "--first",
        "20",
        "--data-dir",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, exit::NUMERIC);
}

#[test]
fn generate_defaults_to_a_15_by_15_grid_of_span_7() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        ace(&["synth-data", "--seed", "2", "--out", s(&data)]),
        exit::OK
    );
    let ckpt = dir.path().join("tiny.ace");
    tiny_checkpoint(&ckpt, false);
    let out = dir.path().join("out");
    assert_eq!(
        ace(&[
            "extract-drifts",
            "--checkpoint",
            s(&ckpt),
            "--data-dir",
            s(&data),
            "--out",
            s(&out)
        ]),
        exit::OK
    );
    let registry = out.join("registry.csv");
    assert_eq!(
        ace(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--registry",
            s(&registry),
            "--center",
            "8",
            "--data-dir",
            s(&data),
            "--out",
            s(&out),
        ]),
        exit::OK
    );
    // No meta.run record in this checkpoint, so no run suffix.
    let index = std::fs::read_to_string(out.join("center8/index.csv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert_eq!(rows.len(), 225);
    assert!(rows[0].starts_with("0,0,-7.0,-7.0,"));
    assert!(rows[112].starts_with("7,7,0.0,0.0,"));
    assert!(rows[224].starts_with("14,14,7.0,7.0,"));
    let sheet = read_png(&out.join("center8.png")).unwrap();
    assert_eq!(
        (sheet.width, sheet.height),
        (15 * 8 + 14 * 2, 15 * 8 + 14 * 2)
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["config"]["span"], "7");
    assert_eq!(manifest["config"]["n"], "15");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 227);

    assert_eq!(
        ace(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--registry",
            s(&registry),
            "--center",
            "20",
            "--data-dir",
            s(&data),
            "--out",
            s(&out),
        ]),
        exit::USAGE
    );
}
