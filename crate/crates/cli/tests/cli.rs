use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwenhance::checkpoint::save_model;
use uwenhance::degradation::{list_images, procedural_scene};
use uwenhance::imaging::{load_image, save_image};
use uwenhance::{Model, ModelConfig};
use uwenhance_cli::{parse_size, Cli, DATA_ROOT_ENV, EXIT_IO, EXIT_VALIDATION};

fn bin(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uwenhance"));
    c.args(args).env_remove(DATA_ROOT_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_zero_model(path: &Path) {
    let cfg = ModelConfig::tiny();
    save_model(path, &cfg, &Model::new(&cfg).unwrap().init_weights()).unwrap();
}

#[test]
fn help_documents_every_flag() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        let name = sub.get_name().to_string();
        let out = run(&[&name, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8(out.stdout).unwrap();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(
                    text.contains(&format!("--{long}")),
                    "{name} --help lacks --{long}"
                );
                assert!(
                    arg.get_help().is_some(),
                    "{name} --{long} has no description"
                );
            }
        }
    }
}

#[test]
fn size_parsing() {
    assert_eq!(parse_size("720x1080").unwrap(), (720, 1080));
    assert_eq!(parse_size("64X48").unwrap(), (64, 48));
    for bad in ["720", "0x4", "ax4", "4x"] {
        assert!(parse_size(bad).is_err(), "{bad}");
    }
}

#[test]
fn invalid_arguments_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "enhance",
            "--checkpoint",
            p(&missing),
            "--input",
            p(dir.path()),
            "--out",
            p(dir.path()),
        ],
        vec!["benchmark", "--size", "12"],
        vec!["synth", "--count", "2"],
        vec!["gradcheck", "--scope", "nope"],
        vec!["ablate", "--config", p(&missing), "--settings", "bogus"],
        vec!["frobnicate"],
    ];
    for args in cases {
        assert_eq!(code(&run(&args)), EXIT_VALIDATION as i32, "{args:?}");
    }

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    assert_eq!(
        code(&run(&["train", "--config", p(&cfg)])),
        EXIT_VALIDATION as i32
    );
    fs::write(&cfg, "[train]\nnot_a_key = 1\n").unwrap();
    assert_eq!(
        code(&run(&["train", "--config", p(&cfg)])),
        EXIT_VALIDATION as i32
    );
}

#[test]
fn corrupt_checkpoint_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let img = dir.path().join("a.png");
    save_image(
        &procedural_scene(16, 16, &mut ChaCha8Rng::seed_from_u64(0)),
        &img,
    )
    .unwrap();
    let out = run(&[
        "enhance",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&img),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), EXIT_IO as i32);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn zero_head_enhancement_is_identity_over_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    write_zero_model(&ckpt);
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, (h, w)) in [(16, 16), (20, 28), (33, 17)].into_iter().enumerate() {
        save_image(
            &procedural_scene(h, w, &mut rng),
            input.join(format!("img{i}.png")),
        )
        .unwrap();
    }
    let out_dir = dir.path().join("out");
    let out = run(&[
        "enhance",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&input),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let produced = list_images(&out_dir).unwrap();
    assert_eq!(produced.len(), 3);
    for src in list_images(&input).unwrap() {
        let dest = out_dir.join(src.file_name().unwrap());
        assert_eq!(load_image(&dest).unwrap(), load_image(&src).unwrap());
    }
}

#[test]
fn synth_uses_data_root_and_evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["synth", "--count", "3", "--size", "24x24", "--seed", "4"])
        .env(DATA_ROOT_ENV, dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("synth");
    assert!(data.join("manifest.jsonl").is_file());
    assert_eq!(list_images(&data.join("degraded")).unwrap().len(), 3);

    let report = dir.path().join("report");
    let out = run(&[
        "evaluate",
        "--pred",
        p(&data.join("degraded")),
        "--ref",
        p(&data.join("clean")),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.join("report.txt").is_file());
    assert!(
        fs::read_to_string(report.join("report.jsonl"))
            .unwrap()
            .lines()
            .count()
            >= 3
    );
}

#[test]
fn gradcheck_and_benchmark_write_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--scope", "losses", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(json[0]["scope"], "losses");

    let ckpt = dir.path().join("m.ckpt");
    write_zero_model(&ckpt);
    let out = run(&[
        "benchmark",
        "--checkpoint",
        p(&ckpt),
        "--size",
        "32x48",
        "--reps",
        "2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("benchmark.json")).unwrap())
            .unwrap();
    assert_eq!(json["height"], 32);
    assert_eq!(json["width"], 48);
    assert!(json["median_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let run = uwenhance::training::RunConfig::load(&path).unwrap();
    run.validate().unwrap();
    assert_eq!(run.model, ModelConfig::default());
    assert!(run.train.manifest.ends_with("data/synth/manifest.jsonl"));
}
