use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aflow::checkpoint::save_checkpoint;
use aflow::image::Raster;
use aflow::network::NetworkConfig;
use aflow::trainer::{TrainMode, TrainSettings, Trainer};

fn aflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = aflow(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    aflow(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Resampling error of the exact warp on 64px data, measured once.
const RESAMPLING_L1_BOUND: f64 = 0.02;

fn gen_data_sized(dir: &Path, size: &str) {
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--instances",
        "5",
        "--size",
        size,
        "--out",
        p(dir),
    ]);
}

fn gen_data(dir: &Path) {
    gen_data_sized(dir, "32");
}

fn config(dir: &Path, mode: &str) -> PathBuf {
    let path = dir.join(format!("{mode}.toml"));
    fs::write(
        &path,
        format!("mode = \"{mode}\"\nbatch_size = 4\narchitecture = \"tiny\"\n\n[adam]\nlearning_rate = 1e-3\n"),
    )
    .unwrap();
    path
}

fn zero_head_checkpoint(dir: &Path, mode: TrainMode) -> PathBuf {
    let mut t = Trainer::new(&NetworkConfig::tiny(mode.output_mode()), TrainSettings::new(mode, 1, 0)).unwrap();
    t.network.zero_output_layer();
    let path = dir.join(format!("{}-zero.ckpt", mode.name()));
    save_checkpoint(&t.checkpoint(), &path).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path());
    gen_data(b.path());
    assert!(tree(a.path()) == tree(b.path()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["gen-data", "--instances", "5"]), 2);
    assert_eq!(code(&["gen-data", "--size", "48", "--out", p(&out)]), 1);
    assert_eq!(
        code(&["gen-data", "--size", "32", "--instances", "2", "--out", p(&out)]),
        1
    );
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--data", p(&out), "--out", p(&out)]), 2);
    assert_eq!(
        code(&["eval", "--oracle", "--ckpt", "c", "--data", p(&out), "--out", p(&out)]),
        2
    );
}

#[test]
fn training_is_reproducible_and_resumable() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let runs = tempfile::tempdir().unwrap();
    let cfg = config(runs.path(), "single-flow");
    let dir = |n: &str| runs.path().join(n);
    let train = |name: &str, extra: &[&str]| {
        let out = dir(name);
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(data.path()), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let read = |name: &str, file: &str| fs::read(dir(name).join(file)).unwrap();

    train("zero", &["--iters", "0"]);
    assert!(read("zero", "loss.log").is_empty());
    assert!(!read("zero", "checkpoint.ckpt").is_empty());

    train("a", &["--iters", "40"]);
    train("b", &["--iters", "40"]);
    train("threads", &["--iters", "40", "--threads", "2"]);
    let log = String::from_utf8(read("a", "loss.log")).unwrap();
    assert_eq!(log.lines().count(), 40);
    for other in ["b", "threads"] {
        assert_eq!(read(other, "loss.log"), read("a", "loss.log"));
        assert_eq!(read(other, "checkpoint.ckpt"), read("a", "checkpoint.ckpt"));
    }

    let echoed = dir("a").join("config.toml");
    let replay = dir("replay");
    ok(&["train", "--config", p(&echoed), "--out", p(&replay)]);
    assert_eq!(fs::read(replay.join("config.toml")).unwrap(), read("a", "config.toml"));
    assert_eq!(read("replay", "loss.log"), read("a", "loss.log"));

    train("r", &["--iters", "15"]);
    let r_cfg = dir("r").join("config.toml");
    ok(&[
        "train",
        "--config",
        p(&r_cfg),
        "--iters",
        "40",
        "--resume",
        "--out",
        p(&dir("r")),
    ]);
    assert_eq!(read("r", "loss.log"), read("a", "loss.log"));
    assert_eq!(read("r", "checkpoint.ckpt"), read("a", "checkpoint.ckpt"));

    assert_eq!(
        code(&[
            "train",
            "--config",
            p(&r_cfg),
            "--lr",
            "0.5",
            "--iters",
            "50",
            "--resume",
            "--out",
            p(&dir("r"))
        ]),
        1
    );
    assert_eq!(
        code(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(data.path()),
            "--seed",
            "9223372036854775808",
            "--out",
            p(&dir("s"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(data.path()),
            "--loss-region",
            "edges",
            "--out",
            p(&dir("s"))
        ]),
        2
    );
}

#[test]
fn synthesis_outputs() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let input = data.path().join("inst_0").join("view_8.png");
    let input_s = p(&input);

    let flow = zero_head_checkpoint(w, TrainMode::SingleFlow);
    ok(&[
        "synth",
        "--ckpt",
        p(&flow),
        "--input",
        input_s,
        "--delta",
        "0",
        "--out",
        p(&w.join("id")),
    ]);
    assert_eq!(
        Raster::load_png(&w.join("id/synth.png")).unwrap(),
        Raster::load_png(&input).unwrap()
    );
    assert!(w.join("id/flow_0.png").exists());
    assert_eq!(
        code(&[
            "synth",
            "--ckpt",
            p(&flow),
            "--input",
            input_s,
            "--delta",
            "37",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "synth",
            "--ckpt",
            p(&flow),
            "--input",
            &format!("{input_s},{input_s}"),
            "--delta",
            "0,20",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "synth",
            "--ckpt",
            p(&flow),
            "--input",
            input_s,
            "--delta",
            "0,20",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );

    let runs = w.join("runs");
    let cfg = config(w, "multi-flow");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(data.path()),
        "--iters",
        "10",
        "--out",
        p(&runs),
    ]);
    let multi = runs.join("checkpoint.ckpt");
    ok(&[
        "synth",
        "--ckpt",
        p(&multi),
        "--input",
        input_s,
        "--delta",
        "-40",
        "--out",
        p(&w.join("one")),
    ]);
    ok(&[
        "synth",
        "--ckpt",
        p(&multi),
        "--input",
        &format!("{input_s},{input_s}"),
        "--delta",
        "-40,-40",
        "--out",
        p(&w.join("two")),
    ]);
    assert_eq!(
        fs::read(w.join("one/synth.png")).unwrap(),
        fs::read(w.join("two/synth.png")).unwrap()
    );
    for f in ["flow_0.png", "flow_1.png", "confidence_0.png", "confidence_1.png"] {
        assert!(w.join("two").join(f).exists(), "{f}");
    }

    let mask = zero_head_checkpoint(w, TrainMode::Mask);
    ok(&[
        "synth",
        "--ckpt",
        p(&mask),
        "--input",
        input_s,
        "--delta",
        "180",
        "--out",
        p(&w.join("mask")),
    ]);
    let m = Raster::load_png(&w.join("mask/mask.png")).unwrap();
    assert!(m.data.iter().all(|&v| v == 128));

    let pixels = zero_head_checkpoint(w, TrainMode::SinglePixels);
    ok(&[
        "synth",
        "--ckpt",
        p(&pixels),
        "--input",
        input_s,
        "--delta",
        "-180",
        "--out",
        p(&w.join("pix")),
    ]);
    assert!(w.join("pix/synth.png").exists());
}

#[test]
fn evaluation_outputs() {
    let data = tempfile::tempdir().unwrap();
    gen_data_sized(data.path(), "64");
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let d = p(data.path());
    let eval = |name: &str, seed: &str| {
        ok(&[
            "eval",
            "--oracle",
            "--data",
            d,
            "--tuples",
            "200",
            "--seed",
            seed,
            "--out",
            p(&w.join(name)),
        ]);
        fs::read_to_string(w.join(name).join("report.toml")).unwrap()
    };
    let a = eval("a", "1");
    assert_eq!(a, eval("b", "1"));
    assert_ne!(a, eval("c", "2"));
    let report = aflow::eval::EvalReport::from_toml(&a).unwrap();
    assert_eq!(report.mode, "analytic-oracle");
    assert!(report.overall_l1.unwrap() < RESAMPLING_L1_BOUND);

    assert_eq!(
        code(&[
            "eval",
            "--oracle",
            "--data",
            d,
            "--tuples",
            "0",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "eval",
            "--oracle",
            "--data",
            d,
            "--split",
            "val",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "confusion",
            "--oracle",
            "--data",
            d,
            "--samples-per-cell",
            "0",
            "--out",
            p(&w.join("x"))
        ]),
        2
    );

    ok(&[
        "confusion",
        "--oracle",
        "--data",
        d,
        "--samples-per-cell",
        "1",
        "--out",
        p(&w.join("cm")),
    ]);
    assert!(fs::read_to_string(w.join("cm/confusion.toml"))
        .unwrap()
        .contains("values"));
    assert!(Raster::load_png(&w.join("cm/confusion.png")).is_ok());

    let multi = zero_head_checkpoint(w, TrainMode::MultiFlow);
    assert_eq!(
        code(&["confusion", "--ckpt", p(&multi), "--data", d, "--out", p(&w.join("x"))]),
        1
    );
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            p(&multi),
            "--data",
            d,
            "--tuples",
            "50",
            "--out",
            p(&w.join("x"))
        ]),
        1
    );
    let small = tempfile::tempdir().unwrap();
    gen_data(small.path());
    ok(&[
        "eval",
        "--ckpt",
        p(&multi),
        "--data",
        p(small.path()),
        "--tuples",
        "50",
        "--out",
        p(&w.join("multi")),
    ]);
}
