use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn styleswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleswap"))
        .args(args)
        .env_remove("STYLESWAP_SEED")
        .output()
        .expect("spawn styleswap")
}

fn ok(args: &[&str]) -> Output {
    let out = styleswap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    embedders: PathBuf,
}

/// Tiny dataset, embedders and a two-step model.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let embedders = root.join("embedders.bin");
    ok(&["synth-data", "--out", s(&data), "--identities", "3", "--frames", "6", "--resolution", "16", "--seed", "3"]);
    ok(&[
        "pretrain-embedder",
        "--out",
        s(&embedders),
        "--resolution",
        "16",
        "--identity-steps",
        "2",
        "--pose-steps",
        "2",
        "--pool-identities",
        "8",
        "--batch-size",
        "4",
    ]);
    let config = root.join("train.txt");
    fs::write(
        &config,
        format!(
            "# tiny run\ndata = {}\nembedders = {}\nchannels = 4,4,4\nstyle_dim = 8\nsteps = 100\nbatch_size = 2\nmask_stage_start = 1\nsample_interval = 0\n",
            s(&data),
            s(&embedders)
        ),
    )
    .unwrap();
    let run = root.join("run");
    ok(&["train", "--config", s(&config), "--steps", "2", "--out", s(&run)]);
    Fixture {
        ckpt: run.join("final.bin"),
        _dir: dir,
        root,
        data,
        embedders,
    }
}

fn frame(f: &Fixture, id: usize, k: usize) -> PathBuf {
    f.data.join("images").join(format!("{id:04}")).join(format!("{k:04}.png"))
}

#[test]
fn end_to_end_commands() {
    let f = fixture();
    let run = f.root.join("run");
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("steps = 2\n"), "flag overrides the file: {resolved}");
    assert!(resolved.contains("lambda_id = 10\n"));
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 2);
    assert!(f.data.join("spec.json").exists());
    assert!(f.data.join("config.txt").exists());

    // Single target.
    let out = f.root.join("swap-one");
    ok(&["swap", "--ckpt", s(&f.ckpt), "--source", s(&frame(&f, 0, 0)), "--target", s(&frame(&f, 1, 0)), "--out", s(&out)]);
    assert!(out.join("swap.png").exists());
    assert!(out.join("mask.png").exists(), "mask stage was active");
    assert!(out.join("config.txt").exists());

    // Directory of five targets, names preserved.
    let frames = f.root.join("frames");
    fs::create_dir_all(&frames).unwrap();
    let names = ["a.png", "b.png", "c.png", "d.png", "e.png"];
    for (k, n) in names.iter().enumerate() {
        fs::copy(frame(&f, 2, k), frames.join(n)).unwrap();
    }
    let out_dir = f.root.join("swap-dir");
    ok(&["swap", "--ckpt", s(&f.ckpt), "--source", s(&frame(&f, 0, 0)), "--target", s(&frames), "--out", s(&out_dir)]);
    for n in names {
        assert!(out_dir.join("swap").join(n).exists(), "{n}");
        assert!(out_dir.join("mask").join(n).exists(), "{n}");
    }

    // Zero-iteration inversion returns 2L copies of w_s, so swapping with it
    // reproduces the plain swap exactly.
    let styles = f.root.join("init.bin");
    ok(&[
        "invert",
        "--ckpt",
        s(&f.ckpt),
        "--source",
        s(&frame(&f, 0, 0)),
        "--target",
        s(&frame(&f, 1, 0)),
        "--pool",
        s(&f.data.join("images").join("0002")),
        "--iterations",
        "0",
        "--out",
        s(&styles),
    ]);
    let with_styles = f.root.join("swap-styles");
    ok(&[
        "swap",
        "--ckpt",
        s(&f.ckpt),
        "--source",
        s(&frame(&f, 0, 0)),
        "--target",
        s(&frame(&f, 1, 0)),
        "--styles",
        s(&styles),
        "--out",
        s(&with_styles),
    ]);
    assert_eq!(fs::read(with_styles.join("swap.png")).unwrap(), fs::read(out.join("swap.png")).unwrap());

    // One-to-many inversion writes styles, trace and resolved config.
    let many = f.root.join("many.bin");
    ok(&[
        "invert",
        "--ckpt",
        s(&f.ckpt),
        "--source",
        s(&frame(&f, 0, 0)),
        "--mode",
        "one2many",
        "--pool",
        s(&f.data.join("images")),
        "--iterations",
        "3",
        "--out",
        s(&many),
    ]);
    let trace = fs::read_to_string(f.root.join("many.bin.trace.jsonl")).unwrap();
    let iterations: Vec<u64> = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iteration"].as_u64().unwrap())
        .collect();
    assert_eq!(iterations, vec![1, 2, 3]);
    let cfg = fs::read_to_string(f.root.join("many.bin.config.txt")).unwrap();
    assert!(cfg.contains("mode = one2many\n") && cfg.contains("iterations = 3\n"));

    // Evaluation report with provenance.
    let report = f.root.join("report.json");
    ok(&[
        "eval",
        "--ckpt",
        s(&f.ckpt),
        "--data",
        s(&f.data),
        "--embedders",
        s(&f.embedders),
        "--swaps",
        "70",
        "--recon-frames",
        "6",
        "--out",
        s(&report),
    ]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["report"]["sample_count"], 70);
    assert_eq!(doc["provenance"]["checkpoint_sha256"].as_str().unwrap().len(), 64);
    let rate = doc["report"]["id_retrieval_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn unknown_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "stepz = 100\n").unwrap();
    let out = styleswap(&["synth-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn missing_required_key_and_bad_inputs_fail() {
    let out = styleswap(&["synth-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`out`"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = styleswap(&["swap", "--ckpt", s(&missing), "--source", s(&missing), "--target", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let bogus = dir.path().join("bogus.bin");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = styleswap(&["swap", "--ckpt", s(&bogus), "--source", s(&bogus), "--target", s(&bogus), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment_unless_given() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], out: &Path| {
        let mut args = vec!["synth-data", "--identities", "2", "--frames", "2", "--resolution", "16", "--out", s(out)];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_styleswap"))
            .args(&args)
            .env("STYLESWAP_SEED", "41")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("config.txt")).unwrap()
    };
    assert!(run(&[], &dir.path().join("a")).contains("seed = 41\n"));
    assert!(run(&["--seed", "5"], &dir.path().join("b")).contains("seed = 5\n"));
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth-data", "pretrain-embedder", "train", "swap", "invert", "eval"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
