//! End-to-end runs of the `cmt` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
d_model = 8
heads = 2
mlp_hidden = 8
ffn_hidden = 8
decoder_layers = 2
num_queries = 12
bev_cells = 8,8
pillar_channels = 4
depth_bins = 4
cameras = 2
image_width = 16
image_height = 16
clutter_points = 100
max_boxes = 3
dn_groups = 2
n_train = 4
n_val = 2
epochs = 1
";

fn cmt(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmt"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("CMT_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("cmt runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        cmt(&self.config, args)
    }

    fn data(&self) -> PathBuf {
        let data = self.path("data");
        if !data.exists() {
            ok(&self.run(&["gen-data", "--out", data.to_str().unwrap()]));
        }
        data
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let data = self.data();
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        ok(&self.run(&args));
        out
    }
}

/// Relative path and contents of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let f = Fixture::new();
    let (a, b) = (f.path("a"), f.path("b"));
    for dir in [&a, &b] {
        let out = f.run(&[
            "gen-data",
            "--scenes",
            "200",
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
        ]);
        ok(&out);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(
        ta.iter()
            .filter(|(p, _)| p.to_string_lossy().starts_with("train_"))
            .count(),
        200
    );
    assert!(ta == tb, "gen-data output differs between identical runs");
}

#[test]
fn gen_data_with_zero_scenes_writes_an_empty_index() {
    let f = Fixture::new();
    let out_dir = f.path("empty");
    ok(&f.run(&[
        "gen-data",
        "--scenes",
        "0",
        "--val",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(fs::read_to_string(out_dir.join("index.txt")).unwrap(), "");
    assert!(out_dir.join("manifest.txt").exists());
}

#[test]
fn gen_data_refuses_a_non_empty_directory_without_force() {
    let f = Fixture::new();
    let data = f.data();
    let out = f.run(&["gen-data", "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    ok(&f.run(&["gen-data", "--force", "--out", data.to_str().unwrap()]));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let f = Fixture::new();
    let out = f.train("run0", &["--epochs", "0"]);
    let ckpts: Vec<_> = fs::read_dir(out.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert!(out.join("checkpoints/step_00000000").is_dir());
    assert!(!out.join("final").exists());
    assert_eq!(lines(&out.join("log.csv")).len(), 1);
}

#[test]
fn log_has_one_row_per_step_plus_header() {
    let f = Fixture::new();
    let out = f.train("run", &["--epochs", "2", "--set", "batch_size=2"]);
    // 4 scenes, batch 2, 2 epochs.
    let log = lines(&out.join("log.csv"));
    assert_eq!(log.len(), 4 + 1);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("arg.steps = 4"));
    assert!(manifest.contains("seed.train = "));
    assert!(manifest.contains("final/"), "artifact hashes list the final checkpoint");
}

#[test]
fn zero_mask_ratios_equal_vanilla_training() {
    let f = Fixture::new();
    let plain = f.train("plain", &[]);
    let masked = f.train("masked", &["--mask-modal", "0", "0"]);
    assert_eq!(
        fs::read(plain.join("log.csv")).unwrap(),
        fs::read(masked.join("log.csv")).unwrap()
    );
    assert!(tree(&plain.join("final")) == tree(&masked.join("final")));
}

#[test]
fn robustness_rows_and_both_row_matches_eval() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let ckpt = run.join("final");
    let data = f.data();
    let (rob, ev) = (f.path("rob"), f.path("eval"));
    ok(&f.run(&[
        "robustness",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        rob.to_str().unwrap(),
    ]));
    ok(&f.run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]));
    let rows = lines(&rob.join("robustness.csv"));
    // Header, then both / camera miss / LiDAR miss / one per camera.
    assert_eq!(rows.len(), 1 + 3 + 2);
    let both = rows.iter().find(|r| r.starts_with("both,")).unwrap();
    let eval_row = &lines(&ev.join("summary.csv"))[1];
    assert_eq!(both.split_once(',').unwrap().1, eval_row.split_once(',').unwrap().1);
}

#[test]
fn ablation_and_attention_dump_run() {
    let f = Fixture::new();
    let data = f.data();
    let abl = f.path("abl");
    ok(&f.run(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        abl.to_str().unwrap(),
    ]));
    let rows = lines(&abl.join("ablation.csv"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_denoise", "query_pe_image", "query_pe_bev"]);

    let dump = f.path("dump");
    let ckpt = abl.join("full/final");
    ok(&f.run(&[
        "dump-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
        "--queries",
        "0,3",
    ]));
    assert!(dump.join("manifest.txt").exists());
    assert!(fs::read_dir(&dump).unwrap().count() > 2);
}

#[test]
fn errors_map_to_exit_categories() {
    let f = Fixture::new();
    let missing = f.path("missing");
    let out = f.run(&["--bogus-flag", "gen-data"]);
    assert_eq!(out.status.code(), Some(2), "usage error");
    let out = f.run(&["--set", "no_such_key=1", "gen-data", "--out", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "configuration error");
    let out = f.run(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        f.path("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "I/O error");
    let bad = f.path("bad_ckpt");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("manifest.txt"), "not a checkpoint\n").unwrap();
    let data = f.data();
    let out = f.run(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        f.path("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5), "corrupt checkpoint");
}

#[test]
fn environment_names_the_default_config_and_flags_override_it() {
    let f = Fixture::new();
    let out_dir = f.path("env");
    let out = Command::new(env!("CARGO_BIN_EXE_cmt"))
        .args(["--set", "n_val=1", "gen-data", "--out", out_dir.to_str().unwrap()])
        .env("CMT_CONFIG", &f.config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    let index = fs::read_to_string(out_dir.join("index.txt")).unwrap();
    assert_eq!(index.lines().filter(|l| l.starts_with("train ")).count(), 4);
    assert_eq!(index.lines().filter(|l| l.starts_with("val ")).count(), 1);
}

#[test]
fn help_documents_every_configuration_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_cmt")).arg("--help").output().unwrap();
    ok(&out);
    let help = String::from_utf8(out.stdout).unwrap();
    for (key, _) in cmt_core::config::KEYS {
        assert!(help.contains(key), "--help is missing `{key}`");
    }
    assert!(help.contains("CMT_CONFIG"));
}

#[test]
fn threads_flag_is_accepted() {
    let f = Fixture::new();
    let out_dir = f.path("t");
    ok(&f.run(&["--threads", "1", "gen-data", "--out", out_dir.to_str().unwrap()]));
}
