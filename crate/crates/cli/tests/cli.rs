//! End-to-end runs of the `semseg` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn semseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semseg"))
        .args(args)
        .env("SEMSEG_LOG", "error")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SCENE: &str = "[scene]\nheight = 16\nwidth = 16\nmin_size = 3\nmax_size = 5\nmax_objects = 2\nbackground_clicks = 2\n";
const TRAIN: &str = "\n[train]\nepochs = 2\nramp_epochs = 1\nbatch_size = 2\ncrf_downsample = 1\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(extra_train: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), format!("{SCENE}{TRAIN}{extra_train}")).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        s(&self.path("config.toml"))
    }

    fn gen(&self, out: &str, count: usize, seed: u64) -> Output {
        semseg(&[
            "gen-data",
            "--config",
            &self.config(),
            "--out",
            &s(&self.path(out)),
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
        ])
    }

    fn train(&self, data: &str, out: &str) -> Output {
        semseg(&[
            "train",
            "--config",
            &self.config(),
            "--data",
            &s(&self.path(data)),
            "--out",
            &s(&self.path(out)),
        ])
    }
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_every_file_and_is_reproducible() {
    let f = Fixture::new("");
    let o = f.gen("a", 10, 3);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("10 scenes"), "{}", stdout(&o));
    let names = sorted_names(&f.path("a"));
    for i in 0..10 {
        for suffix in [".f32", ".f32.json", ".mask.pgm", ".clicks.json"] {
            assert!(names.contains(&format!("{i:06}{suffix}")), "missing {i:06}{suffix}");
        }
    }
    assert!(f.gen("b", 10, 3).status.success());
    for name in &names {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn invalid_spec_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[scene]\nclasses = 1\n").unwrap();
    let o = semseg(&["gen-data", "--config", &s(&cfg), "--out", &s(&dir.path().join("d")), "--count", "2", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));

    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = semseg(&["gen-data", "--config", &s(&cfg), "--out", &s(&dir.path().join("d")), "--count", "2", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(semseg(&["train"]).status.code(), Some(1));
    assert_eq!(semseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(semseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_modules_train_eval_report() {
    let f = Fixture::new("modules = 0\nval_count = 2\n");
    assert!(f.gen("data", 6, 1).status.success());
    let o = f.train("data", "run");
    assert!(o.status.success(), "{}", stderr(&o));
    let names = sorted_names(&f.path("run"));
    assert_eq!(
        names,
        [
            "resolved_config.toml",
            "run_info.json",
            "stage0_student.ckpt",
            "stage0_teacher.ckpt",
            "train_log.csv"
        ]
    );
    let log = fs::read_to_string(f.path("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "stage,epoch,pce,pcons,crf,pseudo,lambda_pcons,lr,val_miou");
    assert_eq!(log.lines().count(), 3);
    let resolved = fs::read_to_string(f.path("run/resolved_config.toml")).unwrap();
    assert!(resolved.contains("lambda_pcons = 200.0") && resolved.contains("modules = 0"));

    let ckpt = f.path("run/stage0_student.ckpt");
    let o = semseg(&["eval", "--checkpoint", &s(&ckpt), "--data", &s(&f.path("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("mIoU: ")).unwrap().to_string();
    let value = line.trim_start_matches("mIoU: ");
    assert_eq!(value.split('.').nth(1).unwrap().len(), 4, "{line}");
    assert!((0.0..=1.0).contains(&value.parse::<f64>().unwrap()));
    let csv = fs::read_to_string(f.path("run/stage0_student.eval.csv")).unwrap();
    assert!(csv.starts_with("class,iou\n") && csv.lines().last().unwrap().starts_with("mean,"));

    let grid = f.path("report/grid.ppm");
    let o = semseg(&["report", "--run", &s(&f.path("run")), "--out", &s(&grid)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(grid.is_file());
    let curve = fs::read_to_string(f.path("report/grid.curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn train_twice_gives_identical_outputs() {
    let f = Fixture::new("modules = 1\n");
    assert!(f.gen("data", 4, 2).status.success());
    for out in ["a", "b"] {
        let o = f.train("data", out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["train_log.csv", "stage0_student.ckpt", "stage0_teacher.ckpt", "stage1_student.ckpt", "stage1_teacher.ckpt"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_data_leaves_no_outputs() {
    let f = Fixture::new("");
    let o = f.train("nowhere", "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(!f.path("run").exists());
}

#[test]
fn class_mismatch_is_named() {
    let f = Fixture::new("modules = 0\nuse_pseudo = false\n");
    assert!(f.gen("data4", 3, 1).status.success());
    assert!(f.train("data4", "run").status.success());
    let five = tempfile::tempdir().unwrap();
    let cfg = five.path().join("c.toml");
    fs::write(&cfg, format!("{SCENE}classes = 5\n")).unwrap();
    let o = semseg(&["gen-data", "--config", &s(&cfg), "--out", &s(&five.path().join("d")), "--count", "3", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = semseg(&["eval", "--checkpoint", &s(&f.path("run/stage0_student.ckpt")), "--data", &s(&five.path().join("d"))]);
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(err.contains("4 classes") && err.contains("5"), "{err}");
}

#[test]
fn malformed_checkpoint_is_reported() {
    let f = Fixture::new("");
    assert!(f.gen("data", 2, 1).status.success());
    let bad = f.path("bad.ckpt");
    fs::write(&bad, "not a checkpoint\n").unwrap();
    let o = semseg(&["eval", "--checkpoint", &s(&bad), "--data", &s(&f.path("data"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.ckpt"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_table_and_run_dirs() {
    let extra = "modules = 0\nval_count = 2\n\n[ablation]\nseeds = [[1, 2, 3]]\n\n\
[[ablation.configs]]\nname = \"pce\"\nuse_crf = false\nuse_pcons = false\nuse_pseudo = false\n\n\
[[ablation.configs]]\nname = \"full\"\nuse_pseudo = false\n";
    let f = Fixture::new(extra);
    assert!(f.gen("data", 5, 1).status.success());
    let o = semseg(&[
        "ablate",
        "--config",
        &f.config(),
        "--data",
        &s(&f.path("data")),
        "--out",
        &s(&f.path("ab")),
        "--jobs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(f.path("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,config,ancillary_seed,primary_seed,augment_seed,miou,stddev,status");
    assert_eq!(lines.len(), 1 + 2 + 2);
    for run in ["pce/seeds-1-2-3", "full/seeds-1-2-3"] {
        let dir = f.path("ab").join(run);
        assert!(dir.join("train_log.csv").is_file());
        assert!(dir.join("stage0_student.ckpt").is_file());
    }
    let grid = f.path("ab/full.ppm");
    let o = semseg(&["report", "--run", &s(&f.path("ab/full/seeds-1-2-3")), "--out", &s(&grid)]);
    assert!(o.status.success(), "{}", stderr(&o));
}
