use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orthotune::checkpoint::Container;
use orthotune::dataset::harmonic_mean;
use tempfile::TempDir;

const TINY: &str = "\
seed = 5
classes = 4
shots = 4
test_per_class = 10
embed_dim = 8
layers = 1
heads = 2
ffn_hidden = 12
context_len = 4
pretrain_steps = 150
pretrain_batch_size = 16
max_epoch = 3
learning_rate = 0.01
warmup_lr = 0.001
";

fn orthotune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthotune")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = orthotune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    orthotune(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, out: &str, seed: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&["pretrain", "--config", s(&self.path("tiny.cfg")), "--seed", seed, "--out", s(&dir)]);
        dir
    }

    fn finetune(&self, pre: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let ckpt = pre.join("checkpoint.ocrk");
        let data = pre.join("dataset.ocrk");
        let cfg = self.path("tiny.cfg");
        let mut args = vec![
            "finetune",
            "--checkpoint",
            s(&ckpt),
            "--dataset",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&dir),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    }

    fn eval(&self, ckpt: &Path, adapters: Option<&Path>, data: &Path, out: &str) -> Vec<f64> {
        let dir = self.path(out);
        let mut args = vec!["eval", "--checkpoint", s(ckpt), "--dataset", s(data), "--out", s(&dir)];
        if let Some(a) = adapters {
            args.extend(["--adapters", s(a)]);
        }
        ok(&args);
        let text = fs::read_to_string(dir.join("report.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("base,new,hm,trainable_params"));
        lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
    }
}

#[test]
fn pipeline_round_trip() {
    let ws = Workspace::new();
    let pre = ws.pretrain("nested/pre", "5");
    let ckpt = pre.join("checkpoint.ocrk");
    let data = pre.join("dataset.ocrk");
    let manifest = fs::read_to_string(pre.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command=pretrain"));
    assert!(manifest.contains("config.seed=5"));

    let again = ws.pretrain("pre-again", "5");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("checkpoint.ocrk")).unwrap());

    let zero_shot = ws.eval(&ckpt, None, &data, "zs");
    // Two new classes: chance is 50 %.
    assert!(zero_shot[1] > 50.0, "{zero_shot:?}");
    assert_eq!(zero_shot[3], 0.0);

    let tuned = ws.finetune(&pre, "tuned", &[]);
    let adapters = tuned.join("adapters.ocrk");
    let c = Container::read(&adapters).unwrap();
    assert_eq!(c.meta("kind").unwrap(), "adapters");
    assert!(c.tensors().iter().all(|(n, _)| n.ends_with(".skew")));
    let metrics = fs::read_to_string(tuned.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,lr,"));

    let report = ws.eval(&ckpt, Some(&adapters), &data, "eval");
    assert!((report[2] - harmonic_mean(report[0], report[1])).abs() < 1e-12);
    // One 8-dim and one 12-dim adapter in each tower.
    assert_eq!(report[3], (2 * (8 * 7 / 2 + 12 * 11 / 2)) as f64);

    ok(&["merge", "--checkpoint", s(&ckpt), "--adapters", s(&adapters), "--out", s(&ws.path("merged"))]);
    let merged = ws.path("merged").join("merged.ocrk");
    let merged_report = ws.eval(&merged, None, &data, "eval-merged");
    assert_eq!(&merged_report[..3], &report[..3]);
    assert_eq!(merged_report[3], 0.0);
}

#[test]
fn identity_adapters_change_nothing() {
    let ws = Workspace::new();
    let pre = ws.pretrain("pre", "6");
    let ckpt = pre.join("checkpoint.ocrk");
    let data = pre.join("dataset.ocrk");
    let tuned = ws.finetune(&pre, "tuned", &["--lambda1", "0", "--lambda2", "0"]);
    let adapters = tuned.join("adapters.ocrk");
    let zs = ws.eval(&ckpt, None, &data, "zs");
    let with = ws.eval(&ckpt, Some(&adapters), &data, "with");
    assert_eq!(&zs[..3], &with[..3]);

    ok(&["merge", "--checkpoint", s(&ckpt), "--adapters", s(&adapters), "--out", s(&ws.path("m"))]);
    let base = Container::read(&ckpt).unwrap();
    let merged = Container::read(&ws.path("m").join("merged.ocrk")).unwrap();
    assert_eq!(base.tensors(), merged.tensors());
}

#[test]
fn finetune_variants_and_determinism() {
    let ws = Workspace::new();
    let pre = ws.pretrain("pre", "7");
    let a = ws.finetune(&pre, "a", &["--seed", "3"]);
    let b = ws.finetune(&pre, "b", &["--seed", "3"]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("adapters.ocrk")).unwrap(), fs::read(b.join("adapters.ocrk")).unwrap());

    let low = ws.finetune(&pre, "low", &["--adapter", "lowrank"]);
    let c = Container::read(&low.join("adapters.ocrk")).unwrap();
    assert_eq!(c.meta("adapter").unwrap(), "lowrank");

    let ablate = ws.finetune(&pre, "ablate", &["--lambda2", "0", "--cutout-min", "0", "--cutout-max", "0"]);
    let text = fs::read_to_string(ablate.join("metrics.csv")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        // Columns: step, epoch, lr, ce, cutout ce, kl, cutout kl, total.
        assert_eq!(v[3], v[4]);
        assert_eq!(v[7], 1.5 * (v[3] + v[4]));
    }

    let many = ws.finetune(&pre, "many", &["--seeds", "2"]);
    for seed in ["seed-5", "seed-6"] {
        assert!(many.join(seed).join("adapters.ocrk").exists());
    }
    let summary = fs::read_to_string(many.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let pre = ws.pretrain("pre", "8");
    let other = ws.pretrain("other", "9");
    let ckpt = pre.join("checkpoint.ocrk");
    let data = pre.join("dataset.ocrk");
    let adapters = ws.finetune(&pre, "tuned", &[]).join("adapters.ocrk");
    let out = ws.path("out");

    let missing = ws.path("missing.cfg");
    assert_eq!(code(&["pretrain", "--config", s(&missing), "--out", s(&out)]), 3);

    fs::write(ws.path("bad.cfg"), "epochs_typo = 3\n").unwrap();
    assert_eq!(code(&["pretrain", "--config", s(&ws.path("bad.cfg")), "--out", s(&out)]), 2);

    let foreign = other.join("checkpoint.ocrk");
    assert_eq!(
        code(&["eval", "--checkpoint", s(&foreign), "--adapters", s(&adapters), "--dataset", s(&data), "--out", s(&out)]),
        4
    );
    assert_eq!(code(&["merge", "--checkpoint", s(&foreign), "--adapters", s(&adapters), "--out", s(&out)]), 4);

    let junk = ws.path("junk.ocrk");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&junk), "--dataset", s(&data), "--out", s(&out)]), 4);
    assert_eq!(code(&["eval", "--checkpoint", s(&data), "--dataset", s(&data), "--out", s(&out)]), 4);

    let base = [
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--config",
        "",
        "--out",
        s(&out),
    ];
    let cfg = ws.path("tiny.cfg");
    let with = |extra: &[&str]| {
        let mut args = base.to_vec();
        args[6] = s(&cfg);
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(with(&["--seeds", "0"]), 2);
    assert_eq!(with(&["--lambda2", "-1"]), 2);
    assert_eq!(with(&["--cutout-min", "3", "--cutout-max", "1"]), 2);
    assert_eq!(with(&["--cutout-max", "17"]), 2);

    let mut no_data = base.to_vec();
    no_data[6] = s(&cfg);
    let gone = ws.path("gone.ocrk");
    no_data[4] = s(&gone);
    assert_eq!(code(&no_data), 3);
}
