use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const KEY: &str = "00112233445566778899aabbccddeeff";

/// Writes an MNIST-shaped split where class `c` lights up a bar at row `2c`.
fn write_split(dir: &Path, prefix: &str, n: usize) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend(d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let c = (i * 7) % 10;
        labels.push(c as u8);
        for r in 0..28 {
            for col in 0..28 {
                let on = r / 2 == c + 2 && (4..24).contains(&col);
                let noise = ((i * 31 + r * 17 + col * 13) % 23) as u8;
                images.push(if on { 230 } else { noise });
            }
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(pipeline: &str, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("mnist");
        fs::create_dir(&data).unwrap();
        write_split(&data, "train", 200);
        write_split(&data, "t10k", 30);
        let cfg = format!(
            r#"seed = 1

[dataset]
kind = "mnist"
path = "{}"

[model]
architecture = "mnist"

{pipeline}

[train]
epochs = 1
batch_size = 50
lr = 0.05

[attack]
epsilon = 0.2
steps = 3
mode = "blind"

[eval]
batch_size = 10
epsilons = [0.0, 0.1, 0.3]
batch_sizes = [5, 10, 30]
histogram_samples = 20
{extra}
"#,
            data.display()
        );
        fs::write(dir.path().join("exp.toml"), cfg).unwrap();
        Fixture { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str], key: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_blindguard"));
        cmd.args(args).env_remove("BLINDGUARD_KEY");
        if let Some(k) = key {
            cmd.env("BLINDGUARD_KEY", k);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str], key: Option<&str>) -> Output {
        let out = self.run(args, key);
        assert!(
            out.status.success(),
            "{args:?} failed\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

const BLIND: &str = r#"[pipeline]
blind = true
transforms = [
  { kind = "tanh_filter" },
  { kind = "batch_norm" },
  { kind = "quantize", k = 15, range = [-3.0, 3.0] },
  { kind = "thermometer", k = 15 },
]"#;

fn args<'a>(cmd: &'a str, f: &'a Fixture, out: &'a Path) -> Vec<String> {
    vec![
        cmd.to_string(),
        "--config".into(),
        f.config().display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn keygen_prints_a_128_bit_key() {
    let f = Fixture::new("", "");
    let out = f.ok(&["keygen"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    let key = text.trim();
    assert_eq!(key.len(), 32);
    assert!(key.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let f = Fixture::new("", "");
    let cfg = f.config().display().to_string();
    assert_eq!(f.run(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(f.run(&[], None).status.code(), Some(2));
    assert_eq!(
        f.run(&["eval", "--config", &cfg, "--bogus"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        f.run(&["eval", "--config", "/no/such.toml"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        f.run(&["eval", "--config", &cfg, "--mode", "sideways"], None)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        f.run(&["eval", "--config", &cfg, "--threads", "0"], None).status.code(),
        Some(2)
    );
    // No output directory anywhere.
    assert_eq!(f.run(&["eval", "--config", &cfg], None).status.code(), Some(2));
    let out = f.out("o").display().to_string();
    assert_eq!(
        f.run(&["eval", "--config", &cfg, "--out", &out, "--key", "xyz"], None)
            .status
            .code(),
        Some(2)
    );
    let unknown = Fixture::new("", "surprise = true");
    let cfg = unknown.config().display().to_string();
    let run = unknown.run(&["train", "--config", &cfg, "--out", &out], None);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("surprise"));
    assert_eq!(f.run(&["--help"], None).status.code(), Some(0));
}

#[test]
fn missing_or_wrong_key_is_denied() {
    let f = Fixture::new(BLIND, "");
    let out = f.out("run");
    let train = args("train", &f, &out);
    let denied = f.run(&strs(&train), None);
    assert_eq!(denied.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&denied.stderr).contains("access denied"));
    f.ok(&strs(&train), Some(KEY));
    let eval = args("eval", &f, &out);
    assert_eq!(f.run(&strs(&eval), None).status.code(), Some(1));
    let wrong = f.run(&strs(&eval), Some("ffeeddccbbaa99887766554433221100"));
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("access denied"));
    let hist = args("hist", &f, &out);
    assert_eq!(f.run(&strs(&hist), None).status.code(), Some(1));
}

#[test]
fn zero_budget_eval_reports_equal_accuracies() {
    let f = Fixture::new(BLIND, "");
    let out = f.out("run");
    f.ok(&strs(&args("train", &f, &out)), Some(KEY));
    let mut eval = args("eval", &f, &out);
    eval.extend(["--mode".into(), "full".into()]);
    // epsilon comes from the config; override through a second config.
    let text = fs::read_to_string(f.config())
        .unwrap()
        .replace("epsilon = 0.2", "epsilon = 0.0");
    fs::write(f.config(), text).unwrap();
    f.ok(&strs(&eval), Some(KEY));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["clean_acc"], report["attack_acc"]);
    assert_eq!(report["alpha"].as_f64().unwrap(), 50.0);
}

#[test]
fn identical_runs_emit_identical_reports() {
    let f = Fixture::new(BLIND, "");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = f.out(name);
        f.ok(&strs(&args("train", &f, &out)), Some(KEY));
        for cmd in ["eval", "attack", "sweep-eps", "sweep-batch", "hist"] {
            f.ok(&strs(&args(cmd, &f, &out)), Some(KEY));
        }
        let files = [
            "eval.json",
            "attack.json",
            "sweep-eps.json",
            "sweep-eps.csv",
            "sweep-batch.json",
            "hist.json",
        ];
        reports.push(files.map(|n| fs::read(out.join(n)).unwrap()));
        assert_eq!(
            fs::read(out.join("model.ckpt")).unwrap(),
            fs::read(f.out("a").join("model.ckpt")).unwrap()
        );
    }
    assert_eq!(reports[0], reports[1]);
    // A different seed changes the outcome.
    let out = f.out("c");
    let mut train = args("train", &f, &out);
    train.extend(["--seed".into(), "9".into()]);
    f.ok(&strs(&train), Some(KEY));
    assert_ne!(
        fs::read(out.join("model.ckpt")).unwrap(),
        fs::read(f.out("a").join("model.ckpt")).unwrap()
    );
}

#[test]
fn outputs_have_the_documented_shape() {
    let f = Fixture::new(BLIND, "");
    let out = f.out("run");
    f.ok(&strs(&args("train", &f, &out)), Some(KEY));
    f.ok(&strs(&args("sweep-eps", &f, &out)), Some(KEY));
    f.ok(&strs(&args("sweep-batch", &f, &out)), Some(KEY));
    f.ok(&strs(&args("hist", &f, &out)), Some(KEY));
    let csv = fs::read_to_string(out.join("sweep-eps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3 + 1);
    let csv = fs::read_to_string(out.join("sweep-batch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3 + 1);
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sweep-eps.json")).unwrap()).unwrap();
    assert_eq!(sweep["epsilon_sweep"][0]["attack_acc"], sweep["clean_acc"]);
    let hist: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("hist.json")).unwrap()).unwrap();
    let labels: Vec<&str> = hist["histograms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["raw", "after tanh_filter", "after batch_norm"]);
    for h in hist["histograms"].as_array().unwrap() {
        let total: u64 = h["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum();
        assert_eq!(total, 20 * 28 * 28);
    }
    // The resolved config is echoed and carries no key material.
    for name in ["config.resolved.toml", "sweep-eps.json", "hist.json", "model.ckpt"] {
        let bytes = fs::read(out.join(name)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains(KEY), "{name}");
    }
    let echoed = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("tanh_filter") && echoed.contains("[train]"));
}

#[test]
fn raw_model_runs_continuous_attacks() {
    let f = Fixture::new("", "");
    let out = f.out("run");
    f.ok(&strs(&args("train", &f, &out)), None);
    let mut attack = args("attack", &f, &out);
    attack.extend(["--attack".into(), "pgd".into(), "--mode".into(), "full".into()]);
    f.ok(&strs(&attack), None);
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("attack.json")).unwrap()).unwrap();
    assert_eq!(a["kind"], "pgd");
    assert_eq!(a["examples"], 30);
    // LS-PGA needs an encoding.
    let mut lspga = args("attack", &f, &out);
    lspga.extend(["--mode".into(), "full".into()]);
    assert_eq!(f.run(&strs(&lspga), None).status.code(), Some(1));
}
