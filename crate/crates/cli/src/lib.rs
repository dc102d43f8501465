//! The `blindguard` command line: training, attacks, evaluation reports and
//! sweeps driven by a TOML experiment file.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use blindguard_core::attacks::{AttackKind, AttackMode};
use blindguard_core::blind::{BlindGate, BlindKey, TrainingAlgorithm};
use blindguard_core::checkpoint::Checkpoint;
use blindguard_core::data::{load_cifar10_bin, load_mnist_dir, Dataset};
use blindguard_core::evaluation::{
    batch_size_sweep, emit_report, epsilon_sweep, pixel_histogram, run_attack, Defender, EvalReport, Histogram,
    ReportFormat,
};
use blindguard_core::model::Model;
use blindguard_core::preprocess::{Pipeline, Transform};
use blindguard_core::train::train_with;
use blindguard_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::ExperimentConfig;

pub const KEY_ENV: &str = "BLINDGUARD_KEY";

#[derive(Parser, Debug)]
#[command(name = "blindguard", version, about = "Blind pre-processing defense experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.ckpt`.
    Train(Common),
    /// Attack a trained model and write `attack.json`.
    Attack(Common),
    /// Clean and attacked accuracy with their ratio.
    Eval(Common),
    /// Attacked accuracy over `eval.epsilons`.
    SweepEps(Common),
    /// Clean and attacked accuracy over `eval.batch_sizes`.
    SweepBatch(Common),
    /// Pixel histograms after each continuous pipeline stage.
    Hist(Common),
    /// Print a fresh 128-bit key.
    Keygen,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// 32 hex digits.
    #[arg(long, env = KEY_ENV, hide_env_values = true)]
    key: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AttackMode>,
    /// fgsm, pgd or lspga; overrides `eval.attack`.
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 when an experiment fails, 2 for usage or configuration errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, cmd) = match cli.command {
        Command::Keygen => {
            println!("{}", BlindKey::generate(&mut rand::rng()).to_hex());
            return Ok(());
        }
        Command::Train(c) => (c, Cmd::Train),
        Command::Attack(c) => (c, Cmd::Attack),
        Command::Eval(c) => (c, Cmd::Eval),
        Command::SweepEps(c) => (c, Cmd::SweepEps),
        Command::SweepBatch(c) => (c, Cmd::SweepBatch),
        Command::Hist(c) => (c, Cmd::Hist),
    };
    let session = Session::open(&common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads as usize)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cmd {
        Cmd::Train => session.train(),
        Cmd::Attack => session.attack(),
        Cmd::Eval => session.eval(),
        Cmd::SweepEps => session.sweep_eps(),
        Cmd::SweepBatch => session.sweep_batch(),
        Cmd::Hist => session.hist(),
    })
}

#[derive(Clone, Copy)]
enum Cmd {
    Train,
    Attack,
    Eval,
    SweepEps,
    SweepBatch,
    Hist,
}

/// Stand-in key for pipelines that are not hidden.
const PUBLIC_KEY: [u8; 16] = [0; 16];

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    key: Option<BlindKey>,
    attack: AttackKind,
}

/// Model, gate and key as the defender holds them.
struct Deployed {
    model: Model,
    training: TrainingAlgorithm,
    gate: Option<BlindGate>,
    key: BlindKey,
}

impl Deployed {
    fn defender(&self) -> Defender<'_> {
        match &self.gate {
            Some(g) => Defender::gated(&self.model, self.training, g, &self.key),
            None => Defender::undefended(&self.model, self.training),
        }
    }
}

impl Session {
    fn open(common: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(s) = common.seed {
            cfg.override_seed(s);
        }
        if let Some(m) = common.mode {
            cfg.attack.mode = m;
        }
        if let Some(a) = common.attack {
            cfg.eval.attack = a;
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
        cfg.out = Some(out.clone());
        let key = common.key.as_deref().map(BlindKey::from_hex).transpose()?;
        fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
        write(&out.join("config.resolved.toml"), &cfg.to_toml()?)?;
        Ok(Session {
            attack: cfg.eval.attack,
            cfg,
            out,
            key,
        })
    }

    fn load_split(&self, train: bool) -> Result<Dataset> {
        let d = &self.cfg.dataset;
        let data = match d.kind {
            config::DatasetKind::Mnist => load_mnist_dir(&d.path, train)?,
            config::DatasetKind::Cifar10 => load_cifar10_bin(&d.path, train)?,
        };
        match if train { d.train_limit } else { d.test_limit } {
            Some(n) if n < data.len() => data.take(n),
            _ => Ok(data),
        }
    }

    /// The key guarding a hidden pipeline; a missing one is a denial.
    fn secret(&self) -> Result<BlindKey> {
        self.key.clone().ok_or(Error::AccessDenied)
    }

    fn salt(&self) -> [u8; 16] {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x6b65_7973_616c_7400).random()
    }

    fn train(&self) -> Result<()> {
        let data = self.load_split(true)?;
        let pipeline = self.cfg.pipeline()?;
        let blind = self.cfg.blind();
        let key = if blind {
            self.secret()?
        } else {
            BlindKey::from_bytes(PUBLIC_KEY)
        };
        let gate = pipeline.map(|p| BlindGate::with_salt(p, &key, self.salt()));
        let arch = self.cfg.architecture(data.channels())?;
        let mut model = Model::build(arch, self.cfg.seed)?;
        let training = if self.cfg.train.adv_mix > 0.0 {
            TrainingAlgorithm::Adversarial
        } else {
            TrainingAlgorithm::Clean
        };
        let unlocked = gate.as_ref().map(|g| g.unlock(&key)).transpose()?;
        let history = train_with(&mut model, &data, unlocked, &self.cfg.train, |s| {
            println!("epoch {} loss {:.4} train acc {:.2}%", s.epoch, s.loss, s.accuracy);
        })?;
        let ckpt = Checkpoint {
            model,
            pipeline: unlocked.cloned(),
            training,
            train_config: Some(self.cfg.train.clone()),
            key_check: gate.as_ref().filter(|_| blind).map(|g| g.key_check().clone()),
        };
        let path = self.checkpoint_path();
        ckpt.save(&path)?;
        write_json(&self.out.join("history.json"), &history)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .model
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn deploy(&self, data: &Dataset) -> Result<Deployed> {
        let ckpt = Checkpoint::load(self.checkpoint_path())?;
        if let Some(p) = self.cfg.pipeline()? {
            if ckpt.pipeline.as_ref() != Some(&p) {
                return Err(Error::Consistency(
                    "configured pipeline differs from the checkpoint's".into(),
                ));
            }
        }
        ckpt.model
            .architecture()
            .check_pipeline(ckpt.pipeline.as_ref(), data.channels())?;
        let (gate, key) = match (ckpt.pipeline, ckpt.key_check) {
            (Some(p), Some(check)) => {
                let key = self.secret()?;
                let gate = BlindGate::from_key_check(p, check);
                gate.unlock(&key)?;
                (Some(gate), key)
            }
            (Some(p), None) => {
                let key = BlindKey::from_bytes(PUBLIC_KEY);
                (Some(BlindGate::with_salt(p, &key, self.salt())), key)
            }
            (None, _) => (None, BlindKey::from_bytes(PUBLIC_KEY)),
        };
        Ok(Deployed {
            model: ckpt.model,
            training: ckpt.training,
            gate,
            key,
        })
    }

    fn eval_batch(&self) -> usize {
        self.cfg.eval.batch_size
    }

    fn report(&self, clean_acc: f64, attack_acc: f64) -> EvalReport {
        EvalReport {
            clean_acc,
            attack_acc,
            config: self.cfg.echo(),
            epsilon_sweep: Vec::new(),
            batch_sweep: Vec::new(),
            histograms: Vec::new(),
        }
    }

    fn emit(&self, name: &str, report: &EvalReport) -> Result<()> {
        emit_report(report, ReportFormat::Json, self.out.join(format!("{name}.json")))?;
        emit_report(report, ReportFormat::Csv, self.out.join(format!("{name}.csv")))?;
        match report.alpha() {
            Ok(a) => println!(
                "clean {:.2}%  attacked {:.2}%  alpha {:.2}",
                report.clean_acc, report.attack_acc, a
            ),
            Err(_) => println!("clean {:.2}%  attacked {:.2}%", report.clean_acc, report.attack_acc),
        }
        Ok(())
    }

    fn attack(&self) -> Result<()> {
        let test = self.load_split(false)?;
        let d = self.deploy(&test)?;
        let outcome = run_attack(&d.defender(), &test, self.attack, &self.cfg.attack, self.eval_batch())?;
        write_json(&self.out.join("attack.json"), &outcome)?;
        println!(
            "{:?} ({:?}, eps {}) on {} examples: accuracy {:.2}%",
            outcome.kind, outcome.mode, outcome.epsilon, outcome.examples, outcome.attack_acc
        );
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        let test = self.load_split(false)?;
        let d = self.deploy(&test)?;
        let def = d.defender();
        let clean = def.clean_accuracy(&test, self.eval_batch())?;
        let attacked = run_attack(&def, &test, self.attack, &self.cfg.attack, self.eval_batch())?;
        self.emit("eval", &self.report(clean, attacked.attack_acc))
    }

    fn sweep_eps(&self) -> Result<()> {
        let test = self.load_split(false)?;
        let d = self.deploy(&test)?;
        let def = d.defender();
        let bs = self.eval_batch();
        let records = epsilon_sweep(&def, &test, self.attack, &self.cfg.eval.epsilons, &self.cfg.attack, bs)?;
        let clean = def.clean_accuracy(&test, bs)?;
        let attacked = match records.iter().find(|r| r.epsilon == self.cfg.attack.epsilon) {
            Some(r) => r.attack_acc,
            None => run_attack(&def, &test, self.attack, &self.cfg.attack, bs)?.attack_acc,
        };
        for r in &records {
            println!("eps {:.3}: {:.2}%", r.epsilon, r.attack_acc);
        }
        let mut report = self.report(clean, attacked);
        report.epsilon_sweep = records;
        self.emit("sweep-eps", &report)
    }

    fn sweep_batch(&self) -> Result<()> {
        let test = self.load_split(false)?;
        let d = self.deploy(&test)?;
        let def = d.defender();
        let bs = self.eval_batch();
        let records = batch_size_sweep(&def, &test, self.attack, &self.cfg.attack, &self.cfg.eval.batch_sizes)?;
        let (clean, attacked) = match records.iter().find(|r| r.batch_size == bs) {
            Some(r) => (r.clean_acc, r.attack_acc),
            None => (
                def.clean_accuracy(&test, bs)?,
                run_attack(&def, &test, self.attack, &self.cfg.attack, bs)?.attack_acc,
            ),
        };
        for r in &records {
            println!(
                "batch {}: clean {:.2}%  attacked {:.2}%",
                r.batch_size, r.clean_acc, r.attack_acc
            );
        }
        let mut report = self.report(clean, attacked);
        report.batch_sweep = records;
        self.emit("sweep-batch", &report)
    }

    fn hist(&self) -> Result<()> {
        let test = self.load_split(false)?;
        let sample = test.take(self.cfg.eval.histogram_samples.min(test.len()))?;
        let mut histograms = vec![pixel_histogram(&sample.images, None, "raw")?];
        if let Some(p) = self.cfg.pipeline()? {
            if self.cfg.blind() {
                self.secret()?;
            }
            let continuous = p
                .transforms()
                .iter()
                .take_while(|t| !matches!(t, Transform::Quantize { .. }))
                .count();
            for cut in 1..=continuous {
                let prefix = Pipeline::new(p.transforms()[..cut].to_vec())?;
                let label = format!("after {}", stage_name(&p.transforms()[cut - 1]));
                histograms.push(pixel_histogram(&sample.images, Some(&prefix), label)?);
            }
        }
        for h in &histograms {
            println!("{}: mean {:.4} std {:.4}", h.label, h.mean, h.std);
        }
        let report = HistReport {
            config: self.cfg.echo(),
            histograms,
        };
        write_json(&self.out.join("hist.json"), &report)
    }
}

#[derive(Serialize)]
struct HistReport {
    config: serde_json::Value,
    histograms: Vec<Histogram>,
}

fn stage_name(t: &Transform) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v["kind"].as_str().map(str::to_owned))
        .unwrap_or_else(|| "stage".into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}
