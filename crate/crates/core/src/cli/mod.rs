//! Command-line front end: one subcommand per pipeline step, each writing a
//! run manifest next to its outputs.

pub mod manifest;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{build_dataset, generate_problems, load_problems, save_problems, Dataset, DatasetConfig};
use crate::decode::{batch_generate, read_jsonl, write_jsonl, Candidate, SamplerConfig};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, sweep_m, Regime};
use crate::neural::{Checkpoint, Stage};
use crate::qcore::QModel;
use crate::rewardmodel::{score_candidates, RewardForm, ScoredCandidate};
use crate::tabular::verify_tabular;
use crate::trainer::{
    gradcheck, pretrain_ckpt, run_phi_stage, run_theta_stage, GradcheckConfig, MetricsRecord, MetricsSink,
    StageConfig, DEFAULT_GAMMA,
};
pub use manifest::{FileHash, ManifestBuilder, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "qsynth", version, about = "Value-based program synthesis on a toy stack language")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that win over the values in a stage config file.
#[derive(Debug, Clone, Default, Args)]
pub struct StageOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics JSONL path (default: `<out>.metrics.jsonl`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    GenProblems {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    PretrainCkpt {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: StageOverrides,
    },
    BuildDataset {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 32)]
        m_gen: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    TrainPhi {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Problems the dataset was built from; their prompts condition the model.
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: StageOverrides,
    },
    TrainTheta {
        #[arg(long)]
        ckpt: PathBuf,
        /// Required unless `--no-phi-init`.
        #[arg(long)]
        phi: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Bootstrap on argmax `Q_θ` instead of the reference policy's mode.
        #[arg(long)]
        no_conservative: bool,
        /// Start the value head from the base checkpoint instead of φ.
        #[arg(long)]
        no_phi_init: bool,
        #[command(flatten)]
        overrides: StageOverrides,
    },
    Sample {
        /// A ckpt or theta checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Score {
        /// The theta checkpoint acting as reward model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        exact_reward: bool,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
    },
    Eval {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        scored: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, value_enum)]
        regime: Regime,
        #[arg(long)]
        out: PathBuf,
    },
    SweepM {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        scored: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        m_list: Vec<usize>,
        /// JSON report; the CSV table goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    VerifyTabular {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        /// Also run the Monte-Carlo oracle with this many rollouts per MDP.
        #[arg(long)]
        oracle_rollouts: Option<usize>,
        #[arg(long, default_value = "tabular_report.json")]
        out: PathBuf,
    },
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "gradcheck_report.json")]
        out: PathBuf,
    },
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenProblems { .. } => "gen-problems",
            Command::PretrainCkpt { .. } => "pretrain-ckpt",
            Command::BuildDataset { .. } => "build-dataset",
            Command::TrainPhi { .. } => "train-phi",
            Command::TrainTheta { .. } => "train-theta",
            Command::Sample { .. } => "sample",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::SweepM { .. } => "sweep-m",
            Command::VerifyTabular { .. } => "verify-tabular",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report { .. } => "report",
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_stage_config(
    path: Option<&Path>,
    stage: Stage,
    ov: &StageOverrides,
    m: &mut ManifestBuilder,
) -> Result<StageConfig> {
    let mut cfg = match path {
        Some(p) => {
            m.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            StageConfig::from_json(&text, stage)?
        }
        None => StageConfig::for_stage(stage),
    };
    if let Some(v) = ov.steps {
        cfg.steps = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = ov.lr {
        cfg.lr = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    cfg.validate(stage)?;
    m.config(&cfg)?;
    m.seed(cfg.seed);
    Ok(cfg)
}

fn load_input<T>(path: &Path, m: &mut ManifestBuilder, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    m.input(path)?;
    load(path)
}

fn metrics_path(ov: &StageOverrides, out: &Path) -> PathBuf {
    ov.metrics.clone().unwrap_or_else(|| manifest::sibling(out, ".metrics.jsonl"))
}

/// What a subcommand produced; a property failure still writes its report
/// before surfacing as an error.
pub struct Outcome {
    pub manifest: RunManifest,
    pub failure: Option<Error>,
}

pub fn run(cmd: &Command) -> Result<Outcome> {
    let mut m = ManifestBuilder::start(cmd.name());
    let mut failure = None;
    let outputs: Vec<PathBuf> = match cmd {
        Command::GenProblems { seed, count, out } => {
            m.seed(*seed);
            m.config(&serde_json::json!({ "seed": seed, "count": count }))?;
            save_problems(&generate_problems(*seed, *count)?, out)?;
            vec![out.clone()]
        }
        Command::PretrainCkpt { problems, config, out, overrides } => {
            let cfg = load_stage_config(config.as_deref(), Stage::Ckpt, overrides, &mut m)?;
            let problems = load_input(problems, &mut m, load_problems)?;
            let mpath = metrics_path(overrides, out);
            let mut sink = MetricsSink::file(&mpath)?;
            let run = pretrain_ckpt(&problems, &cfg, &mut sink)?;
            if !run.floor_reached {
                log::warn!("pass floor {} not reached; see the checkpoint warnings", cfg.pass_floor);
            }
            run.result.checkpoint.save(out)?;
            vec![out.clone(), mpath]
        }
        Command::BuildDataset { problems, ckpt, m_gen, seed, top_p, temp, out } => {
            let problems = load_input(problems, &mut m, load_problems)?;
            let ckpt = load_input(ckpt, &mut m, Checkpoint::load)?;
            let cfg = DatasetConfig {
                m_gen: *m_gen,
                sampler: SamplerConfig { top_p: *top_p, temperature: *temp, seed: *seed, ..SamplerConfig::default() },
                seed: *seed,
                ..DatasetConfig::default()
            };
            m.config(&cfg)?;
            m.seed(*seed);
            build_dataset(&problems, &ckpt, &cfg)?.save(out)?;
            vec![out.clone(), manifest::sibling(out, ".meta.json")]
        }
        Command::TrainPhi { ckpt, dataset, problems, config, out, overrides } => {
            let cfg = load_stage_config(config.as_deref(), Stage::Phi, overrides, &mut m)?;
            let ckpt = load_input(ckpt, &mut m, Checkpoint::load)?;
            let dataset = load_input(dataset, &mut m, Dataset::load)?;
            let problems = load_input(problems, &mut m, load_problems)?;
            let mpath = metrics_path(overrides, out);
            let mut sink = MetricsSink::file(&mpath)?;
            let run = run_phi_stage(&ckpt, &dataset, &problems, &cfg, &mut sink)?;
            run.result.checkpoint.save(out)?;
            vec![out.clone(), mpath]
        }
        Command::TrainTheta { ckpt, phi, dataset, problems, config, out, no_conservative, no_phi_init, overrides } => {
            let mut cfg = load_stage_config(config.as_deref(), Stage::Theta, overrides, &mut m)?;
            if *no_conservative {
                cfg.use_conservative_operator = false;
            }
            if *no_phi_init {
                cfg.use_phi_init = false;
            }
            m.config(&cfg)?;
            let ckpt = load_input(ckpt, &mut m, Checkpoint::load)?;
            let phi = match (phi, cfg.use_phi_init) {
                (Some(p), true) => Some(load_input(p, &mut m, Checkpoint::load)?),
                (None, true) => return Err(Error::config("--phi is required unless --no-phi-init is given")),
                (_, false) => None,
            };
            let dataset = load_input(dataset, &mut m, Dataset::load)?;
            let problems = load_input(problems, &mut m, load_problems)?;
            let mpath = metrics_path(overrides, out);
            let mut sink = MetricsSink::file(&mpath)?;
            let run = run_theta_stage(&ckpt, phi.as_ref(), &dataset, &problems, &cfg, &mut sink)?;
            run.result.checkpoint.save(out)?;
            vec![out.clone(), mpath]
        }
        Command::Sample { model, problems, m: count, top_p, temp, seed, out } => {
            let ck = load_input(model, &mut m, Checkpoint::load)?;
            if ck.meta.stage == Stage::Phi {
                return Err(Error::validation("sampling needs a ckpt or theta checkpoint, got phi"));
            }
            let problems = load_input(problems, &mut m, load_problems)?;
            let cfg = SamplerConfig { top_p: *top_p, temperature: *temp, seed: *seed, ..SamplerConfig::default() };
            m.config(&serde_json::json!({ "m": count, "sampler": cfg }))?;
            m.seed(*seed);
            let model = QModel::from_checkpoint(&ck)?;
            write_jsonl(&batch_generate(&model, &problems, *count, &cfg)?, out)?;
            vec![out.clone()]
        }
        Command::Score { model, candidates, problems, out, exact_reward, gamma } => {
            let ck = load_input(model, &mut m, Checkpoint::load)?;
            ck.require_stage(Stage::Theta)?;
            let cands: Vec<Candidate> = load_input(candidates, &mut m, read_jsonl)?;
            let problems = load_input(problems, &mut m, load_problems)?;
            if !(*gamma > 0.0 && *gamma <= 1.0) {
                return Err(Error::config(format!("gamma must be in (0, 1], got {gamma}")));
            }
            let form = if *exact_reward { RewardForm::Exact } else { RewardForm::Approximate };
            m.config(&serde_json::json!({ "gamma": gamma, "form": form }))?;
            let model = QModel::from_checkpoint(&ck)?;
            write_jsonl(&score_candidates(&model, &problems, &cands, *gamma, form)?, out)?;
            vec![out.clone()]
        }
        Command::Eval { problems, scored, k, m: budget, regime, out } => {
            let problems = load_input(problems, &mut m, load_problems)?;
            let scored: Vec<ScoredCandidate> = load_input(scored, &mut m, read_jsonl)?;
            m.config(&serde_json::json!({ "k": k, "m": budget, "regime": regime }))?;
            write_json(&evaluate(*regime, &problems, &scored, *k, *budget)?, out)?;
            vec![out.clone()]
        }
        Command::SweepM { problems, scored, k, m_list, out } => {
            let problems = load_input(problems, &mut m, load_problems)?;
            let scored: Vec<ScoredCandidate> = load_input(scored, &mut m, read_jsonl)?;
            m.config(&serde_json::json!({ "k": k, "m_list": m_list }))?;
            let report = sweep_m(&problems, &scored, *k, m_list)?;
            write_json(&report, out)?;
            let csv = out.with_extension("csv");
            std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
            vec![out.clone(), csv]
        }
        Command::VerifyTabular { trials, seed, gamma, oracle_rollouts, out } => {
            if *trials == 0 || !(*gamma > 0.0 && *gamma < 1.0) {
                return Err(Error::config("trials must be positive and gamma in (0, 1)"));
            }
            m.seed(*seed);
            m.config(&serde_json::json!({ "trials": trials, "gamma": gamma, "oracle_rollouts": oracle_rollouts }))?;
            let report = verify_tabular(*trials, *seed, *gamma, *oracle_rollouts)?;
            write_json(&report, out)?;
            if !report.passed {
                failure = Some(Error::Property(format!("tabular properties violated; see {}", out.display())));
            }
            vec![out.clone()]
        }
        Command::Gradcheck { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => {
                    m.input(p)?;
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str::<GradcheckConfig>(&text)?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            m.config(&cfg)?;
            m.seed(cfg.seed);
            let report = gradcheck(&cfg)?;
            write_json(&report, out)?;
            if !report.passed {
                failure = Some(Error::Property(format!("gradient check above tolerance; see {}", out.display())));
            }
            vec![out.clone()]
        }
        Command::Report { metrics, out } => {
            let mut csv = String::from("run,stage,step,l_ce,l_adv,l_v,l_q,l_ft,grad_norm,lr,probe_pass1,wall_time_s\n");
            for path in metrics {
                let records: Vec<MetricsRecord> = load_input(path, &mut m, read_jsonl)?;
                let run = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                for r in records {
                    let l = r.losses;
                    let probe = r.probe_pass1.map(|p| p.to_string()).unwrap_or_default();
                    csv.push_str(&format!(
                        "{run},{},{},{},{},{},{},{},{},{},{probe},{}\n",
                        r.stage, r.step, l.l_ce, l.l_adv, l.l_v, l.l_q, l.l_ft, r.grad_norm, r.lr, r.wall_time_s
                    ));
                }
            }
            std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
            vec![out.clone()]
        }
    };
    Ok(Outcome { manifest: m.finish(&outputs)?, failure })
}

/// The one-line JSON error written to stderr.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::Property(_) => "property",
        Error::Numerical(_) => "numerical",
        Error::Shape(_) => "shape",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    };
    serde_json::json!({ "error": kind, "exit_code": e.exit_code(), "message": e.to_string() }).to_string()
}

/// Parses, runs and maps the result to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", error_line(&Error::config("--threads must be at least 1")));
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli.command) {
        Ok(Outcome { failure: None, .. }) => 0,
        Ok(Outcome { failure: Some(e), .. }) | Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
