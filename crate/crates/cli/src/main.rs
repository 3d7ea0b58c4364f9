//! `medrec`: generate cohorts, train and evaluate the two-stage recommender,
//! sweep the interaction penalty, and run the self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use medrec::domain::SetMetrics;
use medrec::experiment::{
    build_vocab, evaluate_models, parse_algo, prepare_dataset, reinforce, rl_prompts, supervised,
    sweep_alpha, tradeoff_csv, RunConfig,
};
use medrec::io::{load_dataset, load_params, save_dataset, save_params, Dataset};
use medrec::oracle::{
    check_gradients, check_metrics, check_normalization, check_telescoping, verify_theorem,
};
use medrec::pipeline::{evaluate, recommendations_jsonl, TeacherEditor};
use medrec::policy::Policy;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "medrec",
    version,
    about = "Two-stage medication recommendation with step-wise GRPO"
)]
struct Cli {
    /// Root directory for default output locations.
    #[arg(long, env = "MEDREC_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort, its splits and co-prescription embeddings.
    GenData(GenDataArgs),
    /// Fine-tune both policies, then run RL on the list editor.
    Train(TrainArgs),
    /// Evaluate a trained run on one split.
    Eval(EvalArgs),
    /// Train and evaluate once per interaction penalty.
    SweepAlpha(SweepArgs),
    /// Run the invariance, metric, gradient and reward self-checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Args)]
struct Common {
    /// Configuration preset.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Master seed for data, initialization, sampling and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cohort directory written by gen-data; generated from the seed if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> RunConfig {
        match self.preset {
            Preset::Default => RunConfig::seeded(self.seed),
            Preset::Smoke => RunConfig::smoke(self.seed),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's patient count.
    #[arg(long)]
    n_patients: Option<usize>,
    /// Override the preset's drug count.
    #[arg(long)]
    n_drugs: Option<usize>,
    /// Output directory [default: <run-root>/data-<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RlArgs {
    /// Interaction penalty weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Refusal penalty weight.
    #[arg(long)]
    beta_refusal: Option<f64>,
    /// Shaping coefficient of the step-wise advantage.
    #[arg(long)]
    lambda: Option<f64>,
    /// Shaping discount in (0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    /// KL penalty toward the fine-tuned reference.
    #[arg(long)]
    beta_kl: Option<f64>,
    /// Completions sampled per prompt.
    #[arg(long)]
    group_size: Option<usize>,
    /// Number of RL updates.
    #[arg(long)]
    updates: Option<usize>,
    /// Evaluate every this many updates (0: final update only).
    #[arg(long)]
    eval_every: Option<usize>,
}

impl RlArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.trainer;
        let w = &mut t.shaping.weights;
        w.alpha = self.alpha.unwrap_or(w.alpha);
        w.beta_refusal = self.beta_refusal.unwrap_or(w.beta_refusal);
        t.shaping.lambda = self.lambda.unwrap_or(t.shaping.lambda);
        t.shaping.gamma = self.gamma.unwrap_or(t.shaping.gamma);
        t.beta_kl = self.beta_kl.unwrap_or(t.beta_kl);
        t.group_size = self.group_size.unwrap_or(t.group_size);
        t.max_updates = self.updates.unwrap_or(t.max_updates);
        t.eval_every = self.eval_every.unwrap_or(t.eval_every);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    rl: RlArgs,
    /// Advantage estimator.
    #[arg(long, default_value = "step-grpo", value_parser = ["grpo", "step-grpo"])]
    algo: String,
    /// Run directory [default: <run-root>/<algo>-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by train.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Skip the list editor and report filter-stage results.
    #[arg(long, conflicts_with = "teacher")]
    skip_list: bool,
    /// Replace the list editor with the exact-edit teacher.
    #[arg(long)]
    teacher: bool,
    /// Output directory [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    rl: RlArgs,
    /// Comma-separated penalty weights.
    #[arg(long, default_value = "0,2,5,10,20,30,40,50", value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, default_value = "step-grpo", value_parser = ["grpo", "step-grpo"])]
    algo: String,
    /// Output directory [default: <run-root>/sweep-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random small edit MDPs to solve exactly.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plant a non-potential reward term; the invariance check must then fail.
    #[arg(long)]
    mutate: bool,
    /// Cases for the metric, reward and normalization checks.
    #[arg(long, default_value_t = 1000)]
    cases: usize,
}

/// What a run directory records about how it was produced.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    algo: String,
    data: PathBuf,
    config: RunConfig,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Check(String),
    Usage(anyhow::Error),
    Io(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let io = e.chain().any(|c| {
            c.is::<std::io::Error>()
                || matches!(
                    c.downcast_ref::<medrec::Error>(),
                    Some(
                        medrec::Error::Io(_)
                            | medrec::Error::Json(_)
                            | medrec::Error::Checkpoint(_)
                    )
                )
        });
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<medrec::Error>(),
                Some(medrec::Error::Config(_))
            )
        });
        if io {
            Failure::Io(e)
        } else if usage {
            Failure::Usage(e)
        } else {
            Failure::Other(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.into())
    }
}

impl From<medrec::Error> for Failure {
    fn from(e: medrec::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_or_generate(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
) -> anyhow::Result<(Dataset, PathBuf)> {
    match data {
        Some(dir) => Ok((
            load_dataset(dir).with_context(|| format!("loading cohort from {}", dir.display()))?,
            dir.to_path_buf(),
        )),
        None => {
            let ds = prepare_dataset(cfg)?;
            let dir = out.join("data");
            save_dataset(&dir, &ds)?;
            Ok((ds, dir))
        }
    }
}

fn gen_data(root: &Path, args: &GenDataArgs) -> Result<(), Failure> {
    let mut cfg = match args.preset {
        Preset::Default => RunConfig::seeded(args.seed),
        Preset::Smoke => RunConfig::smoke(args.seed),
    };
    cfg.cohort.n_patients = args.n_patients.unwrap_or(cfg.cohort.n_patients);
    cfg.cohort.n_drugs = args.n_drugs.unwrap_or(cfg.cohort.n_drugs);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("data-{}", args.seed)));
    let ds = prepare_dataset(&cfg)?;
    save_dataset(&out, &ds)?;
    write_json(&out.join("config.json"), &cfg)?;
    let n = ds.patients.len() as f64;
    let mean_gt = ds
        .patients
        .iter()
        .map(|p| p.ground_truth.len() as f64)
        .sum::<f64>()
        / n;
    let mut mean_ddi = 0.0;
    for p in &ds.patients {
        mean_ddi +=
            SetMetrics::compute(&p.ground_truth, &p.ground_truth, &p.candidate_set, &ds.ddi)?.ddi
                / n;
    }
    println!(
        "wrote {} patients, {} drugs, {} interactions to {} (mean |gt| {mean_gt:.2}, mean gt ddi {mean_ddi:.4})",
        ds.patients.len(),
        ds.ddi.n_drugs(),
        ds.ddi.edges().len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(root: &Path, args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = args.common.config();
    args.rl.apply(&mut cfg);
    cfg.trainer.mode = parse_algo(&args.algo)?;
    cfg.trainer
        .validate()
        .map_err(|e| Failure::Usage(e.into()))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("{}-seed{}", args.algo, args.common.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (ds, data) = load_or_generate(&cfg, args.common.data.as_deref(), &out)?;
    write_json(
        &out.join("config.json"),
        &RunManifest {
            algo: args.algo.clone(),
            data,
            config: cfg,
        },
    )?;

    let vocab = build_vocab(&cfg, ds.ddi.n_drugs())?;
    log::info!("supervised fine-tuning");
    let sft = supervised(&ds, &vocab, &cfg)?;
    save_params(&out.join("cls.ckpt"), &sft.cls)?;
    save_params(&out.join("list_sft.ckpt"), &sft.list)?;
    log::info!(
        "RL with {} for {} updates",
        args.algo,
        cfg.trainer.max_updates
    );
    let outcome = reinforce(&ds, &vocab, &sft, &rl_prompts(&sft), &cfg.trainer)?;
    save_params(&out.join("list.ckpt"), &outcome.params)?;
    fs::write(out.join("training_curve.csv"), outcome.curve.to_csv())?;
    if let Some(reason) = &outcome.halted {
        log::warn!("training halted early: {reason}");
    }
    if let Some(last) = outcome.curve.last() {
        println!(
            "{}: {} updates, eval jaccard {:.4}, ddi {:.4}",
            out.display(),
            last.update,
            last.eval_jaccard,
            last.eval_ddi
        );
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<(), Failure> {
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(args.run.join("config.json"))
            .with_context(|| format!("reading {}/config.json", args.run.display()))?,
    )
    .context("parsing run manifest")?;
    let ds = load_dataset(&manifest.data)
        .with_context(|| format!("loading cohort from {}", manifest.data.display()))?;
    let vocab = build_vocab(&manifest.config, ds.ddi.n_drugs())?;
    let cls = load_params(&args.run.join("cls.ckpt"))?;
    let split = match args.split {
        Split::Train => &ds.splits.train,
        Split::Valid => &ds.splits.valid,
        Split::Test => &ds.splits.test,
    };
    let (summary, recs) = if args.teacher {
        let filter = Policy::new(&cls, &vocab, &ds.ddi)?;
        evaluate(
            &ds.split(split),
            &filter,
            Some(&TeacherEditor { vocab: &vocab }),
            &ds.ddi,
        )?
    } else if args.skip_list {
        evaluate_models(&ds, &vocab, &cls, None, split)?
    } else {
        let list = load_params(&args.run.join("list.ckpt"))?;
        evaluate_models(&ds, &vocab, &cls, Some(&list), split)?
    };
    if let Some(bad) = recs.iter().find(|r| !r.is_consistent()) {
        return Err(Failure::Check(format!(
            "patient {}: final set violates the composition identity",
            bad.patient_id
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("metrics.json"), &summary)?;
    fs::write(
        out.join("recommendations.jsonl"),
        recommendations_jsonl(&recs)?,
    )?;
    println!(
        "{}",
        serde_json::to_string(&summary).context("serializing metrics")?
    );
    Ok(())
}

fn sweep_cmd(root: &Path, args: &SweepArgs) -> Result<(), Failure> {
    if args.alphas.is_empty() || args.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Failure::Usage(anyhow::anyhow!(
            "--alphas must be a non-empty list of finite values >= 0"
        )));
    }
    let mut cfg = args.common.config();
    args.rl.apply(&mut cfg);
    cfg.trainer.mode = parse_algo(&args.algo)?;
    cfg.trainer.eval_every = args.rl.eval_every.unwrap_or(0);
    cfg.trainer
        .validate()
        .map_err(|e| Failure::Usage(e.into()))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("sweep-seed{}", args.common.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (ds, data) = load_or_generate(&cfg, args.common.data.as_deref(), &out)?;
    write_json(
        &out.join("config.json"),
        &RunManifest {
            algo: args.algo.clone(),
            data,
            config: cfg,
        },
    )?;
    let vocab = build_vocab(&cfg, ds.ddi.n_drugs())?;
    let sft = supervised(&ds, &vocab, &cfg)?;
    let rows = sweep_alpha(
        &ds,
        &vocab,
        &sft,
        &rl_prompts(&sft),
        &cfg.trainer,
        &args.alphas,
    )?;
    let csv = tradeoff_csv(&rows);
    fs::write(out.join("tradeoff.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn verify_cmd(args: &VerifyArgs) -> Result<(), Failure> {
    let theorem = verify_theorem(args.seed, args.instances, 1.0, args.mutate);
    let worst_gap = theorem
        .instances
        .iter()
        .map(|r| r.value_gap)
        .fold(0.0, f64::max);
    println!(
        "{} invariance: {}/{} instances agree (max value gap {worst_gap:.2e})",
        if theorem.passed() { "PASS" } else { "FAIL" },
        theorem.instances.len() - theorem.n_failed(),
        theorem.instances.len()
    );
    let reports = [
        check_metrics(args.seed, args.cases),
        check_telescoping(args.seed, args.cases),
        check_normalization(args.seed, args.cases),
        check_gradients(args.seed, 50),
    ];
    for r in &reports {
        println!(
            "{} {}: {}/{} cases (worst {:.2e}, tolerance {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases - r.failures,
            r.cases,
            r.worst,
            r.tolerance
        );
    }
    let failed = !theorem.passed() as usize + reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(&cli.run_root, a),
        Command::Train(a) => train_cmd(&cli.run_root, a),
        Command::Eval(a) => eval_cmd(a),
        Command::SweepAlpha(a) => sweep_cmd(&cli.run_root, a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
