//! Command-line front end. Each pipeline stage is its own subcommand working
//! against an output directory, so a stage can be rerun from the artifacts the
//! previous one left on disk; `run` executes them all in order and `report`
//! aggregates finished runs into an ablation table.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kdkit::checkpoint::{load_checkpoint, save_checkpoint};
use kdkit::config::{load_run_config, RunConfig};
use kdkit::distill::{distill, init_student_from_teacher};
use kdkit::error::{KdError, Result};
use kdkit::pipeline::{
    bundle_for_stage, derive_seed, make_summary, resolve_bundle, run_pipeline,
    train_teacher_stage,
};
use kdkit::ptp::{
    build_ptp_dataset, load_ptp_tsv, ptp_dataset_from_records, ptp_pretrain, save_ptp_tsv,
};
use kdkit::sps::SpsMode;
use kdkit::tasks::{evaluate, save_bundle};

#[derive(Parser)]
#[command(
    name = "kdkit",
    version,
    about = "Knowledge distillation for compact transformer classifiers \
             with shuffled parameter sharing and teacher-prediction pretraining"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured synthetic task into <out>/task/
    GenTask(StageArgs),
    /// Finetune the teacher; writes teacher.ckpt and teacher_metrics.jsonl
    TrainTeacher(StageArgs),
    /// Label the training split with the teacher; writes ptp.tsv
    BuildPtp(StageArgs),
    /// Pretrain the student on the PTP labels; writes student_init.ckpt
    PtpPretrain(StageArgs),
    /// Distill the teacher into the student; writes student.ckpt, metrics.jsonl, summary.json
    Distill(StageArgs),
    /// Evaluate a checkpoint on one data split
    Eval(EvalArgs),
    /// Run every stage end to end
    Run(StageArgs),
    /// Aggregate summary records from finished run directories
    Report(ReportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl StageArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = load_run_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self.out.clone().or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
            KdError::Config("no output directory: set out_dir in the config or pass --out".into())
        })?;
        std::fs::create_dir_all(&out)?;
        Ok((cfg, out))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Checkpoint to evaluate (default: <out>/student.ckpt)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Data split to evaluate on
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each containing a summary.json
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
}

fn cmd_gen_task(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    if cfg.task.is_none() {
        return Err(KdError::Config(
            "gen-task needs a [task] section; this config reads TSV files instead".into(),
        ));
    }
    let bundle = resolve_bundle(&cfg)?;
    let dir = out.join("task");
    save_bundle(&dir, &bundle)?;
    println!(
        "task {}: train {} / dev {} / test {} -> {}",
        cfg.task_name(),
        bundle.train.len(),
        bundle.dev.len(),
        bundle.test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train_teacher(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let bundle = bundle_for_stage(&cfg, &out)?;
    let (teacher, _, report) = train_teacher_stage(&cfg, &bundle)?;
    save_checkpoint(&out.join("teacher.ckpt"), &teacher, SpsMode::Plain)?;
    report.write_jsonl(&out.join("teacher_metrics.jsonl"))?;
    println!(
        "teacher: dev acc {:.4} at epoch {} -> {}",
        report.best_dev_acc.unwrap_or(0.0),
        report.best_epoch,
        out.join("teacher.ckpt").display()
    );
    Ok(())
}

fn cmd_build_ptp(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let scheme = cfg.ptp_scheme.as_scheme().ok_or_else(|| {
        KdError::Config("ptp_scheme is \"none\"; nothing to build".into())
    })?;
    let bundle = bundle_for_stage(&cfg, &out)?;
    let (teacher, teacher_plan, _) = load_checkpoint(&out.join("teacher.ckpt"))?;
    let ptp = build_ptp_dataset(&teacher, &teacher_plan, &bundle.train, cfg.kd.threshold, scheme)?;
    let path = out.join("ptp.tsv");
    save_ptp_tsv(&path, &ptp)?;
    println!(
        "ptp {} (t={}): {} labeled examples -> {}",
        scheme,
        cfg.kd.threshold,
        ptp.data.len(),
        path.display()
    );
    Ok(())
}

fn cmd_ptp_pretrain(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    if cfg.ptp_scheme.as_scheme().is_none() {
        return Err(KdError::Config("ptp_scheme is \"none\"; nothing to pretrain on".into()));
    }
    let bundle = bundle_for_stage(&cfg, &out)?;
    let (teacher, _, _) = load_checkpoint(&out.join("teacher.ckpt"))?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-init"));
    let (student, plan) =
        init_student_from_teacher(&teacher, cfg.student.num_layers, cfg.sps_mode, &mut init_rng)?;
    let (scheme, threshold, records) = load_ptp_tsv(&out.join("ptp.tsv"))?;
    let ptp = ptp_dataset_from_records(&bundle.train, scheme, threshold, &records)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ptp-train"));
    let (pretrained, report) = ptp_pretrain(&student, &plan, &ptp, &cfg.ptp_train, &mut train_rng)?;
    report.write_jsonl(&out.join("ptp_metrics.jsonl"))?;
    let path = out.join("student_init.ckpt");
    save_checkpoint(&path, &pretrained, cfg.sps_mode)?;
    println!(
        "ptp pretrain: {} epochs on {} labels -> {}",
        report.records.len(),
        scheme,
        path.display()
    );
    Ok(())
}

fn cmd_distill(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let bundle = bundle_for_stage(&cfg, &out)?;
    let (teacher, teacher_plan, _) = load_checkpoint(&out.join("teacher.ckpt"))?;

    let init_path = out.join("student_init.ckpt");
    let (mut student, student_plan) = if init_path.exists() {
        let (student, plan, mode) = load_checkpoint(&init_path)?;
        if mode != cfg.sps_mode {
            return Err(KdError::Config(format!(
                "student_init.ckpt was built with sps_mode {mode} but the config says {}",
                cfg.sps_mode
            )));
        }
        (student, plan)
    } else {
        if cfg.ptp_scheme.as_scheme().is_some() {
            eprintln!(
                "note: {} not found; distilling without the PTP pretraining stage",
                init_path.display()
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-init"));
        init_student_from_teacher(&teacher, cfg.student.num_layers, cfg.sps_mode, &mut rng)?
    };

    let mut kd_cfg = cfg.kd.clone();
    kd_cfg.seed = derive_seed(cfg.seed, "distill");
    let mut rng = ChaCha8Rng::seed_from_u64(kd_cfg.seed);
    let report = distill(
        &mut student,
        &student_plan,
        &teacher,
        &teacher_plan,
        &bundle,
        &kd_cfg,
        &mut rng,
    )?;
    save_checkpoint(&out.join("student.ckpt"), &student, cfg.sps_mode)?;
    report.write_jsonl(&out.join("metrics.jsonl"))?;

    let metrics = evaluate(&student, &student_plan, &bundle.test)?;
    let summary = make_summary(&cfg, &metrics);
    summary.write_json(&out.join("summary.json"))?;
    print_result(&cfg, metrics.accuracy, metrics.f1);
    println!("summary: {}", out.join("summary.json").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, out) = args.stage.load()?;
    let ckpt = args.ckpt.clone().unwrap_or_else(|| out.join("student.ckpt"));
    let (store, plan, _) = load_checkpoint(&ckpt)?;
    let bundle = bundle_for_stage(&cfg, &out)?;
    let (name, data) = match args.split {
        Split::Train => ("train", &bundle.train),
        Split::Dev => ("dev", &bundle.dev),
        Split::Test => ("test", &bundle.test),
    };
    let metrics = evaluate(&store, &plan, data)?;
    match metrics.f1 {
        Some(f1) => println!(
            "{} on {name}: acc {:.4}, f1 {:.4}",
            ckpt.display(),
            metrics.accuracy,
            f1
        ),
        None => println!("{} on {name}: acc {:.4}", ckpt.display(), metrics.accuracy),
    }
    Ok(())
}

fn cmd_run(args: &StageArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let outcome = run_pipeline(&cfg, &out)?;
    println!("teacher: dev acc {:.4}", outcome.teacher_dev_acc);
    print_result(&cfg, outcome.summary.test_acc, outcome.summary.test_f1);
    println!("summary: {}", out.join("summary.json").display());
    Ok(())
}

fn print_result(cfg: &RunConfig, acc: f64, f1: Option<f64>) {
    match f1 {
        Some(f1) => println!(
            "{} [{}]: test acc {acc:.4}, f1 {f1:.4}",
            cfg.task_name(),
            cfg.method_name()
        ),
        None => println!("{} [{}]: test acc {acc:.4}", cfg.task_name(), cfg.method_name()),
    }
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let table = kdkit::report::report(&args.run_dirs)?;
    print!("{table}");
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenTask(a) => cmd_gen_task(a),
        Cmd::TrainTeacher(a) => cmd_train_teacher(a),
        Cmd::BuildPtp(a) => cmd_build_ptp(a),
        Cmd::PtpPretrain(a) => cmd_ptp_pretrain(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Report(a) => cmd_report(a),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
