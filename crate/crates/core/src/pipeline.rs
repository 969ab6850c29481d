//! End-to-end run orchestration: data → teacher finetune → (optional) PTP
//! build + pretrain → distill → test evaluation, leaving every artifact on
//! disk. All randomness flows from the run seed through per-stage derived
//! seeds, so editing one stage's settings never shifts another's sampling.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::distill::{distill, finetune_teacher, TrainReport};
use crate::error::{KdError, Result};
use crate::ptp::{build_ptp_dataset, ptp_pretrain, save_ptp_tsv};
use crate::sps::{build_sharing_plan, ParamStore, SharingPlan, SpsMode};
use crate::tasks::{
    evaluate, generate_synthetic_task, load_tsv, save_bundle, Dataset, DatasetBundle, Metrics,
    TsvSchema,
};

/// FNV-1a over the run seed and a stage name; gives each stage its own
/// generator stream.
pub fn derive_seed(base: u64, stage: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for byte in base.to_le_bytes().iter().chain(stage.as_bytes()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

fn stage_rng(base: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stage))
}

/// Fixed-field summary record written at the end of every run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub task: String,
    pub sps_mode: String,
    pub ptp_scheme: String,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub t: f64,
    pub seed: u64,
    pub test_acc: f64,
    pub test_f1: Option<f64>,
    /// Verbatim echo of the parsed run configuration.
    pub config: RunConfig,
}

pub struct PipelineOutcome {
    pub summary: RunSummary,
    pub test_metrics: Metrics,
    pub teacher_dev_acc: f64,
    pub distill_report: TrainReport,
    pub out_dir: PathBuf,
}

/// Materialize the run's data: generate the synthetic task (seeded from the
/// run seed) or load the configured TSV files.
pub fn resolve_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    if let Some(spec) = &cfg.task {
        return generate_synthetic_task(spec, derive_seed(cfg.seed, "task"));
    }
    let source = cfg.data.as_ref().expect("validate() ensures a data source");
    let schema = TsvSchema { max_seq_len: source.max_seq_len, max_vocab: source.max_vocab };
    let mut train = load_tsv(&source.train, &schema)?;
    let mut dev = load_tsv(&source.dev, &schema)?;
    let mut test = load_tsv(&source.test, &schema)?;
    // ids are per-file; shift them so the splits stay disjoint
    let train_n = train.len() as u64;
    for ex in &mut dev.examples {
        ex.id += train_n;
    }
    let offset = train_n + dev.len() as u64;
    for ex in &mut test.examples {
        ex.id += offset;
    }
    let num_classes = train.num_classes.max(dev.num_classes).max(test.num_classes);
    train.num_classes = num_classes;
    dev.num_classes = num_classes;
    test.num_classes = num_classes;
    let spec = crate::tasks::TaskSpec {
        kind: crate::tasks::TaskKind::MajorityToken, // placeholder; not used for TSV sources
        train_n: train.len(),
        dev_n: dev.len(),
        test_n: test.len(),
        seq_len: source.max_seq_len,
        vocab_size: source.max_vocab,
    };
    Ok(DatasetBundle { train, dev, test, spec, seed: cfg.seed })
}

/// Data for a stage command running against an output directory: prefer the
/// task bundle already saved there (so later stages reuse what `gen-task`
/// wrote), falling back to [`resolve_bundle`]. Generation is deterministic in
/// (spec, seed), so both paths yield the same data.
pub fn bundle_for_stage(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetBundle> {
    let task_dir = out_dir.join("task");
    if cfg.task.is_some() && task_dir.join("manifest.toml").exists() {
        return crate::tasks::load_bundle(&task_dir);
    }
    resolve_bundle(cfg)
}

/// Train a fresh teacher on the bundle; returns the teacher, its plan, and
/// the training report.
pub fn train_teacher_stage(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
) -> Result<(ParamStore, SharingPlan, TrainReport)> {
    let encoder_cfg = cfg.teacher_encoder_config(bundle.train.num_classes)?;
    let mut init_rng = stage_rng(cfg.seed, "teacher-init");
    let mut store = ParamStore::random_init(encoder_cfg, cfg.teacher.num_layers, &mut init_rng)?;
    let plan = build_sharing_plan(cfg.teacher.num_layers, SpsMode::Plain);
    let mut train_rng = stage_rng(cfg.seed, "teacher-train");
    let report = finetune_teacher(&mut store, &plan, bundle, &cfg.teacher.train, &mut train_rng)?;
    Ok((store, plan, report))
}

/// Run every stage, writing artifacts under `out_dir`:
/// `task/`, `teacher.ckpt`, `teacher_metrics.jsonl`, `ptp.tsv`,
/// `ptp_metrics.jsonl`, `student.ckpt`, `metrics.jsonl`, `summary.json`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    // data
    let bundle = resolve_bundle(cfg)?;
    if cfg.task.is_some() {
        save_bundle(&out_dir.join("task"), &bundle)?;
    }

    // teacher
    let (teacher, teacher_plan, teacher_report) = train_teacher_stage(cfg, &bundle)?;
    save_checkpoint(&out_dir.join("teacher.ckpt"), &teacher, SpsMode::Plain)?;
    teacher_report.write_jsonl(&out_dir.join("teacher_metrics.jsonl"))?;
    let teacher_dev_acc = teacher_report.best_dev_acc.unwrap_or(0.0);

    // student
    let mut student_rng = stage_rng(cfg.seed, "student-init");
    let (mut student, student_plan) = crate::distill::init_student_from_teacher(
        &teacher,
        cfg.student.num_layers,
        cfg.sps_mode,
        &mut student_rng,
    )?;

    // optional PTP stage
    if let Some(scheme) = cfg.ptp_scheme.as_scheme() {
        let ptp = build_ptp_dataset(
            &teacher,
            &teacher_plan,
            &bundle.train,
            cfg.kd.threshold,
            scheme,
        )?;
        save_ptp_tsv(&out_dir.join("ptp.tsv"), &ptp)?;
        let mut ptp_rng = stage_rng(cfg.seed, "ptp-train");
        let (pretrained, ptp_report) =
            ptp_pretrain(&student, &student_plan, &ptp, &cfg.ptp_train, &mut ptp_rng)?;
        ptp_report.write_jsonl(&out_dir.join("ptp_metrics.jsonl"))?;
        student = pretrained;
    }

    // distillation
    let mut kd_cfg = cfg.kd.clone();
    kd_cfg.seed = derive_seed(cfg.seed, "distill");
    let mut distill_rng = ChaCha8Rng::seed_from_u64(kd_cfg.seed);
    let distill_report = distill(
        &mut student,
        &student_plan,
        &teacher,
        &teacher_plan,
        &bundle,
        &kd_cfg,
        &mut distill_rng,
    )?;
    save_checkpoint(&out_dir.join("student.ckpt"), &student, cfg.sps_mode)?;
    distill_report.write_jsonl(&out_dir.join("metrics.jsonl"))?;

    // final evaluation + summary
    let test_metrics = evaluate(&student, &student_plan, &bundle.test)?;
    let summary = make_summary(cfg, &test_metrics);
    summary.write_json(&out_dir.join("summary.json"))?;

    Ok(PipelineOutcome {
        summary,
        test_metrics,
        teacher_dev_acc,
        distill_report,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Assemble the fixed-field summary record for a finished run.
pub fn make_summary(cfg: &RunConfig, test_metrics: &Metrics) -> RunSummary {
    RunSummary {
        task: cfg.task_name(),
        sps_mode: cfg.sps_mode.to_string(),
        ptp_scheme: cfg.ptp_scheme.to_string(),
        alpha: cfg.kd.alpha,
        beta: cfg.kd.beta,
        temperature: cfg.kd.temperature,
        t: cfg.kd.threshold,
        seed: cfg.seed,
        test_acc: test_metrics.accuracy,
        test_f1: test_metrics.f1,
        config: cfg.clone(),
    }
}

impl RunSummary {
    /// Pretty JSON with a trailing newline; the exact bytes `write_json`
    /// persists.
    pub fn to_json(&self) -> Result<String> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| KdError::Data(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Evaluate a checkpoint on one split of a stored bundle.
pub fn eval_checkpoint(ckpt: &Path, task_dir: &Path, split: &str) -> Result<Metrics> {
    let (store, plan, _) = crate::checkpoint::load_checkpoint(ckpt)?;
    let bundle = crate::tasks::load_bundle(task_dir)?;
    let data: &Dataset = match split {
        "train" => &bundle.train,
        "dev" => &bundle.dev,
        "test" => &bundle.test,
        other => {
            return Err(KdError::invalid(
                "eval",
                format!("unknown split {other:?}; expected train, dev, or test"),
            ))
        }
    };
    evaluate(&store, &plan, data)
}
