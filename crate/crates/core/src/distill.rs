//! Teacher finetuning, student initialization, and distillation with the
//! composite objective
//!
//!   (1−α)·CE(y, σ(z_s)) + α·KL + β·Σ_{(k1,k2)} ‖h_s^{k1} − h_t^{k2}‖²₂
//!
//! where the KL term compares the temperature-softened teacher distribution
//! with the student's. All three stages share one minibatch trainer so, for
//! example, distillation with α=β=0 reproduces plain finetuning bit for bit.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward_traced, ForwardOutput};
use crate::error::{KdError, Result};
pub use crate::numkit::temperature_softmax;
use crate::numkit::{ops, softmax_rows, ParamId, Tape, Tensor, TensorStore, Var};
use crate::sps::{build_sharing_plan, ParamStore, SharingPlan, SpsMode};
use crate::tasks::{evaluate, Dataset, DatasetBundle, Example};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total steps spent in linear learning-rate warmup.
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    /// Global gradient L2-norm ceiling.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

fn default_warmup_frac() -> f64 {
    0.1
}
fn default_clip_norm() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(KdError::Config(format!("learning_rate {} invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(KdError::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(KdError::Config("epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(KdError::Config(format!("warmup_frac {} outside [0,1]", self.warmup_frac)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(KdError::Config(format!("clip_norm {} invalid", self.clip_norm)));
        }
        Ok(())
    }
}

/// Which way the KL term reads its two distributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// KL(teacher ‖ student): gradients match soft-target cross-entropy.
    #[default]
    TeacherStudent,
    /// The loss as literally written: KL(student ‖ teacher).
    StudentTeacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KDConfig {
    /// Weight shifting between hard-label CE (α=0) and the KL term (α=1).
    pub alpha: f64,
    /// Weight of the hidden-state MSE term.
    pub beta: f64,
    /// Teacher softening temperature.
    pub temperature: f64,
    /// Student-side temperature inside the KL term only; 1 leaves the
    /// student distribution plain.
    #[serde(default = "default_student_temperature")]
    pub student_temperature: f64,
    /// 1-indexed (student physical layer, teacher layer) pairs for the
    /// hidden-state term. Empty means [`default_layer_pairs`].
    #[serde(default)]
    pub layer_pairs: Vec<(usize, usize)>,
    /// Teacher-confidence threshold, forwarded to the PTP stage.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    /// Scale hidden vectors to unit L2 norm before the MSE term.
    #[serde(default)]
    pub normalize_hidden: bool,
    pub train: TrainConfig,
    /// Overridden by the pipeline's per-stage seed derivation when run
    /// through a [`crate::config::RunConfig`].
    #[serde(default)]
    pub seed: u64,
}

fn default_student_temperature() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.9
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(KdError::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(KdError::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(KdError::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.student_temperature.is_finite() && self.student_temperature > 0.0) {
            return Err(KdError::Config(format!(
                "student_temperature {} must be > 0",
                self.student_temperature
            )));
        }
        if !(0.5..=1.0).contains(&self.threshold) {
            return Err(KdError::Config(format!(
                "threshold {} outside [0.5, 1.0]",
                self.threshold
            )));
        }
        self.train.validate()
    }
}

/// One aligned layer pair per student physical layer: layer i (1-indexed)
/// maps to teacher layer ceil(i · teacher / student).
pub fn default_layer_pairs(student_physical: usize, teacher_layers: usize) -> Vec<(usize, usize)> {
    (1..=student_physical)
        .map(|i| (i, (i * teacher_layers).div_ceil(student_physical)))
        .collect()
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KdLossParts {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub mse: f64,
}

fn resolve_pairs(
    cfg: &KDConfig,
    student_layers: usize,
    teacher_layers: usize,
) -> Result<Vec<(usize, usize)>> {
    let pairs = if cfg.layer_pairs.is_empty() {
        default_layer_pairs(student_layers, teacher_layers)
    } else {
        cfg.layer_pairs.clone()
    };
    for &(k1, k2) in &pairs {
        if k1 == 0 || k1 > student_layers || k2 == 0 || k2 > teacher_layers {
            return Err(KdError::Config(format!(
                "layer pair ({k1},{k2}) out of range: student has {student_layers} physical \
                 layers, teacher {teacher_layers}"
            )));
        }
    }
    Ok(pairs)
}

fn unit_normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(KdError::invalid("kd_loss", "cannot normalize a zero hidden vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Composite loss over untraced forward outputs; returns the weighted total
/// plus the raw (unweighted) decomposition.
pub fn kd_loss(
    student_out: &ForwardOutput,
    teacher_out: &ForwardOutput,
    label: usize,
    cfg: &KDConfig,
) -> Result<KdLossParts> {
    cfg.validate()?;
    let c = student_out.logits.len();
    if teacher_out.logits.len() != c {
        return Err(KdError::shape(
            "kd_loss",
            format!("student has {c} classes, teacher {}", teacher_out.logits.len()),
        ));
    }
    if label >= c {
        return Err(KdError::invalid("kd_loss", format!("label {label} with {c} classes")));
    }

    let z_s = Tensor::new(vec![c], student_out.logits.clone())?;
    let probs = softmax_rows(&z_s)?;
    let ce = ops::cross_entropy_slices(probs.data(), label)?;

    let kl = if cfg.alpha > 0.0 {
        let z_t = Tensor::new(vec![c], teacher_out.logits.clone())?;
        let p_teacher = temperature_softmax(&z_t, cfg.temperature)?;
        let q_student = temperature_softmax(&z_s, cfg.student_temperature)?;
        match cfg.kl_direction {
            KlDirection::TeacherStudent => {
                ops::kl_div_slices(p_teacher.data(), q_student.data())?
            }
            KlDirection::StudentTeacher => {
                ops::kl_div_slices(q_student.data(), p_teacher.data())?
            }
        }
    } else {
        0.0
    };

    let mse = if cfg.beta > 0.0 {
        let pairs = resolve_pairs(
            cfg,
            student_out.hidden_states.len(),
            teacher_out.hidden_states.len(),
        )?;
        let mut acc = 0.0;
        for (k1, k2) in pairs {
            let h_s = &student_out.hidden_states[k1 - 1];
            let h_t = &teacher_out.hidden_states[k2 - 1];
            if h_s.len() != h_t.len() {
                return Err(KdError::shape(
                    "kd_loss",
                    format!(
                        "hidden dim {} (student layer {k1}) vs {} (teacher layer {k2})",
                        h_s.len(),
                        h_t.len()
                    ),
                ));
            }
            if cfg.normalize_hidden {
                acc += ops::mse_slices(&unit_normalized(h_s)?, &unit_normalized(h_t)?);
            } else {
                acc += ops::mse_slices(h_s, h_t);
            }
        }
        acc
    } else {
        0.0
    };

    let total = (1.0 - cfg.alpha) * ce + cfg.alpha * kl + cfg.beta * mse;
    Ok(KdLossParts { total, ce, kl, mse })
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction, linear warmup, and global-norm clipping.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    warmup_steps: usize,
    step: usize,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub(crate) fn new(lr: f64, warmup_steps: usize, clip_norm: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            warmup_steps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently stored in `tensors`.
    /// Tensors without a gradient are left untouched.
    pub(crate) fn apply(&mut self, tensors: &mut TensorStore) {
        let ids: Vec<ParamId> = tensors
            .ids()
            .filter(|&id| tensors.get(id).requires_grad() && tensors.get(id).grad().is_some())
            .collect();
        let mut norm_sq = 0.0;
        for &id in &ids {
            for g in tensors.get(id).grad().expect("filtered") {
                norm_sq += g * g;
            }
        }
        let norm = norm_sq.sqrt();
        let clip_scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let lr_t = if self.step < self.warmup_steps {
            self.lr * self.step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for id in ids {
            let grad: Vec<f64> = tensors.get(id).grad().expect("filtered").to_vec();
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensors.get_mut(id).data_mut();
            for i in 0..n {
                let g = grad[i] * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr_t * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_mse: f64,
    pub dev_acc: Option<f64>,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept (best dev accuracy, ties to the
    /// earlier epoch; the last epoch when no dev set was given).
    pub best_epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Line-delimited records, one object per epoch, then a summary line.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).map_err(|e| KdError::Data(e.to_string()))?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_dev_acc": self.best_dev_acc,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub(crate) enum StopRule {
    FixedEpochs,
    /// Stop when the epoch-mean loss improves by less than `tol` for
    /// `patience` consecutive epochs; epochs in the config act as a cap.
    Converge { tol: f64, patience: usize },
}

/// Raw per-example loss decomposition; the trainer turns these into epoch
/// means and weighted totals.
pub(crate) struct LossParts {
    pub ce: f64,
    pub kl: f64,
    pub mse: f64,
}

pub(crate) fn run_training<F>(
    store: &mut ParamStore,
    plan: &SharingPlan,
    train: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
    loss_weights: (f64, f64, f64),
    stop: StopRule,
    rng: &mut ChaCha8Rng,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    F: FnMut(&mut Tape, &ParamStore, &Example) -> Result<(Var, LossParts)>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(KdError::Data("training set is empty".into()));
    }
    train.validate()?;
    let started = Instant::now();

    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = ((total_steps as f64 * cfg.warmup_frac).round() as usize).max(1);
    let mut opt = Adam::new(cfg.learning_rate, warmup_steps, cfg.clip_norm);

    let (w_ce, w_kl, w_mse) = loss_weights;
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TensorStore)> = None;
    let mut prev_total = f64::INFINITY;
    let mut stalled = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut ce_sum, mut kl_sum, mut mse_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            store.tensors.clear_grads();
            for &ix in batch {
                let ex = &train.examples[ix];
                let mut tape = Tape::new();
                let (loss, parts) = loss_fn(&mut tape, store, ex)?;
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward(scaled)?;
                tape.accumulate_grads_into(&mut store.tensors);
                ce_sum += parts.ce;
                kl_sum += parts.kl;
                mse_sum += parts.mse;
            }
            opt.apply(&mut store.tensors);
        }

        let loss_ce = ce_sum / n as f64;
        let loss_kl = kl_sum / n as f64;
        let loss_mse = mse_sum / n as f64;
        let loss_total = w_ce * loss_ce + w_kl * loss_kl + w_mse * loss_mse;

        let (dev_acc, dev_f1) = match dev {
            Some(dev) => {
                let m = evaluate(store, plan, dev)?;
                (Some(m.accuracy), m.f1)
            }
            None => (None, None),
        };
        records.push(EpochRecord { epoch, loss_total, loss_ce, loss_kl, loss_mse, dev_acc, dev_f1 });

        if let Some(acc) = dev_acc {
            let better = match &best {
                Some((best_acc, _, _)) => acc > *best_acc,
                None => true,
            };
            if better {
                best = Some((acc, epoch, store.tensors.clone()));
            }
        }

        if let StopRule::Converge { tol, patience } = stop {
            if prev_total - loss_total < tol {
                stalled += 1;
                if stalled >= patience {
                    break;
                }
            } else {
                stalled = 0;
            }
            prev_total = loss_total;
        }
    }

    let (best_epoch, best_dev_acc) = match best {
        Some((acc, epoch, tensors)) => {
            store.tensors = tensors;
            store.tensors.clear_grads();
            (epoch, Some(acc))
        }
        None => (records.last().expect("at least one epoch ran").epoch, None),
    };

    Ok(TrainReport {
        records,
        best_epoch,
        best_dev_acc,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Traced cross-entropy against the hard label at the classification head.
pub(crate) fn traced_ce_loss(
    tape: &mut Tape,
    store: &ParamStore,
    plan: &SharingPlan,
    ex: &Example,
) -> Result<(Var, LossParts)> {
    let traced = forward_traced(tape, store, plan, &ex.tokens)?;
    let probs = tape.softmax_rows(traced.logits)?;
    let ce = tape.cross_entropy(probs, ex.label)?;
    let parts = LossParts { ce: tape.scalar_value(ce), kl: 0.0, mse: 0.0 };
    Ok((ce, parts))
}

// ---------------------------------------------------------------------------
// Stages

/// Plain supervised finetuning on hard labels; the teacher-training stage.
pub fn finetune_teacher(
    store: &mut ParamStore,
    plan: &SharingPlan,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    run_training(
        store,
        plan,
        &data.train,
        Some(&data.dev),
        cfg,
        (1.0, 0.0, 0.0),
        StopRule::FixedEpochs,
        rng,
        |tape, store, ex| traced_ce_loss(tape, store, plan, ex),
    )
}

/// New student whose first `n` parameter sets and embeddings come from the
/// teacher; the classification head is fresh.
pub fn init_student_from_teacher(
    teacher: &ParamStore,
    n: usize,
    mode: SpsMode,
    rng: &mut impl Rng,
) -> Result<(ParamStore, SharingPlan)> {
    if n == 0 || n > teacher.num_param_sets() {
        return Err(KdError::invalid(
            "init_student_from_teacher",
            format!("need 1..={} parameter sets, got {n}", teacher.num_param_sets()),
        ));
    }
    let plan = build_sharing_plan(n, mode);
    let mut config = teacher.config;
    config.num_physical_layers = plan.len();
    let mut student = ParamStore::random_init(config, n, rng)?;
    for id in student.tensors.ids().collect::<Vec<_>>() {
        let name = student.tensors.name(id).to_string();
        if name.starts_with("head.") {
            continue;
        }
        let src_id = teacher
            .tensors
            .id_by_name(&name)
            .ok_or_else(|| KdError::invalid("init_student_from_teacher", format!("teacher is missing tensor {name:?}")))?;
        let src = teacher.tensors.get(src_id);
        let dst = student.tensors.get_mut(id);
        assert_eq!(src.shape(), dst.shape(), "{name} shape mismatch");
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok((student, plan))
}

/// Per-example teacher signals, computed once before training.
struct TeacherSignals {
    tempered_probs: Vec<f64>,
    hidden_states: Vec<Vec<f64>>,
}

/// Distill `teacher` into `student` on `data.train`, selecting the best
/// dev-accuracy epoch. Teacher outputs are precomputed and enter the loss
/// as constants, so no gradient can reach the teacher.
pub fn distill(
    student: &mut ParamStore,
    student_plan: &SharingPlan,
    teacher: &ParamStore,
    teacher_plan: &SharingPlan,
    data: &DatasetBundle,
    cfg: &KDConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(KdError::Data("training set is empty".into()));
    }
    if student.config.num_classes != teacher.config.num_classes {
        return Err(KdError::shape(
            "distill",
            format!(
                "student head has {} classes, teacher {}",
                student.config.num_classes, teacher.config.num_classes
            ),
        ));
    }
    if cfg.beta > 0.0 && student.config.hidden_dim != teacher.config.hidden_dim {
        return Err(KdError::shape(
            "distill",
            format!(
                "hidden dim {} (student) vs {} (teacher); the MSE term needs them equal",
                student.config.hidden_dim, teacher.config.hidden_dim
            ),
        ));
    }
    let pairs = if cfg.beta > 0.0 {
        resolve_pairs(cfg, student_plan.len(), teacher_plan.len())?
    } else {
        Vec::new()
    };

    let need_teacher = cfg.alpha > 0.0 || cfg.beta > 0.0;
    let index_of: HashMap<u64, usize> =
        data.train.examples.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let mut signals: Vec<TeacherSignals> = Vec::new();
    if need_teacher {
        signals.reserve(data.train.len());
        for ex in &data.train.examples {
            let out = crate::encoder::encoder_forward(teacher, teacher_plan, &ex.tokens)?;
            let z_t = Tensor::new(vec![out.logits.len()], out.logits)?;
            let tempered = temperature_softmax(&z_t, cfg.temperature)?;
            let hidden_states = if cfg.normalize_hidden {
                out.hidden_states
                    .iter()
                    .map(|h| unit_normalized(h))
                    .collect::<Result<Vec<_>>>()?
            } else {
                out.hidden_states
            };
            signals.push(TeacherSignals { tempered_probs: tempered.data().to_vec(), hidden_states });
        }
    }

    let alpha = cfg.alpha;
    let beta = cfg.beta;
    run_training(
        student,
        student_plan,
        &data.train,
        Some(&data.dev),
        &cfg.train,
        (1.0 - alpha, alpha, beta),
        StopRule::FixedEpochs,
        rng,
        |tape, store, ex| {
            let traced = forward_traced(tape, store, student_plan, &ex.tokens)?;
            let probs = tape.softmax_rows(traced.logits)?;
            let ce = tape.cross_entropy(probs, ex.label)?;
            let mut parts = LossParts { ce: tape.scalar_value(ce), kl: 0.0, mse: 0.0 };
            let mut total = tape.scale(ce, 1.0 - alpha);

            if alpha > 0.0 {
                let sig = &signals[index_of[&ex.id]];
                let z_scaled = tape.scale(traced.logits, 1.0 / cfg.student_temperature);
                let q_student = tape.softmax_rows(z_scaled)?;
                let p_teacher = tape
                    .constant(vec![sig.tempered_probs.len()], sig.tempered_probs.clone())?;
                let kl = match cfg.kl_direction {
                    KlDirection::TeacherStudent => tape.kl_div(p_teacher, q_student)?,
                    KlDirection::StudentTeacher => tape.kl_div(q_student, p_teacher)?,
                };
                parts.kl = tape.scalar_value(kl);
                let weighted = tape.scale(kl, alpha);
                total = tape.add(total, weighted)?;
            }

            if beta > 0.0 {
                let sig = &signals[index_of[&ex.id]];
                let mut mse_sum: Option<Var> = None;
                for &(k1, k2) in &pairs {
                    let mut h_s = traced.hidden_states[k1 - 1];
                    if cfg.normalize_hidden {
                        h_s = tape.normalize_rows(h_s)?;
                    }
                    let h_t = &sig.hidden_states[k2 - 1];
                    let h_t = tape.constant(vec![h_t.len()], h_t.clone())?;
                    let term = tape.mse(h_s, h_t)?;
                    mse_sum = Some(match mse_sum {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                if let Some(mse) = mse_sum {
                    parts.mse = tape.scalar_value(mse);
                    let weighted = tape.scale(mse, beta);
                    total = tape.add(total, weighted)?;
                }
            }

            Ok((total, parts))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numkit::finite_diff_check;
    use crate::tasks::{generate_synthetic_task, TaskKind, TaskSpec};
    use rand::SeedableRng;

    fn tiny_config(num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 32,
            max_seq_len: 16,
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            num_physical_layers: 1,
            num_classes,
        }
    }

    fn tiny_bundle(kind: TaskKind, seed: u64) -> DatasetBundle {
        let spec = TaskSpec { train_n: 24, dev_n: 12, test_n: 12, ..TaskSpec::new(kind) };
        generate_synthetic_task(&spec, seed).unwrap()
    }

    fn base_kd_config() -> KDConfig {
        KDConfig {
            alpha: 0.0,
            beta: 0.0,
            temperature: 1.0,
            student_temperature: 1.0,
            layer_pairs: vec![],
            threshold: 0.9,
            kl_direction: KlDirection::TeacherStudent,
            normalize_hidden: false,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 2,
                warmup_frac: 0.1,
                clip_norm: 1.0,
            },
            seed: 0,
        }
    }

    #[test]
    fn layer_pair_formula() {
        assert_eq!(default_layer_pairs(3, 12), vec![(1, 4), (2, 8), (3, 12)]);
        assert_eq!(
            default_layer_pairs(6, 12),
            vec![(1, 2), (2, 4), (3, 6), (4, 8), (5, 10), (6, 12)]
        );
        assert_eq!(default_layer_pairs(1, 12), vec![(1, 12)]);
        assert_eq!(default_layer_pairs(2, 1), vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn temperature_softmax_approaches_uniform() {
        let z = Tensor::new(vec![3], vec![5.0, -2.0, 0.5]).unwrap();
        let p = temperature_softmax(&z, 1e6).unwrap();
        let max = p.data().iter().cloned().fold(f64::MIN, f64::max);
        let min = p.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-3, "{:?}", p.data());
    }

    fn outputs(logits: Vec<f64>, hidden: Vec<Vec<f64>>) -> ForwardOutput {
        ForwardOutput { logits, hidden_states: hidden }
    }

    #[test]
    fn kd_loss_collapses_to_cross_entropy() {
        let cfg = base_kd_config();
        let s = outputs(vec![1.0, 0.0], vec![vec![0.3, -0.7]]);
        let t = outputs(vec![2.0, 0.0], vec![vec![0.1, 0.1]]);
        let parts = kd_loss(&s, &t, 0, &cfg).unwrap();
        // -ln(softmax([1,0])[0])
        let expect = 0.313_261_687_518_222_86;
        assert!((parts.total - expect).abs() <= 1e-12, "{}", parts.total);
        assert!((parts.ce - expect).abs() <= 1e-12);
        assert_eq!(parts.kl, 0.0);
        assert_eq!(parts.mse, 0.0);
    }

    #[test]
    fn kd_loss_zero_for_identical_distributions() {
        let mut cfg = base_kd_config();
        cfg.alpha = 1.0;
        cfg.temperature = 1.0;
        let z = vec![0.3, -1.2, 2.0];
        let s = outputs(z.clone(), vec![]);
        let t = outputs(z, vec![]);
        let parts = kd_loss(&s, &t, 0, &cfg).unwrap();
        assert!(parts.total.abs() <= 1e-12, "{}", parts.total);
        assert_eq!(parts.kl, 0.0);
    }

    #[test]
    fn kd_loss_matches_scalar_oracle() {
        // α=0.5, β=2, T=2, z_s=[1,0], z_t=[2,0], y=0, one layer pair with
        // h_s=[0.3,-0.7], h_t=[0.1,0.1]
        let mut cfg = base_kd_config();
        cfg.alpha = 0.5;
        cfg.beta = 2.0;
        cfg.temperature = 2.0;
        cfg.layer_pairs = vec![(1, 1)];
        let s = outputs(vec![1.0, 0.0], vec![vec![0.3, -0.7]]);
        let t = outputs(vec![2.0, 0.0], vec![vec![0.1, 0.1]]);
        let parts = kd_loss(&s, &t, 0, &cfg).unwrap();
        // ce = -ln(0.7310585786300049); z_t/T == z_s so the KL term is
        // exactly zero; mse = 0.2^2 + 0.8^2 = 0.68
        assert!((parts.ce - 0.313_261_687_518_222_86).abs() <= 1e-12);
        assert_eq!(parts.kl, 0.0);
        assert!((parts.mse - 0.68).abs() <= 1e-12);
        let expect_total = 0.5 * 0.313_261_687_518_222_86 + 2.0 * 0.68;
        assert!((parts.total - expect_total).abs() <= 1e-12, "{}", parts.total);
        // decomposition recombines
        let recombined = (1.0 - cfg.alpha) * parts.ce + cfg.alpha * parts.kl + cfg.beta * parts.mse;
        assert!((parts.total - recombined).abs() <= 1e-10);
    }

    #[test]
    fn kd_loss_nonzero_kl_oracle() {
        let mut cfg = base_kd_config();
        cfg.alpha = 1.0;
        let s = outputs(vec![0.0, 0.0], vec![]);
        let t = outputs(vec![f64::ln(0.9 / 0.1), 0.0], vec![]);
        // teacher probs [0.9, 0.1] vs student [0.5, 0.5]:
        // KL(t‖s) = 0.9 ln 1.8 + 0.1 ln 0.2
        let parts = kd_loss(&s, &t, 0, &cfg).unwrap();
        assert!((parts.kl - 0.368_064_207_168_497_15).abs() <= 1e-12, "{}", parts.kl);
        // KL(s‖t) = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        cfg.kl_direction = KlDirection::StudentTeacher;
        let parts = kd_loss(&s, &t, 0, &cfg).unwrap();
        assert!((parts.kl - 0.510_825_623_765_990_7).abs() <= 1e-12, "{}", parts.kl);
    }

    #[test]
    fn kd_loss_respects_kl_direction() {
        let mut cfg = base_kd_config();
        cfg.alpha = 1.0;
        let s = outputs(vec![1.0, 0.0], vec![]);
        let t = outputs(vec![3.0, 0.0], vec![]);
        let forward = kd_loss(&s, &t, 0, &cfg).unwrap();
        cfg.kl_direction = KlDirection::StudentTeacher;
        let reverse = kd_loss(&s, &t, 0, &cfg).unwrap();
        assert!(forward.kl > 0.0 && reverse.kl > 0.0);
        assert_ne!(forward.kl, reverse.kl, "KL is asymmetric");
    }

    #[test]
    fn kd_loss_errors() {
        let cfg = base_kd_config();
        let s = outputs(vec![1.0, 0.0], vec![]);
        let t3 = outputs(vec![1.0, 0.0, 0.0], vec![]);
        assert!(kd_loss(&s, &t3, 0, &cfg).is_err(), "class-count mismatch");

        let mut cfg_mse = base_kd_config();
        cfg_mse.beta = 1.0;
        cfg_mse.layer_pairs = vec![(1, 1)];
        let s1 = outputs(vec![1.0, 0.0], vec![vec![0.1, 0.2]]);
        let t1 = outputs(vec![1.0, 0.0], vec![vec![0.1, 0.2, 0.3]]);
        assert!(kd_loss(&s1, &t1, 0, &cfg_mse).is_err(), "hidden-dim mismatch");

        cfg_mse.layer_pairs = vec![(2, 1)];
        let t2 = outputs(vec![1.0, 0.0], vec![vec![0.1, 0.2]]);
        assert!(kd_loss(&s1, &t2, 0, &cfg_mse).is_err(), "pair out of range");

        let mut bad = base_kd_config();
        bad.alpha = 1.5;
        assert!(kd_loss(&s, &s, 0, &bad).is_err(), "alpha out of range");
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut tensors = TensorStore::new();
        let id = tensors.insert("w", Tensor::new(vec![1], vec![10.0]).unwrap().with_grad(true));
        let mut opt = Adam::new(0.1, 5, 1.0);
        for _ in 0..400 {
            tensors.clear_grads();
            let w = tensors.get(id).data()[0];
            tensors.get_mut(id).accumulate_grad(&[2.0 * (w - 3.0)]);
            opt.apply(&mut tensors);
        }
        let w = tensors.get(id).data()[0];
        assert!((w - 3.0).abs() < 1e-2, "{w}");
    }

    #[test]
    fn student_initialization_copies_teacher_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let teacher = ParamStore::random_init(
            EncoderConfig { num_physical_layers: 3, ..tiny_config(2) },
            3,
            &mut rng,
        )
        .unwrap();
        let (student, plan) = init_student_from_teacher(&teacher, 1, SpsMode::Sps2, &mut rng).unwrap();
        assert_eq!(plan.len(), 2, "SPS2 with n=1 has two physical layers");
        assert_eq!(student.num_param_sets(), 1);
        for (_, name, tensor) in student.tensors.iter() {
            let in_teacher = teacher.tensors.id_by_name(name);
            if name.starts_with("head.") {
                // fresh head: weights must NOT match the teacher's
                if name == "head.w" {
                    let src = teacher.tensors.get(in_teacher.unwrap());
                    assert_ne!(src.data(), tensor.data());
                }
                continue;
            }
            let src = teacher.tensors.get(in_teacher.expect("shared name"));
            // checksum comparison: identical bytes
            let sum_src: f64 = src.data().iter().map(|v| v.abs()).sum();
            let sum_dst: f64 = tensor.data().iter().map(|v| v.abs()).sum();
            assert_eq!(src.data(), tensor.data(), "{name}");
            assert_eq!(sum_src.to_bits(), sum_dst.to_bits(), "{name}");
        }
    }

    #[test]
    fn student_initialization_rejects_oversized_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let teacher = ParamStore::random_init(
            EncoderConfig { num_physical_layers: 2, ..tiny_config(2) },
            2,
            &mut rng,
        )
        .unwrap();
        assert!(init_student_from_teacher(&teacher, 3, SpsMode::Plain, &mut rng).is_err());
        assert!(init_student_from_teacher(&teacher, 0, SpsMode::Plain, &mut rng).is_err());
    }

    #[test]
    fn finetune_fits_a_constant_label_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::random_init(tiny_config(2), 1, &mut rng).unwrap();
        let plan = build_sharing_plan(1, SpsMode::Plain);
        let mut bundle = tiny_bundle(TaskKind::MajorityToken, 11);
        for ex in &mut bundle.train.examples {
            ex.label = 1;
        }
        for ex in &mut bundle.dev.examples {
            ex.label = 1;
        }
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            epochs: 5,
            warmup_frac: 0.1,
            clip_norm: 1.0,
        };
        finetune_teacher(&mut store, &plan, &bundle, &cfg, &mut rng).unwrap();
        let metrics = evaluate(&store, &plan, &bundle.train).unwrap();
        assert_eq!(metrics.accuracy, 1.0, "constant-label set must be fit exactly");
    }

    #[test]
    fn finetune_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::random_init(tiny_config(2), 1, &mut rng).unwrap();
            let plan = build_sharing_plan(1, SpsMode::Plain);
            let bundle = tiny_bundle(TaskKind::MajorityToken, 2);
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 2,
                warmup_frac: 0.1,
                clip_norm: 1.0,
            };
            let report = finetune_teacher(&mut store, &plan, &bundle, &cfg, &mut rng).unwrap();
            (store, report)
        };
        let (store_a, report_a) = run();
        let (store_b, report_b) = run();
        assert_eq!(report_a.records, report_b.records);
        for ((_, name, ta), (_, _, tb)) in store_a.tensors.iter().zip(store_b.tensors.iter()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn distill_with_zero_weights_matches_plain_finetuning_bitwise() {
        let bundle = tiny_bundle(TaskKind::MajorityToken, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let teacher = ParamStore::random_init(
            EncoderConfig { num_physical_layers: 2, ..tiny_config(2) },
            2,
            &mut rng,
        )
        .unwrap();
        let teacher_plan = build_sharing_plan(2, SpsMode::Plain);

        let mut cfg = base_kd_config();
        cfg.train.epochs = 2;

        let mut init_rng = ChaCha8Rng::seed_from_u64(40);
        let (student_a, plan) =
            init_student_from_teacher(&teacher, 1, SpsMode::Plain, &mut init_rng).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(40);
        let (student_b, _) =
            init_student_from_teacher(&teacher, 1, SpsMode::Plain, &mut init_rng).unwrap();

        let mut a = student_a;
        let mut rng_a = ChaCha8Rng::seed_from_u64(77);
        let report_a =
            distill(&mut a, &plan, &teacher, &teacher_plan, &bundle, &cfg, &mut rng_a).unwrap();

        let mut b = student_b;
        let mut rng_b = ChaCha8Rng::seed_from_u64(77);
        let report_b =
            finetune_teacher(&mut b, &plan, &bundle, &cfg.train, &mut rng_b).unwrap();

        assert_eq!(report_a.records, report_b.records);
        for ((_, name, ta), (_, _, tb)) in a.tensors.iter().zip(b.tensors.iter()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn distill_decomposition_recombines_and_teacher_keeps_no_grads() {
        let bundle = tiny_bundle(TaskKind::MajorityToken, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let teacher = ParamStore::random_init(
            EncoderConfig { num_physical_layers: 2, ..tiny_config(2) },
            2,
            &mut rng,
        )
        .unwrap();
        let teacher_plan = build_sharing_plan(2, SpsMode::Plain);
        let (mut student, plan) =
            init_student_from_teacher(&teacher, 1, SpsMode::Sps2, &mut rng).unwrap();

        let mut cfg = base_kd_config();
        cfg.alpha = 0.3;
        cfg.beta = 0.5;
        cfg.temperature = 2.0;
        let report =
            distill(&mut student, &plan, &teacher, &teacher_plan, &bundle, &cfg, &mut rng).unwrap();

        for rec in &report.records {
            let recombined =
                (1.0 - cfg.alpha) * rec.loss_ce + cfg.alpha * rec.loss_kl + cfg.beta * rec.loss_mse;
            assert!((rec.loss_total - recombined).abs() <= 1e-10);
            assert!(rec.loss_kl > 0.0, "soft targets differ from the student early on");
            assert!(rec.loss_mse > 0.0);
        }
        for (_, name, t) in teacher.tensors.iter() {
            assert!(t.grad().is_none(), "teacher tensor {name} received a gradient");
        }
        assert!(report.best_epoch >= 1 && report.best_epoch <= cfg.train.epochs);
        // best-dev bookkeeping: best_dev_acc is the max, ties to earliest
        let best = report.best_dev_acc.unwrap();
        let max = report.records.iter().filter_map(|r| r.dev_acc).fold(f64::MIN, f64::max);
        assert_eq!(best, max);
        let first_max = report.records.iter().find(|r| r.dev_acc == Some(max)).unwrap().epoch;
        assert_eq!(report.best_epoch, first_max);
    }

    #[test]
    fn one_example_loss_decreases_under_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::random_init(tiny_config(2), 1, &mut rng).unwrap();
        let plan = build_sharing_plan(1, SpsMode::Plain);
        let mut bundle = tiny_bundle(TaskKind::MajorityToken, 19);
        bundle.train.examples.truncate(1);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: 6,
            warmup_frac: 0.0,
            clip_norm: 1.0,
        };
        let report = finetune_teacher(&mut store, &plan, &bundle, &cfg, &mut rng).unwrap();
        let first = report.records.first().unwrap().loss_total;
        let last = report.records.last().unwrap().loss_total;
        assert!(last < first, "{first} -> {last}");
    }

    /// Gradients of the full composite loss, including through shared SPS2
    /// parameters and the normalize-then-MSE path, agree with central
    /// finite differences.
    #[test]
    fn traced_kd_loss_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let config = EncoderConfig {
            vocab_size: 16,
            max_seq_len: 8,
            hidden_dim: 4,
            num_heads: 2,
            ff_dim: 8,
            num_physical_layers: 2,
            num_classes: 2,
        };
        let store = ParamStore::random_init(config, 1, &mut rng).unwrap();
        let plan = build_sharing_plan(1, SpsMode::Sps2);
        let tokens = [0usize, 5, 9, 7, 4, 4, 6, 8];
        let label = 1usize;
        let teacher_probs = vec![0.75, 0.25];
        let teacher_hidden: Vec<Vec<f64>> =
            vec![vec![0.3, -0.2, 0.5, 0.1], vec![-0.4, 0.8, 0.05, -0.3]];

        for normalize in [false, true] {
            let mut tensors = store.tensors.clone();
            let report = finite_diff_check(&mut tensors, 1e-5, |tape, tensors| {
                let view = store.with_tensors(tensors.clone());
                let traced = forward_traced(tape, &view, &plan, &tokens)?;
                let probs = tape.softmax_rows(traced.logits)?;
                let ce = tape.cross_entropy(probs, label)?;
                let mut total = tape.scale(ce, 0.6);
                let p = tape.constant(vec![2], teacher_probs.clone())?;
                let q = tape.softmax_rows(traced.logits)?;
                let kl = tape.kl_div(p, q)?;
                let kl_w = tape.scale(kl, 0.4);
                total = tape.add(total, kl_w)?;
                for (k, h_t) in teacher_hidden.iter().enumerate() {
                    let mut h_s = traced.hidden_states[k];
                    if normalize {
                        h_s = tape.normalize_rows(h_s)?;
                    }
                    let h_t = tape.constant(vec![4], h_t.clone())?;
                    let term = tape.mse(h_s, h_t)?;
                    let term_w = tape.scale(term, 0.7);
                    total = tape.add(total, term_w)?;
                }
                Ok(total)
            })
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "normalize={normalize}: {} at {}[{}]",
                report.max_rel_err,
                report.worst_tensor,
                report.worst_index
            );
        }
    }

    #[test]
    fn jsonl_report_has_one_line_per_epoch_plus_summary() {
        let report = TrainReport {
            records: vec![EpochRecord {
                epoch: 1,
                loss_total: 0.5,
                loss_ce: 0.5,
                loss_kl: 0.0,
                loss_mse: 0.0,
                dev_acc: Some(0.75),
                dev_f1: Some(0.7),
            }],
            best_epoch: 1,
            best_dev_acc: Some(0.75),
            wall_clock_secs: 0.1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        report.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["epoch"], 1);
        assert_eq!(first["dev_acc"], 0.75);
        let last: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(last["best_epoch"], 1);
    }
}
