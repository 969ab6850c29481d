//! Pretraining targets derived from a trained teacher's own predictions:
//! each training example gets a label describing whether the teacher was
//! correct and/or confident on it, and the student is pretrained to predict
//! that label before seeing the real task.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{run_training, traced_ce_loss, StopRule, TrainConfig, TrainReport};
use crate::encoder::encoder_forward;
use crate::error::{KdError, Result};
use crate::numkit::{argmax, softmax_rows, Tensor};
use crate::sps::{ParamStore, SharingPlan};
use crate::tasks::{Dataset, Example};

/// How teacher behaviour maps onto pretraining labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtpScheme {
    /// Correctness × confidence: four labels.
    Full4,
    /// Correct vs wrong only.
    CorrectOnly2,
    /// Confident vs unconfident only.
    ConfidenceOnly2,
}

impl PtpScheme {
    pub fn num_labels(self) -> usize {
        match self {
            PtpScheme::Full4 => 4,
            PtpScheme::CorrectOnly2 | PtpScheme::ConfidenceOnly2 => 2,
        }
    }

    pub fn label_name(self, label: usize) -> Option<&'static str> {
        let names = self.label_names();
        names.get(label).copied()
    }

    pub fn label_names(self) -> &'static [&'static str] {
        match self {
            PtpScheme::Full4 => &[
                "confidently-correct",
                "unconfidently-correct",
                "confidently-wrong",
                "unconfidently-wrong",
            ],
            PtpScheme::CorrectOnly2 => &["correct", "wrong"],
            PtpScheme::ConfidenceOnly2 => &["confident", "unconfident"],
        }
    }

    pub fn label_by_name(self, name: &str) -> Option<usize> {
        self.label_names().iter().position(|&n| n == name)
    }
}

impl std::fmt::Display for PtpScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PtpScheme::Full4 => "full4",
            PtpScheme::CorrectOnly2 => "correct-only2",
            PtpScheme::ConfidenceOnly2 => "confidence-only2",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for PtpScheme {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full4" => Ok(PtpScheme::Full4),
            "correct-only2" => Ok(PtpScheme::CorrectOnly2),
            "confidence-only2" => Ok(PtpScheme::ConfidenceOnly2),
            other => Err(KdError::Config(format!("unknown ptp scheme {other:?}"))),
        }
    }
}

/// Teacher inference summary for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPrediction {
    pub example_id: u64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    /// max(probs)
    pub confidence: f64,
    pub correct: bool,
}

/// Label an example by teacher behaviour. "Confident" means confidence
/// strictly above `t`.
pub fn assign_ptp_label(
    correct: bool,
    confidence: f64,
    t: f64,
    scheme: PtpScheme,
) -> Result<usize> {
    if !(0.5..=1.0).contains(&t) {
        return Err(KdError::invalid(
            "assign_ptp_label",
            format!("threshold {t} outside [0.5, 1.0]"),
        ));
    }
    if !(confidence.is_finite() && confidence > 0.0 && confidence <= 1.0) {
        return Err(KdError::invalid(
            "assign_ptp_label",
            format!("confidence {confidence} outside (0, 1]"),
        ));
    }
    let confident = confidence > t;
    Ok(match scheme {
        PtpScheme::Full4 => match (correct, confident) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        },
        PtpScheme::CorrectOnly2 => usize::from(!correct),
        PtpScheme::ConfidenceOnly2 => usize::from(!confident),
    })
}

/// The downstream inputs relabelled by teacher behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct PtpDataset {
    /// Same tokens as the source set; labels are PTP labels.
    pub data: Dataset,
    pub scheme: PtpScheme,
    pub threshold: f64,
    /// Aligned with `data.examples`.
    pub predictions: Vec<TeacherPrediction>,
}

/// Run the teacher over every example once and attach PTP labels.
pub fn build_ptp_dataset(
    teacher: &ParamStore,
    teacher_plan: &SharingPlan,
    data: &Dataset,
    t: f64,
    scheme: PtpScheme,
) -> Result<PtpDataset> {
    if data.is_empty() {
        return Err(KdError::Data("cannot build PTP labels for an empty dataset".into()));
    }
    data.validate()?;
    if teacher.config.num_classes != data.num_classes {
        return Err(KdError::invalid(
            "build_ptp_dataset",
            format!(
                "teacher head has {} classes, dataset has {}",
                teacher.config.num_classes, data.num_classes
            ),
        ));
    }
    let mut examples = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for ex in &data.examples {
        let out = encoder_forward(teacher, teacher_plan, &ex.tokens)?;
        let z = Tensor::new(vec![out.logits.len()], out.logits.clone())?;
        let probs = softmax_rows(&z)?;
        let predicted_class = argmax(probs.data());
        let confidence = probs.data()[predicted_class];
        let correct = predicted_class == ex.label;
        let label = assign_ptp_label(correct, confidence, t, scheme)?;
        examples.push(Example { id: ex.id, tokens: ex.tokens.clone(), label });
        predictions.push(TeacherPrediction {
            example_id: ex.id,
            logits: out.logits,
            probs: probs.data().to_vec(),
            predicted_class,
            confidence,
            correct,
        });
    }
    Ok(PtpDataset {
        data: Dataset { examples, num_classes: scheme.num_labels() },
        scheme,
        threshold: t,
        predictions,
    })
}

// ---------------------------------------------------------------------------
// Persistence: one header line, then example_id / label name / confidence
// (6 decimals) / teacher-correct flag per row.

pub fn save_ptp_tsv(path: &Path, ptp: &PtpDataset) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# scheme {} threshold {}", ptp.scheme, ptp.threshold);
    for (ex, pred) in ptp.data.examples.iter().zip(&ptp.predictions) {
        let name = ptp
            .scheme
            .label_name(ex.label)
            .ok_or_else(|| KdError::Data(format!("label {} invalid for {}", ex.label, ptp.scheme)))?;
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{}",
            ex.id,
            name,
            pred.confidence,
            u8::from(pred.correct)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A row of the persisted PTP file.
#[derive(Debug, Clone, PartialEq)]
pub struct PtpRecord {
    pub example_id: u64,
    pub label: usize,
    pub confidence: f64,
    pub teacher_correct: bool,
}

pub fn load_ptp_tsv(path: &Path) -> Result<(PtpScheme, f64, Vec<PtpRecord>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KdError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| KdError::Data(format!("{}: empty file", path.display())))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (scheme, threshold) = match fields.as_slice() {
        ["#", "scheme", s, "threshold", t] => {
            let scheme: PtpScheme = s.parse()?;
            let threshold: f64 = t
                .parse()
                .map_err(|_| KdError::Data(format!("bad threshold {t:?} in header")))?;
            (scheme, threshold)
        }
        _ => return Err(KdError::Data(format!("{}: malformed header {header:?}", path.display()))),
    };
    let mut records = Vec::new();
    for (ix, line) in lines {
        let lineno = ix + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, name, conf, correct] = cols.as_slice() else {
            return Err(KdError::Data(format!("line {lineno}: expected 4 fields")));
        };
        let example_id: u64 = id
            .parse()
            .map_err(|_| KdError::Data(format!("line {lineno}: bad example id {id:?}")))?;
        let label = scheme
            .label_by_name(name)
            .ok_or_else(|| KdError::Data(format!("line {lineno}: unknown label {name:?}")))?;
        let confidence: f64 = conf
            .parse()
            .map_err(|_| KdError::Data(format!("line {lineno}: bad confidence {conf:?}")))?;
        let teacher_correct = match *correct {
            "0" => false,
            "1" => true,
            other => {
                return Err(KdError::Data(format!("line {lineno}: bad correct flag {other:?}")))
            }
        };
        records.push(PtpRecord { example_id, label, confidence, teacher_correct });
    }
    if records.is_empty() {
        return Err(KdError::Data(format!("{}: no records", path.display())));
    }
    Ok((scheme, threshold, records))
}

/// Rebuild a PTP training set by joining persisted labels onto the source
/// examples (by example id). Confidence values on disk are rounded, so this
/// carries labels only.
pub fn ptp_dataset_from_records(
    source: &Dataset,
    scheme: PtpScheme,
    threshold: f64,
    records: &[PtpRecord],
) -> Result<PtpDataset> {
    if records.len() != source.len() {
        return Err(KdError::Data(format!(
            "{} PTP records for {} examples",
            records.len(),
            source.len()
        )));
    }
    let mut examples = Vec::with_capacity(source.len());
    let mut predictions = Vec::with_capacity(source.len());
    for (ex, rec) in source.examples.iter().zip(records) {
        if ex.id != rec.example_id {
            return Err(KdError::Data(format!(
                "PTP record for example {} does not match source example {}",
                rec.example_id, ex.id
            )));
        }
        examples.push(Example { id: ex.id, tokens: ex.tokens.clone(), label: rec.label });
        predictions.push(TeacherPrediction {
            example_id: ex.id,
            logits: vec![],
            probs: vec![],
            predicted_class: 0,
            confidence: rec.confidence,
            correct: rec.teacher_correct,
        });
    }
    Ok(PtpDataset {
        data: Dataset { examples, num_classes: scheme.num_labels() },
        scheme,
        threshold,
        predictions,
    })
}

// ---------------------------------------------------------------------------
// Pretraining stage

/// Pretrain the student encoder to predict PTP labels through a disposable
/// linear head, then return it with a fresh downstream head. Stops when the
/// epoch-mean loss improves by < 1e-4 twice in a row; `cfg.epochs` caps the
/// run.
pub fn ptp_pretrain(
    student: &ParamStore,
    plan: &SharingPlan,
    ptp_data: &PtpDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, TrainReport)> {
    if ptp_data.data.is_empty() {
        return Err(KdError::Data("PTP dataset is empty".into()));
    }
    let mut ptp_headed = with_fresh_head(student, ptp_data.scheme.num_labels(), rng)?;
    let report = run_training(
        &mut ptp_headed,
        plan,
        &ptp_data.data,
        None,
        cfg,
        (1.0, 0.0, 0.0),
        StopRule::Converge { tol: 1e-4, patience: 2 },
        rng,
        |tape, store, ex| traced_ce_loss(tape, store, plan, ex),
    )?;
    // drop the PTP head: keep the trained encoder, attach a fresh task head
    let result = with_fresh_head(&ptp_headed, student.config.num_classes, rng)?;
    Ok((result, report))
}

/// Copy of `source` with the classification head re-initialized at a new
/// output size.
fn with_fresh_head(source: &ParamStore, num_classes: usize, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut config = source.config;
    config.num_classes = num_classes;
    let mut fresh = ParamStore::random_init(config, source.num_param_sets(), rng)?;
    for id in fresh.tensors.ids().collect::<Vec<_>>() {
        let name = fresh.tensors.name(id).to_string();
        if name.starts_with("head.") {
            continue;
        }
        let src_id = source
            .tensors
            .id_by_name(&name)
            .ok_or_else(|| KdError::invalid("with_fresh_head", format!("missing tensor {name:?}")))?;
        let src = source.tensors.get(src_id);
        let dst = fresh.tensors.get_mut(id);
        assert_eq!(src.shape(), dst.shape(), "{name} shape mismatch");
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::sps::{build_sharing_plan, SpsMode};
    use crate::tasks::{generate_synthetic_task, TaskKind, TaskSpec};
    use rand::SeedableRng;

    #[test]
    fn table_rules_full4() {
        // (correct, confidence) against t=0.9
        assert_eq!(assign_ptp_label(true, 0.95, 0.9, PtpScheme::Full4).unwrap(), 0);
        assert_eq!(assign_ptp_label(true, 0.70, 0.9, PtpScheme::Full4).unwrap(), 1);
        assert_eq!(assign_ptp_label(false, 0.95, 0.9, PtpScheme::Full4).unwrap(), 2);
        assert_eq!(assign_ptp_label(false, 0.70, 0.9, PtpScheme::Full4).unwrap(), 3);
    }

    #[test]
    fn boundary_confidence_is_not_confident() {
        // confidence exactly t fails the strict comparison
        assert_eq!(assign_ptp_label(true, 0.9, 0.9, PtpScheme::Full4).unwrap(), 1);
        assert_eq!(assign_ptp_label(false, 0.9, 0.9, PtpScheme::Full4).unwrap(), 3);
        assert_eq!(assign_ptp_label(true, 0.9, 0.9, PtpScheme::ConfidenceOnly2).unwrap(), 1);
    }

    #[test]
    fn two_label_schemes() {
        assert_eq!(assign_ptp_label(true, 0.6, 0.9, PtpScheme::CorrectOnly2).unwrap(), 0);
        assert_eq!(assign_ptp_label(false, 0.99, 0.9, PtpScheme::CorrectOnly2).unwrap(), 1);
        assert_eq!(assign_ptp_label(false, 0.99, 0.9, PtpScheme::ConfidenceOnly2).unwrap(), 0);
        assert_eq!(assign_ptp_label(true, 0.6, 0.9, PtpScheme::ConfidenceOnly2).unwrap(), 1);
    }

    #[test]
    fn threshold_and_confidence_validation() {
        assert!(assign_ptp_label(true, 0.8, 0.4, PtpScheme::Full4).is_err());
        assert!(assign_ptp_label(true, 0.8, 1.1, PtpScheme::Full4).is_err());
        assert!(assign_ptp_label(true, 0.0, 0.9, PtpScheme::Full4).is_err());
        assert!(assign_ptp_label(true, 1.2, 0.9, PtpScheme::Full4).is_err());
        // t exactly at the bounds is allowed
        assert!(assign_ptp_label(true, 0.8, 0.5, PtpScheme::Full4).is_ok());
        assert!(assign_ptp_label(true, 0.8, 1.0, PtpScheme::Full4).is_ok());
    }

    #[test]
    fn every_input_gets_exactly_one_full4_label() {
        for correct in [false, true] {
            for confidence in [0.2, 0.5, 0.6, 0.9, 0.900000001, 1.0] {
                let label =
                    assign_ptp_label(correct, confidence, 0.9, PtpScheme::Full4).unwrap();
                assert!(label < 4);
            }
        }
    }

    fn tiny_teacher(seed: u64) -> (ParamStore, SharingPlan) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = EncoderConfig {
            vocab_size: 32,
            max_seq_len: 16,
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            num_physical_layers: 2,
            num_classes: 2,
        };
        let store = ParamStore::random_init(config, 2, &mut rng).unwrap();
        (store, build_sharing_plan(2, SpsMode::Plain))
    }

    fn tiny_data(seed: u64) -> Dataset {
        let spec = TaskSpec {
            train_n: 30,
            dev_n: 10,
            test_n: 10,
            ..TaskSpec::new(TaskKind::MajorityToken)
        };
        generate_synthetic_task(&spec, seed).unwrap().train
    }

    #[test]
    fn built_labels_match_per_example_rederivation() {
        let (teacher, plan) = tiny_teacher(1);
        let data = tiny_data(8);
        let ptp = build_ptp_dataset(&teacher, &plan, &data, 0.6, PtpScheme::Full4).unwrap();
        assert_eq!(ptp.data.len(), data.len());
        assert_eq!(ptp.data.num_classes, 4);
        for (ex, (src, pred)) in
            ptp.data.examples.iter().zip(data.examples.iter().zip(&ptp.predictions))
        {
            // independent re-derivation: naive softmax, manual max scan
            let out = encoder_forward(&teacher, &plan, &src.tokens).unwrap();
            let exp: Vec<f64> = out.logits.iter().map(|z| z.exp()).collect();
            let sum: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|e| e / sum).collect();
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            let correct = best == src.label;
            let confident = probs[best] > 0.6;
            let want = match (correct, confident) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            assert_eq!(ex.label, want);
            assert_eq!(pred.predicted_class, best);
            assert!((pred.confidence - probs[best]).abs() < 1e-9);
            assert_eq!(pred.correct, correct);
            assert!(pred.confidence >= 1.0 / 2.0 - 1e-12 && pred.confidence <= 1.0);
            assert_eq!(ex.tokens, src.tokens, "inputs must be unchanged");
        }
    }

    #[test]
    fn full4_coarsened_by_correctness_equals_correct_only() {
        let (teacher, plan) = tiny_teacher(2);
        let data = tiny_data(9);
        let full = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::Full4).unwrap();
        let coarse =
            build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::CorrectOnly2).unwrap();
        for (f, c) in full.data.examples.iter().zip(&coarse.data.examples) {
            // Full4: {0,1} are correct, {2,3} wrong
            assert_eq!(usize::from(f.label >= 2), c.label);
        }
    }

    #[test]
    fn build_is_deterministic_and_checks_classes() {
        let (teacher, plan) = tiny_teacher(3);
        let data = tiny_data(10);
        let a = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::Full4).unwrap();
        let b = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::Full4).unwrap();
        assert_eq!(a, b);

        let mut three_class = data.clone();
        three_class.num_classes = 3;
        assert!(build_ptp_dataset(&teacher, &plan, &three_class, 0.9, PtpScheme::Full4).is_err());
    }

    #[test]
    fn tsv_roundtrip_preserves_labels_and_flags() {
        let (teacher, plan) = tiny_teacher(4);
        let data = tiny_data(11);
        let ptp = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::Full4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ptp.tsv");
        save_ptp_tsv(&path, &ptp).unwrap();

        let (scheme, threshold, records) = load_ptp_tsv(&path).unwrap();
        assert_eq!(scheme, PtpScheme::Full4);
        assert_eq!(threshold, 0.9);
        assert_eq!(records.len(), ptp.data.len());
        for (rec, (ex, pred)) in
            records.iter().zip(ptp.data.examples.iter().zip(&ptp.predictions))
        {
            assert_eq!(rec.example_id, ex.id);
            assert_eq!(rec.label, ex.label);
            assert_eq!(rec.teacher_correct, pred.correct);
            assert!((rec.confidence - pred.confidence).abs() <= 5e-7, "6-decimal rounding");
        }

        let rebuilt = ptp_dataset_from_records(&data, scheme, threshold, &records).unwrap();
        assert_eq!(rebuilt.data, ptp.data);
    }

    #[test]
    fn tsv_loader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "no header here\n").unwrap();
        assert!(load_ptp_tsv(&path).is_err());
        std::fs::write(&path, "# scheme full4 threshold 0.9\n1\tnot-a-label\t0.5\t1\n").unwrap();
        let err = load_ptp_tsv(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn pretraining_trains_encoder_and_discards_ptp_head() {
        let (teacher, plan) = tiny_teacher(5);
        let data = tiny_data(12);
        let ptp = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::Full4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let student = ParamStore::random_init(teacher.config, 2, &mut rng).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 4,
            warmup_frac: 0.1,
            clip_norm: 1.0,
        };
        let (trained, report) = ptp_pretrain(&student, &plan, &ptp, &cfg, &mut rng).unwrap();

        // encoder weights moved
        let before = student.tensors.get(student.tensors.id_by_name("set0.w_q").unwrap());
        let after = trained.tensors.get(trained.tensors.id_by_name("set0.w_q").unwrap());
        assert_ne!(before.data(), after.data(), "encoder must receive updates");
        // returned head is task-sized, not PTP-sized
        assert_eq!(trained.config.num_classes, 2);
        let head_w = trained.tensors.get(trained.tensors.id_by_name("head.w").unwrap());
        assert_eq!(head_w.shape(), &[8, 2]);
        // shapes preserved elsewhere
        assert_eq!(trained.config.hidden_dim, student.config.hidden_dim);
        assert!(!report.records.is_empty());
        assert!(report.records.len() <= 4);
        // training loss not increasing overall
        let first = report.records.first().unwrap().loss_total;
        let last = report.records.last().unwrap().loss_total;
        assert!(last <= first, "{first} -> {last}");
    }

    #[test]
    fn pretraining_on_single_label_set_saturates() {
        let (teacher, plan) = tiny_teacher(7);
        let data = tiny_data(13);
        let mut ptp = build_ptp_dataset(&teacher, &plan, &data, 0.9, PtpScheme::CorrectOnly2)
            .unwrap();
        for ex in &mut ptp.data.examples {
            ex.label = 0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let student = ParamStore::random_init(teacher.config, 2, &mut rng).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            epochs: 30,
            warmup_frac: 0.1,
            clip_norm: 1.0,
        };
        let (_, report) = ptp_pretrain(&student, &plan, &ptp, &cfg, &mut rng).unwrap();
        let last = report.records.last().unwrap().loss_total;
        assert!(last < 0.05, "constant-label loss should approach 0, got {last}");
    }

    #[test]
    fn pretraining_rejects_empty_data() {
        let (teacher, plan) = tiny_teacher(9);
        let ptp = PtpDataset {
            data: Dataset { examples: vec![], num_classes: 4 },
            scheme: PtpScheme::Full4,
            threshold: 0.9,
            predictions: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 2,
            warmup_frac: 0.1,
            clip_norm: 1.0,
        };
        assert!(ptp_pretrain(&teacher, &plan, &ptp, &cfg, &mut rng).is_err());
    }
}
