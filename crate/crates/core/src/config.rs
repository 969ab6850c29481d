//! Run configuration: one TOML file describes the data source, the teacher
//! and student shapes, the sharing mode, the PTP scheme, and the
//! distillation hyperparameters. Unknown keys are rejected so typos fail
//! loudly, and the full parsed config is echoed into each run's summary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{KDConfig, TrainConfig};
use crate::encoder::EncoderConfig;
use crate::error::{KdError, Result};
use crate::ptp::PtpScheme;
use crate::sps::SpsMode;
use crate::tasks::TaskSpec;

/// PTP stage selector; `None` skips the stage entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtpChoice {
    None,
    Full4,
    CorrectOnly2,
    ConfidenceOnly2,
}

impl PtpChoice {
    pub fn as_scheme(self) -> Option<PtpScheme> {
        match self {
            PtpChoice::None => None,
            PtpChoice::Full4 => Some(PtpScheme::Full4),
            PtpChoice::CorrectOnly2 => Some(PtpScheme::CorrectOnly2),
            PtpChoice::ConfidenceOnly2 => Some(PtpScheme::ConfidenceOnly2),
        }
    }
}

impl std::fmt::Display for PtpChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.as_scheme() {
            Some(scheme) => write!(f, "{scheme}"),
            None => write!(f, "none"),
        }
    }
}

/// External TSV splits plus the tokenizer budget applied to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSource {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub max_seq_len: usize,
    pub max_vocab: usize,
}

/// Teacher geometry; vocabulary and sequence length come from the data
/// source. The student inherits everything except depth (its weights are
/// copied from the teacher, so the shapes must line up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// Number of independent parameter sets copied from the teacher.
    pub num_layers: usize,
}

fn default_ptp_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        epochs: 30,
        warmup_frac: 0.1,
        clip_norm: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Default output directory; a CLI `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub sps_mode: SpsMode,
    pub ptp_scheme: PtpChoice,
    /// Synthetic data source. Exactly one of `task`/`data` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    /// External TSV data source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<TsvSource>,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    /// Optimizer settings for the PTP pretraining stage; the epoch count is
    /// a cap, the stage stops earlier on convergence.
    #[serde(default = "default_ptp_train")]
    pub ptp_train: TrainConfig,
    pub kd: KDConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.task, &self.data) {
            (Some(task), None) => task.validate()?,
            (None, Some(data)) => {
                if data.max_seq_len < 2 {
                    return Err(KdError::Config("data.max_seq_len must be at least 2".into()));
                }
                if data.max_vocab < 5 {
                    return Err(KdError::Config(
                        "data.max_vocab leaves no room for content words".into(),
                    ));
                }
            }
            (Some(_), Some(_)) => {
                return Err(KdError::Config(
                    "config sets both [task] and [data]; pick one data source".into(),
                ))
            }
            (None, None) => {
                return Err(KdError::Config("config needs a [task] or [data] section".into()))
            }
        }
        if self.teacher.num_layers == 0 {
            return Err(KdError::Config("teacher.num_layers must be positive".into()));
        }
        if self.student.num_layers == 0 || self.student.num_layers > self.teacher.num_layers {
            return Err(KdError::Config(format!(
                "student.num_layers must be in 1..={}, got {}",
                self.teacher.num_layers, self.student.num_layers
            )));
        }
        self.teacher_encoder_config(2)?.validate()?;
        self.teacher.train.validate()?;
        self.ptp_train.validate()?;
        self.kd.validate()?;
        Ok(())
    }

    /// The teacher's [`EncoderConfig`] once the data source fixes the
    /// vocabulary and sequence length.
    pub fn teacher_encoder_config(&self, num_classes: usize) -> Result<EncoderConfig> {
        let (vocab_size, max_seq_len) = match (&self.task, &self.data) {
            (Some(task), _) => (task.vocab_size, task.seq_len),
            (None, Some(data)) => (data.max_vocab, data.max_seq_len),
            (None, None) => {
                return Err(KdError::Config("config needs a [task] or [data] section".into()))
            }
        };
        Ok(EncoderConfig {
            vocab_size,
            max_seq_len,
            hidden_dim: self.teacher.hidden_dim,
            num_heads: self.teacher.num_heads,
            ff_dim: self.teacher.ff_dim,
            num_physical_layers: self.teacher.num_layers,
            num_classes,
        })
    }

    /// Short name of the data source for reports.
    pub fn task_name(&self) -> String {
        match (&self.task, &self.data) {
            (Some(task), _) => task.kind.to_string(),
            (None, Some(data)) => format!("tsv:{}", data.train.display()),
            (None, None) => "unconfigured".into(),
        }
    }

    /// Method label combining the sharing mode and PTP scheme, e.g.
    /// `sps2+ptp-full4`.
    pub fn method_name(&self) -> String {
        match self.ptp_scheme.as_scheme() {
            Some(scheme) => format!("{}+ptp-{}", self.sps_mode, scheme),
            None => self.sps_mode.to_string(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| KdError::Config(e.to_string()))
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| KdError::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KdError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    pub(crate) fn sample_toml() -> &'static str {
        r#"
seed = 42
sps_mode = "sps2"
ptp_scheme = "full4"

[task]
kind = "pair-equivalence"
train_n = 200
dev_n = 50
test_n = 50
seq_len = 16
vocab_size = 32

[teacher]
hidden_dim = 32
num_heads = 4
ff_dim = 64
num_layers = 4

[teacher.train]
learning_rate = 1e-3
batch_size = 32
epochs = 10

[student]
num_layers = 1

[kd]
alpha = 0.3
beta = 2.0
temperature = 2.0
threshold = 0.9

[kd.train]
learning_rate = 1e-3
batch_size = 32
epochs = 8
"#
    }

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = parse_run_config(sample_toml()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.sps_mode, SpsMode::Sps2);
        assert_eq!(cfg.ptp_scheme, PtpChoice::Full4);
        assert_eq!(cfg.task.unwrap().kind, TaskKind::PairEquivalence);
        assert_eq!(cfg.kd.student_temperature, 1.0, "serde default");
        assert_eq!(cfg.kd.train.warmup_frac, 0.1, "serde default");
        assert_eq!(cfg.ptp_train.epochs, 30, "default PTP cap");
        assert_eq!(cfg.method_name(), "sps2+ptp-full4");
        assert_eq!(cfg.task_name(), "pair-equivalence");
    }

    #[test]
    fn rejects_unknown_keys() {
        // lands inside [kd.train], which rejects unknown fields
        let text = format!("{}\ntypo_field = 3\n", sample_toml());
        let err = parse_run_config(&text).unwrap_err();
        assert!(err.to_string().contains("typo_field") || err.to_string().contains("unknown"),
            "{err}");
    }

    #[test]
    fn rejects_missing_data_source() {
        let text = sample_toml().replace("[task]", "[removed_task_marker]");
        assert!(parse_run_config(&text).is_err());
    }

    #[test]
    fn rejects_oversized_student() {
        let text = sample_toml().replace("num_layers = 1", "num_layers = 5");
        let err = parse_run_config(&text).unwrap_err();
        assert!(err.to_string().contains("student.num_layers"), "{err}");
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = parse_run_config(sample_toml()).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let again = parse_run_config(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn exit_code_for_config_errors_is_two() {
        let err = parse_run_config("nonsense = true").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
