//! Desk-scale datasets: three deterministic synthetic sequence-classification
//! generators, a TSV ingestion path for external data, and metrics.
//!
//! Token id conventions across the repo: 0 = classification token, 1 = pad,
//! 2 = separator, 3 = unknown; content ids start at 4.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::encoder_forward;
use crate::error::{KdError, Result};
use crate::numkit::argmax;
use crate::sps::{ParamStore, SharingPlan};

pub const TOK_CLS: usize = 0;
pub const TOK_PAD: usize = 1;
pub const TOK_SEP: usize = 2;
pub const TOK_UNK: usize = 3;
pub const TOK_CONTENT_START: usize = 4;

/// The fixed trigram the pattern-presence task looks for.
pub const PATTERN: [usize; 3] = [5, 9, 7];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.examples.first() else {
            return Err(KdError::Data("dataset is empty".into()));
        };
        let len = first.tokens.len();
        for ex in &self.examples {
            if ex.tokens.len() != len {
                return Err(KdError::Data(format!(
                    "example {} has length {}, expected {len}",
                    ex.id,
                    ex.tokens.len()
                )));
            }
            if ex.label >= self.num_classes {
                return Err(KdError::Data(format!(
                    "example {} has label {} but num_classes is {}",
                    ex.id, ex.label, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label = parity of the most frequent content token (ties: lowest id).
    MajorityToken,
    /// Label = whether [`PATTERN`] occurs contiguously.
    PatternPresence,
    /// Two segments around a separator; label = multiset equality.
    PairEquivalence,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::MajorityToken => "majority-token",
            TaskKind::PatternPresence => "pattern-presence",
            TaskKind::PairEquivalence => "pair-equivalence",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for TaskKind {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority-token" => Ok(TaskKind::MajorityToken),
            "pattern-presence" => Ok(TaskKind::PatternPresence),
            "pair-equivalence" => Ok(TaskKind::PairEquivalence),
            other => Err(KdError::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_train_n")]
    pub train_n: usize,
    #[serde(default = "default_eval_n")]
    pub dev_n: usize,
    #[serde(default = "default_eval_n")]
    pub test_n: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

fn default_train_n() -> usize {
    2000
}
fn default_eval_n() -> usize {
    500
}
fn default_seq_len() -> usize {
    16
}
fn default_vocab() -> usize {
    32
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            train_n: default_train_n(),
            dev_n: default_eval_n(),
            test_n: default_eval_n(),
            seq_len: default_seq_len(),
            vocab_size: default_vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_n == 0 || self.dev_n == 0 || self.test_n == 0 {
            return Err(KdError::Config("task split sizes must be positive".into()));
        }
        if self.vocab_size <= TOK_CONTENT_START + 1 {
            return Err(KdError::Config(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        match self.kind {
            TaskKind::MajorityToken => {
                if self.seq_len < 2 {
                    return Err(KdError::Config("majority-token needs seq_len >= 2".into()));
                }
            }
            TaskKind::PatternPresence => {
                if self.seq_len < PATTERN.len() + 1 {
                    return Err(KdError::Config(format!(
                        "pattern-presence needs seq_len >= {}",
                        PATTERN.len() + 1
                    )));
                }
                if self.vocab_size <= *PATTERN.iter().max().expect("non-empty") {
                    return Err(KdError::Config(format!(
                        "pattern-presence needs vocab_size > {}",
                        PATTERN.iter().max().expect("non-empty")
                    )));
                }
            }
            TaskKind::PairEquivalence => {
                if self.seq_len < 4 || self.seq_len % 2 != 0 {
                    return Err(KdError::Config(
                        "pair-equivalence needs an even seq_len >= 4".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub spec: TaskSpec,
    pub seed: u64,
}

fn rand_content(rng: &mut impl Rng, vocab_size: usize) -> usize {
    rng.gen_range(TOK_CONTENT_START..vocab_size)
}

fn majority_label(tokens: &[usize]) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in &tokens[1..] {
        if t >= TOK_CONTENT_START {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut best_id = usize::MAX;
    let mut best_count = 0;
    for (&id, &count) in &counts {
        if count > best_count || (count == best_count && id < best_id) {
            best_id = id;
            best_count = count;
        }
    }
    best_id % 2
}

fn contains_pattern(tokens: &[usize]) -> bool {
    tokens.windows(PATTERN.len()).any(|w| w == PATTERN)
}

fn majority_example(rng: &mut ChaCha8Rng, spec: &TaskSpec, id: u64, target: usize) -> Example {
    loop {
        let mut tokens = vec![TOK_CLS; spec.seq_len];
        for t in tokens.iter_mut().skip(1) {
            *t = rand_content(rng, spec.vocab_size);
        }
        if majority_label(&tokens) == target {
            return Example { id, tokens, label: target };
        }
    }
}

fn pattern_example(rng: &mut ChaCha8Rng, spec: &TaskSpec, id: u64, target: usize) -> Example {
    loop {
        let mut tokens = vec![TOK_CLS; spec.seq_len];
        for t in tokens.iter_mut().skip(1) {
            *t = rand_content(rng, spec.vocab_size);
        }
        if target == 1 {
            let pos = rng.gen_range(1..=spec.seq_len - PATTERN.len());
            tokens[pos..pos + PATTERN.len()].copy_from_slice(&PATTERN);
            return Example { id, tokens, label: 1 };
        }
        if !contains_pattern(&tokens) {
            return Example { id, tokens, label: 0 };
        }
    }
}

fn pair_example(rng: &mut ChaCha8Rng, spec: &TaskSpec, id: u64, target: usize) -> Example {
    let m = (spec.seq_len - 2) / 2;
    let a: Vec<usize> = (0..m).map(|_| rand_content(rng, spec.vocab_size)).collect();
    let mut b = a.clone();
    b.shuffle(rng);
    if target == 0 {
        let j = rng.gen_range(0..m);
        let old = b[j];
        loop {
            let candidate = rand_content(rng, spec.vocab_size);
            if candidate != old {
                b[j] = candidate;
                break;
            }
        }
    }
    let mut tokens = Vec::with_capacity(spec.seq_len);
    tokens.push(TOK_CLS);
    tokens.extend_from_slice(&a);
    tokens.push(TOK_SEP);
    tokens.extend_from_slice(&b);
    debug_assert_eq!(tokens.len(), spec.seq_len);
    let mut sa = a;
    let mut sb = b;
    sa.sort_unstable();
    sb.sort_unstable();
    let label = usize::from(sa == sb);
    debug_assert_eq!(label, target, "construction must realize the target label");
    Example { id, tokens, label }
}

fn generate_split(
    rng: &mut ChaCha8Rng,
    spec: &TaskSpec,
    first_id: u64,
    n: usize,
) -> Dataset {
    let examples = (0..n)
        .map(|i| {
            let id = first_id + i as u64;
            let target = i % 2;
            match spec.kind {
                TaskKind::MajorityToken => majority_example(rng, spec, id, target),
                TaskKind::PatternPresence => pattern_example(rng, spec, id, target),
                TaskKind::PairEquivalence => pair_example(rng, spec, id, target),
            }
        })
        .collect();
    Dataset { examples, num_classes: 2 }
}

/// Deterministic in (spec, seed). Labels alternate 0/1 by construction, so
/// each split is balanced to within one example.
pub fn generate_synthetic_task(spec: &TaskSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_split(&mut rng, spec, 0, spec.train_n);
    let dev = generate_split(&mut rng, spec, spec.train_n as u64, spec.dev_n);
    let test = generate_split(
        &mut rng,
        spec,
        (spec.train_n + spec.dev_n) as u64,
        spec.test_n,
    );
    Ok(DatasetBundle { train, dev, test, spec: *spec, seed })
}

// ---------------------------------------------------------------------------
// Persistence: task directory with train/dev/test TSVs plus a manifest.
// Lines are `label<TAB>space-joined token ids` (classification token
// included), so reloading reproduces sequences exactly.

fn split_to_tsv(data: &Dataset) -> String {
    let mut out = String::new();
    for ex in &data.examples {
        let ids: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}\t{}", ex.label, ids.join(" "));
    }
    out
}

fn split_from_tsv(text: &str, first_id: u64, num_classes: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        let lineno = ix + 1;
        let (label_s, rest) = line
            .split_once('\t')
            .ok_or_else(|| KdError::Data(format!("line {lineno}: missing tab separator")))?;
        let label: usize = label_s
            .parse()
            .map_err(|_| KdError::Data(format!("line {lineno}: bad label {label_s:?}")))?;
        let tokens = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| KdError::Data(format!("line {lineno}: bad token id {t:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        examples.push(Example { id: first_id + ix as u64, tokens, label });
    }
    let data = Dataset { examples, num_classes };
    data.validate()?;
    Ok(data)
}

/// Write `train.tsv`, `dev.tsv`, `test.tsv`, and `manifest.toml` under `dir`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.tsv"), split_to_tsv(&bundle.train))?;
    std::fs::write(dir.join("dev.tsv"), split_to_tsv(&bundle.dev))?;
    std::fs::write(dir.join("test.tsv"), split_to_tsv(&bundle.test))?;
    let manifest = BundleManifest {
        spec: bundle.spec,
        // TOML integers are i64; a derived seed can use the full u64 range
        seed: bundle.seed.to_string(),
        num_classes: 2,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| KdError::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    spec: TaskSpec,
    seed: String,
    num_classes: usize,
}

/// Reload a directory written by [`save_bundle`]; exact round-trip.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join("manifest.toml");
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        KdError::Data(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: BundleManifest = toml::from_str(&manifest_text)
        .map_err(|e| KdError::Data(format!("bad manifest {}: {e}", manifest_path.display())))?;
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p)
            .map_err(|e| KdError::Data(format!("cannot read {}: {e}", p.display())))
    };
    let spec = manifest.spec;
    let train = split_from_tsv(&read("train.tsv")?, 0, manifest.num_classes)?;
    let dev = split_from_tsv(&read("dev.tsv")?, spec.train_n as u64, manifest.num_classes)?;
    let test = split_from_tsv(
        &read("test.tsv")?,
        (spec.train_n + spec.dev_n) as u64,
        manifest.num_classes,
    )?;
    let seed: u64 = manifest
        .seed
        .parse()
        .map_err(|_| KdError::Data(format!("bad seed {:?} in manifest", manifest.seed)))?;
    Ok(DatasetBundle { train, dev, test, spec, seed })
}

// ---------------------------------------------------------------------------
// External TSV ingestion: whitespace tokenization with a small fitted
// vocabulary.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSchema {
    pub max_seq_len: usize,
    /// Total vocabulary budget including the four reserved ids.
    pub max_vocab: usize,
}

/// Read `label<TAB>text_a[<TAB>text_b]` lines. A vocabulary is fitted over
/// the file (most frequent words first, ties lexicographic); words beyond
/// the budget map to the unknown id. Sequences get the classification token
/// prepended, segments joined by the separator, then truncation/padding to
/// `max_seq_len`.
pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<Dataset> {
    if schema.max_vocab <= TOK_CONTENT_START {
        return Err(KdError::Config(format!(
            "max_vocab {} leaves no room for content words",
            schema.max_vocab
        )));
    }
    if schema.max_seq_len < 2 {
        return Err(KdError::Config("max_seq_len must be at least 2".into()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| KdError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<(usize, Vec<&str>, Option<Vec<&str>>)> = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        let lineno = ix + 1;
        if line.trim().is_empty() {
            return Err(KdError::Data(format!("line {lineno}: empty line")));
        }
        let mut fields = line.split('\t');
        let label_s = fields.next().expect("split yields at least one field");
        let label: usize = label_s
            .parse()
            .map_err(|_| KdError::Data(format!("line {lineno}: bad label {label_s:?}")))?;
        let text_a = fields
            .next()
            .ok_or_else(|| KdError::Data(format!("line {lineno}: missing text field")))?;
        let text_b = fields.next();
        if fields.next().is_some() {
            return Err(KdError::Data(format!("line {lineno}: too many fields")));
        }
        rows.push((
            label,
            text_a.split_whitespace().collect(),
            text_b.map(|t| t.split_whitespace().collect()),
        ));
    }
    if rows.is_empty() {
        return Err(KdError::Data(format!("{}: no data lines", path.display())));
    }

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (_, a, b) in &rows {
        for w in a.iter().chain(b.iter().flatten()) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then(wa.cmp(wb)));
    let vocab: HashMap<&str, usize> = ranked
        .into_iter()
        .take(schema.max_vocab - TOK_CONTENT_START)
        .enumerate()
        .map(|(i, (w, _))| (w, TOK_CONTENT_START + i))
        .collect();

    let mut examples = Vec::with_capacity(rows.len());
    let mut max_label = 0;
    for (ix, (label, a, b)) in rows.iter().enumerate() {
        let mut tokens = vec![TOK_CLS];
        let id_of = |w: &&str| *vocab.get(*w).unwrap_or(&TOK_UNK);
        tokens.extend(a.iter().map(|w| id_of(w)));
        if let Some(b) = b {
            tokens.push(TOK_SEP);
            tokens.extend(b.iter().map(|w| id_of(w)));
        }
        tokens.truncate(schema.max_seq_len);
        tokens.resize(schema.max_seq_len, TOK_PAD);
        max_label = max_label.max(*label);
        examples.push(Example { id: ix as u64, tokens, label: *label });
    }
    let data = Dataset { examples, num_classes: max_label + 1 };
    data.validate()?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Binary tasks only (positive class 1); multiclass reports accuracy.
    pub f1: Option<f64>,
    /// confusion[true_label][predicted]
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Metrics {
    assert_eq!(predictions.len(), labels.len());
    assert!(!labels.is_empty(), "metrics over an empty set are undefined");
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;
    let f1 = (num_classes == 2).then(|| {
        let tp = confusion[1][1] as f64;
        let fp = confusion[0][1] as f64;
        let fn_ = confusion[1][0] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    });
    Metrics { accuracy, f1, confusion }
}

/// Argmax predictions (ties to the lowest class) over every example.
pub fn evaluate(store: &ParamStore, plan: &SharingPlan, data: &Dataset) -> Result<Metrics> {
    if store.config.num_classes != data.num_classes {
        return Err(KdError::invalid(
            "evaluate",
            format!(
                "model has {} classes, dataset has {}",
                store.config.num_classes, data.num_classes
            ),
        ));
    }
    data.validate()?;
    let mut predictions = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for ex in &data.examples {
        let out = encoder_forward(store, plan, &ex.tokens)?;
        predictions.push(argmax(&out.logits));
        labels.push(ex.label);
    }
    Ok(metrics_from_predictions(&predictions, &labels, data.num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sps::{build_sharing_plan, SpsMode};
    use std::collections::BTreeMap;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec { train_n: 60, dev_n: 20, test_n: 20, ..TaskSpec::new(kind) }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [TaskKind::MajorityToken, TaskKind::PatternPresence, TaskKind::PairEquivalence]
        {
            let a = generate_synthetic_task(&spec(kind), 5).unwrap();
            let b = generate_synthetic_task(&spec(kind), 5).unwrap();
            assert_eq!(a, b);
            let c = generate_synthetic_task(&spec(kind), 6).unwrap();
            assert_ne!(a, c, "different seed should change the data");
        }
    }

    #[test]
    fn split_sizes_and_disjoint_ids() {
        let bundle = generate_synthetic_task(&spec(TaskKind::MajorityToken), 1).unwrap();
        assert_eq!(bundle.train.len(), 60);
        assert_eq!(bundle.dev.len(), 20);
        assert_eq!(bundle.test.len(), 20);
        let mut ids: Vec<u64> = bundle
            .train
            .examples
            .iter()
            .chain(&bundle.dev.examples)
            .chain(&bundle.test.examples)
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100, "ids must be globally unique");
    }

    #[test]
    fn labels_are_balanced() {
        for kind in [TaskKind::MajorityToken, TaskKind::PatternPresence, TaskKind::PairEquivalence]
        {
            let bundle = generate_synthetic_task(&spec(kind), 9).unwrap();
            for split in [&bundle.train, &bundle.dev, &bundle.test] {
                let ones = split.examples.iter().filter(|e| e.label == 1).count();
                let frac = ones as f64 / split.len() as f64;
                assert!((0.45..=0.55).contains(&frac), "{kind}: {frac}");
            }
        }
    }

    #[test]
    fn majority_labels_match_recount_oracle() {
        let bundle = generate_synthetic_task(&spec(TaskKind::MajorityToken), 13).unwrap();
        for ex in &bundle.train.examples {
            // independent recount with a BTreeMap (ordered iteration makes
            // the tie rule explicit: first key with the max count)
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in &ex.tokens[1..] {
                *counts.entry(t).or_default() += 1;
            }
            let max = counts.values().copied().max().unwrap();
            let winner = *counts.iter().find(|(_, &c)| c == max).unwrap().0;
            assert_eq!(ex.label, winner % 2, "tokens {:?}", ex.tokens);
        }
    }

    #[test]
    fn pattern_labels_match_scan_oracle() {
        let bundle = generate_synthetic_task(&spec(TaskKind::PatternPresence), 21).unwrap();
        for ex in bundle.train.examples.iter().chain(&bundle.dev.examples) {
            let found = (0..=ex.tokens.len() - 3)
                .any(|i| ex.tokens[i] == 5 && ex.tokens[i + 1] == 9 && ex.tokens[i + 2] == 7);
            assert_eq!(ex.label == 1, found, "tokens {:?}", ex.tokens);
        }
    }

    #[test]
    fn forced_pattern_gives_all_positive_labels() {
        let s = spec(TaskKind::PatternPresence);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..50 {
            let ex = pattern_example(&mut rng, &s, i, 1);
            assert_eq!(ex.label, 1);
        }
    }

    #[test]
    fn pair_labels_match_multiset_oracle() {
        let bundle = generate_synthetic_task(&spec(TaskKind::PairEquivalence), 33).unwrap();
        for ex in &bundle.train.examples {
            let sep = ex.tokens.iter().position(|&t| t == TOK_SEP).unwrap();
            let mut a: Vec<usize> = ex.tokens[1..sep].to_vec();
            let mut b: Vec<usize> = ex.tokens[sep + 1..].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(ex.label == 1, a == b, "tokens {:?}", ex.tokens);
        }
    }

    #[test]
    fn sequences_start_with_cls_and_have_equal_length() {
        for kind in [TaskKind::MajorityToken, TaskKind::PatternPresence, TaskKind::PairEquivalence]
        {
            let bundle = generate_synthetic_task(&spec(kind), 4).unwrap();
            for ex in &bundle.train.examples {
                assert_eq!(ex.tokens[0], TOK_CLS);
                assert_eq!(ex.tokens.len(), 16);
                assert!(ex.tokens.iter().all(|&t| t < 32));
            }
        }
    }

    #[test]
    fn bundle_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate_synthetic_task(&spec(TaskKind::PairEquivalence), 17).unwrap();
        save_bundle(dir.path(), &bundle).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn tsv_loader_handles_single_and_pair_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        std::fs::write(&path, "0\tred red blue\n1\tgreen blue\tblue green\n").unwrap();
        let data = load_tsv(&path, &TsvSchema { max_seq_len: 8, max_vocab: 8 }).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.num_classes, 2);
        let first = &data.examples[0];
        assert_eq!(first.tokens[0], TOK_CLS);
        assert_eq!(first.tokens.len(), 8);
        assert!(first.tokens[4..].iter().all(|&t| t == TOK_PAD));
        // "blue" (3 uses) outranks "green" (2) and "red" (2); the count tie
        // breaks lexicographically, so blue=4, green=5, red=6
        assert_eq!(first.tokens[1..4], [6, 6, 4], "red red blue");
        let second = &data.examples[1];
        assert_eq!(second.tokens[1..6], [5, 4, TOK_SEP, 4, 5], "green blue | blue green");
    }

    #[test]
    fn tsv_loader_truncates_and_maps_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        std::fs::write(&path, "0\ta b c d e f g h\n1\ta a a a\n").unwrap();
        // room for only 2 content words: "a" and (tie, lexicographic) "b"
        let data = load_tsv(&path, &TsvSchema { max_seq_len: 4, max_vocab: 6 }).unwrap();
        assert_eq!(data.examples[0].tokens.len(), 4);
        assert_eq!(data.examples[0].tokens, [TOK_CLS, 4, 5, TOK_UNK]);
        assert_eq!(data.examples[1].tokens, [TOK_CLS, 4, 4, 4]);
    }

    #[test]
    fn tsv_loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "").unwrap();
        let schema = TsvSchema { max_seq_len: 8, max_vocab: 8 };
        assert!(load_tsv(&empty, &schema).is_err());

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "0\tok line\nnot-a-label\toops\n").unwrap();
        let err = load_tsv(&bad, &schema).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let no_tab = dir.path().join("no_tab.tsv");
        std::fs::write(&no_tab, "0 just spaces\n").unwrap();
        let err = load_tsv(&no_tab, &schema).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn saved_bundle_tsv_reloads_with_identical_labels_via_generic_loader() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate_synthetic_task(&spec(TaskKind::MajorityToken), 3).unwrap();
        save_bundle(dir.path(), &bundle).unwrap();
        let reloaded = load_tsv(
            &dir.path().join("train.tsv"),
            &TsvSchema { max_seq_len: 17, max_vocab: 64 },
        )
        .unwrap();
        let want: Vec<usize> = bundle.train.examples.iter().map(|e| e.label).collect();
        let got: Vec<usize> = reloaded.examples.iter().map(|e| e.label).collect();
        assert_eq!(want, got);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = metrics_from_predictions(&[0, 1, 1, 0], &[0, 1, 1, 0], 2);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn degenerate_all_zero_predictions() {
        let m = metrics_from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1], 2);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, Some(0.0), "no positive predictions: P+R degenerate");
    }

    #[test]
    fn metrics_match_confusion_oracle() {
        let preds = [0, 1, 1, 0, 1, 0, 1, 1];
        let labels = [0, 1, 0, 0, 1, 1, 1, 0];
        let m = metrics_from_predictions(&preds, &labels, 2);
        // hand-counted: tp=3 (ix 1,4,6), fp=2 (ix 2,7), fn=1 (ix 5), tn=2
        assert_eq!(m.confusion, vec![vec![2, 2], vec![1, 3]]);
        assert!((m.accuracy - 5.0 / 8.0).abs() < 1e-15);
        let p = 3.0 / 5.0;
        let r = 3.0 / 4.0;
        assert!((m.f1.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_order_independent() {
        let preds = [0, 1, 1, 0, 1];
        let labels = [0, 1, 0, 0, 1];
        let a = metrics_from_predictions(&preds, &labels, 2);
        let perm = [4, 2, 0, 3, 1];
        let preds_p: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = metrics_from_predictions(&preds_p, &labels_p, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn multiclass_reports_accuracy_only() {
        let m = metrics_from_predictions(&[0, 1, 2], &[0, 2, 2], 3);
        assert!(m.f1.is_none());
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_class_mismatch() {
        use crate::encoder::EncoderConfig;
        let store = ParamStore::zeros_init(
            EncoderConfig {
                vocab_size: 32,
                max_seq_len: 16,
                hidden_dim: 4,
                num_heads: 2,
                ff_dim: 8,
                num_physical_layers: 1,
                num_classes: 3,
            },
            1,
        )
        .unwrap();
        let plan = build_sharing_plan(1, SpsMode::Plain);
        let bundle = generate_synthetic_task(&spec(TaskKind::MajorityToken), 2).unwrap();
        assert!(evaluate(&store, &plan, &bundle.dev).is_err());
    }

    #[test]
    fn evaluate_runs_and_is_pure() {
        use crate::encoder::EncoderConfig;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::random_init(
            EncoderConfig {
                vocab_size: 32,
                max_seq_len: 16,
                hidden_dim: 4,
                num_heads: 2,
                ff_dim: 8,
                num_physical_layers: 1,
                num_classes: 2,
            },
            1,
            &mut rng,
        )
        .unwrap();
        let plan = build_sharing_plan(1, SpsMode::Plain);
        let bundle = generate_synthetic_task(&spec(TaskKind::MajorityToken), 2).unwrap();
        let a = evaluate(&store, &plan, &bundle.dev).unwrap();
        let b = evaluate(&store, &plan, &bundle.dev).unwrap();
        assert_eq!(a, b);
        let total: usize = a.confusion.iter().flatten().sum();
        assert_eq!(total, bundle.dev.len());
    }
}
