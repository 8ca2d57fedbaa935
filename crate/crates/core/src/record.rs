//! Instance/stage data model and the newline-delimited record format.
//!
//! A record file is UTF-8 text with one JSON object per line. An optional
//! first line of the form
//!
//! ```text
//! {"type":"header","labels":["entailment","contradiction","neutral"],"dataset":"snli"}
//! ```
//!
//! declares the label space. Every other line is one [`InstanceRecord`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Highest stage index understood by the cascade (stage 0 plus four guidance stages).
pub const MAX_STAGE: u8 = 4;

/// Stage that may carry ensemble variants.
pub const VARIANT_STAGE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Self {
        Label(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label(s.to_owned())
    }
}

/// Ordered, duplicate-free list of labels. Order matters: ties are broken
/// toward the lowest index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSpace {
    labels: Vec<Label>,
    index: HashMap<Label, usize>,
}

impl LabelSpace {
    /// Builds a label space, dropping later duplicates.
    pub fn new<I, L>(labels: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: Into<Label>,
    {
        let mut space = LabelSpace::default();
        for label in labels {
            let label = label.into();
            if !space.index.contains_key(&label) {
                space.index.insert(label.clone(), space.labels.len());
                space.labels.push(label);
            }
        }
        space
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &Label) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.index.contains_key(label)
    }

    pub fn get(&self, idx: usize) -> Option<&Label> {
        self.labels.get(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter()
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.labels
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label(s)
    }
}

/// A (label, confidence) pair as emitted by a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub conf: f64,
}

impl Prediction {
    pub fn new(label: impl Into<Label>, conf: f64) -> Self {
        Prediction {
            label: label.into(),
            conf,
        }
    }
}

/// Output of one stage for one instance.
///
/// `output` may be absent only at stage 1 when `variants` is non-empty; the
/// cascade then resolves the stage through the variant ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: u8,
    pub output: Option<Prediction>,
    pub variants: Vec<Prediction>,
}

impl StageOutput {
    pub fn new(stage: u8, label: impl Into<Label>, conf: f64) -> Self {
        StageOutput {
            stage,
            output: Some(Prediction::new(label, conf)),
            variants: Vec::new(),
        }
    }

    pub fn variants_only(stage: u8, variants: Vec<Prediction>) -> Self {
        StageOutput {
            stage,
            output: None,
            variants,
        }
    }

    pub fn with_variants(mut self, variants: Vec<Prediction>) -> Self {
        self.variants = variants;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: String,
    pub dataset: String,
    pub gold: Label,
    pub stages: Vec<StageOutput>,
}

impl InstanceRecord {
    pub fn last_stage(&self) -> Option<u8> {
        self.stages.last().map(|s| s.stage)
    }

    pub fn stage(&self, stage: u8) -> Option<&StageOutput> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// A labelled collection of instance records. Immutable once built; the
/// fields are public so callers can assemble sets and run [`validate`] on them.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub labels: LabelSpace,
    pub records: Vec<InstanceRecord>,
    pub source: String,
}

impl RecordSet {
    /// Builds a set and rejects it if any invariant is broken.
    pub fn new(
        labels: LabelSpace,
        records: Vec<InstanceRecord>,
        source: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let rs = RecordSet {
            labels,
            records,
            source: source.into(),
        };
        match validate(&rs).into_iter().next() {
            None => Ok(rs),
            Some(v) if v.kind == ViolationKind::EmptyRecordSet => Err(RecordError::Empty),
            Some(v) => Err(RecordError::Invalid {
                line: None,
                violation: v,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct dataset tags in sorted order.
    pub fn datasets(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.dataset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Subset sharing one dataset tag, with the same label space and source.
    pub fn filter_dataset(&self, tag: &str) -> RecordSet {
        RecordSet {
            labels: self.labels.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.dataset == tag)
                .cloned()
                .collect(),
            source: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    EmptyRecordSet,
    EmptyId,
    DuplicateId,
    EmptyLabel,
    MissingStageZero,
    NonContiguousStages { found: Vec<u8> },
    StageOutOfRange { stage: u8 },
    ConfOutOfRange { stage: u8, conf: f64 },
    VariantConfOutOfRange { stage: u8, conf: f64 },
    VariantsOutsideStageOne { stage: u8 },
    MissingOutput { stage: u8 },
    UnknownLabel { label: Label },
    IncompleteStages { last: Option<u8> },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyRecordSet => f.write_str("non-empty required"),
            Self::EmptyId => f.write_str("empty id"),
            Self::DuplicateId => f.write_str("duplicate id"),
            Self::EmptyLabel => f.write_str("empty label"),
            Self::MissingStageZero => f.write_str("stage 0 missing"),
            Self::NonContiguousStages { found } => {
                write!(f, "non-contiguous stages {found:?}")
            }
            Self::StageOutOfRange { stage } => {
                write!(f, "stage {stage} out of range 0..={MAX_STAGE}")
            }
            Self::ConfOutOfRange { stage, conf } => {
                write!(f, "stage {stage}: confidence {conf} outside [0,1]")
            }
            Self::VariantConfOutOfRange { stage, conf } => {
                write!(f, "stage {stage}: variant confidence {conf} outside [0,1]")
            }
            Self::VariantsOutsideStageOne { stage } => {
                write!(f, "stage {stage}: variants are only allowed at stage 1")
            }
            Self::MissingOutput { stage } => {
                write!(f, "stage {stage}: no prediction and no variants")
            }
            Self::UnknownLabel { label } => write!(f, "unknown label '{label}'"),
            Self::IncompleteStages { last } => match last {
                Some(s) => write!(f, "strict mode requires stages 0..={MAX_STAGE}, last is {s}"),
                None => write!(f, "strict mode requires stages 0..={MAX_STAGE}, none present"),
            },
        }
    }
}

/// One broken invariant, attributed to a record id (empty for set-level
/// violations).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub id: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.id.is_empty() {
            write!(f, "{}", self.kind)
        } else {
            write!(f, "{}: {}", self.id, self.kind)
        }
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("failed reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{}{violation}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        line: Option<usize>,
        violation: Violation,
    },
    #[error("non-empty required")]
    Empty,
}

/// How strictly the reader treats the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Unknown fields ignored; ragged stage lists allowed.
    #[default]
    Lenient,
    /// Unknown fields rejected; every record must carry stages 0..=4.
    Strict,
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn record_violations(rec: &InstanceRecord, labels: &LabelSpace, mode: Mode, out: &mut Vec<Violation>) {
    let mut push = |kind| {
        out.push(Violation {
            id: rec.id.clone(),
            kind,
        })
    };
    if rec.id.is_empty() {
        push(ViolationKind::EmptyId);
    }
    let check_label = |label: &Label, push: &mut dyn FnMut(ViolationKind)| {
        if label.as_str().is_empty() {
            push(ViolationKind::EmptyLabel);
        } else if !labels.contains(label) {
            push(ViolationKind::UnknownLabel {
                label: label.clone(),
            });
        }
    };
    check_label(&rec.gold, &mut push);

    let indices: Vec<u8> = rec.stages.iter().map(|s| s.stage).collect();
    if indices.first() != Some(&0) {
        push(ViolationKind::MissingStageZero);
    } else if indices.iter().enumerate().any(|(i, &s)| usize::from(s) != i) {
        push(ViolationKind::NonContiguousStages { found: indices.clone() });
    }
    for stage in &rec.stages {
        let s = stage.stage;
        if s > MAX_STAGE {
            push(ViolationKind::StageOutOfRange { stage: s });
        }
        if let Some(p) = &stage.output {
            if !in_unit(p.conf) {
                push(ViolationKind::ConfOutOfRange { stage: s, conf: p.conf });
            }
            check_label(&p.label, &mut push);
        } else if stage.variants.is_empty() || s != VARIANT_STAGE {
            push(ViolationKind::MissingOutput { stage: s });
        }
        if !stage.variants.is_empty() && s != VARIANT_STAGE {
            push(ViolationKind::VariantsOutsideStageOne { stage: s });
        }
        for v in &stage.variants {
            if !in_unit(v.conf) {
                push(ViolationKind::VariantConfOutOfRange { stage: s, conf: v.conf });
            }
            check_label(&v.label, &mut push);
        }
    }
    if mode == Mode::Strict && indices.len() != usize::from(MAX_STAGE) + 1 {
        push(ViolationKind::IncompleteStages {
            last: indices.last().copied(),
        });
    }
}

/// Lists every broken invariant of a record set. Empty iff the set is valid.
pub fn validate(rs: &RecordSet) -> Vec<Violation> {
    validate_with(rs, Mode::Lenient)
}

/// [`validate`] with an explicit mode; strict mode also requires stages 0..=4.
pub fn validate_with(rs: &RecordSet, mode: Mode) -> Vec<Violation> {
    let mut out = Vec::new();
    if rs.records.is_empty() {
        out.push(Violation {
            id: String::new(),
            kind: ViolationKind::EmptyRecordSet,
        });
    }
    let mut seen = HashSet::new();
    for rec in &rs.records {
        if !seen.insert(rec.id.as_str()) {
            out.push(Violation {
                id: rec.id.clone(),
                kind: ViolationKind::DuplicateId,
            });
        }
        record_violations(rec, &rs.labels, mode, &mut out);
    }
    out
}

// ----- wire format -----

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "type")]
    kind: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    gold: String,
    stages: Vec<StageLine>,
}

#[derive(Serialize, Deserialize)]
struct StageLine {
    s: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variants: Option<Vec<VariantLine>>,
}

#[derive(Serialize, Deserialize)]
struct VariantLine {
    pred: String,
    conf: f64,
}

const HEADER_FIELDS: &[&str] = &["type", "labels", "dataset", "source"];
const RECORD_FIELDS: &[&str] = &["id", "dataset", "gold", "stages"];
const STAGE_FIELDS: &[&str] = &["s", "pred", "conf", "variants"];
const VARIANT_FIELDS: &[&str] = &["pred", "conf"];

fn check_fields(obj: &Map<String, Value>, allowed: &[&str], what: &str) -> Result<(), String> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(format!("unknown field '{k}' in {what}")),
        None => Ok(()),
    }
}

fn check_record_fields(value: &Value) -> Result<(), String> {
    let obj = value.as_object().ok_or("record must be a JSON object")?;
    check_fields(obj, RECORD_FIELDS, "record")?;
    if let Some(Value::Array(stages)) = obj.get("stages") {
        for stage in stages {
            let Some(st) = stage.as_object() else { continue };
            check_fields(st, STAGE_FIELDS, "stage")?;
            if let Some(Value::Array(vs)) = st.get("variants") {
                for v in vs.iter().filter_map(Value::as_object) {
                    check_fields(v, VARIANT_FIELDS, "variant")?;
                }
            }
        }
    }
    Ok(())
}

fn stage_from_line(line: StageLine) -> Result<StageOutput, String> {
    let output = match (line.pred, line.conf) {
        (Some(pred), Some(conf)) => Some(Prediction::new(pred, conf)),
        (None, None) => None,
        _ => {
            return Err(format!(
                "stage {}: pred and conf must be both present or both absent",
                line.s
            ))
        }
    };
    let variants = match line.variants {
        Some(vs) if vs.is_empty() => {
            return Err(format!("stage {}: variants list must not be empty", line.s))
        }
        Some(vs) => vs
            .into_iter()
            .map(|v| Prediction::new(v.pred, v.conf))
            .collect(),
        None => Vec::new(),
    };
    Ok(StageOutput {
        stage: line.s,
        output,
        variants,
    })
}

/// Reader options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub mode: Mode,
}

/// A record set read without invariant checks, with the source line of each
/// record kept for error reporting.
#[derive(Debug, Clone)]
pub struct RawRecords {
    pub set: RecordSet,
    pub lines: Vec<usize>,
    pub declared_labels: bool,
}

/// Reads the structure of a record stream but does not enforce record
/// invariants. Use [`validate_with`] on the result, or [`parse_records`].
pub fn read_records_unchecked<R: BufRead>(input: R, opts: ParseOptions) -> Result<RawRecords, RecordError> {
    let mut header: Option<HeaderLine> = None;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut first_content = true;

    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = |message: String| RecordError::Malformed {
            line: line_no,
            message,
        };
        let value: Value =
            serde_json::from_str(trimmed).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("record must be a JSON object".into()))?;

        if obj.contains_key("type") {
            if !first_content {
                return Err(malformed("header must be the first line".into()));
            }
            if opts.mode == Mode::Strict {
                check_fields(obj, HEADER_FIELDS, "header").map_err(malformed)?;
            }
            let h: HeaderLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            if h.kind != "header" {
                return Err(malformed(format!("unsupported line type '{}'", h.kind)));
            }
            header = Some(h);
            first_content = false;
            continue;
        }
        first_content = false;

        if opts.mode == Mode::Strict {
            check_record_fields(&value).map_err(malformed)?;
        }
        let rl: RecordLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let dataset = match rl.dataset.or_else(|| header.as_ref().and_then(|h| h.dataset.clone())) {
            Some(d) => d,
            None => return Err(malformed("missing field 'dataset'".into())),
        };
        let stages = rl
            .stages
            .into_iter()
            .map(stage_from_line)
            .collect::<Result<Vec<_>, _>>()
            .map_err(malformed)?;
        records.push(InstanceRecord {
            id: rl.id,
            dataset,
            gold: Label::new(rl.gold),
            stages,
        });
        lines.push(line_no);
    }

    let declared_labels = header.is_some();
    let (labels, source) = match header {
        Some(h) => (LabelSpace::new(h.labels), h.source.unwrap_or_default()),
        None => (infer_labels(&records), String::new()),
    };
    Ok(RawRecords {
        set: RecordSet {
            labels,
            records,
            source,
        },
        lines,
        declared_labels,
    })
}

fn infer_labels(records: &[InstanceRecord]) -> LabelSpace {
    let mut seen = BTreeSet::new();
    for rec in records {
        seen.insert(rec.gold.clone());
        for st in &rec.stages {
            if let Some(p) = &st.output {
                seen.insert(p.label.clone());
            }
            for v in &st.variants {
                seen.insert(v.label.clone());
            }
        }
    }
    LabelSpace::new(seen)
}

/// Parses and validates a record stream. The first broken invariant is
/// reported with its line number.
pub fn parse_records<R: BufRead>(input: R, opts: ParseOptions) -> Result<RecordSet, RecordError> {
    let raw = read_records_unchecked(input, opts)?;
    let violations = validate_with(&raw.set, opts.mode);
    if let Some(v) = violations.into_iter().next() {
        if v.kind == ViolationKind::EmptyRecordSet {
            return Err(RecordError::Empty);
        }
        let line = raw
            .set
            .records
            .iter()
            .zip(&raw.lines)
            .rev()
            .find(|(r, _)| r.id == v.id)
            .map(|(_, l)| *l);
        return Err(RecordError::Invalid { line, violation: v });
    }
    Ok(raw.set)
}

/// Parses a record stream held in memory.
pub fn parse_records_str(text: &str, opts: ParseOptions) -> Result<RecordSet, RecordError> {
    parse_records(text.as_bytes(), opts)
}

/// Writes a header line followed by one line per record.
pub fn write_records<W: Write>(rs: &RecordSet, mut out: W) -> Result<(), RecordError> {
    if rs.records.is_empty() {
        return Err(RecordError::Empty);
    }
    let datasets = rs.datasets();
    let header = HeaderLine {
        kind: "header".into(),
        labels: rs.labels.iter().map(|l| l.as_str().to_owned()).collect(),
        dataset: (datasets.len() == 1).then(|| datasets[0].clone()),
        source: (!rs.source.is_empty()).then(|| rs.source.clone()),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for rec in &rs.records {
        let line = RecordLine {
            id: rec.id.clone(),
            dataset: Some(rec.dataset.clone()),
            gold: rec.gold.as_str().to_owned(),
            stages: rec
                .stages
                .iter()
                .map(|s| StageLine {
                    s: s.stage,
                    pred: s.output.as_ref().map(|p| p.label.as_str().to_owned()),
                    conf: s.output.as_ref().map(|p| p.conf),
                    variants: (!s.variants.is_empty()).then(|| {
                        s.variants
                            .iter()
                            .map(|v| VariantLine {
                                pred: v.label.as_str().to_owned(),
                                conf: v.conf,
                            })
                            .collect()
                    }),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Serializes a record set to a `String`.
pub fn write_records_string(rs: &RecordSet) -> Result<String, RecordError> {
    let mut buf = Vec::new();
    write_records(rs, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
