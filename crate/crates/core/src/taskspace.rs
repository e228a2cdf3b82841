//! Vocabulary and task-token management.
//!
//! Multiple tasks share one decoder output stream: classification labels and
//! slot types are emitted as reserved vocabulary tokens, and multi-task
//! targets are serialized as `BOS task₁ SEP task₂ ... EOS` with per-token
//! task ownership. Reserved tokens are allocated from the least frequently
//! used eligible tokens so they never collide with live transcript text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Normal,
    Pad,
    Bos,
    Eos,
    Blank,
    Sep,
    Label { task: String, name: String },
}

impl Role {
    fn encode(&self) -> String {
        match self {
            Role::Normal => "normal".into(),
            Role::Pad => "pad".into(),
            Role::Bos => "bos".into(),
            Role::Eos => "eos".into(),
            Role::Blank => "blank".into(),
            Role::Sep => "sep".into(),
            Role::Label { task, name } => format!("label:{task}:{name}"),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        Ok(match s {
            "normal" => Role::Normal,
            "pad" => Role::Pad,
            "bos" => Role::Bos,
            "eos" => Role::Eos,
            "blank" => Role::Blank,
            "sep" => Role::Sep,
            other => {
                let rest = other
                    .strip_prefix("label:")
                    .ok_or_else(|| Error::Vocab(format!("unknown role {other:?}")))?;
                let (task, name) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Vocab(format!("malformed label role {other:?}")))?;
                Role::Label {
                    task: task.to_string(),
                    name: name.to_string(),
                }
            }
        })
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    roles: Vec<Role>,
    frequency: Vec<u64>,
    char_index: BTreeMap<char, TokenId>,
    pad: TokenId,
    bos: TokenId,
    eos: TokenId,
    blank: TokenId,
    sep: TokenId,
}

impl Vocabulary {
    /// Character-level vocabulary: five specials, then the alphabet, then
    /// `n_spare` unused tokens available for task-label allocation.
    pub fn character(alphabet: &str, n_spare: usize) -> Result<Self> {
        let mut surfaces = vec![
            "<pad>".to_string(),
            "<s>".to_string(),
            "</s>".to_string(),
            "<blank>".to_string(),
            "<sep>".to_string(),
        ];
        let mut roles = vec![Role::Pad, Role::Bos, Role::Eos, Role::Blank, Role::Sep];
        let mut char_index = BTreeMap::new();
        for c in alphabet.chars() {
            if char_index.contains_key(&c) {
                return Err(Error::Vocab(format!("duplicate alphabet character {c:?}")));
            }
            char_index.insert(c, surfaces.len());
            surfaces.push(c.to_string());
            roles.push(Role::Normal);
        }
        for i in 0..n_spare {
            surfaces.push(format!("<unused{i}>"));
            roles.push(Role::Normal);
        }
        let n = surfaces.len();
        Ok(Self {
            surfaces,
            roles,
            frequency: vec![0; n],
            char_index,
            pad: 0,
            bos: 1,
            eos: 2,
            blank: 3,
            sep: 4,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn sep(&self) -> TokenId {
        self.sep
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id]
    }

    pub fn role(&self, id: TokenId) -> &Role {
        &self.roles[id]
    }

    pub fn frequency(&self, id: TokenId) -> u64 {
        self.frequency[id]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        !matches!(self.roles[id], Role::Normal | Role::Label { .. })
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        matches!(self.roles[id], Role::Label { .. })
    }

    /// `(task, name)` for a reserved token.
    pub fn label_of(&self, id: TokenId) -> Option<(&str, &str)> {
        match &self.roles[id] {
            Role::Label { task, name } => Some((task, name)),
            _ => None,
        }
    }

    pub fn token_for_char(&self, c: char) -> Result<TokenId> {
        self.char_index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("character {c:?} not in vocabulary")))
    }

    /// Character tokens of a transcript. Errors on characters outside the
    /// alphabet or mapped to reserved ids.
    pub fn tokenize_text(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                let id = self.token_for_char(c)?;
                if self.is_reserved(id) {
                    return Err(Error::Format(format!(
                        "character {c:?} maps to reserved token {}",
                        self.surfaces[id]
                    )));
                }
                Ok(id)
            })
            .collect()
    }

    pub fn reserved_for_task(&self, task: &str) -> BTreeMap<String, TokenId> {
        let mut out = BTreeMap::new();
        for (id, role) in self.roles.iter().enumerate() {
            if let Role::Label { task: t, name } = role {
                if t == task {
                    out.insert(name.clone(), id);
                }
            }
        }
        out
    }

    /// Label names of a classification task in token-id order; the position
    /// in this list is the class index used by the encoder head.
    pub fn class_labels(&self, task: &str) -> Vec<String> {
        let mut pairs: Vec<(TokenId, String)> = self
            .reserved_for_task(task)
            .into_iter()
            .map(|(name, id)| (id, name))
            .collect();
        pairs.sort();
        pairs.into_iter().map(|(_, name)| name).collect()
    }

    /// Tokens a CTC label may contain: normal, non-reserved ids.
    pub fn ctc_label_space(&self) -> Vec<TokenId> {
        (0..self.len())
            .filter(|&id| matches!(self.roles[id], Role::Normal))
            .collect()
    }

    // ── Frequencies and allocation ───────────────────────────────────

    /// Exact token counts over the corpus lines; errors on an empty corpus.
    pub fn build_frequency_table<'a>(
        &self,
        lines: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; self.len()];
        let mut any = false;
        for line in lines {
            any = true;
            for c in line.chars() {
                let id = self.token_for_char(c)?;
                counts[id] += 1;
            }
        }
        if !any {
            return Err(Error::Input("frequency table over empty corpus".into()));
        }
        Ok(counts)
    }

    pub fn set_frequencies(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.len() {
            return Err(Error::Vocab(format!(
                "frequency table size {} does not match vocabulary size {}",
                counts.len(),
                self.len()
            )));
        }
        self.frequency = counts;
        Ok(())
    }

    /// Reserves one token per label for a task, choosing the
    /// lowest-frequency eligible tokens (ties broken by higher id).
    /// Already-assigned labels are kept as they are.
    pub fn allocate_task_tokens(&mut self, task: &str, labels: &[&str]) -> Result<()> {
        let existing = self.reserved_for_task(task);
        let missing: Vec<&str> = labels
            .iter()
            .copied()
            .filter(|l| !existing.contains_key(*l))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }

        let mut eligible: Vec<TokenId> = (0..self.len())
            .filter(|&id| matches!(self.roles[id], Role::Normal))
            .collect();
        // lowest frequency first; higher id wins ties
        eligible.sort_by(|&a, &b| {
            self.frequency[a]
                .cmp(&self.frequency[b])
                .then(b.cmp(&a))
        });
        if eligible.len() < missing.len() {
            return Err(Error::Vocab(format!(
                "need {} task tokens but only {} eligible tokens remain",
                missing.len(),
                eligible.len()
            )));
        }
        for (label, id) in missing.iter().zip(eligible) {
            self.roles[id] = Role::Label {
                task: task.to_string(),
                name: label.to_string(),
            };
        }
        Ok(())
    }

    // ── File format ──────────────────────────────────────────────────

    /// `id<TAB>surface<TAB>frequency<TAB>role`, one token per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() {
            let _ = writeln!(
                out,
                "{id}\t{}\t{}\t{}",
                self.surfaces[id],
                self.frequency[id],
                self.roles[id].encode()
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut surfaces = Vec::new();
        let mut roles = Vec::new();
        let mut frequency = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(Error::Vocab(format!(
                    "line {}: expected 4 tab-separated fields",
                    lineno + 1
                )));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::Vocab(format!("line {}: bad id", lineno + 1)))?;
            if id != surfaces.len() {
                return Err(Error::Vocab(format!(
                    "line {}: ids must be consecutive from 0",
                    lineno + 1
                )));
            }
            surfaces.push(fields[1].to_string());
            frequency.push(
                fields[2]
                    .parse()
                    .map_err(|_| Error::Vocab(format!("line {}: bad frequency", lineno + 1)))?,
            );
            roles.push(Role::decode(fields[3])?);
        }
        if surfaces.is_empty() {
            return Err(Error::Vocab("empty vocabulary file".into()));
        }

        let find_role = |role: &Role, what: &str| -> Result<TokenId> {
            roles
                .iter()
                .position(|r| r == role)
                .ok_or_else(|| Error::Vocab(format!("vocabulary has no {what} token")))
        };
        let pad = find_role(&Role::Pad, "pad")?;
        let bos = find_role(&Role::Bos, "bos")?;
        let eos = find_role(&Role::Eos, "eos")?;
        let blank = find_role(&Role::Blank, "blank")?;
        let sep = find_role(&Role::Sep, "sep")?;

        let mut char_index = BTreeMap::new();
        for (id, (s, role)) in surfaces.iter().zip(&roles).enumerate() {
            if matches!(role, Role::Normal | Role::Label { .. }) {
                let mut chars = s.chars();
                if let (Some(c), None) = (chars.next(), chars.next()) {
                    char_index.insert(c, id);
                }
            }
        }
        Ok(Self {
            surfaces,
            roles,
            frequency,
            char_index,
            pad,
            bos,
            eos,
            blank,
            sep,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

// ── Target sequences ─────────────────────────────────────────────────

/// Per-task content of a multi-task target.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Transduction text, tokenized per character.
    Text(String),
    /// Classification label, emitted as one reserved token.
    Label(String),
    /// Slot list; each slot is a reserved type token followed by its value.
    Slots(Vec<(String, String)>),
}

/// A decoder target `BOS ... EOS` with per-token task ownership.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSequence {
    pub tokens: Vec<TokenId>,
    /// One entry per token; `None` only for BOS.
    pub ownership: Vec<Option<String>>,
    pub tasks: Vec<String>,
}

impl TargetSequence {
    /// Checks the ownership partition: every non-BOS token owned exactly once.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.ownership.len() {
            return Err(Error::Format("ownership length mismatch".into()));
        }
        if self.tokens.is_empty() || self.ownership[0].is_some() {
            return Err(Error::Format("target must start with unowned BOS".into()));
        }
        for (i, owner) in self.ownership.iter().enumerate().skip(1) {
            match owner {
                Some(task) if self.tasks.contains(task) => {}
                Some(task) => {
                    return Err(Error::Format(format!("token {i} owned by unknown task {task}")))
                }
                None => return Err(Error::Format(format!("token {i} has no task owner"))),
            }
        }
        Ok(())
    }

    /// Token positions (into `tokens[1..]`, i.e. decoder output rows) owned
    /// by the given task.
    pub fn positions_of(&self, task: &str) -> Vec<usize> {
        self.ownership
            .iter()
            .skip(1)
            .enumerate()
            .filter(|(_, o)| o.as_deref() == Some(task))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Serializes per-task payloads as `BOS + task₁ + SEP + task₂ + ... + EOS`.
/// A separator is owned by the task it terminates; EOS by the final task.
pub fn format_target(per_task: &[(String, Payload)], vocab: &Vocabulary) -> Result<TargetSequence> {
    if per_task.is_empty() {
        return Err(Error::Format("target with no tasks".into()));
    }
    let mut tokens = vec![vocab.bos()];
    let mut ownership: Vec<Option<String>> = vec![None];
    let mut tasks = Vec::new();

    for (i, (task, payload)) in per_task.iter().enumerate() {
        if tasks.contains(task) {
            return Err(Error::Format(format!("task {task} appears twice in target")));
        }
        tasks.push(task.clone());
        let mut seg: Vec<TokenId> = Vec::new();
        match payload {
            Payload::Text(text) => {
                seg.extend(vocab.tokenize_text(text)?);
            }
            Payload::Label(name) => {
                let id = *vocab.reserved_for_task(task).get(name).ok_or_else(|| {
                    Error::Format(format!("unknown label {name:?} for task {task}"))
                })?;
                seg.push(id);
            }
            Payload::Slots(slots) => {
                let reserved = vocab.reserved_for_task(task);
                for (ty, value) in slots {
                    let id = *reserved.get(ty).ok_or_else(|| {
                        Error::Format(format!("unknown slot type {ty:?} for task {task}"))
                    })?;
                    seg.push(id);
                    seg.extend(vocab.tokenize_text(value)?);
                }
            }
        }
        for id in seg {
            tokens.push(id);
            ownership.push(Some(task.clone()));
        }
        if i + 1 < per_task.len() {
            tokens.push(vocab.sep());
            ownership.push(Some(task.clone()));
        }
    }
    tokens.push(vocab.eos());
    ownership.push(Some(tasks.last().unwrap().clone()));

    let seq = TargetSequence {
        tokens,
        ownership,
        tasks,
    };
    seq.validate()?;
    Ok(seq)
}

// ── Parsing decoded output ───────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum ParseFlag {
    /// Segments beyond the expected task list were dropped.
    SurplusSegments(usize),
    /// An expected task had no segment at all.
    AbsentTask(String),
    /// An expected task's segment contained no tokens.
    EmptySegment(String),
    /// A reserved token of some other task appeared inside a segment.
    ForeignLabel { segment_task: String, token_task: String },
    /// pad/blank/BOS tokens found inside the output.
    StraySpecial,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedPayload {
    pub text: String,
    pub label: Option<String>,
    pub slots: Vec<(String, String)>,
    pub absent: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedOutput {
    pub payloads: BTreeMap<String, ParsedPayload>,
    pub flags: Vec<ParseFlag>,
}

impl ParsedOutput {
    pub fn payload(&self, task: &str) -> Option<&ParsedPayload> {
        self.payloads.get(task)
    }
}

/// Splits decoded tokens into per-task payloads. Total over arbitrary
/// output: malformations are reported through flags, never by panicking
/// or erroring.
pub fn parse_output(
    tokens: &[TokenId],
    vocab: &Vocabulary,
    expected_tasks: &[String],
) -> ParsedOutput {
    let mut out = ParsedOutput::default();

    // strip BOS / terminate at EOS / flag stray specials
    let mut body: Vec<TokenId> = Vec::with_capacity(tokens.len());
    let mut stray = false;
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= vocab.len() {
            stray = true;
            continue;
        }
        if tok == vocab.eos() {
            break;
        }
        if tok == vocab.bos() {
            if i != 0 {
                stray = true;
            }
            continue;
        }
        if tok == vocab.pad() || tok == vocab.blank() {
            stray = true;
            continue;
        }
        body.push(tok);
    }
    if stray {
        out.flags.push(ParseFlag::StraySpecial);
    }

    let segments: Vec<&[TokenId]> = body.split(|&t| t == vocab.sep()).collect();
    if segments.len() > expected_tasks.len() {
        out.flags
            .push(ParseFlag::SurplusSegments(segments.len() - expected_tasks.len()));
    }

    for (i, task) in expected_tasks.iter().enumerate() {
        let mut payload = ParsedPayload::default();
        match segments.get(i) {
            None => {
                payload.absent = true;
                out.flags.push(ParseFlag::AbsentTask(task.clone()));
            }
            Some(seg) if seg.is_empty() => {
                out.flags.push(ParseFlag::EmptySegment(task.clone()));
            }
            Some(seg) => {
                let mut open_slot: Option<(String, String)> = None;
                for &tok in *seg {
                    match vocab.label_of(tok) {
                        Some((tok_task, name)) => {
                            if tok_task == task {
                                if payload.label.is_none() {
                                    payload.label = Some(name.to_string());
                                }
                                if let Some((ty, value)) = open_slot.take() {
                                    payload.slots.push((ty, value.trim().to_string()));
                                }
                                open_slot = Some((name.to_string(), String::new()));
                            } else {
                                out.flags.push(ParseFlag::ForeignLabel {
                                    segment_task: task.clone(),
                                    token_task: tok_task.to_string(),
                                });
                            }
                        }
                        None => {
                            let s = vocab.surface(tok);
                            payload.text.push_str(s);
                            if let Some((_, value)) = &mut open_slot {
                                value.push_str(s);
                            }
                        }
                    }
                }
                if let Some((ty, value)) = open_slot.take() {
                    payload.slots.push((ty, value.trim().to_string()));
                }
            }
        }
        out.payloads.insert(task.clone(), payload);
    }
    out
}
