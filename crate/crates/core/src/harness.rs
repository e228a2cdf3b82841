//! Training and evaluation orchestration: experiment configs, dataset
//! generation, base-model and adapter training with a freeze audit,
//! metric reports, parameter accounting and the finite-difference suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterTaskModule, ModuleKind};
use crate::autograd::gradcheck::{finite_difference, max_rel_err};
use crate::checkpoint::{registry_hash, Checkpoint};
use crate::decoder::{decode_example, DecodeConfig, DecodeContext};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, SlotStats};
use crate::model::{count_parameters, CountFilter, ForwardPass, ModelConfig, UnifiedModel};
use crate::objective::{total_objective, LossBreakdown, ObjectiveConfig, ObjectiveTarget};
use crate::optim::{Adam, AdamConfig};
use crate::taskspace::{format_target, parse_output, Payload, TargetSequence, Vocabulary};
use crate::toydata::{
    self, gen_classification, gen_slots, gen_transduction, phones_of, split_examples, ToyExample,
};

// ── Experiment configuration ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Text,
    Label,
    Slots,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GeneratorSpec {
    Transduction(toydata::TransductionConfig),
    Classification(toydata::ClassificationConfig),
    Slots(toydata::SlotConfig),
}

fn default_spare_tokens() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub vocab: PathBuf,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default = "default_spare_tokens")]
    pub spare_tokens: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CheckpointPaths {
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub members: BTreeMap<String, PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub module: Option<ModuleSpec>,
    pub decode: DecodeConfig,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Target composition, serialization order.
    pub tasks: Vec<TaskSpec>,
    pub data: DataConfig,
    pub checkpoints: CheckpointPaths,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.decode.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("experiment has no tasks".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for task in &self.tasks {
            if !self.objective.lambda_task.contains_key(&task.name) {
                return Err(Error::Config(format!(
                    "task {} has no lambda_task weight",
                    task.name
                )));
            }
        }
        if let Some(spec) = &self.module {
            if spec.members.is_empty() {
                return Err(Error::Config("module spec has no members".into()));
            }
        }
        Ok(())
    }

    /// Overrides every task weight: `unit` sets 1, `equal` sets 1/N.
    pub fn apply_lambda_preset(&mut self, preset: &str) -> Result<()> {
        let n = self.tasks.len() as f64;
        let value = match preset {
            "unit" => 1.0,
            "equal" => 1.0 / n,
            other => {
                return Err(Error::Config(format!(
                    "unknown lambda preset {other:?} (expected unit or equal)"
                )))
            }
        };
        for task in &self.tasks {
            self.objective.lambda_task.insert(task.name.clone(), value);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

fn split_path(cfg: &ExperimentConfig, split: Split) -> &Path {
    match split {
        Split::Train => &cfg.data.train,
        Split::Dev => &cfg.data.dev,
        Split::Test => &cfg.data.test,
    }
}

// ── Dataset generation ───────────────────────────────────────────────

fn generator_alphabet(spec: &GeneratorSpec) -> String {
    let mut chars: Vec<char> = match spec {
        GeneratorSpec::Transduction(c) => c.alphabet.chars().collect(),
        GeneratorSpec::Classification(c) => c.alphabet.chars().collect(),
        GeneratorSpec::Slots(c) => {
            let mut set = Vec::new();
            for template in &c.grammar.templates {
                for piece in template {
                    match piece {
                        toydata::Piece::Word(w) => set.extend(w.chars()),
                        toydata::Piece::Slot { values, .. } => {
                            for v in values {
                                set.extend(v.chars());
                            }
                        }
                    }
                }
            }
            set
        }
    };
    chars.push(' ');
    chars.sort_unstable();
    chars.dedup();
    chars.retain(|c| !c.is_whitespace() || *c == ' ');
    chars.into_iter().collect()
}

/// Generates the dataset files and the vocabulary for an experiment.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.data.generator.as_ref().ok_or_else(|| {
        Error::Config("experiment config has no data.generator section".into())
    })?;
    let examples = match spec {
        GeneratorSpec::Transduction(c) => gen_transduction(c)?,
        GeneratorSpec::Classification(c) => gen_classification(c)?,
        GeneratorSpec::Slots(c) => gen_slots(c)?,
    };
    let (train, dev, test) = split_examples(examples);

    let mut vocab = Vocabulary::character(&generator_alphabet(spec), cfg.data.spare_tokens)?;
    let lines: Vec<&str> = train.iter().map(|e| e.transcript.as_str()).collect();
    let counts = vocab.build_frequency_table(lines.iter().copied())?;
    vocab.set_frequencies(counts)?;
    match spec {
        GeneratorSpec::Classification(c) => {
            let labels: Vec<&str> = c.labels.iter().map(String::as_str).collect();
            vocab.allocate_task_tokens(&c.class_task, &labels)?;
        }
        GeneratorSpec::Slots(c) => {
            let types = c.grammar.slot_types();
            let refs: Vec<&str> = types.iter().map(String::as_str).collect();
            vocab.allocate_task_tokens("sf", &refs)?;
        }
        GeneratorSpec::Transduction(_) => {}
    }

    toydata::write_jsonl(&cfg.data.train, &train)?;
    toydata::write_jsonl(&cfg.data.dev, &dev)?;
    toydata::write_jsonl(&cfg.data.test, &test)?;
    if let Some(dir) = cfg.data.vocab.parent() {
        std::fs::create_dir_all(dir)?;
    }
    vocab.save(&cfg.data.vocab)?;
    Ok(())
}

// ── Target construction ──────────────────────────────────────────────

/// Builds the decoder target and objective labels for one example under the
/// experiment's task composition.
pub fn build_target(
    ex: &ToyExample,
    tasks: &[TaskSpec],
    vocab: &Vocabulary,
) -> Result<ObjectiveTarget> {
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut ctc_label = None;
    let mut class_label = None;
    for task in tasks {
        let payload = match task.kind {
            TaskKind::Text => Payload::Text(ex.transcript.clone()),
            TaskKind::Label => {
                let label = ex.class_label.clone().ok_or_else(|| {
                    Error::Config(format!(
                        "task {} needs a class label but the example has none",
                        task.name
                    ))
                })?;
                let classes = vocab.class_labels(&task.name);
                let index = classes.iter().position(|l| *l == label).ok_or_else(|| {
                    Error::Vocab(format!("label {label:?} not reserved for task {}", task.name))
                })?;
                class_label = Some(index);
                Payload::Label(label)
            }
            TaskKind::Slots => {
                let slots = ex.slots.clone().ok_or_else(|| {
                    Error::Config(format!(
                        "task {} needs slots but the example has none",
                        task.name
                    ))
                })?;
                Payload::Slots(slots)
            }
        };
        if task.kind == TaskKind::Text && ctc_label.is_none() {
            ctc_label = Some(vocab.tokenize_text(&ex.transcript)?);
        }
        per_task.push((task.name.clone(), payload));
    }
    let sequence = format_target(&per_task, vocab)?;
    Ok(ObjectiveTarget {
        sequence,
        ctc_label,
        class_label,
    })
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub first_loss: f64,
}

pub struct Trainer {
    pub model: UnifiedModel,
    pub vocab: Vocabulary,
    pub module: Option<AdapterTaskModule>,
    pub cfg: ExperimentConfig,
    pub history: Vec<LossBreakdown>,
    data: Vec<ToyExample>,
    opt: Adam,
    cursor: usize,
    frozen_hash: [u8; 32],
    ckpt_kind: &'static str,
}

fn member_seed(seed: u64, name: &str) -> u64 {
    let h = name
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(h)
}

impl Trainer {
    /// Base-model training: the full backbone and heads are trainable.
    pub fn base(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.module.is_some() {
            return Err(Error::Config(
                "base training must not name a task module".into(),
            ));
        }
        let mut model = UnifiedModel::new(cfg.model.clone(), cfg.seed)?;
        model.params.set_all_trainable(true);
        let vocab = Vocabulary::load(&cfg.data.vocab)?;
        let data = toydata::read_jsonl(&cfg.data.train)?;
        let opt = Adam::new(cfg.optimizer.clone());
        let frozen_hash = registry_hash(&model, |_| false);
        Ok(Self {
            model,
            vocab,
            module: None,
            cfg,
            history: Vec::new(),
            data,
            opt,
            cursor: 0,
            frozen_hash,
            ckpt_kind: "base",
        })
    }

    /// Adapter training under Single/Stack/Fusion with everything else
    /// frozen. Pre-trained members load from their checkpoints; the module
    /// being trained starts fresh.
    pub fn adapter(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg
            .module
            .clone()
            .ok_or_else(|| Error::Config("adapter training needs a module spec".into()))?;
        let base_path = cfg
            .checkpoints
            .base
            .clone()
            .ok_or_else(|| Error::Config("adapter training needs a base checkpoint".into()))?;

        let mut model = UnifiedModel::new(cfg.model.clone(), cfg.seed)?;
        Checkpoint::load(&base_path)?.apply(&mut model)?;

        let n_members = spec.members.len();
        for (i, member) in spec.members.iter().enumerate() {
            model.add_adapter(member, member_seed(cfg.seed, member))?;
            match cfg.checkpoints.members.get(member) {
                Some(path) => Checkpoint::load(path)?.apply(&mut model)?,
                None => {
                    let is_new = match spec.kind {
                        ModuleKind::Single => true,
                        ModuleKind::Stack => i + 1 == n_members,
                        ModuleKind::Fusion => false,
                    };
                    if !is_new {
                        return Err(Error::Config(format!(
                            "member adapter {member} has no checkpoint but must be pre-trained"
                        )));
                    }
                }
            }
        }
        if spec.kind == ModuleKind::Fusion {
            model.add_fusion(member_seed(cfg.seed, "fusion"))?;
        }
        let module = adapters::build_task_module(
            &mut model,
            spec.kind,
            &spec.members,
            cfg.objective.is_classification,
        )?;
        if module.trainable.is_empty() {
            return Err(Error::Config("task module has an empty trainable set".into()));
        }

        let vocab = Vocabulary::load(&cfg.data.vocab)?;
        let data = toydata::read_jsonl(&cfg.data.train)?;
        let opt = Adam::new(cfg.optimizer.clone());
        let trainable = module.trainable.clone();
        let frozen_hash = registry_hash(&model, |name| !trainable.contains(name));
        let ckpt_kind = match spec.kind {
            ModuleKind::Fusion => "fusion",
            _ => "adapter",
        };
        Ok(Self {
            model,
            vocab,
            module: Some(module),
            cfg,
            history: Vec::new(),
            data,
            opt,
            cursor: 0,
            frozen_hash,
            ckpt_kind,
        })
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        let k = self.cfg.batch_size.min(n);
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            out.push(self.cursor);
            self.cursor = (self.cursor + 1) % n;
        }
        out
    }

    /// One optimizer step over the next batch. Losses are averaged over the
    /// batch; gradients likewise.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        if self.data.is_empty() {
            return Err(Error::Input("training data is empty".into()));
        }
        let indices = self.batch_indices();
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut sum = LossBreakdown {
            total: 0.0,
            nll: 0.0,
            ctc: 0.0,
            ce: 0.0,
            lambda_ctc: self.cfg.objective.lambda_ctc,
            is_classification: self.cfg.objective.is_classification,
            per_task: BTreeMap::new(),
        };
        let k = indices.len() as f64;

        for idx in indices.iter().copied() {
            let ex = &self.data[idx];
            let target = build_target(ex, &self.cfg.tasks, &self.vocab)?;
            let mut fp = ForwardPass::new(&self.model, true);
            let enc = fp.encode(&ex.features, self.module.as_ref())?;
            let prefix = &target.sequence.tokens[..target.sequence.tokens.len() - 1];
            let dec_logits = fp.decode_logits(enc.enc_states, prefix, self.module.as_ref())?;
            let (loss_id, bd) = total_objective(
                &mut fp.tape,
                dec_logits,
                Some(enc.ctc_logits),
                Some(enc.cls_logits),
                &target,
                &self.cfg.objective,
            )?;
            fp.tape.backward(loss_id)?;

            sum.total += bd.total;
            sum.nll += bd.nll;
            sum.ctc += bd.ctc;
            sum.ce += bd.ce;
            for (task, v) in &bd.per_task {
                *sum.per_task.entry(task.clone()).or_insert(0.0) += v;
            }

            for (name, id) in fp.bound_params() {
                if !fp.tape.requires_grad(id) {
                    continue;
                }
                let Some(g) = fp.tape.grad(id) else { continue };
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(name.to_string(), g.to_vec());
                    }
                }
            }
        }

        sum.total /= k;
        sum.nll /= k;
        sum.ctc /= k;
        sum.ce /= k;
        for v in sum.per_task.values_mut() {
            *v /= k;
        }
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v /= k;
            }
        }

        if !sum.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged to {} at step {}",
                sum.total,
                self.history.len()
            )));
        }
        self.opt.step(&mut self.model, &grads)?;
        self.history.push(sum.clone());
        Ok(sum)
    }

    /// Runs the configured number of steps, logging every `log_every` steps
    /// (0 silences the log).
    pub fn run(&mut self, log_every: usize) -> Result<TrainSummary> {
        let steps = self.cfg.steps;
        let mut first_loss = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..steps {
            let bd = self.step()?;
            if step == 0 {
                first_loss = bd.total;
            }
            last = bd.total;
            if log_every > 0 && (step % log_every == 0 || step + 1 == steps) {
                let per_task: Vec<String> = bd
                    .per_task
                    .iter()
                    .map(|(t, v)| format!("{t}={v:.4}"))
                    .collect();
                println!(
                    "step {step:>5}  total {:.4}  nll {:.4}  ctc {:.4}  ce {:.4}  [{}]",
                    bd.total,
                    bd.nll,
                    bd.ctc,
                    bd.ce,
                    per_task.join(" ")
                );
            }
        }
        Ok(TrainSummary {
            steps_run: steps,
            final_loss: last,
            first_loss,
        })
    }

    /// Audits the freeze contract and writes the output checkpoint.
    pub fn finish(&self) -> Result<()> {
        self.audit_frozen()?;
        let ckpt = match &self.module {
            None => Checkpoint::capture(&self.model, self.ckpt_kind, &[]),
            Some(module) => {
                Checkpoint::capture_names(&self.model, self.ckpt_kind, &module.trainable)?
            }
        };
        ckpt.save(&self.cfg.checkpoints.out)
    }

    /// Recomputes the frozen-parameter hash and fails on any drift.
    pub fn audit_frozen(&self) -> Result<()> {
        let trainable: std::collections::BTreeSet<String> = match &self.module {
            Some(m) => m.trainable.clone(),
            None => self
                .model
                .params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| p.name.clone())
                .collect(),
        };
        let now = registry_hash(&self.model, |name| !trainable.contains(name));
        if now != self.frozen_hash {
            return Err(Error::Contract(
                "freeze audit failed: a frozen parameter changed during training".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer_state_names(&self) -> Vec<String> {
        self.opt.state_names().map(str::to_string).collect()
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Rebuilds the model for inference: base checkpoint, member checkpoints,
/// then the trained module checkpoint (`checkpoints.out`) when it exists.
pub fn load_eval_model(cfg: &ExperimentConfig) -> Result<(UnifiedModel, Option<AdapterTaskModule>)> {
    let mut model = UnifiedModel::new(cfg.model.clone(), cfg.seed)?;
    let base_path = cfg
        .checkpoints
        .base
        .clone()
        .unwrap_or_else(|| cfg.checkpoints.out.clone());
    Checkpoint::load(&base_path)?.apply(&mut model)?;

    let module = match &cfg.module {
        None => None,
        Some(spec) => {
            for member in &spec.members {
                model.add_adapter(member, member_seed(cfg.seed, member))?;
                if let Some(path) = cfg.checkpoints.members.get(member) {
                    Checkpoint::load(path)?.apply(&mut model)?;
                }
            }
            if spec.kind == ModuleKind::Fusion {
                model.add_fusion(member_seed(cfg.seed, "fusion"))?;
            }
            let module = adapters::build_task_module(
                &mut model,
                spec.kind,
                &spec.members,
                cfg.objective.is_classification,
            )?;
            if cfg.checkpoints.out.exists() {
                Checkpoint::load(&cfg.checkpoints.out)?.apply(&mut model)?;
            }
            Some(module)
        }
    };
    Ok((model, module))
}

/// Decodes and scores a slice of examples under a task composition.
pub fn evaluate_examples(
    model: &UnifiedModel,
    module: Option<&AdapterTaskModule>,
    vocab: &Vocabulary,
    tasks: &[TaskSpec],
    decode: &DecodeConfig,
    examples: &[ToyExample],
) -> Result<MetricsReport> {
    let ctx = DecodeContext::from_vocab(vocab);
    let task_names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();

    let mut text_refs: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut text_hyps: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut label_refs: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut label_hyps: BTreeMap<&str, Vec<Option<String>>> = BTreeMap::new();
    let mut slot_stats: BTreeMap<&str, SlotStats> = BTreeMap::new();

    for ex in examples {
        let ranked = decode_example(model, module, &ex.features, &ctx, decode)?;
        let best = ranked
            .first()
            .ok_or_else(|| Error::Numeric("decoder returned no hypotheses".into()))?;
        let parsed = parse_output(&best.tokens, vocab, &task_names);

        for task in tasks {
            let payload = parsed.payload(&task.name);
            match task.kind {
                TaskKind::Text => {
                    let hyp = payload.map(|p| p.text.clone()).unwrap_or_default();
                    text_refs
                        .entry(task.name.as_str())
                        .or_default()
                        .push(ex.transcript.clone());
                    text_hyps.entry(task.name.as_str()).or_default().push(hyp);
                }
                TaskKind::Label => {
                    let hyp = payload.and_then(|p| {
                        if p.absent {
                            None
                        } else {
                            p.label.clone()
                        }
                    });
                    label_refs
                        .entry(task.name.as_str())
                        .or_default()
                        .push(ex.class_label.clone().unwrap_or_default());
                    label_hyps.entry(task.name.as_str()).or_default().push(hyp);
                }
                TaskKind::Slots => {
                    let refs = ex.slots.clone().unwrap_or_default();
                    let hyps = payload.map(|p| p.slots.clone()).unwrap_or_default();
                    slot_stats
                        .entry(task.name.as_str())
                        .or_default()
                        .merge(&metrics::slot_stats(&refs, &hyps));
                }
            }
        }
    }

    let mut report = MetricsReport {
        n_examples: examples.len(),
        ..MetricsReport::default()
    };
    for (task, refs) in &text_refs {
        let hyps = &text_hyps[task];
        report.insert(task, "wer", metrics::wer(refs, hyps)?);
        report.insert(task, "cer", metrics::cer(refs, hyps)?);
        let ref_phones: Vec<Vec<String>> = refs.iter().map(|t| phones_of(t)).collect();
        let hyp_phones: Vec<Vec<String>> = hyps.iter().map(|t| phones_of(t)).collect();
        report.insert(task, "per", metrics::per(&ref_phones, &hyp_phones)?);
    }
    for (task, refs) in &label_refs {
        report.insert(task, "accuracy", metrics::accuracy(refs, &label_hyps[task])?);
    }
    for (task, stats) in &slot_stats {
        report.insert(task, "slot_f1", stats.f1());
        report.insert(task, "slot_value_cer", stats.value_cer());
    }
    Ok(report)
}

/// Loads the model and scores one dataset split.
pub fn evaluate(cfg: &ExperimentConfig, split: Split) -> Result<MetricsReport> {
    let (model, module) = load_eval_model(cfg)?;
    let vocab = Vocabulary::load(&cfg.data.vocab)?;
    let examples = toydata::read_jsonl(split_path(cfg, split))?;
    evaluate_examples(
        &model,
        module.as_ref(),
        &vocab,
        &cfg.tasks,
        &cfg.decode,
        &examples,
    )
}

/// Decodes a single example and reports the hypothesis with its parse.
#[derive(Debug, Serialize)]
pub struct DecodeReport {
    pub tokens: Vec<usize>,
    pub surfaces: Vec<String>,
    pub att_score: f64,
    pub ctc_score: f64,
    pub joint_score: f64,
    pub truncated: bool,
    pub payloads: BTreeMap<String, String>,
    pub reference: String,
}

pub fn decode_one(cfg: &ExperimentConfig, split: Split, index: usize) -> Result<DecodeReport> {
    let (model, module) = load_eval_model(cfg)?;
    let vocab = Vocabulary::load(&cfg.data.vocab)?;
    let examples = toydata::read_jsonl(split_path(cfg, split))?;
    let ex = examples.get(index).ok_or_else(|| {
        Error::Input(format!(
            "example index {index} out of range ({} examples)",
            examples.len()
        ))
    })?;
    let ctx = DecodeContext::from_vocab(&vocab);
    let ranked = decode_example(&model, module.as_ref(), &ex.features, &ctx, &cfg.decode)?;
    let best = &ranked[0];
    let task_names: Vec<String> = cfg.tasks.iter().map(|t| t.name.clone()).collect();
    let parsed = parse_output(&best.tokens, &vocab, &task_names);
    let payloads = cfg
        .tasks
        .iter()
        .map(|t| {
            let p = parsed.payload(&t.name);
            let rendered = match t.kind {
                TaskKind::Text => p.map(|p| p.text.clone()).unwrap_or_default(),
                TaskKind::Label => p
                    .and_then(|p| p.label.clone())
                    .unwrap_or_else(|| "<absent>".into()),
                TaskKind::Slots => p
                    .map(|p| format!("{:?}", p.slots))
                    .unwrap_or_default(),
            };
            (t.name.clone(), rendered)
        })
        .collect();
    Ok(DecodeReport {
        tokens: best.tokens.clone(),
        surfaces: best.tokens.iter().map(|&t| vocab.surface(t).to_string()).collect(),
        att_score: best.att_score,
        ctc_score: best.ctc_score,
        joint_score: best.joint(&cfg.decode),
        truncated: best.truncated,
        payloads,
        reference: ex.transcript.clone(),
    })
}

// ── Parameter accounting ─────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct ParamRow {
    pub tasks: usize,
    pub adapter_total: usize,
    pub dedicated_total: usize,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct ParamReport {
    /// One-time decoder-side cost of the shared base model.
    pub shared_fixed: usize,
    /// Marginal trainable parameters per added task (one adapter).
    pub adapter_per_task: usize,
    /// Trainable parameters of one dedicated decoder stack.
    pub dedicated_per_task: usize,
    pub rows: Vec<ParamRow>,
}

impl ParamReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "shared decoder cost {}   adapter/task {}   dedicated decoder/task {}\n",
            self.shared_fixed, self.adapter_per_task, self.dedicated_per_task
        ));
        out.push_str("tasks\tadapters_total\tdedicated_total\tratio\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\n",
                row.tasks, row.adapter_total, row.dedicated_total, row.ratio
            ));
        }
        out
    }
}

/// Additional-trainable-parameter totals for `k` tasks: a shared decoder
/// trained once plus one adapter per task, against one dedicated decoder
/// stack per task. The encoder is excluded on both sides.
pub fn report_params(model_cfg: &ModelConfig, task_counts: &[usize]) -> Result<ParamReport> {
    let model = UnifiedModel::new(model_cfg.clone(), 0)?;
    let dedicated_per_task = count_parameters(&model, CountFilter::Prefix("backbone/dec"))
        + count_parameters(&model, CountFilter::Prefix("backbone/embed"))
        + count_parameters(&model, CountFilter::Prefix("backbone/out_proj"));
    let shared_fixed =
        dedicated_per_task + count_parameters(&model, CountFilter::Prefix("head/ctc"));
    let adapter_per_task = adapters::adapter_param_count(model_cfg);

    let rows = task_counts
        .iter()
        .map(|&k| {
            let adapter_total = shared_fixed + k * adapter_per_task;
            let dedicated_total = k * dedicated_per_task;
            ParamRow {
                tasks: k,
                adapter_total,
                dedicated_total,
                ratio: adapter_total as f64 / dedicated_total as f64,
            }
        })
        .collect();
    Ok(ParamReport {
        shared_fixed,
        adapter_per_task,
        dedicated_per_task,
        rows,
    })
}

// ── Finite-difference suite ──────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Model small enough to sweep exhaustively with central differences.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        vocab_size: 12,
        n_class_labels: 3,
        max_positions: 12,
        adapter_dim: 2,
        d_input: 3,
    }
}

/// Central finite differences (ε = 1e-5) over every parameter of a small
/// model against the analytic gradients of the combined objective.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    use rand::{Rng, SeedableRng};
    let cfg = gradcheck_model_config();
    let mut model = UnifiedModel::new(cfg.clone(), seed)?;
    model.add_adapter("probe", seed.wrapping_add(1))?;
    // non-trivial adapter weights so its gradients are exercised
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for slot in model.slot_names() {
        let name = format!("adapter/probe/{slot}/up/weight");
        for v in model.params.value_mut(&name)?.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    model.params.set_all_trainable(true);
    let module = AdapterTaskModule {
        kind: ModuleKind::Single,
        members: vec!["probe".into()],
        trainable: Default::default(),
    };

    let features = crate::autograd::Array::new(
        vec![4, 3],
        (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let target = ObjectiveTarget {
        sequence: TargetSequence {
            tokens: vec![1, 5, 6, 7, 11, 2],
            ownership: vec![
                None,
                Some("asr".into()),
                Some("asr".into()),
                Some("asr".into()),
                Some("er".into()),
                Some("er".into()),
            ],
            tasks: vec!["asr".into(), "er".into()],
        },
        ctc_label: Some(vec![5, 6, 7]),
        class_label: Some(1),
    };
    let obj = ObjectiveConfig {
        lambda_ctc: 0.3,
        lambda_task: [("asr".to_string(), 0.5), ("er".to_string(), 0.5)].into(),
        is_classification: true,
        blank_id: 3,
        pad_id: 0,
    };

    let eval_loss = |model: &UnifiedModel| -> Result<f64> {
        let mut fp = ForwardPass::new(model, false);
        let enc = fp.encode(&features, Some(&module))?;
        let prefix = &target.sequence.tokens[..target.sequence.tokens.len() - 1];
        let dec = fp.decode_logits(enc.enc_states, prefix, Some(&module))?;
        let (_, bd) = total_objective(
            &mut fp.tape,
            dec,
            Some(enc.ctc_logits),
            Some(enc.cls_logits),
            &target,
            &obj,
        )?;
        Ok(bd.total)
    };

    // analytic gradients in one pass
    let mut fp = ForwardPass::new(&model, true);
    let enc = fp.encode(&features, Some(&module))?;
    let prefix = &target.sequence.tokens[..target.sequence.tokens.len() - 1];
    let dec = fp.decode_logits(enc.enc_states, prefix, Some(&module))?;
    let (loss_id, _) = total_objective(
        &mut fp.tape,
        dec,
        Some(enc.ctc_logits),
        Some(enc.cls_logits),
        &target,
        &obj,
    )?;
    fp.tape.backward(loss_id)?;
    let analytic: BTreeMap<String, Vec<f64>> = fp
        .bound_params()
        .map(|(name, id)| {
            let g = fp
                .tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; fp.tape.value(id).len()]);
            (name.to_string(), g)
        })
        .collect();
    drop(fp);

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let n_params: usize = count_parameters(&model, CountFilter::All);
    let mut worst: f64 = 0.0;
    for name in names {
        let base = model.params.get(&name)?.value.clone();
        let numeric = finite_difference(base.data(), 1e-5, |vals| {
            model
                .params
                .value_mut(&name)
                .unwrap()
                .data_mut()
                .copy_from_slice(vals);
            let loss = eval_loss(&model).expect("loss evaluation failed during sweep");
            loss
        });
        model
            .params
            .value_mut(&name)?
            .data_mut()
            .copy_from_slice(base.data());
        let zero;
        let a = match analytic.get(&name) {
            Some(g) => g,
            None => {
                zero = vec![0.0; numeric.len()];
                &zero
            }
        };
        let err = max_rel_err(a, &numeric, 1e-3);
        worst = worst.max(err);
    }

    let tolerance = 1e-4;
    Ok(GradcheckReport {
        n_params,
        max_rel_err: worst,
        tolerance,
        passed: worst < tolerance,
    })
}
