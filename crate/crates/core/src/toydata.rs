//! Synthetic dataset generators: seeded, deterministic stand-ins for the
//! transduction, classification and slot-filling corpora.
//!
//! Each character of a transcript emits `frames_per_char` noisy copies of a
//! fixed per-character code vector; classification examples additionally add
//! a label-specific bias to every frame so both the encoder head and the
//! generated label token are learnable. Labels are derivable from the
//! transcript's first character, which gives multi-task training genuine
//! shared signal.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::error::{Error, Result};

// ── Examples ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ToyExample {
    pub features: Array,
    pub transcript: String,
    pub phones: Vec<String>,
    pub class_label: Option<String>,
    pub slots: Option<Vec<(String, String)>>,
    pub task_set: Vec<String>,
}

/// Deterministic per-character phone mapping: uppercase symbols, spaces
/// dropped (word boundaries are not phones).
pub fn phones_of(transcript: &str) -> Vec<String> {
    transcript
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_uppercase().to_string())
        .collect()
}

// ── Configs ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransductionConfig {
    pub seed: u64,
    pub n: usize,
    /// Non-space characters transcripts are built from.
    pub alphabet: String,
    /// Transcript length in non-space characters.
    pub len_range: (usize, usize),
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub d_input: usize,
    /// Extra repeated frames per character, at most this many.
    #[serde(default)]
    pub jitter: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassificationConfig {
    pub seed: u64,
    pub n: usize,
    pub labels: Vec<String>,
    pub alphabet: String,
    pub len_range: (usize, usize),
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub d_input: usize,
    /// Scale of the additive per-label feature bias.
    pub signature_scale: f64,
    /// Task name carried by the label (e.g. "er" or "ic").
    pub class_task: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum Piece {
    Word(String),
    Slot { r#type: String, values: Vec<String> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlotGrammar {
    pub templates: Vec<Vec<Piece>>,
}

impl SlotGrammar {
    pub fn slot_types(&self) -> Vec<String> {
        let mut types = Vec::new();
        for template in &self.templates {
            for piece in template {
                if let Piece::Slot { r#type, .. } = piece {
                    if !types.contains(r#type) {
                        types.push(r#type.clone());
                    }
                }
            }
        }
        types
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlotConfig {
    pub seed: u64,
    pub n: usize,
    pub grammar: SlotGrammar,
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub d_input: usize,
}

// ── Feature synthesis ────────────────────────────────────────────────

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0x85EB_CA6B))
        .wrapping_add(index)
}

/// Fixed per-character code vectors, a pure function of `(seed, d_input)`.
/// Shared by every split generated from the same config.
pub fn char_code(seed: u64, c: char, d_input: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0DE, c as u64));
    (0..d_input).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn label_signature(seed: u64, label: &str, d_input: usize, scale: f64) -> Vec<f64> {
    let h = label
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5167, h));
    (0..d_input).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn render_features(
    seed: u64,
    transcript: &str,
    d_input: usize,
    frames_per_char: usize,
    jitter: usize,
    noise_sigma: f64,
    bias: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0;
    for c in transcript.chars() {
        let code = char_code(seed, c, d_input);
        let frames = frames_per_char + if jitter > 0 { rng.gen_range(0..=jitter) } else { 0 };
        for _ in 0..frames {
            for (j, &v) in code.iter().enumerate() {
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * normal.sample(rng)
                } else {
                    0.0
                };
                let b = bias.map_or(0.0, |b| b[j]);
                rows.push(v + noise + b);
            }
            t += 1;
        }
    }
    Array::new(vec![t, d_input], rows)
}

fn random_transcript(rng: &mut ChaCha8Rng, alphabet: &[char], len_range: (usize, usize)) -> String {
    let (lo, hi) = len_range;
    let total = rng.gen_range(lo..=hi.max(lo));
    let mut out = String::new();
    let mut emitted = 0;
    while emitted < total {
        if emitted > 0 {
            out.push(' ');
        }
        let word_len = rng.gen_range(2..=4usize).min(total - emitted).max(1);
        for _ in 0..word_len {
            out.push(alphabet[rng.gen_range(0..alphabet.len())]);
            emitted += 1;
        }
    }
    out
}

// ── Generators ───────────────────────────────────────────────────────

/// Transduction examples (the ASR/PR stand-in).
pub fn gen_transduction(cfg: &TransductionConfig) -> Result<Vec<ToyExample>> {
    let alphabet: Vec<char> = cfg.alphabet.chars().collect();
    if alphabet.is_empty() || cfg.len_range.0 == 0 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(Error::Config("invalid transduction generator ranges".into()));
    }
    if cfg.frames_per_char == 0 {
        return Err(Error::Config("frames_per_char must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, i as u64));
        let transcript = random_transcript(&mut rng, &alphabet, cfg.len_range);
        let features = render_features(
            cfg.seed,
            &transcript,
            cfg.d_input,
            cfg.frames_per_char,
            cfg.jitter,
            cfg.noise_sigma,
            None,
            &mut rng,
        )?;
        out.push(ToyExample {
            features,
            phones: phones_of(&transcript),
            transcript,
            class_label: None,
            slots: None,
            task_set: vec!["asr".into(), "pr".into()],
        });
    }
    Ok(out)
}

/// Classification examples with transcripts (the ER/IC stand-in). The label
/// is uniform; the transcript's first character is drawn from the alphabet
/// residue class of the label, so the label is derivable from the text.
pub fn gen_classification(cfg: &ClassificationConfig) -> Result<Vec<ToyExample>> {
    let alphabet: Vec<char> = cfg.alphabet.chars().collect();
    let n_labels = cfg.labels.len();
    if n_labels == 0 || alphabet.len() < n_labels {
        return Err(Error::Config(
            "classification generator needs labels and an alphabet at least as large".into(),
        ));
    }
    if cfg.len_range.0 == 0 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(Error::Config("invalid classification generator ranges".into()));
    }
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2, i as u64));
        let label_idx = rng.gen_range(0..n_labels);
        let label = cfg.labels[label_idx].clone();

        // first character encodes the label
        let compatible: Vec<char> = alphabet
            .iter()
            .copied()
            .enumerate()
            .filter(|(j, _)| j % n_labels == label_idx)
            .map(|(_, c)| c)
            .collect();
        let first = compatible[rng.gen_range(0..compatible.len())];
        let mut transcript = random_transcript(&mut rng, &alphabet, cfg.len_range);
        transcript.replace_range(..transcript.chars().next().unwrap().len_utf8(), &first.to_string());

        let bias = label_signature(cfg.seed, &label, cfg.d_input, cfg.signature_scale);
        let features = render_features(
            cfg.seed,
            &transcript,
            cfg.d_input,
            cfg.frames_per_char,
            0,
            cfg.noise_sigma,
            Some(&bias),
            &mut rng,
        )?;
        out.push(ToyExample {
            features,
            phones: phones_of(&transcript),
            transcript,
            class_label: Some(label),
            slots: None,
            task_set: vec!["asr".into(), cfg.class_task.clone()],
        });
    }
    Ok(out)
}

/// Slot-filling examples from a template grammar (the SF stand-in).
pub fn gen_slots(cfg: &SlotConfig) -> Result<Vec<ToyExample>> {
    if cfg.grammar.templates.is_empty() {
        return Err(Error::Config("slot grammar has no templates".into()));
    }
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3, i as u64));
        let template = &cfg.grammar.templates[rng.gen_range(0..cfg.grammar.templates.len())];
        let mut words = Vec::new();
        let mut slots = Vec::new();
        for piece in template {
            match piece {
                Piece::Word(w) => words.push(w.clone()),
                Piece::Slot { r#type, values } => {
                    if values.is_empty() {
                        return Err(Error::Config(format!("slot {type} has no values", type = r#type)));
                    }
                    let value = values[rng.gen_range(0..values.len())].clone();
                    words.push(value.clone());
                    slots.push((r#type.clone(), value));
                }
            }
        }
        let transcript = words.join(" ");
        let features = render_features(
            cfg.seed,
            &transcript,
            cfg.d_input,
            cfg.frames_per_char,
            0,
            cfg.noise_sigma,
            None,
            &mut rng,
        )?;
        out.push(ToyExample {
            features,
            phones: phones_of(&transcript),
            transcript,
            class_label: None,
            slots: Some(slots),
            task_set: vec!["asr".into(), "sf".into()],
        });
    }
    Ok(out)
}

/// Train/dev/test split over disjoint index ranges, 80/10/10.
pub fn split_examples(
    mut examples: Vec<ToyExample>,
) -> (Vec<ToyExample>, Vec<ToyExample>, Vec<ToyExample>) {
    let n = examples.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    (examples, dev, test)
}

// ── JSON-lines dataset files ─────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    features: Vec<Vec<f64>>,
    transcript: String,
    phones: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots: Option<Vec<(String, String)>>,
    tasks: Vec<String>,
}

pub fn write_jsonl(path: &Path, examples: &[ToyExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    for ex in examples {
        let [t, d] = *ex.features.shape() else {
            return Err(Error::Contract("example features must be 2-D".into()));
        };
        let features: Vec<Vec<f64>> = (0..t)
            .map(|i| ex.features.data()[i * d..(i + 1) * d].to_vec())
            .collect();
        let record = ExampleRecord {
            features,
            transcript: ex.transcript.clone(),
            phones: ex.phones.clone(),
            label: ex.class_label.clone(),
            slots: ex.slots.clone(),
            tasks: ex.task_set.clone(),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ToyExample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let t = record.features.len();
        let d = record.features.first().map_or(0, Vec::len);
        if record.features.iter().any(|row| row.len() != d) {
            return Err(Error::Input(format!(
                "{}:{}: ragged feature rows",
                path.display(),
                lineno + 1
            )));
        }
        let data: Vec<f64> = record.features.into_iter().flatten().collect();
        out.push(ToyExample {
            features: Array::new(vec![t, d], data)?,
            transcript: record.transcript,
            phones: record.phones,
            class_label: record.label,
            slots: record.slots,
            task_set: record.tasks,
        });
    }
    Ok(out)
}
