//! Synthetic byte-level domains and JSONL datasets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparcError};
use crate::io::crc64;
use crate::model::{encode, TokenSequence};

pub const DEFAULT_MARKOV_ORDER: usize = 2;
/// Character replaced by a random alphabet symbol in template patterns.
pub const TEMPLATE_SLOT: char = '*';
/// Separator between documents in a pretraining stream.
pub const DOC_SEPARATOR: u8 = b'\n';

const fn default_order() -> usize {
    DEFAULT_MARKOV_ORDER
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Grammar {
    MarkovChain {
        #[serde(default = "default_order")]
        order: usize,
        transition_seed: u64,
    },
    Template {
        patterns: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    /// Printable ASCII symbols; each becomes one byte token.
    pub alphabet: String,
    pub grammar: Grammar,
    pub doc_count: usize,
    /// Inclusive document length range in tokens.
    pub doc_len: (usize, usize),
    /// Class verbalizers. When present, generated datasets are classification
    /// sets labelled by the most frequent of the first `n` alphabet symbols.
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
}

impl DomainSpec {
    pub fn markov(
        id: &str,
        alphabet: &str,
        transition_seed: u64,
        doc_count: usize,
        doc_len: (usize, usize),
    ) -> Self {
        DomainSpec {
            id: id.to_string(),
            alphabet: alphabet.to_string(),
            grammar: Grammar::MarkovChain {
                order: DEFAULT_MARKOV_ORDER,
                transition_seed,
            },
            doc_count,
            doc_len,
            label_set: None,
        }
    }

    fn symbols(&self) -> Result<Vec<u8>> {
        let mut syms: Vec<u8> = self.alphabet.bytes().collect();
        if syms.is_empty() || syms.iter().any(|b| !b.is_ascii_graphic() && *b != b' ') {
            return Err(SparcError::Data(format!(
                "{}: degenerate alphabet {:?} (need printable ASCII)",
                self.id, self.alphabet
            )));
        }
        let n = syms.len();
        syms.sort_unstable();
        syms.dedup();
        if syms.len() != n {
            return Err(SparcError::Data(format!(
                "{}: alphabet repeats a symbol",
                self.id
            )));
        }
        Ok(self.alphabet.bytes().collect())
    }

    pub fn validate(&self) -> Result<()> {
        let syms = self.symbols()?;
        if self.doc_count == 0 {
            return Err(SparcError::Data(format!(
                "{}: doc_count must be at least 1",
                self.id
            )));
        }
        let (lo, hi) = self.doc_len;
        if lo < 2 || lo > hi {
            return Err(SparcError::Data(format!(
                "{}: doc_len range {lo}..={hi} invalid (minimum 2)",
                self.id
            )));
        }
        match &self.grammar {
            Grammar::MarkovChain { order, .. } if *order == 0 || *order > 8 => {
                return Err(SparcError::Data(format!(
                    "{}: Markov order must be 1..=8",
                    self.id
                )));
            }
            Grammar::Template { patterns }
                if patterns.is_empty()
                    || patterns.iter().any(|p| p.is_empty() || !p.is_ascii()) =>
            {
                return Err(SparcError::Data(format!(
                    "{}: template patterns must be non-empty ASCII",
                    self.id
                )));
            }
            _ => {}
        }
        if let Some(labels) = &self.label_set {
            if labels.is_empty() || labels.len() > syms.len() || labels.iter().any(|l| l.is_empty())
            {
                return Err(SparcError::Data(format!(
                    "{}: label_set needs 1..={} non-empty verbalizers",
                    self.id,
                    syms.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Lm,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub kind: DatasetKind,
    pub examples: Vec<Example>,
    /// Verbalizers in a fixed order (classification only).
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn new(
        id: &str,
        kind: DatasetKind,
        examples: Vec<Example>,
        labels: Vec<String>,
    ) -> Result<Dataset> {
        let ds = Dataset {
            id: id.to_string(),
            kind,
            examples,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(SparcError::Data(format!("{}: dataset is empty", self.id)));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if let Some(reason) = self.example_problem(ex) {
                return Err(SparcError::Data(format!(
                    "{}: example {i}: {reason}",
                    self.id
                )));
            }
        }
        if self.kind == DatasetKind::Classification && self.labels.is_empty() {
            return Err(SparcError::Data(format!(
                "{}: empty verbalizer set",
                self.id
            )));
        }
        Ok(())
    }

    fn example_problem(&self, ex: &Example) -> Option<String> {
        match self.kind {
            DatasetKind::Lm => match &ex.target {
                None => Some("missing \"target\"".into()),
                Some(t) if t.is_empty() => Some("empty \"target\"".into()),
                Some(_) if ex.input.is_empty() => Some("empty \"input\"".into()),
                _ => None,
            },
            DatasetKind::Classification => match &ex.label {
                None => Some("missing \"label\"".into()),
                Some(l) if !self.labels.is_empty() && !self.labels.contains(l) => {
                    Some(format!("label {l:?} not among the verbalizers"))
                }
                Some(l) if l.is_empty() => Some("empty \"label\"".into()),
                _ => None,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Text used for subspace estimation: input plus target for LM data,
    /// input alone for classification.
    pub fn documents(&self) -> Vec<String> {
        self.examples
            .iter()
            .map(|ex| match (self.kind, &ex.target) {
                (DatasetKind::Lm, Some(t)) => format!("{}{}", ex.input, t),
                _ => ex.input.clone(),
            })
            .collect()
    }

    /// Training sequences (input ++ target/label, loss on the latter) that
    /// fit in `budget` tokens. Long targets are cut at the end; for
    /// classification the input loses its head instead. Returns the number
    /// of truncated examples.
    pub fn sequences(&self, budget: usize) -> Result<(Vec<TokenSequence>, usize)> {
        let mut truncated = 0;
        let mut out = Vec::with_capacity(self.examples.len());
        for ex in &self.examples {
            let (mut input, mut target) = match self.kind {
                DatasetKind::Lm => (
                    encode(&ex.input),
                    encode(ex.target.as_deref().unwrap_or("")),
                ),
                DatasetKind::Classification => {
                    (encode(&ex.input), encode(ex.label.as_deref().unwrap_or("")))
                }
            };
            if input.len() + target.len() > budget {
                truncated += 1;
                match self.kind {
                    DatasetKind::Lm => {
                        input.truncate(budget.saturating_sub(1).max(1));
                        target.truncate(budget.saturating_sub(input.len()));
                    }
                    DatasetKind::Classification => {
                        let keep = budget.saturating_sub(target.len());
                        input.drain(..input.len() - keep.min(input.len()));
                    }
                }
            }
            if input.is_empty() || target.is_empty() {
                return Err(SparcError::Data(format!(
                    "{}: an example does not fit in {budget} tokens",
                    self.id
                )));
            }
            let mut mask = vec![false; input.len()];
            mask.resize(input.len() + target.len(), true);
            input.extend(target);
            out.push(TokenSequence::new(input, mask)?);
        }
        if truncated > 0 {
            log::warn!(
                "{}: truncated {truncated} examples to {budget} tokens",
                self.id
            );
        }
        Ok((out, truncated))
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Peaked next-symbol distribution for one Markov context.
fn transition(seed: u64, context: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(context)));
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn sample(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn markov_doc(syms: &[u8], order: usize, tseed: u64, len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let n = syms.len();
    let mut idx: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..order.min(len) {
        idx.push(rng.random_range(0..n));
    }
    while idx.len() < len {
        let ctx = idx[idx.len() - order..].iter().fold(0u64, |c, &i| {
            c.wrapping_mul(n as u64).wrapping_add(i as u64)
        });
        let p = transition(tseed, ctx, n);
        idx.push(sample(&p, rng));
    }
    idx.into_iter().map(|i| syms[i]).collect()
}

fn template_doc(syms: &[u8], patterns: &[String], len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut doc = Vec::with_capacity(len + 16);
    while doc.len() < len {
        let pat = &patterns[rng.random_range(0..patterns.len())];
        for b in pat.bytes() {
            doc.push(if b == TEMPLATE_SLOT as u8 {
                syms[rng.random_range(0..syms.len())]
            } else {
                b
            });
        }
    }
    doc.truncate(len);
    doc
}

/// Deterministic in `(spec, seed)`.
pub fn generate(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let syms = spec.symbols()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed) ^ crc64(spec.id.as_bytes()));
    let (lo, hi) = spec.doc_len;
    let mut examples = Vec::with_capacity(spec.doc_count);
    for _ in 0..spec.doc_count {
        let len = rng.random_range(lo..=hi);
        let doc = match &spec.grammar {
            Grammar::MarkovChain {
                order,
                transition_seed,
            } => markov_doc(&syms, *order, *transition_seed, len, &mut rng),
            Grammar::Template { patterns } => template_doc(&syms, patterns, len, &mut rng),
        };
        let text = String::from_utf8(doc).expect("ASCII symbols");
        examples.push(match &spec.label_set {
            None => {
                let cut = 2.min(text.len() - 1);
                Example {
                    input: text[..cut].to_string(),
                    target: Some(text[cut..].to_string()),
                    label: None,
                }
            }
            Some(labels) => {
                let mut counts = vec![0usize; labels.len()];
                for b in text.bytes() {
                    if let Some(i) = syms[..labels.len()].iter().position(|&s| s == b) {
                        counts[i] += 1;
                    }
                }
                let best =
                    (0..labels.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
                Example {
                    input: text,
                    target: None,
                    label: Some(labels[best].clone()),
                }
            }
        });
    }
    let (kind, labels) = match &spec.label_set {
        None => (DatasetKind::Lm, Vec::new()),
        Some(l) => (DatasetKind::Classification, l.clone()),
    };
    Dataset::new(&spec.id, kind, examples, labels)
}

/// Documents from every spec, interleaved round-robin and joined by
/// newlines, as one token stream.
pub fn pretraining_corpus(specs: &[DomainSpec], seed: u64) -> Result<Vec<usize>> {
    if specs.is_empty() {
        return Err(SparcError::Data(
            "no domains for the pretraining corpus".into(),
        ));
    }
    let sets: Vec<Vec<String>> = specs
        .iter()
        .map(|s| generate(s, seed).map(|d| d.documents()))
        .collect::<Result<_>>()?;
    let longest = sets.iter().map(Vec::len).max().unwrap_or(0);
    let mut stream = Vec::new();
    for i in 0..longest {
        for docs in &sets {
            if let Some(doc) = docs.get(i) {
                stream.extend(encode(doc));
                stream.push(DOC_SEPARATOR as usize);
            }
        }
    }
    Ok(stream)
}

/// Order-preserving JSONL load. Each line is an object with `input` and
/// `target` (LM) or `label` (classification). Bad lines fail the load unless
/// `lenient`, in which case they are skipped with a warning.
pub fn load_jsonl(path: &Path, kind: DatasetKind, lenient: bool) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut examples = Vec::new();
    let mut problems = Vec::new();
    let probe = Dataset {
        id: id.clone(),
        kind,
        examples: Vec::new(),
        labels: Vec::new(),
    };
    for (n, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = n + 1;
        let Ok(line) = std::str::from_utf8(raw) else {
            problems.push(format!("line {line_no}: invalid UTF-8"));
            continue;
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Example>(line) {
            Err(e) => problems.push(format!("line {line_no}: {e}")),
            Ok(ex) => match probe.example_problem(&ex) {
                Some(reason) => problems.push(format!("line {line_no}: {reason}")),
                None => examples.push(ex),
            },
        }
    }
    if !problems.is_empty() {
        if !lenient {
            let shown: Vec<&str> = problems.iter().take(5).map(String::as_str).collect();
            let more = problems.len().saturating_sub(shown.len());
            let tail = if more > 0 {
                format!(" (+{more} more)")
            } else {
                String::new()
            };
            return Err(SparcError::Data(format!(
                "{}: {} malformed line(s): {}{tail}",
                path.display(),
                problems.len(),
                shown.join("; ")
            )));
        }
        for p in &problems {
            log::warn!("{}: skipped {p}", path.display());
        }
    }
    let labels = match kind {
        DatasetKind::Lm => Vec::new(),
        DatasetKind::Classification => {
            let mut labels: Vec<String> = Vec::new();
            for l in examples.iter().filter_map(|e| e.label.as_ref()) {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
            labels
        }
    };
    Dataset::new(&id, kind, examples, labels)
}

pub fn export_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in &ds.examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
