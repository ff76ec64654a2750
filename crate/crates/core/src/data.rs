//! Tokenization, dataset ingestion and the synthetic NLI generator.
//!
//! The tokenizer is deliberately simple: lowercase, split on whitespace and
//! look each token up in a frequency-ranked vocabulary. Ids 0, 1 and 2 are
//! reserved for padding, out-of-vocabulary tokens and the premise/hypothesis
//! separator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<oov>", "<sep>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// JSON object `{token: id}`, reserved entries included.
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut id_to_token = vec![None; map.len()];
        for (tok, id) in &map {
            let slot = id_to_token.get_mut(*id as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("vocab id {id} for {tok:?} is not dense"))
            })?;
            if slot.is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::InvalidArgument(format!(
                    "vocab must reserve id {i} for {r}"
                )));
            }
        }
        Ok(Self {
            token_to_id: HashMap::new(),
            id_to_token,
        }
        .rehash())
    }

    fn rehash(mut self) -> Self {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Builds a vocabulary from the `max_size` most frequent tokens. Frequency
/// ties are broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for tok in tokenize(doc.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);

    let id_to_token: Vec<String> = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocab {
        token_to_id: HashMap::new(),
        id_to_token,
    }
    .rehash())
}

/// Encodes premise and hypothesis separately, truncating the premise from its
/// end first so that `premise ++ [sep] ++ hypothesis` fits in `max_len`.
pub fn encode_parts(
    vocab: &Vocab,
    premise: &str,
    hypothesis: Option<&str>,
    max_len: usize,
) -> (Vec<u32>, Option<Vec<u32>>) {
    let mut p: Vec<u32> = tokenize(premise).map(|t| vocab.id(&t)).collect();
    match hypothesis {
        None => {
            p.truncate(max_len);
            (p, None)
        }
        Some(h) => {
            let mut h: Vec<u32> = tokenize(h).map(|t| vocab.id(&t)).collect();
            let budget = max_len.saturating_sub(1);
            if p.len() + h.len() > budget {
                let keep = budget.saturating_sub(h.len());
                p.truncate(keep);
                // Only reached when the hypothesis alone overflows.
                h.truncate(budget - p.len());
            }
            (p, Some(h))
        }
    }
}

pub fn encode(vocab: &Vocab, premise: &str, hypothesis: Option<&str>, max_len: usize) -> Vec<u32> {
    let (p, h) = encode_parts(vocab, premise, hypothesis, max_len);
    join_parts(&p, h.as_deref())
}

fn join_parts(premise: &[u32], hypothesis: Option<&[u32]>) -> Vec<u32> {
    let mut out = premise.to_vec();
    if let Some(h) = hypothesis {
        out.push(SEP_ID);
        out.extend_from_slice(h);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub premise: Vec<u32>,
    pub hypothesis: Option<Vec<u32>>,
    pub raw_premise: String,
    pub raw_hypothesis: Option<String>,
    pub label: usize,
}

impl Instance {
    pub fn from_text(
        vocab: &Vocab,
        id: impl Into<String>,
        premise: &str,
        hypothesis: Option<&str>,
        label: usize,
        max_len: usize,
    ) -> Self {
        let (p, h) = encode_parts(vocab, premise, hypothesis, max_len);
        Self {
            id: id.into(),
            premise: p,
            hypothesis: h,
            raw_premise: premise.to_string(),
            raw_hypothesis: hypothesis.map(str::to_string),
            label,
        }
    }

    /// Model input: `premise ++ [sep] ++ hypothesis`.
    pub fn tokens(&self) -> Vec<u32> {
        join_parts(&self.premise, self.hypothesis.as_deref())
    }

    /// Token-set containment of the hypothesis in the premise. Zero when the
    /// instance has no hypothesis.
    pub fn lexical_overlap(&self) -> f64 {
        match &self.hypothesis {
            Some(h) => lexical_overlap(&self.premise, h),
            None => 0.0,
        }
    }
}

/// `|set(premise) ∩ set(hypothesis)| / |set(hypothesis)|`.
pub fn lexical_overlap(premise: &[u32], hypothesis: &[u32]) -> f64 {
    let h: BTreeSet<u32> = hypothesis.iter().copied().collect();
    if h.is_empty() {
        return 0.0;
    }
    let p: BTreeSet<u32> = premise.iter().copied().collect();
    h.intersection(&p).count() as f64 / h.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub split_name: String,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        instances: Vec<Instance>,
        split_name: impl Into<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        }
        let mut seen = HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {:?}", inst.id)));
            }
            if inst.label >= label_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: inst.label,
                    n_classes: label_names.len(),
                });
            }
        }
        Ok(Self {
            instances,
            split_name: split_name.into(),
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    /// Instances whose id is in `ids`, kept in dataset order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        for id in &wanted {
            if self.get(id).is_none() {
                return Err(Error::UnknownInstance(id.to_string()));
            }
        }
        let instances = self
            .instances
            .iter()
            .filter(|i| wanted.contains(i.id.as_str()))
            .cloned()
            .collect();
        Dataset::new(instances, self.split_name.clone(), self.label_names.clone())
    }

    /// Re-encodes every instance from its raw text with `vocab`.
    pub fn reencode(&self, vocab: &Vocab, max_len: usize) -> Dataset {
        let instances = self
            .instances
            .iter()
            .map(|i| {
                Instance::from_text(
                    vocab,
                    i.id.clone(),
                    &i.raw_premise,
                    i.raw_hypothesis.as_deref(),
                    i.label,
                    max_len,
                )
            })
            .collect();
        Dataset {
            instances,
            split_name: self.split_name.clone(),
            label_names: self.label_names.clone(),
        }
    }

    /// Writes `{id, premise, hypothesis, label}` records, label as its name.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for inst in &self.instances {
            let rec = RawRecord {
                id: &inst.id,
                premise: &inst.raw_premise,
                hypothesis: inst.raw_hypothesis.as_deref(),
                label: &self.label_names[inst.label],
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RawRecord<'a> {
    id: &'a str,
    premise: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    hypothesis: Option<&'a str>,
    label: &'a str,
}

/// Maps dataset roles onto JSON field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSchema {
    pub id: Option<String>,
    pub premise: String,
    pub hypothesis: Option<String>,
    pub label: String,
}

impl Default for FieldSchema {
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            premise: "premise".into(),
            hypothesis: Some("hypothesis".into()),
            label: "label".into(),
        }
    }
}

/// Reads one JSON object per line. String labels are mapped through
/// `label_names`; integer labels are taken as class indices.
pub fn load_jsonl(
    path: &Path,
    schema: &FieldSchema,
    label_names: &[String],
    vocab: &Vocab,
    max_len: usize,
    split_name: &str,
) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let malformed = |line: usize, reason: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(lineno, "not a JSON object".into()))?;
        let text_field = |name: &str| -> Result<String> {
            obj.get(name)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| malformed(lineno, format!("missing string field {name:?}")))
        };
        let premise = text_field(&schema.premise)?;
        let hypothesis = match &schema.hypothesis {
            Some(name) => Some(text_field(name)?),
            None => None,
        };
        let label = match obj.get(&schema.label) {
            Some(serde_json::Value::String(s)) => label_names
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| Error::UnknownLabel {
                    path: path.to_path_buf(),
                    line: lineno,
                    label: s.clone(),
                })?,
            Some(serde_json::Value::Number(n)) => {
                let k = n
                    .as_u64()
                    .ok_or_else(|| malformed(lineno, format!("bad label {n}")))?
                    as usize;
                if k >= label_names.len() {
                    return Err(Error::UnknownLabel {
                        path: path.to_path_buf(),
                        line: lineno,
                        label: n.to_string(),
                    });
                }
                k
            }
            _ => {
                return Err(malformed(
                    lineno,
                    format!("missing label field {:?}", schema.label),
                ))
            }
        };
        let id = match &schema.id {
            Some(name) => match obj.get(name) {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Number(n)) => n.to_string(),
                _ => format!("{split_name}-{lineno:05}"),
            },
            None => format!("{split_name}-{lineno:05}"),
        };
        instances.push(Instance::from_text(
            vocab,
            id,
            &premise,
            hypothesis.as_deref(),
            label,
            max_len,
        ));
    }
    Dataset::new(instances, split_name, label_names.to_vec())
}

/// Synthetic two-class NLI task with a plantable lexical-overlap artifact.
///
/// Premises are sequences of distinct words. A hypothesis entails its premise
/// iff it is an ordered subsequence of it. Non-entailed hypotheses come in two
/// flavours: *permuted* (premise words out of order, containment 1.0) and
/// *low-overlap* (some words absent from the premise, containment < 0.9).
/// `artifact_rate` is the share of non-entailed training/test instances drawn
/// low-overlap; at 0 the overlap statistic carries no label information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_words: usize,
    pub premise_len: usize,
    pub hypothesis_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_counterexamples: usize,
    pub artifact_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_words: 24,
            premise_len: 6,
            hypothesis_len: 3,
            n_train: 500,
            n_test: 100,
            n_counterexamples: 100,
            artifact_rate: 0.9,
        }
    }
}

impl GenConfig {
    pub fn max_len(&self) -> usize {
        self.premise_len + 1 + self.hypothesis_len
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.artifact_rate) {
            return bad(format!("artifact_rate {} outside [0,1]", self.artifact_rate));
        }
        if self.hypothesis_len < 2 {
            return bad("hypothesis_len must be at least 2".into());
        }
        if self.premise_len < self.hypothesis_len {
            return bad("premise_len must be at least hypothesis_len".into());
        }
        if self.premise_len + self.hypothesis_len > self.n_words {
            return Err(Error::GeneratorCapacity(format!(
                "{} words cannot fill a {}-word premise plus {} unseen hypothesis words",
                self.n_words, self.premise_len, self.hypothesis_len
            )));
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_counterexamples == 0 {
            return bad("every split needs at least one instance".into());
        }
        // Distinct ordered premises available.
        let mut capacity: u128 = 1;
        for k in 0..self.premise_len {
            capacity = capacity.saturating_mul((self.n_words - k) as u128);
        }
        let total = (self.n_train + self.n_test + self.n_counterexamples) as u128;
        if total > capacity {
            return Err(Error::GeneratorCapacity(format!(
                "{total} instances requested but only {capacity} distinct premises exist"
            )));
        }
        Ok(())
    }
}

pub const NLI_LABELS: [&str; 2] = ["entailment", "non-entailment"];
pub const ENTAILS: usize = 0;
pub const NOT_ENTAILS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Entails,
    Permuted,
    LowOverlap,
}

#[derive(Debug, Clone)]
pub struct SyntheticNli {
    pub train: Dataset,
    pub test: Dataset,
    pub counterexamples: Dataset,
    pub vocab: Vocab,
}

pub fn gen_synthetic_nli(config: &GenConfig, seed: u64) -> Result<SyntheticNli> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = config.n_words.to_string().len();
    let words: Vec<String> = (0..config.n_words)
        .map(|i| format!("w{i:0width$}"))
        .collect();

    let mut seen: HashSet<(Vec<usize>, Vec<usize>)> = HashSet::new();
    let mut draw = |kind: Kind, rng: &mut ChaCha8Rng| -> Result<(Vec<usize>, Vec<usize>)> {
        for _ in 0..10_000 {
            let pair = draw_pair(config, kind, rng);
            if seen.insert(pair.clone()) {
                return Ok(pair);
            }
        }
        Err(Error::GeneratorCapacity(
            "could not draw a fresh instance without duplicates".into(),
        ))
    };

    let mut split = |prefix: &str, n: usize, cx: bool| -> Result<Vec<RawPair>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let kind = if cx {
                Kind::Permuted
            } else if rng.gen_bool(0.5) {
                Kind::Entails
            } else if rng.gen_bool(config.artifact_rate) {
                Kind::LowOverlap
            } else {
                Kind::Permuted
            };
            let (p, h) = draw(kind, &mut rng)?;
            let label = if kind == Kind::Entails { ENTAILS } else { NOT_ENTAILS };
            let join = |idx: &[usize]| {
                idx.iter()
                    .map(|&k| words[k].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push(RawPair {
                id: format!("{prefix}-{i:05}"),
                premise: join(&p),
                hypothesis: join(&h),
                label,
            });
        }
        Ok(out)
    };

    let train = split("train", config.n_train, false)?;
    let test = split("test", config.n_test, false)?;
    let cx = split("cx", config.n_counterexamples, true)?;

    let corpus: Vec<&str> = train
        .iter()
        .chain(&test)
        .chain(&cx)
        .flat_map(|r| [r.premise.as_str(), r.hypothesis.as_str()])
        .collect();
    let vocab = build_vocab(&corpus, config.n_words)?;
    let labels: Vec<String> = NLI_LABELS.iter().map(|s| s.to_string()).collect();
    let to_ds = |rows: Vec<RawPair>, name: &str| -> Result<Dataset> {
        let instances = rows
            .into_iter()
            .map(|r| {
                Instance::from_text(
                    &vocab,
                    r.id,
                    &r.premise,
                    Some(&r.hypothesis),
                    r.label,
                    config.max_len(),
                )
            })
            .collect();
        Dataset::new(instances, name, labels.clone())
    };
    Ok(SyntheticNli {
        train: to_ds(train, "train")?,
        test: to_ds(test, "test")?,
        counterexamples: to_ds(cx, "counterexamples")?,
        vocab: vocab.clone(),
    })
}

struct RawPair {
    id: String,
    premise: String,
    hypothesis: String,
    label: usize,
}

fn draw_pair(config: &GenConfig, kind: Kind, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut pool: Vec<usize> = (0..config.n_words).collect();
    pool.shuffle(rng);
    let premise = pool[..config.premise_len].to_vec();
    let outside = &pool[config.premise_len..];
    let h = config.hypothesis_len;

    let mut positions: Vec<usize> = rand::seq::index::sample(rng, config.premise_len, h).into_vec();
    let hypothesis = match kind {
        Kind::Entails => {
            positions.sort_unstable();
            positions.iter().map(|&p| premise[p]).collect()
        }
        Kind::Permuted => {
            // Distinct premise words: subsequence iff positions increase.
            while positions.windows(2).all(|w| w[0] < w[1]) {
                positions.shuffle(rng);
            }
            positions.iter().map(|&p| premise[p]).collect()
        }
        Kind::LowOverlap => {
            // Largest k with k / h < 0.9.
            let max_shared = ((0.9 * h as f64).ceil() as usize).saturating_sub(1);
            let shared = rng.gen_range(0..=max_shared);
            let mut hyp: Vec<usize> = positions[..shared].iter().map(|&p| premise[p]).collect();
            hyp.extend_from_slice(&outside[..h - shared]);
            hyp.shuffle(rng);
            hyp
        }
    };
    (premise, hypothesis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_ab() -> Vocab {
        build_vocab(&["a b"], 10).unwrap()
    }

    #[test]
    fn build_vocab_counts_and_reserves() {
        let v = build_vocab(&["a b", "b c"], 10).unwrap();
        assert_eq!(v.len(), 6);
        for t in ["a", "b", "c"] {
            assert!(v.contains(t));
        }
        assert_eq!(v.id("<pad>"), PAD_ID);
        assert_eq!(v.id("<oov>"), OOV_ID);
        assert_eq!(v.id("<sep>"), SEP_ID);
    }

    #[test]
    fn single_token_gets_first_free_id() {
        let v = build_vocab(&["x x x"], 10).unwrap();
        assert_eq!(v.id("x"), 3);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 5), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn frequency_cutoff_matches_brute_force_tally() {
        // 500 distinct tokens, token k repeated (k % 37) + 1 times.
        let mut docs = Vec::new();
        for k in 0..500 {
            docs.push(vec![format!("t{k}"); (k % 37) + 1].join(" "));
        }
        let v = build_vocab(&docs, 100).unwrap();
        assert_eq!(v.len(), 103);

        let mut tally: Vec<(String, usize)> = Vec::new();
        for d in &docs {
            for t in d.split(' ') {
                match tally.iter_mut().find(|(x, _)| x == t) {
                    Some(e) => e.1 += 1,
                    None => tally.push((t.to_string(), 1)),
                }
            }
        }
        tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let (rank100, rank101) = (&tally[99].0, &tally[100].0);
        assert!(v.contains(rank100));
        assert!(!v.contains(rank101));
        assert_eq!(v.id(rank100), 102);
    }

    #[test]
    fn encode_lookup_and_separator() {
        let v = vocab_ab();
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(encode(&v, "a b", None, 10), vec![3, 4]);
        assert_eq!(encode(&v, "a", Some("b"), 10), vec![3, 2, 4]);
        assert_eq!(encode(&v, "A zz", None, 10), vec![3, OOV_ID]);
    }

    #[test]
    fn long_premise_is_truncated_from_the_end() {
        let v = vocab_ab();
        let premise = vec!["a"; 600].join(" ");
        let out = encode(&v, &premise, Some("b b b"), 512);
        assert_eq!(out.len(), 512);
        assert_eq!(&out[out.len() - 4..], &[SEP_ID, 4, 4, 4]);
        assert!(out[..508].iter().all(|&t| t == 3));
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = build_vocab(&["the cat sat", "the dog"], 10).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn load_jsonl_reads_and_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"premise":"a b","hypothesis":"b","gold_label":"entailment"}
{"premise":"a","hypothesis":"b","gold_label":"neutral"}
{"premise":"b","hypothesis":"a","gold_label":"contradiction"}
"#,
        )
        .unwrap();
        let schema = FieldSchema {
            id: None,
            premise: "premise".into(),
            hypothesis: Some("hypothesis".into()),
            label: "gold_label".into(),
        };
        let labels: Vec<String> = ["entailment", "neutral", "contradiction"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = vocab_ab();
        let ds = load_jsonl(&path, &schema, &labels, &v, 16, "dev").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.instances[2].label, 2);
        assert_eq!(ds.instances[0].tokens(), vec![3, 4, SEP_ID, 4]);

        std::fs::write(
            &path,
            "{\"premise\":\"a\",\"hypothesis\":\"b\",\"gold_label\":\"neutral\"}\n{\"premise\":\"a\",\"hypothesis\":\"b\"}\n",
        )
        .unwrap();
        let err = load_jsonl(&path, &schema, &labels, &v, 16, "dev").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");

        std::fs::write(&path, "{\"premise\":\"a\",\"hypothesis\":\"b\",\"gold_label\":\"maybe\"}\n").unwrap();
        let err = load_jsonl(&path, &schema, &labels, &v, 16, "dev").unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { line: 1, .. }));
    }

    #[test]
    fn counterexamples_break_the_heuristic() {
        let cfg = GenConfig {
            n_train: 200,
            n_test: 50,
            n_counterexamples: 80,
            ..GenConfig::default()
        };
        let g = gen_synthetic_nli(&cfg, 7).unwrap();
        for inst in g.counterexamples.iter() {
            assert!(inst.lexical_overlap() >= 0.9);
            assert_eq!(inst.label, NOT_ENTAILS);
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let cfg = GenConfig {
            n_train: 50,
            n_test: 10,
            n_counterexamples: 10,
            ..GenConfig::default()
        };
        let a = gen_synthetic_nli(&cfg, 3).unwrap();
        let b = gen_synthetic_nli(&cfg, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.counterexamples, b.counterexamples);
        assert_eq!(a.vocab.to_json().unwrap(), b.vocab.to_json().unwrap());
        let c = gen_synthetic_nli(&cfg, 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn generator_rejects_impossible_counts() {
        let cfg = GenConfig {
            n_words: 6,
            premise_len: 3,
            hypothesis_len: 2,
            n_train: 200,
            n_test: 10,
            n_counterexamples: 10,
            artifact_rate: 0.5,
        };
        assert!(matches!(
            gen_synthetic_nli(&cfg, 0),
            Err(Error::GeneratorCapacity(_))
        ));
    }
}
