//! Labeled token-id corpora: ingestion, export and a synthetic marker task.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::report::{bucket_of, input_length, LengthBucket};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub ids: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Examples per bucket: short, middle, long.
    pub buckets: [usize; 3],
}

impl LengthStats {
    pub fn of(examples: &[LabeledExample]) -> Self {
        if examples.is_empty() {
            return Self::default();
        }
        let lens: Vec<usize> = examples.iter().map(|e| input_length(&e.ids)).collect();
        let mut buckets = [0; 3];
        for &n in &lens {
            buckets[bucket_index(bucket_of(n))] += 1;
        }
        Self {
            count: lens.len(),
            min: *lens.iter().min().unwrap_or(&0),
            max: *lens.iter().max().unwrap_or(&0),
            mean: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
            buckets,
        }
    }
}

fn bucket_index(b: LengthBucket) -> usize {
    match b {
        LengthBucket::Short => 0,
        LengthBucket::Middle => 1,
        LengthBucket::Long => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub classes: usize,
    pub vocab: usize,
    pub examples: Vec<LabeledExample>,
    pub stats: LengthStats,
}

impl Corpus {
    /// Validates labels and ids and computes length statistics.
    pub fn new(name: impl Into<String>, classes: usize, vocab: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        for (i, e) in examples.iter().enumerate() {
            check_example(e, classes, vocab).map_err(|m| Error::Input(format!("example {i}: {m}")))?;
        }
        let stats = LengthStats::of(&examples);
        Ok(Self { name: name.into(), classes, vocab, examples, stats })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn check_example(e: &LabeledExample, classes: usize, vocab: usize) -> std::result::Result<(), String> {
    if e.label >= classes {
        return Err(format!("label {} not below class count {classes}", e.label));
    }
    if e.ids.is_empty() {
        return Err("empty id sequence".into());
    }
    if let Some(&id) = e.ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(format!("token id {id} not below vocabulary size {vocab}"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One object per line: `{"ids": "5 9 2", "label": 1}`; `ids` may also be an array.
    Jsonl,
    /// `label<TAB>space-separated ids` per line.
    Tsv,
}

impl CorpusFormat {
    /// Format implied by a `.jsonl` or `.tsv` extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension().and_then(|e| e.to_str()).and_then(|e| e.parse().ok())
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::Config(format!("unknown corpus format {other:?} (expected jsonl or tsv)"))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Tsv => "tsv",
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawIds {
    Text(String),
    List(Vec<u32>),
}

#[derive(Deserialize)]
struct RawRecord {
    ids: RawIds,
    label: usize,
}

fn parse_ids(text: &str) -> std::result::Result<Vec<u32>, String> {
    text.split_whitespace().map(|t| t.parse::<u32>().map_err(|_| format!("bad token id {t:?}"))).collect()
}

fn parse_line(line: &str, format: CorpusFormat) -> std::result::Result<LabeledExample, String> {
    match format {
        CorpusFormat::Jsonl => {
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let ids = match raw.ids {
                RawIds::Text(t) => parse_ids(&t)?,
                RawIds::List(v) => v,
            };
            Ok(LabeledExample { ids, label: raw.label })
        }
        CorpusFormat::Tsv => {
            let (label, ids) = line.split_once('\t').ok_or("expected label<TAB>ids")?;
            let label = label.trim().parse::<usize>().map_err(|_| format!("bad label {label:?}"))?;
            Ok(LabeledExample { ids: parse_ids(ids)?, label })
        }
    }
}

/// Reads a corpus in file order. Blank lines are skipped; any other
/// malformed line fails with its 1-based line number.
pub fn ingest(path: impl AsRef<Path>, format: CorpusFormat, classes: usize, vocab: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, format)
            .and_then(|e| check_example(&e, classes, vocab).map(|_| e))
            .map_err(|m| Error::Input(format!("{}:{}: {m}", path.display(), i + 1)))?;
        examples.push(ex);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
    Corpus::new(name, classes, vocab, examples)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, format: CorpusFormat, mut out: W) -> Result<()> {
    for e in &corpus.examples {
        let ids = e.ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        match format {
            CorpusFormat::Jsonl => writeln!(out, "{}", serde_json::json!({ "ids": ids, "label": e.label }))?,
            CorpusFormat::Tsv => writeln!(out, "{}\t{ids}", e.label)?,
        }
    }
    Ok(())
}

pub fn export(corpus: &Corpus, path: impl AsRef<Path>, format: CorpusFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_corpus(corpus, format, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Synthetic classification task.
///
/// Ids are laid out as `0 = [CLS]`, then `markers_per_class` marker ids per
/// class (class `c` owns `1 + c·m .. 1 + (c+1)·m`), then filler. Every
/// sequence holds between `markers.0` and `markers.1` markers, all of its
/// label's class, at random positions among uniformly drawn filler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub vocab: usize,
    pub examples: usize,
    pub markers_per_class: usize,
    /// Inclusive range of markers planted per sequence.
    pub markers: (usize, usize),
    /// Relative weight of short, middle and long sequences.
    pub bucket_mix: [f64; 3],
    /// Inclusive length ranges for the three buckets.
    pub short: (usize, usize),
    pub middle: (usize, usize),
    pub long: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            vocab: 200,
            examples: 1000,
            markers_per_class: 4,
            markers: (1, 3),
            bucket_mix: [1.0, 1.0, 1.0],
            short: (5, 34),
            middle: (35, 70),
            long: (71, 120),
        }
    }
}

impl SynthSpec {
    pub fn first_filler(&self) -> usize {
        1 + self.classes * self.markers_per_class
    }

    /// Class owning `id` if it is a marker.
    pub fn marker_class(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        (id >= 1 && id < self.first_filler()).then(|| (id - 1) / self.markers_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic task: {m}")));
        if self.classes < 2 {
            return bad("at least two classes required");
        }
        if self.markers_per_class == 0 || self.markers.0 == 0 || self.markers.0 > self.markers.1 {
            return bad("marker counts must be positive and ordered");
        }
        if self.first_filler() >= self.vocab {
            return bad("vocabulary too small for markers plus filler");
        }
        if self.bucket_mix.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.bucket_mix.iter().sum::<f64>() <= 0.0 {
            return bad("bucket mix must be non-negative with a positive total");
        }
        for (name, (lo, hi)) in [("short", self.short), ("middle", self.middle), ("long", self.long)] {
            if lo == 0 || lo > hi || lo < self.markers.1 {
                return bad(&format!("{name} length range {lo}..={hi} invalid"));
            }
        }
        Ok(())
    }
}

/// Deterministic corpus for `spec` and `seed`.
pub fn synth_task(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = WeightedIndex::new(spec.bucket_mix).map_err(|e| Error::Config(e.to_string()))?;
    let ranges = [spec.short, spec.middle, spec.long];
    let filler = spec.first_filler() as u32..spec.vocab as u32;
    let mut examples = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let (lo, hi) = ranges[mix.sample(&mut rng)];
        let len = rng.gen_range(lo..=hi);
        let label = rng.gen_range(0..spec.classes);
        let mut ids: Vec<u32> = (0..len).map(|_| rng.gen_range(filler.clone())).collect();
        let planted = rng.gen_range(spec.markers.0..=spec.markers.1);
        let positions = rand::seq::index::sample(&mut rng, len, planted);
        for pos in positions {
            let marker = 1 + label * spec.markers_per_class + rng.gen_range(0..spec.markers_per_class);
            ids[pos] = marker as u32;
        }
        examples.push(LabeledExample { ids, label });
    }
    Corpus::new(format!("synthetic-{seed}"), spec.classes, spec.vocab, examples)
}

/// Rule-based classifier for the synthetic task: class of the first marker.
pub fn oracle_label(spec: &SynthSpec, ids: &[u32]) -> Option<usize> {
    ids.iter().find_map(|&id| spec.marker_class(id))
}
