//! Byte-level corpora with ratio-weighted window sampling, plus a
//! deterministic synthetic corpus mixing prose, code and instructions.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One corpus file and its mixing weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub ratio: f64,
}

fn one() -> f64 {
    1.0
}

/// Byte ids of a text.
pub fn byte_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

#[derive(Clone, Debug)]
struct Source {
    name: String,
    tokens: Vec<u32>,
    ratio: f64,
}

/// Token streams with normalised mixing ratios.
#[derive(Clone, Debug)]
pub struct Corpus {
    sources: Vec<Source>,
    pick: WeightedIndex<f64>,
}

impl Corpus {
    /// `(name, bytes, ratio)` triples; ratios must be positive.
    pub fn from_parts(parts: Vec<(String, Vec<u8>, f64)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("ingest", "no corpus sources"));
        }
        let mut sources = Vec::with_capacity(parts.len());
        for (name, bytes, ratio) in parts {
            if bytes.is_empty() {
                return Err(Error::invalid("ingest", format!("corpus {name} is empty")));
            }
            if !(ratio > 0.0 && ratio.is_finite()) {
                return Err(Error::invalid("ingest", format!("ratio {ratio} for {name} must be positive")));
            }
            sources.push(Source {
                name,
                tokens: byte_tokens(&bytes),
                ratio,
            });
        }
        let pick = WeightedIndex::new(sources.iter().map(|s| s.ratio))
            .map_err(|e| Error::invalid("ingest", e.to_string()))?;
        Ok(Corpus { sources, pick })
    }

    pub fn load(specs: &[CorpusSpec]) -> Result<Self> {
        Self::load_relative(specs, Path::new(""))
    }

    /// Loads specs whose relative paths are resolved against `base`.
    pub fn load_relative(specs: &[CorpusSpec], base: &Path) -> Result<Self> {
        let mut parts = Vec::with_capacity(specs.len());
        for s in specs {
            let path = base.join(&s.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
            parts.push((path.display().to_string(), bytes, s.ratio));
        }
        Self::from_parts(parts)
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn source_name(&self, i: usize) -> &str {
        &self.sources[i].name
    }

    /// Normalised mixing ratios.
    pub fn ratios(&self) -> Vec<f64> {
        let total: f64 = self.sources.iter().map(|s| s.ratio).sum();
        self.sources.iter().map(|s| s.ratio / total).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.sources.iter().map(|s| s.tokens.len()).sum()
    }

    /// Length of the shortest source.
    pub fn min_source_len(&self) -> usize {
        self.sources.iter().map(|s| s.tokens.len()).min().unwrap_or(0)
    }

    /// A contiguous window: the source is drawn by ratio, the offset
    /// uniformly. Returns the source index and the tokens.
    pub fn sample_window(&self, rng: &mut impl Rng, len: usize) -> Result<(usize, Vec<u32>)> {
        let i = self.pick.sample(rng);
        let toks = &self.sources[i].tokens;
        if toks.len() < len {
            return Err(Error::invalid(
                "sample_window",
                format!(
                    "corpus {} has {} tokens, fewer than the window length {len}",
                    self.sources[i].name,
                    toks.len()
                ),
            ));
        }
        let start = rng.random_range(0..=toks.len() - len);
        Ok((i, toks[start..start + len].to_vec()))
    }

    /// Every source back to back, in declaration order.
    pub fn concatenated(&self) -> Vec<u32> {
        self.sources.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// Consecutive non-overlapping windows over each source; the tail
    /// shorter than `len` is dropped.
    pub fn windows(&self, len: usize) -> Vec<Vec<u32>> {
        self.sources
            .iter()
            .flat_map(|s| s.tokens.chunks_exact(len).map(|c| c.to_vec()))
            .collect()
    }
}

const NOUNS: &[&str] = &[
    "river", "garden", "engine", "letter", "city", "window", "forest", "signal", "market",
    "teacher", "bridge", "harbor", "lantern", "record", "valley", "machine", "story", "island",
    "kitchen", "mountain", "library", "student", "planet", "orchard",
];
const ADJS: &[&str] = &[
    "quiet", "bright", "old", "narrow", "heavy", "gentle", "distant", "careful", "broken",
    "golden", "small", "patient", "restless", "simple", "crowded", "hidden",
];
const VERBS: &[&str] = &[
    "follows", "carries", "watches", "builds", "remembers", "crosses", "opens", "measures",
    "shelters", "finds", "repairs", "describes", "guides", "reaches",
];
const PLACES: &[&str] = &[
    "near the coast", "after the storm", "in the morning", "beyond the hills", "under the old roof",
    "during the winter", "along the road", "at the end of the day",
];
const IDENTS: &[&str] = &[
    "count", "total", "index", "value", "buffer", "result", "offset", "limit", "items", "node",
    "width", "score", "name", "left", "right", "queue",
];
const TASKS: &[&str] = &[
    "Summarize the following note", "Explain why the sky looks blue", "List three uses for a",
    "Rewrite the sentence in a formal tone", "Give a short definition of a", "Describe how to repair a",
    "Write a haiku about a", "Compare a",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut s = format!(
        "The {} {} {} the {} {}",
        pick(rng, ADJS),
        pick(rng, NOUNS),
        pick(rng, VERBS),
        pick(rng, ADJS),
        pick(rng, NOUNS)
    );
    if rng.random_bool(0.5) {
        s.push(' ');
        s.push_str(pick(rng, PLACES));
    }
    s.push('.');
    s
}

fn prose(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..7);
    let mut p: Vec<String> = (0..n).map(|_| sentence(rng)).collect();
    if rng.random_bool(0.3) {
        p.push(format!("It was {} years before anyone returned.", rng.random_range(2..90)));
    }
    p.join(" ") + "\n\n"
}

fn code(rng: &mut ChaCha8Rng) -> String {
    let f = pick(rng, IDENTS);
    let a = pick(rng, IDENTS);
    let b = pick(rng, IDENTS);
    let k = rng.random_range(1..64);
    match rng.random_range(0..3) {
        0 => format!(
            "fn update_{f}({a}: &mut Vec<u32>, {b}: u32) -> u32 {{\n    let mut acc = 0;\n    for x in {a}.iter_mut() {{\n        *x += {b} * {k};\n        acc += *x;\n    }}\n    acc\n}}\n\n"
        ),
        1 => format!(
            "def {f}_of({a}, {b}):\n    if {a} > {b}:\n        return {a} - {k}\n    return [{b} + i for i in range({k})]\n\n"
        ),
        _ => format!(
            "for (int {a} = 0; {a} < {k}; ++{a}) {{\n    {b}[{a}] = {f}({a}) % {k};\n}}\n\n"
        ),
    }
}

fn instruction(rng: &mut ChaCha8Rng) -> String {
    let task = pick(rng, TASKS);
    let noun = pick(rng, NOUNS);
    format!(
        "### Instruction:\n{task} {noun}.\n\n### Response:\n{}\n\n",
        sentence(rng)
    )
}

/// Three deterministic sources (prose, code, instructions) of roughly
/// `bytes_each` bytes each.
pub fn synthetic_sources(seed: u64, bytes_each: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gens: [(&str, fn(&mut ChaCha8Rng) -> String); 3] =
        [("prose", prose), ("code", code), ("instructions", instruction)];
    gens.iter()
        .map(|(name, f)| {
            let mut text = String::with_capacity(bytes_each + 512);
            while text.len() < bytes_each {
                text.push_str(&f(&mut rng));
            }
            (name.to_string(), text)
        })
        .collect()
}

/// The synthetic sources mixed 1:1:1.
pub fn synthetic_corpus(seed: u64, bytes_each: usize) -> Result<Corpus> {
    Corpus::from_parts(
        synthetic_sources(seed, bytes_each)
            .into_iter()
            .map(|(n, t)| (n, t.into_bytes(), 1.0))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_ids() {
        assert_eq!(byte_tokens(b"ab"), vec![97, 98]);
        let c = Corpus::from_parts(vec![("a".into(), b"ab".to_vec(), 1.0)]).unwrap();
        assert_eq!(c.concatenated(), vec![97, 98]);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(Corpus::from_parts(vec![]).is_err());
        assert!(Corpus::from_parts(vec![("e".into(), vec![], 1.0)]).is_err());
        assert!(Corpus::from_parts(vec![("z".into(), b"x".to_vec(), 0.0)]).is_err());
    }

    #[test]
    fn equal_ratios_split_windows_evenly() {
        let c = Corpus::from_parts(vec![
            ("a".into(), vec![b'a'; 500], 1.0),
            ("b".into(), vec![b'b'; 900], 1.0),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            counts[c.sample_window(&mut rng, 16).unwrap().0] += 1;
        }
        let share = counts[0] as f64 / 10_000.0;
        assert!((share - 0.5).abs() <= 0.02, "share {share}");
    }

    #[test]
    fn unequal_ratios_are_normalised() {
        let c = Corpus::from_parts(vec![
            ("a".into(), vec![1; 64], 3.0),
            ("b".into(), vec![2; 64], 1.0),
        ])
        .unwrap();
        assert_eq!(c.ratios(), vec![0.75, 0.25]);
    }

    #[test]
    fn same_seed_same_windows() {
        let c = synthetic_corpus(1, 4096).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| c.sample_window(&mut rng, 32).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn short_corpus_is_an_error() {
        let c = Corpus::from_parts(vec![("a".into(), b"abc".to_vec(), 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(c.sample_window(&mut rng, 4).is_err());
    }

    #[test]
    fn synthetic_sources_are_deterministic_and_sized() {
        let a = synthetic_sources(5, 10_000);
        assert_eq!(a, synthetic_sources(5, 10_000));
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|(_, t)| t.len() >= 10_000 && t.is_ascii()));
    }
}
