//! Mirroring-task data, vocabularies, JSONL datasets and exact match.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Example {
    pub fn mirror(source: Vec<String>) -> Self {
        let mut target = source.clone();
        target.extend(source.iter().rev().cloned());
        Example { source, target }
    }

    pub fn from_strs(source: &[&str], target: &[&str]) -> Self {
        Example {
            source: source.iter().map(|s| s.to_string()).collect(),
            target: target.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MirrorSetup {
    A,
    B,
}

impl std::str::FromStr for MirrorSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(MirrorSetup::A),
            "B" | "b" => Ok(MirrorSetup::B),
            other => Err(Error::Config(format!("unknown mirror setup {other:?}"))),
        }
    }
}

pub const TRAIN_SIZE: usize = 4000;
pub const DEV_SIZE: usize = 200;
pub const TEST_SIZE: usize = 1000;

/// Eleven base symbols shared by both setups.
pub const BASE_SYMBOLS: [&str; 11] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"];
/// Setup B's extra symbols, seen only as the cluster `x y z` in training.
pub const CLUSTER: [&str; 3] = ["x", "y", "z"];

const TRAIN_LENGTHS: (usize, usize) = (3, 9);
const CLUSTER_PROB: f64 = 0.2;

fn uniform_word(rng: &mut impl Rng, len: usize, alphabet: &[&str]) -> Vec<String> {
    (0..len)
        .map(|_| alphabet.choose(rng).unwrap().to_string())
        .collect()
}

fn mirror_set(n: usize, mut word: impl FnMut() -> Vec<String>) -> Vec<Example> {
    (0..n).map(|_| Example::mirror(word())).collect()
}

pub fn generate_mirror_a(seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = TRAIN_LENGTHS;
    let train = mirror_set(TRAIN_SIZE, || {
        let len = rng.gen_range(lo..=hi);
        uniform_word(&mut rng, len, &BASE_SYMBOLS)
    });
    let dev = mirror_set(DEV_SIZE, || uniform_word(&mut rng, 10, &BASE_SYMBOLS));
    let test = mirror_set(TEST_SIZE, || {
        let len = rng.gen_range(11..=20);
        uniform_word(&mut rng, len, &BASE_SYMBOLS)
    });
    Splits { train, dev, test }
}

/// A training-distribution word for setup B: a uniform target length, filled
/// left to right, inserting `x y z` with probability 0.2 whenever it still
/// fits.
fn clustered_word(rng: &mut impl Rng) -> Vec<String> {
    let (lo, hi) = TRAIN_LENGTHS;
    let len = rng.gen_range(lo..=hi);
    let mut word = Vec::with_capacity(len);
    while word.len() < len {
        if word.len() + CLUSTER.len() <= len && rng.gen_bool(CLUSTER_PROB) {
            word.extend(CLUSTER.iter().map(|s| s.to_string()));
        } else {
            word.push(BASE_SYMBOLS.choose(rng).unwrap().to_string());
        }
    }
    word
}

/// Whether some `x`, `y` or `z` occurs outside a complete `x y z` run.
pub fn has_loose_cluster_symbol(word: &[String]) -> bool {
    let mut covered = vec![false; word.len()];
    let mut i = 0;
    while i + 3 <= word.len() {
        if word[i..i + 3].iter().zip(CLUSTER).all(|(w, c)| w == c) {
            covered[i..i + 3].fill(true);
            i += 3;
        } else {
            i += 1;
        }
    }
    word.iter()
        .zip(&covered)
        .any(|(w, &c)| !c && CLUSTER.contains(&w.as_str()))
}

pub fn generate_mirror_b(seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = mirror_set(TRAIN_SIZE, || clustered_word(&mut rng));
    let dev = mirror_set(DEV_SIZE, || clustered_word(&mut rng));
    let alphabet: Vec<&str> = BASE_SYMBOLS.iter().chain(CLUSTER.iter()).copied().collect();
    let (lo, hi) = TRAIN_LENGTHS;
    let test = mirror_set(TEST_SIZE, || loop {
        let len = rng.gen_range(lo..=hi);
        let w = uniform_word(&mut rng, len, &alphabet);
        if has_loose_cluster_symbol(&w) {
            break w;
        }
    });
    Splits { train, dev, test }
}

pub fn generate_mirror(setup: MirrorSetup, seed: u64) -> Splits {
    match setup {
        MirrorSetup::A => generate_mirror_a(seed),
        MirrorSetup::B => generate_mirror_b(seed),
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl_to(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_to(w: &mut impl Write, examples: &[Example]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    read_jsonl_from(BufReader::new(File::open(path)?), path)
}

/// Parses one example per line. Blank lines are skipped and a trailing `\r`
/// is ignored.
pub fn read_jsonl_from(r: impl BufRead, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    write_jsonl(&dir.join("dev.jsonl"), &splits.dev)?;
    write_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<Splits> {
    let opt = |name: &str| -> Result<Vec<Example>> {
        let p = dir.join(name);
        if p.exists() {
            read_jsonl(&p)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Splits {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        dev: opt("dev.jsonl")?,
        test: opt("test.jsonl")?,
    })
}

/// Fraction of predictions exactly equal to their reference.
pub fn exact_match<T: PartialEq>(predictions: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// A closed token inventory with dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Sorted, deduplicated tokens.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let set: BTreeSet<&String> = tokens.into_iter().collect();
        Vocab::from(set.into_iter().cloned().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub source: Vocab,
    pub target: Vocab,
}

impl Vocabulary {
    pub fn build(examples: &[Example]) -> Self {
        Vocabulary {
            source: Vocab::build(examples.iter().flat_map(|e| &e.source)),
            target: Vocab::build(examples.iter().flat_map(|e| &e.target)),
        }
    }

    /// Target id of each source token, for copying. Fails if some source
    /// token has no target counterpart.
    pub fn copy_map(&self) -> Result<Vec<usize>> {
        self.source
            .tokens()
            .iter()
            .map(|t| {
                self.target.id(t).ok_or_else(|| {
                    Error::Config(format!("copy decoder: source token {t:?} is not in the target vocabulary"))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn mirror_definition() {
        let ex = Example::mirror(words("a b c"));
        assert_eq!(ex.target, words("a b c c b a"));
        let ex = Example::mirror(words("a y b"));
        assert_eq!(ex.target, words("a y b b y a"));
    }

    #[test]
    fn setup_a_shapes() {
        let s = generate_mirror_a(3);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (4000, 200, 1000));
        let lens = |v: &[Example]| {
            let it = v.iter().map(|e| e.source.len());
            (it.clone().min().unwrap(), it.max().unwrap())
        };
        assert_eq!(lens(&s.train), (3, 9));
        assert_eq!(lens(&s.dev), (10, 10));
        assert_eq!(lens(&s.test), (11, 20));
        for e in s.train.iter().chain(&s.dev).chain(&s.test) {
            assert_eq!(*e, Example::mirror(e.source.clone()));
            assert!(e.source.iter().all(|t| BASE_SYMBOLS.contains(&t.as_str())));
        }
    }

    #[test]
    fn setup_b_constructive_properties() {
        let s = generate_mirror_b(5);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (4000, 200, 1000));
        for e in s.train.iter().chain(&s.dev) {
            assert!(!has_loose_cluster_symbol(&e.source), "{:?}", e.source);
            assert!((3..=9).contains(&e.source.len()));
        }
        assert!(s.train.iter().any(|e| e.source.contains(&"x".to_string())));
        for e in &s.test {
            assert!(has_loose_cluster_symbol(&e.source));
            assert_eq!(*e, Example::mirror(e.source.clone()));
        }
    }

    #[test]
    fn loose_symbol_detection() {
        assert!(!has_loose_cluster_symbol(&words("a x y z b")));
        assert!(has_loose_cluster_symbol(&words("a y b")));
        assert!(has_loose_cluster_symbol(&words("x y z x")));
        assert!(has_loose_cluster_symbol(&words("z y x")));
        assert!(!has_loose_cluster_symbol(&words("x y z x y z")));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_mirror_b(9), generate_mirror_b(9));
        assert_ne!(generate_mirror_a(1).train, generate_mirror_a(2).train);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let ex = vec![Example::mirror(words("a b")), Example::mirror(words("c"))];
        let mut buf = Vec::new();
        write_jsonl_to(&mut buf, &ex).unwrap();
        let back = read_jsonl_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, ex);

        assert!(read_jsonl_from(&b""[..], Path::new("mem")).unwrap().is_empty());

        let crlf = b"{\"source\":[\"a\"],\"target\":[\"a\",\"a\"]}\r\n{\"source\":[\"b\"],\"target\":[\"b\",\"b\"]}\r\n";
        assert_eq!(read_jsonl_from(&crlf[..], Path::new("mem")).unwrap().len(), 2);

        let bad = b"{\"source\":[\"a\"],\"target\":[\"a\"]}\nnot json\n";
        match read_jsonl_from(&bad[..], Path::new("mem")) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exact_match_counts() {
        let a = vec![vec![1], vec![2], vec![3], vec![4]];
        let b = vec![vec![1], vec![2], vec![3], vec![5]];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        assert_eq!(exact_match(&a, &b).unwrap(), 0.75);
        let c = vec![vec![9]; 4];
        assert_eq!(exact_match(&a, &c).unwrap(), 0.0);
        assert!(exact_match(&a, &b[..3]).is_err());
    }

    #[test]
    fn vocab_ids_are_dense_and_closed() {
        let v = Vocabulary::build(&[Example::mirror(words("b a c"))]);
        assert_eq!(v.source.tokens(), &words("a b c")[..]);
        let ids = v.source.encode(&words("c a")).unwrap();
        assert_eq!(ids, vec![2, 0]);
        assert_eq!(v.source.decode(&ids), words("c a"));
        assert!(matches!(v.source.encode(&words("q")), Err(Error::UnknownToken(_))));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
