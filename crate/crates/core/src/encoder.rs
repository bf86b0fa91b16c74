//! Text encoders that turn prompts into fixed-width vectors.
//!
//! Embedding files hold one record per line: the prompt, a TAB, then the
//! vector components separated by single spaces. Components are written in
//! shortest round-trip decimal form so a write/read cycle is bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub trait TextEncoder {
    /// Output width `d_t`.
    fn dim(&self) -> usize;

    /// Must be deterministic: equal prompts give bit-identical vectors.
    fn encode(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in encoder: a seeded Gaussian vector per prompt,
/// normalized to unit length.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoder {
    seed: u64,
    dim: usize,
}

impl HashEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(format!("hash encoder width must be >= 8, got {dim}")));
        }
        Ok(HashEncoder { seed, dim })
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(hash_encode(prompt, self.seed, self.dim))
    }
}

/// Unit vector derived from `(seed, prompt bytes)`.
pub fn hash_encode(prompt: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Encoder answering only the prompts listed in an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            file: file.to_string(),
            line,
            msg,
        };
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (prompt, rest) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno, "missing TAB between prompt and vector".into()))?;
            let values = rest
                .split(' ')
                .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("bad float {s:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(lineno, "non-finite component".into()));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(err(lineno, format!("vector width {} differs from {d}", values.len())));
                }
                _ => {}
            }
            if vectors.insert(prompt.to_string(), values).is_some() {
                return Err(err(lineno, format!("duplicate prompt {prompt:?}")));
            }
        }
        let dim = dim.ok_or_else(|| err(0, "embedding file is empty".into()))?;
        Ok(EmbeddingTable { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl TextEncoder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("prompt {prompt:?} not in embedding table")))
    }
}

pub fn format_embeddings<'a>(records: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Result<String> {
    let mut out = String::new();
    for (prompt, vector) in records {
        if prompt.contains(['\t', '\n', '\r']) {
            return Err(Error::Contract(format!("prompt {prompt:?} contains a TAB or newline")));
        }
        out.push_str(prompt);
        out.push('\t');
        for (i, v) in vector.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:?}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings<'a>(path: &Path, records: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Result<()> {
    write_atomic(path, format_embeddings(records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_encoding_is_deterministic_unit_norm() {
        let a = hash_encode("erythema", 7, 64);
        let b = hash_encode("erythema", 7, 64);
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a, hash_encode("erythema", 8, 64));
        assert!(HashEncoder::new(0, 4).is_err());
    }

    #[test]
    fn distinct_prompts_are_nearly_orthogonal() {
        let vs: Vec<Vec<f64>> = (0..100).map(|i| hash_encode(&format!("prompt {i}"), 1, 128)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let c: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(c.abs());
            }
        }
        assert!(worst < 0.5, "max |cos| = {worst}");
    }

    #[test]
    fn table_answers_exactly_its_prompts() {
        let text = "a\t1 0 0 0\nb\t0 1 0 0\nc c\t0 0 0.5 -0.5\n";
        let t = EmbeddingTable::parse(text, "emb").unwrap();
        assert_eq!((t.len(), t.dim()), (3, 4));
        assert_eq!(t.encode("c c").unwrap(), vec![0.0, 0.0, 0.5, -0.5]);
        assert!(matches!(t.encode("d"), Err(Error::Lookup(_))));
    }

    #[test]
    fn wrong_width_names_the_line() {
        let text = "a\t1 0 0 0\nb\t0 1 0\n";
        match EmbeddingTable::parse(text, "emb.tsv") {
            Err(Error::Format { line, file, .. }) => assert_eq!((line, file.as_str()), (2, "emb.tsv")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(EmbeddingTable::parse("no tab here\n", "x").is_err());
        assert!(EmbeddingTable::parse("a\t1 x\n", "x").is_err());
        assert!(EmbeddingTable::parse("", "x").is_err());
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let prompts = ["large", "a cell that is large", "tiny nucleus"];
        let vectors: Vec<Vec<f64>> = prompts.iter().map(|p| hash_encode(p, 3, 16)).collect();
        write_embeddings(&path, prompts.iter().copied().zip(vectors.iter().map(Vec::as_slice))).unwrap();
        let table = EmbeddingTable::load(&path).unwrap();
        for (p, v) in prompts.iter().zip(&vectors) {
            let got = table.encode(p).unwrap();
            assert!(got.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
