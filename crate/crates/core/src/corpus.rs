//! Byte-level tokenization and corpora (file-backed or synthetic).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// A token stream plus an identifier recorded in derived artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl Corpus {
    /// Tokenizes raw bytes; the id is a name plus a content digest.
    pub fn from_bytes(name: &str, bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Self { id: format!("{name}@{hex}"), tokens: bytes.iter().map(|&b| b as u32).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::from_bytes(&name, &bytes))
    }

    pub fn synthetic(seed: u64, n_bytes: usize) -> Self {
        let bytes = synthetic_text(seed, n_bytes);
        Self::from_bytes(&format!("synthetic-{seed}"), &bytes)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-overlapping chunks of at most `len` tokens; a trailing chunk shorter
    /// than `min_len` is dropped.
    pub fn chunks(&self, len: usize, min_len: usize) -> Vec<&[u32]> {
        self.tokens.chunks(len.max(1)).filter(|c| c.len() >= min_len).collect()
    }

    /// Splits into a head holding `fraction` of the tokens and the remainder.
    pub fn split(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid(format!("split fraction {fraction} outside [0,1]")));
        }
        let at = (self.tokens.len() as f64 * fraction).round() as usize;
        Ok((
            Corpus { id: format!("{}[..{at}]", self.id), tokens: self.tokens[..at].to_vec() },
            Corpus { id: format!("{}[{at}..]", self.id), tokens: self.tokens[at..].to_vec() },
        ))
    }
}

/// Deterministic pseudo-text: a sparse first-order Markov chain over a small
/// alphabet, interleaved with a fixed vocabulary of repeated motifs.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ,.\n";
    const WEIGHTS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<[u8; 4]> = ALPHABET
        .iter()
        .map(|_| {
            let mut s = [0u8; 4];
            for slot in &mut s {
                *slot = *ALPHABET.choose(&mut rng).expect("non-empty");
            }
            s
        })
        .collect();
    let motifs: Vec<Vec<u8>> = (0..12)
        .map(|_| {
            let len = rng.gen_range(4..=9);
            (0..len).map(|_| ALPHABET[rng.gen_range(0..26)]).collect()
        })
        .collect();

    let mut out = Vec::with_capacity(n_bytes + 16);
    let mut cur = b' ';
    while out.len() < n_bytes {
        if cur == b' ' && rng.gen_bool(0.35) {
            out.extend_from_slice(motifs.choose(&mut rng).expect("non-empty"));
            out.push(b' ');
            cur = b' ';
            continue;
        }
        let idx = ALPHABET.iter().position(|&c| c == cur).unwrap_or(0);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = successors[idx][3];
        for (w, &s) in WEIGHTS.iter().zip(&successors[idx]) {
            acc += w;
            if u < acc {
                next = s;
                break;
            }
        }
        out.push(next);
        cur = next;
    }
    out.truncate(n_bytes);
    out
}
