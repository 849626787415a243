//! Byte-level tokenizer with optional greedy pair merges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BYTE_VOCAB: usize = 256;

/// Bytes map to ids `0..256`; merge `i` produces id `256 + i`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
}

impl Tokenizer {
    /// Raw bytes, no merges.
    pub fn bytes() -> Self {
        Self::default()
    }

    /// Learns merges on `text` until the vocabulary reaches `vocab_size` or no
    /// pair occurs twice. Ties between equally frequent pairs go to the smaller pair.
    pub fn train(text: &[u8], vocab_size: usize) -> Result<Self> {
        if vocab_size < BYTE_VOCAB {
            return Err(Error::InvalidInput(format!(
                "byte tokenizer needs vocab_size ≥ {BYTE_VOCAB}, got {vocab_size}"
            )));
        }
        let mut tokens: Vec<u32> = text.iter().map(|&b| u32::from(b)).collect();
        let mut merges = Vec::new();
        let mut counts = vec![0u32; vocab_size * vocab_size];
        while BYTE_VOCAB + merges.len() < vocab_size {
            let current = BYTE_VOCAB + merges.len();
            counts[..current * vocab_size].iter_mut().for_each(|c| *c = 0);
            for w in tokens.windows(2) {
                counts[w[0] as usize * vocab_size + w[1] as usize] += 1;
            }
            let mut best = (0u32, 0usize);
            for (idx, &c) in counts[..current * vocab_size].iter().enumerate() {
                if c > best.0 {
                    best = (c, idx);
                }
            }
            if best.0 < 2 {
                break;
            }
            let pair = ((best.1 / vocab_size) as u32, (best.1 % vocab_size) as u32);
            tokens = apply_merge(&tokens, pair, current as u32);
            merges.push(pair);
        }
        Ok(Self { merges })
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB + self.merges.len()
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut tokens: Vec<u32> = text.iter().map(|&b| u32::from(b)).collect();
        for (i, &pair) in self.merges.iter().enumerate() {
            tokens = apply_merge(&tokens, pair, (BYTE_VOCAB + i) as u32);
        }
        tokens
    }

    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            self.push_bytes(t, &mut out);
        }
        out
    }

    fn push_bytes(&self, t: u32, out: &mut Vec<u8>) {
        match (t as usize).checked_sub(BYTE_VOCAB) {
            None => out.push(t as u8),
            Some(i) => {
                let (a, b) = self.merges[i];
                self.push_bytes(a, out);
                self.push_bytes(b, out);
            }
        }
    }
}

fn apply_merge(tokens: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() && tokens[i] == pair.0 && tokens[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let t = Tokenizer::bytes();
        let text = "héllo world".as_bytes();
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.vocab_size(), 256);
    }

    #[test]
    fn merges_compress_and_round_trip() {
        let text = "the cat and the hat and the bat ".repeat(20);
        let t = Tokenizer::train(text.as_bytes(), 270).unwrap();
        assert_eq!(t.vocab_size(), 270);
        let enc = t.encode(text.as_bytes());
        assert!(enc.len() < text.len() / 2);
        assert!(enc.iter().all(|&x| (x as usize) < 270));
        assert_eq!(t.decode(&enc), text.as_bytes());
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let t = Tokenizer::train(b"abcdef", 300).unwrap();
        assert_eq!(t.vocab_size(), 256);
    }
}
