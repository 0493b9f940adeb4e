use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token table with the three reserved symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
}

const CHARS: &str = "0123456789+-*/()=,:.? \n<>\\{}abcdefghijklmnopqrstuvwxyz";

impl Vocab {
    pub fn new(
        symbols: Vec<String>,
        pad_id: TokenId,
        mask_id: TokenId,
        eos_id: TokenId,
    ) -> Result<Self> {
        let n = symbols.len() as TokenId;
        if mask_id == eos_id || mask_id == pad_id || eos_id == pad_id {
            return Err(Error::Config("reserved token ids must be distinct".into()));
        }
        if mask_id >= n || eos_id >= n || pad_id >= n {
            return Err(Error::Config("reserved token id outside vocabulary".into()));
        }
        Ok(Vocab {
            symbols,
            mask_id,
            eos_id,
            pad_id,
        })
    }

    /// Character-level table for the toy tasks: pad, mask, eos, then digits,
    /// operators, tag punctuation, and lowercase letters (57 symbols).
    pub fn char_level() -> Self {
        let mut symbols = vec!["<pad>".to_string(), "<mask>".into(), "<eos>".into()];
        symbols.extend(CHARS.chars().map(String::from));
        Vocab::new(symbols, 0, 1, 2).expect("static table is valid")
    }

    /// A table of `size` opaque symbols with pad=0, mask=1, eos=2; for small
    /// synthetic models in tests and oracles.
    pub fn synthetic(size: usize) -> Result<Self> {
        let symbols = (0..size).map(|i| format!("t{i}")).collect();
        Vocab::new(symbols, 0, 1, 2)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Encodes text one character per token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                let s = c.encode_utf8(&mut buf);
                self.symbols
                    .iter()
                    .position(|sym| sym == s)
                    .filter(|&i| i as TokenId != self.mask_id)
                    .map(|i| i as TokenId)
                    .ok_or_else(|| Error::Input(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Decodes up to the first eos, skipping pad and mask.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos_id {
                break;
            }
            if id == self.pad_id || id == self.mask_id {
                continue;
            }
            if let Some(s) = self.symbol(id) {
                out.push_str(s);
            }
        }
        out
    }
}
