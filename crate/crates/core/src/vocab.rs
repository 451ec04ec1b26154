//! Token-id conventions and word-piece detokenization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const BLANK: u32 = 4;
/// First id that is an ordinary word piece.
pub const FIRST_PIECE: u32 = 5;

/// Word-start marker carried by pieces that begin a new word.
pub const WORD_MARKER: char = '\u{2581}';

pub fn is_sentinel(id: u32) -> bool {
    id < FIRST_PIECE
}

/// Id-to-piece table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
}

impl Vocabulary {
    pub fn new(pieces: Vec<String>) -> Self {
        Self { pieces }
    }

    /// Deterministic vocabulary of `size` entries: the five sentinels, then
    /// pieces `▁wN` (word start) for ids not divisible by 4 and `sN`
    /// (continuation) for the rest.
    pub fn synthetic(size: usize) -> Self {
        let names = ["<pad>", "<s>", "</s>", "<unk>", "<blank>"];
        let pieces = (0..size)
            .map(|id| match names.get(id) {
                Some(n) => String::from(*n),
                None if id % 4 == 0 => format!("s{id}"),
                None => format!("{WORD_MARKER}w{id}"),
            })
            .collect();
        Self { pieces }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Joins pieces into words. A piece starting with `▁` opens a new word;
    /// other pieces extend the current one. Sentinel ids are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            if is_sentinel(id) {
                continue;
            }
            let piece = self.piece(id).unwrap_or("<unk>");
            match piece.strip_prefix(WORD_MARKER) {
                Some(rest) => words.push(String::from(rest)),
                None => match words.last_mut() {
                    Some(w) => w.push_str(piece),
                    None => words.push(String::from(piece)),
                },
            }
        }
        words
    }
}
