//! Rule-based segmentation of response text into speakable chunks.
//!
//! 1. Split after words ending in `. , ; : ! ?`.
//! 2. Split before discourse markers ("however", "and", "while", ...).
//! 3. Pieces still over the ceiling split before a subordinator or relative
//!    pronoun, choosing the most balanced position that leaves both halves
//!    at or above the floor.
//!
//! Fragments under the floor that do not end in punctuation are merged into
//! the following piece (or, at the end of the text, into a preceding piece
//! that also lacks terminal punctuation). Anything still over the ceiling is
//! force-split every 15 words, rebalancing a short remainder.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_WORDS: usize = 7;
pub const MAX_WORDS: usize = 15;
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Punctuation,
    Discourse,
    Syntactic,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based position in the utterance.
    pub index: usize,
    /// Segment body without its trailing punctuation.
    pub text: String,
    /// Trailing punctuation removed from `text` (may be empty).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub punct: String,
    pub word_count: usize,
    /// Why the utterance was split after this segment; `None` for the last one.
    pub boundary: Option<Boundary>,
}

impl Segment {
    /// Body plus trailing punctuation, as it appeared in the source.
    pub fn source_text(&self) -> String {
        format!("{}{}", self.text, self.punct)
    }

    pub fn is_punctuation_terminal(&self) -> bool {
        !self.punct.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("nothing to segment")]
    EmptyText,
}

/// Ordered list of single- or multi-word cue phrases.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: Vec<Vec<String>>,
}

impl Lexicon {
    /// One entry per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(str::to_lowercase).collect())
            .collect();
        Self { entries }
    }

    pub fn discourse_markers() -> Self {
        Self::parse(include_str!("../../data/discourse_markers.txt"))
    }

    pub fn subordinators() -> Self {
        Self::parse(include_str!("../../data/subordinators.txt"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn matches_at(&self, keys: &[String], at: usize) -> bool {
        self.entries.iter().any(|e| {
            keys.len() >= at + e.len() && e.iter().zip(&keys[at..]).all(|(a, b)| a == b)
        })
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub min_words: usize,
    pub max_words: usize,
    pub discourse: Lexicon,
    pub subordinators: Lexicon,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self {
            min_words: MIN_WORDS,
            max_words: MAX_WORDS,
            discourse: Lexicon::discourse_markers(),
            subordinators: Lexicon::subordinators(),
        }
    }
}

static DEFAULT: LazyLock<Segmenter> = LazyLock::new(Segmenter::default);

/// Segments `text` with the bundled lexicons and the 7..=15 word window.
pub fn segment(text: &str) -> Result<Vec<Segment>, SegmentError> {
    DEFAULT.segment(text)
}

pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Inverse of segmentation: the normalized source text.
pub fn join(segments: &[Segment]) -> String {
    segments.iter().map(Segment::source_text).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    start: usize,
    end: usize,
    after: Option<Boundary>,
}

struct Words<'a> {
    raw: Vec<&'a str>,
    keys: Vec<String>,
    counted: Vec<bool>,
}

impl<'a> Words<'a> {
    fn new(text: &'a str) -> Self {
        let raw: Vec<&str> = text.split(' ').collect();
        let keys = raw
            .iter()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .collect();
        let counted = raw.iter().map(|w| w.chars().any(char::is_alphanumeric)).collect();
        Self { raw, keys, counted }
    }

    fn count(&self, p: &Piece) -> usize {
        self.counted[p.start..p.end].iter().filter(|c| **c).count()
    }

    fn terminal(&self, p: &Piece) -> bool {
        self.raw[p.end - 1].ends_with(PUNCT)
    }

    /// Word index at which the `n`-th counted word of `p` begins.
    fn nth_counted(&self, p: &Piece, n: usize) -> usize {
        let mut seen = 0;
        for i in p.start..p.end {
            if self.counted[i] {
                if seen == n {
                    return i;
                }
                seen += 1;
            }
        }
        p.end
    }
}

impl Segmenter {
    pub fn segment(&self, text: &str) -> Result<Vec<Segment>, SegmentError> {
        let normalized = normalize(text);
        if normalized.is_empty() {
            return Err(SegmentError::EmptyText);
        }
        let words = Words::new(&normalized);

        let mut pieces = Vec::new();
        for p in self.punctuation_pieces(&words) {
            self.split_discourse(&words, p, &mut pieces);
        }
        let merged = self.merge_short(&words, pieces);
        let mut fitted = Vec::new();
        for p in merged {
            self.fit(&words, p, &mut fitted);
        }

        Ok(fitted
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let joined = words.raw[p.start..p.end].join(" ");
                let body_len = joined.trim_end_matches(|c: char| PUNCT.contains(&c) || c == ' ').len();
                let (text, punct) = if body_len == 0 {
                    (joined.clone(), String::new())
                } else {
                    (joined[..body_len].to_string(), joined[body_len..].to_string())
                };
                Segment {
                    index: i + 1,
                    text,
                    punct,
                    word_count: words.count(p),
                    boundary: if i + 1 == fitted.len() { None } else { p.after },
                }
            })
            .collect())
    }

    fn punctuation_pieces(&self, words: &Words) -> Vec<Piece> {
        let mut out: Vec<Piece> = Vec::new();
        let mut start = 0;
        for i in 0..words.raw.len() {
            let last = i + 1 == words.raw.len();
            if words.raw[i].ends_with(PUNCT) || last {
                let piece = Piece {
                    start,
                    end: i + 1,
                    after: (!last).then_some(Boundary::Punctuation),
                };
                // A run of bare punctuation belongs to the piece before it,
                // or to the next one when it leads the text.
                match out.last_mut() {
                    Some(prev) if words.count(&piece) == 0 => {
                        prev.end = piece.end;
                        prev.after = piece.after;
                    }
                    None if words.count(&piece) == 0 && !last => continue,
                    _ => out.push(piece),
                }
                start = i + 1;
            }
        }
        out
    }

    fn split_discourse(&self, words: &Words, p: Piece, out: &mut Vec<Piece>) {
        let mut start = p.start;
        for i in p.start + 1..p.end {
            let has_words = words.count(&Piece { start, end: i, after: None }) > 0;
            if words.counted[i] && has_words && self.discourse.matches_at(&words.keys[..p.end], i) {
                out.push(Piece { start, end: i, after: Some(Boundary::Discourse) });
                start = i;
            }
        }
        out.push(Piece { start, end: p.end, after: p.after });
    }

    fn merge_short(&self, words: &Words, pieces: Vec<Piece>) -> Vec<Piece> {
        let mut out: Vec<Piece> = Vec::new();
        let mut pending: Option<Piece> = None;
        for p in pieces {
            let cur = match pending.take() {
                Some(prev) => Piece { start: prev.start, end: p.end, after: p.after },
                None => p,
            };
            if words.count(&cur) < self.min_words && !words.terminal(&cur) {
                pending = Some(cur);
            } else {
                out.push(cur);
            }
        }
        if let Some(tail) = pending {
            match out.last_mut() {
                Some(prev) if !words.terminal(prev) => {
                    prev.end = tail.end;
                    prev.after = tail.after;
                }
                _ => out.push(tail),
            }
        }
        out
    }

    fn fit(&self, words: &Words, p: Piece, out: &mut Vec<Piece>) {
        let n = words.count(&p);
        if n <= self.max_words {
            out.push(p);
            return;
        }
        if let Some(at) = self.syntactic_split(words, &p) {
            self.fit(words, Piece { start: p.start, end: at, after: Some(Boundary::Syntactic) }, out);
            self.fit(words, Piece { start: at, end: p.end, after: p.after }, out);
            return;
        }
        self.forced_split(words, p, out);
    }

    /// Most balanced subordinator position leaving both sides >= the floor.
    fn syntactic_split(&self, words: &Words, p: &Piece) -> Option<usize> {
        let n = words.count(p);
        let mut best: Option<(usize, usize)> = None;
        let mut before = 0;
        for i in p.start..p.end {
            if i > p.start
                && words.counted[i]
                && before >= self.min_words
                && n - before >= self.min_words
                && self.subordinators.matches_at(&words.keys[..p.end], i)
            {
                let imbalance = before.abs_diff(n - before);
                if best.is_none_or(|(_, b)| imbalance < b) {
                    best = Some((i, imbalance));
                }
            }
            if words.counted[i] {
                before += 1;
            }
        }
        best.map(|(i, _)| i)
    }

    fn forced_split(&self, words: &Words, p: Piece, out: &mut Vec<Piece>) {
        let mut rest = p;
        loop {
            let n = words.count(&rest);
            if n <= self.max_words {
                out.push(rest);
                return;
            }
            // Leave a remainder of at least the floor; otherwise halve.
            let take = if n - self.max_words < self.min_words && n < self.max_words + self.min_words {
                n.div_ceil(2)
            } else {
                self.max_words
            };
            let at = words.nth_counted(&rest, take);
            out.push(Piece { start: rest.start, end: at, after: Some(Boundary::Forced) });
            rest = Piece { start: at, end: rest.end, after: rest.after };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &[Segment]) -> Vec<&str> {
        s.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn comma_then_discourse_marker() {
        let s = segment("The cat sat on the mat, while the dog slept peacefully").unwrap();
        assert_eq!(texts(&s), ["The cat sat on the mat", "while the dog slept peacefully"]);
        assert_eq!(s[0].boundary, Some(Boundary::Punctuation));
        assert_eq!(s[0].punct, ",");
        assert_eq!(s[1].boundary, None);
        assert_eq!(s[1].index, 2);
    }

    #[test]
    fn single_short_word() {
        let s = segment("Hello").unwrap();
        assert_eq!(texts(&s), ["Hello"]);
        assert_eq!(s[0].word_count, 1);
    }

    #[test]
    fn empty_text() {
        assert_eq!(segment("  \n\t "), Err(SegmentError::EmptyText));
    }

    #[test]
    fn forced_split_of_long_run() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let s = segment(&words.join(" ")).unwrap();
        let counts: Vec<usize> = s.iter().map(|s| s.word_count).collect();
        assert_eq!(counts, [15, 15, 10]);
        let b: Vec<_> = s.iter().map(|s| s.boundary).collect();
        assert_eq!(b, [Some(Boundary::Forced), Some(Boundary::Forced), None]);
    }

    #[test]
    fn forced_split_rebalances_short_remainder() {
        let words: Vec<String> = (0..17).map(|i| format!("w{i}")).collect();
        let s = segment(&words.join(" ")).unwrap();
        let counts: Vec<usize> = s.iter().map(|s| s.word_count).collect();
        assert_eq!(counts, [9, 8]);
    }

    #[test]
    fn short_discourse_fragment_merges_forward() {
        let s = segment("I can see several roses and tulips in full bloom").unwrap();
        assert_eq!(texts(&s), ["I can see several roses and tulips in full bloom"]);
    }

    #[test]
    fn long_clause_splits_at_subordinator() {
        let text = "The old wooden house on the hill belongs to the family who planted the big orchard near the river";
        let s = segment(text).unwrap();
        assert_eq!(
            texts(&s),
            ["The old wooden house on the hill belongs to the family", "who planted the big orchard near the river"]
        );
        assert_eq!(s[0].boundary, Some(Boundary::Syntactic));
    }

    #[test]
    fn discourse_split_of_two_clauses() {
        let s = segment(
            "The weather stayed warm all through the afternoon however the evening turned cold and windy quickly",
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].boundary, Some(Boundary::Discourse));
        assert!(s[1].text.starts_with("however"));
    }

    #[test]
    fn join_restores_normalized_text() {
        let text = "  Well ,  that is  odd!  ... Really?  Yes; it is: quite odd. ";
        let s = segment(text).unwrap();
        assert_eq!(join(&s), normalize(text));
    }

    #[test]
    fn multi_sentence_garden_answer() {
        let s = segment(
            "I can see several roses and tulips in full bloom, and the garden looks lovely in the afternoon sun.",
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "I can see several roses and tulips in full bloom");
        assert_eq!(s[1].punct, ".");
    }

    #[test]
    fn lexicons_load() {
        let d = Lexicon::discourse_markers();
        for w in ["however", "therefore", "and", "while", "but", "because"] {
            assert!(d.matches_at(&[w.to_string()], 0), "{w}");
        }
        assert!(Lexicon::subordinators().len() > 10);
    }
}
