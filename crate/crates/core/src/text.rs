//! Small lexical helpers shared by retrieval, caching and summarization.

use std::collections::BTreeSet;

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by",
    "can", "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "here",
    "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "let", "many", "me",
    "more", "most", "much", "my", "no", "not", "of", "on", "or", "our", "please", "several",
    "she", "so", "some", "than", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "those", "to", "up", "us", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "why", "will", "with", "would", "you", "your",
];

fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Crude plural folding: `roses` -> `rose`, `flowers` -> `flower`.
fn fold(word: &str) -> String {
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

/// Lowercased, plural-folded content words of `text`, stopwords removed.
pub fn terms(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !is_stopword(w))
        .map(|w| fold(&w))
        .collect()
}

/// Normalizes free-form tags the same way as [`terms`].
pub fn tag_terms<'a>(tags: impl IntoIterator<Item = &'a String>) -> BTreeSet<String> {
    tags.into_iter().flat_map(|t| terms(t)).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Fraction of `query` terms found in `doc`; 0 for an empty query.
pub fn coverage(query: &BTreeSet<String>, doc: &BTreeSet<String>) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    query.intersection(doc).count() as f64 / query.len() as f64
}

pub fn first_sentence(text: &str) -> &str {
    let trimmed = text.trim();
    let mut end = trimmed.len();
    let mut chars = trimmed.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => {
                    end = i + c.len_utf8();
                    break;
                }
                Some((_, next)) if next.is_whitespace() => {
                    end = i + c.len_utf8();
                    break;
                }
                _ => {}
            }
        }
    }
    &trimmed[..end]
}

/// Capitalized words (not sentence-initial), numbers and quoted phrases.
pub fn entities(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: String| {
        if !s.is_empty() && !out.contains(&s) {
            out.push(s);
        }
    };
    for quoted in text.split(['"', '\'']).skip(1).step_by(2) {
        let q = quoted.trim();
        if !q.is_empty() && q.split_whitespace().count() <= 6 {
            push(q.to_string());
        }
    }
    let mut sentence_start = true;
    for word in text.split_whitespace() {
        let core: String =
            word.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
        let numeric = core.chars().any(|c| c.is_ascii_digit());
        let proper = !sentence_start && core.chars().next().is_some_and(char::is_uppercase);
        if numeric || proper {
            push(core.clone());
        }
        sentence_start = word.ends_with(['.', '!', '?']);
    }
    out
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
