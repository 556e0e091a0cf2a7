//! Shared tokenization used by every lexical operation (retrieval, NLU
//! keyword statistics, templates, metrics).
//!
//! Text is lowercased, every non-alphanumeric character becomes a space, and
//! the result is split on whitespace.

/// Literal end-of-dialogue marker emitted by simulators.
pub const END_MARKER: &str = "[END]";

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(|c| c.to_lowercase())
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Removes every `[END]` marker and trims the result.
pub fn strip_end_marker(text: &str) -> String {
    text.replace(END_MARKER, " ").trim().to_string()
}

pub fn has_end_marker(text: &str) -> bool {
    text.contains(END_MARKER)
}

pub fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    let count = if n == 0 || tokens.len() < n {
        0
    } else {
        tokens.len() - n + 1
    };
    (0..count).map(move |i| &tokens[i..i + n])
}

/// Position of the first occurrence of `needle` as a contiguous token run.
pub fn find_phrase(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}
