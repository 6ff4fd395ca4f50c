//! Deterministic rule tokenizer.
//!
//! Text is split on Unicode whitespace, then leading and trailing punctuation
//! is peeled off each chunk one character at a time. Word-internal
//! punctuation (apostrophes, hyphens, decimal points) stays attached, so
//! `"don't stop, e.g. now!"` becomes `don't stop , e.g . now !`.
//! The infill marker is always a token of its own.

use crate::subword::FILL_MARKER;

fn is_detachable(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'' | '(' | ')' | '[' | ']' | '{' | '}' | '…'
            | '“' | '”' | '‘' | '’' | '«' | '»'
    )
}

/// Splits `text` into tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(pos) = rest.find(FILL_MARKER) {
            split_chunk(&rest[..pos], &mut out);
            out.push(FILL_MARKER.to_string());
            rest = &rest[pos + FILL_MARKER.len()..];
        }
        split_chunk(rest, &mut out);
    }
    out
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    if chunk.is_empty() {
        return;
    }
    let chars: Vec<char> = chunk.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && is_detachable(chars[start]) {
        out.push(chars[start].to_string());
        start += 1;
    }
    let mut trailing = Vec::new();
    while end > start && is_detachable(chars[end - 1]) {
        trailing.push(chars[end - 1].to_string());
        end -= 1;
    }
    if start < end {
        out.push(chars[start..end].iter().collect());
    }
    out.extend(trailing.into_iter().rev());
}

/// Joins tokens back into the canonical single-space form.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_ref());
    }
    s
}

/// Tokenizes and re-joins, giving the canonical form used by the rest of the toolkit.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detaches_punctuation() {
        assert_eq!(
            tokenize("Hello, world! (really)"),
            vec!["Hello", ",", "world", "!", "(", "really", ")"]
        );
    }

    #[test]
    fn keeps_internal_punctuation() {
        assert_eq!(tokenize("don't e.g. 3.5 well-known"), vec!["don't", "e.g", ".", "3.5", "well-known"]);
    }

    #[test]
    fn marker_is_own_token() {
        let s = format!("ab{FILL_MARKER}hij rest");
        assert_eq!(tokenize(&s), vec!["ab", FILL_MARKER, "hij", "rest"]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let s = "  The cat ,sat... on\tthe mat!  ";
        let once = normalize(s);
        assert_eq!(normalize(&once), once);
        assert_eq!(once, "The cat , sat . . . on the mat !");
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n").is_empty());
    }
}
