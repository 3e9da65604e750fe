//! Shared text normalization: lowercase, then split into alphanumeric runs and
//! single punctuation marks. Used by metrics, concept matching and the vocabulary.

pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_word(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_alphanumeric)
}

/// Joins tokens back into readable text, attaching punctuation to the previous word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for t in tokens {
        let attach_left = matches!(t.as_str(), "." | "," | "!" | "?" | ";" | ":" | ")" | "'");
        if !out.is_empty() && !attach_left && !glue_next {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = matches!(t.as_str(), "(" | "'");
    }
    out
}
