//! Rule-based tokenization and sentence splitting.
//!
//! Offsets are counted in Unicode scalar values (`char`s), not bytes.
//!
//! Tokens: the text is split on whitespace, then each chunk is cut wherever
//! the character class changes between letters, digits and symbols. Every
//! symbol character (anything that is neither whitespace, alphabetic nor
//! numeric) is a token on its own.
//!
//! Sentences: a boundary follows `.`, `?` or `!` when the next non-space
//! character is uppercase or a digit and there is at least one whitespace
//! character in between, unless the word ending in `.` is a known
//! abbreviation.

use crate::corpus::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Symbol,
}

fn classify(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Symbol
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut class = None;

    let flush = |buf: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !buf.is_empty() {
            out.push(Token {
                text: std::mem::take(buf),
                char_start: start,
                char_end: end,
            });
        }
    };

    for (pos, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, start, pos, &mut tokens);
            class = None;
            continue;
        }
        let cls = classify(c);
        let boundary = match class {
            None => true,
            Some(CharClass::Symbol) => true,
            Some(prev) => prev != cls,
        };
        if boundary {
            flush(&mut current, start, pos, &mut tokens);
            start = pos;
        }
        current.push(c);
        class = Some(cls);
    }
    let end = start + current.chars().count();
    flush(&mut current, start, end, &mut tokens);
    tokens
}

/// Lowercased abbreviations (including the final period) that never end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "vs.", "al.", "approx.", "ca.", "cf.", "dr.", "fig.", "figs.", "mr.", "mrs.",
    "ms.", "no.", "nos.", "prof.", "ref.", "resp.", "st.", "viz.", "wt.", "yr.", "yrs.",
];

/// Splits text into sentence intervals `(char_start, char_end)`, trimmed of
/// surrounding whitespace.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut sent_start = None;

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if sent_start.is_none() && !c.is_whitespace() {
            sent_start = Some(i);
        }
        if matches!(c, '.' | '?' | '!') && is_boundary(&chars, i) {
            if let Some(s) = sent_start.take() {
                out.push((s, i + 1));
            }
        }
        i += 1;
    }
    if let Some(s) = sent_start {
        let mut end = chars.len();
        while end > s && chars[end - 1].is_whitespace() {
            end -= 1;
        }
        out.push((s, end));
    }
    out
}

fn is_boundary(chars: &[char], pos: usize) -> bool {
    let mut next = pos + 1;
    if next >= chars.len() || !chars[next].is_whitespace() {
        return false;
    }
    while next < chars.len() && chars[next].is_whitespace() {
        next += 1;
    }
    let Some(&following) = chars.get(next) else {
        return false;
    };
    if !(following.is_uppercase() || following.is_numeric()) {
        return false;
    }
    if chars[pos] == '.' {
        let mut word_start = pos;
        while word_start > 0 && !chars[word_start - 1].is_whitespace() {
            word_start -= 1;
        }
        let word: String = chars[word_start..=pos].iter().collect::<String>().to_lowercase();
        if ABBREVIATIONS.contains(&word.as_str()) {
            return false;
        }
    }
    true
}
