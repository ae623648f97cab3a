// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 pre-tokenization, equivalent to the pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
//! with leftmost-first alternation.

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

fn is_letter(c: char) -> bool {
    c.is_alphabetic()
}

fn is_number(c: char) -> bool {
    c.is_numeric()
}

fn is_other(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_number(c)
}

/// Splits `text` into chunks; concatenating the chunks gives back `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let end = match_at(text, &chars, i);
        out.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    out
}

/// Returns the char index one past the chunk starting at `i`.
fn match_at(text: &str, chars: &[(usize, char)], i: usize) -> usize {
    let rest = &text[chars[i].0..];
    for c in CONTRACTIONS {
        if rest.starts_with(c) {
            return i + c.chars().count();
        }
    }
    let c = chars[i].1;
    let next = chars.get(i + 1).map(|&(_, c)| c);
    // ` ?class+` alternatives in pattern order
    for class in [is_letter as fn(char) -> bool, is_number, is_other] {
        let start = if c == ' ' && next.is_some_and(class) {
            i + 1
        } else if class(c) {
            i
        } else {
            continue;
        };
        let mut j = start;
        while j < chars.len() && class(chars[j].1) {
            j += 1;
        }
        return j;
    }
    // whitespace run
    let mut j = i;
    while j < chars.len() && chars[j].1.is_whitespace() {
        j += 1;
    }
    if j == chars.len() || j - i == 1 {
        // `\s+(?!\S)` takes the whole run at end of text; a single
        // whitespace before non-space falls through to `\s+`.
        j
    } else {
        j - 1
    }
}
