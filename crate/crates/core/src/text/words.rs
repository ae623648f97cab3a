// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word extraction and normalization for lexicon matching.

use crate::error::{PlanError, Result};

fn word_runs(line: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = line.chars().collect();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphabetic() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len()
            && (chars[i].is_alphabetic()
                || (chars[i] == '\'' && i + 1 < chars.len() && chars[i + 1].is_alphabetic() && i > start))
        {
            i += 1;
        }
        runs.push((start, i));
    }
    runs
}

fn run_text(line: &str, (s, e): (usize, usize)) -> String {
    line.chars().skip(s).take(e - s).collect::<String>().to_lowercase()
}

/// Final alphabetic run of `line` (internal apostrophes kept), lowercased.
pub fn last_word(line: &str) -> Result<String> {
    word_runs(line)
        .last()
        .map(|&r| run_text(line, r))
        .ok_or_else(|| PlanError::Metric(format!("no alphabetic content in {line:?}")))
}

/// First alphabetic run of `text`, lowercased.
pub fn first_word(text: &str) -> Option<String> {
    word_runs(text).first().map(|&r| run_text(text, r))
}

/// Lowercases and strips non-alphabetic characters at both ends.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphabetic()).to_lowercase()
}

/// `line` without its final word, trailing whitespace trimmed.
pub fn strip_last_word(line: &str) -> Result<String> {
    let runs = word_runs(line);
    if runs.len() < 2 {
        return Err(PlanError::Metric(format!("line {line:?} has fewer than two words")));
    }
    let (start, _) = runs[runs.len() - 1];
    let head: String = line.chars().take(start).collect();
    Ok(head.trim_end().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_word_examples() {
        assert_eq!(last_word("And stood for years, enduring every trick").unwrap(), "trick");
        assert_eq!(last_word("bathed in a golden light!").unwrap(), "light");
        assert_eq!(last_word("  Light...  ").unwrap(), "light");
        assert_eq!(last_word("I said I don't").unwrap(), "don't");
        assert!(last_word("42.").is_err());
    }

    #[test]
    fn apostrophes_only_inside_words() {
        assert_eq!(last_word("the dogs'").unwrap(), "dogs");
        assert_eq!(first_word("'twas night").unwrap(), "twas");
    }

    #[test]
    fn strip_last() {
        assert_eq!(
            strip_last_word("And stood for years, enduring every trick").unwrap(),
            "And stood for years, enduring every"
        );
        assert_eq!(
            strip_last_word("Soaring above bathed in a golden light").unwrap(),
            "Soaring above bathed in a golden"
        );
        assert_eq!(strip_last_word(" softly light").unwrap(), " softly");
        assert!(strip_last_word("alone").is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_word("Light!"), "light");
        assert_eq!(normalize_word("\"Élan\""), "élan");
    }
}
