// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment datasets: categories, pairs and the prompt template.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::text::{last_word, normalize_word};

/// Share of a family's train lines one final word may take before a
/// balance warning.
pub const BALANCE_LIMIT: f64 = 0.30;

pub const RHYME_PREAMBLE: &str = "A rhyming couplet:\n";
pub const QA_PREAMBLE: &str = "Question: What two-wheeled vehicle do you pedal?\nAnswer: a bicycle\n\n\
Question: What flying vehicle carries passengers in the sky?\nAnswer: an airplane\n\nQuestion:";
pub const QA_POSTAMBLE: &str = "\nAnswer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    RhymeFamily,
    AnswerNoun,
    MarkerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Article {
    A,
    An,
}

impl Article {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::An => "an",
        }
    }

    /// Article by initial letter: vowels take "an".
    pub fn for_word(word: &str) -> Option<Self> {
        let c = word.chars().find(|c| c.is_alphabetic())?.to_ascii_lowercase();
        Some(if "aeiou".contains(c) { Self::An } else { Self::A })
    }
}

impl fmt::Display for Article {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCategory {
    pub id: String,
    pub kind: CategoryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article: Option<Article>,
    pub lexicon: BTreeSet<String>,
    pub train_prompts: Vec<String>,
    pub test_prompts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neutral_prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryPair {
    pub source: String,
    pub target: String,
    pub kind: CategoryKind,
}

impl CategoryPair {
    /// `source->target`, as accepted by `--pair`.
    pub fn label(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }
}

/// `preamble + separator + text + postamble`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub preamble: String,
    #[serde(default)]
    pub separator: String,
    pub postamble: String,
}

impl PromptTemplate {
    pub fn rhyme() -> Self {
        Self {
            preamble: RHYME_PREAMBLE.into(),
            separator: String::new(),
            postamble: "\n".into(),
        }
    }

    pub fn qa() -> Self {
        Self {
            preamble: QA_PREAMBLE.into(),
            separator: " ".into(),
            postamble: QA_POSTAMBLE.into(),
        }
    }

    pub fn build(&self, text: &str) -> String {
        format!("{}{}{}{}", self.preamble, self.separator, text, self.postamble)
    }
}

/// Free function form of [`PromptTemplate::build`].
pub fn build_prompt(template: &PromptTemplate, text: &str) -> String {
    template.build(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    /// JSON path of the offending value.
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub template: PromptTemplate,
    pub categories: Vec<PromptCategory>,
    pub pairs: Vec<CategoryPair>,
}

impl Dataset {
    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(s).map_err(|e| {
            PlanError::Dataset(format!(
                "schema violation at line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        ds.check_structure()?;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PlanError::Dataset(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            PlanError::Dataset(m) => PlanError::Dataset(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Hard errors: the dataset cannot be used at all.
    fn check_structure(&self) -> Result<()> {
        let err = |path: String, msg: &str| Err(PlanError::Dataset(format!("$.{path}: {msg}")));
        if self.categories.is_empty() {
            return err("categories".into(), "no categories");
        }
        let mut ids = BTreeMap::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id.is_empty() {
                return err(format!("categories[{i}].id"), "empty id");
            }
            if ids.insert(c.id.as_str(), c.kind).is_some() {
                return err(format!("categories[{i}].id"), &format!("duplicate id `{}`", c.id));
            }
            if c.lexicon.is_empty() {
                return err(format!("categories[{i}].lexicon"), "empty lexicon");
            }
        }
        for (i, p) in self.pairs.iter().enumerate() {
            for (field, id) in [("source", &p.source), ("target", &p.target)] {
                match ids.get(id.as_str()) {
                    None => return err(format!("pairs[{i}].{field}"), &format!("unknown category `{id}`")),
                    Some(&k) if k != p.kind => {
                        return err(format!("pairs[{i}].{field}"), "category kind differs from pair kind")
                    }
                    _ => {}
                }
            }
            if p.source == p.target {
                return err(format!("pairs[{i}]"), "source and target are the same category");
            }
        }
        LexiconIndex::new(&self.categories)?;
        Ok(())
    }

    pub fn category(&self, id: &str) -> Result<&PromptCategory> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| PlanError::Dataset(format!("no category `{id}`")))
    }

    /// Accepts `source->target` or `source,target`.
    pub fn pair(&self, label: &str) -> Result<&CategoryPair> {
        let (s, t) = label
            .split_once("->")
            .or_else(|| label.split_once(','))
            .ok_or_else(|| PlanError::Dataset(format!("pair `{label}` is not `source->target`")))?;
        self.pairs
            .iter()
            .find(|p| p.source == s.trim() && p.target == t.trim())
            .ok_or_else(|| PlanError::Dataset(format!("dataset has no pair `{label}`")))
    }

    pub fn prompt(&self, text: &str) -> String {
        self.template.build(text)
    }

    pub fn lexicons(&self) -> LexiconIndex {
        LexiconIndex::new(&self.categories).expect("checked on load")
    }

    /// Violations across every category, sorted.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out: Vec<Violation> = self
            .categories
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                validate_category(c).into_iter().map(move |mut v| {
                    v.path = format!("categories[{i}]{}", v.path);
                    v
                })
            })
            .collect();
        out.sort();
        out
    }
}

/// Data problems in one category. Paths are relative to the category.
pub fn validate_category(c: &PromptCategory) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |severity, path: String, message: String| {
        out.push(Violation {
            severity,
            path,
            message,
        })
    };
    for (split, lines) in [("train_prompts", &c.train_prompts), ("test_prompts", &c.test_prompts)] {
        for (i, line) in lines.iter().enumerate() {
            let path = format!(".{split}[{i}]");
            if line.trim().is_empty() {
                push(Severity::Error, path, "empty prompt".into());
                continue;
            }
            if c.kind == CategoryKind::RhymeFamily {
                match last_word(line) {
                    Ok(w) if c.lexicon.contains(&w) => {}
                    Ok(w) => push(
                        Severity::Error,
                        path,
                        format!("last word `{w}` is not in the `{}` lexicon", c.id),
                    ),
                    Err(_) => push(Severity::Error, path, "line has no words".into()),
                }
            }
        }
    }
    let train: BTreeSet<&String> = c.train_prompts.iter().collect();
    for (i, line) in c.test_prompts.iter().enumerate() {
        if train.contains(line) {
            push(
                Severity::Error,
                format!(".test_prompts[{i}]"),
                "line also appears in train_prompts".into(),
            );
        }
    }
    if c.kind == CategoryKind::AnswerNoun {
        match (c.article, c.lexicon.iter().next().and_then(|w| Article::for_word(w))) {
            (None, _) => push(Severity::Error, ".article".into(), "answer noun without article".into()),
            (Some(a), Some(b)) if a != b => push(
                Severity::Error,
                ".article".into(),
                format!("article `{a}` does not fit `{}`", c.id),
            ),
            _ => {}
        }
    }
    if c.kind == CategoryKind::RhymeFamily && !c.train_prompts.is_empty() {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in &c.train_prompts {
            if let Ok(w) = last_word(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let n = c.train_prompts.len() as f64;
        for (w, k) in counts {
            if k as f64 / n > BALANCE_LIMIT {
                push(
                    Severity::Warning,
                    ".train_prompts".into(),
                    format!("{k} of {} lines end in `{w}`", c.train_prompts.len()),
                );
            }
        }
    }
    out
}

/// Word to category lookup over pairwise-disjoint lexicons.
#[derive(Debug, Clone, Default)]
pub struct LexiconIndex {
    words: BTreeMap<String, String>,
}

impl LexiconIndex {
    pub fn new(categories: &[PromptCategory]) -> Result<Self> {
        let mut words = BTreeMap::new();
        for c in categories {
            for w in &c.lexicon {
                let w = normalize_word(w);
                if let Some(prev) = words.insert(w.clone(), c.id.clone()) {
                    if prev != c.id {
                        return Err(PlanError::Dataset(format!(
                            "word `{w}` is in the lexicons of both `{prev}` and `{}`",
                            c.id
                        )));
                    }
                }
            }
        }
        Ok(Self { words })
    }

    pub fn category_of_word(&self, word: &str) -> Option<&str> {
        self.words.get(&normalize_word(word)).map(String::as_str)
    }

    /// Category of the line's last word, if any.
    pub fn classify(&self, line: &str) -> Option<&str> {
        last_word(line).ok().and_then(|w| self.category_of_word(&w))
    }
}

/// Category whose lexicon holds the last word of `line`.
pub fn classify_last_word(line: &str, categories: &[PromptCategory]) -> Result<Option<String>> {
    Ok(LexiconIndex::new(categories)?.classify(line).map(str::to_string))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(id: &str, lex: &[&str], train: &[&str]) -> PromptCategory {
        PromptCategory {
            id: id.into(),
            kind: CategoryKind::RhymeFamily,
            article: None,
            lexicon: lex.iter().map(|s| s.to_string()).collect(),
            train_prompts: train.iter().map(|s| s.to_string()).collect(),
            test_prompts: vec![],
            neutral_prompts: vec![],
        }
    }

    #[test]
    fn prompts() {
        assert_eq!(
            PromptTemplate::rhyme().build("He saw a carrot and had to grab it"),
            "A rhyming couplet:\nHe saw a carrot and had to grab it\n"
        );
        let q = PromptTemplate::qa().build("What large mammal is endangered?");
        assert!(q.starts_with("Question: What two-wheeled vehicle do you pedal?\nAnswer: a bicycle\n\n"));
        assert!(q.ends_with("\n\nQuestion: What large mammal is endangered?\nAnswer:"));
    }

    #[test]
    fn rhyme_violations() {
        let mut ok = family(
            "-ick",
            &["trick", "brick", "stick", "quick"],
            &["And stood for years, enduring every trick"],
        );
        ok.train_prompts
            .extend(["a brick", "the stick", "so quick"].map(String::from));
        assert!(validate_category(&ok).is_empty());
        let bad = family("-ight", &["light"], &["He saw a carrot and had to grab it"]);
        let v: Vec<_> = validate_category(&bad)
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .collect();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Error);
        assert_eq!(v[0].path, ".train_prompts[0]");
    }

    #[test]
    fn balance_warning() {
        let mut lines = vec!["the light".to_string(); 40];
        lines.extend((0..45).map(|i| format!("line {i} ends in night")));
        let mut c = family("-ight", &["light", "night"], &[]);
        c.train_prompts = lines;
        let v = validate_category(&c);
        assert!(v.iter().all(|x| x.severity == Severity::Warning));
        assert_eq!(v.len(), 2);
        c.train_prompts.truncate(60);
        c.train_prompts.extend((0..40).map(|i| format!("bright {i} sight")));
        c.lexicon.insert("sight".into());
        let v = validate_category(&c);
        assert!(v.iter().any(|x| x.message.contains("`light`")));
    }

    #[test]
    fn overlap_and_article() {
        let mut c = family("-ee", &["tree"], &["a tree"]);
        c.test_prompts = vec!["a tree".into()];
        assert!(validate_category(&c).iter().any(|v| v.message.contains("also appears")));
        let noun = PromptCategory {
            id: "eye".into(),
            kind: CategoryKind::AnswerNoun,
            article: Some(Article::A),
            lexicon: ["eye".to_string()].into(),
            train_prompts: vec![],
            test_prompts: vec![],
            neutral_prompts: vec![],
        };
        assert_eq!(validate_category(&noun).len(), 1);
    }

    #[test]
    fn classification() {
        let cats = [
            family("-ight", &["light", "night"], &[]),
            family("-ing", &["sing", "king"], &[]),
        ];
        let c = |l: &str| classify_last_word(l, &cats).unwrap();
        assert_eq!(c("Soaring above bathed in a golden light").as_deref(), Some("-ight"));
        assert_eq!(c("Soaring above where true joy will sing").as_deref(), Some("-ing"));
        assert_eq!(c("And stood for years, enduring every zzz"), None);
        assert_eq!(c("..."), None);
        let clash = [family("a", &["light"], &[]), family("b", &["Light"], &[])];
        assert!(classify_last_word("light", &clash).is_err());
    }

    #[test]
    fn structure_errors() {
        let empty = r#"{"name":"x","template":{"preamble":"","postamble":""},"categories":[],"pairs":[]}"#;
        assert!(Dataset::from_json(empty)
            .unwrap_err()
            .to_string()
            .contains("categories"));
        let bad_pair = r#"{"name":"x","template":{"preamble":"","postamble":""},
            "categories":[{"id":"a","kind":"rhyme_family","lexicon":["x"],"train_prompts":[],"test_prompts":[]}],
            "pairs":[{"source":"a","target":"b","kind":"rhyme_family"}]}"#;
        assert!(Dataset::from_json(bad_pair)
            .unwrap_err()
            .to_string()
            .contains("pairs[0].target"));
        assert!(Dataset::from_json("{").is_err());
    }
}
