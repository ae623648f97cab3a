// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input resolution, output directories and stamped tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use planlab::corpus::{bundled, Dataset};
use planlab::metrics::MetricReport;
use planlab::planted::{world, GroundTruth};
use planlab::report::{config_hash, emit_report, ReportFormat, ReportMeta};
use planlab::runtime::Model;
use planlab::text::Vocabulary;
use serde::Serialize;
use serde_json::{json, Value};

/// How a command failed. Maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, or a check that did not pass. Exit 1.
    Invalid(anyhow::Error),
    /// Anything that went wrong while running. Exit 2.
    Exec(anyhow::Error),
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub trait Classify<T> {
    fn invalid(self) -> CmdResult<T>;
    fn exec(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn exec(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Exec(e.into()))
    }
}

pub fn invalid<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::Invalid(anyhow!(msg.into())))
}

/// `--model`, `--vocab` and `--dataset`. A model written `planted:<world>`
/// brings its own vocabulary and dataset.
#[derive(Debug, Clone, Args, Serialize)]
pub struct Inputs {
    /// Model container path, or `planted:<world>`.
    #[arg(long)]
    pub model: Option<String>,
    /// Directory holding vocab.json and merges.txt.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Dataset JSON path, or `bundled:<name>`.
    #[arg(long)]
    pub dataset: Option<String>,
}

pub struct Loaded {
    pub model: Option<Model>,
    pub vocab: Option<Vocabulary>,
    pub dataset: Option<Dataset>,
    pub truth: Option<GroundTruth>,
    pub label: String,
}

impl Loaded {
    pub fn model(&self) -> CmdResult<&Model> {
        self.model.as_ref().map_or_else(|| invalid("--model is required"), Ok)
    }
    pub fn vocab(&self) -> CmdResult<&Vocabulary> {
        self.vocab
            .as_ref()
            .map_or_else(|| invalid("--vocab is required unless --model is planted:<world>"), Ok)
    }
    pub fn dataset(&self) -> CmdResult<&Dataset> {
        self.dataset.as_ref().map_or_else(
            || invalid("--dataset is required unless --model is planted:<world>"),
            Ok,
        )
    }
}

pub fn load_dataset(arg: &str) -> CmdResult<Dataset> {
    match arg.strip_prefix("bundled:") {
        Some(name) => bundled(name).invalid(),
        None => Dataset::load(arg)
            .with_context(|| format!("loading dataset {arg}"))
            .invalid(),
    }
}

impl Inputs {
    pub fn label(&self) -> String {
        match &self.model {
            Some(m) if m.starts_with("planted:") => m.clone(),
            Some(m) => Path::new(m)
                .file_stem()
                .map_or_else(|| m.clone(), |s| s.to_string_lossy().into_owned()),
            None => "model".into(),
        }
    }

    /// Loads what was given. `need_model` skips building the model when the
    /// command only wants the vocabulary or dataset of a planted world.
    pub fn load(&self, need_model: bool) -> CmdResult<Loaded> {
        let mut out = Loaded {
            model: None,
            vocab: None,
            dataset: None,
            truth: None,
            label: self.label(),
        };
        if let Some(m) = &self.model {
            if let Some(name) = m.strip_prefix("planted:") {
                let w = world(name).invalid()?;
                if need_model {
                    let built = w.build().exec()?;
                    out.model = Some(built.model);
                    out.truth = Some(built.truth);
                }
                out.vocab = Some(w.vocab);
                out.dataset = Some(w.dataset);
            } else if need_model {
                out.model = Some(Model::load(m).with_context(|| format!("loading model {m}")).invalid()?);
            }
        }
        if let Some(v) = &self.vocab {
            out.vocab = Some(
                Vocabulary::from_dir(v)
                    .with_context(|| format!("loading vocabulary from {}", v.display()))
                    .invalid()?,
            );
        }
        if let Some(d) = &self.dataset {
            out.dataset = Some(load_dataset(d)?);
        }
        if let (Some(model), Some(vocab)) = (&out.model, &out.vocab) {
            if model.spec().vocab_size != vocab.len() {
                return invalid(format!(
                    "model has {} token embeddings but the vocabulary has {} entries",
                    model.spec().vocab_size,
                    vocab.len()
                ));
            }
        }
        Ok(out)
    }
}

/// `--seed`, `--out` and `--svg`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also write SVG bar charts.
    #[arg(long)]
    pub svg: bool,
}

/// An output directory bound to one command invocation.
pub struct Out {
    pub dir: PathBuf,
    pub meta: ReportMeta,
    svg: bool,
}

impl Out {
    /// Creates the directory and writes `manifest.json` describing the
    /// invocation. `args` must not contain the output path.
    pub fn open<A: Serialize>(command: &str, args: &A, output: &OutputArgs) -> CmdResult<Self> {
        let hash = config_hash(&(command, args)).exec()?;
        std::fs::create_dir_all(&output.out)
            .with_context(|| format!("creating {}", output.out.display()))
            .exec()?;
        let out = Out {
            dir: output.out.clone(),
            meta: ReportMeta {
                seed: output.seed,
                config_hash: hash,
            },
            svg: output.svg,
        };
        let manifest = json!({
            "command": command,
            "arguments": args,
            "seed": output.seed,
            "config_hash": out.meta.config_hash,
            "planlab_version": env!("CARGO_PKG_VERSION"),
        });
        out.write_json("manifest.json", &manifest)?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, body: &str) -> CmdResult<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, body)
            .with_context(|| format!("writing {}", p.display()))
            .exec()?;
        Ok(p)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CmdResult<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).exec()?;
        s.push('\n');
        self.write(name, &s)
    }

    /// Writes `<stem>.csv` and `<stem>.json`, plus `<stem>.svg` with `--svg`.
    pub fn reports(&self, stem: &str, reports: &[MetricReport]) -> CmdResult {
        let mut formats = vec![ReportFormat::Csv, ReportFormat::Json];
        if self.svg {
            formats.push(ReportFormat::SvgBars);
        }
        for f in formats {
            emit_report(reports, f, &self.meta, &self.dir, stem).exec()?;
        }
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` for a plain table.
    pub fn table(&self, stem: &str, table: &Table) -> CmdResult {
        self.write(&format!("{stem}.csv"), &table.csv(&self.meta))?;
        self.write_json(&format!("{stem}.json"), &table.json(&self.meta))?;
        Ok(())
    }

    pub fn report(
        &self,
        experiment: &str,
        model: &str,
        group: &str,
        metric: &str,
        value: f64,
        samples: usize,
    ) -> MetricReport {
        MetricReport {
            experiment: experiment.into(),
            model: model.into(),
            group: group.into(),
            metric: metric.into(),
            value,
            samples,
            config_hash: self.meta.config_hash.clone(),
        }
    }
}

/// Rows of already formatted cells; rendered with seed and config hash
/// columns appended.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn csv(&self, meta: &ReportMeta) -> String {
        let field = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut s = self.header.join(",");
        s.push_str(",seed,config_hash\n");
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|c| field(c)).collect();
            let _ = writeln!(s, "{},{},{}", cells.join(","), meta.seed, meta.config_hash);
        }
        s
    }

    fn json(&self, meta: &ReportMeta) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let obj: serde_json::Map<String, Value> = self
                    .header
                    .iter()
                    .zip(r)
                    .map(|(h, c)| {
                        let v = c.parse::<f64>().ok().filter(|x| x.is_finite()).map_or_else(
                            || Value::String(c.clone()),
                            |x| serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number),
                        );
                        (h.to_string(), v)
                    })
                    .collect();
                Value::Object(obj)
            })
            .collect();
        json!({ "seed": meta.seed, "config_hash": meta.config_hash, "rows": rows })
    }
}

/// Filesystem-safe form of a category or pair label.
pub fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    while out.contains("--") {
        out = out.replace("--", "-");
    }
    out.trim_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("-ight->-ake"), "ight-ake");
        assert_eq!(slug("elephant->whale"), "elephant-whale");
    }

    #[test]
    fn table_json_types() {
        let mut t = Table::new(vec!["name", "value"]);
        t.push(vec!["-ight".into(), "0.5".into()]);
        let meta = ReportMeta {
            seed: 3,
            config_hash: "h".into(),
        };
        let j = t.json(&meta);
        assert_eq!(j["rows"][0]["value"], json!(0.5));
        assert_eq!(j["rows"][0]["name"], json!("-ight"));
        assert!(t.csv(&meta).ends_with("-ight,0.5,3,h\n"));
    }
}
