// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets shipped with the crate. Lines and lexicons are curated data.

use crate::corpus::dataset::Dataset;
use crate::error::{PlanError, Result};

pub const BUNDLED_NAMES: [&str; 4] = ["rhyme", "qa", "micro_rhyme", "micro_qa"];

const RHYME: &str = include_str!("../../data/rhyme.json");
const QA: &str = include_str!("../../data/qa.json");
const MICRO_RHYME: &str = include_str!("../../data/micro_rhyme.json");
const MICRO_QA: &str = include_str!("../../data/micro_qa.json");

/// Loads a bundled dataset by name.
pub fn bundled(name: &str) -> Result<Dataset> {
    let text = match name {
        "rhyme" => RHYME,
        "qa" => QA,
        "micro_rhyme" => MICRO_RHYME,
        "micro_qa" => MICRO_QA,
        other => {
            return Err(PlanError::Dataset(format!(
                "no bundled dataset `{other}` (have {})",
                BUNDLED_NAMES.join(", ")
            )))
        }
    };
    Dataset::from_json(text)
}
