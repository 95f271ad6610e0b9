//! JSON-lines run logs and the analysis report derived from them.
//!
//! Line 1 is a header holding the schema version and the resolved run
//! configuration; every further line is one sampler step.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{iou_matrix, EntropySeries};
use crate::error::{Error, Result};
use crate::loda::{LodaOutput, StepDiagnostics};

pub const DIAGNOSTICS_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub run_id: String,
    pub height: usize,
    pub width: usize,
    /// Selected token positions and their words.
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    /// Fully resolved run configuration.
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Header(Header),
    Step(StepDiagnostics),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: Header,
    pub steps: Vec<StepDiagnostics>,
}

impl RunLog {
    pub fn from_output<T>(
        run_id: impl Into<String>,
        height: usize,
        width: usize,
        output: &LodaOutput<T>,
        config: Value,
    ) -> Self {
        RunLog {
            header: Header {
                schema: DIAGNOSTICS_SCHEMA,
                run_id: run_id.into(),
                height,
                width,
                tokens: output.tokens.clone(),
                words: output.words.clone(),
                config,
            },
            steps: output.steps.clone(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone()))?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Line::Step(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("diagnostics line {n}: {e}")))?;
            match (parsed, &header) {
                (Line::Header(h), None) => {
                    if h.schema > DIAGNOSTICS_SCHEMA {
                        return Err(Error::UnsupportedVersion {
                            what: "diagnostics log",
                            found: h.schema,
                            supported: DIAGNOSTICS_SCHEMA,
                        });
                    }
                    header = Some(h);
                }
                (Line::Header(_), Some(_)) => {
                    return Err(Error::Format(format!("diagnostics line {n}: second header")));
                }
                (Line::Step(_), None) => {
                    return Err(Error::Format(format!("diagnostics line {n}: step before header")));
                }
                (Line::Step(s), Some(h)) => {
                    if s.entropy.len() != h.tokens.len() && !s.entropy.is_empty() {
                        return Err(Error::Format(format!(
                            "diagnostics line {n}: {} entropies for {} tokens",
                            s.entropy.len(),
                            h.tokens.len()
                        )));
                    }
                    steps.push(s);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Format("diagnostics log is empty".into()))?;
        Ok(RunLog { header, steps })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn entropy_series(&self) -> Vec<EntropySeries> {
        self.header
            .words
            .iter()
            .enumerate()
            .map(|(j, w)| EntropySeries {
                token: w.clone(),
                values: self
                    .steps
                    .iter()
                    .filter_map(|s| s.entropy.get(j).map(|&h| (s.t, h)))
                    .collect(),
            })
            .collect()
    }
}

/// Per-run analysis summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub run_id: String,
    pub words: Vec<String>,
    pub entropy: Vec<EntropySeries>,
    /// Mean per-step entropy change per token.
    pub entropy_delta: Vec<f64>,
    /// Pairwise mask IoU at the final step.
    pub iou: Vec<Vec<f64>>,
    pub final_klh: Option<f64>,
}

impl Report {
    pub fn from_log(log: &RunLog) -> Result<Self> {
        let last = log
            .steps
            .last()
            .ok_or_else(|| Error::Format("diagnostics log has no steps".into()))?;
        let entropy = log.entropy_series();
        let entropy_delta = entropy.iter().map(EntropySeries::delta).collect::<Result<Vec<_>>>()?;
        let cells = log.header.height * log.header.width;
        Ok(Report {
            schema: REPORT_SCHEMA,
            run_id: log.header.run_id.clone(),
            words: log.header.words.clone(),
            entropy,
            entropy_delta,
            iou: iou_matrix(&last.mask_bools(cells))?,
            final_klh: last.klh,
        })
    }

    /// Token, entropy change, then one IoU column per token.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,entropy_delta");
        for w in &self.words {
            out.push_str(&format!(",iou_{w}"));
        }
        out.push('\n');
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w},{}", self.entropy_delta[i]));
            for v in &self.iou[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
