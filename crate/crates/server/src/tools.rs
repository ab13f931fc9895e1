//! File-to-file versions of the pivot and survey merge.

use std::fs;
use std::path::{Path, PathBuf};

use g4r_core::export::{merge_with_survey, pivot_wide, read_export_csv, read_survey_csv, ExportError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolError {
    /// The inputs were read but are not acceptable.
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ExportError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ToolError {
    /// 2 for bad input data, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            ToolError::Invalid { .. } => 2,
            ToolError::Io { .. } => 1,
        }
    }
}

fn open(path: &Path) -> Result<fs::File, ToolError> {
    fs::File::open(path).map_err(|source| ToolError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ToolError> {
    fs::write(path, text).map_err(|source| ToolError::Io {
        path: path.to_owned(),
        source,
    })
}

fn invalid(path: &Path) -> impl FnOnce(ExportError) -> ToolError + '_ {
    move |source| match source {
        ExportError::Io(source) => ToolError::Io {
            path: path.to_owned(),
            source,
        },
        source => ToolError::Invalid {
            path: path.to_owned(),
            source,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PivotSummary {
    pub participants: usize,
    pub width: usize,
}

pub fn pivot_file(messages: &Path, out: &Path) -> Result<PivotSummary, ToolError> {
    let rows = read_export_csv(open(messages)?).map_err(invalid(messages))?;
    let table = pivot_wide(&rows);
    write(out, &table.to_csv().map_err(invalid(out))?)?;
    Ok(PivotSummary {
        participants: table.records.len(),
        width: table.width(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeSummary {
    pub survey_rows: usize,
    pub matched_rows: usize,
    pub width: usize,
    /// Transcript participants with no survey row, and their exchange count.
    pub unmatched: Vec<(String, usize)>,
}

pub fn merge_files(
    messages: &Path,
    survey: &Path,
    out: &Path,
    unmatched_out: Option<&Path>,
    skip_rows: usize,
) -> Result<MergeSummary, ToolError> {
    let rows = read_export_csv(open(messages)?).map_err(invalid(messages))?;
    let survey_table = read_survey_csv(open(survey)?, skip_rows).map_err(invalid(survey))?;
    let wide = pivot_wide(&rows);
    let merged = merge_with_survey(&wide, &survey_table).map_err(invalid(survey))?;
    write(out, &merged.to_csv().map_err(invalid(out))?)?;
    if let Some(path) = unmatched_out {
        write(path, &merged.unmatched_csv().map_err(invalid(path))?)?;
    }
    let key = survey_table.key_column().unwrap_or_default();
    let matched_rows = survey_table
        .rows
        .iter()
        .filter(|r| !r[key].is_empty() && wide.records.iter().any(|w| w.g4r_pid == r[key]))
        .count();
    Ok(MergeSummary {
        survey_rows: merged.rows.len(),
        matched_rows,
        width: wide.width(),
        unmatched: merged.unmatched,
    })
}
