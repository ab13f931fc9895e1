//! Message export (long format, one row per exchange), pivoting to one row
//! per participant, and left-joining that onto survey responses by
//! `g4r_pid`.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use thiserror::Error;

use crate::model::format_timestamp;
use crate::snippet::EMBEDDED_DATA_KEY;
use crate::store::ParticipantExchange;

pub const EXPORT_HEADER: [&str; 4] = [
    "participant_id",
    "message_to_gpt",
    "message_from_gpt",
    "timestamp",
];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("survey data has no `{EMBEDDED_DATA_KEY}` column")]
    MissingKeyColumn,
    #[error("survey rows share a {EMBEDDED_DATA_KEY}: {}", describe_duplicates(.0))]
    DuplicateSurveyKey(Vec<DuplicateKey>),
    #[error("survey already has a column named `{0}`")]
    ColumnCollision(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateKey {
    pub g4r_pid: String,
    /// Spreadsheet-style row numbers (the header is row 1).
    pub rows: Vec<usize>,
}

fn describe_duplicates(d: &[DuplicateKey]) -> String {
    d.iter()
        .map(|k| {
            let rows: Vec<_> = k.rows.iter().map(ToString::to_string).collect();
            format!("`{}` on rows {}", k.g4r_pid, rows.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// One line of the message download.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportRow {
    pub participant_id: String,
    pub message_to_gpt: String,
    pub message_from_gpt: String,
    pub timestamp: String,
}

pub fn export_rows(exchanges: &[ParticipantExchange]) -> Vec<ExportRow> {
    exchanges
        .iter()
        .map(|p| ExportRow {
            participant_id: p.participant_id.clone(),
            message_to_gpt: p.exchange.participant_message.clone(),
            message_from_gpt: p.exchange.gpt_message.clone(),
            timestamp: format_timestamp(p.exchange.exchanged_at),
        })
        .collect()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input)
}

fn into_string(writer: csv::Writer<Vec<u8>>) -> Result<String, ExportError> {
    let bytes = writer
        .into_inner()
        .map_err(|e| ExportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer only emits the utf-8 it was given"))
}

/// RFC 4180 text with CRLF line endings. A header is always written, so an
/// interface without messages yields a header-only file.
pub fn write_export_csv<W: Write>(rows: &[ExportRow], out: W) -> Result<(), ExportError> {
    let mut w = csv_writer(out);
    w.write_record(EXPORT_HEADER)?;
    for r in rows {
        w.write_record([
            &r.participant_id,
            &r.message_to_gpt,
            &r.message_from_gpt,
            &r.timestamp,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(rows: &[ExportRow]) -> String {
    let mut buf = Vec::new();
    write_export_csv(rows, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("utf-8 in, utf-8 out")
}

fn strip_bom(s: &str) -> &str {
    s.strip_prefix('\u{feff}').unwrap_or(s)
}

/// Parses a message download. Columns are located by name; `timestamp` is
/// optional.
pub fn read_export_csv<R: Read>(input: R) -> Result<Vec<ExportRow>, ExportError> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(ExportError::MalformedInput("file is empty".into())),
    };
    let names: Vec<&str> = header.iter().map(|h| strip_bom(h).trim()).collect();
    let find = |name: &str| names.iter().position(|h| *h == name);
    let column = |name: &str| {
        find(name).ok_or_else(|| ExportError::MalformedInput(format!("missing column `{name}`")))
    };
    let pid = column("participant_id")?;
    let to = column("message_to_gpt")?;
    let from = column("message_from_gpt")?;
    let ts = find("timestamp");

    let mut rows = Vec::new();
    for (i, record) in records.enumerate() {
        let record = record?;
        let cell = |idx: usize| -> Result<String, ExportError> {
            record.get(idx).map(str::to_owned).ok_or_else(|| {
                ExportError::MalformedInput(format!("row {} has too few fields", i + 2))
            })
        };
        rows.push(ExportRow {
            participant_id: cell(pid)?,
            message_to_gpt: cell(to)?,
            message_from_gpt: cell(from)?,
            timestamp: match ts {
                Some(idx) => cell(idx)?,
                None => String::new(),
            },
        });
    }
    Ok(rows)
}

/// Message columns for exchanges `1..=k`, in display order.
pub fn wide_column_names(k: usize) -> Vec<String> {
    (1..=k)
        .flat_map(|n| [format!("message_to_gpt_{n}"), format!("message_from_gpt_{n}")])
        .collect()
}

/// One participant's exchanges, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WideRecord {
    pub g4r_pid: String,
    pub exchanges: Vec<ExportRow>,
}

impl WideRecord {
    /// Message cells padded with empty strings out to `k` exchanges.
    pub fn cells(&self, k: usize) -> Vec<String> {
        let mut cells = Vec::with_capacity(2 * k);
        for x in &self.exchanges {
            cells.push(x.message_to_gpt.clone());
            cells.push(x.message_from_gpt.clone());
        }
        cells.resize(2 * k.max(self.exchanges.len()), String::new());
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WideTable {
    pub records: Vec<WideRecord>,
}

impl WideTable {
    /// K: the largest exchange count of any participant.
    pub fn width(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.exchanges.len())
            .max()
            .unwrap_or(0)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec![EMBEDDED_DATA_KEY.to_owned()];
        h.extend(wide_column_names(self.width()));
        h
    }

    pub fn to_csv(&self) -> Result<String, ExportError> {
        let k = self.width();
        let mut w = csv_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.records {
            let mut row = vec![r.g4r_pid.clone()];
            row.extend(r.cells(k));
            w.write_record(&row)?;
        }
        into_string(w)
    }

    /// Back to long format; the inverse of [`pivot_wide`].
    pub fn flatten(&self) -> Vec<ExportRow> {
        self.records
            .iter()
            .flat_map(|r| r.exchanges.iter().cloned())
            .collect()
    }
}

/// Groups rows by participant in first-seen order, keeping each
/// participant's rows in input order.
pub fn pivot_wide(rows: &[ExportRow]) -> WideTable {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut records: Vec<WideRecord> = Vec::new();
    for row in rows {
        let slot = *index.entry(&row.participant_id).or_insert_with(|| {
            records.push(WideRecord {
                g4r_pid: row.participant_id.clone(),
                exchanges: Vec::new(),
            });
            records.len() - 1
        });
        records[slot].exchanges.push(row.clone());
    }
    WideTable { records }
}

/// Survey responses as downloaded from the survey platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyTable {
    pub header: Vec<String>,
    /// Extra header rows some platforms emit under the real header (question
    /// text, import ids). Carried through untouched and never joined.
    pub metadata_rows: Vec<Vec<String>>,
    pub rows: Vec<Vec<String>>,
}

impl SurveyTable {
    pub fn key_column(&self) -> Option<usize> {
        self.header.iter().position(|h| h.trim() == EMBEDDED_DATA_KEY)
    }
}

/// Reads survey CSV. `skip_rows` lines directly after the header are kept as
/// metadata (Qualtrics exports typically have 2).
pub fn read_survey_csv<R: Read>(input: R, skip_rows: usize) -> Result<SurveyTable, ExportError> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(h) => h?.iter().map(str::to_owned).collect(),
        None => return Err(ExportError::MalformedInput("survey file is empty".into())),
    };
    let mut header = header;
    if let Some(first) = header.first_mut() {
        *first = strip_bom(first).to_owned();
    }
    let mut metadata_rows = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in records.enumerate() {
        let mut cells: Vec<String> = record?.iter().map(str::to_owned).collect();
        if cells.len() > header.len() {
            return Err(ExportError::MalformedInput(format!(
                "survey row {} has {} fields but the header has {}",
                i + 2,
                cells.len(),
                header.len()
            )));
        }
        cells.resize(header.len(), String::new());
        if i < skip_rows {
            metadata_rows.push(cells);
        } else {
            rows.push(cells);
        }
    }
    Ok(SurveyTable {
        header,
        metadata_rows,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutput {
    pub header: Vec<String>,
    pub metadata_rows: Vec<Vec<String>>,
    pub rows: Vec<Vec<String>>,
    /// Transcript participants with no survey row, with their exchange count.
    pub unmatched: Vec<(String, usize)>,
}

impl MergeOutput {
    pub fn to_csv(&self) -> Result<String, ExportError> {
        let mut w = csv_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in self.metadata_rows.iter().chain(&self.rows) {
            w.write_record(row)?;
        }
        into_string(w)
    }

    pub fn unmatched_csv(&self) -> Result<String, ExportError> {
        let mut w = csv_writer(Vec::new());
        w.write_record([EMBEDDED_DATA_KEY, "exchanges"])?;
        for (pid, n) in &self.unmatched {
            w.write_record([pid.as_str(), &n.to_string()])?;
        }
        into_string(w)
    }
}

/// Left join: every survey row is kept in order with the message columns
/// appended. Rows with an empty `g4r_pid` never match and are exempt from
/// the duplicate check.
pub fn merge_with_survey(wide: &WideTable, survey: &SurveyTable) -> Result<MergeOutput, ExportError> {
    let key = survey.key_column().ok_or(ExportError::MissingKeyColumn)?;
    let data_row_offset = 2 + survey.metadata_rows.len();

    let mut seen: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, row) in survey.rows.iter().enumerate() {
        let pid = row[key].as_str();
        if pid.is_empty() {
            continue;
        }
        let rows = seen.entry(pid).or_default();
        if rows.is_empty() {
            order.push(pid);
        }
        rows.push(i + data_row_offset);
    }
    let duplicates: Vec<_> = order
        .iter()
        .filter(|pid| seen[*pid].len() > 1)
        .map(|pid| DuplicateKey {
            g4r_pid: (*pid).to_owned(),
            rows: seen[*pid].clone(),
        })
        .collect();
    if !duplicates.is_empty() {
        return Err(ExportError::DuplicateSurveyKey(duplicates));
    }

    let k = wide.width();
    let columns = wide_column_names(k);
    let existing: HashSet<&str> = survey.header.iter().map(String::as_str).collect();
    if let Some(clash) = columns.iter().find(|c| existing.contains(c.as_str())) {
        return Err(ExportError::ColumnCollision(clash.clone()));
    }

    let by_pid: HashMap<&str, &WideRecord> =
        wide.records.iter().map(|r| (r.g4r_pid.as_str(), r)).collect();
    let blank = vec![String::new(); 2 * k];

    let mut header = survey.header.clone();
    header.extend(columns);
    let metadata_rows = survey
        .metadata_rows
        .iter()
        .map(|r| [r.as_slice(), &blank].concat())
        .collect();
    let rows = survey
        .rows
        .iter()
        .map(|r| {
            let cells = match by_pid.get(r[key].as_str()) {
                Some(record) if !r[key].is_empty() => record.cells(k),
                _ => blank.clone(),
            };
            [r.as_slice(), &cells].concat()
        })
        .collect();
    let unmatched = wide
        .records
        .iter()
        .filter(|r| !seen.contains_key(r.g4r_pid.as_str()))
        .map(|r| (r.g4r_pid.clone(), r.exchanges.len()))
        .collect();

    Ok(MergeOutput {
        header,
        metadata_rows,
        rows,
        unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(pid: &str, to: &str, from: &str) -> ExportRow {
        ExportRow {
            participant_id: pid.into(),
            message_to_gpt: to.into(),
            message_from_gpt: from.into(),
            timestamp: "2025-03-01T00:00:00.000Z".into(),
        }
    }

    fn survey(csv: &str) -> SurveyTable {
        read_survey_csv(csv.as_bytes(), 0).unwrap()
    }

    #[test]
    fn empty_export_is_header_only() {
        assert_eq!(
            export_csv(&[]),
            "participant_id,message_to_gpt,message_from_gpt,timestamp\r\n"
        );
    }

    #[test]
    fn fields_with_commas_and_newlines_are_quoted_and_restored() {
        let rows = vec![row("ABC", "hello, \"world\"\nline two", "plain")];
        let text = export_csv(&rows);
        assert!(text.contains("\"hello, \"\"world\"\"\nline two\""));
        assert_eq!(read_export_csv(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn reader_requires_message_columns() {
        let err = read_export_csv("participant_id,message_to_gpt\r\nA,b\r\n".as_bytes());
        assert!(matches!(err, Err(ExportError::MalformedInput(m)) if m.contains("message_from_gpt")));
        assert!(matches!(
            read_export_csv("".as_bytes()),
            Err(ExportError::MalformedInput(_))
        ));
    }

    #[test]
    fn pivot_two_exchanges_gives_four_columns() {
        let wide = pivot_wide(&[row("ABC", "u1", "r1"), row("ABC", "u2", "r2")]);
        assert_eq!(
            wide.header(),
            [
                "g4r_pid",
                "message_to_gpt_1",
                "message_from_gpt_1",
                "message_to_gpt_2",
                "message_from_gpt_2"
            ]
        );
        assert_eq!(wide.records[0].cells(2), ["u1", "r1", "u2", "r2"]);
    }

    #[test]
    fn pivot_single_exchange() {
        let wide = pivot_wide(&[row("P", "u", "r")]);
        assert_eq!(wide.width(), 1);
        assert_eq!(wide.header().len(), 3);
    }

    #[test]
    fn pivot_pads_short_participants() {
        let wide = pivot_wide(&[
            row("A", "a1", "ra1"),
            row("B", "b1", "rb1"),
            row("B", "b2", "rb2"),
            row("B", "b3", "rb3"),
        ]);
        assert_eq!(wide.width(), 3);
        let csv = wide.to_csv().unwrap();
        let expected = "g4r_pid,message_to_gpt_1,message_from_gpt_1,message_to_gpt_2,message_from_gpt_2,message_to_gpt_3,message_from_gpt_3\r\n\
                        A,a1,ra1,,,,\r\n\
                        B,b1,rb1,b2,rb2,b3,rb3\r\n";
        assert_eq!(csv, expected);
    }

    #[test]
    fn merge_keeps_every_survey_row() {
        let wide = pivot_wide(&[
            row("ABC", "u1", "r1"),
            row("ABC", "u2", "r2"),
            row("ZZZ", "lost", "found"),
        ]);
        let s = survey("ResponseId,g4r_pid,Q1\r\nR_1,ABC,7\r\nR_2,NOP,3\r\nR_3,,1\r\n");
        let merged = merge_with_survey(&wide, &s).unwrap();
        assert_eq!(merged.rows.len(), 3);
        assert_eq!(merged.rows[0], ["R_1", "ABC", "7", "u1", "r1", "u2", "r2"]);
        assert_eq!(merged.rows[1], ["R_2", "NOP", "3", "", "", "", ""]);
        assert_eq!(merged.rows[2], ["R_3", "", "1", "", "", "", ""]);
        assert_eq!(merged.unmatched, [("ZZZ".to_owned(), 1)]);
        assert_eq!(
            merged.unmatched_csv().unwrap(),
            "g4r_pid,exchanges\r\nZZZ,1\r\n"
        );
    }

    #[test]
    fn merge_errors() {
        let wide = pivot_wide(&[row("A", "u", "r")]);
        assert!(matches!(
            merge_with_survey(&wide, &survey("id,Q1\r\n1,2\r\n")),
            Err(ExportError::MissingKeyColumn)
        ));
        let dup = merge_with_survey(&wide, &survey("g4r_pid,Q\r\nA,1\r\nB,2\r\nA,3\r\n"));
        match dup {
            Err(ExportError::DuplicateSurveyKey(d)) => {
                assert_eq!(d, [DuplicateKey { g4r_pid: "A".into(), rows: vec![2, 4] }]);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        assert!(matches!(
            merge_with_survey(&wide, &survey("g4r_pid,message_to_gpt_1\r\nA,x\r\n")),
            Err(ExportError::ColumnCollision(c)) if c == "message_to_gpt_1"
        ));
    }

    #[test]
    fn survey_metadata_rows_pass_through() {
        let text = "\u{feff}g4r_pid,Q1\r\n\"Participant id\",\"How old are you?\"\r\n{\"ImportId\":\"g4r_pid\"},{\"ImportId\":\"QID1\"}\r\nABC,30\r\n";
        let s = read_survey_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(s.header, ["g4r_pid", "Q1"]);
        assert_eq!(s.metadata_rows.len(), 2);
        let merged = merge_with_survey(&pivot_wide(&[row("ABC", "u", "r")]), &s).unwrap();
        assert_eq!(merged.rows, [vec!["ABC", "30", "u", "r"]]);
        assert_eq!(merged.metadata_rows[0][2], "");
        let out = merged.to_csv().unwrap();
        assert_eq!(out.lines().count(), 4);
    }

    #[test]
    fn ragged_survey_rows_are_rejected() {
        assert!(matches!(
            read_survey_csv("a,b\r\n1,2,3\r\n".as_bytes(), 0),
            Err(ExportError::MalformedInput(_))
        ));
        let short = read_survey_csv("a,b\r\n1\r\n".as_bytes(), 0).unwrap();
        assert_eq!(short.rows, [vec!["1", ""]]);
    }

    fn arb_rows() -> impl Strategy<Value = Vec<ExportRow>> {
        proptest::collection::vec(
            ("[A-D]", "\\PC{0,6}|[,\"\n]{1,3}", "\\PC{0,6}"),
            0..20,
        )
        .prop_map(|v| v.into_iter().map(|(p, t, f)| row(&p, &t, &f)).collect())
    }

    proptest! {
        #[test]
        fn flatten_inverts_pivot_for_grouped_rows(rows in arb_rows()) {
            // export emits rows grouped by participant in first-seen order
            let grouped = pivot_wide(&rows).flatten();
            prop_assert_eq!(pivot_wide(&grouped).flatten(), grouped.clone());
            prop_assert_eq!(grouped.len(), rows.len());
        }

        #[test]
        fn export_csv_round_trips(rows in arb_rows()) {
            let text = export_csv(&rows);
            prop_assert_eq!(read_export_csv(text.as_bytes()).unwrap(), rows);
        }
    }
}
