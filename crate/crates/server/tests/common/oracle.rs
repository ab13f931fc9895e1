//! Pivot + left join checked against a deliberately naive reference: for
//! each survey row, scan every message row and copy the matches across one
//! cell at a time.

use g4r_core::export::{
    export_csv, merge_with_survey, pivot_wide, read_export_csv, read_survey_csv, ExportRow,
};
use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};

pub struct OracleOutput {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub unmatched: Vec<String>,
}

pub fn oracle(messages: &[ExportRow], survey_header: &[String], survey: &[Vec<String>]) -> OracleOutput {
    let key = survey_header.iter().position(|h| h == "g4r_pid").unwrap();

    // widest participant, by brute-force counting
    let mut k = 0;
    for a in messages {
        let mut count = 0;
        for b in messages {
            if b.participant_id == a.participant_id {
                count += 1;
            }
        }
        if count > k {
            k = count;
        }
    }

    let mut header = survey_header.to_vec();
    for n in 1..=k {
        header.push(format!("message_to_gpt_{n}"));
        header.push(format!("message_from_gpt_{n}"));
    }

    let mut rows = Vec::new();
    for s in survey {
        let mut out = s.clone();
        let mut cells = vec![String::new(); 2 * k];
        let mut n = 0;
        if !s[key].is_empty() {
            for m in messages {
                if m.participant_id == s[key] {
                    cells[2 * n] = m.message_to_gpt.clone();
                    cells[2 * n + 1] = m.message_from_gpt.clone();
                    n += 1;
                }
            }
        }
        out.extend(cells);
        rows.push(out);
    }

    let mut unmatched: Vec<String> = Vec::new();
    for m in messages {
        let in_survey = survey.iter().any(|s| s[key] == m.participant_id);
        if !in_survey && !unmatched.contains(&m.participant_id) {
            unmatched.push(m.participant_id.clone());
        }
    }
    OracleOutput {
        header,
        rows,
        unmatched,
    }
}

const PAYLOAD_PARTS: &[&str] = &[
    "hello", "a,b", "line\nbreak", "say \"hi\"", "naïve", "日本語", "emoji 🙂", "", " ", "\r\n",
    "tab\there", "Please be concise",
];

fn payload(rng: &mut StdRng) -> String {
    let n = rng.random_range(0..4);
    (0..n)
        .map(|_| *PAYLOAD_PARTS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn pid(rng: &mut StdRng) -> String {
    const ALPHA: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    (0..8)
        .map(|_| ALPHA[rng.random_range(0..ALPHA.len())] as char)
        .collect()
}

pub struct Instance {
    pub messages: Vec<ExportRow>,
    pub survey_header: Vec<String>,
    pub survey: Vec<Vec<String>>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = StdRng::seed_from_u64(seed);
    let participants = rng.random_range(0..=20);
    let pids: Vec<String> = (0..participants).map(|_| pid(&mut rng)).collect();

    let mut messages = Vec::new();
    for p in &pids {
        let exchanges = rng.random_range(0..=6);
        for i in 0..exchanges {
            messages.push(ExportRow {
                participant_id: p.clone(),
                message_to_gpt: payload(&mut rng),
                message_from_gpt: payload(&mut rng),
                timestamp: format!("2025-03-01T10:00:{:02}.000Z", i),
            });
        }
    }

    let survey_header: Vec<String> = ["ResponseId", "Q1 age", "g4r_pid", "Q2, \"free text\""]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut survey_pids: Vec<String> = pids.iter().filter(|_| rng.random_bool(0.8)).cloned().collect();
    for _ in 0..rng.random_range(0..4) {
        survey_pids.push(pid(&mut rng));
    }
    for _ in 0..rng.random_range(0..3) {
        survey_pids.push(String::new());
    }
    survey_pids.shuffle(&mut rng);
    let survey = survey_pids
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                format!("R_{i}"),
                rng.random_range(18..80).to_string(),
                p,
                payload(&mut rng),
            ]
        })
        .collect();

    Instance {
        messages,
        survey_header,
        survey,
    }
}

pub fn survey_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Runs one seeded instance through the file pipeline (export, parse,
/// pivot, merge, write, parse) and compares with the oracle.
pub fn check(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    let expected = oracle(&inst.messages, &inst.survey_header, &inst.survey);

    let messages = read_export_csv(export_csv(&inst.messages).as_bytes()).map_err(|e| e.to_string())?;
    if messages != inst.messages {
        return Err(format!("seed {seed}: export round trip changed the rows"));
    }
    let survey = read_survey_csv(survey_csv(&inst.survey_header, &inst.survey).as_bytes(), 0)
        .map_err(|e| e.to_string())?;
    let merged = merge_with_survey(&pivot_wide(&messages), &survey).map_err(|e| e.to_string())?;

    let text = merged.to_csv().map_err(|e| e.to_string())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let parsed: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    if parsed[0] != expected.header {
        return Err(format!("seed {seed}: header {:?} != {:?}", parsed[0], expected.header));
    }
    if parsed[1..] != expected.rows[..] {
        return Err(format!("seed {seed}: merged rows differ from the oracle"));
    }
    if parsed.len() - 1 != inst.survey.len() {
        return Err(format!("seed {seed}: row count {} != {}", parsed.len() - 1, inst.survey.len()));
    }
    let unmatched: Vec<_> = merged.unmatched.iter().map(|(p, _)| p.clone()).collect();
    if unmatched != expected.unmatched {
        return Err(format!("seed {seed}: unmatched {unmatched:?} != {:?}", expected.unmatched));
    }
    Ok(())
}
