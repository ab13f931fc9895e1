mod common;

use common::oracle::{check, oracle, survey_csv};
use g4r_core::export::{merge_with_survey, pivot_wide, read_survey_csv, ExportRow};

#[test]
fn merge_matches_manual_oracle_on_100_random_instances() {
    for seed in 0..100 {
        check(seed).unwrap();
    }
}

#[test]
fn paper_style_two_message_participant() {
    let messages = vec![
        ExportRow {
            participant_id: "ABC".into(),
            message_to_gpt: "u1".into(),
            message_from_gpt: "r1".into(),
            timestamp: String::new(),
        },
        ExportRow {
            participant_id: "ABC".into(),
            message_to_gpt: "u2".into(),
            message_from_gpt: "r2".into(),
            timestamp: String::new(),
        },
    ];
    let header = vec!["Q1".to_owned(), "g4r_pid".to_owned()];
    let survey = vec![vec!["yes".to_owned(), "ABC".to_owned()]];
    let expected = oracle(&messages, &header, &survey);
    assert_eq!(
        expected.header,
        [
            "Q1",
            "g4r_pid",
            "message_to_gpt_1",
            "message_from_gpt_1",
            "message_to_gpt_2",
            "message_from_gpt_2"
        ]
    );
    let table = read_survey_csv(survey_csv(&header, &survey).as_bytes(), 0).unwrap();
    let merged = merge_with_survey(&pivot_wide(&messages), &table).unwrap();
    assert_eq!(merged.header, expected.header);
    assert_eq!(merged.rows, expected.rows);
    assert_eq!(merged.rows[0], ["yes", "ABC", "u1", "r1", "u2", "r2"]);
}
