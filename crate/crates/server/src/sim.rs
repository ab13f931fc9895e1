//! Scripted synthetic participants driven through the public HTTP API, and
//! a checker that compares what they did with the researcher's download.
//!
//! Script files are CSV with a header row:
//!
//! ```text
//! participant_id,message,expected_cap_at
//! P01,Hello there,
//! P01,How are you?,
//! P02,One,2
//! P02,Two,
//! ```
//!
//! Rows sharing a `participant_id` form one script, in file order. The
//! optional `expected_cap_at` column gives the 1-based turn at which the
//! cap message is expected (the first non-empty value for a participant
//! wins). Lines starting with `#` are comments. A row with an empty message
//! declares a participant without adding a turn.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt, TryStreamExt};
use g4r_core::engine::{redact_reply, wrap};
use g4r_core::export::{read_export_csv, ExportRow};
use g4r_core::gateway::mock::ECHO_PREFIX;
use g4r_core::{apply_defaults, InterfaceSettings, PartialSettings, CAP_REACHED_MESSAGE};
use reqwest::StatusCode;
use serde_json::json;
use thiserror::Error;

use crate::api::{CreatedInterface, SessionView};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantScript {
    pub participant_id: String,
    pub turns: Vec<String>,
    /// 1-based turn expected to hit the cap.
    pub expected_cap_at: Option<usize>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("script file: {0}")]
    Script(String),
    #[error("{context}: {source}")]
    Transport {
        context: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("{context}: unexpected HTTP {status}: {body}")]
    Status {
        context: String,
        status: StatusCode,
        body: String,
    },
    #[error("participant {expected}: chat page carried participant id {found:?}")]
    PidMismatch { expected: String, found: Option<String> },
}

pub fn parse_scripts<R: Read>(input: R) -> Result<Vec<ParticipantScript>, HarnessError> {
    let bad = |m: String| HarnessError::Script(m);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::Headers)
        .from_reader(input);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let pid_col = column("participant_id").ok_or_else(|| bad("missing `participant_id` column".into()))?;
    let msg_col = column("message").ok_or_else(|| bad("missing `message` column".into()))?;
    let cap_col = column("expected_cap_at");

    let mut scripts: Vec<ParticipantScript> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let pid = record.get(pid_col).unwrap_or("").trim();
        if pid.is_empty() {
            return Err(bad(format!("data row {} has no participant_id", line + 1)));
        }
        let i = *index.entry(pid.to_owned()).or_insert_with(|| {
            scripts.push(ParticipantScript {
                participant_id: pid.to_owned(),
                turns: Vec::new(),
                expected_cap_at: None,
            });
            scripts.len() - 1
        });
        let script = &mut scripts[i];
        let message = record.get(msg_col).unwrap_or("");
        if !message.is_empty() {
            script.turns.push(message.to_owned());
        }
        let cap = cap_col.and_then(|c| record.get(c)).map(str::trim).unwrap_or("");
        if !cap.is_empty() && script.expected_cap_at.is_none() {
            let n: usize = cap
                .parse()
                .map_err(|_| bad(format!("data row {}: expected_cap_at {cap:?} is not a positive integer", line + 1)))?;
            if n == 0 {
                return Err(bad(format!("data row {}: expected_cap_at is 1-based", line + 1)));
            }
            script.expected_cap_at = Some(n);
        }
    }
    Ok(scripts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnOutcome {
    Reply { text: String, remaining: u32 },
    Cap { message: String },
    UpstreamFailure { status: u16 },
}

#[derive(Debug, Clone)]
pub struct ScriptReport {
    pub script: ParticipantScript,
    /// Participant id as read back from the chat page.
    pub page_participant_id: String,
    pub session_id: String,
    pub outcomes: Vec<TurnOutcome>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub interface: CreatedInterface,
    /// Settings the interface was created with, used to predict echo replies.
    pub settings: InterfaceSettings,
    pub scripts: Vec<ScriptReport>,
    pub elapsed: Duration,
}

impl RunReport {
    pub fn successful_exchanges(&self) -> usize {
        self.scripts
            .iter()
            .flat_map(|s| &s.outcomes)
            .filter(|o| matches!(o, TurnOutcome::Reply { .. }))
            .count()
    }
}

/// Talks to a running service over HTTP only.
#[derive(Clone)]
pub struct HarnessClient {
    http: reqwest::Client,
    base_url: String,
    token: Option<String>,
}

async fn checked(
    context: impl Into<String>,
    sent: Result<reqwest::Response, reqwest::Error>,
    expected: &[StatusCode],
) -> Result<reqwest::Response, HarnessError> {
    let context = context.into();
    let response = sent.map_err(|source| HarnessError::Transport {
        context: context.clone(),
        source,
    })?;
    if expected.contains(&response.status()) {
        return Ok(response);
    }
    let status = response.status();
    let body = response.text().await.unwrap_or_default();
    Err(HarnessError::Status { context, status, body })
}

async fn json_body<T: serde::de::DeserializeOwned>(
    context: &str,
    response: reqwest::Response,
) -> Result<T, HarnessError> {
    response.json().await.map_err(|source| HarnessError::Transport {
        context: context.into(),
        source,
    })
}

async fn text_body(context: &str, response: reqwest::Response) -> Result<String, HarnessError> {
    response.text().await.map_err(|source| HarnessError::Transport {
        context: context.into(),
        source,
    })
}

/// Reads `data-participant-id` from the chat page.
pub fn page_participant_id(html: &str) -> Option<String> {
    const ATTR: &str = "data-participant-id=\"";
    let start = html.find(ATTR)? + ATTR.len();
    let end = start + html[start..].find('"')?;
    Some(
        html[start..end]
            .replace("&quot;", "\"")
            .replace("&#39;", "'")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&amp;", "&"),
    )
}

impl HarnessClient {
    pub fn new(base_url: &str) -> Self {
        Self {
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("default TLS backend available"),
            base_url: base_url.trim_end_matches('/').to_owned(),
            token: None,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn authed(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.token {
            Some(token) => req.bearer_auth(token),
            None => req,
        }
    }

    /// Creates a throwaway researcher account and signs in with it.
    pub async fn sign_up(&mut self) -> Result<(), HarnessError> {
        let email = format!("sim-{}@example.org", uuid_like());
        let password = format!("pw-{}", uuid_like());
        let created = self
            .http
            .post(self.url("/api/accounts"))
            .json(&json!({"display_name": "Simulation", "email": email, "password": password}))
            .send()
            .await;
        checked("create account", created, &[StatusCode::CREATED]).await?;
        let signed_in = self
            .http
            .post(self.url("/api/signin"))
            .json(&json!({"email": email, "password": password}))
            .send()
            .await;
        let response = checked("sign in", signed_in, &[StatusCode::OK]).await?;
        let body: serde_json::Value = json_body("sign in", response).await?;
        self.token = body["token"].as_str().map(str::to_owned);
        Ok(())
    }

    pub async fn create_interface(&self, partial: &PartialSettings) -> Result<CreatedInterface, HarnessError> {
        let sent = self
            .authed(self.http.post(self.url("/api/interfaces")))
            .json(partial)
            .send()
            .await;
        let response = checked("create interface", sent, &[StatusCode::CREATED]).await?;
        json_body("create interface", response).await
    }

    pub async fn chat_page(&self, interface_id: &str, pid: &str) -> Result<String, HarnessError> {
        let sent = self
            .http
            .get(self.url(&format!("/embed/{interface_id}")))
            .query(&[("pid", pid)])
            .send()
            .await;
        let response = checked("chat page", sent, &[StatusCode::OK]).await?;
        text_body("chat page", response).await
    }

    pub async fn open_session(&self, interface_id: &str, pid: &str) -> Result<SessionView, HarnessError> {
        let sent = self
            .http
            .post(self.url(&format!("/api/interfaces/{interface_id}/sessions")))
            .json(&json!({ "participant_id": pid }))
            .send()
            .await;
        let response = checked("open session", sent, &[StatusCode::OK]).await?;
        json_body("open session", response).await
    }

    pub async fn send(&self, session_id: &str, text: &str) -> Result<TurnOutcome, HarnessError> {
        let context = format!("send on session {session_id}");
        let sent = self
            .http
            .post(self.url(&format!("/api/sessions/{session_id}/messages")))
            .json(&json!({ "text": text }))
            .send()
            .await;
        let response = checked(
            context.as_str(),
            sent,
            &[StatusCode::OK, StatusCode::CONFLICT, StatusCode::BAD_GATEWAY],
        )
        .await?;
        match response.status() {
            StatusCode::OK => {
                let body: serde_json::Value = json_body(&context, response).await?;
                Ok(TurnOutcome::Reply {
                    text: body["gpt_message"].as_str().unwrap_or_default().to_owned(),
                    remaining: body["remaining_quota"].as_u64().unwrap_or_default() as u32,
                })
            }
            StatusCode::CONFLICT => Ok(TurnOutcome::Cap {
                message: text_body(&context, response).await?,
            }),
            status => Ok(TurnOutcome::UpstreamFailure {
                status: status.as_u16(),
            }),
        }
    }

    pub async fn download_csv(&self, interface_id: &str) -> Result<String, HarnessError> {
        let sent = self
            .authed(self.http.get(self.url(&format!("/api/interfaces/{interface_id}/messages.csv"))))
            .send()
            .await;
        let response = checked("download messages", sent, &[StatusCode::OK]).await?;
        text_body("download messages", response).await
    }

    async fn run_one(&self, interface_id: &str, script: ParticipantScript) -> Result<ScriptReport, HarnessError> {
        // participants arrive through the chat page, which carries their pid
        let page = self.chat_page(interface_id, &script.participant_id).await?;
        let page_pid = page_participant_id(&page);
        if page_pid.as_deref() != Some(script.participant_id.as_str()) {
            return Err(HarnessError::PidMismatch {
                expected: script.participant_id.clone(),
                found: page_pid,
            });
        }
        let page_participant_id = page_pid.unwrap_or_default();
        let session = self.open_session(interface_id, &page_participant_id).await?;
        let mut outcomes = Vec::with_capacity(script.turns.len());
        for turn in &script.turns {
            outcomes.push(self.send(session.session_id.as_str(), turn).await?);
        }
        Ok(ScriptReport {
            script,
            page_participant_id,
            session_id: session.session_id.to_string(),
            outcomes,
        })
    }

    /// Runs every script against an existing interface, at most
    /// `concurrency` participants at a time.
    pub async fn run_scripts(
        &self,
        interface: CreatedInterface,
        settings: InterfaceSettings,
        scripts: &[ParticipantScript],
        concurrency: usize,
    ) -> Result<RunReport, HarnessError> {
        let started = Instant::now();
        let id = interface.interface_id.to_string();
        let reports: Vec<ScriptReport> = stream::iter(scripts.iter().cloned())
            .map(|s| self.run_one(&id, s))
            .buffered(concurrency.max(1))
            .try_collect()
            .await?;
        Ok(RunReport {
            interface,
            settings,
            scripts: reports,
            elapsed: started.elapsed(),
        })
    }
}

fn uuid_like() -> String {
    g4r_core::snippet::generate_participant_id()
}

/// Signs up, creates an interface from `partial` and runs all scripts.
/// Returns the report and the signed-in client, ready to download.
pub async fn run_script(
    base_url: &str,
    scripts: &[ParticipantScript],
    partial: PartialSettings,
    concurrency: usize,
) -> Result<(RunReport, HarnessClient), HarnessError> {
    let mut client = HarnessClient::new(base_url);
    client.sign_up().await?;
    let mut partial = partial;
    if partial.study_name.is_none() {
        partial.study_name = Some("simulation".into());
    }
    let interface = client.create_interface(&partial).await?;
    let settings = apply_defaults(partial);
    let report = client.run_scripts(interface, settings, scripts, concurrency).await?;
    Ok((report, client))
}

/// Reply the echo provider is expected to give for one turn.
pub fn expected_echo(settings: &InterfaceSettings, turn: &str) -> String {
    redact_reply(settings, &format!("{ECHO_PREFIX}{}", wrap(settings, turn)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Discrepancy {
    MalformedCsv(String),
    MissingExchange { participant_id: String, seq: usize },
    OutOfOrder { participant_id: String, seq: usize },
    ReplyMismatch { participant_id: String, seq: usize, expected: String, actual: String },
    TimestampRegression { participant_id: String, seq: usize },
    /// A turn of one script exported under another participant id.
    ForeignParticipant { participant_id: String, owner: String, message: String },
    UnexpectedExchange { participant_id: String, message: String },
    CapMismatch { participant_id: String, turn: usize, detail: String },
    UpstreamFailure { participant_id: String, turn: usize, status: u16 },
    PidPropagation { participant_id: String, found: String },
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Discrepancy::*;
        match self {
            MalformedCsv(m) => write!(f, "download is not a valid message CSV: {m}"),
            MissingExchange { participant_id, seq } => {
                write!(f, "missing exchange ({participant_id}, {seq})")
            }
            OutOfOrder { participant_id, seq } => {
                write!(f, "exchange ({participant_id}, {seq}) is out of order")
            }
            ReplyMismatch { participant_id, seq, expected, actual } => write!(
                f,
                "reply for ({participant_id}, {seq}) is {actual:?}, expected {expected:?}"
            ),
            TimestampRegression { participant_id, seq } => {
                write!(f, "timestamp of ({participant_id}, {seq}) is earlier than the previous one")
            }
            ForeignParticipant { participant_id, owner, message } => write!(
                f,
                "message {message:?} of {owner} was exported under {participant_id}"
            ),
            UnexpectedExchange { participant_id, message } => {
                write!(f, "unexpected exchange for {participant_id}: {message:?}")
            }
            CapMismatch { participant_id, turn, detail } => {
                write!(f, "cap behaviour for {participant_id} at turn {turn}: {detail}")
            }
            UpstreamFailure { participant_id, turn, status } => {
                write!(f, "turn {turn} of {participant_id} failed upstream (HTTP {status})")
            }
            PidPropagation { participant_id, found } => {
                write!(f, "participant {participant_id} reached the chat as {found}")
            }
        }
    }
}

fn check_outcomes(report: &ScriptReport, settings: &InterfaceSettings, out: &mut Vec<Discrepancy>) {
    let pid = &report.script.participant_id;
    if &report.page_participant_id != pid {
        out.push(Discrepancy::PidPropagation {
            participant_id: pid.clone(),
            found: report.page_participant_id.clone(),
        });
    }
    let cap_at = report.script.expected_cap_at;
    let mut replies = 0;
    for (i, (turn, outcome)) in report.script.turns.iter().zip(&report.outcomes).enumerate() {
        let n = i + 1;
        let cap_expected = cap_at.is_some_and(|c| n >= c);
        match outcome {
            TurnOutcome::Reply { text, .. } => {
                replies += 1;
                if cap_expected {
                    out.push(Discrepancy::CapMismatch {
                        participant_id: pid.clone(),
                        turn: n,
                        detail: "expected the cap message, got a reply".into(),
                    });
                }
                let expected = expected_echo(settings, turn);
                if text != &expected {
                    out.push(Discrepancy::ReplyMismatch {
                        participant_id: pid.clone(),
                        seq: replies,
                        expected,
                        actual: text.clone(),
                    });
                }
            }
            TurnOutcome::Cap { message } => {
                if !cap_expected {
                    out.push(Discrepancy::CapMismatch {
                        participant_id: pid.clone(),
                        turn: n,
                        detail: "cap reached earlier than expected".into(),
                    });
                } else if message != CAP_REACHED_MESSAGE {
                    out.push(Discrepancy::CapMismatch {
                        participant_id: pid.clone(),
                        turn: n,
                        detail: format!("cap message was {message:?}"),
                    });
                }
            }
            TurnOutcome::UpstreamFailure { status } => out.push(Discrepancy::UpstreamFailure {
                participant_id: pid.clone(),
                turn: n,
                status: *status,
            }),
        }
    }
}

/// Compares a run with the downloaded message CSV. Every successful turn
/// must appear exactly once, in order, under its own participant id, with
/// non-decreasing timestamps and the echo reply.
pub fn verify_capture(report: &RunReport, csv_text: &str) -> Result<(), Vec<Discrepancy>> {
    let mut out = Vec::new();
    let rows = match read_export_csv(csv_text.as_bytes()) {
        Ok(rows) => rows,
        Err(e) => return Err(vec![Discrepancy::MalformedCsv(e.to_string())]),
    };

    let mut by_pid: HashMap<&str, Vec<&ExportRow>> = HashMap::new();
    for row in &rows {
        by_pid.entry(row.participant_id.as_str()).or_default().push(row);
    }
    // which script each turn text belongs to, for cross-participant checks
    let mut turn_owner: HashMap<&str, &str> = HashMap::new();
    for s in &report.scripts {
        for t in &s.script.turns {
            turn_owner.insert(t.as_str(), s.script.participant_id.as_str());
        }
    }
    let classify_extra = |pid: &str, message: &str| match turn_owner.get(message) {
        Some(owner) if *owner != pid => Discrepancy::ForeignParticipant {
            participant_id: pid.to_owned(),
            owner: (*owner).to_owned(),
            message: message.to_owned(),
        },
        _ => Discrepancy::UnexpectedExchange {
            participant_id: pid.to_owned(),
            message: message.to_owned(),
        },
    };

    for s in &report.scripts {
        check_outcomes(s, &report.settings, &mut out);
        let pid = s.script.participant_id.as_str();
        let expected: Vec<(&str, String)> = s
            .script
            .turns
            .iter()
            .zip(&s.outcomes)
            .filter(|(_, o)| matches!(o, TurnOutcome::Reply { .. }))
            .map(|(t, _)| (t.as_str(), expected_echo(&report.settings, t)))
            .collect();
        let actual = by_pid.remove(pid).unwrap_or_default();

        // pair each exported row with the earliest unused expected turn
        let mut used = vec![false; expected.len()];
        let mut assigned: Vec<(usize, &ExportRow)> = Vec::new();
        for row in &actual {
            let slot = expected
                .iter()
                .enumerate()
                .position(|(i, (turn, _))| !used[i] && *turn == row.message_to_gpt);
            match slot {
                Some(i) => {
                    used[i] = true;
                    assigned.push((i, row));
                }
                None => out.push(classify_extra(pid, &row.message_to_gpt)),
            }
        }
        for (i, u) in used.iter().enumerate() {
            if !u {
                out.push(Discrepancy::MissingExchange {
                    participant_id: pid.to_owned(),
                    seq: i + 1,
                });
            }
        }
        let mut highest: Option<usize> = None;
        let mut previous_ts: Option<DateTime<Utc>> = None;
        for (i, row) in &assigned {
            if highest.is_some_and(|h| *i < h) {
                out.push(Discrepancy::OutOfOrder {
                    participant_id: pid.to_owned(),
                    seq: i + 1,
                });
            }
            highest = Some(highest.map_or(*i, |h| h.max(*i)));
            let (_, expected_reply) = &expected[*i];
            if &row.message_from_gpt != expected_reply {
                out.push(Discrepancy::ReplyMismatch {
                    participant_id: pid.to_owned(),
                    seq: i + 1,
                    expected: expected_reply.clone(),
                    actual: row.message_from_gpt.clone(),
                });
            }
            let ts = DateTime::parse_from_rfc3339(&row.timestamp).map(|t| t.with_timezone(&Utc));
            match ts {
                Ok(ts) => {
                    if previous_ts.is_some_and(|p| ts < p) {
                        out.push(Discrepancy::TimestampRegression {
                            participant_id: pid.to_owned(),
                            seq: i + 1,
                        });
                    }
                    previous_ts = Some(ts);
                }
                Err(_) => out.push(Discrepancy::MalformedCsv(format!(
                    "timestamp {:?} of ({pid}, {}) is not ISO-8601",
                    row.timestamp,
                    i + 1
                ))),
            }
        }
    }

    // rows under ids that no script used
    let mut leftovers: Vec<_> = by_pid.into_iter().collect();
    leftovers.sort_by_key(|(pid, _)| *pid);
    for (pid, rows) in leftovers {
        for row in rows {
            out.push(classify_extra(pid, &row.message_to_gpt));
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scripts_grouped_by_participant() {
        let text = "participant_id,message,expected_cap_at\n\
                    # comment\n\
                    P1,hello,\n\
                    P2,\"a, b\",2\n\
                    P1,again,\n\
                    P2,second,\n\
                    P3,,1\n";
        let scripts = parse_scripts(text.as_bytes()).unwrap();
        assert_eq!(
            scripts,
            vec![
                ParticipantScript {
                    participant_id: "P1".into(),
                    turns: vec!["hello".into(), "again".into()],
                    expected_cap_at: None,
                },
                ParticipantScript {
                    participant_id: "P2".into(),
                    turns: vec!["a, b".into(), "second".into()],
                    expected_cap_at: Some(2),
                },
                ParticipantScript {
                    participant_id: "P3".into(),
                    turns: vec![],
                    expected_cap_at: Some(1),
                },
            ]
        );
    }

    #[test]
    fn script_errors() {
        assert!(parse_scripts("pid,message\nx,y\n".as_bytes()).is_err());
        assert!(parse_scripts("participant_id,message,expected_cap_at\nx,y,zero\n".as_bytes()).is_err());
        assert!(parse_scripts("participant_id,message,expected_cap_at\nx,y,0\n".as_bytes()).is_err());
        assert!(parse_scripts("participant_id,message\n,y\n".as_bytes()).is_err());
    }

    #[test]
    fn page_pid_is_unescaped() {
        let html = r#"<main data-interface-id="i" data-participant-id="a&amp;b&quot;c"></main>"#;
        assert_eq!(page_participant_id(html).as_deref(), Some("a&b\"c"));
        assert_eq!(page_participant_id("<main></main>"), None);
    }

    #[test]
    fn echo_expectation_wraps_and_redacts() {
        let s = apply_defaults(PartialSettings {
            prepend_text: Some("Please be concise".into()),
            ..Default::default()
        });
        assert_eq!(expected_echo(&s, "Hi"), "echo: [redacted]\nHi");
        assert_eq!(expected_echo(&InterfaceSettings::default(), "Hi"), "echo: Hi");
    }
}
