//! Durable storage for accounts, interfaces, participant sessions and
//! message exchanges, backed by a single SQLite file.
//!
//! Schema (all timestamps are integer milliseconds since the Unix epoch):
//!
//! | table                  | key                         | notes                                   |
//! |------------------------|-----------------------------|-----------------------------------------|
//! | `accounts`             | `id`                        | `email` unique, lower-cased; PHC hash   |
//! | `auth_tokens`          | `token_hash` (SHA-256 hex)  | bearer tokens are never stored raw      |
//! | `interfaces`           | `id`                        | one column per creation question        |
//! | `participant_sessions` | `id`                        | unique `(interface_id, participant_id)` |
//! | `exchanges`            | `(session_id, seq)`         | `upstream_*` are audit columns          |
//!
//! Writes go through one connection guarded by a mutex. File-backed stores
//! serve reads from a pool of WAL reader connections so reads never wait on
//! each other.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};

use argon2::password_hash::rand_core::OsRng;
use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::RngCore;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row, TransactionBehavior};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    now_millis, AccessMode, InterfaceConfig, InterfaceId, InterfaceSettings, MessageExchange,
    ParticipantSession, ResearcherAccount, ResearcherId, SessionId, Temperature,
};

pub const MIN_PASSWORD_CHARS: usize = 8;
pub const GUEST_RETENTION_DAYS: i64 = 30;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found")]
    NotFound,
    #[error("an account with this email already exists")]
    DuplicateEmail,
    #[error("password must be at least {MIN_PASSWORD_CHARS} characters")]
    WeakPassword,
    #[error("email address is not valid")]
    InvalidEmail,
    #[error("participant id must not be empty")]
    EmptyParticipantId,
    #[error("invalid email or password")]
    AuthFailed,
    #[error("exchange seq {got} does not follow {expected_prev}")]
    SequenceGap { expected_prev: u32, got: u32 },
    #[error("session already holds its maximum of {0} exchanges")]
    CapReached(u32),
    #[error("password hashing failed: {0}")]
    Hash(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS accounts (
    id              TEXT PRIMARY KEY,
    display_name    TEXT NOT NULL,
    email           TEXT NOT NULL UNIQUE,
    password_hash   TEXT NOT NULL,
    created_at      INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS auth_tokens (
    token_hash      TEXT PRIMARY KEY,
    researcher_id   TEXT NOT NULL REFERENCES accounts(id),
    expires_at      INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS interfaces (
    id                  TEXT PRIMARY KEY,
    owner_id            TEXT REFERENCES accounts(id),
    created_at          INTEGER NOT NULL,
    study_name          TEXT NOT NULL,
    access_mode         TEXT NOT NULL,
    max_messages        INTEGER NOT NULL,
    participant_label   TEXT NOT NULL,
    gpt_label           TEXT NOT NULL,
    system_prompt       TEXT,
    first_message       TEXT,
    temperature         TEXT NOT NULL,
    prepend_text        TEXT,
    append_text         TEXT,
    api_key             TEXT,
    top_html            TEXT
);
CREATE INDEX IF NOT EXISTS interfaces_owner ON interfaces(owner_id, created_at);
CREATE TABLE IF NOT EXISTS participant_sessions (
    id              TEXT PRIMARY KEY,
    interface_id    TEXT NOT NULL REFERENCES interfaces(id),
    participant_id  TEXT NOT NULL,
    messages_sent   INTEGER NOT NULL DEFAULT 0,
    started_at      INTEGER NOT NULL,
    UNIQUE (interface_id, participant_id)
);
CREATE TABLE IF NOT EXISTS exchanges (
    session_id          TEXT NOT NULL REFERENCES participant_sessions(id),
    seq                 INTEGER NOT NULL,
    participant_message TEXT NOT NULL,
    gpt_message         TEXT NOT NULL,
    upstream_text       TEXT,
    upstream_reply      TEXT,
    exchanged_at        INTEGER NOT NULL,
    PRIMARY KEY (session_id, seq)
);
"#;

/// Listing entry for a researcher's home page.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct InterfaceSummary {
    pub interface_id: InterfaceId,
    pub study_name: String,
    pub created_at: DateTime<Utc>,
}

/// An exchange together with the participant it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantExchange {
    pub participant_id: String,
    pub exchange: MessageExchange,
}

/// A reply ready to be persisted; the store assigns `seq` and the timestamp.
#[derive(Debug, Clone)]
pub struct NewExchange<'a> {
    pub participant_message: &'a str,
    pub gpt_message: &'a str,
    /// Text actually sent upstream for this turn (after prepend/append).
    pub upstream_text: Option<&'a str>,
    /// Reply as the provider returned it, before any redaction.
    pub upstream_reply: Option<&'a str>,
}

pub struct Store {
    writer: Mutex<Connection>,
    readers: Option<ReaderPool>,
}

struct ReaderPool {
    path: PathBuf,
    idle: Mutex<Vec<Connection>>,
}

enum ReadConn<'a> {
    Pooled(&'a ReaderPool, Option<Connection>),
    Writer(MutexGuard<'a, Connection>),
}

impl std::ops::Deref for ReadConn<'_> {
    type Target = Connection;

    fn deref(&self) -> &Connection {
        match self {
            ReadConn::Pooled(_, conn) => conn.as_ref().expect("connection present until drop"),
            ReadConn::Writer(guard) => guard,
        }
    }
}

impl Drop for ReadConn<'_> {
    fn drop(&mut self) {
        if let ReadConn::Pooled(pool, conn) = self {
            if let Some(conn) = conn.take() {
                pool.idle.lock().unwrap().push(conn);
            }
        }
    }
}

fn to_millis(ts: DateTime<Utc>) -> i64 {
    ts.timestamp_millis()
}

fn from_millis(ms: i64) -> Result<DateTime<Utc>> {
    Utc.timestamp_millis_opt(ms)
        .single()
        .ok_or_else(|| StoreError::Corrupt(format!("timestamp {ms} out of range")))
}

fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn normalize_email(email: &str) -> Result<String> {
    let email = email.trim().to_lowercase();
    let (local, domain) = email.split_once('@').ok_or(StoreError::InvalidEmail)?;
    let valid = !local.is_empty()
        && !domain.contains('@')
        && domain.contains('.')
        && !domain.starts_with('.')
        && !domain.ends_with('.')
        && !email.chars().any(char::is_whitespace);
    if valid {
        Ok(email)
    } else {
        Err(StoreError::InvalidEmail)
    }
}

fn hash_password(password: &str) -> Result<String> {
    let salt = SaltString::generate(&mut OsRng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| StoreError::Hash(e.to_string()))
}

fn password_matches(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash)
        .map(|parsed| {
            Argon2::default()
                .verify_password(password.as_bytes(), &parsed)
                .is_ok()
        })
        .unwrap_or(false)
}

/// Hash checked against when the email is unknown, so both failure paths do
/// the same work.
fn decoy_hash() -> &'static str {
    static DECOY: OnceLock<String> = OnceLock::new();
    DECOY.get_or_init(|| {
        let mut bytes = [0u8; 24];
        rand::rng().fill_bytes(&mut bytes);
        hash_password(&hex::encode(bytes)).expect("argon2 with default params")
    })
}

fn account_from_row(row: &Row<'_>) -> rusqlite::Result<(ResearcherAccount, i64)> {
    Ok((
        ResearcherAccount {
            researcher_id: ResearcherId::from(row.get::<_, String>(0)?),
            display_name: row.get(1)?,
            email: row.get(2)?,
            password_hash: row.get(3)?,
            created_at: DateTime::<Utc>::MIN_UTC,
        },
        row.get(4)?,
    ))
}

fn finish_account((mut account, created): (ResearcherAccount, i64)) -> Result<ResearcherAccount> {
    account.created_at = from_millis(created)?;
    Ok(account)
}

const ACCOUNT_COLUMNS: &str = "id, display_name, email, password_hash, created_at";
const INTERFACE_COLUMNS: &str = "id, owner_id, created_at, study_name, access_mode, max_messages, \
     participant_label, gpt_label, system_prompt, first_message, temperature, prepend_text, \
     append_text, api_key, top_html";
const SESSION_COLUMNS: &str = "id, interface_id, participant_id, messages_sent, started_at";

fn interface_from_row(row: &Row<'_>) -> Result<InterfaceConfig> {
    let access_mode: String = row.get(4)?;
    let temperature: String = row.get(10)?;
    Ok(InterfaceConfig {
        interface_id: InterfaceId::from(row.get::<_, String>(0)?),
        owner_id: row.get::<_, Option<String>>(1)?.map(ResearcherId::from),
        created_at: from_millis(row.get(2)?)?,
        settings: InterfaceSettings {
            study_name: row.get(3)?,
            access_mode: access_mode
                .parse::<AccessMode>()
                .map_err(StoreError::Corrupt)?,
            max_messages: row.get(5)?,
            participant_label: row.get(6)?,
            gpt_label: row.get(7)?,
            system_prompt: row.get(8)?,
            first_message: row.get(9)?,
            temperature: temperature
                .parse::<Temperature>()
                .map_err(StoreError::Corrupt)?,
            prepend_text: row.get(11)?,
            append_text: row.get(12)?,
            api_key: row.get(13)?,
            top_html: row.get(14)?,
        },
    })
}

fn session_from_row(row: &Row<'_>) -> Result<ParticipantSession> {
    Ok(ParticipantSession {
        session_id: SessionId::from(row.get::<_, String>(0)?),
        interface_id: InterfaceId::from(row.get::<_, String>(1)?),
        participant_id: row.get(2)?,
        messages_sent: row.get(3)?,
        started_at: from_millis(row.get(4)?)?,
    })
}

impl Store {
    /// Opens (creating if needed) the database file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let writer = Connection::open(&path)?;
        writer.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(&writer)?;
        Ok(Self {
            writer: Mutex::new(writer),
            readers: Some(ReaderPool {
                path,
                idle: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn open_in_memory() -> Result<Self> {
        let writer = Connection::open_in_memory()?;
        Self::init(&writer)?;
        Ok(Self {
            writer: Mutex::new(writer),
            readers: None,
        })
    }

    fn init(conn: &Connection) -> Result<()> {
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.pragma_update(None, "foreign_keys", true)?;
        conn.execute_batch(SCHEMA)?;
        Ok(())
    }

    fn write(&self) -> MutexGuard<'_, Connection> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn read(&self) -> Result<ReadConn<'_>> {
        match &self.readers {
            None => Ok(ReadConn::Writer(self.write())),
            Some(pool) => {
                let conn = pool.idle.lock().unwrap().pop();
                let conn = match conn {
                    Some(conn) => conn,
                    None => {
                        let conn = Connection::open_with_flags(
                            &pool.path,
                            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
                        )?;
                        conn.busy_timeout(std::time::Duration::from_secs(5))?;
                        conn
                    }
                };
                Ok(ReadConn::Pooled(pool, Some(conn)))
            }
        }
    }

    // ---- accounts -------------------------------------------------------

    pub fn create_account(
        &self,
        display_name: &str,
        email: &str,
        password: &str,
    ) -> Result<ResearcherAccount> {
        let email = normalize_email(email)?;
        if password.chars().count() < MIN_PASSWORD_CHARS {
            return Err(StoreError::WeakPassword);
        }
        let account = ResearcherAccount {
            researcher_id: ResearcherId::generate(),
            display_name: display_name.trim().to_owned(),
            email,
            password_hash: hash_password(password)?,
            created_at: now_millis(),
        };
        let inserted = self.write().execute(
            "INSERT INTO accounts (id, display_name, email, password_hash, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5) ON CONFLICT(email) DO NOTHING",
            params![
                account.researcher_id.as_str(),
                account.display_name,
                account.email,
                account.password_hash,
                to_millis(account.created_at),
            ],
        )?;
        if inserted == 0 {
            return Err(StoreError::DuplicateEmail);
        }
        Ok(account)
    }

    /// Unknown email and wrong password both yield [`StoreError::AuthFailed`]
    /// after an equivalent hash verification.
    pub fn verify_credentials(&self, email: &str, password: &str) -> Result<ResearcherAccount> {
        let email = email.trim().to_lowercase();
        let found = self
            .read()?
            .query_row(
                &format!("SELECT {ACCOUNT_COLUMNS} FROM accounts WHERE email = ?1"),
                [&email],
                account_from_row,
            )
            .optional()?;
        match found {
            Some(row) if password_matches(password, &row.0.password_hash) => finish_account(row),
            Some(_) => Err(StoreError::AuthFailed),
            None => {
                let _ = password_matches(password, decoy_hash());
                Err(StoreError::AuthFailed)
            }
        }
    }

    pub fn get_account(&self, id: &ResearcherId) -> Result<ResearcherAccount> {
        let row = self
            .read()?
            .query_row(
                &format!("SELECT {ACCOUNT_COLUMNS} FROM accounts WHERE id = ?1"),
                [id.as_str()],
                account_from_row,
            )
            .optional()?
            .ok_or(StoreError::NotFound)?;
        finish_account(row)
    }

    /// Issues an opaque bearer token valid for `ttl`. Only its SHA-256 is
    /// persisted.
    pub fn issue_token(
        &self,
        researcher: &ResearcherId,
        ttl: Duration,
    ) -> Result<(String, DateTime<Utc>)> {
        let mut bytes = [0u8; 32];
        rand::rng().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        let expires_at = now_millis() + ttl;
        let conn = self.write();
        conn.execute(
            "DELETE FROM auth_tokens WHERE expires_at <= ?1",
            [to_millis(now_millis())],
        )?;
        conn.execute(
            "INSERT INTO auth_tokens (token_hash, researcher_id, expires_at) VALUES (?1, ?2, ?3)",
            params![hash_token(&token), researcher.as_str(), to_millis(expires_at)],
        )?;
        Ok((token, expires_at))
    }

    /// Returns the account owning an unexpired token.
    pub fn resolve_token(&self, token: &str) -> Result<Option<ResearcherAccount>> {
        let row = self
            .read()?
            .query_row(
                &format!(
                    "SELECT a.id, a.display_name, a.email, a.password_hash, a.created_at
                     FROM auth_tokens t JOIN accounts a ON a.id = t.researcher_id
                     WHERE t.token_hash = ?1 AND t.expires_at > ?2"
                ),
                params![hash_token(token), to_millis(Utc::now())],
                account_from_row,
            )
            .optional()?;
        row.map(finish_account).transpose()
    }

    // ---- interfaces -----------------------------------------------------

    pub fn save_interface(&self, cfg: &InterfaceConfig) -> Result<InterfaceId> {
        let s = &cfg.settings;
        self.write().execute(
            &format!(
                "INSERT INTO interfaces ({INTERFACE_COLUMNS})
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15)"
            ),
            params![
                cfg.interface_id.as_str(),
                cfg.owner_id.as_ref().map(ResearcherId::as_str),
                to_millis(cfg.created_at),
                s.study_name,
                s.access_mode.as_str(),
                s.max_messages,
                s.participant_label,
                s.gpt_label,
                s.system_prompt,
                s.first_message,
                s.temperature.as_entered(),
                s.prepend_text,
                s.append_text,
                s.api_key,
                s.top_html,
            ],
        )?;
        Ok(cfg.interface_id.clone())
    }

    pub fn get_interface(&self, id: &InterfaceId) -> Result<InterfaceConfig> {
        let conn = self.read()?;
        let mut stmt =
            conn.prepare_cached(&format!("SELECT {INTERFACE_COLUMNS} FROM interfaces WHERE id = ?1"))?;
        let mut rows = stmt.query([id.as_str()])?;
        match rows.next()? {
            Some(row) => interface_from_row(row),
            None => Err(StoreError::NotFound),
        }
    }

    /// Interfaces owned by `researcher`, newest first.
    pub fn list_interfaces(&self, researcher: &ResearcherId) -> Result<Vec<InterfaceSummary>> {
        let conn = self.read()?;
        let mut stmt = conn.prepare_cached(
            "SELECT id, study_name, created_at FROM interfaces WHERE owner_id = ?1
             ORDER BY created_at DESC, rowid DESC",
        )?;
        let rows = stmt.query_map([researcher.as_str()], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, i64>(2)?,
            ))
        })?;
        rows.map(|r| {
            let (id, study_name, created) = r?;
            Ok(InterfaceSummary {
                interface_id: id.into(),
                study_name,
                created_at: from_millis(created)?,
            })
        })
        .collect()
    }

    /// Deletes guest interfaces (and their transcripts) created before
    /// `cutoff`. Returns how many interfaces were removed.
    pub fn purge_guest_interfaces(&self, cutoff: DateTime<Utc>) -> Result<usize> {
        let mut conn = self.write();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let stale = "SELECT id FROM interfaces WHERE owner_id IS NULL AND created_at < ?1";
        tx.execute(
            &format!(
                "DELETE FROM exchanges WHERE session_id IN
                 (SELECT id FROM participant_sessions WHERE interface_id IN ({stale}))"
            ),
            [to_millis(cutoff)],
        )?;
        tx.execute(
            &format!("DELETE FROM participant_sessions WHERE interface_id IN ({stale})"),
            [to_millis(cutoff)],
        )?;
        let removed = tx.execute(
            "DELETE FROM interfaces WHERE owner_id IS NULL AND created_at < ?1",
            [to_millis(cutoff)],
        )?;
        tx.commit()?;
        Ok(removed)
    }

    // ---- sessions -------------------------------------------------------

    /// Returns the session for `(interface, participant_id)`, creating it on
    /// first use.
    pub fn open_session(
        &self,
        interface: &InterfaceId,
        participant_id: &str,
    ) -> Result<ParticipantSession> {
        if participant_id.is_empty() {
            return Err(StoreError::EmptyParticipantId);
        }
        let mut conn = self.write();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let exists: bool = tx
            .query_row(
                "SELECT 1 FROM interfaces WHERE id = ?1",
                [interface.as_str()],
                |_| Ok(true),
            )
            .optional()?
            .unwrap_or(false);
        if !exists {
            return Err(StoreError::NotFound);
        }
        tx.execute(
            "INSERT INTO participant_sessions (id, interface_id, participant_id, messages_sent, started_at)
             VALUES (?1, ?2, ?3, 0, ?4) ON CONFLICT(interface_id, participant_id) DO NOTHING",
            params![
                SessionId::generate().as_str(),
                interface.as_str(),
                participant_id,
                to_millis(now_millis()),
            ],
        )?;
        let session = {
            let mut stmt = tx.prepare_cached(&format!(
                "SELECT {SESSION_COLUMNS} FROM participant_sessions
                 WHERE interface_id = ?1 AND participant_id = ?2"
            ))?;
            let mut rows = stmt.query(params![interface.as_str(), participant_id])?;
            let row = rows.next()?.ok_or(StoreError::NotFound)?;
            session_from_row(row)?
        };
        tx.commit()?;
        Ok(session)
    }

    pub fn get_session(&self, id: &SessionId) -> Result<ParticipantSession> {
        let conn = self.read()?;
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {SESSION_COLUMNS} FROM participant_sessions WHERE id = ?1"
        ))?;
        let mut rows = stmt.query([id.as_str()])?;
        match rows.next()? {
            Some(row) => session_from_row(row),
            None => Err(StoreError::NotFound),
        }
    }

    // ---- exchanges ------------------------------------------------------

    /// Appends an exchange whose `seq` must directly follow the session's
    /// last one. Increments the session's `messages_sent`.
    pub fn append_exchange(&self, x: &MessageExchange) -> Result<()> {
        let mut conn = self.write();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let last = last_seq(&tx, &x.session_id)?;
        if x.seq != last + 1 {
            return Err(StoreError::SequenceGap {
                expected_prev: last,
                got: x.seq,
            });
        }
        insert_exchange(&tx, x, None, None)?;
        tx.commit()?;
        Ok(())
    }

    /// Assigns the next `seq` and a timestamp, then persists the exchange,
    /// refusing if the session already holds `cap` exchanges. Timestamps
    /// never go backwards within a session even if the wall clock does.
    pub fn record_exchange(
        &self,
        session: &SessionId,
        new: NewExchange<'_>,
        cap: u32,
    ) -> Result<MessageExchange> {
        let mut conn = self.write();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let last = last_seq(&tx, session)?;
        if last >= cap {
            return Err(StoreError::CapReached(cap));
        }
        let previous_at: Option<i64> = tx
            .query_row(
                "SELECT MAX(exchanged_at) FROM exchanges WHERE session_id = ?1",
                [session.as_str()],
                |r| r.get(0),
            )
            .optional()?
            .flatten();
        let now = now_millis();
        let exchanged_at = match previous_at {
            Some(prev) if prev > to_millis(now) => from_millis(prev)?,
            _ => now,
        };
        let exchange = MessageExchange {
            session_id: session.clone(),
            seq: last + 1,
            participant_message: new.participant_message.to_owned(),
            gpt_message: new.gpt_message.to_owned(),
            exchanged_at,
        };
        insert_exchange(&tx, &exchange, new.upstream_text, new.upstream_reply)?;
        tx.commit()?;
        Ok(exchange)
    }

    /// Exchanges of one session in `seq` order.
    pub fn session_history(&self, session: &SessionId) -> Result<Vec<MessageExchange>> {
        let conn = self.read()?;
        let mut stmt = conn.prepare_cached(
            "SELECT session_id, seq, participant_message, gpt_message, exchanged_at
             FROM exchanges WHERE session_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([session.as_str()], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, u32>(1)?,
                row.get::<_, String>(2)?,
                row.get::<_, String>(3)?,
                row.get::<_, i64>(4)?,
            ))
        })?;
        rows.map(|r| {
            let (sid, seq, pm, gm, at) = r?;
            Ok(MessageExchange {
                session_id: sid.into(),
                seq,
                participant_message: pm,
                gpt_message: gm,
                exchanged_at: from_millis(at)?,
            })
        })
        .collect()
    }

    /// All exchanges under an interface, grouped by participant in the order
    /// participants first exchanged a message, each group in `seq` order.
    pub fn fetch_exchanges(&self, interface: &InterfaceId) -> Result<Vec<ParticipantExchange>> {
        let conn = self.read()?;
        let mut stmt = conn.prepare_cached(
            "SELECT s.participant_id, e.session_id, e.seq, e.participant_message,
                    e.gpt_message, e.exchanged_at
             FROM exchanges e
             JOIN participant_sessions s ON s.id = e.session_id
             JOIN (SELECT session_id, MIN(rowid) AS first_row FROM exchanges GROUP BY session_id) f
               ON f.session_id = e.session_id
             WHERE s.interface_id = ?1
             ORDER BY f.first_row, e.seq",
        )?;
        let rows = stmt.query_map([interface.as_str()], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, u32>(2)?,
                row.get::<_, String>(3)?,
                row.get::<_, String>(4)?,
                row.get::<_, i64>(5)?,
            ))
        })?;
        rows.map(|r| {
            let (pid, sid, seq, pm, gm, at) = r?;
            Ok(ParticipantExchange {
                participant_id: pid,
                exchange: MessageExchange {
                    session_id: sid.into(),
                    seq,
                    participant_message: pm,
                    gpt_message: gm,
                    exchanged_at: from_millis(at)?,
                },
            })
        })
        .collect()
    }

    /// Every row of every table rendered as text, for audits and tests that
    /// scan storage for secrets.
    pub fn dump(&self) -> Result<String> {
        let conn = self.write();
        let mut out = String::new();
        for table in [
            "accounts",
            "auth_tokens",
            "interfaces",
            "participant_sessions",
            "exchanges",
        ] {
            out.push_str(&format!("-- {table}\n"));
            let mut stmt = conn.prepare(&format!("SELECT * FROM {table}"))?;
            let width = stmt.column_count();
            let mut rows = stmt.query([])?;
            while let Some(row) = rows.next()? {
                let cells: Vec<String> = (0..width)
                    .map(|i| match row.get_ref(i) {
                        Ok(v) => match v {
                            rusqlite::types::ValueRef::Null => "NULL".to_owned(),
                            rusqlite::types::ValueRef::Integer(n) => n.to_string(),
                            rusqlite::types::ValueRef::Real(f) => f.to_string(),
                            rusqlite::types::ValueRef::Text(t) | rusqlite::types::ValueRef::Blob(t) => {
                                String::from_utf8_lossy(t).into_owned()
                            }
                        },
                        Err(_) => String::new(),
                    })
                    .collect();
                out.push_str(&cells.join("|"));
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Folds the WAL back into the main database file.
    pub fn checkpoint(&self) -> Result<()> {
        self.write()
            .execute_batch("PRAGMA wal_checkpoint(TRUNCATE);")?;
        Ok(())
    }
}

fn last_seq(conn: &Connection, session: &SessionId) -> Result<u32> {
    let exists: Option<bool> = conn
        .query_row(
            "SELECT 1 FROM participant_sessions WHERE id = ?1",
            [session.as_str()],
            |_| Ok(true),
        )
        .optional()?;
    if exists.is_none() {
        return Err(StoreError::NotFound);
    }
    Ok(conn.query_row(
        "SELECT COALESCE(MAX(seq), 0) FROM exchanges WHERE session_id = ?1",
        [session.as_str()],
        |r| r.get(0),
    )?)
}

fn insert_exchange(
    conn: &Connection,
    x: &MessageExchange,
    upstream_text: Option<&str>,
    upstream_reply: Option<&str>,
) -> Result<()> {
    conn.execute(
        "INSERT INTO exchanges (session_id, seq, participant_message, gpt_message, upstream_text,
                                upstream_reply, exchanged_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![
            x.session_id.as_str(),
            x.seq,
            x.participant_message,
            x.gpt_message,
            upstream_text,
            upstream_reply,
            to_millis(x.exchanged_at),
        ],
    )?;
    conn.execute(
        "UPDATE participant_sessions SET messages_sent = messages_sent + 1 WHERE id = ?1",
        [x.session_id.as_str()],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_defaults, PartialSettings};

    fn config(owner: Option<&ResearcherId>, name: &str) -> InterfaceConfig {
        let settings = apply_defaults(PartialSettings {
            study_name: Some(name.into()),
            ..Default::default()
        });
        InterfaceConfig::new(settings, owner.cloned())
    }

    fn exchange(session: &SessionId, seq: u32) -> MessageExchange {
        MessageExchange {
            session_id: session.clone(),
            seq,
            participant_message: format!("u{seq}"),
            gpt_message: format!("r{seq}"),
            exchanged_at: now_millis(),
        }
    }

    #[test]
    fn account_creation_hashes_the_password() {
        let store = Store::open_in_memory().unwrap();
        let acct = store
            .create_account("Jin", "a@b.edu", "hunter2secret")
            .unwrap();
        assert!(acct.password_hash.starts_with("$argon2"));
        let dump = store.dump().unwrap();
        assert!(dump.contains("a@b.edu"));
        assert!(!dump.contains("hunter2secret"));
    }

    #[test]
    fn account_rules() {
        let store = Store::open_in_memory().unwrap();
        store.create_account("A", "a@b.edu", "longenough").unwrap();
        assert!(matches!(
            store.create_account("B", " A@B.EDU ", "longenough"),
            Err(StoreError::DuplicateEmail)
        ));
        assert!(matches!(
            store.create_account("C", "c@b.edu", "short"),
            Err(StoreError::WeakPassword)
        ));
        for bad in ["nobody", "@b.edu", "a@b", "a b@c.d", "a@@b.edu"] {
            assert!(
                matches!(
                    store.create_account("D", bad, "longenough"),
                    Err(StoreError::InvalidEmail)
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn credentials_verify_and_fail_uniformly() {
        let store = Store::open_in_memory().unwrap();
        let acct = store.create_account("A", "a@b.edu", "correct horse").unwrap();
        let ok = store.verify_credentials("A@b.edu", "correct horse").unwrap();
        assert_eq!(ok.researcher_id, acct.researcher_id);
        let wrong = store.verify_credentials("a@b.edu", "wrong horse").unwrap_err();
        let unknown = store.verify_credentials("x@b.edu", "correct horse").unwrap_err();
        assert_eq!(wrong.to_string(), unknown.to_string());
        assert!(matches!(wrong, StoreError::AuthFailed));
        assert!(matches!(unknown, StoreError::AuthFailed));
    }

    #[test]
    fn tokens_resolve_until_expiry() {
        let store = Store::open_in_memory().unwrap();
        let acct = store.create_account("A", "a@b.edu", "longenough").unwrap();
        let (token, _) = store
            .issue_token(&acct.researcher_id, Duration::hours(24))
            .unwrap();
        assert_eq!(
            store.resolve_token(&token).unwrap().unwrap().researcher_id,
            acct.researcher_id
        );
        assert!(!store.dump().unwrap().contains(&token));
        let (expired, _) = store
            .issue_token(&acct.researcher_id, Duration::milliseconds(-1))
            .unwrap();
        assert!(store.resolve_token(&expired).unwrap().is_none());
        assert!(store.resolve_token("bogus").unwrap().is_none());
    }

    #[test]
    fn interface_round_trip() {
        let store = Store::open_in_memory().unwrap();
        let mut cfg = config(None, "guest-x");
        cfg.settings.temperature = "0.70".parse().unwrap();
        cfg.settings.system_prompt = Some("sys".into());
        cfg.settings.first_message = None;
        cfg.settings.api_key = Some("sk-1".into());
        cfg.settings.access_mode = AccessMode::Embedded;
        let id = store.save_interface(&cfg).unwrap();
        let back = store.get_interface(&id).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.settings.temperature.as_entered(), "0.70");
        assert!(matches!(
            store.get_interface(&InterfaceId::from("nope")),
            Err(StoreError::NotFound)
        ));
    }

    #[test]
    fn listing_is_scoped_and_newest_first() {
        let store = Store::open_in_memory().unwrap();
        let a = store.create_account("A", "a@b.edu", "longenough").unwrap();
        let b = store.create_account("B", "b@b.edu", "longenough").unwrap();
        assert!(store.list_interfaces(&a.researcher_id).unwrap().is_empty());

        let base = now_millis();
        for (i, name) in ["one", "two", "three"].iter().enumerate() {
            let mut cfg = config(Some(&a.researcher_id), name);
            cfg.created_at = base + Duration::seconds(i as i64);
            store.save_interface(&cfg).unwrap();
        }
        store
            .save_interface(&config(Some(&b.researcher_id), "other"))
            .unwrap();
        store.save_interface(&config(None, "guest")).unwrap();

        let names: Vec<_> = store
            .list_interfaces(&a.researcher_id)
            .unwrap()
            .into_iter()
            .map(|s| s.study_name)
            .collect();
        assert_eq!(names, ["three", "two", "one"]);
        assert_eq!(store.list_interfaces(&b.researcher_id).unwrap().len(), 1);
    }

    #[test]
    fn sessions_are_idempotent_per_participant() {
        let store = Store::open_in_memory().unwrap();
        let cfg = config(None, "s");
        store.save_interface(&cfg).unwrap();
        let first = store.open_session(&cfg.interface_id, "ABC").unwrap();
        let again = store.open_session(&cfg.interface_id, "ABC").unwrap();
        let other = store.open_session(&cfg.interface_id, "XYZ").unwrap();
        assert_eq!(first.session_id, again.session_id);
        assert_ne!(first.session_id, other.session_id);
        assert_eq!(first.messages_sent, 0);
        assert!(matches!(
            store.open_session(&cfg.interface_id, ""),
            Err(StoreError::EmptyParticipantId)
        ));
        assert!(matches!(
            store.open_session(&InterfaceId::from("missing"), "ABC"),
            Err(StoreError::NotFound)
        ));
    }

    #[test]
    fn append_enforces_contiguous_seq() {
        let store = Store::open_in_memory().unwrap();
        let cfg = config(None, "s");
        store.save_interface(&cfg).unwrap();
        let s = store.open_session(&cfg.interface_id, "ABC").unwrap();
        store.append_exchange(&exchange(&s.session_id, 1)).unwrap();
        assert!(matches!(
            store.append_exchange(&exchange(&s.session_id, 3)),
            Err(StoreError::SequenceGap {
                expected_prev: 1,
                got: 3
            })
        ));
        store.append_exchange(&exchange(&s.session_id, 2)).unwrap();
        let rows = store.fetch_exchanges(&cfg.interface_id).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].exchange.seq, 1);
        assert_eq!(rows[1].exchange.seq, 2);
        assert_eq!(store.get_session(&s.session_id).unwrap().messages_sent, 2);
    }

    #[test]
    fn record_respects_cap_and_assigns_seq() {
        let store = Store::open_in_memory().unwrap();
        let cfg = config(None, "s");
        store.save_interface(&cfg).unwrap();
        let s = store.open_session(&cfg.interface_id, "ABC").unwrap();
        let new = NewExchange {
            participant_message: "hi",
            gpt_message: "echo: hi",
            upstream_text: Some("wrapped hi"),
            upstream_reply: Some("echo: wrapped hi"),
        };
        let first = store.record_exchange(&s.session_id, new.clone(), 2).unwrap();
        let second = store.record_exchange(&s.session_id, new.clone(), 2).unwrap();
        assert_eq!((first.seq, second.seq), (1, 2));
        assert!(second.exchanged_at >= first.exchanged_at);
        assert!(matches!(
            store.record_exchange(&s.session_id, new, 2),
            Err(StoreError::CapReached(2))
        ));
    }

    #[test]
    fn fetch_groups_by_first_seen_participant() {
        let store = Store::open_in_memory().unwrap();
        let cfg = config(None, "s");
        store.save_interface(&cfg).unwrap();
        let b = store.open_session(&cfg.interface_id, "B").unwrap();
        let a = store.open_session(&cfg.interface_id, "A").unwrap();
        store.append_exchange(&exchange(&b.session_id, 1)).unwrap();
        store.append_exchange(&exchange(&a.session_id, 1)).unwrap();
        store.append_exchange(&exchange(&b.session_id, 2)).unwrap();
        let order: Vec<_> = store
            .fetch_exchanges(&cfg.interface_id)
            .unwrap()
            .into_iter()
            .map(|r| (r.participant_id, r.exchange.seq))
            .collect();
        assert_eq!(
            order,
            [("B".to_owned(), 1), ("B".to_owned(), 2), ("A".to_owned(), 1)]
        );
    }

    #[test]
    fn guest_purge_removes_only_old_guest_data() {
        let store = Store::open_in_memory().unwrap();
        let owner = store.create_account("A", "a@b.edu", "longenough").unwrap();
        let mut old_guest = config(None, "old");
        old_guest.created_at = now_millis() - Duration::days(GUEST_RETENTION_DAYS + 1);
        let mut old_owned = config(Some(&owner.researcher_id), "kept");
        old_owned.created_at = old_guest.created_at;
        let fresh_guest = config(None, "fresh");
        for cfg in [&old_guest, &old_owned, &fresh_guest] {
            store.save_interface(cfg).unwrap();
        }
        let s = store.open_session(&old_guest.interface_id, "P").unwrap();
        store.append_exchange(&exchange(&s.session_id, 1)).unwrap();

        let cutoff = now_millis() - Duration::days(GUEST_RETENTION_DAYS);
        assert_eq!(store.purge_guest_interfaces(cutoff).unwrap(), 1);
        assert!(store.get_interface(&old_guest.interface_id).is_err());
        assert!(store.get_interface(&old_owned.interface_id).is_ok());
        assert!(store.get_interface(&fresh_guest.interface_id).is_ok());
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g4r.db");
        let (cfg, acct, before) = {
            let store = Store::open(&path).unwrap();
            let acct = store.create_account("A", "a@b.edu", "longenough").unwrap();
            let cfg = config(Some(&acct.researcher_id), "durable");
            store.save_interface(&cfg).unwrap();
            let s = store.open_session(&cfg.interface_id, "ABC").unwrap();
            store.append_exchange(&exchange(&s.session_id, 1)).unwrap();
            let before = store.fetch_exchanges(&cfg.interface_id).unwrap();
            (cfg, acct, before)
        };
        let store = Store::open(&path).unwrap();
        assert_eq!(store.get_interface(&cfg.interface_id).unwrap(), cfg);
        assert_eq!(store.fetch_exchanges(&cfg.interface_id).unwrap(), before);
        assert_eq!(
            store.get_account(&acct.researcher_id).unwrap(),
            acct
        );
        assert_eq!(
            store.list_interfaces(&acct.researcher_id).unwrap().len(),
            1
        );
    }
}
