//! Shared domain types and the interface configuration (the twelve creation
//! questions), with defaulting and validation.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use uuid::Uuid;

pub const DEFAULT_PARTICIPANT_LABEL: &str = "You";
pub const DEFAULT_GPT_LABEL: &str = "ChatGPT";
pub const DEFAULT_FIRST_MESSAGE: &str = "What can I help with?";
pub const DEFAULT_TEMPERATURE: &str = "1.0";
pub const DEFAULT_MAX_MESSAGES: i64 = 20;

pub const STUDY_NAME_MAX_CHARS: usize = 300;
pub const LABEL_MAX_CHARS: usize = 100;
pub const MAX_MESSAGES_LIMIT: i64 = 1000;
pub const TEMPERATURE_MIN: f64 = 0.0;
pub const TEMPERATURE_MAX: f64 = 2.0;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn generate() -> Self {
                Self(Uuid::new_v4().simple().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

id_newtype!(
    /// Identifies one created chat interface.
    InterfaceId
);
id_newtype!(
    /// Identifies a researcher account.
    ResearcherId
);
id_newtype!(
    /// Identifies one participant's conversation under one interface.
    SessionId
);

/// Current time truncated to millisecond precision, which is what the store
/// and the export format can represent.
pub fn now_millis() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    /// A button in the survey question opens the chat in a new browser tab.
    #[default]
    NewTab,
    /// The chat is framed inline inside the survey question.
    Embedded,
}

impl AccessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessMode::NewTab => "new_tab",
            AccessMode::Embedded => "embedded",
        }
    }
}

impl FromStr for AccessMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "new_tab" => Ok(AccessMode::NewTab),
            "embedded" => Ok(AccessMode::Embedded),
            other => Err(format!("unknown access mode `{other}`")),
        }
    }
}

/// Sampling temperature that remembers the text it was entered as.
///
/// Equality and bounds checks use the numeric value; `as_entered` gives back
/// the original spelling (`"0.70"` stays `"0.70"`).
#[derive(Debug, Clone)]
pub struct Temperature {
    value: f64,
    text: String,
}

impl Temperature {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn as_entered(&self) -> &str {
        &self.text
    }

    pub fn from_value(value: f64) -> Self {
        let mut text = value.to_string();
        if value.is_finite() && !text.contains(['.', 'e', 'E']) {
            text.push_str(".0");
        }
        Self { value, text }
    }

    pub fn in_bounds(&self) -> bool {
        (TEMPERATURE_MIN..=TEMPERATURE_MAX).contains(&self.value)
    }
}

impl Default for Temperature {
    fn default() -> Self {
        DEFAULT_TEMPERATURE.parse().expect("default temperature parses")
    }
}

impl PartialEq for Temperature {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl FromStr for Temperature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let value: f64 = trimmed
            .parse()
            .map_err(|_| format!("`{s}` is not a number"))?;
        if !value.is_finite() {
            return Err(format!("`{s}` is not a finite number"));
        }
        Ok(Self {
            value,
            text: trimmed.to_owned(),
        })
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value)
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Visitor;

        impl de::Visitor<'_> for Visitor {
            type Value = Temperature;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or numeric string")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Temperature, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Temperature, E> {
                Ok(Temperature::from_value(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Temperature, E> {
                Ok(Temperature::from_value(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Temperature, E> {
                Ok(Temperature::from_value(v as f64))
            }
        }

        deserializer.deserialize_any(Visitor)
    }
}

/// The answers to the twelve creation questions, with defaults applied.
///
/// Values may still be out of range; run [`InterfaceSettings::validate`]
/// before persisting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSettings {
    pub study_name: String,
    pub access_mode: AccessMode,
    pub max_messages: i64,
    pub participant_label: String,
    pub gpt_label: String,
    pub system_prompt: Option<String>,
    pub first_message: Option<String>,
    pub temperature: Temperature,
    pub prepend_text: Option<String>,
    pub append_text: Option<String>,
    pub api_key: Option<String>,
    pub top_html: Option<String>,
}

/// Whatever subset of the creation form the researcher filled in.
///
/// `None` means "not supplied" and receives the default. For
/// `first_message`, an empty string means the researcher cleared the
/// prefilled text, which leaves the interface without an opening turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialSettings {
    pub study_name: Option<String>,
    pub access_mode: Option<AccessMode>,
    pub max_messages: Option<i64>,
    pub participant_label: Option<String>,
    pub gpt_label: Option<String>,
    pub system_prompt: Option<String>,
    pub first_message: Option<String>,
    pub temperature: Option<Temperature>,
    pub prepend_text: Option<String>,
    pub append_text: Option<String>,
    pub api_key: Option<String>,
    pub top_html: Option<String>,
}

fn non_empty(value: Option<String>) -> Option<String> {
    value.filter(|s| !s.is_empty())
}

/// Fills every unsupplied field with its default. Never fails; validation is
/// a separate step.
pub fn apply_defaults(partial: PartialSettings) -> InterfaceSettings {
    InterfaceSettings {
        study_name: partial.study_name.unwrap_or_default(),
        access_mode: partial.access_mode.unwrap_or_default(),
        max_messages: partial.max_messages.unwrap_or(DEFAULT_MAX_MESSAGES),
        participant_label: partial
            .participant_label
            .unwrap_or_else(|| DEFAULT_PARTICIPANT_LABEL.to_owned()),
        gpt_label: partial
            .gpt_label
            .unwrap_or_else(|| DEFAULT_GPT_LABEL.to_owned()),
        system_prompt: non_empty(partial.system_prompt),
        first_message: match partial.first_message {
            None => Some(DEFAULT_FIRST_MESSAGE.to_owned()),
            Some(text) => non_empty(Some(text)),
        },
        temperature: partial.temperature.unwrap_or_default(),
        prepend_text: non_empty(partial.prepend_text),
        append_text: non_empty(partial.append_text),
        api_key: non_empty(partial.api_key),
        top_html: non_empty(partial.top_html),
    }
}

impl From<InterfaceSettings> for PartialSettings {
    fn from(s: InterfaceSettings) -> Self {
        PartialSettings {
            study_name: Some(s.study_name),
            access_mode: Some(s.access_mode),
            max_messages: Some(s.max_messages),
            participant_label: Some(s.participant_label),
            gpt_label: Some(s.gpt_label),
            system_prompt: s.system_prompt,
            // absent must survive a second pass as "cleared", not "unsupplied"
            first_message: Some(s.first_message.unwrap_or_default()),
            temperature: Some(s.temperature),
            prepend_text: s.prepend_text,
            append_text: s.append_text,
            api_key: s.api_key,
            top_html: s.top_html,
        }
    }
}

impl Default for InterfaceSettings {
    fn default() -> Self {
        apply_defaults(PartialSettings::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Participant,
    Gpt,
}

impl Label {
    pub fn field(self) -> &'static str {
        match self {
            Label::Participant => "participant_label",
            Label::Gpt => "gpt_label",
        }
    }
}

/// One violated constraint on one field.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum FieldError {
    #[error("study_name is required")]
    StudyNameEmpty,
    #[error("study_name is {chars} characters long; the limit is {max}")]
    StudyNameTooLong { chars: usize, max: usize },
    #[error("max_messages is {value}; it must be between 0 and {max}")]
    MaxMessagesOutOfRange { value: i64, max: i64 },
    #[error("temperature is {value}; it must be between 0.0 and 2.0 inclusive")]
    TemperatureOutOfRange { value: f64 },
    #[error("{} must not be empty", .label.field())]
    EmptyLabel { label: Label },
    #[error("{} is {chars} characters long; the limit is {max}", .label.field())]
    LabelTooLong {
        label: Label,
        chars: usize,
        max: usize,
    },
}

impl FieldError {
    pub fn field(&self) -> &'static str {
        match self {
            FieldError::StudyNameEmpty | FieldError::StudyNameTooLong { .. } => "study_name",
            FieldError::MaxMessagesOutOfRange { .. } => "max_messages",
            FieldError::TemperatureOutOfRange { .. } => "temperature",
            FieldError::EmptyLabel { label } | FieldError::LabelTooLong { label, .. } => {
                label.field()
            }
        }
    }
}

/// All field errors found in one configuration.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid interface configuration: {}", summary(.0))]
pub struct ValidationErrors(pub Vec<FieldError>);

fn summary(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl InterfaceSettings {
    /// Returns the settings unchanged when every constraint holds, otherwise
    /// one error per violated constraint.
    pub fn validate(self) -> Result<InterfaceSettings, ValidationErrors> {
        let mut errors = Vec::new();

        let chars = self.study_name.chars().count();
        if chars == 0 {
            errors.push(FieldError::StudyNameEmpty);
        } else if chars > STUDY_NAME_MAX_CHARS {
            errors.push(FieldError::StudyNameTooLong {
                chars,
                max: STUDY_NAME_MAX_CHARS,
            });
        }

        if !(0..=MAX_MESSAGES_LIMIT).contains(&self.max_messages) {
            errors.push(FieldError::MaxMessagesOutOfRange {
                value: self.max_messages,
                max: MAX_MESSAGES_LIMIT,
            });
        }

        if !self.temperature.in_bounds() {
            errors.push(FieldError::TemperatureOutOfRange {
                value: self.temperature.value(),
            });
        }

        for (label, text) in [
            (Label::Participant, &self.participant_label),
            (Label::Gpt, &self.gpt_label),
        ] {
            let chars = text.chars().count();
            if text.trim().is_empty() {
                errors.push(FieldError::EmptyLabel { label });
            } else if chars > LABEL_MAX_CHARS {
                errors.push(FieldError::LabelTooLong {
                    label,
                    chars,
                    max: LABEL_MAX_CHARS,
                });
            }
        }

        if errors.is_empty() {
            Ok(self)
        } else {
            Err(ValidationErrors(errors))
        }
    }

    /// Validated maximum as an unsigned count. Only meaningful after
    /// [`validate`](Self::validate) succeeded.
    pub fn message_cap(&self) -> u32 {
        self.max_messages.clamp(0, MAX_MESSAGES_LIMIT) as u32
    }
}

/// Study name given to interfaces created without an account.
pub fn guest_study_name(created_at: DateTime<Utc>) -> String {
    format!("guest-{}", format_timestamp(created_at))
}

/// ISO-8601 UTC with millisecond precision, e.g. `2025-03-01T09:30:00.125Z`.
pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

/// One created interface: its settings plus identity and ownership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceConfig {
    pub interface_id: InterfaceId,
    pub owner_id: Option<ResearcherId>,
    pub created_at: DateTime<Utc>,
    #[serde(flatten)]
    pub settings: InterfaceSettings,
}

impl InterfaceConfig {
    pub fn new(settings: InterfaceSettings, owner_id: Option<ResearcherId>) -> Self {
        Self {
            interface_id: InterfaceId::generate(),
            owner_id,
            created_at: now_millis(),
            settings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResearcherAccount {
    pub researcher_id: ResearcherId,
    pub display_name: String,
    pub email: String,
    #[serde(skip)]
    pub password_hash: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParticipantSession {
    pub session_id: SessionId,
    pub interface_id: InterfaceId,
    pub participant_id: String,
    pub messages_sent: u32,
    pub started_at: DateTime<Utc>,
}

/// One participant message and the reply it received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageExchange {
    pub session_id: SessionId,
    pub seq: u32,
    /// Exactly what the participant typed, without prepend/append text.
    pub participant_message: String,
    pub gpt_message: String,
    pub exchanged_at: DateTime<Utc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn named(partial: PartialSettings) -> InterfaceSettings {
        apply_defaults(PartialSettings {
            study_name: Some("study".into()),
            ..partial
        })
    }

    #[test]
    fn empty_partial_gets_documented_defaults() {
        let s = apply_defaults(PartialSettings::default());
        assert_eq!(s.participant_label, "You");
        assert_eq!(s.gpt_label, "ChatGPT");
        assert_eq!(s.first_message.as_deref(), Some("What can I help with?"));
        assert_eq!(s.temperature.value(), 1.0);
        assert_eq!(s.temperature.as_entered(), "1.0");
        assert_eq!(s.access_mode, AccessMode::NewTab);
        assert_eq!(s.max_messages, 20);
        assert_eq!(s.system_prompt, None);
        assert_eq!(s.prepend_text, None);
        assert_eq!(s.append_text, None);
        assert_eq!(s.api_key, None);
        assert_eq!(s.top_html, None);
    }

    #[test]
    fn custom_labels_are_kept() {
        let s = apply_defaults(PartialSettings {
            participant_label: Some("Valued Customer".into()),
            gpt_label: Some("AI Customer Representative".into()),
            ..Default::default()
        });
        assert_eq!(s.participant_label, "Valued Customer");
        assert_eq!(s.gpt_label, "AI Customer Representative");
        let defaults = InterfaceSettings::default();
        assert_eq!(
            InterfaceSettings {
                participant_label: defaults.participant_label.clone(),
                gpt_label: defaults.gpt_label.clone(),
                ..s
            },
            defaults
        );
    }

    #[test]
    fn explicit_default_temperature_matches_unsupplied() {
        let explicit = apply_defaults(PartialSettings {
            temperature: Some(Temperature::from_value(1.0)),
            ..Default::default()
        });
        assert_eq!(explicit, InterfaceSettings::default());
    }

    #[test]
    fn cleared_first_message_means_no_opening_turn() {
        let s = apply_defaults(PartialSettings {
            first_message: Some(String::new()),
            system_prompt: Some(String::new()),
            ..Default::default()
        });
        assert_eq!(s.first_message, None);
        assert_eq!(s.system_prompt, None);
    }

    #[test]
    fn temperature_keeps_entered_text() {
        let t: Temperature = "0.70".parse().unwrap();
        assert_eq!(t.as_entered(), "0.70");
        assert_eq!(t, Temperature::from_value(0.7));
        let json: Temperature = serde_json::from_str("\"0.70\"").unwrap();
        assert_eq!(json.as_entered(), "0.70");
        let num: Temperature = serde_json::from_str("2").unwrap();
        assert_eq!(num.value(), 2.0);
        assert!("abc".parse::<Temperature>().is_err());
        assert!("NaN".parse::<Temperature>().is_err());
    }

    #[test]
    fn temperature_bounds() {
        for ok in ["0.0", "1.0", "2.0", "0", "2"] {
            let s = named(PartialSettings {
                temperature: Some(ok.parse().unwrap()),
                ..Default::default()
            });
            assert!(s.validate().is_ok(), "{ok} should pass");
        }
        for bad in ["-0.1", "2.1", "2.5"] {
            let s = named(PartialSettings {
                temperature: Some(bad.parse().unwrap()),
                ..Default::default()
            });
            let err = s.validate().unwrap_err();
            assert!(matches!(
                err.0.as_slice(),
                [FieldError::TemperatureOutOfRange { .. }]
            ));
        }
    }

    #[test]
    fn max_messages_bounds() {
        for ok in [0, 1, 999, 1000] {
            let s = named(PartialSettings {
                max_messages: Some(ok),
                ..Default::default()
            });
            assert!(s.validate().is_ok());
        }
        for bad in [-1, 1001] {
            let s = named(PartialSettings {
                max_messages: Some(bad),
                ..Default::default()
            });
            assert_eq!(
                s.validate().unwrap_err().0,
                vec![FieldError::MaxMessagesOutOfRange {
                    value: bad,
                    max: 1000
                }]
            );
        }
    }

    #[test]
    fn study_name_boundaries() {
        for (len, ok) in [(299, true), (300, true), (301, false)] {
            let s = apply_defaults(PartialSettings {
                study_name: Some("x".repeat(len)),
                ..Default::default()
            });
            assert_eq!(s.validate().is_ok(), ok, "length {len}");
        }
        // characters, not bytes
        let s = apply_defaults(PartialSettings {
            study_name: Some("é".repeat(300)),
            ..Default::default()
        });
        assert!(s.validate().is_ok());
        let err = InterfaceSettings::default().validate().unwrap_err();
        assert_eq!(err.0, vec![FieldError::StudyNameEmpty]);
    }

    #[test]
    fn every_violation_is_reported() {
        let s = apply_defaults(PartialSettings {
            study_name: Some("y".repeat(301)),
            max_messages: Some(-1),
            temperature: Some("3.0".parse().unwrap()),
            participant_label: Some(String::new()),
            gpt_label: Some("g".repeat(101)),
            ..Default::default()
        });
        let fields: Vec<_> = s
            .validate()
            .unwrap_err()
            .0
            .iter()
            .map(FieldError::field)
            .collect();
        assert_eq!(
            fields,
            [
                "study_name",
                "max_messages",
                "temperature",
                "participant_label",
                "gpt_label"
            ]
        );
    }

    #[test]
    fn guest_name_uses_creation_time() {
        let ts = DateTime::parse_from_rfc3339("2025-03-01T09:30:00.125Z")
            .unwrap()
            .with_timezone(&Utc);
        assert_eq!(guest_study_name(ts), "guest-2025-03-01T09:30:00.125Z");
    }

    fn arb_partial() -> impl Strategy<Value = PartialSettings> {
        let text = || proptest::option::of(".{0,12}");
        (
            (
                text(),
                proptest::option::of(prop_oneof![
                    Just(AccessMode::NewTab),
                    Just(AccessMode::Embedded)
                ]),
                proptest::option::of(-5i64..1100),
                text(),
                text(),
                text(),
            ),
            (
                text(),
                proptest::option::of(-1.0f64..3.0),
                text(),
                text(),
                text(),
                text(),
            ),
        )
            .prop_map(|((sn, am, mm, pl, gl, sp), (fm, t, pre, app, key, html))| {
                PartialSettings {
                    study_name: sn,
                    access_mode: am,
                    max_messages: mm,
                    participant_label: pl,
                    gpt_label: gl,
                    system_prompt: sp,
                    first_message: fm,
                    temperature: t.map(Temperature::from_value),
                    prepend_text: pre,
                    append_text: app,
                    api_key: key,
                    top_html: html,
                }
            })
    }

    proptest! {
        #[test]
        fn apply_defaults_is_idempotent(partial in arb_partial()) {
            let once = apply_defaults(partial);
            let twice = apply_defaults(once.clone().into());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn validate_never_mutates(partial in arb_partial()) {
            let settings = apply_defaults(partial);
            match settings.clone().validate() {
                Ok(v) => prop_assert_eq!(v, settings),
                Err(e) => prop_assert!(!e.0.is_empty()),
            }
        }
    }
}
