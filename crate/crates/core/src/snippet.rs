//! The question-script snippet researchers paste into their survey, and
//! participant id generation.
//!
//! At participant runtime the snippet draws a 16-character id, stores it in
//! the survey's `g4r_pid` embedded-data field and then either shows a green
//! button that opens the chat in a new tab or frames the chat inline. The
//! survey must declare `g4r_pid` at the top of its Survey Flow with no value,
//! so the platform keeps showing "Value will be set from Panel or URL.".

use rand::distr::{Alphanumeric, SampleString};
use thiserror::Error;
use url::Url;

use crate::model::{AccessMode, InterfaceId};

/// Name of the survey embedded-data field that carries the participant id.
pub const EMBEDDED_DATA_KEY: &str = "g4r_pid";
pub const PARTICIPANT_ID_LEN: usize = 16;
pub const BUTTON_COLOR: &str = "#28a745";
pub const BUTTON_TEXT: &str = "Click here to chat with ChatGPT";
pub const IFRAME_HEIGHT_PX: u32 = 500;

/// 16 characters from `[A-Za-z0-9]`, drawn uniformly from the thread-local
/// CSPRNG.
pub fn generate_participant_id() -> String {
    Alphanumeric.sample_string(&mut rand::rng(), PARTICIPANT_ID_LEN)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnippetError {
    #[error("service base URL must be absolute http(s): {0}")]
    BadBaseUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetTemplate {
    pub interface_id: InterfaceId,
    pub access_mode: AccessMode,
    service_base_url: String,
}

impl SnippetTemplate {
    pub fn new(
        interface_id: InterfaceId,
        access_mode: AccessMode,
        service_base_url: &str,
    ) -> Result<Self, SnippetError> {
        let parsed =
            Url::parse(service_base_url).map_err(|_| SnippetError::BadBaseUrl(service_base_url.into()))?;
        if !matches!(parsed.scheme(), "http" | "https") || parsed.cannot_be_a_base() {
            return Err(SnippetError::BadBaseUrl(service_base_url.into()));
        }
        Ok(Self {
            interface_id,
            access_mode,
            service_base_url: service_base_url.trim_end_matches('/').to_owned(),
        })
    }

    pub fn service_base_url(&self) -> &str {
        &self.service_base_url
    }

    pub fn embedded_data_key(&self) -> &'static str {
        EMBEDDED_DATA_KEY
    }

    /// `{base}/embed/{id}?pid=`; the participant id is appended at runtime.
    pub fn embed_url_prefix(&self) -> String {
        format!("{}/embed/{}?pid=", self.service_base_url, self.interface_id)
    }
}

/// Chat page URL for a given participant id.
pub fn embed_url(base_url: &str, interface: &InterfaceId, pid: &str) -> String {
    let mut url = format!("{}/embed/{}?pid=", base_url.trim_end_matches('/'), interface);
    url.extend(url::form_urlencoded::byte_serialize(pid.as_bytes()));
    url
}

fn js_string(s: &str) -> String {
    serde_json::to_string(s)
        .expect("strings always serialize")
        .replace("</", "<\\/")
}

/// Renders the question script. Pure: the same template always yields the
/// same text.
pub fn generate_snippet(t: &SnippetTemplate) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "// Paste into the question's JavaScript editor, replacing the default code.\n\
         // Requires an Embedded Data field named \"{EMBEDDED_DATA_KEY}\" (no value set) at the top of the Survey Flow.\n\
         Qualtrics.SurveyEngine.addOnload(function () {{\n\
         \x20 var PID_KEY = {key};\n\
         \x20 var CHAT_URL = {url};\n\
         \x20 var ALPHABET = \"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789\";\n\
         \x20 function newParticipantId() {{\n\
         \x20   var id = \"\";\n\
         \x20   var buf = new Uint8Array(1);\n\
         \x20   while (id.length < {len}) {{\n\
         \x20     window.crypto.getRandomValues(buf);\n\
         \x20     if (buf[0] < 248) {{ id += ALPHABET.charAt(buf[0] % 62); }}\n\
         \x20   }}\n\
         \x20   return id;\n\
         \x20 }}\n\
         \x20 var pid = Qualtrics.SurveyEngine.getEmbeddedData(PID_KEY);\n\
         \x20 if (!pid) {{\n\
         \x20   pid = newParticipantId();\n\
         \x20 }}\n\
         \x20 Qualtrics.SurveyEngine.setEmbeddedData(PID_KEY, pid);\n\
         \x20 var url = CHAT_URL + encodeURIComponent(pid);\n\
         \x20 var container = this.getQuestionContainer();\n",
        key = js_string(EMBEDDED_DATA_KEY),
        url = js_string(&t.embed_url_prefix()),
        len = PARTICIPANT_ID_LEN,
    ));
    match t.access_mode {
        AccessMode::NewTab => out.push_str(&format!(
            "\x20 var button = document.createElement(\"button\");\n\
             \x20 button.type = \"button\";\n\
             \x20 button.className = \"g4r-open-chat\";\n\
             \x20 button.textContent = {text};\n\
             \x20 button.style.cssText = \"background-color: {BUTTON_COLOR}; color: #ffffff; border: none; \
             border-radius: 6px; padding: 14px 28px; font-size: 18px; font-weight: bold; cursor: pointer;\";\n\
             \x20 button.addEventListener(\"click\", function () {{\n\
             \x20   window.open(url, \"_blank\");\n\
             \x20 }});\n\
             \x20 container.appendChild(button);\n",
            text = js_string(BUTTON_TEXT),
        )),
        AccessMode::Embedded => out.push_str(&format!(
            "\x20 var frame = document.createElement(\"iframe\");\n\
             \x20 frame.src = url;\n\
             \x20 frame.title = \"Chat\";\n\
             \x20 frame.style.width = \"100%\";\n\
             \x20 frame.style.height = \"{IFRAME_HEIGHT_PX}px\";\n\
             \x20 frame.style.border = \"1px solid #d0d0d0\";\n\
             \x20 container.appendChild(frame);\n",
        )),
    }
    out.push_str("});\n");
    out
}
