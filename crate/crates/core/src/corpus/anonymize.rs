use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::text::delexicalize_tokens;
use super::types::{DialogueSession, Utterance};

/// Replaces speaker and session identifiers with salted digests and
/// delexicalizes every utterance.
#[derive(Debug, Clone)]
pub struct Anonymizer {
    salt: String,
}

impl Anonymizer {
    pub fn new(salt: impl Into<String>) -> Self {
        Anonymizer { salt: salt.into() }
    }

    pub fn from_seed(seed: u64) -> Self {
        Anonymizer::new(format!("seed-{seed}"))
    }

    fn digest(&self, kind: &str, raw: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.salt.as_bytes());
        h.update([0]);
        h.update(kind.as_bytes());
        h.update([0]);
        h.update(raw.as_bytes());
        hex::encode(&h.finalize()[..10])
    }

    pub fn speaker_id(&self, raw: &str) -> String {
        format!("u{}", self.digest("speaker", raw))
    }

    pub fn session_id(&self, raw: &str) -> String {
        format!("s{}", self.digest("session", raw))
    }

    pub fn anonymize(&self, session: &DialogueSession) -> DialogueSession {
        let utterances = session
            .utterances
            .iter()
            .map(|u| Utterance::new(self.speaker_id(&u.speaker_id), delexicalize_tokens(&u.tokens)))
            .collect();
        let profiles: BTreeMap<_, _> = session
            .profiles
            .iter()
            .map(|(id, p)| {
                let masked = self.speaker_id(id);
                let mut p = p.clone();
                p.speaker_id = masked.clone();
                (masked, p)
            })
            .collect();
        DialogueSession {
            session_id: self.session_id(&session.session_id),
            utterances,
            profiles,
        }
    }
}
