use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::DialogueSession;
use crate::error::{Error, Result};

/// Why a session was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    TooFewUtterances,
    MissingProfile,
    TooShort,
    TooLong,
    Abusive,
    LowLevel,
    Mention,
}

impl DiscardReason {
    pub fn code(self) -> &'static str {
        match self {
            DiscardReason::TooFewUtterances => "too_few_utterances",
            DiscardReason::MissingProfile => "missing_profile",
            DiscardReason::TooShort => "too_short",
            DiscardReason::TooLong => "too_long",
            DiscardReason::Abusive => "abusive",
            DiscardReason::LowLevel => "low_level",
            DiscardReason::Mention => "mention",
        }
    }
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard(DiscardReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_level: u32,
    #[serde(default)]
    pub abusive: BTreeSet<String>,
    /// Tokens starting with this prefix count as references to other users.
    pub mention_prefix: String,
    /// Runs of symbol-only tokens longer than this are cut down to this
    /// many by [`clean_tokens`].
    pub max_symbol_run: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_tokens: 3,
            max_tokens: 40,
            min_level: 15,
            abusive: BTreeSet::new(),
            mention_prefix: "@".into(),
            max_symbol_run: 3,
        }
    }
}

impl FilterRules {
    /// Reads an abusive-word list: one word per line, `#` starts a comment.
    pub fn load_abusive(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.abusive.extend(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(String::from),
        );
        Ok(())
    }
}

/// A token made only of punctuation and symbols (emoji included).
pub fn is_symbol_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace())
}

/// Shortens runs of symbol-only tokens to at most `max_run` tokens.
pub fn clean_tokens(tokens: &[String], max_run: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut run = 0;
    for t in tokens {
        if is_symbol_token(t) {
            run += 1;
            if run > max_run {
                continue;
            }
        } else {
            run = 0;
        }
        out.push(t.clone());
    }
    out
}

/// Checks applied in order; the first failing rule names the reason.
pub fn filter_session(session: &DialogueSession, rules: &FilterRules) -> Verdict {
    use DiscardReason::*;
    if session.utterances.len() < 2 {
        return Verdict::Discard(TooFewUtterances);
    }
    if session
        .utterances
        .iter()
        .any(|u| !session.profiles.contains_key(&u.speaker_id))
    {
        return Verdict::Discard(MissingProfile);
    }
    for u in &session.utterances {
        if u.tokens.len() < rules.min_tokens {
            return Verdict::Discard(TooShort);
        }
        if u.tokens.len() > rules.max_tokens {
            return Verdict::Discard(TooLong);
        }
    }
    let tokens = || session.utterances.iter().flat_map(|u| u.tokens.iter());
    if tokens().any(|t| rules.abusive.contains(t)) {
        return Verdict::Discard(Abusive);
    }
    if session
        .utterances
        .iter()
        .any(|u| session.profiles[&u.speaker_id].level < rules.min_level)
    {
        return Verdict::Discard(LowLevel);
    }
    if !rules.mention_prefix.is_empty() && tokens().any(|t| t.starts_with(&rules.mention_prefix)) {
        return Verdict::Discard(Mention);
    }
    Verdict::Keep
}
