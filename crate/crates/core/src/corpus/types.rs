use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ages outside this range are stored as missing.
pub const AGE_RANGE: std::ops::RangeInclusive<u32> = 8..=48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            _ => Err(Error::InvalidInput(format!("unknown gender `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    #[serde(default)]
    pub gender: Option<Gender>,
    #[serde(default)]
    pub age: Option<u32>,
    /// Province name.
    #[serde(default)]
    pub location: Option<String>,
    #[serde(default)]
    pub level: u32,
}

impl SpeakerProfile {
    pub fn new(
        speaker_id: impl Into<String>,
        gender: Option<Gender>,
        age: Option<u32>,
        location: Option<String>,
        level: u32,
    ) -> Self {
        SpeakerProfile {
            speaker_id: speaker_id.into(),
            gender,
            age,
            location,
            level,
        }
        .normalized()
    }

    /// Clears out-of-range ages and empty locations.
    pub fn normalized(mut self) -> Self {
        self.age = self.age.filter(|a| AGE_RANGE.contains(a));
        self.location = self.location.filter(|l| !l.trim().is_empty());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker_id: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(speaker_id: impl Into<String>, tokens: Vec<String>) -> Self {
        Utterance {
            speaker_id: speaker_id.into(),
            tokens,
        }
    }
}

/// A post and one branch of its comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub utterances: Vec<Utterance>,
    pub profiles: BTreeMap<String, SpeakerProfile>,
}

impl DialogueSession {
    /// Consecutive utterances as (post, response) pairs; the response
    /// speaker's profile is attached. Utterances whose speaker has no
    /// profile are skipped.
    pub fn pairs(&self) -> Vec<PostResponsePair> {
        self.utterances
            .windows(2)
            .filter_map(|w| {
                let profile = self.profiles.get(&w[1].speaker_id)?;
                Some(PostResponsePair {
                    post_tokens: w[0].tokens.clone(),
                    response_tokens: w[1].tokens.clone(),
                    responder_profile: profile.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostResponsePair {
    pub post_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub responder_profile: SpeakerProfile,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_age_is_cleared() {
        let p = SpeakerProfile::new("a", None, Some(7), None, 20);
        assert_eq!(p.age, None);
        let p = SpeakerProfile::new("a", None, Some(49), Some(" ".into()), 20);
        assert_eq!((p.age, p.location), (None, None));
        let p = SpeakerProfile::new("a", None, Some(48), None, 20);
        assert_eq!(p.age, Some(48));
    }

    #[test]
    fn session_pairs_follow_the_branch() {
        let mut profiles = BTreeMap::new();
        profiles.insert("u1".to_string(), SpeakerProfile::new("u1", Some(Gender::Male), None, None, 20));
        profiles.insert("u2".to_string(), SpeakerProfile::new("u2", Some(Gender::Female), None, None, 20));
        let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let s = DialogueSession {
            session_id: "s".into(),
            utterances: vec![
                Utterance::new("u1", toks("a b c")),
                Utterance::new("u2", toks("d e f")),
                Utterance::new("u1", toks("g h i")),
            ],
            profiles,
        };
        let pairs = s.pairs();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].responder_profile.gender, Some(Gender::Female));
        assert_eq!(pairs[1].post_tokens, toks("d e f"));
    }

    #[test]
    fn profile_json_uses_plain_labels() {
        let p = SpeakerProfile::new("x", Some(Gender::Female), Some(22), Some("Hunan".into()), 30);
        let j = serde_json::to_string(&p).unwrap();
        assert!(j.contains("\"Female\""));
        assert_eq!(serde_json::from_str::<SpeakerProfile>(&j).unwrap(), p);
    }
}
