use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{trait_width, FusionScheme, TraitKey, TraitSchema};

/// How the persona vector enters the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingScheme {
    None,
    Paa,
    Pab,
    #[serde(rename = "paa+pab")]
    PaaPab,
}

impl DecodingScheme {
    pub fn uses_paa(self) -> bool {
        matches!(self, DecodingScheme::Paa | DecodingScheme::PaaPab)
    }

    pub fn uses_pab(self) -> bool {
        matches!(self, DecodingScheme::Pab | DecodingScheme::PaaPab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder output and decoder state width.
    pub hidden_dim: usize,
    pub persona_dim: usize,
    pub vocab_size: usize,
    /// Word vector width, shared by encoder and decoder inputs.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub fusion: FusionScheme,
    pub decoding: DecodingScheme,
    /// Trait keys fed to the fusion module, in canonical order.
    pub traits: Vec<TraitKey>,
    pub max_decode_len: usize,
    pub max_post_len: usize,
    pub schema: TraitSchema,
}

impl ModelConfig {
    /// Laptop-sized defaults.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            hidden_dim: 64,
            persona_dim: 32,
            vocab_size,
            embed_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            fusion: FusionScheme::Attention,
            decoding: DecodingScheme::Pab,
            traits: TraitKey::ALL.to_vec(),
            max_decode_len: 20,
            max_post_len: 40,
            schema: TraitSchema::default(),
        }
    }

    /// The full-size setting: 512-unit two-layer GRUs, 100-d word and
    /// persona vectors, 40k words.
    pub fn full() -> Self {
        ModelConfig {
            hidden_dim: 512,
            persona_dim: 100,
            vocab_size: 40_000,
            embed_dim: 100,
            ..Self::desk(40_000)
        }
    }

    pub fn with_variant(mut self, variant: &Variant) -> Self {
        self.fusion = variant.fusion;
        self.decoding = variant.decoding;
        self.traits = variant.traits.clone();
        self
    }

    pub fn trait_width(&self) -> Result<usize> {
        trait_width(self.fusion, self.persona_dim, self.traits.len())
    }

    pub fn uses_traits(&self) -> bool {
        self.decoding != DecodingScheme::None
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return fail(format!(
                "hidden_dim must be a positive even number (bidirectional halves), got {}",
                self.hidden_dim
            ));
        }
        if self.embed_dim == 0 || self.persona_dim == 0 {
            return fail("embed_dim and persona_dim must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("layer counts must be at least 1".into());
        }
        if self.vocab_size <= super::vocab::RESERVED.len() {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.max_decode_len == 0 || self.max_post_len == 0 {
            return fail("length limits must be positive".into());
        }
        let mut sorted = self.traits.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.traits {
            return fail("traits must be distinct and in canonical order (gender, age, location)".into());
        }
        if self.uses_traits() {
            self.trait_width()?;
        } else if !self.traits.is_empty() {
            return fail("traits listed but decoding scheme is `none`".into());
        }
        self.schema.validate()
    }
}

/// A named point in the experiment grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub fusion: FusionScheme,
    pub decoding: DecodingScheme,
    pub traits: Vec<TraitKey>,
}

impl Variant {
    pub fn seq2seq() -> Self {
        Variant {
            name: "seq2seq".into(),
            fusion: FusionScheme::Average,
            decoding: DecodingScheme::None,
            traits: Vec::new(),
        }
    }

    /// Gated single-trait output bias.
    pub fn glba(key: TraitKey) -> Self {
        Variant {
            name: format!("glba-{key}"),
            fusion: FusionScheme::Average,
            decoding: DecodingScheme::Pab,
            traits: vec![key],
        }
    }

    pub fn persona(fusion: FusionScheme, decoding: DecodingScheme) -> Self {
        let f = match fusion {
            FusionScheme::Attention => "att",
            FusionScheme::Average => "avg",
            FusionScheme::Concat => "concat",
        };
        let d = match decoding {
            DecodingScheme::None => "none",
            DecodingScheme::Paa => "paa",
            DecodingScheme::Pab => "pab",
            DecodingScheme::PaaPab => "paa+pab",
        };
        Variant {
            name: format!("{f}+{d}"),
            fusion,
            decoding,
            traits: TraitKey::ALL.to_vec(),
        }
    }

    /// Seq2Seq, the three single-trait baselines, and the six fusion x
    /// decoding combinations.
    pub fn default_grid() -> Vec<Variant> {
        let mut grid = vec![Variant::seq2seq()];
        grid.extend(TraitKey::ALL.map(Variant::glba));
        for decoding in [DecodingScheme::Paa, DecodingScheme::Pab] {
            for fusion in [FusionScheme::Average, FusionScheme::Concat, FusionScheme::Attention] {
                grid.push(Variant::persona(fusion, decoding));
            }
        }
        grid
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `seq2seq`, `glba-<trait>`, and `<fusion>+<decoding>` such as
    /// `att+pab`, `avg+paa` or `concat+paa+pab`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "seq2seq" {
            return Ok(Variant::seq2seq());
        }
        if let Some(key) = lower.strip_prefix("glba-") {
            return Ok(Variant::glba(key.parse()?));
        }
        let (fusion, decoding) = lower
            .split_once('+')
            .ok_or_else(|| Error::InvalidInput(format!("unrecognized variant `{s}`")))?;
        let decoding = match decoding {
            "paa" => DecodingScheme::Paa,
            "pab" => DecodingScheme::Pab,
            "paa+pab" | "pab+paa" => DecodingScheme::PaaPab,
            other => return Err(Error::InvalidInput(format!("unknown decoding scheme `{other}`"))),
        };
        Ok(Variant::persona(fusion.parse()?, decoding))
    }
}
