//! Personality traits, their embedding tables, and the three ways of fusing
//! trait embeddings into one persona vector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParameterStore, Var};
use crate::seq2seq::attention::additive_scores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitKey {
    Gender,
    Age,
    Location,
}

impl TraitKey {
    /// Canonical order; concatenation fusion lays slices out in this order.
    pub const ALL: [TraitKey; 3] = [TraitKey::Gender, TraitKey::Age, TraitKey::Location];

    pub fn name(self) -> &'static str {
        match self {
            TraitKey::Gender => "gender",
            TraitKey::Age => "age",
            TraitKey::Location => "location",
        }
    }
}

impl fmt::Display for TraitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TraitKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gender" => Ok(TraitKey::Gender),
            "age" => Ok(TraitKey::Age),
            "location" | "loc" => Ok(TraitKey::Location),
            other => Err(Error::InvalidInput(format!("unknown trait key `{other}`"))),
        }
    }
}

/// A key-value trait as supplied by a caller, e.g. `(Gender, Female)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trait {
    pub key: TraitKey,
    pub value: String,
}

impl Trait {
    pub fn new(key: TraitKey, value: impl Into<String>) -> Self {
        Trait {
            key,
            value: value.into(),
        }
    }
}

/// Legal labels per trait key. Each key additionally owns an "unknown" row
/// at index `labels(key).len()`, used when a speaker left the trait empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitSchema {
    pub gender: Vec<String>,
    pub age: Vec<String>,
    pub location: Vec<String>,
}

impl Default for TraitSchema {
    fn default() -> Self {
        TraitSchema {
            gender: vec!["Male".into(), "Female".into()],
            age: ["post-70s", "post-80s", "post-90s", "post-00s"]
                .map(String::from)
                .to_vec(),
            location: (0..10).map(|i| format!("L{i}")).collect(),
        }
    }
}

impl TraitSchema {
    pub fn labels(&self, key: TraitKey) -> &[String] {
        match key {
            TraitKey::Gender => &self.gender,
            TraitKey::Age => &self.age,
            TraitKey::Location => &self.location,
        }
    }

    pub fn num_labels(&self, key: TraitKey) -> usize {
        self.labels(key).len()
    }

    /// Row index of the "unknown" embedding for `key`.
    pub fn unknown_index(&self, key: TraitKey) -> usize {
        self.num_labels(key)
    }

    pub fn label_index(&self, key: TraitKey, label: &str) -> Result<usize> {
        self.labels(key)
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                key: key.to_string(),
                label: label.to_string(),
            })
    }

    pub fn label(&self, key: TraitKey, index: usize) -> Option<&str> {
        self.labels(key).get(index).map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        for key in TraitKey::ALL {
            let labels = self.labels(key);
            if labels.is_empty() {
                return Err(Error::Config(format!("trait {key} has no labels")));
            }
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                return Err(Error::Config(format!("trait {key} repeats label `{dup}`")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: TraitSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }
}

/// Label index per trait key; `None` selects the key's unknown row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraitValues {
    pub gender: Option<usize>,
    pub age: Option<usize>,
    pub location: Option<usize>,
}

impl TraitValues {
    pub fn get(&self, key: TraitKey) -> Option<usize> {
        match key {
            TraitKey::Gender => self.gender,
            TraitKey::Age => self.age,
            TraitKey::Location => self.location,
        }
    }

    pub fn set(&mut self, key: TraitKey, value: Option<usize>) {
        match key {
            TraitKey::Gender => self.gender = value,
            TraitKey::Age => self.age = value,
            TraitKey::Location => self.location = value,
        }
    }

    pub fn with(mut self, key: TraitKey, value: Option<usize>) -> Self {
        self.set(key, value);
        self
    }

    /// Resolves caller-supplied traits. A key given twice is rejected since
    /// every modeled trait is single-valued.
    pub fn from_traits(schema: &TraitSchema, traits: &[Trait]) -> Result<Self> {
        let mut out = TraitValues::default();
        let mut seen = Vec::new();
        for t in traits {
            if seen.contains(&t.key) {
                return Err(Error::InvalidInput(format!(
                    "trait {} given more than once",
                    t.key
                )));
            }
            seen.push(t.key);
            out.set(t.key, Some(schema.label_index(t.key, &t.value)?));
        }
        Ok(out)
    }

    /// Embedding row for `key`, mapping missing values to the unknown row.
    pub fn row(&self, schema: &TraitSchema, key: TraitKey) -> usize {
        self.get(key).unwrap_or_else(|| schema.unknown_index(key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionScheme {
    Attention,
    Average,
    Concat,
}

impl FusionScheme {
    /// Whether the fused vector depends on the decoder state and must be
    /// recomputed at every step.
    pub fn is_per_step(self) -> bool {
        matches!(self, FusionScheme::Attention)
    }
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "att" | "attention" => Ok(FusionScheme::Attention),
            "avg" | "average" => Ok(FusionScheme::Average),
            "concat" | "concatenation" => Ok(FusionScheme::Concat),
            other => Err(Error::InvalidInput(format!("unknown fusion scheme `{other}`"))),
        }
    }
}

/// Width of each trait embedding under `scheme`. Concatenation splits the
/// persona width evenly, so it must divide by the trait count.
pub fn trait_width(scheme: FusionScheme, persona_dim: usize, num_traits: usize) -> Result<usize> {
    if num_traits == 0 {
        return Err(Error::Config("trait fusion needs at least one trait".into()));
    }
    match scheme {
        FusionScheme::Concat if persona_dim % num_traits != 0 => Err(Error::Config(format!(
            "persona dimension {persona_dim} is not divisible by {num_traits} traits"
        ))),
        FusionScheme::Concat => Ok(persona_dim / num_traits),
        _ => Ok(persona_dim),
    }
}

/// One lookup table per modeled trait key.
#[derive(Debug, Clone)]
pub struct TraitEmbeddings {
    keys: Vec<TraitKey>,
    tables: Vec<ParamId>,
    width: usize,
}

impl TraitEmbeddings {
    pub fn register(
        store: &mut ParameterStore,
        schema: &TraitSchema,
        keys: &[TraitKey],
        width: usize,
    ) -> Result<Self> {
        let mut tables = Vec::with_capacity(keys.len());
        for &key in keys {
            let rows = schema.num_labels(key) + 1;
            tables.push(store.register(&format!("trait.{key}.embedding"), rows, width, Init::Uniform)?);
        }
        Ok(TraitEmbeddings {
            keys: keys.to_vec(),
            tables,
            width,
        })
    }

    pub fn keys(&self) -> &[TraitKey] {
        &self.keys
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn table(&self, key: TraitKey) -> Option<ParamId> {
        self.keys
            .iter()
            .position(|&k| k == key)
            .map(|i| self.tables[i])
    }

    /// Batched lookup: one row per batch element, `[batch, width]`.
    pub fn lookup(&self, g: &mut Graph<'_>, key: TraitKey, rows: &[usize]) -> Result<Var> {
        let table = self
            .table(key)
            .ok_or_else(|| Error::InvalidInput(format!("trait {key} is not modeled")))?;
        let t = g.param(table);
        g.gather(t, rows)
    }

    /// Embeds a single labeled trait, `[1, width]`.
    pub fn embed_trait(&self, g: &mut Graph<'_>, schema: &TraitSchema, t: &Trait) -> Result<Var> {
        let row = schema.label_index(t.key, &t.value)?;
        self.lookup(g, t.key, &[row])
    }

    /// Embeddings for every modeled key, in model key order.
    pub fn embed_all(
        &self,
        g: &mut Graph<'_>,
        schema: &TraitSchema,
        values: &[TraitValues],
    ) -> Result<Vec<Var>> {
        self.keys
            .iter()
            .map(|&key| {
                let rows: Vec<usize> = values.iter().map(|v| v.row(schema, key)).collect();
                self.lookup(g, key, &rows)
            })
            .collect()
    }
}

fn require_traits(op: &str, traits: &[Var]) -> Result<()> {
    if traits.is_empty() {
        Err(Error::InvalidInput(format!("{op}: no traits to fuse")))
    } else {
        Ok(())
    }
}

/// `v_p = (1/N) sum_i v_i`.
pub fn fuse_average(g: &mut Graph<'_>, traits: &[Var]) -> Result<Var> {
    require_traits("fuse_average", traits)?;
    g.mean(traits)
}

/// `v_p = [v_1; ...; v_N]`, callers pass traits in canonical key order.
pub fn fuse_concat(g: &mut Graph<'_>, traits: &[Var]) -> Result<Var> {
    require_traits("fuse_concat", traits)?;
    g.concat_cols(traits)
}

/// Parameters of the state-conditioned trait attention.
#[derive(Debug, Clone)]
pub struct TraitAttention {
    pub w_state: ParamId,
    pub w_trait: ParamId,
    pub v: ParamId,
}

impl TraitAttention {
    pub fn register(store: &mut ParameterStore, state_dim: usize, persona_dim: usize) -> Result<Self> {
        Ok(TraitAttention {
            w_state: store.register("fusion.attention.w_state", state_dim, state_dim, Init::Uniform)?,
            w_trait: store.register("fusion.attention.w_trait", persona_dim, state_dim, Init::Uniform)?,
            v: store.register("fusion.attention.v", state_dim, 1, Init::Uniform)?,
        })
    }

    /// Scores each trait against the previous decoder state and returns the
    /// weighted sum `v_p` with the weights `[batch, N]`.
    pub fn fuse(&self, g: &mut Graph<'_>, s_prev: Var, traits: &[Var]) -> Result<(Var, Var)> {
        require_traits("fuse_attention", traits)?;
        let w_state = g.param(self.w_state);
        let w_trait = g.param(self.w_trait);
        let v = g.param(self.v);
        let query = g.matmul(s_prev, w_state)?;
        let keys = traits
            .iter()
            .map(|&t| g.matmul(t, w_trait))
            .collect::<Result<Vec<_>>>()?;
        let scores = additive_scores(g, query, &keys, v)?;
        let weights = g.softmax(scores);
        let fused = g.weighted_sum(weights, traits)?;
        Ok((fused, weights))
    }
}
