use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::SpeakerProfile;
use crate::error::{Error, Result};
use crate::fusion::{TraitKey, TraitSchema, TraitValues};

pub const AGE_BUCKETS: [&str; 4] = ["post-70s", "post-80s", "post-90s", "post-00s"];

/// Year used to turn a profile age into a birth year.
pub const DEFAULT_REFERENCE_YEAR: i32 = 2018;

/// Birth decade bucket; years before 1970 are excluded.
pub fn bucket_age(birth_year: i32) -> Option<&'static str> {
    match birth_year {
        ..=1969 => None,
        1970..=1979 => Some(AGE_BUCKETS[0]),
        1980..=1989 => Some(AGE_BUCKETS[1]),
        1990..=1999 => Some(AGE_BUCKETS[2]),
        _ => Some(AGE_BUCKETS[3]),
    }
}

/// The 34 provincial-level regions plus overseas.
#[rustfmt::skip]
pub const PROVINCES: [&str; 35] = [
    "Heilongjiang", "Jilin", "Liaoning",
    "Beijing", "Tianjin", "Hebei", "Inner Mongolia",
    "Henan", "Shandong", "Shanxi",
    "Shaanxi", "Gansu", "Ningxia", "Qinghai", "Xinjiang",
    "Sichuan", "Chongqing", "Yunnan", "Guizhou", "Tibet",
    "Anhui", "Jiangsu", "Hubei",
    "Shanghai", "Zhejiang",
    "Hunan", "Jiangxi",
    "Fujian", "Taiwan", "Hainan",
    "Guangdong", "Guangxi", "Hong Kong", "Macau", "Overseas",
];

/// Province to dialect-area label. Editable; the default groups provinces
/// into ten broad areas labeled `L0`..`L9`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationTable(pub BTreeMap<String, String>);

impl Default for LocationTable {
    fn default() -> Self {
        const SIZES: [usize; 10] = [3, 4, 3, 5, 5, 3, 2, 2, 3, 5];
        let mut map = BTreeMap::new();
        let mut i = 0;
        for (area, &n) in SIZES.iter().enumerate() {
            for p in &PROVINCES[i..i + n] {
                map.insert(p.to_string(), format!("L{area}"));
            }
            i += n;
        }
        LocationTable(map)
    }
}

impl LocationTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn area(&self, province: &str) -> Result<&str> {
        self.0
            .get(province)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel {
                key: "province".into(),
                label: province.into(),
            })
    }

    /// Provinces of a given area, in table order.
    pub fn provinces_of(&self, area: &str) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(_, a)| a.as_str() == area)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Every known province is covered and every area is a schema label.
    pub fn validate(&self, schema: &TraitSchema) -> Result<()> {
        let missing: Vec<&str> = PROVINCES
            .iter()
            .copied()
            .filter(|p| !self.0.contains_key(*p))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("location table misses {}", missing.join(", "))));
        }
        for area in self.0.values() {
            schema.label_index(TraitKey::Location, area)?;
        }
        Ok(())
    }
}

/// Turns raw profiles into trait label indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMapper {
    pub schema: TraitSchema,
    pub reference_year: i32,
    pub locations: LocationTable,
}

impl Default for LabelMapper {
    fn default() -> Self {
        LabelMapper {
            schema: TraitSchema::default(),
            reference_year: DEFAULT_REFERENCE_YEAR,
            locations: LocationTable::default(),
        }
    }
}

impl LabelMapper {
    pub fn age_label(&self, age: u32) -> Option<&'static str> {
        bucket_age(self.reference_year - age as i32)
    }

    pub fn location_label(&self, province: Option<&str>) -> Result<Option<&str>> {
        province.map(|p| self.locations.area(p)).transpose()
    }

    /// Missing or excluded values become `None`. A province absent from
    /// the table is an error.
    pub fn values(&self, profile: &SpeakerProfile) -> Result<TraitValues> {
        let s = &self.schema;
        let gender = profile
            .gender
            .map(|g| s.label_index(TraitKey::Gender, g.label()))
            .transpose()?;
        let age = profile
            .age
            .and_then(|a| self.age_label(a))
            .map(|l| s.label_index(TraitKey::Age, l))
            .transpose()?;
        let location = self
            .location_label(profile.location.as_deref())?
            .map(|l| s.label_index(TraitKey::Location, l))
            .transpose()?;
        Ok(TraitValues { gender, age, location })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::types::Gender;

    #[test]
    fn age_buckets() {
        assert_eq!(bucket_age(1995), Some("post-90s"));
        assert_eq!(bucket_age(1969), None);
        assert_eq!(bucket_age(2003), Some("post-00s"));
        assert_eq!(bucket_age(1970), Some("post-70s"));
        assert_eq!(bucket_age(1989), Some("post-80s"));
        assert_eq!(bucket_age(2000), Some("post-00s"));
    }

    #[test]
    fn default_table_is_complete() {
        let t = LocationTable::default();
        assert_eq!(t.0.len(), 35);
        t.validate(&TraitSchema::default()).unwrap();
        for area in TraitSchema::default().labels(TraitKey::Location) {
            assert!(!t.provinces_of(area).is_empty(), "{area}");
        }
        assert_eq!(t.area("Beijing").unwrap(), t.area("Tianjin").unwrap());
        assert!(t.area("Atlantis").is_err());

        let mut partial = t.clone();
        partial.0.remove("Tibet");
        assert!(partial.validate(&TraitSchema::default()).is_err());
    }

    #[test]
    fn profile_values() {
        let m = LabelMapper::default();
        let p = SpeakerProfile::new("x", Some(Gender::Female), Some(23), Some("Hunan".into()), 20);
        let v = m.values(&p).unwrap();
        // born 1995
        assert_eq!(v.gender, Some(1));
        assert_eq!(v.age, Some(2));
        assert_eq!(v.location, Some(7));

        let empty = SpeakerProfile::new("y", None, None, None, 20);
        assert_eq!(m.values(&empty).unwrap(), TraitValues::default());
        let bad = SpeakerProfile::new("z", None, None, Some("Atlantis".into()), 20);
        assert!(m.values(&bad).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loc.json");
        std::fs::write(&p, serde_json::to_string(&LocationTable::default()).unwrap()).unwrap();
        assert_eq!(LocationTable::load(&p).unwrap(), LocationTable::default());
    }
}
