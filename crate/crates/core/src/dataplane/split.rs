use serde::{Deserialize, Serialize};

use super::SceneMeta;
use crate::{Error, Result};

/// Default biome vocabulary.
pub const DEFAULT_BIOMES: [&str; 8] = [
    "Boreal Forests/Taiga",
    "Tundra",
    "Temperate Conifer",
    "Temperate Broadleaf & Mixed",
    "Temperate Grasslands",
    "Mediterranean",
    "Deserts & Xeric Shrublands",
    "Flooded Grasslands",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Temporal,
    Biome,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub source_years: Vec<i32>,
    pub target_years: Vec<i32>,
    pub target_biomes: Vec<String>,
    pub mode: SplitMode,
    pub vocabulary: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            source_years: (2017..=2020).collect(),
            target_years: (2021..=2023).collect(),
            target_biomes: vec!["Boreal Forests/Taiga".into(), "Tundra".into()],
            mode: SplitMode::Combined,
            vocabulary: DEFAULT_BIOMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(y) = self
            .source_years
            .iter()
            .find(|y| self.target_years.contains(y))
        {
            return Err(Error::Config(format!("year {y} is both source and target")));
        }
        if let Some(b) = self
            .target_biomes
            .iter()
            .find(|b| !self.vocabulary.contains(b))
        {
            return Err(Error::Config(format!(
                "target biome {b:?} is not in the vocabulary"
            )));
        }
        Ok(())
    }

    fn is_target(&self, m: &SceneMeta) -> bool {
        let by_year = self.target_years.contains(&m.year);
        let by_biome = self.target_biomes.contains(&m.biome);
        match self.mode {
            SplitMode::Temporal => by_year,
            SplitMode::Biome => by_biome,
            SplitMode::Combined => by_year || by_biome,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub fire_id: String,
    pub year: i32,
    pub biome: String,
    pub partition: Partition,
}

/// Partition assignment for every scene, ordered by `fire_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub entries: Vec<SplitEntry>,
}

impl SplitManifest {
    pub fn ids(&self, part: Partition) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.partition == part)
            .map(|e| e.fire_id.as_str())
            .collect()
    }

    pub fn partition_of(&self, fire_id: &str) -> Option<Partition> {
        self.entries
            .binary_search_by(|e| e.fire_id.as_str().cmp(fire_id))
            .ok()
            .map(|i| self.entries[i].partition)
    }
}

/// Assigns each scene to train (source domain) or test (target domain).
pub fn build_split(scenes: &[SceneMeta], spec: &SplitSpec) -> Result<SplitManifest> {
    spec.validate()?;
    let mut sorted: Vec<&SceneMeta> = scenes.iter().collect();
    sorted.sort_by(|a, b| a.fire_id.cmp(&b.fire_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].fire_id == w[1].fire_id) {
        return Err(Error::Data(format!("duplicate fire_id {:?}", w[0].fire_id)));
    }
    let entries = sorted
        .into_iter()
        .map(|m| {
            if !spec.vocabulary.contains(&m.biome) {
                return Err(Error::Data(format!(
                    "fire {} has unknown biome {:?}; known biomes: {}",
                    m.fire_id,
                    m.biome,
                    spec.vocabulary.join(", ")
                )));
            }
            Ok(SplitEntry {
                fire_id: m.fire_id.clone(),
                year: m.year,
                biome: m.biome.clone(),
                partition: if spec.is_target(m) {
                    Partition::Test
                } else {
                    Partition::Train
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitManifest {
        mode: spec.mode,
        entries,
    })
}
