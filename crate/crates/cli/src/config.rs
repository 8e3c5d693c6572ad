//! Run configuration: one TOML file with `model`, `lora`, `data`, `train`
//! and `infer` sections, plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use burnmap::dataplane::{QaThresholds, ScarParams, SplitSpec};
use burnmap::{BandNorm, Error, HeadConfig, LoraSpec, ModelConfig, Result, TrainConfig, ViTConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Encoder preset that `vit` keys are layered over.
    pub preset: String,
    pub vit: ViTConfig,
    pub head: HeadConfig,
    pub norm: BandNorm,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            vit: ViTConfig::tiny(),
            head: HeadConfig::default(),
            norm: BandNorm::default(),
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vit: self.vit.clone(),
            head: self.head.clone(),
            norm: self.norm.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    /// Split manifest; defaults to `split.json` inside `dir`.
    pub split_file: Option<PathBuf>,
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub patch_stride: usize,
    pub apply_qa: bool,
    pub scar: ScarParams,
    pub qa: QaThresholds,
    pub split: SplitSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            split_file: None,
            seed: 0,
            count: 64,
            height: 128,
            width: 128,
            patch_stride: 128,
            apply_qa: true,
            scar: ScarParams::default(),
            qa: QaThresholds::default(),
            split: SplitSpec::default(),
        }
    }
}

impl DataSection {
    pub fn split_path(&self) -> PathBuf {
        self.split_file
            .clone()
            .unwrap_or_else(|| self.dir.join("split.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Must equal the model input size when given.
    pub window: Option<usize>,
    pub stride: usize,
    /// Load a checkpoint whose configuration hash differs from this config.
    pub force: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            out_dir: "predictions".into(),
            window: None,
            stride: 32,
            force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub lora: LoraSpec,
    pub data: DataSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    /// Carried in the `train` table of the file.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

const OUT_DIR_KEY: &str = "out_dir";

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        Self::from_table(user)
    }

    pub fn from_table(mut user: Table) -> Result<Self> {
        let out_dir = match take_key(&mut user, &["train", OUT_DIR_KEY]) {
            Some(Value::String(s)) => PathBuf::from(s),
            Some(v) => {
                return Err(Error::Config(format!(
                    "train.out_dir must be a string, got {v}"
                )))
            }
            None => PathBuf::from("runs/default"),
        };
        let preset = match get_key(&user, &["model", "preset"]) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => {
                return Err(Error::Config(format!(
                    "model.preset must be a string, got {v}"
                )))
            }
            None => "tiny".into(),
        };
        let base_vit = Value::try_from(ViTConfig::preset(&preset)?)
            .map_err(|e| Error::Config(format!("preset does not serialise: {e}")))?;
        let mut merged = Table::new();
        merged.insert(
            "model".into(),
            Value::Table(Table::from_iter([("vit".to_string(), base_vit)])),
        );
        merge(&mut merged, user);
        let mut cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.out_dir = out_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.config().validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        self.data.scar.validate(self.data.height, self.data.width)?;
        self.data.split.validate()?;
        if self.data.patch_stride == 0 || self.data.patch_stride > self.model.vit.img_size {
            return Err(Error::Config(format!(
                "data.patch_stride must lie in 1..={}",
                self.model.vit.img_size
            )));
        }
        if let Some(w) = self.infer.window {
            if w != self.model.vit.img_size {
                return Err(Error::Config(format!(
                    "infer.window {w} must equal model input size {}",
                    self.model.vit.img_size
                )));
            }
        }
        self.tile_job().validate()
    }

    pub fn tile_job(&self) -> burnmap::TileJob {
        burnmap::TileJob {
            window: self.model.vit.img_size,
            stride: self.infer.stride,
        }
    }

    /// The effective configuration as TOML, loadable by [`RunConfig::load`].
    pub fn to_toml(&self) -> String {
        let mut t = Table::try_from(self).expect("config serialises");
        if let Some(Value::Table(train)) = t.get_mut("train") {
            train.insert(
                OUT_DIR_KEY.into(),
                Value::String(self.out_dir.display().to_string()),
            );
        }
        toml::to_string(&t).expect("table serialises")
    }
}

fn get_key<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, init) = path.split_last()?;
    let mut cur = t;
    for k in init {
        cur = cur.get(*k)?.as_table()?;
    }
    cur.get(*last)
}

fn take_key(t: &mut Table, path: &[&str]) -> Option<Value> {
    let (last, init) = path.split_last()?;
    let mut cur = t;
    for k in init {
        cur = cur.get_mut(*k)?.as_table_mut()?;
    }
    cur.remove(*last)
}

/// Deep merge; tables combine key by key, anything else is replaced.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it
/// parses as one, otherwise as a bare string.
pub fn apply_override(t: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, init) = path.split_last().expect("non-empty");
    let mut cur = t;
    for k in init {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
