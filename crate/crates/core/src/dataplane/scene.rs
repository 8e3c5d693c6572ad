use std::path::Path;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::hex;
use crate::{Error, Result};

pub const BARC_MAGIC: &str = "BARC1";
/// Band order of every scene: red, near infrared, shortwave infrared.
pub const BANDS: [&str; 3] = ["B4", "B8", "B12"];

/// Binary `[H x W]` label or prediction map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "mask of {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        let m = Self {
            height,
            width,
            data,
        };
        m.validate_binary()?;
        Ok(m)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn validate_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(i) => Err(Error::Data(format!(
                "mask value {} at pixel {i} is outside {{0,1}}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }
}

/// Quality-assessment coverage fractions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Qa {
    pub cloud_frac: f64,
    pub snow_frac: f64,
    pub missing_frac: f64,
}

/// One fire event with co-registered pre/post imagery and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterScene {
    pub fire_id: String,
    pub year: i32,
    pub biome: String,
    /// `[3 x H x W]` reflectance in `[0, 1]`, bands ordered as [`BANDS`].
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub mask: Mask,
    pub qa: Qa,
    pub area_ha: f64,
}

/// The fields a split needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub fire_id: String,
    pub year: i32,
    pub biome: String,
}

impl RasterScene {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            fire_id: self.fire_id.clone(),
            year: self.year,
            biome: self.biome.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, t) in [("pre", &self.pre), ("post", &self.post)] {
            if t.shape() != [BANDS.len(), h, w] {
                return Err(Error::Data(format!(
                    "{name} bands {:?} do not match mask {h}x{w} with {} bands",
                    t.shape(),
                    BANDS.len()
                )));
            }
            if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!(
                    "{name} reflectance {v} outside [0, 1]"
                )));
            }
        }
        self.mask.validate_binary()?;
        let q = self.qa;
        if [q.cloud_frac, q.snow_frac, q.missing_frac]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Data(format!(
                "qa fractions must lie in [0, 1], got {q:?}"
            )));
        }
        if !(self.area_ha > 0.0 && self.area_ha.is_finite()) {
            return Err(Error::Data(format!(
                "area_ha must be positive, got {}",
                self.area_ha
            )));
        }
        if self.fire_id.is_empty() || self.fire_id.contains(['/', '\\', '\n']) {
            return Err(Error::Data(format!("invalid fire_id {:?}", self.fire_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BarcHeader {
    magic: String,
    fire_id: String,
    year: i32,
    biome: String,
    area_ha: f64,
    qa: Qa,
    bands: Vec<String>,
    blocks: Vec<BlockDesc>,
    payload_sha256: String,
}

fn expected_blocks(h: usize, w: usize) -> Vec<BlockDesc> {
    let band = |name: &str| BlockDesc {
        name: name.into(),
        dtype: "f32le".into(),
        shape: vec![BANDS.len(), h, w],
    };
    vec![
        band("pre"),
        band("post"),
        BlockDesc {
            name: "mask".into(),
            dtype: "u8".into(),
            shape: vec![h, w],
        },
    ]
}

/// Serialises a scene: the line `BARC1`, a one-line JSON header, then the
/// `pre`, `post` (f32 little-endian) and `mask` (u8) payloads.
pub fn encode_scene(scene: &RasterScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let mut payload = Vec::with_capacity(scene.pre.numel() * 8 + scene.mask.data.len());
    for t in [&scene.pre, &scene.post] {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    payload.extend_from_slice(&scene.mask.data);
    let header = BarcHeader {
        magic: BARC_MAGIC.into(),
        fire_id: scene.fire_id.clone(),
        year: scene.year,
        biome: scene.biome.clone(),
        area_ha: scene.area_ha,
        qa: scene.qa,
        bands: BANDS.iter().map(|b| b.to_string()).collect(),
        blocks: expected_blocks(scene.height(), scene.width()),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let mut out = format!("{BARC_MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serialises"));
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

pub fn decode_scene(bytes: &[u8]) -> Result<RasterScene> {
    let magic = format!("{BARC_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::format(0, "missing BARC1 magic line"));
    }
    let hstart = magic.len();
    let hlen = bytes[hstart..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(hstart as u64, "header line is not terminated"))?;
    let header: BarcHeader =
        serde_json::from_slice(&bytes[hstart..hstart + hlen]).map_err(|e| {
            Error::format(
                (hstart + e.column().saturating_sub(1)) as u64,
                format!("bad header: {e}"),
            )
        })?;
    let bad = |m: String| Error::format(hstart as u64, m);
    if header.magic != BARC_MAGIC {
        return Err(bad(format!("header magic {:?}", header.magic)));
    }
    if header.bands != BANDS {
        return Err(bad(format!(
            "band list {:?}, expected {BANDS:?}",
            header.bands
        )));
    }
    let Some(mask_desc) = header.blocks.get(2) else {
        return Err(bad("expected pre, post and mask blocks".into()));
    };
    let (h, w) = match mask_desc.shape[..] {
        [h, w] if h > 0 && w > 0 => (h, w),
        _ => return Err(bad(format!("mask shape {:?}", mask_desc.shape))),
    };
    if header.blocks != expected_blocks(h, w) {
        return Err(bad(format!(
            "block layout {:?} does not match {h}x{w}",
            header.blocks
        )));
    }

    let pstart = hstart + hlen + 1;
    let band_bytes = BANDS.len() * h * w * 4;
    let need = 2 * band_bytes + h * w;
    let have = bytes.len() - pstart;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {need} bytes declared, {have} present"),
        ));
    }
    if have > need {
        return Err(Error::format(
            (pstart + need) as u64,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    let payload = &bytes[pstart..];
    let floats = |off: usize| -> Result<Tensor<f32>> {
        let data: Vec<f32> = payload[off..off + band_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(
                (pstart + off + 4 * i) as u64,
                format!("reflectance {} outside [0, 1]", data[i]),
            ));
        }
        Ok(Tensor::new(vec![BANDS.len(), h, w], data)?)
    };
    let pre = floats(0)?;
    let post = floats(band_bytes)?;
    let mask_bytes = &payload[2 * band_bytes..];
    if let Some(i) = mask_bytes.iter().position(|&v| v > 1) {
        return Err(Error::format(
            (pstart + 2 * band_bytes + i) as u64,
            format!("mask byte {} outside {{0,1}}", mask_bytes[i]),
        ));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::format(pstart as u64, "payload checksum mismatch"));
    }
    let scene = RasterScene {
        fire_id: header.fire_id,
        year: header.year,
        biome: header.biome,
        pre,
        post,
        mask: Mask {
            height: h,
            width: w,
            data: mask_bytes.to_vec(),
        },
        qa: header.qa,
        area_ha: header.area_ha,
    };
    scene.validate().map_err(|e| bad(e.to_string()))?;
    Ok(scene)
}

pub fn write_scene(scene: &RasterScene, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_scene(scene)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<RasterScene> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_scene(&bytes)
}
