//! Sliding-window full-scene inference with logit averaging, and the
//! TP/FP/FN error map.

use std::io::Write;
use std::path::Path;

use diffcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataplane::{crop, Mask, RasterScene};
use crate::engine::argmax_mask;
use crate::model::Model;
use crate::objective::ConfusionCounts;
use crate::{Error, Result};

pub use crate::dataplane::tile_origins;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileJob {
    pub window: usize,
    pub stride: usize,
}

impl Default for TileJob {
    fn default() -> Self {
        Self {
            window: 128,
            stride: 32,
        }
    }
}

impl TileJob {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "tiling needs 0 < stride <= window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// Anything that maps a `window x window` pre/post pair to `[2 x w x w]`
/// logits.
pub trait WindowPredictor {
    fn window(&self) -> usize;
    fn predict_window(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Tensor<f64>>;
}

impl<T: Scalar> WindowPredictor for Model<T> {
    fn window(&self) -> usize {
        Model::window(self)
    }

    fn predict_window(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Tensor<f64>> {
        Ok(self.predict_logits(&pre.cast(), &post.cast())?.cast())
    }
}

/// Running sums of window logits and per-pixel coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLogits {
    pub height: usize,
    pub width: usize,
    pub sum_logits: Vec<f64>,
    pub count: Vec<u32>,
}

impl SceneLogits {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sum_logits: vec![0.0; 2 * height * width],
            count: vec![0; height * width],
        }
    }

    pub fn add_window(&mut self, origin: (usize, usize), logits: &Tensor<f64>) {
        let size = logits.shape()[1];
        let (h, w) = (self.height, self.width);
        let d = logits.data();
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (origin.0 + r, origin.1 + c);
                for k in 0..2 {
                    self.sum_logits[k * h * w + y * w + x] += d[(k * size + r) * size + c];
                }
                self.count[y * w + x] += 1;
            }
        }
    }

    /// Averaged `[2 x H x W]` logits; fails if any pixel was never covered.
    pub fn average(&self) -> Result<Tensor<f64>> {
        let hw = self.height * self.width;
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Invariant(format!(
                "pixel ({}, {}) not covered by any window",
                i / self.width,
                i % self.width
            )));
        }
        let data = (0..2 * hw)
            .map(|i| self.sum_logits[i] / self.count[i % hw] as f64)
            .collect();
        Ok(Tensor::new(vec![2, self.height, self.width], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInference {
    pub logits: Tensor<f64>,
    pub pred: Mask,
    pub count: Vec<u32>,
}

/// Tiles the scene with the given window origins and averages logits.
/// Windows are accumulated in row-major order whatever order `origins` come
/// in, so the result is bit-identical for any permutation.
pub fn infer_with_origins(
    model: &impl WindowPredictor,
    scene: &RasterScene,
    window: usize,
    origins: &[(usize, usize)],
) -> Result<SceneInference> {
    if model.window() != window {
        return Err(Error::Config(format!(
            "tiling window {window} does not match model input size {}",
            model.window()
        )));
    }
    let mut sorted = origins.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate window origin {:?}", w[0])));
    }
    if let Some(&(r, c)) = sorted
        .iter()
        .find(|(r, c)| r + window > scene.height() || c + window > scene.width())
    {
        return Err(Error::Data(format!(
            "window at ({r}, {c}) leaves the {}x{} scene",
            scene.height(),
            scene.width()
        )));
    }
    let mut acc = SceneLogits::new(scene.height(), scene.width());
    for &(r, c) in &sorted {
        let logits = model.predict_window(
            &crop(&scene.pre, r, c, window),
            &crop(&scene.post, r, c, window),
        )?;
        acc.add_window((r, c), &logits);
    }
    let logits = acc.average()?;
    Ok(SceneInference {
        pred: argmax_mask(&logits),
        logits,
        count: acc.count,
    })
}

pub fn infer_scene(
    model: &impl WindowPredictor,
    scene: &RasterScene,
    job: &TileJob,
) -> Result<SceneInference> {
    job.validate()?;
    let origins = tile_origins(scene.height(), scene.width(), job.window, job.stride)?;
    infer_with_origins(model, scene, job.window, &origins)
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// Per-pixel colors: TP green, FP red, FN white, TN black.
pub fn error_map_pixels(pred: &Mask, target: &Mask) -> Result<Vec<[u8; 3]>> {
    crate::objective::confusion(pred, target)?;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| match (p, t) {
            (1, 1) => TP_COLOR,
            (1, 0) => FP_COLOR,
            (0, 1) => FN_COLOR,
            _ => TN_COLOR,
        })
        .collect())
}

/// Writes the error map as a binary PPM (P6) and returns the counts it shows.
pub fn emit_error_map(
    pred: &Mask,
    target: &Mask,
    path: impl AsRef<Path>,
) -> Result<ConfusionCounts> {
    let px = error_map_pixels(pred, target)?;
    let mut bytes = format!("P6\n{} {}\n255\n", pred.width, pred.height).into_bytes();
    bytes.extend(px.iter().flatten());
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    crate::objective::confusion(pred, target)
}

/// Reads a binary PPM written by [`emit_error_map`].
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let (w, h, off) = parse_pnm_header(&bytes, b"P6")?;
    let body = &bytes[off..];
    if body.len() != 3 * w * h {
        return Err(Error::format(
            off as u64,
            format!("expected {} pixel bytes, found {}", 3 * w * h, body.len()),
        ));
    }
    Ok((
        w,
        h,
        body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    ))
}

/// Writes a mask as a binary PGM (P5) with burned pixels at 255.
pub fn write_mask_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.data.iter().map(|&v| v * 255));
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a binary PGM mask; any non-zero sample counts as burned.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let (w, h, off) = parse_pnm_header(&bytes, b"P5")?;
    let body = &bytes[off..];
    if body.len() != w * h {
        return Err(Error::format(
            off as u64,
            format!("expected {} samples, found {}", w * h, body.len()),
        ));
    }
    Mask::new(h, w, body.iter().map(|&v| (v > 0) as u8).collect())
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(
            0,
            format!("expected {} image", String::from_utf8_lossy(magic)),
        ));
    }
    let mut fields = Vec::new();
    let mut i = magic.len();
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "malformed image header"))?;
        fields.push(v);
    }
    if fields[2] != 255 || i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format(i as u64, "expected maxval 255"));
    }
    Ok((fields[0], fields[1], i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(f64, f64, usize);

    impl WindowPredictor for Const {
        fn window(&self) -> usize {
            self.2
        }
        fn predict_window(&self, _: &Tensor<f32>, _: &Tensor<f32>) -> Result<Tensor<f64>> {
            let n = self.2 * self.2;
            Ok(Tensor::from_fn(vec![2, self.2, self.2], |i| {
                if i < n {
                    self.0
                } else {
                    self.1
                }
            }))
        }
    }

    fn scene(n: usize) -> RasterScene {
        RasterScene {
            fire_id: "t".into(),
            year: 2020,
            biome: "Tundra".into(),
            pre: Tensor::zeros(vec![3, n, n]),
            post: Tensor::zeros(vec![3, n, n]),
            mask: Mask::zeros(n, n),
            qa: Default::default(),
            area_ha: 500.0,
        }
    }

    #[test]
    fn constant_logits_survive_averaging() {
        let r = infer_scene(
            &Const(0.25, -1.5, 16),
            &scene(40),
            &TileJob {
                window: 16,
                stride: 5,
            },
        )
        .unwrap();
        let hw = 40 * 40;
        assert!(r.logits.data()[..hw].iter().all(|&v| v == 0.25));
        assert!(r.logits.data()[hw..].iter().all(|&v| v == -1.5));
        assert_eq!(r.pred.count_ones(), 0);
    }

    #[test]
    fn window_mismatch_and_bad_stride() {
        assert!(infer_scene(
            &Const(0.0, 0.0, 8),
            &scene(40),
            &TileJob {
                window: 16,
                stride: 4
            }
        )
        .is_err());
        assert!(TileJob {
            window: 16,
            stride: 17
        }
        .validate()
        .is_err());
    }

    #[test]
    fn coverage_hole_is_invariant_violation() {
        let s = scene(20);
        assert!(matches!(
            infer_with_origins(&Const(0.0, 0.0, 8), &s, 8, &[(0, 0)]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn error_map_colors() {
        let p = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let t = Mask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(
            error_map_pixels(&p, &t).unwrap(),
            vec![TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR]
        );
    }
}
