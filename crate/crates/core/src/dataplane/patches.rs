use diffcore::Tensor;

use super::{Mask, RasterScene};
use crate::{Error, Result};

/// Window starts along one axis: `0, stride, 2 stride, ...` while the window
/// fits, plus a final window flush with the far edge if that leaves a gap.
pub fn axis_origins(n: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window {size} and stride {stride} must be positive"
        )));
    }
    if n < size {
        return Err(Error::Data(format!(
            "extent {n} is smaller than the {size}-pixel window"
        )));
    }
    let mut out: Vec<usize> = (0..=n - size).step_by(stride).collect();
    if *out.last().expect("origin 0 always fits") + size < n {
        out.push(n - size);
    }
    Ok(out)
}

/// Row-major window origins `(row, col)` covering an `h x w` extent.
pub fn tile_origins(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let rows = axis_origins(h, size, stride)?;
    let cols = axis_origins(w, size, stride)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// A `size x size` window of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub fire_id: String,
    pub origin: (usize, usize),
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub mask: Mask,
}

/// Copies the `size x size` window at `(r0, c0)` out of `[C x H x W]`.
pub fn crop(t: &Tensor<f32>, r0: usize, c0: usize, size: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(r0 + size <= h && c0 + size <= w);
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in r0..r0 + size {
            let base = (ch * h + r) * w + c0;
            out.extend_from_slice(&d[base..base + size]);
        }
    }
    Tensor::new(vec![c, size, size], out).expect("crop shape")
}

pub fn make_patches(scene: &RasterScene, size: usize, stride: usize) -> Result<Vec<Patch>> {
    let origins = tile_origins(scene.height(), scene.width(), size, stride)?;
    Ok(origins
        .into_iter()
        .map(|(r, c)| {
            let m = &scene.mask;
            let mask_data = (r..r + size)
                .flat_map(|y| {
                    m.data[y * m.width + c..y * m.width + c + size]
                        .iter()
                        .copied()
                })
                .collect();
            Patch {
                fire_id: scene.fire_id.clone(),
                origin: (r, c),
                pre: crop(&scene.pre, r, c, size),
                post: crop(&scene.post, r, c, size),
                mask: Mask {
                    height: size,
                    width: size,
                    data: mask_data,
                },
            }
        })
        .collect())
}
