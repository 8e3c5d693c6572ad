#![allow(dead_code)]

use burnmap::dataplane::Qa;
use burnmap::*;
use diffcore::{Rng, Scalar, Tensor};

/// A network small enough for exhaustive checks: 16x16 inputs, 4x4 patches.
pub fn micro_config(d: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        vit: ViTConfig {
            img_size: 16,
            patch: 4,
            d_model: d,
            depth,
            heads: 2,
            mlp_ratio: 2,
            ..ViTConfig::tiny()
        },
        head: HeadConfig {
            c_neck: 4,
            c_dec: 4,
            pool_scales: vec![1, 2],
        },
        norm: BandNorm::default(),
    }
}

pub fn random_image<T: Scalar>(rng: &mut Rng, h: usize, w: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![3, h, w]);
    rng.fill_uniform(t.data_mut(), 0.0, 0.5);
    t
}

/// Gives every adapter `B` factor random entries so adapters are active.
pub fn activate_adapters<T: Scalar>(model: &mut Model<T>, rng: &mut Rng, std: f64) {
    for (p, s) in model.params.iter_mut().zip(&model.assembly.table.specs) {
        if s.name.ends_with(".lora_b") {
            rng.fill_normal(p.tensor.data_mut(), std);
        }
    }
}

pub fn random_patch(rng: &mut Rng, id: &str, size: usize) -> Patch {
    let mask = Mask::new(
        size,
        size,
        (0..size * size)
            .map(|_| (rng.uniform(0.0, 1.0) < 0.3) as u8)
            .collect(),
    )
    .unwrap();
    Patch {
        fire_id: id.into(),
        origin: (0, 0),
        pre: random_image(rng, size, size),
        post: random_image(rng, size, size),
        mask,
    }
}

pub fn random_scene(rng: &mut Rng, id: &str, h: usize, w: usize) -> RasterScene {
    let mask = Mask::new(
        h,
        w,
        (0..h * w)
            .map(|_| (rng.uniform(0.0, 1.0) < 0.4) as u8)
            .collect(),
    )
    .unwrap();
    RasterScene {
        fire_id: id.into(),
        year: 2019,
        biome: "Tundra".into(),
        pre: random_image(rng, h, w),
        post: random_image(rng, h, w),
        mask,
        qa: Qa::default(),
        area_ha: 1000.0,
    }
}
