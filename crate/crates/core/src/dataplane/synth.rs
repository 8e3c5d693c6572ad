use std::f64::consts::TAU;

use diffcore::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::{rasterize_polygon, Mask, Qa, RasterScene, DEFAULT_BIOMES};
use crate::{Error, Result};

/// Controls for synthetic fire scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScarParams {
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Accepted range of the burned fraction of each scene.
    pub frac_min: f64,
    pub frac_max: f64,
    /// Post-fire reflectance shift inside the scar, per band (B4, B8, B12).
    pub delta: [f64; 3],
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Standard deviation of per-pixel background noise.
    pub pixel_noise: f64,
    pub years: Vec<i32>,
    pub biomes: Vec<String>,
    pub area_ha_min: f64,
    pub area_ha_max: f64,
    /// QA fractions are drawn uniformly from `[0, qa_max]`.
    pub qa_max: f64,
    pub max_attempts: usize,
}

impl Default for ScarParams {
    fn default() -> Self {
        Self {
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 18.0,
            radius_max: 40.0,
            frac_min: 0.05,
            frac_max: 0.6,
            delta: [0.03, -0.12, 0.10],
            texture: 0.03,
            pixel_noise: 0.004,
            years: (2017..=2023).collect(),
            biomes: DEFAULT_BIOMES.iter().map(|s| s.to_string()).collect(),
            area_ha_min: 50.0,
            area_ha_max: 50_000.0,
            qa_max: 0.22,
            max_attempts: 500,
        }
    }
}

const BASE: [(f64, f64); 3] = [(0.04, 0.09), (0.20, 0.32), (0.09, 0.17)];

impl ScarParams {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if h == 0 || w == 0 {
            return bad("scene extent must be positive".into());
        }
        if self.blobs_min > self.blobs_max {
            return bad(format!(
                "blobs_min {} exceeds blobs_max {}",
                self.blobs_min, self.blobs_max
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            ));
        }
        if self.blobs_max > 0 && 2.0 * self.radius_max > h.min(w) as f64 {
            return bad(format!(
                "blob diameter {} does not fit a {h}x{w} scene",
                2.0 * self.radius_max
            ));
        }
        if !(0.0..=1.0).contains(&self.frac_min) || !(self.frac_min..=1.0).contains(&self.frac_max)
        {
            return bad(format!(
                "scar fraction range [{}, {}] is invalid",
                self.frac_min, self.frac_max
            ));
        }
        if self.years.is_empty() || self.biomes.is_empty() {
            return bad("year and biome pools must not be empty".into());
        }
        if !(self.area_ha_min > 0.0 && self.area_ha_min <= self.area_ha_max) {
            return bad("area range must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&self.qa_max) {
            return bad("qa_max must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn background(rng: &mut Rng, h: usize, w: usize, p: &ScarParams) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    for (b, &(lo, hi)) in BASE.iter().enumerate() {
        let base = rng.uniform(lo, hi);
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let theta = rng.uniform(0.0, TAU);
                let k = TAU / rng.uniform(24.0, 96.0);
                (
                    k * theta.cos(),
                    k * theta.sin(),
                    rng.uniform(0.0, TAU),
                    rng.uniform(0.3, 1.0),
                )
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w.3).sum();
        let plane = &mut out[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let t: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).cos())
                    .sum();
                let v = base + p.texture * t / norm + p.pixel_noise * rng.normal();
                plane[y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn blob(rng: &mut Rng, h: usize, w: usize, p: &ScarParams) -> Result<Mask> {
    let r = rng.uniform(p.radius_min, p.radius_max);
    let cx = rng.uniform(r, w as f64 - r);
    let cy = rng.uniform(r, h as f64 - r);
    let harmonics: Vec<(f64, f64)> = (2..=4)
        .map(|_| (rng.uniform(-0.12, 0.12), rng.uniform(0.0, TAU)))
        .collect();
    let poly: Vec<(f64, f64)> = (0..48)
        .map(|i| {
            let th = TAU * i as f64 / 48.0;
            let wobble: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(k, &(a, ph))| a * ((k + 2) as f64 * th + ph).cos())
                .sum();
            let rr = r * (1.0 + wobble);
            (cx + rr * th.cos(), cy + rr * th.sin())
        })
        .collect();
    rasterize_polygon(&poly, h, w)
}

/// Scene number `index` of the dataset drawn from `seed`.
pub fn synth_scene(
    seed: u64,
    index: usize,
    h: usize,
    w: usize,
    p: &ScarParams,
) -> Result<RasterScene> {
    p.validate(h, w)?;
    let mut rng = Rng::stream(seed, index as u64);
    let pre = background(&mut rng, h, w, p);

    let mut attempt = 0;
    let mask = loop {
        let n = p.blobs_min + rng.below(p.blobs_max - p.blobs_min + 1);
        let mut m = Mask::zeros(h, w);
        for _ in 0..n {
            let b = blob(&mut rng, h, w, p)?;
            m.data.iter_mut().zip(&b.data).for_each(|(a, &v)| *a |= v);
        }
        let f = m.fraction();
        if n == 0 || (p.frac_min..=p.frac_max).contains(&f) {
            break m;
        }
        attempt += 1;
        if attempt >= p.max_attempts {
            return Err(Error::Config(format!(
                "no scar with burned fraction in [{}, {}] after {attempt} draws",
                p.frac_min, p.frac_max
            )));
        }
    };

    let mut post = pre.clone();
    for (b, &d) in p.delta.iter().enumerate() {
        let plane = &mut post[b * h * w..(b + 1) * h * w];
        for (v, &m) in plane.iter_mut().zip(&mask.data) {
            if m == 1 {
                *v = (*v as f64 + d).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let year = p.years[rng.below(p.years.len())];
    let biome = p.biomes[rng.below(p.biomes.len())].clone();
    let area_ha = (rng.uniform(p.area_ha_min.ln(), p.area_ha_max.ln())).exp();
    let qa = Qa {
        cloud_frac: rng.uniform(0.0, p.qa_max),
        snow_frac: rng.uniform(0.0, p.qa_max),
        missing_frac: rng.uniform(0.0, p.qa_max),
    };
    Ok(RasterScene {
        fire_id: format!("syn{seed}_{index:05}"),
        year,
        biome,
        pre: Tensor::new(vec![3, h, w], pre)?,
        post: Tensor::new(vec![3, h, w], post)?,
        mask,
        qa,
        area_ha,
    })
}

/// `n` scenes of `h x w`, fully determined by `seed`.
pub fn synth_generate(
    seed: u64,
    n: usize,
    h: usize,
    w: usize,
    p: &ScarParams,
) -> Result<Vec<RasterScene>> {
    p.validate(h, w)?;
    (0..n).map(|i| synth_scene(seed, i, h, w, p)).collect()
}
