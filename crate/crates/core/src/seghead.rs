//! Pyramidal neck, bi-temporal fusion, UPerNet-style decoder and the
//! two-class head.

use diffcore::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::params::{Component, Init, ParamId, ParamTable};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub c_neck: usize,
    pub c_dec: usize,
    pub pool_scales: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            c_neck: 128,
            c_dec: 128,
            pool_scales: vec![1, 2, 3, 6],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_neck == 0 || self.c_dec == 0 {
            return Err(Error::Config("c_neck and c_dec must be positive".into()));
        }
        if self.pool_scales.is_empty() || self.pool_scales.contains(&0) {
            return Err(Error::Config(format!(
                "pool_scales must be non-empty and positive, got {:?}",
                self.pool_scales
            )));
        }
        Ok(())
    }
}

/// `k x k` convolution with bias; weight `[Cout x Cin x k x k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSlot {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Kernel-2 stride-2 transposed convolution; weight `[Cin x Cout x 2 x 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTSlot {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resample {
    /// Transposed steps with a GELU between consecutive steps.
    Up(Vec<ConvTSlot>),
    Identity,
    Pool2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckLevel {
    pub proj: ConvSlot,
    pub resample: Resample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckLayout {
    pub levels: Vec<NeckLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayout {
    pub ppm: Vec<(usize, ConvSlot)>,
    pub bottleneck: ConvSlot,
    pub lateral: Vec<ConvSlot>,
    pub fpn: Vec<ConvSlot>,
    pub fuse: ConvSlot,
    pub classifier: ConvSlot,
}

fn conv(
    table: &mut ParamTable,
    name: &str,
    comp: Component,
    c_in: usize,
    c_out: usize,
    k: usize,
    std: Option<f64>,
) -> ConvSlot {
    let std = std.unwrap_or_else(|| (2.0 / (c_in * k * k) as f64).sqrt());
    ConvSlot {
        weight: table.add(
            format!("{name}.weight"),
            &[c_out, c_in, k, k],
            comp,
            Init::Normal(std),
        ),
        bias: table.add(format!("{name}.bias"), &[c_out], comp, Init::Zeros),
    }
}

fn conv_t(table: &mut ParamTable, name: &str, c_in: usize, c_out: usize) -> ConvTSlot {
    ConvTSlot {
        weight: table.add(
            format!("{name}.weight"),
            &[c_in, c_out, 2, 2],
            Component::Neck,
            Init::Normal((1.0 / c_in as f64).sqrt()),
        ),
        bias: table.add(
            format!("{name}.bias"),
            &[c_out],
            Component::Neck,
            Init::Zeros,
        ),
        c_out,
    }
}

/// Four levels at strides 4, 8, 16 and 32 from `d_model`-wide grids at the
/// patch stride (16 for the default configurations).
pub fn build_neck(table: &mut ParamTable, d_model: usize, head: &HeadConfig) -> Result<NeckLayout> {
    head.validate()?;
    let c = head.c_neck;
    let levels = (0..4)
        .map(|k| {
            let p = format!("neck.levels.{k}");
            let proj = conv(
                table,
                &format!("{p}.proj"),
                Component::Neck,
                d_model,
                c,
                1,
                None,
            );
            let resample = match k {
                0 => Resample::Up(vec![
                    conv_t(table, &format!("{p}.up1"), c, c),
                    conv_t(table, &format!("{p}.up2"), c, c),
                ]),
                1 => Resample::Up(vec![conv_t(table, &format!("{p}.up1"), c, c)]),
                2 => Resample::Identity,
                _ => Resample::Pool2,
            };
            NeckLevel { proj, resample }
        })
        .collect();
    Ok(NeckLayout { levels })
}

pub fn build_decoder(table: &mut ParamTable, head: &HeadConfig) -> Result<DecoderLayout> {
    head.validate()?;
    let (z, c) = (2 * head.c_neck, head.c_dec);
    let dec = Component::Decoder;
    let ppm = head
        .pool_scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            (
                s,
                conv(table, &format!("decoder.ppm.{i}"), dec, z, c, 1, None),
            )
        })
        .collect();
    let bottleneck = conv(
        table,
        "decoder.bottleneck",
        dec,
        z + head.pool_scales.len() * c,
        c,
        3,
        None,
    );
    let lateral = (0..3)
        .map(|k| conv(table, &format!("decoder.lateral.{k}"), dec, z, c, 1, None))
        .collect();
    let fpn = (0..3)
        .map(|k| conv(table, &format!("decoder.fpn.{k}"), dec, c, c, 3, None))
        .collect();
    let fuse = conv(table, "decoder.fuse", dec, 4 * c, c, 1, None);
    let classifier = conv(
        table,
        "decoder.classifier",
        dec,
        c,
        NUM_CLASSES,
        1,
        Some(0.01),
    );
    Ok(DecoderLayout {
        ppm,
        bottleneck,
        lateral,
        fpn,
        fuse,
        classifier,
    })
}

/// Per-stream pyramid `P_1..P_4`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevels {
    pub levels: Vec<Var>,
}

/// Channel-concatenated pyramid `Z_1..Z_4`, pre-fire channels first.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPyramid {
    pub levels: Vec<Var>,
}

pub fn apply_conv<T: Scalar>(tape: &mut Tape<T>, v: &[Var], c: &ConvSlot, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, v[c.weight.0])?;
    Ok(tape.add_broadcast(y, v[c.bias.0], 0)?)
}

fn conv_gelu<T: Scalar>(tape: &mut Tape<T>, v: &[Var], c: &ConvSlot, x: Var) -> Result<Var> {
    let y = apply_conv(tape, v, c, x)?;
    Ok(tape.gelu(y)?)
}

/// `out[o, 2i+a, 2j+b] = bias[o] + sum_c W[c, o, a, b] x[c, i, j]`.
pub fn apply_conv_t<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    c: &ConvTSlot,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (cin, h, w) = (s[0], s[1], s[2]);
    let xm = tape.reshape(x, &[cin, h * w])?;
    let wm = tape.reshape(v[c.weight.0], &[cin, c.c_out * 4])?;
    let y = tape.matmul_ex(wm, xm, true, false)?;
    let y = tape.reshape(y, &[c.c_out, 2, 2, h, w])?;
    let y = tape.permute(y, &[0, 3, 1, 4, 2])?;
    let y = tape.reshape(y, &[c.c_out, 2 * h, 2 * w])?;
    Ok(tape.add_broadcast(y, v[c.bias.0], 0)?)
}

fn resize<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s[1] == h && s[2] == w {
        Ok(x)
    } else {
        Ok(tape.bilinear_resize(x, h, w)?)
    }
}

/// Projects four `[D x h x w]` grids to `c_neck` channels and resamples them
/// by 4x, 2x, 1x and 1/2x.
pub fn neck_forward<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    layout: &NeckLayout,
    feats: &[Var],
) -> Result<PyramidLevels> {
    if feats.len() != layout.levels.len() {
        return Err(Error::Config(format!(
            "neck expects {} feature maps, got {}",
            layout.levels.len(),
            feats.len()
        )));
    }
    let d = tape.shape(feats[0])[0];
    if let Some(f) = feats
        .iter()
        .find(|&&f| tape.shape(f).len() != 3 || tape.shape(f)[0] != d)
    {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "neck_forward",
            detail: format!(
                "feature maps must share width {d}, got {:?}",
                tape.shape(*f)
            ),
        }));
    }
    let mut levels = Vec::with_capacity(feats.len());
    for (lvl, &f) in layout.levels.iter().zip(feats) {
        let mut y = apply_conv(tape, v, &lvl.proj, f)?;
        match &lvl.resample {
            Resample::Up(steps) => {
                for (i, st) in steps.iter().enumerate() {
                    if i > 0 {
                        y = tape.gelu(y)?;
                    }
                    y = apply_conv_t(tape, v, st, y)?;
                }
            }
            Resample::Identity => {}
            Resample::Pool2 => {
                let s = tape.shape(y).to_vec();
                y = tape.adaptive_avg_pool(y, s[1].div_ceil(2), s[2].div_ceil(2))?;
            }
        }
        levels.push(y);
    }
    Ok(PyramidLevels { levels })
}

pub fn fuse_bitemporal<T: Scalar>(
    tape: &mut Tape<T>,
    pre: &PyramidLevels,
    post: &PyramidLevels,
) -> Result<FusedPyramid> {
    if pre.levels.len() != post.levels.len() {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "fuse_bitemporal",
            detail: format!("{} vs {} levels", pre.levels.len(), post.levels.len()),
        }));
    }
    let levels = pre
        .levels
        .iter()
        .zip(&post.levels)
        .map(|(&a, &b)| {
            if tape.shape(a) != tape.shape(b) {
                return Err(Error::Tensor(diffcore::Error::Dimension {
                    op: "fuse_bitemporal",
                    detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
                }));
            }
            Ok(tape.concat(&[a, b], 0)?)
        })
        .collect::<Result<_>>()?;
    Ok(FusedPyramid { levels })
}

/// Dense `[c_dec x h_1 x w_1]` features at the finest pyramid level.
pub fn upernet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    layout: &DecoderLayout,
    z: &FusedPyramid,
) -> Result<Var> {
    if z.levels.len() != 4 {
        return Err(Error::Config(format!(
            "decoder expects 4 levels, got {}",
            z.levels.len()
        )));
    }
    let sizes: Vec<(usize, usize)> = z
        .levels
        .iter()
        .map(|&l| (tape.shape(l)[1], tape.shape(l)[2]))
        .collect();
    let top = z.levels[3];
    let (h4, w4) = sizes[3];
    let mut branches = vec![top];
    for (s, c) in &layout.ppm {
        let p = tape.adaptive_avg_pool(top, *s, *s)?;
        let p = conv_gelu(tape, v, c, p)?;
        branches.push(resize(tape, p, h4, w4)?);
    }
    let cat = tape.concat(&branches, 0)?;
    let psp = conv_gelu(tape, v, &layout.bottleneck, cat)?;

    let mut lat: Vec<Var> = layout
        .lateral
        .iter()
        .zip(&z.levels)
        .map(|(c, &x)| conv_gelu(tape, v, c, x))
        .collect::<Result<_>>()?;
    lat.push(psp);
    for k in (0..3).rev() {
        let up = resize(tape, lat[k + 1], sizes[k].0, sizes[k].1)?;
        lat[k] = tape.add(lat[k], up)?;
    }
    let mut outs = Vec::with_capacity(4);
    for (k, c) in layout.fpn.iter().enumerate() {
        outs.push(conv_gelu(tape, v, c, lat[k])?);
    }
    outs.push(lat[3]);
    let (h1, w1) = sizes[0];
    for o in outs.iter_mut().skip(1) {
        *o = resize(tape, *o, h1, w1)?;
    }
    let cat = tape.concat(&outs, 0)?;
    conv_gelu(tape, v, &layout.fuse, cat)
}

/// 1x1 conv to two logits, bilinear upsampling to `h x w`; returns logits
/// and class probabilities.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    head: &ConvSlot,
    dense: Var,
    h: usize,
    w: usize,
) -> Result<(Var, Var)> {
    let logits = apply_conv(tape, v, head, dense)?;
    let logits = resize(tape, logits, h, w)?;
    let probs = tape.softmax(logits, 0)?;
    Ok((logits, probs))
}
