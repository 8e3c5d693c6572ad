//! Patch-token ViT encoder shared by both acquisition dates.

use diffcore::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::lora::{self, AdapterSlot, LoraSpec, LoraTarget};
use crate::params::{Component, Init, ParamId, ParamTable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbed {
    /// Trainable `[N x D]` table; fixes the token grid to `img_size / patch`.
    Learned,
    /// Fixed 2-D sine/cosine code, computed for whatever grid arrives.
    SinCos,
}

/// Element type requested for a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypeName {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub img_size: usize,
    pub patch: usize,
    pub in_chans: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_cls_token: bool,
    pub register_tokens: usize,
    pub mask_token: bool,
    pub patch_bias: bool,
    pub linear_bias: bool,
    pub norm_bias: bool,
    pub layer_scale: bool,
    pub pos_embed: PosEmbed,
    pub final_norm: bool,
    /// Blocks whose outputs feed the neck; four evenly spaced blocks ending
    /// at the last one when unset.
    pub selected_layers: Option<Vec<usize>>,
    pub ln_eps: f64,
    pub dtype: DTypeName,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ViTConfig {
    /// Desk-scale encoder used by the demos and the acceptance suite.
    pub fn tiny() -> Self {
        Self {
            img_size: 128,
            patch: 16,
            in_chans: 3,
            d_model: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            use_cls_token: false,
            register_tokens: 0,
            mask_token: false,
            patch_bias: true,
            linear_bias: true,
            norm_bias: true,
            layer_scale: false,
            pos_embed: PosEmbed::Learned,
            final_norm: true,
            selected_layers: None,
            ln_eps: 1e-6,
            dtype: DTypeName::F32,
        }
    }

    fn base(d_model: usize, depth: usize, heads: usize) -> Self {
        Self {
            img_size: 224,
            d_model,
            depth,
            heads,
            pos_embed: PosEmbed::SinCos,
            ..Self::tiny()
        }
    }

    /// ViT-B layout without linear or norm biases (TerraMind-style).
    pub fn terramind_b() -> Self {
        Self {
            linear_bias: false,
            norm_bias: false,
            ..Self::base(768, 12, 12)
        }
    }

    /// ViT-B with layer scale, a class token, four registers and a mask token
    /// (DINOv3-style). The rotary position code is replaced by the fixed
    /// sine/cosine table, which holds no parameters either way.
    pub fn dinov3_b() -> Self {
        Self {
            use_cls_token: true,
            register_tokens: 4,
            mask_token: true,
            layer_scale: true,
            ..Self::base(768, 12, 12)
        }
    }

    /// ViT-L with a class token (Prithvi-v2-style).
    pub fn prithvi_v2_l() -> Self {
        Self {
            use_cls_token: true,
            ..Self::base(1024, 24, 16)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "terramind-b" | "vit-b" => Ok(Self::terramind_b()),
            "dinov3-b" => Ok(Self::dinov3_b()),
            "prithvi-v2-l" => Ok(Self::prithvi_v2_l()),
            other => Err(Error::Config(format!(
                "unknown encoder preset '{other}' (known: tiny, vit-b, terramind-b, dinov3-b, prithvi-v2-l)"
            ))),
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    pub fn prefix_tokens(&self) -> usize {
        self.use_cls_token as usize + self.register_tokens
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn layers(&self) -> Vec<usize> {
        match &self.selected_layers {
            Some(l) => l.clone(),
            None => default_layers(self.depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.img_size == 0 || !self.img_size.is_multiple_of(self.patch) {
            return bad(format!(
                "patch size {} must divide img_size {}",
                self.patch, self.img_size
            ));
        }
        if self.in_chans == 0 || self.d_model == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("in_chans, d_model, depth and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.pos_embed == PosEmbed::SinCos && !self.d_model.is_multiple_of(4) {
            return bad(format!(
                "sincos position code needs d_model divisible by 4, got {}",
                self.d_model
            ));
        }
        let layers = self.layers();
        if layers.len() != 4 {
            return bad(format!(
                "selected_layers must name 4 blocks, got {}",
                layers.len()
            ));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= self.depth) {
            return bad(format!(
                "selected layer {l} out of range for depth {}",
                self.depth
            ));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// `ceil((i + 1) * depth / 4) - 1` for `i = 0..4`.
pub fn default_layers(depth: usize) -> Vec<usize> {
    (1..=4)
        .map(|i| (i * depth).div_ceil(4).saturating_sub(1))
        .collect()
}

/// Fine-tuning regime, which decides what is trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullFt,
    DecoderOnly,
    Lora,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FullFt, Strategy::DecoderOnly, Strategy::Lora];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullFt => "full_ft",
            Strategy::DecoderOnly => "decoder_only",
            Strategy::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full_ft" | "full" | "fullft" => Ok(Strategy::FullFt),
            "decoder_only" | "decoder" => Ok(Strategy::DecoderOnly),
            "lora" => Ok(Strategy::Lora),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (known: full_ft, decoder_only, lora)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Marks each tensor trainable or frozen according to `strategy`.
pub fn set_trainability(table: &mut ParamTable, strategy: Strategy) -> Result<()> {
    let has_adapters = table
        .specs
        .iter()
        .any(|s| s.component == Component::Adapter);
    if strategy == Strategy::Lora && !has_adapters {
        return Err(Error::Config(
            "lora strategy requires adapters to be attached".into(),
        ));
    }
    for s in &mut table.specs {
        s.trainable = match (strategy, s.component) {
            (Strategy::FullFt, _) => true,
            (_, Component::Encoder) => false,
            (Strategy::DecoderOnly, Component::Adapter) => false,
            _ => true,
        };
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormSlot {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
}

/// `y = x W^T + b`, `W` stored `[d_out x d_in]`, plus an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSlot {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<AdapterSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub norm1: NormSlot,
    pub qkv: LinearSlot,
    pub attn_out: LinearSlot,
    pub ls1: Option<ParamId>,
    pub norm2: NormSlot,
    pub fc1: LinearSlot,
    pub fc2: LinearSlot,
    pub ls2: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    /// Patch projection stored `[(C p p) x D]`.
    pub patch_weight: ParamId,
    pub patch_bias: Option<ParamId>,
    pub patch_adapter: Option<AdapterSlot>,
    pub cls: Option<ParamId>,
    pub registers: Option<ParamId>,
    pub mask_token: Option<ParamId>,
    pub pos: Option<ParamId>,
    pub blocks: Vec<BlockLayout>,
    pub final_norm: Option<NormSlot>,
}

impl EncoderLayout {
    pub fn adapters(&self) -> impl Iterator<Item = &AdapterSlot> {
        self.patch_adapter
            .iter()
            .chain(self.blocks.iter().flat_map(|b| {
                [&b.qkv, &b.attn_out, &b.fc1, &b.fc2]
                    .into_iter()
                    .filter_map(|l| l.adapter.as_ref())
            }))
    }
}

fn norm(table: &mut ParamTable, name: &str, d: usize, bias: bool) -> NormSlot {
    NormSlot {
        gamma: table.add(
            format!("{name}.weight"),
            &[d],
            Component::Encoder,
            Init::Const(1.0),
        ),
        beta: bias.then(|| {
            table.add(
                format!("{name}.bias"),
                &[d],
                Component::Encoder,
                Init::Zeros,
            )
        }),
    }
}

fn linear(
    table: &mut ParamTable,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    lora: Option<&LoraSpec>,
) -> LinearSlot {
    LinearSlot {
        weight: table.add(
            format!("{name}.weight"),
            &[d_out, d_in],
            Component::Encoder,
            Init::TruncNormal(0.02),
        ),
        bias: bias.then(|| {
            table.add(
                format!("{name}.bias"),
                &[d_out],
                Component::Encoder,
                Init::Zeros,
            )
        }),
        adapter: lora.map(|spec| lora::attach(table, name, d_in, d_out, spec)),
    }
}

/// Registers all encoder tensors, attaching adapters to the projections
/// named in `lora` when it is given.
pub fn build_encoder(
    table: &mut ParamTable,
    cfg: &ViTConfig,
    lora: Option<&LoraSpec>,
) -> Result<EncoderLayout> {
    cfg.validate()?;
    if let Some(l) = lora {
        l.validate()?;
    }
    let d = cfg.d_model;
    let cpp = cfg.in_chans * cfg.patch * cfg.patch;
    let xavier = (6.0 / (cpp + d) as f64).sqrt();
    let patch_weight = table.add(
        "encoder.patch_embed.weight",
        &[cpp, d],
        Component::Encoder,
        Init::Uniform(xavier),
    );
    let patch_bias = cfg.patch_bias.then(|| {
        table.add(
            "encoder.patch_embed.bias",
            &[d],
            Component::Encoder,
            Init::Zeros,
        )
    });
    let patch_adapter = lora
        .filter(|l| l.patch_embed)
        .map(|spec| lora::attach(table, "encoder.patch_embed", cpp, d, spec));
    let tok = |t: &mut ParamTable, name: &str, n: usize| {
        t.add(name, &[n, d], Component::Encoder, Init::TruncNormal(0.02))
    };
    let cls = cfg
        .use_cls_token
        .then(|| tok(table, "encoder.cls_token", 1));
    let registers = (cfg.register_tokens > 0)
        .then(|| tok(table, "encoder.register_tokens", cfg.register_tokens));
    let mask_token = cfg.mask_token.then(|| tok(table, "encoder.mask_token", 1));
    let pos = (cfg.pos_embed == PosEmbed::Learned)
        .then(|| tok(table, "encoder.pos_embed", cfg.grid() * cfg.grid()));

    let pick = |t: LoraTarget| lora.filter(|l| l.targets(t));
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("encoder.blocks.{i}");
        let lb = cfg.linear_bias;
        let ls = |t: &mut ParamTable, n: &str| {
            cfg.layer_scale.then(|| {
                t.add(
                    format!("{p}.{n}"),
                    &[d],
                    Component::Encoder,
                    Init::Const(0.1),
                )
            })
        };
        let norm1 = norm(table, &format!("{p}.norm1"), d, cfg.norm_bias);
        let qkv = linear(
            table,
            &format!("{p}.attn.qkv"),
            d,
            3 * d,
            lb,
            pick(LoraTarget::Qkv),
        );
        let attn_out = linear(
            table,
            &format!("{p}.attn.proj"),
            d,
            d,
            lb,
            pick(LoraTarget::AttnOut),
        );
        let ls1 = ls(table, "ls1");
        let norm2 = norm(table, &format!("{p}.norm2"), d, cfg.norm_bias);
        let fc1 = linear(
            table,
            &format!("{p}.mlp.fc1"),
            d,
            cfg.mlp_hidden(),
            lb,
            pick(LoraTarget::Fc1),
        );
        let fc2 = linear(
            table,
            &format!("{p}.mlp.fc2"),
            cfg.mlp_hidden(),
            d,
            lb,
            pick(LoraTarget::Fc2),
        );
        let ls2 = ls(table, "ls2");
        blocks.push(BlockLayout {
            norm1,
            qkv,
            attn_out,
            ls1,
            norm2,
            fc1,
            fc2,
            ls2,
        });
    }
    let final_norm = cfg
        .final_norm
        .then(|| norm(table, "encoder.norm", d, cfg.norm_bias));
    Ok(EncoderLayout {
        patch_weight,
        patch_bias,
        patch_adapter,
        cls,
        registers,
        mask_token,
        pos,
        blocks,
        final_norm,
    })
}

/// Token sequences `[T x D]` taken after each selected block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub layers: Vec<Var>,
    /// Leading non-patch tokens (class and register tokens).
    pub prefix: usize,
}

/// 2-D sine/cosine position table `[gh*gw x d]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_table(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let quarter = d / 4;
    let mut out = vec![0.0; gh * gw * d];
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut out[(r * gw + c) * d..(r * gw + c + 1) * d];
            for (half, pos) in [(0, r), (1, c)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + k] = a.sin();
                    row[half * 2 * quarter + quarter + k] = a.cos();
                }
            }
        }
    }
    out
}

fn apply_norm<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    n: &NormSlot,
    x: Var,
    eps: f64,
) -> Result<Var> {
    Ok(tape.layer_norm(x, Some(v[n.gamma.0]), n.beta.map(|b| v[b.0]), eps)?)
}

/// Token-major linear layer with its optional adapter.
pub fn apply_linear<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    l: &LinearSlot,
    x: Var,
) -> Result<Var> {
    let mut y = tape.matmul_nt(x, v[l.weight.0])?;
    if let Some(b) = l.bias {
        y = tape.add_broadcast(y, v[b.0], 1)?;
    }
    if let Some(a) = &l.adapter {
        let delta = lora::lora_delta(tape, x, v[a.a.0], v[a.b.0], a.alpha)?;
        y = tape.add(y, delta)?;
    }
    Ok(y)
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    b: &BlockLayout,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (t, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let dh = d / heads;
    let qkv = apply_linear(tape, v, &b.qkv, x)?;
    let qkv = tape.reshape(qkv, &[t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
    let qkv = tape.reshape(qkv, &[3 * heads, t, dh])?;
    let q = tape.narrow(qkv, 0, 0, heads)?;
    let k = tape.narrow(qkv, 0, heads, heads)?;
    let val = tape.narrow(qkv, 0, 2 * heads, heads)?;
    let scores = tape.matmul_ex(q, k, false, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let o = tape.matmul(attn, val)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[t, d])?;
    apply_linear(tape, v, &b.attn_out, o)
}

fn residual<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    x: Var,
    y: Var,
    ls: Option<ParamId>,
) -> Result<Var> {
    let y = match ls {
        Some(g) => tape.mul_broadcast(y, v[g.0], 1)?,
        None => y,
    };
    Ok(tape.add(x, y)?)
}

/// Pre-norm transformer block.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    b: &BlockLayout,
    cfg: &ViTConfig,
    x: Var,
) -> Result<Var> {
    let h = apply_norm(tape, v, &b.norm1, x, cfg.ln_eps)?;
    let h = attention(tape, v, b, h, cfg.heads)?;
    let x = residual(tape, v, x, h, b.ls1)?;
    let h = apply_norm(tape, v, &b.norm2, x, cfg.ln_eps)?;
    let h = apply_linear(tape, v, &b.fc1, h)?;
    let h = tape.gelu(h)?;
    let h = apply_linear(tape, v, &b.fc2, h)?;
    residual(tape, v, x, h, b.ls2)
}

/// Runs the encoder on one `[C x H x W]` image and returns the token
/// sequences after each selected block. The final norm, when present, is
/// applied to features taken from the last block.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    layout: &EncoderLayout,
    cfg: &ViTConfig,
    x: Var,
) -> Result<TokenFeatures> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != cfg.in_chans {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "encode",
            detail: format!("expected [{} x H x W] input, got {s:?}", cfg.in_chans),
        }));
    }
    let mut tokens = match &layout.patch_adapter {
        None => tape.patch_embed(x, cfg.patch, v[layout.patch_weight.0])?,
        Some(a) => {
            let patches = tape.patchify(x, cfg.patch)?;
            let base = tape.matmul(patches, v[layout.patch_weight.0])?;
            let delta = lora::lora_delta(tape, patches, v[a.a.0], v[a.b.0], a.alpha)?;
            tape.add(base, delta)?
        }
    };
    let (gh, gw) = (s[1] / cfg.patch, s[2] / cfg.patch);
    if let Some(b) = layout.patch_bias {
        tokens = tape.add_broadcast(tokens, v[b.0], 1)?;
    }
    match layout.pos {
        Some(p) => {
            if tape.shape(v[p.0])[0] != gh * gw {
                return Err(Error::Tensor(diffcore::Error::Dimension {
                    op: "encode",
                    detail: format!(
                        "learned position table covers {} tokens but the input has {}",
                        tape.shape(v[p.0])[0],
                        gh * gw
                    ),
                }));
            }
            tokens = tape.add(tokens, v[p.0])?;
        }
        None => {
            let table = Tensor::from_f64(
                vec![gh * gw, cfg.d_model],
                &sincos_table(gh, gw, cfg.d_model),
            )?;
            let pe = tape.constant(table)?;
            tokens = tape.add(tokens, pe)?;
        }
    }
    let prefix: Vec<Var> = [layout.cls, layout.registers]
        .into_iter()
        .flatten()
        .map(|p| v[p.0])
        .collect();
    if !prefix.is_empty() {
        let mut all = prefix;
        all.push(tokens);
        tokens = tape.concat(&all, 0)?;
    }

    let wanted = cfg.layers();
    let last = *wanted.iter().max().expect("four selected layers");
    let mut feats = vec![None; wanted.len()];
    let mut h = tokens;
    for (i, b) in layout.blocks.iter().enumerate().take(last + 1) {
        h = block_forward(tape, v, b, cfg, h)?;
        let mut out = h;
        if i + 1 == cfg.depth {
            if let Some(n) = &layout.final_norm {
                out = apply_norm(tape, v, n, h, cfg.ln_eps)?;
            }
        }
        for (slot, &l) in feats.iter_mut().zip(&wanted) {
            if l == i {
                *slot = Some(out);
            }
        }
    }
    Ok(TokenFeatures {
        layers: feats
            .into_iter()
            .map(|f| f.expect("every selected layer visited"))
            .collect(),
        prefix: cfg.prefix_tokens(),
    })
}

/// Drops the `prefix` leading tokens of `[T x D]` and folds the rest into a
/// `[D x s x s]` grid. The remaining token count must be a perfect square.
pub fn tokens_to_grid<T: Scalar>(tape: &mut Tape<T>, tokens: Var, prefix: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] <= prefix {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "tokens_to_grid",
            detail: format!("{s:?} with {prefix} prefix tokens"),
        }));
    }
    let n = s[0] - prefix;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "tokens_to_grid",
            detail: format!("{n} patch tokens do not form a square grid"),
        }));
    }
    let body = if prefix > 0 {
        tape.narrow(tokens, 0, prefix, n)?
    } else {
        tokens
    };
    let g = tape.reshape(body, &[side, side, s[1]])?;
    Ok(tape.permute(g, &[2, 0, 1])?)
}
