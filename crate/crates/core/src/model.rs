//! Full bi-temporal segmentation network: shape-only assembly plus a
//! materialised instance.

use std::collections::BTreeSet;

use diffcore::{Parameter, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, EncoderLayout, Strategy, ViTConfig};
use crate::lora::LoraSpec;
use crate::params::{Component, ParamTable};
use crate::seghead::{self, DecoderLayout, HeadConfig, NeckLayout};
use crate::{Error, Result};

/// Fixed per-band standardisation applied before the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for BandNorm {
    fn default() -> Self {
        Self {
            mean: vec![0.07, 0.24, 0.14],
            std: vec![0.03, 0.07, 0.06],
        }
    }
}

impl BandNorm {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "band normalisation needs {channels} means and stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(
                "band std must be positive and means finite".into(),
            ));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        let plane = x.shape()[1] * x.shape()[2];
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (T::from_f64(self.mean[c]), T::from_f64(1.0 / self.std[c]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        out
    }
}

/// Architecture-defining configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub head: HeadConfig,
    pub norm: BandNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.head.validate()?;
        self.norm.validate(self.vit.in_chans)
    }
}

/// Parameter table and layouts of a network, without tensor storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssembly {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub lora: Option<LoraSpec>,
    pub table: ParamTable,
    pub encoder: EncoderLayout,
    pub neck: NeckLayout,
    pub decoder: DecoderLayout,
    pub warnings: Vec<String>,
}

impl ModelAssembly {
    /// Builds the network for `strategy`; adapters are attached only for
    /// [`Strategy::Lora`].
    pub fn build(config: &ModelConfig, strategy: Strategy, lora: &LoraSpec) -> Result<Self> {
        Self::build_with_adapters(
            config,
            strategy,
            (strategy == Strategy::Lora).then_some(lora),
        )
    }

    /// Builds with adapters whenever `lora` is given, then applies the
    /// trainability rules of `strategy`.
    pub fn build_with_adapters(
        config: &ModelConfig,
        strategy: Strategy,
        lora: Option<&LoraSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let mut table = ParamTable::default();
        let encoder = backbone::build_encoder(&mut table, &config.vit, lora)?;
        let neck = seghead::build_neck(&mut table, config.vit.d_model, &config.head)?;
        let decoder = seghead::build_decoder(&mut table, &config.head)?;
        let mut warnings = Vec::new();
        for a in encoder.adapters() {
            if let Some(w) = lora.and_then(|l| l.rank_warning(a.d_in, a.d_out)) {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
        }
        backbone::set_trainability(&mut table, strategy)?;
        Ok(Self {
            config: config.clone(),
            strategy,
            lora: lora.cloned(),
            table,
            encoder,
            neck,
            decoder,
            warnings,
        })
    }

    pub fn set_strategy(&mut self, strategy: Strategy) -> Result<()> {
        backbone::set_trainability(&mut self.table, strategy)?;
        self.strategy = strategy;
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON of everything that fixes the
    /// parameter set.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Arch<'a> {
            model: &'a ModelConfig,
            adapters: &'a Option<LoraSpec>,
        }
        let json = serde_json::to_vec(&Arch {
            model: &self.config,
            adapters: &self.lora,
        })
        .expect("config serialises");
        hex(&Sha256::digest(&json))
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.table
            .specs
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.table.specs.iter().map(|s| s.numel()).sum()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Output of one bi-temporal forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOut {
    pub logits: Var,
    pub probs: Var,
}

/// A materialised network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub assembly: ModelAssembly,
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> Model<T> {
    /// Initialises every tensor from `seed`.
    pub fn new(assembly: ModelAssembly, seed: u64) -> Self {
        let params = assembly
            .table
            .specs
            .iter()
            .map(|s| Parameter::new(s.name.clone(), s.materialise(seed), s.trainable))
            .collect();
        Self { assembly, params }
    }

    pub fn build(
        config: &ModelConfig,
        strategy: Strategy,
        lora: &LoraSpec,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self::new(
            ModelAssembly::build(config, strategy, lora)?,
            seed,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.assembly.config
    }

    pub fn window(&self) -> usize {
        self.assembly.config.vit.img_size
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn set_strategy(&mut self, strategy: Strategy) -> Result<()> {
        self.assembly.set_strategy(strategy)?;
        for (p, s) in self.params.iter_mut().zip(&self.assembly.table.specs) {
            p.trainable = s.trainable;
        }
        Ok(())
    }

    /// Places every tensor on `tape`; trainable ones track gradients when
    /// `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| Ok(tape.leaf(p.tensor.clone(), with_grad && p.trainable)?))
            .collect()
    }

    fn check_input(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<()> {
        let c = self.assembly.config.vit.in_chans;
        if pre.shape() != post.shape() || pre.rank() != 3 || pre.shape()[0] != c {
            return Err(Error::Tensor(diffcore::Error::Dimension {
                op: "model_forward",
                detail: format!(
                    "pre {:?} and post {:?} must both be [{c} x H x W]",
                    pre.shape(),
                    post.shape()
                ),
            }));
        }
        Ok(())
    }

    fn stream(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        x: &Tensor<T>,
    ) -> Result<seghead::PyramidLevels> {
        let cfg = &self.assembly.config;
        let xv = tape.constant(cfg.norm.apply(x))?;
        let feats = backbone::encode(tape, v, &self.assembly.encoder, &cfg.vit, xv)?;
        let grids = feats
            .layers
            .iter()
            .map(|&t| backbone::tokens_to_grid(tape, t, feats.prefix))
            .collect::<Result<Vec<_>>>()?;
        seghead::neck_forward(tape, v, &self.assembly.neck, &grids)
    }

    /// Raw `[C x H x W]` reflectances in, `[2 x H x W]` logits out.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        pre: &Tensor<T>,
        post: &Tensor<T>,
    ) -> Result<ForwardOut> {
        self.check_input(pre, post)?;
        let p_pre = self.stream(tape, v, pre)?;
        let p_post = self.stream(tape, v, post)?;
        let z = seghead::fuse_bitemporal(tape, &p_pre, &p_post)?;
        let dense = seghead::upernet_forward(tape, v, &self.assembly.decoder, &z)?;
        let (logits, probs) = seghead::classify(
            tape,
            v,
            &self.assembly.decoder.classifier,
            dense,
            pre.shape()[1],
            pre.shape()[2],
        )?;
        Ok(ForwardOut { logits, probs })
    }

    pub fn predict_logits(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false)?;
        let out = self.forward_bound(&mut tape, &v, pre, post)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Token features of one image (after standardisation), one tensor per
    /// selected layer.
    pub fn encode_tokens(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false)?;
        let cfg = &self.assembly.config;
        let xv = tape.constant(cfg.norm.apply(x))?;
        let f = backbone::encode(&mut tape, &v, &self.assembly.encoder, &cfg.vit, xv)?;
        Ok(f.layers.iter().map(|&l| tape.value(l).clone()).collect())
    }

    /// SHA-256 over the bytes of every base encoder tensor.
    pub fn encoder_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (p, s) in self.params.iter().zip(&self.assembly.table.specs) {
            if s.component == Component::Encoder {
                h.update(p.name.as_bytes());
                for v in p.tensor.data() {
                    h.update(v.as_f64().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}
