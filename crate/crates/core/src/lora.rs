//! Low-rank adapters: `W' = W + alpha * B A` with `B` zero at init.

use diffcore::{Rng, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::params::{Component, Init, ParamId, ParamTable};
use crate::{Error, Result};

/// Linear projections inside a transformer block that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Qkv,
    AttnOut,
    Fc1,
    Fc2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    /// Also adapt the `(C p p) -> D` patch projection.
    pub patch_embed: bool,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 1.0,
            targets: vec![LoraTarget::Qkv, LoraTarget::AttnOut],
            patch_embed: false,
        }
    }
}

impl LoraSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora.alpha must be finite".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora.targets must not be empty".into()));
        }
        Ok(())
    }

    pub fn targets(&self, t: LoraTarget) -> bool {
        self.targets.contains(&t)
    }

    /// Rank 8 on every block projection, as used for the ViT-L preset.
    pub fn prithvi() -> Self {
        Self {
            targets: vec![
                LoraTarget::Qkv,
                LoraTarget::AttnOut,
                LoraTarget::Fc1,
                LoraTarget::Fc2,
            ],
            ..Self::default()
        }
    }

    /// A note when the rank is not actually low for a `d_in -> d_out` map.
    pub fn rank_warning(&self, d_in: usize, d_out: usize) -> Option<String> {
        (self.rank >= d_in.min(d_out)).then(|| {
            format!(
                "lora rank {} is not below min(d_in, d_out) = {} for a {d_in}->{d_out} projection",
                self.rank,
                d_in.min(d_out)
            )
        })
    }
}

/// Location of one adapter's factors in a parameter table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSlot {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub alpha: f64,
}

impl AdapterSlot {
    pub fn numel(&self) -> usize {
        adapter_params(self.rank, self.d_in, self.d_out)
    }
}

/// `r * (d_in + d_out)`.
pub fn adapter_params(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

/// Registers `A [r x d_in]` and a zero `B [d_out x r]` under `prefix`.
pub fn attach(
    table: &mut ParamTable,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    spec: &LoraSpec,
) -> AdapterSlot {
    let a = table.add(
        format!("{prefix}.lora_a"),
        &[spec.rank, d_in],
        Component::Adapter,
        Init::Uniform(1.0 / (d_in as f64).sqrt()),
    );
    let b = table.add(
        format!("{prefix}.lora_b"),
        &[d_out, spec.rank],
        Component::Adapter,
        Init::Zeros,
    );
    AdapterSlot {
        a,
        b,
        rank: spec.rank,
        d_in,
        d_out,
        alpha: spec.alpha,
    }
}

/// `alpha * (x A^T) B^T` for row-major token matrices `x [N x d_in]`.
pub fn lora_delta<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    a: Var,
    b: Var,
    alpha: f64,
) -> Result<Var> {
    let low = tape.matmul_nt(x, a)?;
    let up = tape.matmul_nt(low, b)?;
    Ok(tape.scale(up, alpha)?)
}

/// Dense equivalent `W + alpha * B A` of an adapted weight `W [d_out x d_in]`.
pub fn merge_dense<T: Scalar>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = a.shape()[0];
    if a.shape() != [r, d_in] || b.shape() != [d_out, r] || w.rank() != 2 {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "merge_dense",
            detail: format!("W {:?}, A {:?}, B {:?}", w.shape(), a.shape(), b.shape()),
        }));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = w.clone();
    let alpha = T::from_f64(alpha);
    for o in 0..d_out {
        for i in 0..d_in {
            let mut acc = T::zero();
            for k in 0..r {
                acc += bd[o * r + k] * ad[k * d_in + i];
            }
            out.data_mut()[o * d_in + i] += alpha * acc;
        }
    }
    Ok(out)
}

/// A free-standing adapter around a frozen dense weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(rank: usize, d_in: usize, d_out: usize, alpha: f64, rng: &mut Rng) -> Self {
        let mut a = Tensor::zeros(vec![rank, d_in]);
        rng.fill_uniform(
            a.data_mut(),
            -1.0 / (d_in as f64).sqrt(),
            1.0 / (d_in as f64).sqrt(),
        );
        Self {
            a,
            b: Tensor::zeros(vec![d_out, rank]),
            alpha,
        }
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `y = x W^T + alpha (x A^T) B^T` with `W` held constant.
    pub fn forward(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let wv = tape.constant(w.clone())?;
        let av = tape.constant(self.a.clone())?;
        let bv = tape.constant(self.b.clone())?;
        let base = tape.matmul_nt(xv, wv)?;
        let d = lora_delta(&mut tape, xv, av, bv, self.alpha)?;
        let y = tape.add(base, d)?;
        Ok(tape.value(y).clone())
    }

    pub fn merge(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        merge_dense(w, &self.a, &self.b, self.alpha)
    }
}

/// Adapter parameter counts of an assembly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraCount {
    pub per_block: Vec<usize>,
    pub patch_embed: usize,
    pub total: usize,
}

/// Sums `r (d_in + d_out)` over every attached adapter.
pub fn count_lora_params(assembly: &crate::ModelAssembly) -> LoraCount {
    let enc = &assembly.encoder;
    let per_block: Vec<usize> = enc
        .blocks
        .iter()
        .map(|b| {
            [&b.qkv, &b.attn_out, &b.fc1, &b.fc2]
                .iter()
                .filter_map(|l| l.adapter.as_ref())
                .map(AdapterSlot::numel)
                .sum()
        })
        .collect();
    let patch_embed = enc.patch_adapter.as_ref().map_or(0, AdapterSlot::numel);
    LoraCount {
        total: per_block.iter().sum::<usize>() + patch_embed,
        per_block,
        patch_embed,
    }
}

/// Copy of an adapted model with every adapter folded into its base weight
/// and the adapters removed.
pub fn merged_model<T: Scalar>(model: &crate::Model<T>) -> Result<crate::Model<T>> {
    let a = &model.assembly;
    let plain =
        crate::ModelAssembly::build_with_adapters(&a.config, crate::Strategy::DecoderOnly, None)?;
    let mut out = crate::Model::new(plain, 0);
    let enc = &a.encoder;
    let value = |id: ParamId| &model.params[id.0].tensor;
    let mut merged: Vec<(ParamId, Tensor<T>)> = Vec::new();
    if let Some(ad) = &enc.patch_adapter {
        // The patch projection is stored transposed, `[(C p p) x D]`.
        let w = value(enc.patch_weight);
        let wt = transpose(w);
        merged.push((
            enc.patch_weight,
            transpose(&merge_dense(&wt, value(ad.a), value(ad.b), ad.alpha)?),
        ));
    }
    for b in &enc.blocks {
        for l in [&b.qkv, &b.attn_out, &b.fc1, &b.fc2] {
            if let Some(ad) = &l.adapter {
                merged.push((
                    l.weight,
                    merge_dense(value(l.weight), value(ad.a), value(ad.b), ad.alpha)?,
                ));
            }
        }
    }
    for (dst, spec) in out.params.iter_mut().zip(&out.assembly.table.specs) {
        let src = a
            .table
            .specs
            .iter()
            .position(|s| s.name == spec.name)
            .ok_or_else(|| {
                Error::Invariant(format!("tensor {} missing from adapted model", spec.name))
            })?;
        dst.tensor = match merged.iter().find(|(id, _)| id.0 == src) {
            Some((_, t)) => t.clone(),
            None => model.params[src].tensor.clone(),
        };
    }
    Ok(out)
}

fn transpose<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::from_fn(vec![c, r], |i| d[(i % r) * c + i / r])
}
