//! Finite-difference verification of reverse-mode gradients.

use crate::{Error, Reduction, Result, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step of the fourth-order central stencil.
    pub step: f64,
    /// Coordinates sampled per input; inputs at or below this size are checked exhaustively.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator, so that coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` with the five-point
/// central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`; the
/// report carries the maximum over all sampled coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut rng = Rng::new(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            rng.permutation(n)
                .into_iter()
                .take(cfg.max_coords)
                .collect()
        };
        let analytic = grads.get(vars[ii]);
        for c in coords {
            let orig = input.data()[c];
            let mut at = |delta: f64| -> Result<f64> {
                work[ii].data_mut()[c] = orig + delta;
                let (t, _, o) = eval(&work)?;
                Ok(t.value(o).item())
            };
            let h = cfg.step;
            let num = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            work[ii].data_mut()[c] = orig;
            let ana = analytic.map_or(0.0, |g| g.data()[c]);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst = (ii, c);
                report.analytic = ana;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

/// Contracts `y` to a scalar with fixed uneven weights so that every output
/// element receives a distinct upstream gradient.
pub fn probe_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_fn(shape, |i| {
        ((i * 7919 % 97) as f64 / 97.0) - 0.4 + 0.01 * (n as f64).sqrt()
    });
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Finite-difference check of every differentiable tape op on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let mut r = |shape: &[usize]| {
        let mut t = Tensor::zeros(shape.to_vec());
        rng.fill_uniform(t.data_mut(), -1.0, 1.0);
        t
    };
    macro_rules! case {
        ($name:expr, [$($i:expr),*], |$t:ident, $v:ident| $body:expr) => {
            ($name, vec![$($i),*], Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> {
                let y = $body;
                probe_sum($t, y)
            }) as Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)
        };
    }
    let target: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    let t2 = target.clone();
    let cases: Vec<OpCase> = vec![
        case!("matmul", [r(&[3, 4]), r(&[4, 5])], |t, v| t
            .matmul(v[0], v[1])?),
        case!("matmul_nt", [r(&[3, 4]), r(&[5, 4])], |t, v| t
            .matmul_nt(v[0], v[1])?),
        case!("matmul_tn", [r(&[4, 3]), r(&[4, 5])], |t, v| t
            .matmul_ex(v[0], v[1], true, false)?),
        case!("matmul_tt", [r(&[4, 3]), r(&[5, 4])], |t, v| t
            .matmul_ex(v[0], v[1], true, true)?),
        case!("matmul_batched", [r(&[2, 3, 4]), r(&[2, 5, 4])], |t, v| t
            .matmul_ex(
            v[0], v[1], false, true
        )?),
        case!("add", [r(&[3, 4, 5]), r(&[3, 4, 5])], |t, v| t
            .add(v[0], v[1])?),
        case!("mul", [r(&[3, 4, 5]), r(&[3, 4, 5])], |t, v| t
            .mul(v[0], v[1])?),
        case!("scale", [r(&[3, 4])], |t, v| t.scale(v[0], -1.7)?),
        case!("add_broadcast", [r(&[3, 4, 5]), r(&[3])], |t, v| t
            .add_broadcast(v[0], v[1], 0)?),
        case!("mul_broadcast", [r(&[3, 4, 5]), r(&[5])], |t, v| t
            .mul_broadcast(v[0], v[1], 2)?),
        case!("gelu", [r(&[3, 4, 5])], |t, v| t.gelu(v[0])?),
        case!(
            "layer_norm_affine",
            [r(&[4, 6]), r(&[6]), r(&[6])],
            |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)?
        ),
        case!("layer_norm_weight_only", [r(&[4, 6]), r(&[6])], |t, v| t
            .layer_norm(v[0], Some(v[1]), None, 1e-6)?),
        case!("layer_norm_plain", [r(&[4, 6])], |t, v| t
            .layer_norm(v[0], None, None, 1e-6)?),
        case!("softmax_axis0", [r(&[3, 4, 5])], |t, v| t
            .softmax(v[0], 0)?),
        case!("softmax_axis1", [r(&[3, 4, 5])], |t, v| t
            .softmax(v[0], 1)?),
        case!("softmax_axis2", [r(&[3, 4, 5])], |t, v| t
            .softmax(v[0], 2)?),
        case!("concat", [r(&[2, 3, 4]), r(&[2, 1, 4])], |t, v| t
            .concat(&[v[0], v[1]], 1)?),
        case!("narrow", [r(&[2, 3, 4])], |t, v| t.narrow(v[0], 2, 1, 2)?),
        case!("reshape", [r(&[2, 3, 4])], |t, v| t
            .reshape(v[0], &[6, 4])?),
        case!("permute", [r(&[2, 3, 4])], |t, v| t
            .permute(v[0], &[2, 0, 1])?),
        case!("bilinear_resize", [r(&[2, 4, 5])], |t, v| t
            .bilinear_resize(v[0], 9, 3)?),
        case!("adaptive_avg_pool", [r(&[2, 4, 5])], |t, v| t
            .adaptive_avg_pool(v[0], 3, 6)?),
        case!("conv2d_3x3", [r(&[3, 5, 6]), r(&[4, 3, 3, 3])], |t, v| t
            .conv2d(v[0], v[1])?),
        case!("conv2d_1x1", [r(&[3, 5, 6]), r(&[4, 3, 1, 1])], |t, v| t
            .conv2d(v[0], v[1])?),
        case!("patchify", [r(&[3, 4, 6])], |t, v| t.patchify(v[0], 2)?),
        case!("patch_embed", [r(&[2, 4, 4]), r(&[8, 3])], |t, v| t
            .patch_embed(v[0], 2, v[1])?),
        case!("sum", [r(&[3, 4])], |t, v| {
            let s = t.sum(v[0])?;
            t.scale(s, 0.3)?
        }),
        case!("mean", [r(&[3, 4])], |t, v| t.mean(v[0])?),
        case!("weighted_ce_sum", [r(&[2, 3, 4])], |t, v| t.weighted_ce(
            v[0],
            &target,
            &[1.0, 3.0],
            Reduction::Sum
        )?),
        case!("weighted_ce_mean", [r(&[2, 3, 4])], |t, v| t.weighted_ce(
            v[0],
            &t2,
            &[1.0, 3.0],
            Reduction::Mean
        )?),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok((
                name,
                grad_check(|t, v| f(t, v), &inputs, &GradCheckConfig::default())?,
            ))
        })
        .collect()
}
