//! Layer-wise relevance propagation.
//!
//! Hidden linear layers use the z+ rule
//!
//! ```text
//! R_in[i] = sum_j x[i] w+[j,i] / (sum_k x[k] w+[j,k] + D_j + eps) * R_out[j]
//! ```
//!
//! and the first linear layer, whose inputs lie in the box `[low, high]`,
//! uses the zB rule with numerators `(x[i] - low) w+[j,i] + (x[i] - high) w-[j,i]`
//! (the same quantity as `x w - low w+ - high w-`, written so every term is
//! non-negative). `D_j` is the positive part of the bias under
//! [`BiasPolicy::AbsorbInDenominator`] and zero otherwise.
//!
//! Each step also reports how much relevance it did not pass down (taken by
//! bias and stabilizer terms, or by columns with a zero denominator), so that
//! `sum(R_in) + absorbed == sum(R_out)` holds up to rounding at every layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Conv2d, Dense, Layer, Network};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPolicy {
    /// Positive biases are an error.
    RequireNonpositive,
    /// Positive biases join the denominator and soak up their share.
    AbsorbInDenominator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRule {
    WinnerTakeAll,
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedClass {
    Argmax,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    pub bias_policy: BiasPolicy,
    pub pool_rule: PoolRule,
    pub stabilizer_epsilon: f64,
    pub seed_class: SeedClass,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            bias_policy: BiasPolicy::AbsorbInDenominator,
            pool_rule: PoolRule::WinnerTakeAll,
            stabilizer_epsilon: DEFAULT_EPSILON,
            seed_class: SeedClass::Argmax,
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stabilizer_epsilon >= 0.0 && self.stabilizer_epsilon.is_finite()) {
            return Err(Error::Value(format!(
                "stabilizer epsilon must be finite and >= 0, got {}",
                self.stabilizer_epsilon
            )));
        }
        Ok(())
    }
}

impl FromStr for BiasPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "require_nonpositive" => Ok(BiasPolicy::RequireNonpositive),
            "absorb_in_denominator" => Ok(BiasPolicy::AbsorbInDenominator),
            _ => Err(Error::Value(format!(
                "unknown bias policy {s:?} (expected require_nonpositive or absorb_in_denominator)"
            ))),
        }
    }
}

impl FromStr for PoolRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "winner_take_all" => Ok(PoolRule::WinnerTakeAll),
            "proportional" => Ok(PoolRule::Proportional),
            _ => Err(Error::Value(format!(
                "unknown pool rule {s:?} (expected winner_take_all or proportional)"
            ))),
        }
    }
}

/// Result of one backward step.
#[derive(Debug, Clone)]
pub struct Propagated {
    /// Relevance of the layer input, shaped like the input activation.
    pub relevance: Tensor,
    /// Relevance kept by bias/stabilizer terms or dropped by zero-denominator columns.
    pub absorbed: f64,
    /// Zero-denominator columns (linear layers) or all-zero windows (pooling).
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    ZPlus,
    ZBox,
    PoolWinnerTakeAll,
    PoolProportional,
    PassThrough,
    BypassIdentity,
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepRule::ZPlus => "z+",
            StepRule::ZBox => "zB",
            StepRule::PoolWinnerTakeAll => "wta",
            StepRule::PoolProportional => "proportional",
            StepRule::PassThrough => "pass",
            StepRule::BypassIdentity => "bypass",
        })
    }
}

fn pos(v: f64) -> f64 {
    v.max(0.0)
}

fn neg(v: f64) -> f64 {
    v.min(0.0)
}

/// Per-output additive denominator term and the policy check.
fn bias_terms(bias: &[f64], cfg: &LrpConfig) -> Result<Vec<f64>> {
    match cfg.bias_policy {
        BiasPolicy::AbsorbInDenominator => Ok(bias.iter().map(|&b| pos(b)).collect()),
        BiasPolicy::RequireNonpositive => match bias.iter().position(|&b| b > 0.0) {
            Some(j) => Err(Error::Policy(format!(
                "bias[{j}] = {} is positive under require_nonpositive",
                bias[j]
            ))),
            None => Ok(vec![0.0; bias.len()]),
        },
    }
}

fn check_nonnegative(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|&v| v < 0.0) {
        Some(i) => Err(Error::Precondition(format!(
            "z+ rule needs non-negative inputs, input[{i}] = {}",
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_box(x: &Tensor, low: f64, high: f64) -> Result<()> {
    if low > high {
        return Err(Error::Value(format!(
            "box bounds [{low}, {high}] are inverted"
        )));
    }
    match x.data().iter().position(|&v| v < low || v > high) {
        Some(i) => Err(Error::Precondition(format!(
            "zB rule needs inputs in [{low}, {high}], input[{i}] = {}",
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Turns denominators into per-output scale factors `R_out / den`, and totals
/// what the bias/stabilizer terms and degenerate columns keep.
fn scale_factors(r_out: &[f64], z: &[f64], extra: &[f64], eps: f64) -> (Vec<f64>, f64, usize) {
    let mut absorbed = 0.0;
    let mut degenerate = 0;
    let s = r_out
        .iter()
        .zip(z)
        .zip(extra)
        .map(|((&r, &z), &d)| {
            let den = z + d + eps;
            if den == 0.0 {
                if r != 0.0 {
                    degenerate += 1;
                    absorbed += r;
                }
                0.0
            } else {
                let s = r / den;
                absorbed += s * (d + eps);
                s
            }
        })
        .collect();
    (s, absorbed, degenerate)
}

/// Which linear map a rule runs on: the dense matrix or the convolution.
enum Linear<'a> {
    Dense(&'a Dense),
    Conv(&'a Conv2d),
}

impl Linear<'_> {
    fn bias(&self) -> &[f64] {
        match self {
            Linear::Dense(d) => d.bias().data(),
            Linear::Conv(c) => c.bias().data(),
        }
    }

    fn out_len(&self, in_shape: &[usize]) -> Result<usize> {
        match self {
            Linear::Dense(d) => Ok(d.out_features()),
            Linear::Conv(c) => Ok(c.output_shape(in_shape)?.iter().product()),
        }
    }

    /// `sum_i f(w[j,i]) * v[i]` for every output `j`, without bias.
    fn forward(&self, f: fn(f64) -> f64, v: &Tensor) -> Result<Vec<f64>> {
        match self {
            Linear::Dense(d) => {
                let w = d.weights().map(f)?;
                let zero = Tensor::zeros(vec![d.out_features()])?;
                let v = if v.rank() == 1 {
                    v.clone()
                } else {
                    kernels::flatten(v)?
                };
                Ok(kernels::dense_forward(&w, &zero, &v)?.into_data())
            }
            Linear::Conv(c) => {
                let k = c.kernel().map(f)?;
                let zero = Tensor::zeros(vec![c.out_channels()])?;
                Ok(kernels::conv2d_forward(&k, &zero, v, c.stride(), c.padding())?.into_data())
            }
        }
    }

    /// `sum_j f(w[j,i]) * s[j]` for every input `i` (transpose product).
    fn backward(&self, f: fn(f64) -> f64, s: &[f64], in_shape: &[usize]) -> Vec<f64> {
        match self {
            Linear::Dense(d) => {
                let (rows, cols) = (d.out_features(), d.in_features());
                let w = d.weights().data();
                par::map_range(cols, |i| {
                    let mut acc = 0.0;
                    for j in 0..rows {
                        acc += f(w[j * cols + i]) * s[j];
                    }
                    acc
                })
            }
            Linear::Conv(c) => conv_transpose(c, f, s, in_shape),
        }
    }
}

/// Transposed convolution of `s` (shaped like the conv output) with `f(kernel)`.
fn conv_transpose(conv: &Conv2d, f: fn(f64) -> f64, s: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let ks = conv.kernel().shape();
    let (oc, ic, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (stride, pad) = (conv.stride(), conv.padding());
    let oh = kernels::window_extent(h, kh, stride, pad).expect("validated geometry");
    let ow = kernels::window_extent(w, kw, stride, pad).expect("validated geometry");
    let k = conv.kernel().data();

    let mut out = vec![0.0; ic * h * w];
    par::for_each_chunk(&mut out, h * w, |c, plane| {
        for o in 0..oc {
            let splane = &s[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..kh {
                let oys = kernels::valid_outputs(ky, h, oh, stride, pad);
                for kx in 0..kw {
                    let tap = f(k[((o * ic + c) * kh + ky) * kw + kx]);
                    if tap == 0.0 {
                        continue;
                    }
                    let oxs = kernels::valid_outputs(kx, w, ow, stride, pad);
                    for oy in oys.clone() {
                        let iy = oy * stride + ky - pad;
                        for ox in oxs.clone() {
                            plane[iy * w + ox * stride + kx - pad] += tap * splane[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

fn zplus(x_in: &Tensor, layer: Linear<'_>, r_out: &Tensor, cfg: &LrpConfig) -> Result<Propagated> {
    cfg.validate()?;
    check_nonnegative(x_in)?;
    let out_len = layer.out_len(x_in.shape())?;
    if r_out.len() != out_len {
        return Err(Error::Dimension(format!(
            "relevance {:?} does not match layer output of {out_len} elements",
            r_out.shape()
        )));
    }
    let extra = bias_terms(layer.bias(), cfg)?;
    let extra = expand_bias(&extra, out_len);
    let z = layer.forward(pos, x_in)?;
    let (s, absorbed, degenerate) = scale_factors(r_out.data(), &z, &extra, cfg.stabilizer_epsilon);
    let back = layer.backward(pos, &s, x_in.shape());
    let r_in = x_in.data().iter().zip(&back).map(|(x, c)| x * c).collect();
    Ok(Propagated {
        relevance: Tensor::from_kernel(x_in.shape().to_vec(), r_in)?,
        absorbed,
        degenerate,
    })
}

fn zbox(
    x_in: &Tensor,
    layer: Linear<'_>,
    low: f64,
    high: f64,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    cfg.validate()?;
    check_box(x_in, low, high)?;
    let out_len = layer.out_len(x_in.shape())?;
    if r_out.len() != out_len {
        return Err(Error::Dimension(format!(
            "relevance {:?} does not match layer output of {out_len} elements",
            r_out.shape()
        )));
    }
    let extra = bias_terms(layer.bias(), cfg)?;
    let extra = expand_bias(&extra, out_len);
    let above_low = x_in.map(|x| x - low)?;
    let below_high = x_in.map(|x| x - high)?;
    let zp = layer.forward(pos, &above_low)?;
    let zn = layer.forward(neg, &below_high)?;
    let z: Vec<f64> = zp.iter().zip(&zn).map(|(a, b)| a + b).collect();
    let (s, absorbed, degenerate) = scale_factors(r_out.data(), &z, &extra, cfg.stabilizer_epsilon);
    let bp = layer.backward(pos, &s, x_in.shape());
    let bn = layer.backward(neg, &s, x_in.shape());
    let r_in = above_low
        .data()
        .iter()
        .zip(below_high.data())
        .zip(bp.iter().zip(&bn))
        .map(|((a, b), (p, n))| a * p + b * n)
        .collect();
    Ok(Propagated {
        relevance: Tensor::from_kernel(x_in.shape().to_vec(), r_in)?,
        absorbed,
        degenerate,
    })
}

/// Per-channel conv bias terms repeated over output positions.
fn expand_bias(per_unit: &[f64], out_len: usize) -> Vec<f64> {
    let plane = out_len / per_unit.len();
    per_unit
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, plane))
        .collect()
}

pub fn lrp_dense_zplus(
    x_in: &Tensor,
    dense: &Dense,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    zplus(x_in, Linear::Dense(dense), r_out, cfg)
}

pub fn lrp_dense_zb(
    x_in: &Tensor,
    dense: &Dense,
    low: f64,
    high: f64,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    zbox(x_in, Linear::Dense(dense), low, high, r_out, cfg)
}

pub fn lrp_conv_zplus(
    x_in: &Tensor,
    conv: &Conv2d,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    zplus(x_in, Linear::Conv(conv), r_out, cfg)
}

pub fn lrp_conv_zb(
    x_in: &Tensor,
    conv: &Conv2d,
    low: f64,
    high: f64,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    zbox(x_in, Linear::Conv(conv), low, high, r_out, cfg)
}

/// Pooling relevance. Max pooling with [`PoolRule::WinnerTakeAll`] routes each
/// output cell to its recorded winner; everything else splits in proportion to
/// the window inputs, uniformly when a window sums to zero.
pub fn lrp_pool(
    x_in: &Tensor,
    layer: &Layer,
    argmax: Option<&[usize]>,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Result<Propagated> {
    let (window, stride, is_max) = match layer {
        Layer::MaxPool { window, stride } => (*window, *stride, true),
        Layer::AvgPool { window, stride } => (*window, *stride, false),
        other => {
            return Err(Error::Value(format!(
                "lrp_pool called on a {} layer",
                other.kind()
            )))
        }
    };
    let [c, oh, ow] = kernels::pool_output_shape(x_in.shape(), window, stride)?;
    if r_out.len() != c * oh * ow {
        return Err(Error::Dimension(format!(
            "relevance {:?} does not match pooled shape [{c}, {oh}, {ow}]",
            r_out.shape()
        )));
    }
    let (h, w) = (x_in.shape()[1], x_in.shape()[2]);
    let x = x_in.data();
    let r = r_out.data();
    let mut r_in = vec![0.0; x.len()];
    let mut degenerate = 0;

    if is_max && cfg.pool_rule == PoolRule::WinnerTakeAll {
        let arg = argmax.ok_or_else(|| {
            Error::Precondition("winner-take-all pooling needs the forward argmax map".into())
        })?;
        if arg.len() != r.len() {
            return Err(Error::Dimension(format!(
                "argmax map has {} entries, relevance has {}",
                arg.len(),
                r.len()
            )));
        }
        for (&i, &v) in arg.iter().zip(r) {
            r_in[i] += v;
        }
    } else {
        let n = (window[0] * window[1]) as f64;
        for (o, &ro) in r.iter().enumerate() {
            let ch = o / (oh * ow);
            let (oy, ox) = ((o / ow) % oh, o % ow);
            let idx = |ky: usize, kx: usize| ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
            let mut total = 0.0;
            for ky in 0..window[0] {
                for kx in 0..window[1] {
                    total += x[idx(ky, kx)];
                }
            }
            let share = if total == 0.0 {
                degenerate += 1;
                None
            } else {
                Some(ro / total)
            };
            for ky in 0..window[0] {
                for kx in 0..window[1] {
                    let i = idx(ky, kx);
                    r_in[i] += match share {
                        Some(s) => x[i] * s,
                        None => ro / n,
                    };
                }
            }
        }
    }
    Ok(Propagated {
        relevance: Tensor::from_kernel(x_in.shape().to_vec(), r_in)?,
        absorbed: 0.0,
        degenerate,
    })
}

/// Per-layer relevance from the logits back to the input.
#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    /// `relevances[0]` is the input relevance, `relevances[i + 1]` the relevance
    /// of layer `i`'s output; shapes match the forward activations.
    pub relevances: Vec<Tensor>,
    pub sums: Vec<f64>,
    /// Relevance layer `i` did not pass from its output to its input.
    pub absorbed: Vec<f64>,
    pub degenerate: Vec<usize>,
    pub rules: Vec<StepRule>,
    pub seed_class: usize,
    pub seed_logit: f64,
    pub warnings: Vec<String>,
}

impl RelevanceTrace {
    pub fn input_relevance(&self) -> &Tensor {
        &self.relevances[0]
    }

    /// `|sum(R_in) + absorbed - sum(R_out)|` at layer `i`, relative to the seed.
    pub fn conservation_error(&self, i: usize) -> f64 {
        let scale = self.sums[self.sums.len() - 1].abs().max(f64::MIN_POSITIVE);
        (self.sums[i] + self.absorbed[i] - self.sums[i + 1]).abs() / scale
    }

    pub fn max_conservation_error(&self) -> f64 {
        (0..self.absorbed.len())
            .map(|i| self.conservation_error(i))
            .fold(0.0, f64::max)
    }

    /// Checks the relevance balance at every layer within `rel_tol`, and that
    /// no layer creates relevance (absorption never opposes the seed's sign).
    pub fn check_conservation(&self, rel_tol: f64) -> Result<()> {
        let seed = self.sums[self.sums.len() - 1];
        for i in 0..self.absorbed.len() {
            let err = self.conservation_error(i);
            if err > rel_tol {
                return Err(Error::Invariant(format!(
                    "layer {i}: sum(R_in) {} + absorbed {} differs from sum(R_out) {} by {err:e} relative",
                    self.sums[i], self.absorbed[i], self.sums[i + 1]
                )));
            }
            if self.absorbed[i] * seed < -rel_tol * seed * seed {
                return Err(Error::Invariant(format!(
                    "layer {i}: relevance grew (absorbed {} against seed {seed})",
                    self.absorbed[i]
                )));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            seed_class: self.seed_class,
            seed_logit: self.seed_logit,
            sums: self.sums.clone(),
            absorbed: self.absorbed.clone(),
            degenerate: self.degenerate.clone(),
            rules: self.rules.iter().map(ToString::to_string).collect(),
            max_conservation_error: self.max_conservation_error(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceSummary {
    pub seed_class: usize,
    pub seed_logit: f64,
    pub sums: Vec<f64>,
    pub absorbed: Vec<f64>,
    pub degenerate: Vec<usize>,
    pub rules: Vec<String>,
    pub max_conservation_error: f64,
    pub warnings: Vec<String>,
}

/// Forward pass, then relevance propagation seeded with the chosen class's raw logit.
pub fn explain(network: &Network, input: &Tensor, cfg: &LrpConfig) -> Result<RelevanceTrace> {
    cfg.validate()?;
    let fp = network.forward(input)?;
    let logits = fp.logits();
    let class = match cfg.seed_class {
        SeedClass::Argmax => logits.argmax(),
        SeedClass::Index(k) if k < network.class_count() => k,
        SeedClass::Index(k) => {
            return Err(Error::Value(format!(
                "seed class {k} out of range for {} classes",
                network.class_count()
            )))
        }
    };
    let mut seed = vec![0.0; logits.len()];
    seed[class] = logits.data()[class];
    let seed = Tensor::from_kernel(logits.shape().to_vec(), seed)?;
    let mut trace = propagate(network, &fp, &seed, cfg)?;
    trace.seed_class = class;
    Ok(trace)
}

/// Backward pass from an arbitrary seed relevance over the logits.
pub fn propagate(
    network: &Network,
    fp: &crate::model::ForwardPass,
    seed: &Tensor,
    cfg: &LrpConfig,
) -> Result<RelevanceTrace> {
    cfg.validate()?;
    let layers = network.layers();
    if seed.shape() != fp.logits().shape() {
        return Err(Error::Dimension(format!(
            "seed {:?} does not match logits {:?}",
            seed.shape(),
            fp.logits().shape()
        )));
    }
    let first_linear = layers.iter().position(Layer::is_linear);
    let mut warnings = Vec::new();
    let seed_logit = seed.sum();
    if seed_logit < 0.0 {
        warnings.push(format!(
            "seed relevance {seed_logit} is negative; relevance maps will be non-positive"
        ));
    }

    let n = layers.len();
    let mut relevances = vec![seed.clone(); n + 1];
    let mut absorbed = vec![0.0; n];
    let mut degenerate = vec![0; n];
    let mut rules = vec![StepRule::PassThrough; n];

    for i in (0..n).rev() {
        let r_out = &relevances[i + 1];
        let x_in = &fp.activations[i];
        let step = (|| -> Result<(Propagated, StepRule)> {
            match &layers[i] {
                Layer::Dense(_) | Layer::Conv2d(_) => {
                    // Behind bypassed BNs, redistribute over the pre-normalization activations.
                    let mut src = i;
                    while src > 0
                        && matches!(layers[src - 1], Layer::BatchNorm { bypass: true, .. })
                    {
                        src -= 1;
                    }
                    let x = &fp.activations[src];
                    let linear = match &layers[i] {
                        Layer::Dense(d) => Linear::Dense(d),
                        Layer::Conv2d(c) => Linear::Conv(c),
                        _ => unreachable!(),
                    };
                    if Some(i) == first_linear {
                        let low = network.input_low();
                        let high = network.input_high();
                        Ok((zbox(x, linear, low, high, r_out, cfg)?, StepRule::ZBox))
                    } else {
                        Ok((zplus(x, linear, r_out, cfg)?, StepRule::ZPlus))
                    }
                }
                Layer::BatchNorm { bypass: true, .. } => Ok((
                    Propagated {
                        relevance: r_out.clone(),
                        absorbed: 0.0,
                        degenerate: 0,
                    },
                    StepRule::BypassIdentity,
                )),
                Layer::BatchNorm { bypass: false, .. } => Err(Error::Precondition(
                    "batch-norm layer left in the network; fuse it or use the bypass policy".into(),
                )),
                Layer::Relu | Layer::Flatten => Ok((
                    Propagated {
                        relevance: r_out.reshape(x_in.shape().to_vec())?,
                        absorbed: 0.0,
                        degenerate: 0,
                    },
                    StepRule::PassThrough,
                )),
                pool @ (Layer::MaxPool { .. } | Layer::AvgPool { .. }) => {
                    let rule = if matches!(pool, Layer::MaxPool { .. })
                        && cfg.pool_rule == PoolRule::WinnerTakeAll
                    {
                        StepRule::PoolWinnerTakeAll
                    } else {
                        StepRule::PoolProportional
                    };
                    let p = lrp_pool(x_in, pool, fp.argmaxes[i].as_deref(), r_out, cfg)?;
                    Ok((p, rule))
                }
            }
        })()
        .map_err(|e| e.at_layer(i))?;
        let (p, rule) = step;
        if p.degenerate > 0 {
            warnings.push(format!(
                "layer {i}: {} degenerate column(s)/window(s) (zero denominator)",
                p.degenerate
            ));
        }
        absorbed[i] = p.absorbed;
        degenerate[i] = p.degenerate;
        rules[i] = rule;
        relevances[i] = p.relevance;
    }

    let sums = relevances.iter().map(Tensor::sum).collect();
    Ok(RelevanceTrace {
        relevances,
        sums,
        absorbed,
        degenerate,
        rules,
        seed_class: seed.argmax(),
        seed_logit,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn dense(w: &[f64], rows: usize, b: &[f64]) -> Dense {
        Dense::new(t(&[rows, w.len() / rows], w), t(&[rows], b)).unwrap()
    }

    fn exact() -> LrpConfig {
        LrpConfig {
            stabilizer_epsilon: 0.0,
            ..LrpConfig::default()
        }
    }

    #[test]
    fn zplus_examples() {
        let d = dense(&[1.0, -1.0], 1, &[0.0]);
        let p = lrp_dense_zplus(&t(&[2], &[1.0, 2.0]), &d, &t(&[1], &[1.0]), &exact()).unwrap();
        assert_eq!(p.relevance.data(), &[1.0, 0.0]);

        let d = dense(&[1.0, 1.0], 1, &[0.0]);
        let p = lrp_dense_zplus(&t(&[2], &[1.0, 1.0]), &d, &t(&[1], &[4.0]), &exact()).unwrap();
        assert_eq!(p.relevance.data(), &[2.0, 2.0]);
        assert_eq!(p.absorbed, 0.0);
    }

    #[test]
    fn zplus_rejects_negative_inputs_and_positive_bias() {
        let d = dense(&[1.0, 1.0], 1, &[0.5]);
        let err =
            lrp_dense_zplus(&t(&[2], &[-1.0, 1.0]), &d, &t(&[1], &[1.0]), &exact()).unwrap_err();
        assert_eq!(err.category(), "precondition");

        let cfg = LrpConfig {
            bias_policy: BiasPolicy::RequireNonpositive,
            ..exact()
        };
        let err = lrp_dense_zplus(&t(&[2], &[1.0, 1.0]), &d, &t(&[1], &[1.0]), &cfg).unwrap_err();
        assert_eq!(err.category(), "policy");

        // absorbed: denominator 2 + 0.5, so 0.5 / 2.5 of the relevance stays behind
        let p = lrp_dense_zplus(&t(&[2], &[1.0, 1.0]), &d, &t(&[1], &[1.0]), &exact()).unwrap();
        assert!((p.relevance.sum() - 0.8).abs() < 1e-15);
        assert!((p.absorbed - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_column_is_dropped() {
        let d = dense(&[-1.0, -1.0], 1, &[0.0]);
        let p = lrp_dense_zplus(&t(&[2], &[1.0, 1.0]), &d, &t(&[1], &[3.0]), &exact()).unwrap();
        assert_eq!(p.relevance.data(), &[0.0, 0.0]);
        assert_eq!(p.degenerate, 1);
        assert_eq!(p.absorbed, 3.0);
    }

    #[test]
    fn zb_examples() {
        let d = dense(&[2.0], 1, &[0.0]);
        let p = lrp_dense_zb(&t(&[1], &[0.5]), &d, -1.0, 1.0, &t(&[1], &[1.0]), &exact()).unwrap();
        assert_eq!(p.relevance.data(), &[1.0]);

        // input pinned at the lower bound with positive weights
        let d = dense(&[0.5, 2.0], 1, &[0.0]);
        let cfg = LrpConfig::default();
        let p = lrp_dense_zb(
            &t(&[2], &[-1.0, -1.0]),
            &d,
            -1.0,
            1.0,
            &t(&[1], &[1.0]),
            &cfg,
        )
        .unwrap();
        assert_eq!(p.relevance.data(), &[0.0, 0.0]);

        let err = lrp_dense_zb(
            &t(&[1], &[1.5]),
            &dense(&[1.0], 1, &[0.0]),
            -1.0,
            1.0,
            &t(&[1], &[1.0]),
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err.category(), "precondition");
    }

    #[test]
    fn identity_conv_passes_relevance() {
        let c = Conv2d::new(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1, 0).unwrap();
        let x = t(&[1, 2, 2], &[0.5, 1.0, 2.0, 0.25]);
        let r = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = lrp_conv_zplus(&x, &c, &r, &exact()).unwrap();
        assert_eq!(p.relevance.data(), r.data());
    }

    #[test]
    fn pooling_rules() {
        let x = t(&[1, 2, 2], &[1.0, 3.0, 2.0, 0.0]);
        let pool = Layer::MaxPool {
            window: [2, 2],
            stride: 2,
        };
        let (_, arg) = kernels::maxpool(&x, [2, 2], 2).unwrap();
        let r = t(&[1, 1, 1], &[1.0]);
        let p = lrp_pool(&x, &pool, Some(&arg), &r, &LrpConfig::default()).unwrap();
        assert_eq!(p.relevance.data(), &[0.0, 1.0, 0.0, 0.0]);

        let flat = t(&[1, 2, 2], &[2.0; 4]);
        let cfg = LrpConfig {
            pool_rule: PoolRule::Proportional,
            ..LrpConfig::default()
        };
        let p = lrp_pool(&flat, &pool, None, &t(&[1, 1, 1], &[2.0]), &cfg).unwrap();
        assert_eq!(p.relevance.data(), &[0.5; 4]);

        let zeros = t(&[1, 2, 2], &[0.0; 4]);
        let avg = Layer::AvgPool {
            window: [2, 2],
            stride: 2,
        };
        let p = lrp_pool(&zeros, &avg, None, &t(&[1, 1, 1], &[1.0]), &cfg).unwrap();
        assert_eq!(p.relevance.data(), &[0.25; 4]);
        assert_eq!(p.degenerate, 1);
    }

    #[test]
    fn explain_identity_network() {
        let d = dense(&[1.0], 1, &[0.0]);
        let n = Network::new(vec![Layer::Dense(d)], vec![1], -1.0, 1.0, 1).unwrap();
        let trace = explain(&n, &t(&[1], &[0.7]), &exact()).unwrap();
        assert_eq!(trace.relevances.len(), 2);
        assert!((trace.input_relevance().sum() - 0.7).abs() < 1e-15);
        assert_eq!(trace.rules, vec![StepRule::ZBox]);
    }

    #[test]
    fn explicit_seed_class_out_of_range() {
        let d = dense(&[1.0, 0.0], 2, &[0.0, 0.0]);
        let n = Network::new(vec![Layer::Dense(d)], vec![1], -1.0, 1.0, 2).unwrap();
        let cfg = LrpConfig {
            seed_class: SeedClass::Index(2),
            ..exact()
        };
        assert_eq!(
            explain(&n, &t(&[1], &[0.5]), &cfg).unwrap_err().category(),
            "value"
        );
    }

    #[test]
    fn unfused_batchnorm_is_rejected() {
        let bn = crate::tensor::BnParams::identity(1).unwrap();
        let d = dense(&[1.0], 1, &[0.0]);
        let layers = vec![
            Layer::Dense(d),
            Layer::Relu,
            Layer::BatchNorm {
                params: bn,
                placement: None,
                bypass: false,
            },
        ];
        let n = Network::new(layers, vec![1], -1.0, 1.0, 1).unwrap();
        let err = explain(&n, &t(&[1], &[0.5]), &exact()).unwrap_err();
        assert_eq!(err.category(), "precondition");
        assert!(matches!(err, Error::AtLayer { index: 2, .. }));
    }

    #[test]
    fn negative_seed_is_a_warning() {
        let d = dense(&[-1.0], 1, &[0.0]);
        let n = Network::new(vec![Layer::Dense(d)], vec![1], -1.0, 1.0, 1).unwrap();
        let trace = explain(&n, &t(&[1], &[0.5]), &exact()).unwrap();
        assert!(trace.seed_logit < 0.0);
        assert!(!trace.warnings.is_empty());
    }
}
