//! Folding batch-norm into neighbouring dense and convolution layers, and
//! lowering convolutions to equivalent dense layers.
//!
//! With `s = gamma / sigma` and `t = beta - s * mu` per channel:
//!
//! | rule         | arrangement      | weights                 | bias                                   |
//! |--------------|------------------|-------------------------|----------------------------------------|
//! | `dense_pre`  | BN -> Dense      | `w[j,i] * s[i]`         | `b[j] + sum_i w[j,i] * t[i]`           |
//! | `dense_post` | Dense -> BN      | `w[j,i] * s[j]`         | `beta[j] + s[j] * (b[j] - mu[j])`      |
//! | `conv_pre`   | BN -> Conv       | `k[o,c,..] * s[c]`      | `b[o] + sum_{c,taps} k[o,c,..] * t[c]` |
//! | `conv_post`  | Conv -> BN       | `k[o,..] * s[o]`        | `beta[o] + s[o] * (b[o] - mu[o])`      |
//!
//! `conv_pre` is only exact without padding: padded taps read a literal zero,
//! not a normalized zero. Padded or per-element cases go through
//! [`lower_conv_to_dense`] and the dense rules instead.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::valid_outputs;
use crate::model::{Conv2d, Dense, Layer, Network, Placement};
use crate::tensor::{BnParams, Tensor};

pub fn fuse_bn_dense_pre(bn: &BnParams, dense: &Dense) -> Result<Dense> {
    let (rows, cols) = (dense.out_features(), dense.in_features());
    if bn.len() != cols {
        return Err(Error::Dimension(format!(
            "batch-norm of length {} cannot feed dense layer with {cols} inputs",
            bn.len()
        )));
    }
    let w = dense.weights().data();
    let scale: Vec<f64> = (0..cols).map(|i| bn.scale(i)).collect();
    let shift: Vec<f64> = (0..cols).map(|i| bn.shift(i)).collect();

    let mut weights = Vec::with_capacity(rows * cols);
    let mut bias = Vec::with_capacity(rows);
    for j in 0..rows {
        let row = &w[j * cols..(j + 1) * cols];
        weights.extend(row.iter().zip(&scale).map(|(a, s)| a * s));
        let offset: f64 = row.iter().zip(&shift).map(|(a, t)| a * t).sum();
        bias.push(dense.bias().data()[j] + offset);
    }
    rebuild_dense(dense, weights, bias)
}

pub fn fuse_bn_dense_post(dense: &Dense, bn: &BnParams) -> Result<Dense> {
    let (rows, cols) = (dense.out_features(), dense.in_features());
    if bn.len() != rows {
        return Err(Error::Dimension(format!(
            "dense layer with {rows} outputs cannot feed batch-norm of length {}",
            bn.len()
        )));
    }
    let w = dense.weights().data();
    let b = dense.bias().data();
    let mut weights = Vec::with_capacity(rows * cols);
    let mut bias = Vec::with_capacity(rows);
    for j in 0..rows {
        let s = bn.scale(j);
        weights.extend(w[j * cols..(j + 1) * cols].iter().map(|a| a * s));
        bias.push(bn.beta()[j] + s * (b[j] - bn.mu_run()[j]));
    }
    rebuild_dense(dense, weights, bias)
}

fn rebuild_dense(template: &Dense, weights: Vec<f64>, bias: Vec<f64>) -> Result<Dense> {
    let d = Dense::new(
        Tensor::new(template.weights().shape().to_vec(), weights)?,
        Tensor::from_vec(bias)?,
    )?;
    match template.output_shape() {
        Some(s) => d.with_output_shape(s.to_vec()),
        None => Ok(d),
    }
}

pub fn fuse_bn_conv_post(conv: &Conv2d, bn: &BnParams) -> Result<Conv2d> {
    let oc = conv.out_channels();
    if bn.len() != oc {
        return Err(Error::Dimension(format!(
            "conv with {oc} output channels cannot feed batch-norm of length {}",
            bn.len()
        )));
    }
    let per_oc = conv.kernel().len() / oc;
    let k = conv.kernel().data();
    let b = conv.bias().data();
    let mut kernel = Vec::with_capacity(k.len());
    let mut bias = Vec::with_capacity(oc);
    for o in 0..oc {
        let s = bn.scale(o);
        kernel.extend(k[o * per_oc..(o + 1) * per_oc].iter().map(|a| a * s));
        bias.push(bn.beta()[o] + s * (b[o] - bn.mu_run()[o]));
    }
    Conv2d::new(
        Tensor::new(conv.kernel().shape().to_vec(), kernel)?,
        Tensor::from_vec(bias)?,
        conv.stride(),
        conv.padding(),
    )
}

pub fn fuse_bn_conv_pre(bn: &BnParams, conv: &Conv2d) -> Result<Conv2d> {
    let ic = conv.in_channels();
    if bn.len() != ic {
        return Err(Error::Dimension(format!(
            "batch-norm of length {} cannot feed conv with {ic} input channels",
            bn.len()
        )));
    }
    if conv.padding() > 0 {
        return Err(Error::UnsupportedFusion(format!(
            "batch-norm before a conv with padding {} cannot be folded exactly (padded taps see raw zeros); use the lower_then_fuse policy",
            conv.padding()
        )));
    }
    let ks = conv.kernel().shape();
    let (oc, taps) = (ks[0], ks[2] * ks[3]);
    let k = conv.kernel().data();
    let mut kernel = Vec::with_capacity(k.len());
    let mut bias = Vec::with_capacity(oc);
    for o in 0..oc {
        let mut offset = 0.0;
        for c in 0..ic {
            let (s, t) = (bn.scale(c), bn.shift(c));
            let block = &k[(o * ic + c) * taps..(o * ic + c + 1) * taps];
            kernel.extend(block.iter().map(|a| a * s));
            offset += block.iter().map(|a| a * t).sum::<f64>();
        }
        bias.push(conv.bias().data()[o] + offset);
    }
    Conv2d::new(
        Tensor::new(ks.to_vec(), kernel)?,
        Tensor::from_vec(bias)?,
        conv.stride(),
        conv.padding(),
    )
}

/// Convolution as a sparse matrix: for every output element (flatten order),
/// the `(input index, weight)` pairs of the taps that land inside the input.
#[derive(Debug, Clone)]
pub struct LoweredConv {
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    /// Row `r` spans `entries[row_start[r]..row_start[r + 1]]`.
    pub row_start: Vec<usize>,
    pub entries: Vec<(usize, f64)>,
    pub bias: Vec<f64>,
}

impl LoweredConv {
    pub fn rows(&self) -> usize {
        self.bias.len()
    }

    pub fn cols(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.row_start[r]..self.row_start[r + 1]]
    }

    /// Sparse matrix-vector product plus bias, in flatten order.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                let acc: f64 = self.row(r).iter().map(|&(c, w)| w * input[c]).sum();
                acc + self.bias[r]
            })
            .collect()
    }

    pub fn to_dense(&self) -> Result<Dense> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut w = vec![0.0; rows * cols];
        for r in 0..rows {
            for &(c, v) in self.row(r) {
                w[r * cols + c] = v;
            }
        }
        Dense::new(
            Tensor::new(vec![rows, cols], w)?,
            Tensor::from_vec(self.bias.clone())?,
        )?
        .with_output_shape(self.output_shape.to_vec())
    }
}

pub fn lower_conv_sparse(conv: &Conv2d, input_shape: &[usize]) -> Result<LoweredConv> {
    let [oc, oh, ow] = conv.output_shape(input_shape)?;
    let (ic, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let ks = conv.kernel().shape();
    let (kh, kw) = (ks[2], ks[3]);
    let (stride, pad) = (conv.stride(), conv.padding());
    let k = conv.kernel().data();

    let mut row_start = Vec::with_capacity(oc * oh * ow + 1);
    let mut entries = Vec::new();
    let mut bias = Vec::with_capacity(oc * oh * ow);
    row_start.push(0);
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..ic {
                    for ky in 0..kh {
                        if !valid_outputs(ky, h, oh, stride, pad).contains(&oy) {
                            continue;
                        }
                        let iy = oy * stride + ky - pad;
                        for kx in 0..kw {
                            if !valid_outputs(kx, w, ow, stride, pad).contains(&ox) {
                                continue;
                            }
                            let ix = ox * stride + kx - pad;
                            entries.push((
                                (c * h + iy) * w + ix,
                                k[((o * ic + c) * kh + ky) * kw + kx],
                            ));
                        }
                    }
                }
                row_start.push(entries.len());
                bias.push(conv.bias().data()[o]);
            }
        }
    }
    Ok(LoweredConv {
        input_shape: [ic, h, w],
        output_shape: [oc, oh, ow],
        row_start,
        entries,
        bias,
    })
}

/// Dense layer with weights `[oc*h'*w', ic*h*w]` computing the same map as
/// `conv` on inputs of `input_shape`, in flatten order. Taps that would read
/// padding are left as zeros. The result keeps the `[oc, h', w']` output
/// shape, so it can replace the conv in place.
pub fn lower_conv_to_dense(conv: &Conv2d, input_shape: &[usize]) -> Result<Dense> {
    lower_conv_sparse(conv, input_shape)?.to_dense()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPolicy {
    /// Fold every BN with a closed-form conv/dense rule.
    Fuse,
    /// Like `Fuse`, but lower convolutions to dense when no conv rule is exact.
    LowerThenFuse,
    /// Keep BN in the forward pass and treat it as relevance-identity.
    Bypass,
}

impl FromStr for FusionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fuse" => Ok(FusionPolicy::Fuse),
            "lower_then_fuse" => Ok(FusionPolicy::LowerThenFuse),
            "bypass" => Ok(FusionPolicy::Bypass),
            other => Err(Error::Value(format!(
                "unknown fusion policy {other:?} (expected fuse, lower_then_fuse or bypass)"
            ))),
        }
    }
}

impl fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionPolicy::Fuse => "fuse",
            FusionPolicy::LowerThenFuse => "lower_then_fuse",
            FusionPolicy::Bypass => "bypass",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    DensePre,
    DensePost,
    ConvPre,
    ConvPost,
    Lowered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    /// Original indices of the BN and the linear layer it was folded into.
    pub layer_indices_consumed: Vec<usize>,
    pub rule_applied: FusionRule,
    pub exact: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfusedBn {
    pub layer_index: usize,
    pub reason: String,
}

/// Audit trail of [`fuse_network`]: every BN of the input network appears in
/// exactly one record or one `unfused` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub policy: FusionPolicy,
    pub records: Vec<FusionRecord>,
    pub unfused: Vec<UnfusedBn>,
}

impl FusionReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.unfused.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        s.push('\n');
        s
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    /// Fold into the following layer.
    Pre,
    /// Fold into the preceding layer.
    Post,
}

/// Which rule folds `bn` into `linear` from `side`, if any under `policy`.
fn plan(
    bn: &BnParams,
    linear: &Layer,
    linear_in: &[usize],
    linear_out: &[usize],
    side: Side,
    policy: FusionPolicy,
) -> std::result::Result<FusionRule, String> {
    match (linear, side) {
        (Layer::Dense(_), Side::Pre) => Ok(FusionRule::DensePre),
        (Layer::Dense(_), Side::Post) => Ok(FusionRule::DensePost),
        (Layer::Conv2d(c), _) => {
            let bn_shape = if side == Side::Pre {
                linear_in
            } else {
                linear_out
            };
            if bn.is_per_element_for(bn_shape) {
                return if policy == FusionPolicy::LowerThenFuse {
                    Ok(FusionRule::Lowered)
                } else {
                    Err(
                        "per-element parameters cannot fold into a conv; use lower_then_fuse"
                            .into(),
                    )
                };
            }
            match side {
                Side::Post => Ok(FusionRule::ConvPost),
                Side::Pre if c.padding() == 0 => Ok(FusionRule::ConvPre),
                Side::Pre if policy == FusionPolicy::LowerThenFuse => Ok(FusionRule::Lowered),
                Side::Pre => Err(format!(
                    "conv_pre needs padding 0 (conv has padding {}); use lower_then_fuse",
                    c.padding()
                )),
            }
        }
        _ => Err(format!("neighbour is a {} layer", linear.kind())),
    }
}

fn apply(
    bn: &BnParams,
    linear: &Layer,
    linear_in: &[usize],
    linear_out: &[usize],
    side: Side,
    rule: FusionRule,
) -> Result<Layer> {
    Ok(match (linear, rule) {
        (Layer::Dense(d), FusionRule::DensePre) => {
            Layer::Dense(fuse_bn_dense_pre(&bn.per_element(linear_in)?, d)?)
        }
        (Layer::Dense(d), FusionRule::DensePost) => {
            Layer::Dense(fuse_bn_dense_post(d, &bn.per_element(linear_out)?)?)
        }
        (Layer::Conv2d(c), FusionRule::ConvPre) => Layer::Conv2d(fuse_bn_conv_pre(bn, c)?),
        (Layer::Conv2d(c), FusionRule::ConvPost) => Layer::Conv2d(fuse_bn_conv_post(c, bn)?),
        (Layer::Conv2d(c), FusionRule::Lowered) => {
            let lowered = lower_conv_to_dense(c, linear_in)?;
            Layer::Dense(match side {
                Side::Pre => fuse_bn_dense_pre(&bn.per_element(linear_in)?, &lowered)?,
                Side::Post => fuse_bn_dense_post(&lowered, &bn.per_element(linear_out)?)?,
            })
        }
        _ => unreachable!("plan() only pairs rules with matching layers"),
    })
}

fn rule_note(rule: FusionRule, side: Side) -> &'static str {
    match (rule, side) {
        (FusionRule::Lowered, Side::Pre) => "conv lowered to dense, then dense_pre",
        (FusionRule::Lowered, Side::Post) => "conv lowered to dense, then dense_post",
        (_, Side::Pre) => "folded into following layer",
        (_, Side::Post) => "folded into preceding layer",
    }
}

struct Slot {
    layer: Layer,
    /// Original index of the first consumed layer (its input shape is the slot's).
    first: usize,
    last: usize,
    /// Original index of the layer itself (not of any BN folded into it).
    own: usize,
}

/// Folds every BN of `network` according to `policy`.
///
/// A BN folds into the neighbour named by its placement tag (following layer
/// when untagged) and falls back to the other neighbour. BNs with no usable
/// neighbour stay in place, marked as relevance-identity, and are listed in
/// `FusionReport::unfused`. Under `Bypass` nothing is folded.
pub fn fuse_network(network: &Network, policy: FusionPolicy) -> Result<(Network, FusionReport)> {
    let layers = network.layers();
    let shapes = network.shapes();
    let mut report = FusionReport {
        policy,
        records: Vec::new(),
        unfused: Vec::new(),
    };
    let mut out: Vec<Slot> = Vec::with_capacity(layers.len());
    // BN waiting to be folded into the next layer: (index, params, rule)
    let mut pending: Option<(usize, BnParams, FusionRule)> = None;

    for (i, layer) in layers.iter().enumerate() {
        let Layer::BatchNorm {
            params, placement, ..
        } = layer
        else {
            let mut fused = layer.clone();
            let mut first = i;
            if let Some((bi, bn, rule)) = pending.take() {
                fused = apply(&bn, layer, &shapes[i], &shapes[i + 1], Side::Pre, rule)
                    .map_err(|e| e.at_layer(i))?;
                first = bi;
                report.records.push(FusionRecord {
                    layer_indices_consumed: vec![bi, i],
                    rule_applied: rule,
                    exact: true,
                    note: rule_note(rule, Side::Pre).into(),
                });
            }
            out.push(Slot {
                layer: fused,
                first,
                last: i,
                own: i,
            });
            continue;
        };

        if policy == FusionPolicy::Bypass {
            report.unfused.push(UnfusedBn {
                layer_index: i,
                reason: "bypass policy: kept in the forward pass, relevance-identity".into(),
            });
            out.push(Slot {
                layer: Layer::BatchNorm {
                    params: params.clone(),
                    placement: *placement,
                    bypass: true,
                },
                first: i,
                last: i,
                own: i,
            });
            continue;
        }

        let prefer = match placement {
            Some(Placement::BeforeActivation) => Side::Post,
            Some(Placement::AfterActivation) | None => Side::Pre,
        };
        let other = if prefer == Side::Pre {
            Side::Post
        } else {
            Side::Pre
        };
        let mut reasons = Vec::new();
        let mut done = false;
        for side in [prefer, other] {
            let attempt = match side {
                Side::Pre => match layers.get(i + 1) {
                    Some(next) => plan(params, next, &shapes[i + 1], &shapes[i + 2], side, policy),
                    None => Err("no following layer".into()),
                },
                Side::Post => match out.last() {
                    Some(prev) if prev.last + 1 == i => plan(
                        params,
                        &prev.layer,
                        &shapes[prev.first],
                        &shapes[i],
                        side,
                        policy,
                    ),
                    _ => Err("no preceding layer".into()),
                },
            };
            match attempt {
                Ok(rule) if side == Side::Pre => {
                    pending = Some((i, params.clone(), rule));
                    done = true;
                }
                Ok(rule) => {
                    let prev = out.last_mut().unwrap();
                    prev.layer = apply(
                        params,
                        &prev.layer,
                        &shapes[prev.first],
                        &shapes[i],
                        side,
                        rule,
                    )
                    .map_err(|e| e.at_layer(i))?;
                    report.records.push(FusionRecord {
                        layer_indices_consumed: vec![prev.own, i],
                        rule_applied: rule,
                        exact: true,
                        note: rule_note(rule, side).into(),
                    });
                    prev.last = i;
                    done = true;
                }
                Err(reason) => reasons.push(format!(
                    "{}: {reason}",
                    if side == Side::Pre {
                        "following"
                    } else {
                        "preceding"
                    }
                )),
            }
            if done {
                break;
            }
        }
        if !done {
            report.unfused.push(UnfusedBn {
                layer_index: i,
                reason: format!(
                    "no fusable neighbour ({}); left in place as relevance-identity",
                    reasons.join("; ")
                ),
            });
            out.push(Slot {
                layer: Layer::BatchNorm {
                    params: params.clone(),
                    placement: *placement,
                    bypass: true,
                },
                first: i,
                last: i,
                own: i,
            });
        }
    }

    let fused = network.with_layers(out.into_iter().map(|s| s.layer).collect())?;
    Ok((fused, report))
}
