//! Shape-tagged row-major tensors and batch-norm parameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f64` array of rank 1 to 4.
///
/// Image activations use `[channels, height, width]`, dense weights
/// `[out, in]` and conv kernels `[out_ch, in_ch, kh, kw]`. Every extent is at
/// least 1, `data.len()` equals the shape product and all values are finite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Dimension(format!(
            "tensor rank must be 1..=4, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "tensor extents must be >= 1, got shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows")))
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Value(format!(
            "{what}: non-finite value {} at flat index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        check_finite(&t.data, "tensor")?;
        Ok(t)
    }

    /// Kernel-internal constructor: the caller guarantees the shape product.
    /// Finiteness is still enforced since arithmetic can overflow.
    pub(crate) fn from_kernel(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(check_shape(&shape).ok(), Some(data.len()));
        check_finite(&data, "kernel output")?;
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise map; fails if the result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::from_kernel(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "comparing {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

/// Inference-time batch-norm statistics.
///
/// `sigma_run` is a standard deviation with any training epsilon already folded
/// in, so the transform is exactly `gamma * (x - mu_run) / sigma_run + beta`.
/// Vectors have one entry per channel, or one per element for spatially varying
/// normalizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBn", into = "RawBn")]
pub struct BnParams {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mu_run: Vec<f64>,
    sigma_run: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBn {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mu_run: Vec<f64>,
    sigma_run: Vec<f64>,
}

impl TryFrom<RawBn> for BnParams {
    type Error = Error;

    fn try_from(raw: RawBn) -> Result<Self> {
        BnParams::new(raw.gamma, raw.beta, raw.mu_run, raw.sigma_run)
    }
}

impl From<BnParams> for RawBn {
    fn from(p: BnParams) -> Self {
        RawBn {
            gamma: p.gamma,
            beta: p.beta,
            mu_run: p.mu_run,
            sigma_run: p.sigma_run,
        }
    }
}

impl BnParams {
    pub fn new(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mu_run: Vec<f64>,
        sigma_run: Vec<f64>,
    ) -> Result<Self> {
        let n = gamma.len();
        if n == 0 || beta.len() != n || mu_run.len() != n || sigma_run.len() != n {
            return Err(Error::Dimension(format!(
                "batch-norm vectors must share a non-zero length, got gamma={}, beta={}, mu_run={}, sigma_run={}",
                n,
                beta.len(),
                mu_run.len(),
                sigma_run.len()
            )));
        }
        for (name, v) in [
            ("gamma", &gamma),
            ("beta", &beta),
            ("mu_run", &mu_run),
            ("sigma_run", &sigma_run),
        ] {
            check_finite(v, name)?;
        }
        if let Some(i) = sigma_run.iter().position(|&s| s <= 0.0) {
            return Err(Error::Value(format!(
                "sigma_run[{i}] = {} must be > 0",
                sigma_run[i]
            )));
        }
        Ok(BnParams {
            gamma,
            beta,
            mu_run,
            sigma_run,
        })
    }

    /// `gamma=1, beta=0, mu=0, sigma=1` for `n` channels.
    pub fn identity(n: usize) -> Result<Self> {
        BnParams::new(vec![1.0; n], vec![0.0; n], vec![0.0; n], vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn mu_run(&self) -> &[f64] {
        &self.mu_run
    }

    pub fn sigma_run(&self) -> &[f64] {
        &self.sigma_run
    }

    /// Multiplicative part `gamma / sigma` of channel `c`.
    pub fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / self.sigma_run[c]
    }

    /// Additive part `beta - gamma * mu / sigma` of channel `c`.
    pub fn shift(&self, c: usize) -> f64 {
        self.beta[c] - self.scale(c) * self.mu_run[c]
    }

    /// Repeats per-channel parameters over a `[c, h, w]` (or `[c]`) shape so
    /// that there is one entry per element in channel-major order. Parameters
    /// that are already per-element are returned unchanged.
    pub fn per_element(&self, shape: &[usize]) -> Result<BnParams> {
        let numel: usize = shape.iter().product();
        if self.len() == numel {
            return Ok(self.clone());
        }
        if self.len() != shape[0] {
            return Err(Error::Dimension(format!(
                "batch-norm of length {} does not fit activation shape {shape:?}",
                self.len()
            )));
        }
        let plane = numel / shape[0];
        let rep = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .flat_map(|&x| std::iter::repeat_n(x, plane))
                .collect()
        };
        Ok(BnParams {
            gamma: rep(&self.gamma),
            beta: rep(&self.beta),
            mu_run: rep(&self.mu_run),
            sigma_run: rep(&self.sigma_run),
        })
    }

    /// True when the parameters are per-element for `shape` and cannot be
    /// expressed per channel (only relevant for rank-3 activations).
    pub fn is_per_element_for(&self, shape: &[usize]) -> bool {
        shape.len() > 1 && self.len() != shape[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn bn_rejects_nonpositive_sigma() {
        let err = BnParams::new(vec![1.0], vec![0.0], vec![0.0], vec![0.0]).unwrap_err();
        assert_eq!(err.category(), "value");
        assert!(BnParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0]).is_err());
        assert!(BnParams::new(vec![1.0, 2.0], vec![0.0], vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn per_element_expansion_is_channel_major() {
        let bn = BnParams::new(vec![1.0, 2.0], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2]).unwrap();
        let e = bn.per_element(&[2, 1, 3]).unwrap();
        assert_eq!(e.gamma(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(!bn.is_per_element_for(&[2, 1, 3]));
        assert!(e.is_per_element_for(&[2, 1, 3]));
    }

    #[test]
    fn json_round_trip_validates() {
        let t: Tensor = serde_json::from_str(r#"{"shape":[2],"data":[1.5,-2]}"#).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);
        assert!(serde_json::from_str::<Tensor>(r#"{"shape":[3],"data":[1]}"#).is_err());
    }
}
