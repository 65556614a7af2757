//! White-to-red heat-maps of non-negative input relevance.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub enum Normalization {
    #[default]
    Max,
    /// Nearest-rank percentile of the positive values, `p` in `(0, 100]`.
    Percentile(f64),
}


impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(Normalization::Max);
        }
        let p = s
            .strip_prefix('p')
            .and_then(|p| p.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::Value(format!("unknown normalization {s:?} (expected max or pN)"))
            })?;
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::Value(format!("percentile {p} outside (0, 100]")));
        }
        Ok(Normalization::Percentile(p))
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Normalization::Max => f.write_str("max"),
            Normalization::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major normalized relevance in `[0, 1]`.
    pub values: Vec<f64>,
    pub rgb: Vec<[u8; 3]>,
    /// Set when there was nothing to normalize against and the map is all white.
    pub warning: Option<String>,
}

impl Heatmap {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.rgb[y * self.width + x]
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        crate::netpbm::encode_ppm(self.width, self.height, &self.rgb)
    }
}

/// Colour for a normalized value: `(255, g, g)` with `g = round(255 (1 - v))`.
pub fn color(v: f64) -> [u8; 3] {
    let g = (255.0 * (1.0 - v)).round() as u8;
    [255, g, g]
}

/// Sums a `[c, h, w]` relevance over channels; rank-2 input is returned as is.
pub fn channel_sum(relevance: &Tensor) -> Result<Tensor> {
    match relevance.shape() {
        [_, _] => Ok(relevance.clone()),
        &[c, h, w] => {
            let d = relevance.data();
            let plane = h * w;
            let data = (0..plane)
                .map(|i| (0..c).map(|ch| d[ch * plane + i]).sum())
                .collect();
            Tensor::new(vec![h, w], data)
        }
        other => Err(Error::Dimension(format!(
            "heat-maps need rank-2 or rank-3 relevance, got shape {other:?}"
        ))),
    }
}

fn reference(values: &[f64], norm: Normalization) -> f64 {
    match norm {
        Normalization::Max => values.iter().copied().fold(0.0, f64::max),
        Normalization::Percentile(p) => {
            let mut positive: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
            if positive.is_empty() {
                return 0.0;
            }
            positive.sort_by(f64::total_cmp);
            let rank = ((p / 100.0) * positive.len() as f64).ceil() as usize;
            positive[rank.clamp(1, positive.len()) - 1]
        }
    }
}

pub fn render_heatmap(relevance: &Tensor, norm: Normalization) -> Result<Heatmap> {
    let map = channel_sum(relevance)?;
    let (height, width) = (map.shape()[0], map.shape()[1]);
    if let Some(v) = map.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Value(format!(
            "heat-maps need non-negative relevance, found {v}"
        )));
    }
    let reference = reference(map.data(), norm);
    if reference == 0.0 {
        return Ok(Heatmap {
            width,
            height,
            values: vec![0.0; map.len()],
            rgb: vec![[255; 3]; map.len()],
            warning: Some("relevance is zero everywhere; rendered an all-white map".into()),
        });
    }
    let values: Vec<f64> = map
        .data()
        .iter()
        .map(|&r| (r / reference).clamp(0.0, 1.0))
        .collect();
    let rgb = values.iter().map(|&v| color(v)).collect();
    Ok(Heatmap {
        width,
        height,
        values,
        rgb,
        warning: None,
    })
}
