//! Temporal convolutions whose filters span the full per-frame feature.

use serde::{Deserialize, Serialize};

use super::layers::{pool_time, Builder};
use crate::tensor::{Bindings, Graph, ParamId, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub filters: Vec<Filter>,
    /// Conv layers in a pyramid (multi-scale models only).
    pub layers: usize,
    /// Max-pooling stride between pyramid layers.
    pub pool: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            filters: vec![
                Filter { width: 1, channels: 16 },
                Filter { width: 2, channels: 16 },
                Filter { width: 3, channels: 32 },
            ],
            layers: 1,
            pool: 2,
        }
    }
}

impl CnnConfig {
    pub fn channels(&self) -> usize {
        self.filters.iter().map(|f| f.channels).sum()
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|f| f.width).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub width: usize,
    pub input_dim: usize,
    pub channels: usize,
    /// `[width · D, C]`; row `j D + d` weighs feature `d` at offset `j`.
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, width: usize, input_dim: usize, channels: usize) -> Self {
        let w = b.weight(&format!("{name}/w"), width * input_dim, channels);
        let bias = b.zeros(&format!("{name}/b"), &[channels]);
        Self { width, input_dim, channels, w, b: bias }
    }

    /// Valid convolution of `[B, T, D]`, giving `[B, T - width + 1, C]`
    /// before activation.
    pub fn valid(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input_dim {
            return Err(TensorError::ShapeMismatch { op: "conv", lhs: s, rhs: vec![self.input_dim] });
        }
        let t = s[1];
        if t < self.width {
            return Err(TensorError::InvalidArgument {
                op: "cnn_over_time",
                reason: format!("sequence of {t} frames is shorter than filter width {}", self.width),
            });
        }
        let out = t - self.width + 1;
        let shifted: Vec<Var> = (0..self.width).map(|j| g.slice(x, 1, j, j + out)).collect::<Result<_>>()?;
        let windows = if shifted.len() == 1 { shifted[0] } else { g.concat(&shifted, 2)? };
        let y = g.matmul(windows, p[self.w])?;
        g.add_bias(y, p[self.b])
    }

    /// Zero-padded convolution keeping the time length.
    pub fn same(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "conv", lhs: s, rhs: vec![self.input_dim] });
        }
        let left = (self.width - 1) / 2;
        let right = self.width - 1 - left;
        let mut parts = Vec::new();
        if left > 0 {
            parts.push(g.constant(Tensor::zeros(&[s[0], left, s[2]])));
        }
        parts.push(x);
        if right > 0 {
            parts.push(g.constant(Tensor::zeros(&[s[0], right, s[2]])));
        }
        let padded = if parts.len() == 1 { x } else { g.concat(&parts, 1)? };
        self.valid(g, p, padded)
    }
}

/// One layer of parallel filters of different widths.
#[derive(Clone, Debug)]
pub struct ConvBank {
    pub convs: Vec<Conv>,
}

impl ConvBank {
    pub fn new(b: &mut Builder, name: &str, filters: &[Filter], input_dim: usize) -> Self {
        let convs = filters
            .iter()
            .enumerate()
            .map(|(i, f)| Conv::new(b, &format!("{name}/w{}_{i}", f.width), f.width, input_dim, f.channels))
            .collect();
        Self { convs }
    }

    pub fn num_params(filters: &[Filter], input_dim: usize) -> usize {
        filters.iter().map(|f| (f.width * input_dim + 1) * f.channels).sum()
    }

    pub fn channels(&self) -> usize {
        self.convs.iter().map(|c| c.channels).sum()
    }

    /// Valid conv per filter, ReLU, max over time, concatenated: `[B, ΣC]`.
    pub fn over_time(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let y = c.valid(g, p, x)?;
            let y = g.relu(y)?;
            outs.push(g.max(y, 1)?);
        }
        g.concat(&outs, 1)
    }

    /// Same-padded conv per filter, ReLU, concatenated: `[B, T, ΣC]`.
    pub fn feature_map(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let y = c.same(g, p, x)?;
            outs.push(g.relu(y)?);
        }
        g.concat(&outs, 2)
    }
}

/// Conv banks interleaved with temporal max-pooling. Returns the feature
/// map after each layer (before its pooling).
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub banks: Vec<ConvBank>,
    pub pool: usize,
}

impl Pyramid {
    pub fn new(b: &mut Builder, name: &str, cfg: &CnnConfig, input_dim: usize) -> Self {
        let mut dim = input_dim;
        let banks = (0..cfg.layers.max(1))
            .map(|l| {
                let bank = ConvBank::new(b, &format!("{name}/l{l}"), &cfg.filters, dim);
                dim = bank.channels();
                bank
            })
            .collect();
        Self { banks, pool: cfg.pool }
    }

    pub fn num_params(cfg: &CnnConfig, input_dim: usize) -> usize {
        (0..cfg.layers.max(1))
            .map(|l| ConvBank::num_params(&cfg.filters, if l == 0 { input_dim } else { cfg.channels() }))
            .sum()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(self.banks.len());
        let mut h = x;
        for bank in &self.banks {
            let m = bank.feature_map(g, p, h)?;
            maps.push(m);
            h = pool_time(g, m, self.pool, false)?;
        }
        Ok(maps)
    }
}
