//! Synthetic correlated-label video data.
//!
//! Labels come from thresholding a correlated Gaussian vector (a Gaussian
//! copula over Bernoulli marginals). Every active label adds its prototype
//! pattern to a contiguous window of frames; the rest is i.i.d. noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use super::example::{Example, FrameLevel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error("correlation matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPair {
    pub a: usize,
    pub b: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_examples: usize,
    pub num_labels: usize,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Target mean number of labels per example.
    pub avg_labels: f64,
    /// Ratio between the most and least frequent label's base rate.
    pub frequency_skew: f64,
    /// Off-diagonal entries of the label correlation matrix.
    pub pairs: Vec<LabelPair>,
    /// Shorthand: couple labels (0,1), (2,3), ... at this correlation.
    pub adjacent_rho: Option<f64>,
    /// Full correlation matrix; overrides `pairs` and `adjacent_rho`.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Nonzero coordinates per rgb prototype.
    pub prototype_dim: usize,
    /// Nonzero coordinates per audio prototype.
    pub audio_prototype_dim: usize,
    pub signal: f64,
    /// Per-label amplitude is `signal * (1 - signal_spread * u)`, `u ~ U[0,1)`.
    pub signal_spread: f64,
    pub noise: f64,
    /// Evidence window length bounds in frames; 0 means the whole sequence.
    pub window_min: usize,
    pub window_max: usize,
    /// Fraction of labels whose evidence lives only in audio.
    pub audio_only_fraction: f64,
    /// Fraction of labels with evidence in both modalities.
    pub both_fraction: f64,
    /// Probability that a true label is missing from the observed label set.
    pub label_drop: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_examples: 1000,
            num_labels: 25,
            rgb_dim: 32,
            audio_dim: 8,
            min_frames: 30,
            max_frames: 30,
            avg_labels: 3.4,
            frequency_skew: 3.0,
            pairs: Vec::new(),
            adjacent_rho: None,
            correlation: None,
            prototype_dim: 8,
            audio_prototype_dim: 4,
            signal: 1.0,
            signal_spread: 0.5,
            noise: 0.5,
            window_min: 4,
            window_max: 10,
            audio_only_fraction: 0.2,
            both_fraction: 0.2,
            label_drop: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Audio,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub label: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub examples: Vec<Example>,
    /// True label sets before `label_drop` is applied.
    pub truth: Vec<Vec<usize>>,
    pub windows: Vec<Vec<Window>>,
    /// Scaled per-label patterns over `[rgb; audio]`.
    pub prototypes: Vec<Vec<f64>>,
    pub modalities: Vec<Modality>,
    pub base_rates: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
}

impl SynthSpec {
    pub fn correlation_matrix(&self) -> Result<Vec<Vec<f64>>, SynthError> {
        let l = self.num_labels;
        let c = if let Some(c) = &self.correlation {
            c.clone()
        } else {
            let mut c = vec![vec![0.0; l]; l];
            for (i, row) in c.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            let adjacent = self.adjacent_rho.map(|rho| (0..l / 2).map(move |k| LabelPair { a: 2 * k, b: 2 * k + 1, rho }));
            for p in adjacent.into_iter().flatten().chain(self.pairs.iter().copied()) {
                if p.a >= l || p.b >= l || p.a == p.b {
                    return Err(SynthError::Invalid(format!("label pair ({}, {}) invalid for {l} labels", p.a, p.b)));
                }
                c[p.a][p.b] = p.rho;
                c[p.b][p.a] = p.rho;
            }
            c
        };
        if c.len() != l || c.iter().any(|r| r.len() != l) {
            return Err(SynthError::Invalid(format!("correlation matrix must be {l}x{l}")));
        }
        for i in 0..l {
            if c[i][i] != 1.0 {
                return Err(SynthError::Invalid(format!("correlation diagonal entry {i} is {}", c[i][i])));
            }
            for j in 0..l {
                if c[i][j] != c[j][i] || !(-1.0..=1.0).contains(&c[i][j]) {
                    return Err(SynthError::Invalid(format!("correlation entry ({i}, {j}) invalid")));
                }
            }
        }
        Ok(c)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.num_labels == 0 || self.rgb_dim == 0 {
            return bad("num_labels and rgb_dim must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("frame range {}..={} invalid", self.min_frames, self.max_frames));
        }
        if self.prototype_dim > self.rgb_dim {
            return bad(format!("prototype_dim {} exceeds rgb_dim {}", self.prototype_dim, self.rgb_dim));
        }
        if self.audio_prototype_dim > self.audio_dim {
            return bad(format!("audio_prototype_dim {} exceeds audio_dim {}", self.audio_prototype_dim, self.audio_dim));
        }
        if self.window_min > self.window_max {
            return bad("window_min exceeds window_max".into());
        }
        if !(self.avg_labels > 0.0 && self.avg_labels < self.num_labels as f64) {
            return bad(format!("avg_labels {} must lie in (0, {})", self.avg_labels, self.num_labels));
        }
        if self.frequency_skew < 1.0 {
            return bad("frequency_skew must be >= 1".into());
        }
        let fractions = [self.audio_only_fraction, self.both_fraction, self.label_drop, self.signal_spread];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || self.audio_only_fraction + self.both_fraction > 1.0 {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.audio_dim == 0 && self.audio_only_fraction + self.both_fraction > 0.0 {
            return bad("audio evidence requested with audio_dim 0".into());
        }
        if self.noise < 0.0 {
            return bad("noise must be nonnegative".into());
        }
        Ok(())
    }

    /// Per-label marginal rates, geometrically spaced by `frequency_skew`
    /// and scaled to sum to `avg_labels`.
    pub fn base_rates(&self) -> Vec<f64> {
        let l = self.num_labels;
        let raw: Vec<f64> = (0..l)
            .map(|i| if l == 1 { 1.0 } else { self.frequency_skew.powf(-(i as f64) / (l - 1) as f64) })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| (r * self.avg_labels / total).min(0.95)).collect()
    }
}

/// Lower-triangular Cholesky factor.
pub fn cholesky(c: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SynthError> {
    let n = c.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = c[i][i] - s;
                if d <= 1e-12 {
                    return Err(SynthError::NotPositiveDefinite { pivot: i });
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (c[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn prototype(rng: &mut ChaCha8Rng, dim: usize, nonzero: usize, amp: f64) -> Vec<f64> {
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(rng);
    let mut v = vec![0.0; dim];
    for &c in &coords[..nonzero] {
        let mag = rng.random_range(0.5..1.0);
        v[c] = if rng.random_bool(0.5) { amp * mag } else { -amp * mag };
    }
    v
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let correlation = spec.correlation_matrix()?;
    let chol = cholesky(&correlation)?;
    let l = spec.num_labels;
    let (dv, da) = (spec.rgb_dim, spec.audio_dim);
    let base_rates = spec.base_rates();
    let std_normal = Normal::standard();
    let thresholds: Vec<f64> = base_rates.iter().map(|&q| std_normal.inverse_cdf(1.0 - q)).collect();

    // Label structure and examples draw from separate streams so that changing
    // N never changes the prototypes.
    let mut world = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(&mut world);
    let n_audio = (spec.audio_only_fraction * l as f64).round() as usize;
    let n_both = (spec.both_fraction * l as f64).round() as usize;
    let mut modalities = vec![Modality::Rgb; l];
    for (k, &lab) in order.iter().enumerate() {
        if k < n_audio {
            modalities[lab] = Modality::Audio;
        } else if k < n_audio + n_both {
            modalities[lab] = Modality::Both;
        }
    }
    let prototypes: Vec<Vec<f64>> = (0..l)
        .map(|lab| {
            let amp = spec.signal * (1.0 - spec.signal_spread * world.random::<f64>());
            let mut rgb = prototype(&mut world, dv, spec.prototype_dim, amp);
            let mut audio = prototype(&mut world, da, spec.audio_prototype_dim, amp);
            match modalities[lab] {
                Modality::Rgb => audio.iter_mut().for_each(|a| *a = 0.0),
                Modality::Audio => rgb.iter_mut().for_each(|a| *a = 0.0),
                Modality::Both => {}
            }
            rgb.extend(audio);
            rgb
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a_0000_0001);
    let mut examples = Vec::with_capacity(spec.num_examples);
    let mut truth = Vec::with_capacity(spec.num_examples);
    let mut windows = Vec::with_capacity(spec.num_examples);
    let width = dv + da;
    for n in 0..spec.num_examples {
        let e: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..l).map(|i| (0..=i).map(|k| chol[i][k] * e[k]).sum()).collect();
        let mut active: Vec<usize> = (0..l).filter(|&i| z[i] > thresholds[i]).collect();
        if active.is_empty() {
            let best = (0..l).max_by(|&a, &b| (z[a] - thresholds[a]).total_cmp(&(z[b] - thresholds[b]))).unwrap();
            active.push(best);
        }

        let frames = rng.random_range(spec.min_frames..=spec.max_frames);
        let mut data = vec![0.0; frames * width];
        if spec.noise > 0.0 {
            for x in data.iter_mut() {
                *x = spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut ex_windows = Vec::with_capacity(active.len());
        for &lab in &active {
            let (lo, hi) = if spec.window_max == 0 {
                (frames, frames)
            } else {
                (spec.window_min.clamp(1, frames), spec.window_max.clamp(1, frames))
            };
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=frames - len);
            for t in start..start + len {
                for (x, p) in data[t * width..(t + 1) * width].iter_mut().zip(&prototypes[lab]) {
                    *x += p;
                }
            }
            ex_windows.push(Window { label: lab, start, len });
        }

        let observed: Vec<usize> = if spec.label_drop > 0.0 {
            active.iter().copied().filter(|_| !rng.random_bool(spec.label_drop)).collect()
        } else {
            active.clone()
        };

        let mut rgb = Vec::with_capacity(frames * dv);
        let mut audio = Vec::with_capacity(frames * da);
        for row in data.chunks_exact(width) {
            rgb.extend_from_slice(&row[..dv]);
            audio.extend_from_slice(&row[dv..]);
        }
        let fl = FrameLevel::new(dv, da, rgb, audio).expect("frames >= 1 by validation");
        let video_level = Some(fl.means());
        examples.push(Example { video_id: format!("syn{:07}", n), labels: observed, video_level, frame_level: Some(fl) });
        truth.push(active);
        windows.push(ex_windows);
    }
    Ok(SynthDataset { examples, truth, windows, prototypes, modalities, base_rates, correlation })
}
