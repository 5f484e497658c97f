//! Per-example boosting weights.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoostError {
    #[error("weighted error {err_k} leaves no finite round weight; boosting terminated")]
    Terminated { err_k: f64 },
    #[error("{got} errors for {expected} examples")]
    Length { expected: usize, got: usize },
    #[error("error {value} at example {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("clip ceiling {0} is below the mean weight 1")]
    Clip(f64),
}

/// Example weights with mean 1, plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWeights {
    pub w: Vec<f64>,
    pub round: usize,
}

impl SampleWeights {
    pub fn uniform(n: usize) -> Self {
        Self { w: vec![1.0; n], round: 0 }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Loss multipliers; with `drop_at_ceiling`, examples pinned at `clip`
    /// get weight 0.
    pub fn training_weights(&self, clip: f64, drop_at_ceiling: bool) -> Vec<f64> {
        self.w
            .iter()
            .map(|&w| if drop_at_ceiling && w >= clip * (1.0 - 1e-12) { 0.0 } else { w })
            .collect()
    }
}

/// Scales `w` to sum to `n` while capping every entry at `clip`: capped
/// entries are fixed and the rest rescaled until nothing exceeds the cap.
fn renormalize_capped(w: &mut [f64], clip: f64) {
    let n = w.len() as f64;
    let mut capped = vec![false; w.len()];
    loop {
        let fixed: f64 = capped.iter().filter(|&&c| c).count() as f64 * clip;
        let free: f64 = w.iter().zip(&capped).filter(|(_, &c)| !c).map(|(v, _)| v).sum();
        if free <= 0.0 {
            break;
        }
        let scale = (n - fixed) / free;
        let mut changed = false;
        for (v, c) in w.iter_mut().zip(capped.iter_mut()) {
            if *c {
                *v = clip;
            } else {
                *v *= scale;
                if *v > clip {
                    *v = clip;
                    *c = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// One reweighting round:
/// `W' = (N / Z) W exp(α r Err)` with `Err_k = Σ W Err / Σ W` and
/// `r = ln((1 - Err_k) / Err_k)`, then capped at `clip` and renormalized
/// so the weights still sum to `N`.
pub fn boosting_update(w: &SampleWeights, err: &[f64], alpha: f64, clip: f64) -> Result<SampleWeights, BoostError> {
    if err.len() != w.len() {
        return Err(BoostError::Length { expected: w.len(), got: err.len() });
    }
    if let Some((index, &value)) = err.iter().enumerate().find(|(_, e)| !(0.0..=1.0).contains(*e)) {
        return Err(BoostError::OutOfRange { index, value });
    }
    if clip < 1.0 {
        return Err(BoostError::Clip(clip));
    }
    let total: f64 = w.w.iter().sum();
    let err_k = w.w.iter().zip(err).map(|(w, e)| w * e).sum::<f64>() / total;
    if err_k <= 0.0 || err_k >= 1.0 {
        return Err(BoostError::Terminated { err_k });
    }
    let r = ((1.0 - err_k) / err_k).ln();
    let n = w.len() as f64;
    let mut next: Vec<f64> = w.w.iter().zip(err).map(|(w, e)| w * (alpha * r * e).exp()).collect();
    let z: f64 = next.iter().sum();
    next.iter_mut().for_each(|v| *v *= n / z);
    if next.iter().any(|&v| v > clip) {
        renormalize_capped(&mut next, clip);
    }
    Ok(SampleWeights { w: next, round: w.round + 1 })
}

/// `1 - PERR` per example; unlabeled examples take the mean of the rest.
pub fn fill_missing_errors(errors: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<f64> = errors.iter().flatten().copied().collect();
    let mean = if known.is_empty() { 0.5 } else { known.iter().sum::<f64>() / known.len() as f64 };
    errors.iter().map(|e| e.unwrap_or(mean)).collect()
}
