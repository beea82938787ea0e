//! Cross-domain spatial structure consistency loss.
//!
//! For every patch position the target token must be most similar to the
//! source token at the same position: positions are scored with a softmax
//! cross-entropy over the target-source token similarity matrix, diagonal
//! as the positive class. Minimizing it preserves the spatial layout of the
//! source output while the semantic loss moves its domain.

use crate::encoders::PatchTokenGrid;
use crate::error::{Error, Result};
use crate::vecmath::{axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Sum the per-position cross-entropies.
    SumPositions,
    /// Average the per-position cross-entropies (the default).
    MeanPositions,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::SumPositions => "sum-positions",
            Reduction::MeanPositions => "mean-positions",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CssConfig {
    /// Softmax temperature dividing the token similarities.
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self { temperature: 1.0, reduction: Reduction::MeanPositions }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Loss plus gradients with respect to both token grids, each flat
/// `position_count x token_dim` like [`PatchTokenGrid::tokens`].
#[derive(Debug, Clone)]
pub struct CssGradients {
    pub loss: f64,
    pub target_grad: Vec<f64>,
    pub source_grad: Vec<f64>,
}

fn check_pair(target: &PatchTokenGrid, source: &PatchTokenGrid) -> Result<()> {
    if target.position_count() != source.position_count()
        || target.token_dim() != source.token_dim()
    {
        return Err(Error::Shape(format!(
            "grids disagree: target {}x{}, source {}x{}",
            target.position_count(),
            target.token_dim(),
            source.position_count(),
            source.token_dim()
        )));
    }
    Ok(())
}

/// Structure loss for one target/source grid pair.
pub fn css_loss(target: &PatchTokenGrid, source: &PatchTokenGrid, config: &CssConfig) -> Result<f64> {
    Ok(css_loss_with_grads(target, source, config)?.loss)
}

/// Structure loss plus exact gradients for one grid pair.
pub fn css_loss_with_grads(
    target: &PatchTokenGrid,
    source: &PatchTokenGrid,
    config: &CssConfig,
) -> Result<CssGradients> {
    config.validate()?;
    check_pair(target, source)?;
    let p = target.position_count();
    let d = target.token_dim();
    let scale = match config.reduction {
        Reduction::SumPositions => 1.0,
        Reduction::MeanPositions => 1.0 / p as f64,
    };
    let mut loss = 0.0;
    let mut target_grad = vec![0.0; p * d];
    let mut source_grad = vec![0.0; p * d];
    let mut logits = vec![0.0; p];
    let mut probs = vec![0.0; p];
    for i in 0..p {
        let t_i = target.token(i);
        for j in 0..p {
            logits[j] = dot(t_i, source.token(j)) / config.temperature;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..p {
            probs[j] = (logits[j] - max).exp();
            sum += probs[j];
        }
        let lse = max + sum.ln();
        loss += lse - logits[i];
        for j in 0..p {
            probs[j] /= sum;
            let coefficient = (probs[j] - if i == j { 1.0 } else { 0.0 }) * scale / config.temperature;
            axpy(coefficient, source.token(j), &mut target_grad[i * d..(i + 1) * d]);
            axpy(coefficient, t_i, &mut source_grad[j * d..(j + 1) * d]);
        }
    }
    Ok(CssGradients { loss: loss * scale, target_grad, source_grad })
}

/// Mean structure loss over aligned lists of grid pairs.
pub fn css_batch_loss(
    targets: &[PatchTokenGrid],
    sources: &[PatchTokenGrid],
    config: &CssConfig,
) -> Result<f64> {
    Ok(css_batch_loss_with_grads(targets, sources, config)?.0)
}

/// Mean structure loss plus per-image gradients; index `i` of each gradient
/// list corresponds to `targets[i]` / `sources[i]`.
pub fn css_batch_loss_with_grads(
    targets: &[PatchTokenGrid],
    sources: &[PatchTokenGrid],
    config: &CssConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if targets.len() != sources.len() {
        return Err(Error::InvalidInput(format!(
            "batch lengths disagree: {} target grids vs {} source grids",
            targets.len(),
            sources.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("cannot average a zero-length batch".into()));
    }
    let count = targets.len() as f64;
    let mut loss = 0.0;
    let mut target_grads = Vec::with_capacity(targets.len());
    let mut source_grads = Vec::with_capacity(targets.len());
    for (t, s) in targets.iter().zip(sources) {
        let mut g = css_loss_with_grads(t, s, config)?;
        loss += g.loss / count;
        for v in &mut g.target_grad {
            *v /= count;
        }
        for v in &mut g.source_grad {
            *v /= count;
        }
        target_grads.push(g.target_grad);
        source_grads.push(g.source_grad);
    }
    Ok((loss, target_grads, source_grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> PatchTokenGrid {
        let d = rows[0].len();
        let tokens: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PatchTokenGrid::new(tokens, d, rows.len(), 1).unwrap()
    }

    #[test]
    fn single_position_grid_has_zero_loss() {
        let g = grid(&[&[1.0, 0.0]]);
        let loss = css_loss(&g, &g, &CssConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn orthonormal_identical_pair_matches_closed_form() {
        // Two orthonormal tokens, target equals source: each position pays
        // log(1 + e^{-1}).
        let g = grid(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = css_loss(&g, &g, &CssConfig::default()).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn sum_reduction_scales_by_position_count() {
        let g = grid(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mean = css_loss(&g, &g, &CssConfig::default()).unwrap();
        let sum = css_loss(
            &g,
            &g,
            &CssConfig { temperature: 1.0, reduction: Reduction::SumPositions },
        )
        .unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn uniform_source_tokens_give_log_p() {
        // When every source token is the same vector the logits are constant
        // per row, so each position pays exactly log P.
        let s = grid(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let t = grid(&[&[0.3, 0.7], &[-0.2, 0.9], &[1.0, 0.0]]);
        let loss = css_loss(&t, &s, &CssConfig::default()).unwrap();
        assert!((loss - 3.0f64.ln()).abs() <= 1e-6);
    }

    #[test]
    fn temperature_must_be_positive() {
        let g = grid(&[&[1.0, 0.0]]);
        let bad = CssConfig { temperature: 0.0, reduction: Reduction::MeanPositions };
        assert!(matches!(css_loss(&g, &g, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn grid_shape_mismatch_is_rejected() {
        let a = grid(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = grid(&[&[1.0, 0.0]]);
        assert!(matches!(css_loss(&a, &b, &CssConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_length_mismatch_is_rejected() {
        let g = grid(&[&[1.0, 0.0]]);
        assert!(matches!(
            css_batch_loss(&[g.clone(), g.clone()], &[g.clone()], &CssConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn batch_loss_averages_pair_losses() {
        let a = grid(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = grid(&[&[0.6, 0.8], &[-0.8, 0.6]]);
        let cfg = CssConfig::default();
        let la = css_loss(&a, &a, &cfg).unwrap();
        let lb = css_loss(&b, &a, &cfg).unwrap();
        let batch = css_batch_loss(&[a.clone(), b.clone()], &[a.clone(), a.clone()], &cfg).unwrap();
        assert!((batch - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_vanish_only_in_the_probability_sense() {
        // At target == source with orthonormal tokens the loss is positive
        // and the target gradient must be nonzero (softmax never saturates).
        let g = grid(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let grads = css_loss_with_grads(&g, &g, &CssConfig::default()).unwrap();
        assert!(grads.loss > 0.0);
        assert!(grads.target_grad.iter().any(|v| v.abs() > 1e-3));
    }
}
