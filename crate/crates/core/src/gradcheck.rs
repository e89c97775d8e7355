//! Central finite-difference check of analytic step gradients.

use crate::error::Result;
use crate::model::FactorModel;
use crate::objective::StepOutput;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares the gradient returned by `step` with central differences of its
/// objective over every parameter of `model` (rows absent from the sparse
/// gradient count as zero).
pub fn check_gradient<F>(model: &FactorModel, step: F, h: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&FactorModel) -> Result<StepOutput>,
{
    let base = step(model)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut compare = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / scale);
        coordinates += 1;
    };
    let dim = model.dim();

    for r in 0..model.user_embeddings().rows() {
        for d in 0..dim {
            let numeric = central(&mut probe, &step, h, |m| &mut m.user_embeddings_mut().row_mut(r)[d])?;
            let analytic = base.grad.user_rows.get(&r).map_or(0.0, |g| g[d]);
            compare(analytic, numeric);
        }
    }
    for r in 0..model.item_embeddings().rows() {
        for d in 0..dim {
            let numeric = central(&mut probe, &step, h, |m| &mut m.item_embeddings_mut().row_mut(r)[d])?;
            let analytic = base.grad.item_rows.get(&r).map_or(0.0, |g| g[d]);
            compare(analytic, numeric);
        }
    }
    for r in 0..model.item_bias().len() {
        let numeric = central(&mut probe, &step, h, |m| &mut m.item_bias_mut()[r])?;
        let analytic = base.grad.item_bias.get(&r).copied().unwrap_or(0.0);
        compare(analytic, numeric);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates,
    })
}

fn central<F, P>(probe: &mut FactorModel, step: &F, h: f64, param: P) -> Result<f64>
where
    F: Fn(&FactorModel) -> Result<StepOutput>,
    P: Fn(&mut FactorModel) -> &mut f64,
{
    let orig = *param(probe);
    *param(probe) = orig + h;
    let plus = step(probe)?.objective();
    *param(probe) = orig - h;
    let minus = step(probe)?.objective();
    *param(probe) = orig;
    Ok((plus - minus) / (2.0 * h))
}
