//! Central finite-difference check of the analytic gradients.

use crate::model::{Example, Model, ModelError};

#[derive(Debug, Clone)]
pub struct BlockError {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Relative error `|g_a - g_n| / max(|g_a|, |g_n|)` per parameter block,
/// with the numeric gradient taken by central differences of step `h`.
pub fn check_gradients(model: &Model<f64>, batch: &[Example], h: f64) -> Result<Vec<BlockError>, ModelError> {
    let (_, analytic) = model.loss_and_grad(batch, None)?;
    let mut m = model.clone();
    let mut out = Vec::with_capacity(m.layout.blocks.len());
    for b in model.layout.blocks.clone() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in b.range() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = m.evaluate(batch)?.loss;
            m.params[i] = orig - h;
            let down = m.evaluate(batch)?.loss;
            m.params[i] = orig;
            let g = (up - down) / (2.0 * h);
            diff += (g - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nn += g * g;
        }
        let scale = na.sqrt().max(nn.sqrt());
        out.push(BlockError {
            name: b.name.clone(),
            rel_error: if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale },
            analytic_norm: na.sqrt(),
        });
    }
    Ok(out)
}
