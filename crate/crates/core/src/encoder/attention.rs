use super::{ModelConfig, StepOutput};
use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor};

/// Attention of one block at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    /// Full `(K+N) x (K+N)` matrix per head; every row sums to one.
    pub heads: Vec<Tensor>,
    /// Memory-row attention averaged over heads, `K x (K+N)` (all rows when
    /// the model has no memory tokens).
    pub query_rows: Tensor,
    /// Memory-to-patch attention averaged over query rows and heads, reshaped
    /// to each view's patch grid.
    pub view_grids: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExtract {
    pub layers: Vec<LayerAttention>,
}

/// Pulls the recorded attention of one step off the tape and maps the
/// memory-to-patch weights back onto each view's spatial grid.
pub fn extract_attention(
    tape: &Tape,
    step: &StepOutput,
    config: &ModelConfig,
) -> Result<AttentionExtract> {
    let nodes = step
        .attention
        .as_ref()
        .ok_or_else(|| Error::State("attention recording was not enabled".into()))?;
    let k = config.encoder.memory_tokens;
    let grids = config.grids();
    let layers = nodes
        .iter()
        .map(|&var| {
            let (heads, n, probs) = tape
                .attention_probs(var)
                .ok_or_else(|| Error::State("node is not an attention op".into()))?;
            let per_head: Vec<Tensor> = probs
                .chunks(n * n)
                .map(|c| Tensor::matrix(n, n, c.to_vec()))
                .collect::<Result<_>>()?;
            let (q_lo, q_hi) = if k > 0 { (0, k) } else { (0, n) };
            let q = q_hi - q_lo;
            let mut query_rows = vec![0.0; q * n];
            for h in &per_head {
                for r in 0..q {
                    for (acc, v) in query_rows[r * n..(r + 1) * n].iter_mut().zip(h.row(q_lo + r)) {
                        *acc += v / heads as f64;
                    }
                }
            }
            let mut offset = k;
            let mut view_grids = Vec::with_capacity(grids.len());
            for &(gh, gw) in &grids {
                let count = gh * gw;
                let mut grid = vec![0.0; count];
                for r in 0..q {
                    for (g, v) in grid.iter_mut().zip(&query_rows[r * n + offset..r * n + offset + count]) {
                        *g += v / q as f64;
                    }
                }
                view_grids.push(Tensor::matrix(gh, gw, grid)?);
                offset += count;
            }
            Ok(LayerAttention {
                heads: per_head,
                query_rows: Tensor::matrix(q, n, query_rows)?,
                view_grids,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttentionExtract { layers })
}
