//! Batched NT-Xent between quantized reconstructions and modality views.
//!
//! Each item's reconstruction projection is the anchor; its positives are
//! the same item's per-modality projections. The denominator pool per
//! anchor is controlled by [`NegativePolicy`]: other items' reconstructions,
//! other items' modality projections (within the modality term), and
//! optionally the positive itself. Losses are summed over modalities and
//! averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePolicy {
    /// Other items' reconstruction projections count as negatives.
    pub reconstruction_negatives: bool,
    /// Other items' modality projections count as negatives.
    pub modality_negatives: bool,
    /// Keep the positive pair inside the denominator (standard softmax form).
    pub positive_in_denominator: bool,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        NegativePolicy {
            reconstruction_negatives: true,
            modality_negatives: true,
            positive_in_denominator: true,
        }
    }
}

impl NegativePolicy {
    pub fn recon_only() -> Self {
        NegativePolicy { modality_negatives: false, ..Default::default() }
    }

    pub fn modal_only() -> Self {
        NegativePolicy { reconstruction_negatives: false, ..Default::default() }
    }

    /// Denominator entries per anchor for a batch of `b`.
    fn pool_size(&self, b: usize) -> usize {
        let mut n = 0;
        if self.reconstruction_negatives {
            n += b - 1;
        }
        if self.modality_negatives {
            n += b - 1;
        }
        if self.positive_in_denominator {
            n += 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Rows are L2-normalized before the dot product.
    Cosine,
    /// Raw dot product, no normalization.
    Dot,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::Cosine
    }
}

/// Builds the scalar NT-Xent node on an existing tape.
///
/// `recon` is [B, p]; `modalities` holds one [B, p] node per modality.
pub fn nt_xent_graph(
    tape: &mut Tape,
    recon: NodeId,
    modalities: &[NodeId],
    tau: f64,
    policy: NegativePolicy,
    similarity: Similarity,
) -> Result<NodeId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if modalities.is_empty() {
        return Err(Error::InvalidConfig("contrastive loss needs at least one modality".into()));
    }
    let shape = tape.value(recon).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidInput(format!("reconstruction must be [B, p], got {shape:?}")));
    }
    let b = shape[0];
    for (m, &h) in modalities.iter().enumerate() {
        if tape.value(h).shape() != shape {
            return Err(Error::InvalidInput(format!(
                "modality {m} projections have shape {:?}, reconstruction is {:?}",
                tape.value(h).shape(),
                shape
            )));
        }
    }
    if policy.pool_size(b) == 0 {
        return Err(Error::InvalidConfig(format!(
            "denominator is empty for batch {b}: enable a negative source or the positive term"
        )));
    }

    let anchors = match similarity {
        Similarity::Cosine => tape.row_normalize(recon)?,
        Similarity::Dot => recon,
    };
    // Anchor-anchor similarities are shared by every modality term.
    let self_part = if policy.reconstruction_negatives {
        let s = tape.matmul_tb(anchors, anchors)?;
        Some(tape.scale(s, 1.0 / tau)?)
    } else {
        None
    };

    let mut total: Option<NodeId> = None;
    for &h in modalities {
        let views = match similarity {
            Similarity::Cosine => tape.row_normalize(h)?,
            Similarity::Dot => h,
        };
        let cross = tape.matmul_tb(anchors, views)?;
        let cross = tape.scale(cross, 1.0 / tau)?;
        let pos = tape.diag(cross)?;

        let mut parts = Vec::new();
        let mut mask_cols: Vec<Box<dyn Fn(usize, usize) -> bool>> = Vec::new();
        if let Some(sp) = self_part {
            parts.push(sp);
            mask_cols.push(Box::new(|i, j| i != j));
        }
        if policy.modality_negatives || policy.positive_in_denominator {
            parts.push(cross);
            let modal = policy.modality_negatives;
            let positive = policy.positive_in_denominator;
            mask_cols.push(Box::new(move |i, j| if i == j { positive } else { modal }));
        }

        let cat = tape.concat_cols(&parts)?;
        let mut mask = Vec::with_capacity(b * parts.len() * b);
        for i in 0..b {
            for part_mask in &mask_cols {
                for j in 0..b {
                    mask.push(part_mask(i, j));
                }
            }
        }
        let lse = tape.row_logsumexp_masked(cat, mask)?;
        let per_anchor = tape.sub(lse, pos)?;
        let summed = tape.sum(per_anchor)?;
        let mean = tape.scale(summed, 1.0 / b as f64)?;
        total = Some(match total {
            None => mean,
            Some(acc) => tape.add(acc, mean)?,
        });
    }
    Ok(total.expect("at least one modality"))
}

/// Value-only NT-Xent on a private tape.
pub fn nt_xent(
    recon: &Tensor,
    modalities: &[Tensor],
    tau: f64,
    policy: NegativePolicy,
    similarity: Similarity,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.leaf(recon.clone());
    let hs: Vec<NodeId> = modalities.iter().map(|h| tape.leaf(h.clone())).collect();
    let loss = nt_xent_graph(&mut tape, r, &hs, tau, policy, similarity)?;
    Ok(tape.value(loss).item())
}
