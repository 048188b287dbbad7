//! Per-modality encoders, attention fusion, and the projection head, plus
//! the bundle type that owns every trainable tensor.
//!
//! All forward math is defined once, as tape graph builders; the plain
//! `encode`/`fuse`/`project` conveniences run the same graphs on a private
//! tape and read the values back, so there is no second implementation to
//! drift.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::quantizer::CodebookStack;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// [input, output].
    pub weight: Tensor,
    /// [output].
    pub bias: Tensor,
}

impl LinearLayer {
    /// Glorot-uniform weight, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut ChaCha20Rng) -> LinearLayer {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let mut weight = Tensor::zeros(&[input, output]);
        for v in weight.data_mut() {
            *v = rng.gen::<f64>() * 2.0 * bound - bound;
        }
        LinearLayer { weight, bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// MLP from one modality's raw feature width into the shared latent space:
/// every hidden layer is followed by ReLU, the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub name: String,
    pub layers: Vec<LinearLayer>,
}

impl ModalityEncoder {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> ModalityEncoder {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let layers = dims.windows(2).map(|w| LinearLayer::glorot(w[0], w[1], rng)).collect();
        ModalityEncoder { name: name.into(), layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("at least one layer").input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    /// Forward graph over a [B, input_dim] node. `leaves` must yield
    /// weight/bias leaf ids in layer order, as registered by
    /// [`build_fusion_graph`].
    fn graph(
        &self,
        tape: &mut Tape,
        input: NodeId,
        leaves: &mut impl Iterator<Item = NodeId>,
    ) -> Result<NodeId> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, _) in self.layers.iter().enumerate() {
            let w = leaves.next().expect("weight leaf");
            let b = leaves.next().expect("bias leaf");
            x = tape.matmul(x, w)?;
            x = tape.add_row_vec(x, b)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Latent vector for one raw feature vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "modality `{}` expects width {}, got {}",
                self.name,
                self.input_dim(),
                x.len()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::from_vec(&[1, x.len()], x.to_vec())?);
        let mut leaves = Vec::new();
        for l in &self.layers {
            leaves.push(tape.leaf(l.weight.clone()));
            leaves.push(tape.leaf(l.bias.clone()));
        }
        let out = self.graph(&mut tape, input, &mut leaves.into_iter())?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Attention pool over modality latents: a learned query vector scores each
/// modality per item, scores softmax into importance weights, and the fused
/// vector is the importance-weighted sum of the latents.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFusion {
    /// [d, 1].
    pub query: Tensor,
}

impl AttentionFusion {
    pub fn new(latent_dim: usize, rng: &mut ChaCha20Rng) -> AttentionFusion {
        let bound = (6.0 / (latent_dim + 1) as f64).sqrt();
        let mut query = Tensor::zeros(&[latent_dim, 1]);
        for v in query.data_mut() {
            *v = rng.gen::<f64>() * 2.0 * bound - bound;
        }
        AttentionFusion { query }
    }

    pub fn latent_dim(&self) -> usize {
        self.query.shape()[0]
    }

    /// Fused graph over per-modality [B, d] latent nodes. Returns
    /// (fused [B, d], importance [B, M]).
    fn graph(
        &self,
        tape: &mut Tape,
        query_leaf: NodeId,
        latents: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        if latents.is_empty() {
            return Err(Error::InvalidInput("fusion over an empty modality list".into()));
        }
        let mut logit_cols = Vec::with_capacity(latents.len());
        for &z in latents {
            logit_cols.push(tape.matmul(z, query_leaf)?);
        }
        let logits = tape.concat_cols(&logit_cols)?;
        let importance = tape.row_softmax(logits)?;
        let mut fused: Option<NodeId> = None;
        for (m, &z) in latents.iter().enumerate() {
            let w = tape.col(importance, m)?;
            let weighted = tape.scale_rows(z, w)?;
            fused = Some(match fused {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        Ok((fused.expect("nonempty"), importance))
    }

    /// Fuses one item's modality latents; returns (fused, importance).
    pub fn fuse(&self, latents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.latent_dim();
        for (m, z) in latents.iter().enumerate() {
            if z.len() != d {
                return Err(Error::InvalidInput(format!(
                    "latent {m} has width {}, fusion expects {d}",
                    z.len()
                )));
            }
        }
        let mut tape = Tape::new();
        let q = tape.leaf(self.query.clone());
        let latent_leaves: Result<Vec<NodeId>> = latents
            .iter()
            .map(|z| Ok(tape.leaf(Tensor::from_vec(&[1, d], z.clone())?)))
            .collect();
        let (fused, importance) = self.graph(&mut tape, q, &latent_leaves?)?;
        Ok((tape.value(fused).data().to_vec(), tape.value(importance).data().to_vec()))
    }
}

/// Contrastive projection head g. Trained alongside the encoders, used only
/// to form the loss, and ignored once tokens are assigned; `Identity` is the
/// ablation that removes it.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionHead {
    Identity,
    Mlp { l1: LinearLayer, l2: LinearLayer },
}

impl ProjectionHead {
    /// linear(d→d) · ReLU · linear(d→p).
    pub fn mlp(latent_dim: usize, output_dim: usize, rng: &mut ChaCha20Rng) -> ProjectionHead {
        ProjectionHead::Mlp {
            l1: LinearLayer::glorot(latent_dim, latent_dim, rng),
            l2: LinearLayer::glorot(latent_dim, output_dim, rng),
        }
    }

    fn graph(
        &self,
        tape: &mut Tape,
        input: NodeId,
        leaves: &[NodeId],
    ) -> Result<NodeId> {
        match self {
            ProjectionHead::Identity => Ok(input),
            ProjectionHead::Mlp { .. } => {
                let x = tape.matmul(input, leaves[0])?;
                let x = tape.add_row_vec(x, leaves[1])?;
                let x = tape.relu(x)?;
                let x = tape.matmul(x, leaves[2])?;
                tape.add_row_vec(x, leaves[3])
            }
        }
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            ProjectionHead::Identity => Ok(z.to_vec()),
            ProjectionHead::Mlp { l1, l2 } => {
                if z.len() != l1.input_dim() {
                    return Err(Error::InvalidInput(format!(
                        "projection expects width {}, got {}",
                        l1.input_dim(),
                        z.len()
                    )));
                }
                let mut tape = Tape::new();
                let input = tape.leaf(Tensor::from_vec(&[1, z.len()], z.to_vec())?);
                let leaves = vec![
                    tape.leaf(l1.weight.clone()),
                    tape.leaf(l1.bias.clone()),
                    tape.leaf(l2.weight.clone()),
                    tape.leaf(l2.bias.clone()),
                ];
                let out = self.graph(&mut tape, input, &leaves)?;
                Ok(tape.value(out).data().to_vec())
            }
        }
    }
}

/// Everything training updates: encoders (modality order is canonical),
/// fusion query, projection head, codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifacts {
    pub encoders: Vec<ModalityEncoder>,
    pub fusion: AttentionFusion,
    pub projection: ProjectionHead,
    pub codebooks: CodebookStack,
}

impl ModelArtifacts {
    pub fn latent_dim(&self) -> usize {
        self.fusion.latent_dim()
    }

    /// Canonical (name, tensor) walk: encoder layers in modality order, the
    /// fusion query, projection layers, then codebooks. Checkpoints, the
    /// optimizer, and graph leaf registration all follow this order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            for (i, l) in enc.layers.iter().enumerate() {
                out.push((format!("encoder.{}.{}.weight", enc.name, i), &l.weight));
                out.push((format!("encoder.{}.{}.bias", enc.name, i), &l.bias));
            }
        }
        out.push(("fusion.query".to_string(), &self.fusion.query));
        if let ProjectionHead::Mlp { l1, l2 } = &self.projection {
            out.push(("projection.0.weight".to_string(), &l1.weight));
            out.push(("projection.0.bias".to_string(), &l1.bias));
            out.push(("projection.1.weight".to_string(), &l2.weight));
            out.push(("projection.1.bias".to_string(), &l2.bias));
        }
        for (b, book) in self.codebooks.books().iter().enumerate() {
            out.push((format!("codebook.{b}"), book));
        }
        out
    }

    /// Mutable twin of [`ModelArtifacts::params`]; must visit the same names
    /// in the same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for enc in &mut self.encoders {
            let name = enc.name.clone();
            for (i, l) in enc.layers.iter_mut().enumerate() {
                out.push((format!("encoder.{name}.{i}.weight"), &mut l.weight));
                out.push((format!("encoder.{name}.{i}.bias"), &mut l.bias));
            }
        }
        out.push(("fusion.query".to_string(), &mut self.fusion.query));
        if let ProjectionHead::Mlp { l1, l2 } = &mut self.projection {
            out.push(("projection.0.weight".to_string(), &mut l1.weight));
            out.push(("projection.0.bias".to_string(), &mut l1.bias));
            out.push(("projection.1.weight".to_string(), &mut l2.weight));
            out.push(("projection.1.bias".to_string(), &mut l2.bias));
        }
        for (b, book) in self.codebooks.books_mut().iter_mut().enumerate() {
            out.push((format!("codebook.{b}"), book));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Fused embeddings and importance weights for a batch of per-modality
    /// inputs (one [B, width_m] tensor per modality, modality order).
    pub fn fuse_batch(&self, inputs: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let graph = build_fusion_graph(&mut tape, self, inputs)?;
        Ok((tape.value(graph.fused).clone(), tape.value(graph.importance).clone()))
    }
}

/// Node handles for the shared forward graph of one batch.
pub struct ModelGraph {
    /// Leaves for every trainable tensor, aligned with [`ModelArtifacts::params`].
    pub param_leaves: Vec<NodeId>,
    /// Input leaves, one [B, width_m] per modality.
    pub input_leaves: Vec<NodeId>,
    /// Codebook leaf per level (the same id repeats under sharing).
    pub codebook_leaves: Vec<NodeId>,
    /// Projection head leaves (empty for `Identity`).
    pub projection_leaves: Vec<NodeId>,
    /// Per-modality latents z_m, [B, d].
    pub latents: Vec<NodeId>,
    /// Per-modality projections h_m = g(z_m), [B, p].
    pub projections: Vec<NodeId>,
    /// Modality importance weights, [B, M].
    pub importance: NodeId,
    /// Fused embedding, [B, d].
    pub fused: NodeId,
}

/// Registers every parameter as a leaf and builds encoders → projections →
/// fusion for one batch. Quantization and the loss attach on top via
/// [`crate::quantizer::soft_quantize_graph`] and [`project_node`].
pub fn build_fusion_graph(
    tape: &mut Tape,
    artifacts: &ModelArtifacts,
    inputs: &[Tensor],
) -> Result<ModelGraph> {
    if inputs.len() != artifacts.encoders.len() {
        return Err(Error::InvalidInput(format!(
            "{} input tensors for {} modalities",
            inputs.len(),
            artifacts.encoders.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidInput("fusion over an empty modality list".into()));
    }
    let batch = inputs[0].rows();
    for (enc, x) in artifacts.encoders.iter().zip(inputs) {
        if x.rows() != batch || x.cols() != enc.input_dim() {
            return Err(Error::InvalidInput(format!(
                "modality `{}` expects [{}, {}], got {:?}",
                enc.name,
                batch,
                enc.input_dim(),
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("inputs for modality `{}`", enc.name)));
        }
    }

    let param_leaves: Vec<NodeId> =
        artifacts.params().iter().map(|(_, t)| tape.leaf((*t).clone())).collect();
    let input_leaves: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();

    // Walk param_leaves with a cursor in the exact order params() emitted them.
    let mut cursor = param_leaves.iter().copied();
    let mut latents = Vec::with_capacity(inputs.len());
    for (enc, &input) in artifacts.encoders.iter().zip(&input_leaves) {
        latents.push(enc.graph(tape, input, &mut cursor)?);
    }
    let query_leaf = cursor.next().expect("fusion query leaf");
    let projection_leaves: Vec<NodeId> = match &artifacts.projection {
        ProjectionHead::Identity => Vec::new(),
        ProjectionHead::Mlp { .. } => (0..4).map(|_| cursor.next().expect("projection leaf")).collect(),
    };
    let book_leaves: Vec<NodeId> = cursor.collect();
    debug_assert_eq!(book_leaves.len(), artifacts.codebooks.books().len());
    let codebook_leaves: Vec<NodeId> = (0..artifacts.codebooks.levels())
        .map(|l| match artifacts.codebooks.sharing() {
            crate::quantizer::CodebookSharing::Shared => book_leaves[0],
            crate::quantizer::CodebookSharing::PerLevel => book_leaves[l],
        })
        .collect();

    let mut projections = Vec::with_capacity(latents.len());
    for &z in &latents {
        projections.push(artifacts.projection.graph(tape, z, &projection_leaves)?);
    }
    let (fused, importance) = artifacts.fusion.graph(tape, query_leaf, &latents)?;

    Ok(ModelGraph {
        param_leaves,
        input_leaves,
        codebook_leaves,
        projection_leaves,
        latents,
        projections,
        importance,
        fused,
    })
}

/// Runs the projection head over an arbitrary [B, d] node, reusing the
/// parameter leaves registered by [`build_fusion_graph`].
pub fn project_node(
    tape: &mut Tape,
    artifacts: &ModelArtifacts,
    graph: &ModelGraph,
    input: NodeId,
) -> Result<NodeId> {
    artifacts.projection.graph(tape, input, &graph.projection_leaves)
}
