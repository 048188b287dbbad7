//! Residual quantization against a stack of codebooks.
//!
//! Hard quantization greedily picks the nearest codeword per level and
//! subtracts it from the running residual. Soft quantization replaces the
//! argmin with a Gumbel-softmax over negative squared distances at
//! temperature α, producing differentiable per-level weight rows whose
//! weighted codeword sums add up to the reconstruction. As α → 0 the soft
//! path collapses onto the hard path.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Scale of the Gaussian jitter added to sampled vectors when a codebook is
/// initialized from data.
pub const INIT_JITTER: f64 = 0.01;

/// Telescoping slack per unit of input magnitude; the reconstruction must
/// equal `r_0 − r_L` to within this times `max(1, ‖z‖∞)`.
pub const TELESCOPE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookSharing {
    /// Every level addresses the same codeword storage.
    Shared,
    /// Each level owns an independent codebook.
    PerLevel,
}

impl std::fmt::Display for CodebookSharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodebookSharing::Shared => write!(f, "shared"),
            CodebookSharing::PerLevel => write!(f, "per_level"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStack {
    levels: usize,
    size: usize,
    dim: usize,
    sharing: CodebookSharing,
    /// One tensor in `Shared` mode, `levels` tensors otherwise; each [K, d].
    books: Vec<Tensor>,
}

impl CodebookStack {
    /// Initializes codewords by sampling rows of `samples` (without
    /// replacement when possible) and adding small Gaussian jitter so
    /// duplicate samples still yield distinct codewords.
    pub fn init_from_samples(
        levels: usize,
        size: usize,
        sharing: CodebookSharing,
        samples: &Tensor,
        rng: &mut ChaCha20Rng,
    ) -> Result<CodebookStack> {
        if levels == 0 || size == 0 {
            return Err(Error::InvalidConfig("codebook stack needs levels ≥ 1 and size ≥ 1".into()));
        }
        let n = samples.rows();
        let dim = samples.cols();
        if n == 0 {
            return Err(Error::InvalidInput("cannot initialize codebooks from zero samples".into()));
        }
        let book_count = match sharing {
            CodebookSharing::Shared => 1,
            CodebookSharing::PerLevel => levels,
        };
        let normal = rand_distr::StandardNormal;
        let mut books = Vec::with_capacity(book_count);
        for _ in 0..book_count {
            let mut book = Tensor::zeros(&[size, dim]);
            let picks = sample_indices(n, size, rng);
            for (k, src) in picks.iter().enumerate() {
                let row = samples.row(*src).to_vec();
                for (j, d) in book.row_mut(k).iter_mut().enumerate() {
                    let eps: f64 = normal.sample(rng);
                    *d = row[j] + eps * INIT_JITTER;
                }
            }
            books.push(book);
        }
        Ok(CodebookStack { levels, size, dim, sharing, books })
    }

    pub fn from_books(
        levels: usize,
        size: usize,
        dim: usize,
        sharing: CodebookSharing,
        books: Vec<Tensor>,
    ) -> Result<CodebookStack> {
        let stack = CodebookStack { levels, size, dim, sharing, books };
        stack.validate()?;
        Ok(stack)
    }

    fn validate(&self) -> Result<()> {
        let expected = match self.sharing {
            CodebookSharing::Shared => 1,
            CodebookSharing::PerLevel => self.levels,
        };
        if self.levels == 0 || self.size == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("codebook stack has a zero dimension".into()));
        }
        if self.books.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "{} codebooks stored, {} sharing wants {}",
                self.books.len(),
                self.sharing,
                expected
            )));
        }
        for (i, b) in self.books.iter().enumerate() {
            if b.shape() != [self.size, self.dim] {
                return Err(Error::InvalidConfig(format!(
                    "codebook {} has shape {:?}, want [{}, {}]",
                    i,
                    b.shape(),
                    self.size,
                    self.dim
                )));
            }
            if !b.all_finite() {
                return Err(Error::NonFinite(format!("codebook {i}")));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sharing(&self) -> CodebookSharing {
        self.sharing
    }

    /// Codebook used at `level` (0-based).
    pub fn level_book(&self, level: usize) -> &Tensor {
        match self.sharing {
            CodebookSharing::Shared => &self.books[0],
            CodebookSharing::PerLevel => &self.books[level],
        }
    }

    /// Distinct stored codebooks (1 when shared).
    pub fn books(&self) -> &[Tensor] {
        &self.books
    }

    pub fn books_mut(&mut self) -> &mut [Tensor] {
        &mut self.books
    }

    /// SHA-256 over a canonical little-endian encoding of the stack. Stable
    /// across platforms; any codeword bit flip changes it.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"semtok-codebooks-v1");
        hasher.update((self.levels as u32).to_le_bytes());
        hasher.update((self.size as u32).to_le_bytes());
        hasher.update((self.dim as u32).to_le_bytes());
        hasher.update([match self.sharing {
            CodebookSharing::Shared => 0u8,
            CodebookSharing::PerLevel => 1u8,
        }]);
        for b in &self.books {
            for v in b.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codebook stack serializes")
    }

    pub fn from_json(text: &str) -> Result<CodebookStack> {
        let stack: CodebookStack = serde_json::from_str(text)?;
        stack.validate()?;
        Ok(stack)
    }

    /// Sum of the addressed codewords for a code tuple.
    pub fn decode(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() != self.levels {
            return Err(Error::InvalidInput(format!(
                "{} codes for {} levels",
                codes.len(),
                self.levels
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (l, &k) in codes.iter().enumerate() {
            if k >= self.size {
                return Err(Error::InvalidInput(format!(
                    "code {} at level {} out of range (K={})",
                    k, l, self.size
                )));
            }
            let row = self.level_book(l).row(k);
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// `count` indices into `0..n`: a partial Fisher-Yates draw without
/// replacement when `n ≥ count`, otherwise uniform with replacement.
fn sample_indices(n: usize, count: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if n >= count {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    } else {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    }
}

// ── temperature schedule ─────────────────────────────────────────────────

/// Exponential decay `α(t) = max(floor, initial·e^(−rate·t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub initial: f64,
    pub decay_rate: f64,
    pub floor: f64,
}

impl AlphaSchedule {
    pub fn new(initial: f64, decay_rate: f64, floor: f64) -> Result<AlphaSchedule> {
        if !(initial > 0.0) || !(floor > 0.0) || floor > initial || !(decay_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha schedule wants 0 < floor ≤ initial and rate ≥ 0, got initial={initial} rate={decay_rate} floor={floor}"
            )));
        }
        Ok(AlphaSchedule { initial, decay_rate, floor })
    }

    /// Rate chosen so the schedule decays to `2·floor` at `final_epoch`
    /// (i.e. it hits the floor shortly after training ends, never long
    /// before). Zero rate when the range or epoch count makes decay moot.
    pub fn annealed_to(initial: f64, floor: f64, final_epoch: usize) -> Result<AlphaSchedule> {
        let rate = if final_epoch == 0 || 2.0 * floor >= initial {
            0.0
        } else {
            (initial / (2.0 * floor)).ln() / final_epoch as f64
        };
        AlphaSchedule::new(initial, rate, floor)
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        (self.initial * (-self.decay_rate * epoch as f64).exp()).max(self.floor)
    }

    /// Whether exploration noise should still be active at this epoch.
    pub fn above_floor(&self, epoch: usize) -> bool {
        self.alpha_at(epoch) > self.floor
    }
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule { initial: 0.2, decay_rate: 0.0, floor: 1e-3 }
    }
}

// ── soft quantization ────────────────────────────────────────────────────

/// Graph handles produced by [`soft_quantize_graph`].
pub struct SoftQuantizeGraph {
    /// Per-level soft assignment rows, each [B, K]; rows sum to 1.
    pub weights: Vec<NodeId>,
    /// Residuals r_0 … r_L (length levels+1); r_0 is the input.
    pub residuals: Vec<NodeId>,
    /// Σ over levels of the weighted codeword sums, [B, d].
    pub reconstruction: NodeId,
}

/// Builds the differentiable quantization graph on an existing tape.
///
/// `books` supplies the codebook leaf per level; pass the same id for every
/// level to train a shared codebook. `noise`, when present, holds one [B, K]
/// leaf per level (e.g. Gumbel draws) added to the negative squared
/// distances before the division by α.
pub fn soft_quantize_graph(
    tape: &mut Tape,
    z: NodeId,
    books: &[NodeId],
    alpha: f64,
    noise: Option<&[NodeId]>,
) -> Result<SoftQuantizeGraph> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("soft quantization needs α > 0, got {alpha}")));
    }
    if books.is_empty() {
        return Err(Error::InvalidConfig("soft quantization needs at least one level".into()));
    }
    if let Some(n) = noise {
        if n.len() != books.len() {
            return Err(Error::InvalidConfig(format!(
                "{} noise leaves for {} levels",
                n.len(),
                books.len()
            )));
        }
    }

    let mut weights = Vec::with_capacity(books.len());
    let mut residuals = vec![z];
    let mut recon: Option<NodeId> = None;

    for (l, &book) in books.iter().enumerate() {
        let r = *residuals.last().expect("nonempty");
        // −‖r − e‖² = 2·r·eᵀ − ‖e‖² − ‖r‖², assembled with row/col broadcasts.
        let r_sq = {
            let sq = tape.mul(r, r)?;
            tape.row_sums(sq)?
        };
        let e_sq = {
            let sq = tape.mul(book, book)?;
            tape.row_sums(sq)?
        };
        let cross = tape.matmul_tb(r, book)?;
        let cross2 = tape.scale(cross, 2.0)?;
        let neg_e = tape.neg(e_sq)?;
        let neg_r = tape.neg(r_sq)?;
        let partial = tape.add_row_vec(cross2, neg_e)?;
        let mut scores = tape.add_col_vec(partial, neg_r)?;
        if let Some(n) = noise {
            scores = tape.add(scores, n[l])?;
        }
        let logits = tape.scale(scores, 1.0 / alpha)?;
        let w = tape.row_softmax(logits)?;
        let q = tape.matmul(w, book)?;
        let next_r = tape.sub(r, q)?;
        recon = Some(match recon {
            None => q,
            Some(acc) => tape.add(acc, q)?,
        });
        weights.push(w);
        residuals.push(next_r);
    }

    Ok(SoftQuantizeGraph {
        weights,
        residuals,
        reconstruction: recon.expect("at least one level"),
    })
}

/// Value-level soft quantization result.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    /// Per-level [B, K] weight rows.
    pub weights: Vec<Tensor>,
    /// r_0 … r_L, each [B, d].
    pub residuals: Vec<Tensor>,
    /// [B, d].
    pub reconstruction: Tensor,
}

impl SoftAssignment {
    /// Largest absolute deviation between the reconstruction and r_0 − r_L.
    pub fn telescoping_error(&self) -> f64 {
        let r0 = self.residuals.first().expect("r_0");
        let rl = self.residuals.last().expect("r_L");
        let mut worst = 0.0f64;
        for i in 0..self.reconstruction.len() {
            let e = (self.reconstruction.data()[i] - (r0.data()[i] - rl.data()[i])).abs();
            worst = worst.max(e);
        }
        worst
    }
}

/// Soft-quantizes a [d] vector or [B, d] batch without building gradients.
/// `noise` enables per-draw Gumbel perturbation of the scores.
pub fn soft_quantize(
    stack: &CodebookStack,
    z: &Tensor,
    alpha: f64,
    noise: Option<&mut ChaCha20Rng>,
) -> Result<SoftAssignment> {
    let batch = match z.shape() {
        [d] if *d == stack.dim() => Tensor::from_vec(&[1, *d], z.data().to_vec())?,
        [_, d] if *d == stack.dim() => z.clone(),
        other => {
            return Err(Error::InvalidInput(format!(
                "input shape {:?} does not match codebook dim {}",
                other,
                stack.dim()
            )))
        }
    };
    if !batch.all_finite() {
        return Err(Error::NonFinite("soft quantization input".into()));
    }

    let rows = batch.rows();
    let mut tape = Tape::new();
    let z_leaf = tape.leaf(batch.clone());
    let book_leaves: Vec<NodeId> = (0..stack.levels())
        .map(|l| tape.leaf(stack.level_book(l).clone()))
        .collect();
    let noise_leaves = match noise {
        Some(rng) => {
            let mut leaves = Vec::with_capacity(stack.levels());
            for _ in 0..stack.levels() {
                leaves.push(tape.leaf(sample_gumbel(&[rows, stack.size()], rng)));
            }
            Some(leaves)
        }
        None => None,
    };
    let graph = soft_quantize_graph(&mut tape, z_leaf, &book_leaves, alpha, noise_leaves.as_deref())?;

    let assignment = SoftAssignment {
        weights: graph.weights.iter().map(|w| tape.value(*w).clone()).collect(),
        residuals: graph.residuals.iter().map(|r| tape.value(*r).clone()).collect(),
        reconstruction: tape.value(graph.reconstruction).clone(),
    };
    let scale = batch.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    debug_assert!(
        assignment.telescoping_error() <= TELESCOPE_TOL * scale,
        "telescoping violated: {} > {}",
        assignment.telescoping_error(),
        TELESCOPE_TOL * scale
    );
    Ok(assignment)
}

/// Standard Gumbel(0, 1) draws in row-major order.
pub fn sample_gumbel(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let mut out = Tensor::zeros(shape);
    for v in out.data_mut() {
        *v = gumbel.sample(rng);
    }
    out
}

/// Greedy nearest-codeword codes for one vector. Distance ties resolve to
/// the lowest codeword index.
pub fn hard_quantize(stack: &CodebookStack, z: &[f64]) -> Result<Vec<usize>> {
    if z.len() != stack.dim() {
        return Err(Error::InvalidInput(format!(
            "input width {} does not match codebook dim {}",
            z.len(),
            stack.dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hard quantization input".into()));
    }
    let mut residual = z.to_vec();
    let mut codes = Vec::with_capacity(stack.levels());
    for l in 0..stack.levels() {
        let book = stack.level_book(l);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for k in 0..stack.size() {
            let d = tensor::sq_dist(&residual, book.row(k));
            if d < best_dist {
                best_dist = d;
                best = k;
            }
        }
        let row = book.row(best);
        for (r, e) in residual.iter_mut().zip(row) {
            *r -= e;
        }
        codes.push(best);
    }
    Ok(codes)
}

/// [`hard_quantize`] over the rows of a [N, d] matrix.
pub fn hard_quantize_batch(stack: &CodebookStack, z: &Tensor) -> Result<Vec<Vec<usize>>> {
    (0..z.rows()).map(|i| hard_quantize(stack, z.row(i))).collect()
}
