//! Dataset formats, loaders, interaction filtering, and the synthetic
//! hierarchical generator.
//!
//! On disk a dataset directory holds `manifest.json` (modality roster and
//! item count), `embeddings.jsonl` (one item per line with raw per-modality
//! vectors), optional `labels.jsonl` (ground-truth hierarchy paths), and
//! `sequences.jsonl` (per-user chronological item lists). All loaders report
//! 1-based line numbers on malformed input.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDecl {
    pub name: String,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modalities: Vec<ModalityDecl>,
    pub item_count: usize,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub has_labels: bool,
    /// Echo of the generator configuration when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// One item's raw features, modality order matching the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub modalities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<ItemRecord>,
    /// Hierarchy path per item (aligned with `items`) when labels exist.
    pub labels: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }

    /// Per-modality input tensors for the given item indices.
    pub fn batch_inputs(&self, indices: &[usize]) -> Vec<Tensor> {
        self.manifest
            .modalities
            .iter()
            .enumerate()
            .map(|(m, decl)| {
                let mut t = Tensor::zeros(&[indices.len(), decl.width]);
                for (row, &idx) in indices.iter().enumerate() {
                    t.row_mut(row).copy_from_slice(&self.items[idx].modalities[m]);
                }
                t
            })
            .collect()
    }
}

// ── JSONL wire records ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    item_id: String,
    modalities: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    item_id: String,
    path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

// ── loaders ──────────────────────────────────────────────────────────────

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.modalities.is_empty() {
        return Err(Error::data_noline("manifest declares no modalities"));
    }
    let mut seen = BTreeSet::new();
    for m in &manifest.modalities {
        if m.width == 0 {
            return Err(Error::data_noline(format!("modality `{}` has width 0", m.name)));
        }
        if !seen.insert(m.name.as_str()) {
            return Err(Error::data_noline(format!("modality `{}` declared twice", m.name)));
        }
    }
    Ok(manifest)
}

pub fn parse_embeddings(
    reader: impl BufRead,
    manifest: &DatasetManifest,
) -> Result<Vec<ItemRecord>> {
    let mut items = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingLine = serde_json::from_str(&line)
            .map_err(|e| Error::data(lineno, format!("bad embedding record: {e}")))?;
        if rec.item_id.is_empty() {
            return Err(Error::data(lineno, "empty item_id"));
        }
        if !seen.insert(rec.item_id.clone()) {
            return Err(Error::data(lineno, format!("duplicate item_id `{}`", rec.item_id)));
        }
        let mut vectors = Vec::with_capacity(manifest.modalities.len());
        for decl in &manifest.modalities {
            let v = rec.modalities.get(&decl.name).ok_or_else(|| {
                Error::data(
                    lineno,
                    format!("item `{}` is missing modality `{}`", rec.item_id, decl.name),
                )
            })?;
            if v.len() != decl.width {
                return Err(Error::data(
                    lineno,
                    format!(
                        "item `{}` modality `{}` has width {}, manifest declares {}",
                        rec.item_id,
                        decl.name,
                        v.len(),
                        decl.width
                    ),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(
                    lineno,
                    format!("item `{}` modality `{}` contains a non-finite value", rec.item_id, decl.name),
                ));
            }
            vectors.push(v.clone());
        }
        for name in rec.modalities.keys() {
            if !manifest.modalities.iter().any(|d| &d.name == name) {
                return Err(Error::data(
                    lineno,
                    format!("item `{}` carries undeclared modality `{name}`", rec.item_id),
                ));
            }
        }
        items.push(ItemRecord { item_id: rec.item_id, modalities: vectors });
    }
    Ok(items)
}

pub fn parse_labels(reader: impl BufRead) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelLine = serde_json::from_str(&line)
            .map_err(|e| Error::data(lineno, format!("bad label record: {e}")))?;
        if rec.path.is_empty() {
            return Err(Error::data(lineno, format!("item `{}` has an empty path", rec.item_id)));
        }
        if !seen.insert(rec.item_id.clone()) {
            return Err(Error::data(lineno, format!("duplicate item_id `{}`", rec.item_id)));
        }
        out.push((rec.item_id, rec.path));
    }
    Ok(out)
}

pub fn parse_sequences(reader: impl BufRead) -> Result<Vec<UserSequence>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserSequence = serde_json::from_str(&line)
            .map_err(|e| Error::data(lineno, format!("bad sequence record: {e}")))?;
        if rec.user_id.is_empty() {
            return Err(Error::data(lineno, "empty user_id"));
        }
        if !seen.insert(rec.user_id.clone()) {
            return Err(Error::data(lineno, format!("duplicate user_id `{}`", rec.user_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads manifest + embeddings (+ labels when present) from a directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    let file = std::fs::File::open(dir.join("embeddings.jsonl"))?;
    let items = parse_embeddings(BufReader::new(file), &manifest)?;
    if items.len() != manifest.item_count {
        return Err(Error::data_noline(format!(
            "manifest declares {} items, embeddings file holds {}",
            manifest.item_count,
            items.len()
        )));
    }
    let labels_path = dir.join("labels.jsonl");
    let labels = if labels_path.exists() {
        let pairs = parse_labels(BufReader::new(std::fs::File::open(labels_path)?))?;
        let by_id: HashMap<&str, &Vec<usize>> =
            pairs.iter().map(|(id, p)| (id.as_str(), p)).collect();
        let mut aligned = Vec::with_capacity(items.len());
        for item in &items {
            let path = by_id.get(item.item_id.as_str()).ok_or_else(|| {
                Error::data_noline(format!("no label for item `{}`", item.item_id))
            })?;
            aligned.push((*path).clone());
        }
        Some(aligned)
    } else {
        None
    };
    Ok(Dataset { manifest, items, labels })
}

pub fn load_sequences(path: &Path) -> Result<Vec<UserSequence>> {
    let file = std::fs::File::open(path)?;
    parse_sequences(BufReader::new(file))
}

// ── interaction filtering and chronological splits ───────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Items occurring fewer times than this across all sequences are dropped.
    pub min_item_interactions: usize,
    /// Users whose sequence shrinks below this are dropped.
    pub min_user_interactions: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_item_interactions: 10, min_user_interactions: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitUser {
    pub user_id: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSplits {
    pub users: Vec<SplitUser>,
    pub dropped_users: usize,
    pub dropped_items: usize,
}

impl SequenceSplits {
    /// All items appearing anywhere in the kept sequences.
    pub fn active_items(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for u in &self.users {
            for id in u.train.iter().chain(&u.val).chain(&u.test) {
                out.insert(id.as_str());
            }
        }
        out
    }
}

/// Drops rare items and short users to a fixed point, then splits each
/// surviving sequence chronologically 80/10/10 (floor arithmetic, so a
/// 10-interaction user contributes 8/1/1).
pub fn filter_and_split(
    sequences: &[UserSequence],
    known_items: &BTreeSet<&str>,
    cfg: FilterConfig,
) -> Result<SequenceSplits> {
    for seq in sequences {
        for id in &seq.items {
            if !known_items.contains(id.as_str()) {
                return Err(Error::data_noline(format!(
                    "user `{}` references unknown item `{id}`",
                    seq.user_id
                )));
            }
        }
    }

    let mut kept: Vec<(usize, Vec<&str>)> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.items.iter().map(String::as_str).collect()))
        .collect();
    let mut banned_items: BTreeSet<&str> = BTreeSet::new();
    loop {
        let mut changed = false;
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &kept {
            for id in items {
                *freq.entry(id).or_insert(0) += 1;
            }
        }
        let newly_banned: Vec<&str> = freq
            .iter()
            .filter(|(id, n)| **n < cfg.min_item_interactions && !banned_items.contains(**id))
            .map(|(id, _)| *id)
            .collect();
        if !newly_banned.is_empty() {
            changed = true;
            banned_items.extend(newly_banned);
            for (_, items) in &mut kept {
                items.retain(|id| !banned_items.contains(id));
            }
        }
        let before = kept.len();
        kept.retain(|(_, items)| items.len() >= cfg.min_user_interactions);
        if kept.len() != before {
            changed = true;
        }
        if !changed {
            break;
        }
    }

    let users = kept
        .iter()
        .map(|(i, items)| {
            let n = items.len();
            let train_end = n * 8 / 10;
            let val_end = n * 9 / 10;
            SplitUser {
                user_id: sequences[*i].user_id.clone(),
                train: items[..train_end].iter().map(|s| s.to_string()).collect(),
                val: items[train_end..val_end].iter().map(|s| s.to_string()).collect(),
                test: items[val_end..].iter().map(|s| s.to_string()).collect(),
            }
        })
        .collect();
    Ok(SequenceSplits {
        users,
        dropped_users: sequences.len() - kept.len(),
        dropped_items: banned_items.len(),
    })
}

// ── synthetic generator ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModality {
    pub name: String,
    pub width: usize,
    /// Additive Gaussian noise scale on the projected features.
    pub noise: f64,
    /// Multiplier on the informative (projected latent) part.
    pub informativeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Children per node, top level first; `[8, 8, 8]` makes 512 leaves.
    pub branching: Vec<usize>,
    pub items_per_leaf: usize,
    pub latent_dim: usize,
    /// Child-offset scale per extra depth; deeper levels spread less.
    pub level_scale: f64,
    pub modalities: Vec<SyntheticModality>,
    pub users: usize,
    pub seq_len: usize,
    /// Probability that the next interaction stays in the same top branch.
    pub branch_affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            branching: vec![8, 8, 8],
            items_per_leaf: 1,
            latent_dim: 16,
            level_scale: 0.35,
            modalities: vec![
                SyntheticModality { name: "text".into(), width: 64, noise: 0.05, informativeness: 1.0 },
                SyntheticModality { name: "spatial".into(), width: 32, noise: 0.05, informativeness: 1.0 },
            ],
            users: 300,
            seq_len: 40,
            branch_affinity: 0.85,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn item_count(&self) -> usize {
        self.leaf_count() * self.items_per_leaf
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.iter().any(|b| *b == 0) {
            return Err(Error::InvalidConfig("branching factors must all be ≥ 1".into()));
        }
        if self.items_per_leaf == 0 {
            return Err(Error::InvalidConfig("items_per_leaf must be ≥ 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be ≥ 1".into()));
        }
        if !(self.level_scale > 0.0 && self.level_scale < 1.0) {
            return Err(Error::InvalidConfig("level_scale must lie in (0, 1)".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("at least one modality is required".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            if m.width == 0 {
                return Err(Error::InvalidConfig(format!("modality `{}` has width 0", m.name)));
            }
            if m.noise < 0.0 {
                return Err(Error::InvalidConfig(format!("modality `{}` has negative noise", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::InvalidConfig(format!("modality `{}` declared twice", m.name)));
            }
        }
        if self.users > 0 && self.seq_len == 0 {
            return Err(Error::InvalidConfig("seq_len must be ≥ 1 when users > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.branch_affinity) {
            return Err(Error::InvalidConfig("branch_affinity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Generator output. `latents` and `top_centers` stay in memory only (useful
/// for geometry checks); [`write_dataset_dir`] persists the rest.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub sequences: Vec<UserSequence>,
    pub latents: Vec<Vec<f64>>,
    pub top_centers: Vec<Vec<f64>>,
}

/// Samples a hierarchical Gaussian-mixture catalog plus branch-biased user
/// walks. Entirely determined by `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::STREAM_DATA);
    let normal = rand_distr::StandardNormal;
    let draw = |rng: &mut rand_chacha::ChaCha20Rng| -> f64 { normal.sample(rng) };

    // Centers, level by level: top-level clusters are unit Gaussians, each
    // deeper level offsets its parent by a geometrically shrinking scale.
    let mut centers: Vec<Vec<f64>> = vec![vec![0.0; spec.latent_dim]]; // virtual root
    let mut paths: Vec<Vec<usize>> = vec![vec![]];
    let mut top_centers: Vec<Vec<f64>> = Vec::new();
    for (depth, &fanout) in spec.branching.iter().enumerate() {
        let scale = if depth == 0 { 1.0 } else { spec.level_scale.powi(depth as i32) };
        let mut next_centers = Vec::with_capacity(centers.len() * fanout);
        let mut next_paths = Vec::with_capacity(centers.len() * fanout);
        for (parent, path) in centers.iter().zip(&paths) {
            for child in 0..fanout {
                let mut c = parent.clone();
                for v in &mut c {
                    *v += scale * draw(&mut rng);
                }
                let mut p = path.clone();
                p.push(child);
                next_centers.push(c);
                next_paths.push(p);
            }
        }
        centers = next_centers;
        paths = next_paths;
        if depth == 0 {
            top_centers = centers.clone();
        }
    }

    // Items: every leaf emits items_per_leaf items whose latent is exactly
    // the leaf center, so zero observation noise means exact duplicates.
    let mut latents = Vec::with_capacity(spec.item_count());
    let mut labels = Vec::with_capacity(spec.item_count());
    for (c, p) in centers.iter().zip(&paths) {
        for _ in 0..spec.items_per_leaf {
            latents.push(c.clone());
            labels.push(p.clone());
        }
    }

    // Per-modality random projections, then observed features per item.
    let inv_sqrt = 1.0 / (spec.latent_dim as f64).sqrt();
    let projections: Vec<Vec<f64>> = spec
        .modalities
        .iter()
        .map(|m| (0..spec.latent_dim * m.width).map(|_| draw(&mut rng) * inv_sqrt).collect())
        .collect();
    let mut items = Vec::with_capacity(latents.len());
    for (i, latent) in latents.iter().enumerate() {
        let mut vectors = Vec::with_capacity(spec.modalities.len());
        for (m, decl) in spec.modalities.iter().enumerate() {
            let proj = &projections[m];
            let mut x = vec![0.0; decl.width];
            for (j, xj) in x.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, l) in latent.iter().enumerate() {
                    acc += l * proj[k * decl.width + j];
                }
                *xj = decl.informativeness * acc;
            }
            if decl.noise > 0.0 {
                for xj in &mut x {
                    *xj += decl.noise * draw(&mut rng);
                }
            }
            vectors.push(x);
        }
        items.push(ItemRecord { item_id: format!("item_{i:05}"), modalities: vectors });
    }

    // Branch-biased user walks over the catalog.
    let top_of_item: Vec<usize> = labels.iter().map(|p| p[0]).collect();
    let mut branch_members: Vec<Vec<usize>> = vec![Vec::new(); spec.branching[0]];
    for (i, &t) in top_of_item.iter().enumerate() {
        branch_members[t].push(i);
    }
    let mut sequences = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut seq = Vec::with_capacity(spec.seq_len);
        let mut current = rng.gen_range(0..items.len());
        seq.push(items[current].item_id.clone());
        for _ in 1..spec.seq_len {
            let stay: f64 = rng.gen();
            current = if stay < spec.branch_affinity {
                let members = &branch_members[top_of_item[current]];
                members[rng.gen_range(0..members.len())]
            } else {
                rng.gen_range(0..items.len())
            };
            seq.push(items[current].item_id.clone());
        }
        sequences.push(UserSequence { user_id: format!("user_{u:04}"), items: seq });
    }

    let manifest = DatasetManifest {
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalityDecl { name: m.name.clone(), width: m.width })
            .collect(),
        item_count: items.len(),
        source: "synthetic".into(),
        has_labels: true,
        synthetic: Some(spec.clone()),
    };
    Ok(SyntheticDataset {
        dataset: Dataset { manifest, items, labels: Some(labels) },
        sequences,
        latents,
        top_centers,
    })
}

/// Writes `manifest.json`, `embeddings.jsonl`, `labels.jsonl`, and
/// `sequences.jsonl` into `dir` (created if missing).
pub fn write_dataset_dir(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&data.dataset.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest + "\n")?;

    let mut emb = std::io::BufWriter::new(std::fs::File::create(dir.join("embeddings.jsonl"))?);
    for item in &data.dataset.items {
        let line = EmbeddingLine {
            item_id: item.item_id.clone(),
            modalities: data
                .dataset
                .manifest
                .modalities
                .iter()
                .zip(&item.modalities)
                .map(|(d, v)| (d.name.clone(), v.clone()))
                .collect(),
        };
        serde_json::to_writer(&mut emb, &line)?;
        emb.write_all(b"\n")?;
    }
    emb.flush()?;

    if let Some(labels) = &data.dataset.labels {
        let mut lab = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.jsonl"))?);
        for (item, path) in data.dataset.items.iter().zip(labels) {
            let line = LabelLine { item_id: item.item_id.clone(), path: path.clone() };
            serde_json::to_writer(&mut lab, &line)?;
            lab.write_all(b"\n")?;
        }
        lab.flush()?;
    }

    let mut seq = std::io::BufWriter::new(std::fs::File::create(dir.join("sequences.jsonl"))?);
    for s in &data.sequences {
        serde_json::to_writer(&mut seq, s)?;
        seq.write_all(b"\n")?;
    }
    seq.flush()?;
    Ok(())
}
