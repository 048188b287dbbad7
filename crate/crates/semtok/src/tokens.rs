//! Item → token-tuple assignment, diversity metrics, and the token table
//! file format.
//!
//! Raw tuples come from hard-quantizing fused embeddings. Items whose raw
//! tuples collide all receive a disambiguation suffix (0, 1, 2, … by
//! ascending item id), so full identifiers are unique and no identifier is
//! a prefix of another — the property the retrieval trie depends on.
//!
//! The table serializes as JSONL: a header line binding the table to its
//! codebooks (level count, codebook size, sharing mode, codebook checksum),
//! then one record per item in assignment order.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelArtifacts;
use crate::quantizer::{self, CodebookSharing, CodebookStack};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenTuple {
    pub codes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disambiguator: Option<u32>,
}

impl TokenTuple {
    /// Flat token path: level codes, then the suffix when present.
    pub fn full(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.codes.iter().map(|c| *c as u32).collect();
        if let Some(d) = self.disambiguator {
            out.push(d);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TableHeader {
    levels: usize,
    codebook_size: usize,
    sharing: CodebookSharing,
    codebook_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableRecord {
    item_id: String,
    codes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    disambiguator: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    levels: usize,
    codebook_size: usize,
    sharing: CodebookSharing,
    codebook_checksum: String,
    entries: Vec<(String, TokenTuple)>,
    by_item: HashMap<String, usize>,
    by_tokens: HashMap<Vec<u32>, usize>,
}

impl TokenTable {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn sharing(&self) -> CodebookSharing {
        self.sharing
    }

    pub fn codebook_checksum(&self) -> &str {
        &self.codebook_checksum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TokenTuple)> {
        self.entries.iter().map(|(id, t)| (id.as_str(), t))
    }

    pub fn get(&self, item_id: &str) -> Option<&TokenTuple> {
        self.by_item.get(item_id).map(|i| &self.entries[*i].1)
    }

    /// Item owning a full identifier, if any.
    pub fn item_for(&self, tokens: &[u32]) -> Option<&str> {
        self.by_tokens.get(tokens).map(|i| self.entries[*i].0.as_str())
    }

    pub fn from_entries(
        levels: usize,
        codebook_size: usize,
        sharing: CodebookSharing,
        codebook_checksum: String,
        entries: Vec<(String, TokenTuple)>,
    ) -> Result<TokenTable> {
        let mut by_item = HashMap::with_capacity(entries.len());
        let mut by_tokens = HashMap::with_capacity(entries.len());
        let mut raw_seen: HashMap<&[usize], bool> = HashMap::new(); // tuple → has suffix
        for (i, (id, tuple)) in entries.iter().enumerate() {
            if tuple.codes.len() != levels {
                return Err(Error::InvalidInput(format!(
                    "item `{id}` has {} codes, table declares {levels} levels",
                    tuple.codes.len()
                )));
            }
            if let Some(c) = tuple.codes.iter().find(|c| **c >= codebook_size) {
                return Err(Error::InvalidInput(format!(
                    "item `{id}` uses code {c}, codebook size is {codebook_size}"
                )));
            }
            if by_item.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("item `{id}` appears twice")));
            }
            if by_tokens.insert(tuple.full(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "identifier {:?} assigned to more than one item",
                    tuple.full()
                )));
            }
            let has_suffix = tuple.disambiguator.is_some();
            match raw_seen.get(tuple.codes.as_slice()) {
                None => {
                    raw_seen.insert(&tuple.codes, has_suffix);
                }
                Some(prev) => {
                    if *prev != has_suffix || !has_suffix {
                        return Err(Error::InvalidInput(format!(
                            "tuple {:?} mixes suffixed and unsuffixed items",
                            tuple.codes
                        )));
                    }
                }
            }
        }
        Ok(TokenTable { levels, codebook_size, sharing, codebook_checksum, entries, by_item, by_tokens })
    }

    /// Errors unless `stack` is byte-identical to the codebooks this table
    /// was assigned from.
    pub fn verify_checksum(&self, stack: &CodebookStack) -> Result<()> {
        let actual = stack.checksum();
        if actual != self.codebook_checksum {
            return Err(Error::ChecksumMismatch {
                in_table: self.codebook_checksum.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn export(&self, mut w: impl Write) -> Result<()> {
        let header = TableHeader {
            levels: self.levels,
            codebook_size: self.codebook_size,
            sharing: self.sharing,
            codebook_checksum: self.codebook_checksum.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (id, tuple) in &self.entries {
            let rec = TableRecord {
                item_id: id.clone(),
                codes: tuple.codes.clone(),
                disambiguator: tuple.disambiguator,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn export_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.export(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn import(reader: impl BufRead) -> Result<TokenTable> {
        let mut lines = reader.lines().enumerate();
        let header: TableHeader = loop {
            let Some((lineno, line)) = lines.next() else {
                return Err(Error::data_noline("token table is empty, expected a header line"));
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            break serde_json::from_str(&line)
                .map_err(|e| Error::data(lineno + 1, format!("bad table header: {e}")))?;
        };
        let mut entries = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in lines {
            let lineno = lineno + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TableRecord = serde_json::from_str(&line)
                .map_err(|e| Error::data(lineno, format!("bad table record: {e}")))?;
            if rec.codes.len() != header.levels {
                return Err(Error::data(
                    lineno,
                    format!(
                        "item `{}` has {} codes, table declares {} levels",
                        rec.item_id,
                        rec.codes.len(),
                        header.levels
                    ),
                ));
            }
            if let Some(c) = rec.codes.iter().find(|c| **c >= header.codebook_size) {
                return Err(Error::data(
                    lineno,
                    format!(
                        "item `{}` uses code {c}, codebook size is {}",
                        rec.item_id, header.codebook_size
                    ),
                ));
            }
            if let Some(first) = seen.insert(rec.item_id.clone(), lineno) {
                return Err(Error::data(
                    lineno,
                    format!("item `{}` appears twice, first on line {first}", rec.item_id),
                ));
            }
            entries.push((rec.item_id, TokenTuple { codes: rec.codes, disambiguator: rec.disambiguator }));
        }
        TokenTable::from_entries(
            header.levels,
            header.codebook_size,
            header.sharing,
            header.codebook_checksum,
            entries,
        )
    }

    pub fn import_from(path: &Path) -> Result<TokenTable> {
        let file = std::fs::File::open(path)?;
        TokenTable::import(std::io::BufReader::new(file))
    }
}

/// Hard codes for every item, in dataset order, batched through the fusion
/// graph.
pub fn raw_codes(dataset: &Dataset, artifacts: &ModelArtifacts) -> Result<Vec<Vec<usize>>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let inputs = dataset.batch_inputs(chunk);
        let (fused, _) = artifacts.fuse_batch(&inputs)?;
        out.extend(quantizer::hard_quantize_batch(&artifacts.codebooks, &fused)?);
    }
    Ok(out)
}

/// Adds disambiguation suffixes: within every group of equal raw tuples of
/// size ≥ 2, members get 0, 1, 2, … by ascending item id. Input order is
/// preserved in the output.
pub fn disambiguate(pairs: Vec<(String, Vec<usize>)>) -> Vec<(String, TokenTuple)> {
    let mut groups: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for (i, (_, codes)) in pairs.iter().enumerate() {
        groups.entry(codes.as_slice()).or_default().push(i);
    }
    let mut suffix: Vec<Option<u32>> = vec![None; pairs.len()];
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let mut ordered = members.clone();
        ordered.sort_by(|a, b| pairs[*a].0.cmp(&pairs[*b].0));
        for (rank, idx) in ordered.iter().enumerate() {
            suffix[*idx] = Some(rank as u32);
        }
    }
    pairs
        .into_iter()
        .zip(suffix)
        .map(|((id, codes), disambiguator)| (id, TokenTuple { codes, disambiguator }))
        .collect()
}

/// Assigns token tuples to every item in the dataset: fused embeddings →
/// hard codes → collision suffixes. Rerunning over the same artifacts and
/// dataset reproduces the table byte for byte.
pub fn assign_all(dataset: &Dataset, artifacts: &ModelArtifacts) -> Result<TokenTable> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot assign tokens over an empty dataset".into()));
    }
    let raw = raw_codes(dataset, artifacts)?;
    let pairs: Vec<(String, Vec<usize>)> = dataset
        .items
        .iter()
        .zip(&raw)
        .map(|(item, codes)| (item.item_id.clone(), codes.clone()))
        .collect();
    let entries = disambiguate(pairs);
    TokenTable::from_entries(
        artifacts.codebooks.levels(),
        artifacts.codebooks.size(),
        artifacts.codebooks.sharing(),
        artifacts.codebooks.checksum(),
        entries,
    )
}

// ── diversity metrics ────────────────────────────────────────────────────

/// Fraction of items whose raw tuple is shared with at least one other item:
/// `1 − distinct/N`.
pub fn collision_rate(raw: &[Vec<usize>]) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    let distinct: std::collections::HashSet<&[usize]> =
        raw.iter().map(|c| c.as_slice()).collect();
    1.0 - distinct.len() as f64 / raw.len() as f64
}

/// Collision rate of the tuple prefixes up to and including `level`.
pub fn prefix_collision_rate(raw: &[Vec<usize>], level: usize) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    let distinct: std::collections::HashSet<&[usize]> =
        raw.iter().map(|c| &c[..=level]).collect();
    1.0 - distinct.len() as f64 / raw.len() as f64
}

/// Shannon entropy (nats) of codeword usage at one level.
pub fn usage_entropy(raw: &[Vec<usize>], level: usize) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("usage entropy of an empty assignment".into()));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for tuple in raw {
        let code = *tuple.get(level).ok_or_else(|| {
            Error::InvalidInput(format!("tuple has {} levels, asked for {level}", tuple.len()))
        })?;
        *counts.entry(code).or_insert(0) += 1;
    }
    let n = raw.len() as f64;
    let mut h = 0.0;
    for c in counts.values() {
        let p = *c as f64 / n;
        h -= p * p.ln();
    }
    Ok(h)
}

/// `exp(usage entropy)` at one level — the effective number of codewords in
/// use; 1 when one code absorbs everything, K under perfectly uniform usage.
pub fn code_perplexity(raw: &[Vec<usize>], level: usize) -> Result<f64> {
    Ok(usage_entropy(raw, level)?.exp())
}

/// Geometric mean of per-level perplexities — the headline diversity number.
pub fn identifier_perplexity(raw: &[Vec<usize>]) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty assignment".into()));
    }
    let levels = raw[0].len();
    let mut mean_h = 0.0;
    for l in 0..levels {
        mean_h += usage_entropy(raw, l)?;
    }
    Ok((mean_h / levels as f64).exp())
}

/// Average over clusters of the majority-label fraction, weighted by cluster
/// size: 1.0 when every cluster is label-pure.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.is_empty() || assignments.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "purity needs equal nonempty slices, got {} and {}",
            assignments.len(),
            labels.len()
        )));
    }
    let mut clusters: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (a, l) in assignments.iter().zip(labels) {
        *clusters.entry(*a).or_default().entry(*l).or_insert(0) += 1;
    }
    let majority: usize = clusters.values().map(|c| *c.values().max().expect("nonempty")).sum();
    Ok(majority as f64 / assignments.len() as f64)
}

/// Per-level metrics table: `level,perplexity,usage_entropy,collision_rate_raw`
/// where the collision column covers tuple prefixes through that level, so
/// the last row is the overall raw collision rate.
pub fn metrics_csv(raw: &[Vec<usize>]) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("metrics of an empty assignment".into()));
    }
    let levels = raw[0].len();
    let mut out = String::from("level,perplexity,usage_entropy,collision_rate_raw\n");
    for l in 0..levels {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            l + 1,
            code_perplexity(raw, l)?,
            usage_entropy(raw, l)?,
            prefix_collision_rate(raw, l)
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuples(raw: &[&[usize]]) -> Vec<Vec<usize>> {
        raw.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn suffixes_follow_ascending_item_id_for_all_collided() {
        let pairs = vec![
            ("banana".to_string(), vec![1, 2]),
            ("apple".to_string(), vec![1, 2]),
            ("cherry".to_string(), vec![3, 4]),
            ("date".to_string(), vec![1, 2]),
        ];
        let entries = disambiguate(pairs);
        // Order preserved; apple < banana < date alphabetically.
        assert_eq!(entries[0].1, TokenTuple { codes: vec![1, 2], disambiguator: Some(1) });
        assert_eq!(entries[1].1, TokenTuple { codes: vec![1, 2], disambiguator: Some(0) });
        assert_eq!(entries[2].1, TokenTuple { codes: vec![3, 4], disambiguator: None });
        assert_eq!(entries[3].1, TokenTuple { codes: vec![1, 2], disambiguator: Some(2) });
    }

    #[test]
    fn collision_rate_counts_duplicates() {
        assert_eq!(collision_rate(&tuples(&[&[0], &[1], &[2], &[0]])), 0.25);
        assert_eq!(collision_rate(&tuples(&[&[5], &[5], &[5], &[5]])), 0.75);
        assert_eq!(collision_rate(&tuples(&[&[0], &[1]])), 0.0);
        assert_eq!(collision_rate(&[]), 0.0);
    }

    #[test]
    fn prefix_collisions_shrink_with_depth() {
        let raw = tuples(&[&[0, 0], &[0, 1], &[1, 0], &[1, 0]]);
        assert_eq!(prefix_collision_rate(&raw, 0), 0.5); // two distinct prefixes
        assert_eq!(prefix_collision_rate(&raw, 1), 0.25); // three distinct tuples
    }

    #[test]
    fn perplexity_of_uniform_usage_is_code_count() {
        let raw = tuples(&[&[0], &[1], &[2], &[3], &[0], &[1], &[2], &[3]]);
        assert!((code_perplexity(&raw, 0).unwrap() - 4.0).abs() < 1e-12);
        let single = tuples(&[&[7], &[7], &[7]]);
        assert!((code_perplexity(&single, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_matches_hand_computed_entropy() {
        // Counts 2,1,1 → p = (1/2, 1/4, 1/4) → H = 1.5·ln2 → perp = 2^1.5.
        let raw = tuples(&[&[0], &[0], &[1], &[2]]);
        let expected = (1.5 * std::f64::consts::LN_2).exp();
        assert!((code_perplexity(&raw, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn identifier_perplexity_is_geometric_mean() {
        // Level 0 uniform over 2 (perp 2), level 1 constant (perp 1) → √2.
        let raw = tuples(&[&[0, 5], &[1, 5], &[0, 5], &[1, 5]]);
        let expected = std::f64::consts::SQRT_2;
        assert!((identifier_perplexity(&raw).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.25);
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap(), 0.75);
        assert!(cluster_purity(&[], &[]).is_err());
        assert!(cluster_purity(&[0], &[0, 1]).is_err());
    }

    fn sample_table() -> TokenTable {
        let entries = disambiguate(vec![
            ("a".to_string(), vec![0, 1]),
            ("b".to_string(), vec![0, 1]),
            ("c".to_string(), vec![2, 0]),
        ]);
        TokenTable::from_entries(2, 4, CodebookSharing::Shared, "abc123".into(), entries).unwrap()
    }

    #[test]
    fn export_import_round_trip_is_byte_identical() {
        let table = sample_table();
        let mut bytes = Vec::new();
        table.export(&mut bytes).unwrap();
        let back = TokenTable::import(std::io::Cursor::new(&bytes)).unwrap();
        assert_eq!(back, table);
        let mut again = Vec::new();
        back.export(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn lookup_both_directions() {
        let table = sample_table();
        assert_eq!(table.get("a").unwrap().full(), vec![0, 1, 0]);
        assert_eq!(table.item_for(&[0, 1, 1]).unwrap(), "b");
        assert_eq!(table.item_for(&[2, 0]).unwrap(), "c");
        assert!(table.item_for(&[0, 1]).is_none()); // raw tuple alone is not an identifier
        assert!(table.get("zzz").is_none());
    }

    #[test]
    fn import_rejects_bad_tables() {
        // No header.
        let no_header = r#"{"item_id":"a","codes":[0,1]}"#;
        assert!(TokenTable::import(std::io::Cursor::new(no_header)).is_err());

        let header = r#"{"levels":2,"codebook_size":4,"sharing":"shared","codebook_checksum":"x"}"#;
        // Code out of range.
        let bad = format!("{header}\n{}", r#"{"item_id":"a","codes":[0,9]}"#);
        let err = TokenTable::import(std::io::Cursor::new(bad)).unwrap_err();
        assert!(err.to_string().contains("code 9"), "{err}");
        // Wrong arity.
        let bad = format!("{header}\n{}", r#"{"item_id":"a","codes":[0]}"#);
        assert!(TokenTable::import(std::io::Cursor::new(bad)).is_err());
        // Duplicate item.
        let bad = format!(
            "{header}\n{}\n{}",
            r#"{"item_id":"a","codes":[0,1]}"#,
            r#"{"item_id":"a","codes":[2,2]}"#
        );
        let err = TokenTable::import(std::io::Cursor::new(bad)).unwrap_err();
        assert!(err.to_string().contains("twice"), "{err}");
        // Duplicate identifier.
        let bad = format!(
            "{header}\n{}\n{}",
            r#"{"item_id":"a","codes":[0,1]}"#,
            r#"{"item_id":"b","codes":[0,1]}"#
        );
        let err = TokenTable::import(std::io::Cursor::new(bad)).unwrap_err();
        assert!(err.to_string().contains("mixes") || err.to_string().contains("identifier"), "{err}");
        // Suffixed and unsuffixed share a tuple → prefix conflict.
        let bad = format!(
            "{header}\n{}\n{}",
            r#"{"item_id":"a","codes":[0,1],"disambiguator":0}"#,
            r#"{"item_id":"b","codes":[0,1]}"#
        );
        let err = TokenTable::import(std::io::Cursor::new(bad)).unwrap_err();
        assert!(err.to_string().contains("mixes"), "{err}");
        // Malformed record line is located.
        let bad = format!("{header}\nnot json");
        let err = TokenTable::import(std::io::Cursor::new(bad)).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn checksum_verification() {
        let table = sample_table();
        let book = crate::tensor::Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ])
        .unwrap();
        let stack =
            CodebookStack::from_books(2, 4, 2, CodebookSharing::Shared, vec![book]).unwrap();
        let err = table.verify_checksum(&stack).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
    }

    #[test]
    fn metrics_csv_shape() {
        let raw = tuples(&[&[0, 0], &[0, 1], &[1, 0], &[1, 0]]);
        let csv = metrics_csv(&raw).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "level,perplexity,usage_entropy,collision_rate_raw");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("2,"));
    }
}
