//! Desk-scale generative retrieval over token identifiers: a count-based
//! autoregressive model stands in for a sequence transformer, a prefix trie
//! restricts generation to identifiers that actually exist, and beam search
//! ranks items for next-item prediction.
//!
//! This is a deliberate fidelity boundary: the harness preserves the
//! generation-side contract — factorized per-position probabilities,
//! trie-valid continuations, beam mechanics, Recall@K — without any learned
//! sequence encoder.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::SequenceSplits;
use crate::error::{Error, Result};
use crate::tokens::TokenTable;

// ── identifier trie ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    item: Option<usize>,
}

/// Prefix tree over full identifiers; each leaf carries exactly one item.
#[derive(Debug, Clone)]
pub struct TokenTrie {
    nodes: Vec<TrieNode>,
    items: Vec<String>,
}

impl TokenTrie {
    pub fn build(table: &TokenTable) -> Result<TokenTrie> {
        let mut trie = TokenTrie { nodes: vec![TrieNode::default()], items: Vec::new() };
        for (item_id, tuple) in table.iter() {
            let mut node = 0usize;
            for tok in tuple.full() {
                if trie.nodes[node].item.is_some() {
                    return Err(Error::InvalidInput(format!(
                        "identifier of `{item_id}` passes through another item's leaf"
                    )));
                }
                node = match trie.nodes[node].children.get(&tok) {
                    Some(&next) => next,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let next = trie.nodes.len() - 1;
                        let len = trie.nodes.len();
                        trie.nodes[node].children.insert(tok, next);
                        debug_assert_eq!(next + 1, len);
                        next
                    }
                };
            }
            if trie.nodes[node].item.is_some() || !trie.nodes[node].children.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "identifier of `{item_id}` is not a unique leaf"
                )));
            }
            trie.nodes[node].item = Some(trie.items.len());
            trie.items.push(item_id.to_string());
        }
        if trie.items.len() != table.len() {
            return Err(Error::InvalidInput(format!(
                "trie holds {} leaves for {} items",
                trie.items.len(),
                table.len()
            )));
        }
        Ok(trie)
    }

    pub fn leaf_count(&self) -> usize {
        self.items.len()
    }

    /// Item at an exact full-identifier path.
    pub fn lookup(&self, tokens: &[u32]) -> Option<&str> {
        let mut node = 0usize;
        for tok in tokens {
            node = *self.nodes[node].children.get(tok)?;
        }
        self.nodes[node].item.map(|i| self.items[i].as_str())
    }
}

// ── autoregressive token model ───────────────────────────────────────────

/// Position-tagged token: identifier position in the high bits, token value
/// in the low. Positions restart at 0 for each identifier, so a flattened
/// stream decomposes unambiguously.
fn tag(position: usize, token: u32) -> u64 {
    ((position as u64) << 32) | token as u64
}

#[derive(Debug, Clone, Default)]
struct Counts {
    counts: HashMap<u32, usize>,
    total: usize,
}

impl Counts {
    fn add(&mut self, token: u32) {
        *self.counts.entry(token).or_insert(0) += 1;
        self.total += 1;
    }
}

/// Order-n count model over identifier tokens. The context for the token at
/// position p of the next identifier is the flattened tokens of the last n
/// history items plus the partial prefix already emitted; unseen contexts
/// back off to the empirical unigram at that position. Additive smoothing
/// keeps every in-vocabulary token strictly positive.
#[derive(Debug, Clone)]
pub struct MarkovTokenModel {
    order: usize,
    epsilon: f64,
    /// Vocabulary size per identifier position: K for the code positions,
    /// observed suffix range for the optional disambiguator slot.
    position_vocab: Vec<usize>,
    /// Per target position: context → next-token counts.
    conditionals: Vec<HashMap<Vec<u64>, Counts>>,
    priors: Vec<Counts>,
    identifiers: HashMap<String, Vec<u32>>,
}

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_SMOOTHING: f64 = 0.01;

impl MarkovTokenModel {
    /// Counts transitions over per-user item sequences (training split
    /// only). Every referenced item must exist in the table.
    pub fn fit(
        table: &TokenTable,
        sequences: &[Vec<String>],
        order: usize,
        epsilon: f64,
    ) -> Result<MarkovTokenModel> {
        if order == 0 {
            return Err(Error::InvalidConfig("model order must be ≥ 1".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("smoothing must be positive, got {epsilon}")));
        }
        if sequences.iter().all(|s| s.is_empty()) {
            return Err(Error::InvalidInput("no training sequences to fit on".into()));
        }

        let mut max_len = 0usize;
        let mut max_suffix = 0u32;
        let mut has_suffix = false;
        let mut identifiers = HashMap::with_capacity(table.len());
        for (id, tuple) in table.iter() {
            let full = tuple.full();
            max_len = max_len.max(full.len());
            if let Some(d) = tuple.disambiguator {
                has_suffix = true;
                max_suffix = max_suffix.max(d);
            }
            identifiers.insert(id.to_string(), full);
        }
        let mut position_vocab = vec![table.codebook_size(); table.levels()];
        if has_suffix {
            debug_assert_eq!(max_len, table.levels() + 1);
            position_vocab.push(max_suffix as usize + 1);
        }

        let mut model = MarkovTokenModel {
            order,
            epsilon,
            conditionals: vec![HashMap::new(); position_vocab.len()],
            priors: vec![Counts::default(); position_vocab.len()],
            position_vocab,
            identifiers,
        };

        for seq in sequences {
            let idents: Vec<&Vec<u32>> = seq
                .iter()
                .map(|id| {
                    model.identifiers.get(id).ok_or_else(|| {
                        Error::InvalidInput(format!("sequence references `{id}`, not in the token table"))
                    })
                })
                .collect::<Result<_>>()?;
            for (t, ident) in idents.iter().enumerate() {
                for (p, &tok) in ident.iter().enumerate() {
                    model.priors[p].add(tok);
                }
                if t == 0 {
                    continue; // sequence starts fall back to the priors
                }
                let hist_flat = flatten(&idents[t.saturating_sub(order)..t]);
                let mut key = hist_flat;
                for (p, &tok) in ident.iter().enumerate() {
                    model.conditionals[p].entry(key.clone()).or_default().add(tok);
                    key.push(tag(p, tok));
                }
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Smoothed p(token | context) at one identifier position.
    fn log_prob(&self, position: usize, key: &[u64], token: u32) -> f64 {
        let vocab = self.position_vocab[position] as f64;
        let row = match self.conditionals[position].get(key) {
            Some(row) => row,
            None => &self.priors[position],
        };
        let hits = row.counts.get(&token).copied().unwrap_or(0) as f64;
        ((hits + self.epsilon) / (row.total as f64 + self.epsilon * vocab)).ln()
    }

    /// Tagged token stream of the last `order` history items.
    fn flat_history(&self, history: &[String]) -> Result<Vec<u64>> {
        let tail = &history[history.len().saturating_sub(self.order)..];
        let idents: Vec<&Vec<u32>> = tail
            .iter()
            .map(|id| {
                self.identifiers.get(id).ok_or_else(|| {
                    Error::InvalidInput(format!("history references `{id}`, not in the token table"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(flatten(&idents))
    }

    /// Total log-probability of generating `item`'s full identifier after
    /// `history` — the brute-force scorer beam search must agree with.
    pub fn sequence_log_prob(&self, history: &[String], item: &str) -> Result<f64> {
        let ident = self
            .identifiers
            .get(item)
            .ok_or_else(|| Error::InvalidInput(format!("item `{item}` is not in the token table")))?;
        let mut key = self.flat_history(history)?;
        let mut score = 0.0;
        for (p, &tok) in ident.iter().enumerate() {
            score += self.log_prob(p, &key, tok);
            key.push(tag(p, tok));
        }
        Ok(score)
    }
}

fn flatten(idents: &[&Vec<u32>]) -> Vec<u64> {
    let mut out = Vec::with_capacity(idents.iter().map(|i| i.len()).sum());
    for ident in idents {
        for (p, &tok) in ident.iter().enumerate() {
            out.push(tag(p, tok));
        }
    }
    out
}

// ── beam search ──────────────────────────────────────────────────────────

/// Expands token-by-token through the trie, keeping the `beam_width` best
/// partial scores per depth, and returns the top `k` items by summed
/// log-probability (ties: smaller item id). With `beam_width ≥` the leaf
/// count nothing is ever pruned, so the result equals brute-force ranking
/// exactly.
pub fn beam_search(
    model: &MarkovTokenModel,
    trie: &TokenTrie,
    history: &[String],
    beam_width: usize,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    if beam_width < k {
        return Err(Error::InvalidInput(format!(
            "beam width {beam_width} is smaller than k = {k}"
        )));
    }
    let hist_flat = model.flat_history(history)?;

    struct State {
        score: f64,
        node: usize,
        key: Vec<u64>,
        depth: usize,
    }
    let mut active = vec![State { score: 0.0, node: 0, key: hist_flat, depth: 0 }];
    let mut completed: Vec<(f64, usize)> = Vec::new();

    while !active.is_empty() {
        let mut next = Vec::new();
        for state in &active {
            for (&tok, &child) in &trie.nodes[state.node].children {
                let score = state.score + model.log_prob(state.depth, &state.key, tok);
                if let Some(item) = trie.nodes[child].item {
                    completed.push((score, item));
                } else {
                    let mut key = state.key.clone();
                    key.push(tag(state.depth, tok));
                    next.push(State { score, node: child, key, depth: state.depth + 1 });
                }
            }
        }
        next.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).expect("finite scores").then(a.node.cmp(&b.node))
        });
        next.truncate(beam_width);
        active = next;
    }

    completed.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite scores").then(trie.items[a.1].cmp(&trie.items[b.1]))
    });
    completed.truncate(k);
    Ok(completed.into_iter().map(|(score, item)| (trie.items[item].clone(), score)).collect())
}

/// Scores every identifier in the trie exhaustively — the reference beam
/// search is checked against. Accumulation order per path matches the beam,
/// so agreement is exact, not approximate.
pub fn brute_force_rank(
    model: &MarkovTokenModel,
    trie: &TokenTrie,
    history: &[String],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    let hist_flat = model.flat_history(history)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(trie.leaf_count());
    let mut stack = vec![(0usize, hist_flat, 0usize, 0.0f64)];
    while let Some((node, key, depth, acc)) = stack.pop() {
        for (&tok, &child) in &trie.nodes[node].children {
            let score = acc + model.log_prob(depth, &key, tok);
            if let Some(item) = trie.nodes[child].item {
                scored.push((score, item));
            } else {
                let mut key = key.clone();
                key.push(tag(depth, tok));
                stack.push((child, key, depth + 1, score));
            }
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite scores").then(trie.items[a.1].cmp(&trie.items[b.1]))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(score, item)| (trie.items[item].clone(), score)).collect())
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Fraction of events whose truth appears in its ranked top-k list.
pub fn recall_at_k(ranked: &[Vec<String>], truths: &[String], k: usize) -> Result<f64> {
    if ranked.is_empty() || ranked.len() != truths.len() {
        return Err(Error::InvalidInput(format!(
            "recall needs matching nonempty lists, got {} and {}",
            ranked.len(),
            truths.len()
        )));
    }
    let hits = ranked
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == *t))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPart {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub beam_width: usize,
    pub recall: f64,
    pub n_events: usize,
    pub model_order: usize,
}

/// One next-item prediction per held-out interaction: history is everything
/// chronologically before the event (the model only reads its last `order`
/// items). Events are independent, so `threads > 1` splits them into
/// contiguous chunks; per-chunk hit counts merge in chunk order and the
/// result is identical at any thread count.
pub fn evaluate(
    model: &MarkovTokenModel,
    trie: &TokenTrie,
    splits: &SequenceSplits,
    part: EvalPart,
    k: usize,
    beam_width: usize,
    threads: usize,
) -> Result<EvalReport> {
    let mut events: Vec<(Vec<String>, &String)> = Vec::new();
    for user in &splits.users {
        let (base, targets): (Vec<&String>, &[String]) = match part {
            EvalPart::Val => (user.train.iter().collect(), &user.val),
            EvalPart::Test => (user.train.iter().chain(&user.val).collect(), &user.test),
        };
        for (j, truth) in targets.iter().enumerate() {
            let chronology: Vec<&String> =
                base.iter().copied().chain(targets[..j].iter()).collect();
            let tail = &chronology[chronology.len().saturating_sub(model.order())..];
            events.push((tail.iter().map(|s| (*s).clone()).collect(), truth));
        }
    }
    if events.is_empty() {
        return Err(Error::InvalidInput("no evaluation events in this split".into()));
    }

    let hit = |(history, truth): &(Vec<String>, &String)| -> Result<bool> {
        let ranked = beam_search(model, trie, history, beam_width, k)?;
        Ok(ranked.iter().any(|(id, _)| id == *truth))
    };

    let hits: usize = if threads <= 1 {
        let mut n = 0usize;
        for event in &events {
            if hit(event)? {
                n += 1;
            }
        }
        n
    } else {
        let chunk_size = events.len().div_ceil(threads);
        let counts: Vec<Result<usize>> = std::thread::scope(|scope| {
            let handles: Vec<_> = events
                .chunks(chunk_size)
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut n = 0usize;
                        for event in chunk {
                            if hit(event)? {
                                n += 1;
                            }
                        }
                        Ok(n)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut total = 0usize;
        for c in counts {
            total += c?;
        }
        total
    };

    Ok(EvalReport {
        k,
        beam_width,
        recall: hits as f64 / events.len() as f64,
        n_events: events.len(),
        model_order: model.order(),
    })
}
