//! The per-session cross-modal memory pool.
//!
//! Items are append-only and ordered by `(turn_id, insertion)`. The store
//! answers modality-scoped retrieval queries, renders prompt context, and
//! compresses itself down to a rendered-size budget by replacing older turns
//! with summary items that reference the ids they absorbed.

mod compress;
mod item;
mod persist;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compress::{CompressionReport, RuleSummarizer, Summarizer};
pub use item::{MARKER_TAGS, 
    is_textual, validate_record, Compression, Content, MemoryItem, Metadata, BUILTIN_MODALITIES,
    SUMMARY_TAG,
};
pub use persist::{decode_at_rest, encode_at_rest, load_jsonl, save_jsonl, RecordReport};

use crate::text;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("schema violation in item {id}: {violations:?}")]
    SchemaViolation { id: String, violations: Vec<String> },
    #[error("turn order violation: item turn {got} is older than latest turn {latest}")]
    TurnOrderViolation { got: u64, latest: u64 },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("the {turns} most recent turns alone render to {needed} chars, over the budget of {budget}")]
    BudgetInfeasible { turns: usize, needed: usize, budget: usize },
    #[error("memory file error: {0}")]
    Io(String),
}

/// Weights of the retrieval score `w_r*recency + w_p*priority + w_l*overlap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub recency: f64,
    pub priority: f64,
    pub lexical: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        Self { recency: 0.4, priority: 0.3, lexical: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Rendered-size budget in characters.
    pub budget: usize,
    /// Most recent turns kept verbatim by compression.
    pub verbatim_turns: usize,
    pub weights: RetrievalWeights,
    /// Upper bound on the text of one summary item, in characters.
    pub summary_max_chars: usize,
    /// Payloads larger than this are lz4-compressed when written to disk.
    pub at_rest_threshold: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            budget: 8000,
            verbatim_turns: 2,
            weights: RetrievalWeights::default(),
            summary_max_chars: 240,
            at_rest_threshold: 4096,
        }
    }
}

/// Deterministic uuid4-shaped id generator.
#[derive(Debug)]
pub struct IdSource(Mutex<ChaCha8Rng>);

impl IdSource {
    pub fn seeded(seed: u64) -> Self {
        Self(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn next_id(&self) -> String {
        let mut bytes = [0u8; 16];
        self.0.lock().fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<MemoryItem>,
    pub scores: Vec<f64>,
    pub rendered: String,
}

impl RetrievalResult {
    pub fn empty() -> Self {
        Self { items: Vec::new(), scores: Vec::new(), rendered: String::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How an id resolves after compression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolution<'a> {
    Present(&'a MemoryItem),
    Summarized(&'a MemoryItem),
    Missing,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `(item id, missing reference)` pairs.
    pub dangling: Vec<(String, String)>,
    pub duplicate_ids: Vec<String>,
}

impl ConsistencyReport {
    pub fn is_clean(&self) -> bool {
        self.dangling.is_empty() && self.duplicate_ids.is_empty()
    }
}

pub struct MemoryStore {
    session_id: String,
    items: Vec<MemoryItem>,
    config: MemoryConfig,
    /// Retrieval hits per item id, the "query frequency" signal.
    hits: Mutex<HashMap<String, u64>>,
    summarizer: Arc<dyn Summarizer>,
    ids: Arc<IdSource>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("session_id", &self.session_id)
            .field("items", &self.items.len())
            .field("config", &self.config)
            .finish()
    }
}

impl Clone for MemoryStore {
    fn clone(&self) -> Self {
        Self {
            session_id: self.session_id.clone(),
            items: self.items.clone(),
            config: self.config.clone(),
            hits: Mutex::new(self.hits.lock().clone()),
            summarizer: Arc::clone(&self.summarizer),
            ids: Arc::clone(&self.ids),
        }
    }
}

impl MemoryStore {
    pub fn new(session_id: impl Into<String>, config: MemoryConfig, seed: u64) -> Self {
        Self {
            session_id: session_id.into(),
            items: Vec::new(),
            config,
            hits: Mutex::new(HashMap::new()),
            summarizer: Arc::new(RuleSummarizer),
            ids: Arc::new(IdSource::seeded(seed)),
        }
    }

    /// Rebuilds a store from persisted items, re-checking every append rule.
    pub fn from_items(
        session_id: impl Into<String>,
        config: MemoryConfig,
        seed: u64,
        items: Vec<MemoryItem>,
    ) -> Result<Self, MemoryError> {
        let mut store = Self::new(session_id, config, seed);
        for item in items {
            store.append(item)?;
        }
        Ok(store)
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn Summarizer>) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.config.budget = budget;
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn next_id(&self) -> String {
        self.ids.next_id()
    }

    pub fn latest_turn(&self) -> u64 {
        self.items.last().map(|i| i.turn_id).unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&MemoryItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn hit_count(&self, id: &str) -> u64 {
        self.hits.lock().get(id).copied().unwrap_or(0)
    }

    /// Appends a validated item. Items never change in place; corrections are
    /// new items referencing the old ids.
    pub fn append(&mut self, item: MemoryItem) -> Result<(), MemoryError> {
        let violations = item.violations();
        if !violations.is_empty() {
            return Err(MemoryError::SchemaViolation { id: item.id.clone(), violations });
        }
        let latest = self.latest_turn();
        if item.turn_id < latest {
            return Err(MemoryError::TurnOrderViolation { got: item.turn_id, latest });
        }
        if self.get(&item.id).is_some() {
            return Err(MemoryError::DuplicateId(item.id));
        }
        self.items.push(item);
        Ok(())
    }

    /// Finds an id, following summary references for compressed items.
    pub fn resolve(&self, id: &str) -> Resolution<'_> {
        if let Some(item) = self.get(id) {
            return Resolution::Present(item);
        }
        self.items
            .iter()
            .find(|i| i.is_summary() && i.references.iter().any(|r| r == id))
            .map_or(Resolution::Missing, Resolution::Summarized)
    }

    pub fn consistency_report(&self) -> ConsistencyReport {
        let mut seen = BTreeSet::new();
        let mut duplicate_ids = Vec::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                duplicate_ids.push(item.id.clone());
            }
        }
        let mut dangling = Vec::new();
        for item in self.items.iter().filter(|i| !i.is_summary()) {
            for r in &item.references {
                if matches!(self.resolve(r), Resolution::Missing) {
                    dangling.push((item.id.clone(), r.clone()));
                }
            }
        }
        ConsistencyReport { dangling, duplicate_ids }
    }

    /// Total characters of the chronological rendering.
    pub fn rendered_size(&self) -> usize {
        rendered_size(self.items.iter())
    }

    /// Every item as one block per line, oldest first.
    pub fn render_timeline(&self) -> String {
        self.items.iter().map(MemoryItem::render_block).collect::<Vec<_>>().join("\n")
    }

    /// Ranks items of `modality` against `query`; ties go to the newer turn,
    /// then the lexicographically smaller id. Returned items count as hits
    /// for compression's query-frequency signal.
    pub fn retrieve(&self, modality: &str, query: &str, k: usize) -> RetrievalResult {
        self.retrieve_with(modality, query, k, self.config.weights)
    }

    pub fn retrieve_with(
        &self,
        modality: &str,
        query: &str,
        k: usize,
        weights: RetrievalWeights,
    ) -> RetrievalResult {
        assert!(k >= 1, "retrieve needs k >= 1");
        let max_turn = self.latest_turn().max(1) as f64;
        let query_terms = text::terms(query);
        let mut scored: Vec<(f64, &MemoryItem)> = self
            .items
            .iter()
            .filter(|i| i.modality == modality)
            .map(|i| {
                let recency = i.turn_id as f64 / max_turn;
                let overlap = text::coverage(&query_terms, &i.terms());
                let score = weights.recency * recency
                    + weights.priority * i.priority
                    + weights.lexical * overlap;
                (score, i)
            })
            .collect();
        scored.sort_by(|(sa, a), (sb, b)| {
            sb.total_cmp(sa).then(b.turn_id.cmp(&a.turn_id)).then_with(|| a.id.cmp(&b.id))
        });
        scored.truncate(k);

        {
            let mut hits = self.hits.lock();
            for (_, item) in &scored {
                *hits.entry(item.id.clone()).or_insert(0) += 1;
            }
        }

        let mut result = RetrievalResult {
            scores: scored.iter().map(|(s, _)| *s).collect(),
            items: scored.into_iter().map(|(_, i)| i.clone()).collect(),
            rendered: String::new(),
        };
        result.rendered = render(&result, self.config.budget);
        result
    }

    /// Replaces the item list wholesale; used by compression.
    fn replace_items(&mut self, items: Vec<MemoryItem>) {
        self.items = items;
    }

    pub(crate) fn summarizer(&self) -> &dyn Summarizer {
        self.summarizer.as_ref()
    }
}

pub(crate) fn rendered_size<'a>(items: impl Iterator<Item = &'a MemoryItem>) -> usize {
    let mut total = 0;
    let mut count: usize = 0;
    for item in items {
        total += item.render_block().chars().count();
        count += 1;
    }
    total + count.saturating_sub(1)
}

/// One labeled block per item in score order, dropping the lowest-scored
/// blocks until the text fits `budget` characters.
pub fn render(result: &RetrievalResult, budget: usize) -> String {
    assert!(budget > 0, "render budget must be positive");
    let blocks: Vec<String> = result.items.iter().map(MemoryItem::render_block).collect();
    let mut keep = blocks.len();
    let size = |n: usize| {
        blocks[..n].iter().map(|b| b.chars().count()).sum::<usize>() + n.saturating_sub(1)
    };
    while keep > 0 && size(keep) > budget {
        keep -= 1;
    }
    blocks[..keep].join("\n")
}
