use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{rendered_size, MemoryError, MemoryItem, MemoryStore, SUMMARY_TAG};
use crate::text;

/// Produces the text of a summary item from the items it replaces.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, items: &[MemoryItem], max_chars: usize) -> String;
}

/// First sentence of each textual item plus extracted entities.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleSummarizer;

impl Summarizer for RuleSummarizer {
    fn summarize(&self, items: &[MemoryItem], max_chars: usize) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut entities: Vec<String> = Vec::new();
        for item in items {
            if item.is_summary() {
                parts.push(item.content.data.trim().to_string());
                continue;
            }
            if item.is_textual() {
                let first = text::first_sentence(&item.content.data);
                if !first.is_empty() {
                    parts.push(format!("{}: {}", item.modality, first));
                }
                for e in text::entities(&item.content.data) {
                    if !entities.contains(&e) {
                        entities.push(e);
                    }
                }
            } else {
                parts.push(format!("{} {} attachment", item.modality, item.content.media_type));
            }
        }
        let mut out = parts.join(" | ");
        if !entities.is_empty() {
            out.push_str(&format!(" (entities: {})", entities.join(", ")));
        }
        truncate_chars(&out, max_chars)
    }
}

fn truncate_chars(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        return s.to_string();
    }
    if max_chars == 0 {
        return String::new();
    }
    let mut out: String = s.chars().take(max_chars - 1).collect();
    out.push('…');
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub before_size: usize,
    pub after_size: usize,
    /// Summary id -> ids it absorbed during this pass.
    pub summaries: BTreeMap<String, Vec<String>>,
}

impl CompressionReport {
    pub fn is_identity(&self) -> bool {
        self.summaries.is_empty()
    }
}

const W_RELEVANCE: f64 = 0.25;
const W_DIVERSITY: f64 = 0.25;
const W_RECENCY: f64 = 0.25;
const W_FREQUENCY: f64 = 0.25;

impl MemoryStore {
    /// Shrinks the store to its rendered-size budget.
    ///
    /// The most recent `verbatim_turns` turns are never touched. Older items
    /// are scored by relevance to the kept turns, modality diversity, recency
    /// and retrieval frequency; the lowest-scored turn is folded into one
    /// summary item at a time, then summaries are merged pairwise. Every
    /// removed id ends up in exactly one summary's `references`.
    pub fn compress(&mut self) -> Result<CompressionReport, MemoryError> {
        let budget = self.config.budget;
        let before_size = self.rendered_size();
        let mut report = CompressionReport { before_size, after_size: before_size, ..Default::default() };
        if before_size <= budget {
            return Ok(report);
        }

        let turns: BTreeSet<u64> = self.items.iter().map(|i| i.turn_id).collect();
        let k = self.config.verbatim_turns;
        let cutoff = turns.iter().rev().nth(k.saturating_sub(1)).copied().unwrap_or(0);
        let is_kept = |i: &MemoryItem| k > 0 && i.turn_id >= cutoff;
        let kept_size = rendered_size(self.items.iter().filter(|i| is_kept(i)));
        if kept_size > budget {
            return Err(MemoryError::BudgetInfeasible { turns: k, needed: kept_size, budget });
        }

        let kept_terms: Vec<BTreeSet<String>> =
            self.items.iter().filter(|i| is_kept(i)).map(MemoryItem::terms).collect();
        let max_turn = self.latest_turn().max(1) as f64;
        let hits = self.hits.lock().clone();
        let max_hits = hits.values().copied().max().unwrap_or(0);

        let mut items = self.items.clone();
        let score = |item: &MemoryItem, all: &[MemoryItem]| -> f64 {
            let terms = item.terms();
            let relevance =
                kept_terms.iter().map(|k| text::jaccard(&terms, k)).fold(0.0, f64::max);
            let last_of_modality =
                !all.iter().any(|o| o.id != item.id && o.modality == item.modality);
            let diversity = if last_of_modality { 1.0 } else { 0.0 };
            let recency = item.turn_id as f64 / max_turn;
            let frequency = if max_hits == 0 {
                0.0
            } else {
                hits.get(&item.id).copied().unwrap_or(0) as f64 / max_hits as f64
            };
            W_RELEVANCE * relevance
                + W_DIVERSITY * diversity
                + W_RECENCY * recency
                + W_FREQUENCY * frequency
        };
        let pick_lowest = |candidates: Vec<&MemoryItem>, all: &[MemoryItem]| -> Option<String> {
            candidates
                .into_iter()
                .map(|i| (score(i, all), i))
                .min_by(|(sa, a), (sb, b)| {
                    sa.total_cmp(sb).then(a.turn_id.cmp(&b.turn_id)).then_with(|| a.id.cmp(&b.id))
                })
                .map(|(_, i)| i.id.clone())
        };

        while rendered_size(items.iter()) > budget {
            let older_raw: Vec<&MemoryItem> =
                items.iter().filter(|i| !is_kept(i) && !i.is_summary()).collect();
            if let Some(victim) = pick_lowest(older_raw, &items) {
                let turn = items.iter().find(|i| i.id == victim).map(|i| i.turn_id).unwrap();
                let group: Vec<MemoryItem> = items
                    .iter()
                    .filter(|i| i.turn_id == turn && !is_kept(i) && !i.is_summary())
                    .cloned()
                    .collect();
                let summary = self.make_summary(&group);
                report
                    .summaries
                    .insert(summary.id.clone(), group.iter().map(|i| i.id.clone()).collect());
                replace_group(&mut items, &group, summary);
                continue;
            }

            let summaries: Vec<&MemoryItem> =
                items.iter().filter(|i| !is_kept(i) && i.is_summary()).collect();
            if summaries.len() >= 2 {
                let first = pick_lowest(summaries.clone(), &items).unwrap();
                let rest: Vec<&MemoryItem> =
                    summaries.into_iter().filter(|i| i.id != first).collect();
                let second = pick_lowest(rest, &items).unwrap();
                let mut group: Vec<MemoryItem> = items
                    .iter()
                    .filter(|i| i.id == first || i.id == second)
                    .cloned()
                    .collect();
                group.sort_by_key(|i| i.turn_id);
                let summary = self.make_summary(&group);
                report.summaries.remove(&first);
                report.summaries.remove(&second);
                report.summaries.insert(summary.id.clone(), summary.references.clone());
                replace_group(&mut items, &group, summary);
                continue;
            }

            // One summary left: trim its text to whatever budget remains.
            let Some(pos) = items.iter().position(|i| !is_kept(i) && i.is_summary()) else {
                break;
            };
            let others = rendered_size(items.iter().filter(|i| i.id != items[pos].id));
            let mut probe = items[pos].clone();
            probe.content.data.clear();
            let header = probe.render_block().chars().count() + 1;
            let room = budget.saturating_sub(others + header);
            let text = truncate_chars(&items[pos].content.data, room);
            if text == items[pos].content.data {
                break;
            }
            items[pos].content.data = text;
        }

        let after_size = rendered_size(items.iter());
        if after_size > budget {
            return Err(MemoryError::BudgetInfeasible { turns: k, needed: after_size, budget });
        }
        self.replace_items(items);
        report.after_size = after_size;
        Ok(report)
    }

    fn make_summary(&self, group: &[MemoryItem]) -> MemoryItem {
        let turn = group.iter().map(|i| i.turn_id).max().unwrap_or(1);
        let mut tags = vec![SUMMARY_TAG.to_string()];
        let mut references = Vec::new();
        for item in group {
            for t in &item.content.metadata.context {
                if !tags.contains(t) {
                    tags.push(t.clone());
                }
            }
            if item.is_summary() {
                references.extend(item.references.iter().cloned());
            }
            references.push(item.id.clone());
        }
        let data = self.summarizer().summarize(group, self.config.summary_max_chars);
        let mut summary = MemoryItem::text(self.next_id(), "text", turn, data, tags)
            .with_source("compressor")
            .with_references(references)
            .with_priority(group.iter().map(|i| i.priority).fold(0.0, f64::max));
        if let Some(ts) = group.iter().map(|i| i.content.metadata.timestamp.clone()).max() {
            summary.content.metadata.timestamp = ts;
        }
        summary
    }
}

/// Swaps `group` for `summary`, keeping `(turn_id, insertion)` order.
fn replace_group(items: &mut Vec<MemoryItem>, group: &[MemoryItem], summary: MemoryItem) {
    let ids: BTreeSet<&str> = group.iter().map(|i| i.id.as_str()).collect();
    let insert_at = items.iter().rposition(|i| ids.contains(i.id.as_str())).unwrap_or(items.len());
    let mut out = Vec::with_capacity(items.len());
    for (idx, item) in items.drain(..).enumerate() {
        if !ids.contains(item.id.as_str()) {
            out.push(item);
        }
        if idx == insert_at {
            out.push(summary.clone());
        }
    }
    out.sort_by_key(|i| i.turn_id);
    *items = out;
}
