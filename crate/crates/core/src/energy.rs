//! Graph-modulated visual memory encoding.
//!
//! Every live memory item gets an intrinsic energy
//!
//! ```text
//! E_int(m) = p̂ · (1 + out_degree(owner)) · exp(-λ · (T - t_owner))
//! ```
//!
//! which is then reinforced by the mean energy of the owner's children:
//!
//! ```text
//! Ω(m) = E_int(m) + γ · Σ_{child c} mean_{m' ∈ c} Ω(m')
//! ```
//!
//! The top-K items by Ω share the total token budget proportionally (floored),
//! everything else is evicted.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, MemoryGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    VideoFrame,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::VideoFrame => "video_frame",
        }
    }
}

/// Everything the policy decides about a memory item before it enters the bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualItemSeed {
    pub modality: Modality,
    pub payload_ref: String,
    pub source_timestamp_s: Option<f64>,
    /// Binary keep/drop judgement (`u`).
    pub saliency: bool,
    /// Fine-grained relevance score in `1..=5` (`p`).
    pub priority: u8,
}

/// An entry of the graph's memory bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualItem {
    pub ordinal: usize,
    pub owner_node: usize,
    pub slot: usize,
    pub modality: Modality,
    pub payload_ref: String,
    pub source_timestamp_s: Option<f64>,
    pub saliency: bool,
    pub priority: u8,
    pub allocated_budget: u64,
    /// Step at which the item was evicted; `None` while live.
    pub dropped_at_step: Option<u64>,
}

impl VisualItem {
    pub(crate) fn from_seed(ordinal: usize, owner_node: usize, slot: usize, seed: VisualItemSeed) -> Self {
        VisualItem {
            ordinal,
            owner_node,
            slot,
            modality: seed.modality,
            payload_ref: seed.payload_ref,
            source_timestamp_s: seed.source_timestamp_s,
            saliency: seed.saliency,
            priority: seed.priority,
            allocated_budget: 0,
            dropped_at_step: None,
        }
    }

    pub fn dropped(&self) -> bool {
        self.dropped_at_step.is_some()
    }
}

/// `S_total = 5 × 256 × 32 × 32`.
pub const DEFAULT_TOTAL_BUDGET: u64 = 5 * 256 * 32 * 32;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_PATCH_SIDE: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Per-step decay rate λ.
    pub lambda_decay: f64,
    /// Child feedback strength γ.
    pub gamma_feedback: f64,
    /// Total token budget shared by retained items.
    pub s_total: u64,
    /// Number of items retained per shaping pass.
    pub top_k: usize,
    /// Split `s_total` evenly instead of by energy (training-time mode).
    pub uniform_mode: bool,
    /// Side of one vision patch in pixels.
    pub patch_side: u32,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            lambda_decay: DEFAULT_LAMBDA,
            gamma_feedback: DEFAULT_GAMMA,
            s_total: DEFAULT_TOTAL_BUDGET,
            top_k: DEFAULT_TOP_K,
            uniform_mode: false,
            patch_side: DEFAULT_PATCH_SIDE,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |m: &str| Err(EnergyError::InvalidParams(m.to_string()));
        if !self.lambda_decay.is_finite() || self.lambda_decay < 0.0 {
            return bad("lambda_decay must be finite and >= 0");
        }
        if !self.gamma_feedback.is_finite() || self.gamma_feedback < 0.0 {
            return bad("gamma_feedback must be finite and >= 0");
        }
        if self.s_total == 0 {
            return bad("s_total must be > 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.patch_side == 0 {
            return bad("patch_side must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnergyError {
    #[error("priority {0} outside 1..=5")]
    PriorityOutOfRange(u8),
    #[error("graph step {now} precedes item creation step {created}")]
    ClockSkew { now: u64, created: u64 },
    #[error("memory item {0} has been dropped")]
    ItemDropped(usize),
    #[error("invalid energy parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `p̂ = (p - 1) / 4`.
pub fn normalize_priority(p: u8) -> Result<f64, EnergyError> {
    if !(1..=5).contains(&p) {
        return Err(EnergyError::PriorityOutOfRange(p));
    }
    Ok(f64::from(p - 1) / 4.0)
}

fn intrinsic(p_hat: f64, out_degree: usize, age: u64, lambda: f64) -> f64 {
    p_hat * (1.0 + out_degree as f64) * (-lambda * age as f64).exp()
}

/// Intrinsic energy of one item, evaluated at the graph's current step.
pub fn intrinsic_energy(
    item: &VisualItem,
    graph: &MemoryGraph,
    params: &EnergyParams,
) -> Result<f64, EnergyError> {
    if item.dropped() {
        return Err(EnergyError::ItemDropped(item.ordinal));
    }
    let owner = graph.node(item.owner_node)?;
    let now = graph.step();
    if now < owner.created_step {
        return Err(EnergyError::ClockSkew { now, created: owner.created_step });
    }
    let p_hat = normalize_priority(item.priority)?;
    let degree = graph.out_degree(item.owner_node)?;
    Ok(intrinsic(p_hat, degree, now - owner.created_step, params.lambda_decay))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEnergy {
    pub ordinal: usize,
    pub owner_node: usize,
    pub slot: usize,
    pub intrinsic: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub evaluation_step: u64,
    /// Live items in bank order.
    pub items: Vec<ItemEnergy>,
    /// Mean Ω over each node's live items; 0 for item-less nodes.
    pub node_mean: Vec<f64>,
}

impl EnergyReport {
    pub fn get(&self, ordinal: usize) -> Option<&ItemEnergy> {
        self.items
            .binary_search_by_key(&ordinal, |e| e.ordinal)
            .ok()
            .map(|i| &self.items[i])
    }
}

/// Ω for every live item. Nodes are visited in reverse index order, so every
/// child's mean is final before any parent reads it.
pub fn recursive_energy(graph: &MemoryGraph, params: &EnergyParams) -> EnergyReport {
    let nodes = graph.nodes();
    let bank = graph.memory_bank();
    let children = graph.children();
    let now = graph.step();
    let mut node_mean = vec![0.0; nodes.len()];
    let mut items = Vec::new();

    for node in nodes.iter().rev() {
        let feedback: f64 = children[node.index].iter().map(|&c| node_mean[c]).sum();
        let degree = children[node.index].len();
        // validated graphs guarantee created_step <= step
        let age = now.saturating_sub(node.created_step);
        let mut sum = 0.0;
        let mut count = 0usize;
        for &ordinal in &node.items {
            let item = &bank[ordinal];
            if item.dropped() {
                continue;
            }
            let p_hat = f64::from(item.priority.clamp(1, 5) - 1) / 4.0;
            let e_int = intrinsic(p_hat, degree, age, params.lambda_decay);
            let total = e_int + params.gamma_feedback * feedback;
            sum += total;
            count += 1;
            items.push(ItemEnergy {
                ordinal,
                owner_node: node.index,
                slot: item.slot,
                intrinsic: e_int,
                total,
            });
        }
        if count > 0 {
            node_mean[node.index] = sum / count as f64;
        }
    }
    items.sort_by_key(|e| e.ordinal);
    EnergyReport { evaluation_step: now, items, node_mean }
}

fn rank_order(a: &ItemEnergy, b: &ItemEnergy) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(a.owner_node.cmp(&b.owner_node))
        .then(a.slot.cmp(&b.slot))
}

/// Ordinals of the `top_k` highest-energy items; ties go to the earlier node,
/// then the earlier slot.
pub fn select_top_k(report: &EnergyReport, params: &EnergyParams) -> Vec<usize> {
    let mut ranked: Vec<&ItemEnergy> = report.items.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    ranked.into_iter().take(params.top_k).map(|e| e.ordinal).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BudgetAssignment {
    pub evaluation_step: u64,
    /// Graph revision the assignment was computed against.
    pub graph_revision: u64,
    /// Retained ordinals, best first.
    pub retained: Vec<usize>,
    pub budgets: BTreeMap<usize, u64>,
    pub slack: u64,
}

impl BudgetAssignment {
    pub fn total(&self) -> u64 {
        self.budgets.values().sum()
    }
}

/// Split `s_total` over the retained items, `⌊S · Ω / ΣΩ⌋` each. Uniform mode
/// and the degenerate ΣΩ = 0 case both fall back to `⌊S / n⌋`.
pub fn allocate_budget(
    retained: &[usize],
    report: &EnergyReport,
    params: &EnergyParams,
) -> BudgetAssignment {
    let s_total = params.s_total;
    let mut budgets = BTreeMap::new();
    if retained.is_empty() {
        return BudgetAssignment {
            evaluation_step: report.evaluation_step,
            graph_revision: 0,
            retained: Vec::new(),
            budgets,
            slack: s_total,
        };
    }
    let energies: Vec<f64> = retained
        .iter()
        .map(|&o| report.get(o).map_or(0.0, |e| e.total.max(0.0)))
        .collect();
    let sum: f64 = energies.iter().sum();

    if params.uniform_mode || sum <= 0.0 || !sum.is_finite() {
        let each = s_total / retained.len() as u64;
        for &o in retained {
            budgets.insert(o, each);
        }
    } else {
        for (&o, &omega) in retained.iter().zip(&energies) {
            let share = (s_total as f64 * omega / sum).floor();
            budgets.insert(o, (share.max(0.0) as u64).min(s_total));
        }
        // Float rounding can in principle nudge the floored sum past S_total;
        // take the excess from the lowest-ranked items.
        let mut excess = budgets.values().sum::<u64>().saturating_sub(s_total);
        for &o in retained.iter().rev() {
            if excess == 0 {
                break;
            }
            let b = budgets.get_mut(&o).expect("retained item has a budget");
            let cut = excess.min(*b);
            *b -= cut;
            excess -= cut;
        }
    }
    let total: u64 = budgets.values().sum();
    BudgetAssignment {
        evaluation_step: report.evaluation_step,
        graph_revision: 0,
        retained: retained.to_vec(),
        budgets,
        slack: s_total - total,
    }
}

/// One shaping pass: gate on saliency, score, keep the top K, allocate, and
/// write budgets and evictions back into the memory bank.
///
/// Evictions are permanent across steps. Re-running at the same step first
/// reopens the evictions made at this step, so repeated passes agree.
pub fn shape_memory(graph: &mut MemoryGraph, params: &EnergyParams) -> BudgetAssignment {
    let step = graph.step();
    for item in graph.memory_bank_mut() {
        if item.dropped_at_step == Some(step) {
            item.dropped_at_step = None;
        }
        if !item.saliency && !item.dropped() {
            item.dropped_at_step = Some(step);
        }
        if item.dropped() {
            item.allocated_budget = 0;
        }
    }
    let report = recursive_energy(graph, params);
    let retained = select_top_k(&report, params);
    let mut assignment = allocate_budget(&retained, &report, params);
    for item in graph.memory_bank_mut() {
        if item.dropped() {
            continue;
        }
        match assignment.budgets.get(&item.ordinal) {
            Some(&b) => item.allocated_budget = b,
            None => {
                item.dropped_at_step = Some(step);
                item.allocated_budget = 0;
            }
        }
    }
    assignment.graph_revision = graph.revision();
    assignment
}

/// Near-square patch grid holding at most `budget` patches, as pixel
/// `(width, height)` with `width >= height`.
pub fn budget_to_resolution(budget: u64, patch_side: u32) -> (u64, u64) {
    if budget == 0 || patch_side == 0 {
        return (0, 0);
    }
    let side = budget.isqrt();
    let (cols, rows) = if side * (side + 1) <= budget {
        (side + 1, side)
    } else {
        (side, side)
    };
    let p = u64::from(patch_side);
    (cols * p, rows * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(priority: u8) -> VisualItemSeed {
        VisualItemSeed {
            modality: Modality::Image,
            payload_ref: format!("img-{priority}"),
            source_timestamp_s: None,
            saliency: true,
            priority,
        }
    }

    /// root → v1 (item A, p=5) → v2 (item B, p=3), evaluated at T = 2.
    fn chain() -> MemoryGraph {
        let mut g = MemoryGraph::new("q").unwrap();
        g.add_search_node("v1", &["root"], "a").unwrap();
        let a = g.add_item(1, seed(5)).unwrap();
        g.populate_node(1, "s1", &[a]).unwrap();
        g.add_search_node("v2", &["v1"], "b").unwrap();
        let b = g.add_item(2, seed(3)).unwrap();
        g.populate_node(2, "s2", &[b]).unwrap();
        g
    }

    #[test]
    fn priority_normalization() {
        assert_eq!(normalize_priority(1).unwrap(), 0.0);
        assert_eq!(normalize_priority(3).unwrap(), 0.5);
        assert_eq!(normalize_priority(5).unwrap(), 1.0);
        assert_eq!(normalize_priority(0), Err(EnergyError::PriorityOutOfRange(0)));
        assert_eq!(normalize_priority(6), Err(EnergyError::PriorityOutOfRange(6)));
    }

    #[test]
    fn intrinsic_identity_factors() {
        let mut g = MemoryGraph::new("q").unwrap();
        g.add_search_node("v1", &["root"], "a").unwrap();
        g.add_item(1, seed(5)).unwrap();
        g.populate_node(1, "s", &[0]).unwrap();
        let e = intrinsic_energy(&g.memory_bank()[0], &g, &EnergyParams::default()).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn intrinsic_with_degree_and_age() {
        let g = chain();
        // item A: p̂ = 1, deg = 1, T - t = 1
        let e = intrinsic_energy(&g.memory_bank()[0], &g, &EnergyParams::default()).unwrap();
        let expected = 2.0 * (-0.1f64).exp();
        assert!((e - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_ignores_age() {
        let g = chain();
        let params = EnergyParams { lambda_decay: 0.0, ..Default::default() };
        let e = intrinsic_energy(&g.memory_bank()[0], &g, &params).unwrap();
        assert_eq!(e, 2.0);
    }

    #[test]
    fn dropped_item_has_no_intrinsic_energy() {
        let mut g = chain();
        g.memory_bank_mut()[0].dropped_at_step = Some(2);
        assert_eq!(
            intrinsic_energy(&g.memory_bank()[0], &g, &EnergyParams::default()),
            Err(EnergyError::ItemDropped(0))
        );
    }

    #[test]
    fn chain_reinforcement() {
        let g = chain();
        let report = recursive_energy(&g, &EnergyParams::default());
        let b = report.get(1).unwrap();
        assert!((b.total - 0.5).abs() < 1e-12);
        assert_eq!(b.total, b.intrinsic);
        assert!((report.node_mean[2] - 0.5).abs() < 1e-12);
        let a = report.get(0).unwrap();
        let expected = 2.0 * (-0.1f64).exp() + 0.3 * 0.5;
        assert!((a.total - expected).abs() < 1e-12);
        assert_eq!(report.node_mean[0], 0.0);
    }

    fn report_from(totals: &[f64]) -> EnergyReport {
        EnergyReport {
            evaluation_step: 0,
            items: totals
                .iter()
                .enumerate()
                .map(|(i, &t)| ItemEnergy { ordinal: i, owner_node: 1, slot: i, intrinsic: t, total: t })
                .collect(),
            node_mean: vec![],
        }
    }

    #[test]
    fn top_k_selection() {
        let params = EnergyParams { top_k: 5, ..Default::default() };
        assert_eq!(select_top_k(&report_from(&[1.0, 2.0]), &params), vec![1, 0]);
        let params = EnergyParams { top_k: 2, ..Default::default() };
        assert_eq!(select_top_k(&report_from(&[3.0, 1.0, 2.0]), &params), vec![0, 2]);
        let mut tied = report_from(&[1.0, 1.0, 1.0]);
        tied.items[0].owner_node = 2;
        tied.items[0].slot = 0;
        assert_eq!(select_top_k(&tied, &params), vec![1, 2]);
    }

    #[test]
    fn proportional_allocation() {
        let params = EnergyParams { s_total: 100, top_k: 2, ..Default::default() };
        let a = allocate_budget(&[0, 1], &report_from(&[3.0, 1.0]), &params);
        assert_eq!(a.budgets, BTreeMap::from([(0, 75), (1, 25)]));
        assert_eq!(a.slack, 0);

        let params = EnergyParams { s_total: 100, top_k: 3, ..Default::default() };
        let a = allocate_budget(&[0, 1, 2], &report_from(&[1.0, 1.0, 1.0]), &params);
        assert_eq!(a.budgets.values().copied().collect::<Vec<_>>(), vec![33, 33, 33]);
        assert_eq!(a.slack, 1);
    }

    #[test]
    fn zero_energy_and_uniform_mode_split_evenly() {
        let params = EnergyParams { s_total: 10, ..Default::default() };
        let a = allocate_budget(&[0, 1, 2], &report_from(&[0.0, 0.0, 0.0]), &params);
        assert_eq!(a.budgets.values().copied().collect::<Vec<_>>(), vec![3, 3, 3]);
        let params = EnergyParams { s_total: 10, uniform_mode: true, ..Default::default() };
        let a = allocate_budget(&[0, 1], &report_from(&[9.0, 1.0]), &params);
        assert_eq!(a.budgets.values().copied().collect::<Vec<_>>(), vec![5, 5]);
    }

    #[test]
    fn default_total_budget() {
        assert_eq!(EnergyParams::default().s_total, 1_310_720);
        assert!(EnergyParams::default().validate().is_ok());
        assert!(EnergyParams { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(EnergyParams { lambda_decay: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shaping_empty_bank() {
        let mut g = MemoryGraph::new("q").unwrap();
        let a = shape_memory(&mut g, &EnergyParams::default());
        assert!(a.retained.is_empty());
        assert!(a.budgets.is_empty());
        assert_eq!(a.slack, DEFAULT_TOTAL_BUDGET);
    }

    #[test]
    fn shaping_is_idempotent_at_fixed_step() {
        let mut g = MemoryGraph::new("q").unwrap();
        g.add_search_node("v1", &["root"], "a").unwrap();
        let refs: Vec<usize> = (1..=5).chain(1..=3).map(|p| g.add_item(1, seed(p)).unwrap()).collect();
        g.populate_node(1, "s", &refs).unwrap();
        g.add_search_node("v2", &["v1"], "b").unwrap();
        let b = g.add_item(2, seed(4)).unwrap();
        g.populate_node(2, "s", &[b]).unwrap();
        let params = EnergyParams::default();
        let first = shape_memory(&mut g, &params);
        let bank = g.memory_bank().to_vec();
        let second = shape_memory(&mut g, &params);
        assert_eq!(first, second);
        assert_eq!(bank, g.memory_bank());
        assert_eq!(first.retained.len(), 5);
        assert_eq!(g.memory_bank().iter().filter(|i| i.dropped()).count(), 4);
    }

    #[test]
    fn non_salient_item_is_gated() {
        let mut g = MemoryGraph::new("q").unwrap();
        g.add_search_node("v1", &["root"], "a").unwrap();
        let hot = g
            .add_item(1, VisualItemSeed { saliency: false, ..seed(5) })
            .unwrap();
        let cold = g.add_item(1, seed(2)).unwrap();
        g.populate_node(1, "s", &[hot, cold]).unwrap();
        let a = shape_memory(&mut g, &EnergyParams::default());
        assert_eq!(a.retained, vec![cold]);
        let item = &g.memory_bank()[hot];
        assert!(item.dropped());
        assert_eq!(item.allocated_budget, 0);
    }

    #[test]
    fn evictions_persist_across_steps() {
        let params = EnergyParams { top_k: 1, ..Default::default() };
        let mut g = MemoryGraph::new("q").unwrap();
        g.add_search_node("v1", &["root"], "a").unwrap();
        let lo = g.add_item(1, seed(2)).unwrap();
        let hi = g.add_item(1, seed(5)).unwrap();
        g.populate_node(1, "s", &[lo, hi]).unwrap();
        shape_memory(&mut g, &params);
        assert!(g.memory_bank()[lo].dropped());
        g.add_search_node("v2", &["root"], "b").unwrap();
        g.populate_node(2, "nothing", &[]).unwrap();
        let a = shape_memory(&mut g, &params);
        assert_eq!(a.retained, vec![hi]);
        assert_eq!(g.memory_bank()[lo].dropped_at_step, Some(1));
    }

    #[test]
    fn resolution_mapping() {
        assert_eq!(budget_to_resolution(1024, 32), (1024, 1024));
        assert_eq!(budget_to_resolution(0, 32), (0, 0));
        assert_eq!(budget_to_resolution(1, 32), (32, 32));
        assert_eq!(budget_to_resolution(2, 32), (64, 32));
        assert_eq!(budget_to_resolution(3, 32), (64, 32));
        assert_eq!(budget_to_resolution(6, 16), (48, 32));
        for b in 0..2000u64 {
            let (w, h) = budget_to_resolution(b, 14);
            assert!((w / 14) * (h / 14) <= b);
            assert!(w >= h && w - h <= 14);
        }
    }
}
