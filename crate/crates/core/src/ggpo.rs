//! Trainer-side preparation of rollout groups: node-level segmentation,
//! pruning masks, group-relative advantages and the masked clipped objective.
//!
//! Mask rule, per node-constructing segment `v` of a rollout with reward `r`:
//!
//! ```text
//! μ = [r = 1]·[v ∉ P_ans] + [r = 0]·[v ∈ R_val]
//! ```
//!
//! where `P_ans` is the critical path of the final graph and `R_val` the
//! nodes whose retrieval surfaced gold evidence. The answer segment is never
//! masked.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::graph::NodeKind;
use crate::protocol::Action;
use crate::retrieval::{tokenize, Observation};
use crate::runtime::Trajectory;

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GgpoError {
    #[error("rollout {rollout}: {message}")]
    Mismatch { rollout: usize, message: String },
    #[error("reward must be 0 or 1, got {0}")]
    BadReward(u8),
    #[error("rollout {0} answered but was never judged")]
    Unjudged(usize),
    #[error("group has no rollouts")]
    EmptyGroup,
    #[error("inputs misaligned: {0}")]
    Misaligned(String),
    #[error("invalid objective input: {0}")]
    BadInput(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSpan {
    /// `retrieve`, `memorize` or `answer`.
    pub role: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub rollout_id: usize,
    pub segment_index: usize,
    pub node_index: usize,
    pub terminal: bool,
    /// Digest of the prompt bundle the segment was generated from.
    pub prompt_ref: String,
    pub spans: Vec<ResponseSpan>,
}

/// One segment per search node in construction order, plus a terminal
/// segment when the rollout answered.
pub fn segment_trajectory(trajectory: &Trajectory, rollout_id: usize) -> Result<Vec<TrajectorySegment>, GgpoError> {
    let graph = &trajectory.final_graph;
    let mismatch = |message: String| GgpoError::Mismatch { rollout: rollout_id, message };
    let mut segments = Vec::with_capacity(trajectory.records.len());
    let mut covered = BTreeSet::new();
    for (i, rec) in trajectory.records.iter().enumerate() {
        let node = graph
            .node(rec.node_index)
            .map_err(|_| mismatch(format!("cycle {} names missing node {}", rec.cycle, rec.node_index)))?;
        let terminal = match (&rec.action, node.kind) {
            (Action::Retrieve { title, .. }, NodeKind::Search) if &node.title == title => false,
            (Action::Answer { .. }, NodeKind::Answer) => true,
            _ => {
                return Err(mismatch(format!(
                    "cycle {} action does not match node {} ({})",
                    rec.cycle,
                    rec.node_index,
                    node.kind.as_str()
                )))
            }
        };
        if terminal && i + 1 != trajectory.records.len() {
            return Err(mismatch("answer cycle is not the last".into()));
        }
        if !covered.insert(rec.node_index) {
            return Err(mismatch(format!("node {} has two transcripts", rec.node_index)));
        }
        let mut spans = vec![ResponseSpan {
            role: if terminal { "answer" } else { "retrieve" }.into(),
            text: rec.response.clone(),
        }];
        if !terminal {
            let memo = rec
                .memorize_response
                .clone()
                .ok_or_else(|| mismatch(format!("cycle {} has no memorize response", rec.cycle)))?;
            spans.push(ResponseSpan { role: "memorize".into(), text: memo });
        }
        segments.push(TrajectorySegment {
            rollout_id,
            segment_index: i,
            node_index: rec.node_index,
            terminal,
            prompt_ref: rec.prompt_hash.clone(),
            spans,
        });
    }
    if let Some(orphan) = graph.nodes().iter().skip(1).find(|n| !covered.contains(&n.index)) {
        return Err(mismatch(format!("node {} has no transcript", orphan.index)));
    }
    Ok(segments)
}

/// Decides whether one retrieved observation carries gold evidence.
pub trait RelevanceMatcher {
    fn is_relevant(&self, observation: &Observation) -> bool;
}

/// Gold evidence given as corpus item ids.
#[derive(Debug, Clone, Default)]
pub struct IdMatcher(pub BTreeSet<String>);

impl RelevanceMatcher for IdMatcher {
    fn is_relevant(&self, observation: &Observation) -> bool {
        self.0.contains(&observation.source_id)
    }
}

/// Gold evidence given as text, for corpora without stable ids. An
/// observation matches when at least `min_overlap` of some gold passage's
/// distinct tokens appear in its content.
#[derive(Debug, Clone)]
pub struct TextOverlapMatcher {
    gold: Vec<BTreeSet<String>>,
    min_overlap: f64,
}

impl TextOverlapMatcher {
    pub fn new(gold_texts: &[String], min_overlap: f64) -> Self {
        let gold = gold_texts
            .iter()
            .map(|t| tokenize(t).into_iter().collect::<BTreeSet<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        TextOverlapMatcher { gold, min_overlap }
    }
}

impl RelevanceMatcher for TextOverlapMatcher {
    fn is_relevant(&self, observation: &Observation) -> bool {
        let have: BTreeSet<String> = tokenize(&observation.content).into_iter().collect();
        self.gold.iter().any(|g| {
            let hit = g.iter().filter(|t| have.contains(*t)).count();
            hit as f64 >= self.min_overlap * g.len() as f64
        })
    }
}

/// Nodes whose retrieval returned a gold evidence item.
pub fn detect_valuable_retrieval(trajectory: &Trajectory, gold_evidence_ids: &BTreeSet<String>) -> BTreeSet<usize> {
    detect_valuable_retrieval_with(trajectory, &IdMatcher(gold_evidence_ids.clone()))
}

pub fn detect_valuable_retrieval_with(trajectory: &Trajectory, matcher: &dyn RelevanceMatcher) -> BTreeSet<usize> {
    trajectory
        .records
        .iter()
        .filter(|r| matches!(r.action, Action::Retrieve { .. }))
        .filter(|r| r.observations.iter().any(|o| matcher.is_relevant(o)))
        .map(|r| r.node_index)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskTag {
    DeadEndPositive,
    ValuableNegative,
    Unmasked,
}

impl MaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskTag::DeadEndPositive => "DeadEndPositive",
            MaskTag::ValuableNegative => "ValuableNegative",
            MaskTag::Unmasked => "Unmasked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub segment_index: usize,
    pub node_index: usize,
    pub terminal: bool,
    pub mu: u8,
    pub tag: MaskTag,
    pub on_critical_path: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruningMask {
    pub entries: Vec<MaskEntry>,
}

impl PruningMask {
    pub fn mu(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.mu).collect()
    }

    pub fn count(&self, tag: MaskTag) -> usize {
        self.entries.iter().filter(|e| e.tag == tag).count()
    }
}

pub fn pruning_mask(
    segments: &[TrajectorySegment],
    reward: u8,
    critical_path: &BTreeSet<usize>,
    r_val: &BTreeSet<usize>,
) -> Result<PruningMask, GgpoError> {
    if reward > 1 {
        return Err(GgpoError::BadReward(reward));
    }
    let entries = segments
        .iter()
        .map(|s| {
            let on_path = critical_path.contains(&s.node_index);
            let tag = if s.terminal {
                MaskTag::Unmasked
            } else if reward == 1 && !on_path {
                MaskTag::DeadEndPositive
            } else if reward == 0 && r_val.contains(&s.node_index) {
                MaskTag::ValuableNegative
            } else {
                MaskTag::Unmasked
            };
            MaskEntry {
                segment_index: s.segment_index,
                node_index: s.node_index,
                terminal: s.terminal,
                mu: u8::from(tag != MaskTag::Unmasked),
                tag,
                on_critical_path: on_path,
            }
        })
        .collect();
    Ok(PruningMask { entries })
}

/// `(r − mean) / max(std, 1e−6)` with the population standard deviation.
pub fn group_advantage(rewards: &[u8]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (f64::from(r) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    rewards.iter().map(|&r| (f64::from(r) - mean) / std).collect()
}

/// Per-segment probability ratios and advantages, one row per rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveInputs {
    pub ratios: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub clip_eps: f64,
}

impl ObjectiveInputs {
    /// Broadcast one advantage per rollout over its segments.
    pub fn broadcast(ratios: Vec<Vec<f64>>, per_rollout: &[f64], clip_eps: f64) -> Self {
        let advantages = ratios.iter().zip(per_rollout).map(|(r, &a)| vec![a; r.len()]).collect();
        ObjectiveInputs { ratios, advantages, clip_eps }
    }
}

/// `min(r·Â, clip(r, 1−ε, 1+ε)·Â)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// `(1 / Σ n_g) · Σ_g Σ_i (1 − μ) · min(r Â, clip(r) Â)`; masked segments
/// still count in the normaliser.
pub fn masked_objective(inputs: &ObjectiveInputs, masks: &[PruningMask]) -> Result<f64, GgpoError> {
    if !(inputs.clip_eps > 0.0 && inputs.clip_eps < 1.0) {
        return Err(GgpoError::BadInput(format!("clip epsilon {} outside (0, 1)", inputs.clip_eps)));
    }
    if inputs.ratios.len() != masks.len() || inputs.advantages.len() != masks.len() {
        return Err(GgpoError::Misaligned(format!(
            "{} ratio rows, {} advantage rows, {} masks",
            inputs.ratios.len(),
            inputs.advantages.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (g, mask) in masks.iter().enumerate() {
        let (ratios, advs) = (&inputs.ratios[g], &inputs.advantages[g]);
        if ratios.len() != mask.entries.len() || advs.len() != mask.entries.len() {
            return Err(GgpoError::Misaligned(format!("rollout {g}: segment counts differ")));
        }
        for ((&r, &a), e) in ratios.iter().zip(advs).zip(&mask.entries) {
            if !(r > 0.0 && r.is_finite()) || !a.is_finite() {
                return Err(GgpoError::BadInput(format!("rollout {g}: ratio {r}, advantage {a}")));
            }
            if e.mu == 0 {
                total += clipped_term(r, a, inputs.clip_eps);
            }
        }
        n += mask.entries.len();
    }
    if n == 0 {
        return Err(GgpoError::EmptyGroup);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedRollout {
    pub rollout_id: usize,
    pub reward: u8,
    pub truncated: bool,
    pub advantage: f64,
    pub segments: Vec<TrajectorySegment>,
    pub mask: PruningMask,
    pub critical_path: BTreeSet<usize>,
    pub r_val: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedGroup {
    pub query: String,
    pub rollouts: Vec<PreparedRollout>,
}

/// Segment, mask and score every rollout of one query. Truncated rollouts
/// count as reward 0 with an empty critical path.
pub fn prepare_group(trajectories: &[Trajectory], gold_evidence_ids: &BTreeSet<String>) -> Result<PreparedGroup, GgpoError> {
    prepare_group_with(trajectories, &IdMatcher(gold_evidence_ids.clone()))
}

pub fn prepare_group_with(trajectories: &[Trajectory], matcher: &dyn RelevanceMatcher) -> Result<PreparedGroup, GgpoError> {
    let first = trajectories.first().ok_or(GgpoError::EmptyGroup)?;
    let mut rewards = Vec::with_capacity(trajectories.len());
    for (g, t) in trajectories.iter().enumerate() {
        let r = match (t.is_truncated(), t.reward) {
            (true, _) => 0,
            (false, Some(r)) if r <= 1 => r,
            (false, Some(r)) => return Err(GgpoError::BadReward(r)),
            (false, None) => return Err(GgpoError::Unjudged(g)),
        };
        rewards.push(r);
    }
    let advantages = group_advantage(&rewards);
    let mut rollouts = Vec::with_capacity(trajectories.len());
    for (g, t) in trajectories.iter().enumerate() {
        let segments = segment_trajectory(t, g)?;
        let critical_path = t.final_graph.critical_path();
        let r_val = detect_valuable_retrieval_with(t, matcher);
        let mask = pruning_mask(&segments, rewards[g], &critical_path, &r_val)?;
        rollouts.push(PreparedRollout {
            rollout_id: g,
            reward: rewards[g],
            truncated: t.is_truncated(),
            advantage: advantages[g],
            segments,
            mask,
            critical_path,
            r_val,
        });
    }
    Ok(PreparedGroup { query: first.query.clone(), rollouts })
}

#[derive(Serialize)]
struct BatchRecord<'a> {
    group: usize,
    query: &'a str,
    rollout: usize,
    segment: usize,
    node_index: usize,
    terminal: bool,
    prompt_ref: &'a str,
    spans: &'a [ResponseSpan],
    reward: u8,
    mu: u8,
    advantage: f64,
    tag: &'static str,
}

/// One JSON line per segment, ordered by group, rollout, segment. Masked
/// segments are kept with `mu = 1`.
pub fn export_training_batch(groups: &[PreparedGroup]) -> Result<String, GgpoError> {
    let mut out = String::new();
    for (gi, group) in groups.iter().enumerate() {
        if group.rollouts.is_empty() {
            return Err(GgpoError::EmptyGroup);
        }
        for r in &group.rollouts {
            if r.segments.len() != r.mask.entries.len() {
                return Err(GgpoError::Misaligned(format!("group {gi} rollout {}: mask incomplete", r.rollout_id)));
            }
            for (s, m) in r.segments.iter().zip(&r.mask.entries) {
                let rec = BatchRecord {
                    group: gi,
                    query: &group.query,
                    rollout: r.rollout_id,
                    segment: s.segment_index,
                    node_index: s.node_index,
                    terminal: s.terminal,
                    prompt_ref: &s.prompt_ref,
                    spans: &s.spans,
                    reward: r.reward,
                    mu: m.mu,
                    advantage: r.advantage,
                    tag: m.tag.as_str(),
                };
                out.push_str(&canonical::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Per-node listing of tags and path membership.
pub fn audit_report(groups: &[PreparedGroup]) -> String {
    let mut out = String::new();
    for (gi, group) in groups.iter().enumerate() {
        let _ = writeln!(out, "group {gi}: {:?}", group.query);
        for r in &group.rollouts {
            let _ = writeln!(
                out,
                "  rollout {} reward={} advantage={}{}",
                r.rollout_id,
                r.reward,
                canonical::format_float(r.advantage, 6),
                if r.truncated { " truncated" } else { "" }
            );
            for (s, m) in r.segments.iter().zip(&r.mask.entries) {
                let _ = writeln!(
                    out,
                    "    segment {} node {}{} mu={} {} path={}",
                    s.segment_index,
                    s.node_index,
                    if s.terminal { " (answer)" } else { "" },
                    m.mu,
                    m.tag.as_str(),
                    if m.on_critical_path { "yes" } else { "no" }
                );
            }
        }
        let dead: usize = group.rollouts.iter().map(|r| r.mask.count(MaskTag::DeadEndPositive)).sum();
        let valuable: usize = group.rollouts.iter().map(|r| r.mask.count(MaskTag::ValuableNegative)).sum();
        let _ = writeln!(out, "  totals: DeadEndPositive={dead} ValuableNegative={valuable}");
    }
    out
}
