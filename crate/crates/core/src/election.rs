//! Agent selection within a physical domain.
//!
//! The default policy picks the member with the greatest processing power
//! and keeps the incumbent while it remains among the most powerful.
//! Fresh ties break toward the lowest node id so every member reaches the
//! same answer from the same table without an extra round.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Ait, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElectionError {
    #[error("cannot elect an agent from an empty domain")]
    EmptyDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectionPolicy {
    #[default]
    MaxPower,
    LowestId,
    HighestConnectivity,
}

/// Per-member neighbour counts as seen by one node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdjacencyView {
    pub neighbor_counts: BTreeMap<NodeId, usize>,
}

impl AdjacencyView {
    /// Builds the view a node holds of its domain. A member counts as
    /// reachable when it is the observer itself or was heard from within
    /// `window_ms`; each reachable member's degree is the number of other
    /// reachable members, unreachable members get zero.
    pub fn observed(
        ait: &Ait,
        observer: NodeId,
        last_heard: &BTreeMap<NodeId, f64>,
        now_ms: f64,
        window_ms: f64,
    ) -> Self {
        let reachable: Vec<NodeId> = ait
            .ids()
            .filter(|id| {
                *id == observer
                    || last_heard
                        .get(id)
                        .is_some_and(|t| now_ms - t <= window_ms)
            })
            .collect();
        let degree = reachable.len().saturating_sub(1);
        let neighbor_counts = ait
            .ids()
            .map(|id| (id, if reachable.contains(&id) { degree } else { 0 }))
            .collect();
        AdjacencyView { neighbor_counts }
    }

    pub fn count(&self, id: NodeId) -> usize {
        self.neighbor_counts.get(&id).copied().unwrap_or(0)
    }
}

/// Members sharing the greatest processing power, ascending by id.
pub fn argmax_power(ait: &Ait) -> Vec<NodeId> {
    let Some(max) = ait
        .entries()
        .map(|e| e.processing_power_mhz)
        .max_by(f64::total_cmp)
    else {
        return Vec::new();
    };
    ait.entries()
        .filter(|e| e.processing_power_mhz == max)
        .map(|e| e.node_id)
        .collect()
}

pub fn select_agent(
    ait: &Ait,
    current_agent: NodeId,
    policy: ElectionPolicy,
    adj: &AdjacencyView,
) -> Result<NodeId, ElectionError> {
    if ait.is_empty() {
        return Err(ElectionError::EmptyDomain);
    }
    let chosen = match policy {
        ElectionPolicy::MaxPower => {
            let best = argmax_power(ait);
            if best.contains(&current_agent) {
                current_agent
            } else {
                best[0]
            }
        }
        ElectionPolicy::LowestId => ait.ids().next().expect("non-empty"),
        ElectionPolicy::HighestConnectivity => {
            let max = ait.ids().map(|id| adj.count(id)).max().expect("non-empty");
            ait.ids().find(|id| adj.count(*id) == max).expect("non-empty")
        }
    };
    Ok(chosen)
}
