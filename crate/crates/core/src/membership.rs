//! Per-node membership state machine: joining a domain, leaving it, and
//! detecting crashed peers through periodic heartbeats.
//!
//! Every handler mutates the [`NodeState`] in place, pushes its sends and
//! timers into the [`Network`], and returns [`Effects`] describing what
//! changed so the caller can maintain the virtual domain and metrics.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::election::{self, AdjacencyView, ElectionPolicy};
use crate::model::{Ait, AitEntry, Body, DomainId, Message, MessageKind, NodeId};
use crate::simnet::{Group, LinkConfig, Network};

pub const TIMER_JOIN_DEADLINE: &str = "join-deadline";
pub const TIMER_HEARTBEAT: &str = "heartbeat";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("node {0} is already joining or a member")]
    AlreadyMember(NodeId),
    #[error("node {0} is not a domain member")]
    NotMember(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Offline,
    Joining,
    Member,
    Left,
}

/// Protocol timing and behaviour knobs shared by every node of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub accept_window_ms: f64,
    pub heartbeat_period_ms: f64,
    pub failure_timeout_ms: f64,
    pub response_window_ms: f64,
    /// How long a requester waits for its agent's answer.
    pub query_timeout_ms: f64,
    pub policy: ElectionPolicy,
    /// Whether heartbeats refresh the capacity of already-known peers.
    pub refresh_capacity: bool,
    /// When set, agents are pinned per domain and never re-elected.
    pub fixed_agents: Option<BTreeMap<DomainId, NodeId>>,
}

/// Largest protocol datagram (QUERY_RESP).
const MAX_CONTROL_BYTES: f64 = 73.0;
const JOIN_BYTES: f64 = 33.0;

impl ProtocolParams {
    pub const DEFAULT_HEARTBEAT_PERIOD_MS: f64 = 1000.0;

    pub fn default_accept_window(intra: &LinkConfig) -> f64 {
        (2.0 * intra.latency_ms(JOIN_BYTES)).max(10.0)
    }

    pub fn default_response_window(inter: &LinkConfig) -> f64 {
        (2.0 * 2.0 * inter.latency_ms(MAX_CONTROL_BYTES)).max(10.0)
    }

    pub fn default_query_timeout(intra: &LinkConfig, response_window_ms: f64) -> f64 {
        response_window_ms + 4.0 * intra.latency_ms(MAX_CONTROL_BYTES) + 10.0
    }

    /// Defaults derived from the link models: 1 s heartbeats, a 3-miss
    /// failure timeout, and windows sized from round-trip times.
    pub fn for_links(intra: &LinkConfig, inter: &LinkConfig) -> Self {
        let response_window_ms = Self::default_response_window(inter);
        ProtocolParams {
            accept_window_ms: Self::default_accept_window(intra),
            heartbeat_period_ms: Self::DEFAULT_HEARTBEAT_PERIOD_MS,
            failure_timeout_ms: 3.0 * Self::DEFAULT_HEARTBEAT_PERIOD_MS,
            response_window_ms,
            query_timeout_ms: Self::default_query_timeout(intra, response_window_ms),
            policy: ElectionPolicy::MaxPower,
            refresh_capacity: true,
            fixed_agents: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalCause {
    Leave,
    Timeout,
}

/// What a handler changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Effects {
    pub became_member: bool,
    pub became_agent: bool,
    pub stepped_down: bool,
    /// The node rejected a rival claim and re-announced its own agency.
    pub reasserted: bool,
    pub added: Vec<NodeId>,
    pub removed: Vec<(NodeId, RemovalCause)>,
    /// An AGENT_ANNOUNCE named someone other than the agent this node
    /// computed afterwards.
    pub announce_mismatch: bool,
    pub ignored: Option<&'static str>,
}

impl Effects {
    fn ignored(reason: &'static str) -> Self {
        Effects {
            ignored: Some(reason),
            ..Effects::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub self_entry: AitEntry,
    pub domain: DomainId,
    pub ait: Ait,
    /// Current agent as seen by this node, `NodeId::NONE` when unknown.
    pub agent: NodeId,
    pub phase: Phase,
    pub last_heard: BTreeMap<NodeId, f64>,
    pub join_deadline_ms: Option<f64>,
}

impl NodeState {
    pub fn new(self_entry: AitEntry, domain: DomainId) -> Self {
        NodeState {
            self_entry,
            domain,
            ait: Ait::new(),
            agent: NodeId::NONE,
            phase: Phase::Offline,
            last_heard: BTreeMap::new(),
            join_deadline_ms: None,
        }
    }

    pub fn id(&self) -> NodeId {
        self.self_entry.node_id
    }

    pub fn is_member(&self) -> bool {
        self.phase == Phase::Member
    }

    pub fn is_agent(&self) -> bool {
        self.is_member() && self.agent == self.id()
    }

    fn message(&self, body: Body) -> Message {
        Message::new(self.self_entry, body)
    }

    fn multicast(&self, net: &mut Network, body: Body) {
        net.send_multicast(self.id(), Group::Domain(self.domain), self.message(body))
            .expect("own node is part of the topology");
    }

    fn reset(&mut self, net: &mut Network) {
        net.unsubscribe(self.id());
        net.cancel_timers_of(self.id());
        self.ait.clear();
        self.agent = NodeId::NONE;
        self.last_heard.clear();
        self.join_deadline_ms = None;
    }

    /// Updates the capacity advertised in this node's own entry.
    pub fn set_capacity(&mut self, capacity_mb: f64) {
        self.self_entry.storage_capacity_mb = capacity_mb;
        if self.ait.contains(self.id()) {
            self.ait.upsert(self.self_entry);
        }
    }

    /// Multicasts JOIN and opens the ACCEPT collection window.
    pub fn initiate_join(
        &mut self,
        net: &mut Network,
        params: &ProtocolParams,
    ) -> Result<Effects, MembershipError> {
        if matches!(self.phase, Phase::Joining | Phase::Member) {
            return Err(MembershipError::AlreadyMember(self.id()));
        }
        self.reset(net);
        net.subscribe(self.id()).expect("own node is part of the topology");
        self.phase = Phase::Joining;
        self.ait.upsert(self.self_entry);
        self.join_deadline_ms = Some(net.now() + params.accept_window_ms);
        self.multicast(net, Body::Join);
        net.set_timer(self.id(), TIMER_JOIN_DEADLINE, params.accept_window_ms)
            .expect("own node is part of the topology");
        Ok(Effects::default())
    }

    pub fn on_join_received(
        &mut self,
        joiner: AitEntry,
        net: &mut Network,
        params: &ProtocolParams,
    ) -> Effects {
        if self.phase != Phase::Member {
            debug!("node {}: JOIN from {} ignored in {:?}", self.id(), joiner.node_id, self.phase);
            return Effects::ignored("join while not member");
        }
        let fresh = self.ait.upsert(joiner);
        self.last_heard.insert(joiner.node_id, net.now());
        net.send_unicast(self.id(), joiner.node_id, self.message(Body::Accept))
            .expect("joiner is part of the topology");
        let mut fx = on_membership_change(self, net, params);
        if fresh {
            fx.added.push(joiner.node_id);
        }
        // The joiner cannot learn the incumbent from ACCEPTs alone.
        if self.is_agent() && !fx.became_agent {
            self.multicast(net, Body::AgentAnnounce);
        }
        fx
    }

    pub fn on_accept_received(&mut self, accepter: AitEntry, net: &mut Network, params: &ProtocolParams) -> Effects {
        match self.phase {
            Phase::Joining => {
                self.ait.upsert(accepter);
                self.last_heard.insert(accepter.node_id, net.now());
                Effects::default()
            }
            // A straggler: treat it like any other fresh knowledge.
            Phase::Member => self.learn_peer(accepter, net, params),
            _ => {
                debug!("node {}: ACCEPT from {} ignored in {:?}", self.id(), accepter.node_id, self.phase);
                Effects::ignored("accept while not joining")
            }
        }
    }

    /// Closes the ACCEPT window: the node becomes a member and elects.
    pub fn on_join_deadline(&mut self, net: &mut Network, params: &ProtocolParams) -> Effects {
        if self.phase != Phase::Joining {
            return Effects::ignored("join deadline while not joining");
        }
        self.phase = Phase::Member;
        self.join_deadline_ms = None;
        let now = net.now();
        let me = self.id();
        for id in self.ait.ids().filter(|id| *id != me).collect::<Vec<_>>() {
            self.last_heard.entry(id).or_insert(now);
        }
        net.set_timer(me, TIMER_HEARTBEAT, params.heartbeat_period_ms)
            .expect("own node is part of the topology");
        let mut fx = on_membership_change(self, net, params);
        fx.became_member = true;
        fx
    }

    pub fn initiate_leave(&mut self, net: &mut Network) -> Result<Effects, MembershipError> {
        if self.phase != Phase::Member {
            return Err(MembershipError::NotMember(self.id()));
        }
        let was_agent = self.is_agent();
        self.multicast(net, Body::Leave);
        self.reset(net);
        self.phase = Phase::Left;
        Ok(Effects {
            stepped_down: was_agent,
            ..Effects::default()
        })
    }

    /// Stops the node without any goodbye traffic.
    pub fn crash(&mut self, net: &mut Network) -> Effects {
        let was_agent = self.is_agent();
        self.reset(net);
        self.phase = Phase::Offline;
        Effects {
            stepped_down: was_agent,
            ..Effects::default()
        }
    }

    pub fn on_leave_received(&mut self, leaver: NodeId, net: &mut Network, params: &ProtocolParams) -> Effects {
        if self.phase != Phase::Member {
            debug!("node {}: LEAVE from {} ignored in {:?}", self.id(), leaver, self.phase);
            return Effects::ignored("leave while not member");
        }
        if leaver == self.id() || self.ait.remove(leaver).is_none() {
            return Effects::default();
        }
        self.last_heard.remove(&leaver);
        let mut fx = on_membership_change(self, net, params);
        fx.removed.push((leaver, RemovalCause::Leave));
        fx
    }

    /// Periodic heartbeat: advertise the current entry, expire silent
    /// peers, re-arm.
    pub fn heartbeat_tick(&mut self, net: &mut Network, params: &ProtocolParams) -> Effects {
        if self.phase != Phase::Member {
            return Effects::ignored("heartbeat while not member");
        }
        let me = self.id();
        self.multicast(net, Body::Heartbeat);
        let now = net.now();
        let expired: Vec<NodeId> = self
            .ait
            .ids()
            .filter(|id| *id != me)
            .filter(|id| {
                self.last_heard
                    .get(id)
                    .is_none_or(|t| now - t > params.failure_timeout_ms)
            })
            .collect();
        for id in &expired {
            self.ait.remove(*id);
            self.last_heard.remove(id);
        }
        net.set_timer(me, TIMER_HEARTBEAT, params.heartbeat_period_ms)
            .expect("own node is part of the topology");
        if expired.is_empty() {
            return Effects::default();
        }
        let mut fx = on_membership_change(self, net, params);
        fx.removed = expired.into_iter().map(|id| (id, RemovalCause::Timeout)).collect();
        fx
    }

    fn learn_peer(&mut self, peer: AitEntry, net: &mut Network, params: &ProtocolParams) -> Effects {
        self.last_heard.insert(peer.node_id, net.now());
        let known = self.ait.contains(peer.node_id);
        if known && !params.refresh_capacity {
            return Effects::default();
        }
        self.ait.upsert(peer);
        if known {
            return Effects::default();
        }
        let mut fx = on_membership_change(self, net, params);
        fx.added.push(peer.node_id);
        if self.is_agent() && !fx.became_agent {
            self.multicast(net, Body::AgentAnnounce);
        }
        fx
    }

    pub fn on_heartbeat_received(&mut self, peer: AitEntry, net: &mut Network, params: &ProtocolParams) -> Effects {
        match self.phase {
            Phase::Member => self.learn_peer(peer, net, params),
            Phase::Joining => {
                self.ait.upsert(peer);
                self.last_heard.insert(peer.node_id, net.now());
                Effects::default()
            }
            _ => Effects::ignored("heartbeat while offline"),
        }
    }

    pub fn on_agent_announce(&mut self, announcer: AitEntry, net: &mut Network, params: &ProtocolParams) -> Effects {
        let claimed = announcer.node_id;
        match self.phase {
            Phase::Joining => {
                self.ait.upsert(announcer);
                self.last_heard.insert(claimed, net.now());
                if params.fixed_agents.is_none() {
                    self.agent = claimed;
                }
                return Effects::default();
            }
            Phase::Member => {}
            _ => return Effects::ignored("announce while offline"),
        }
        let mut fx = Effects::default();
        if self.ait.upsert(announcer) {
            fx.added.push(claimed);
        }
        self.last_heard.insert(claimed, net.now());
        if params.fixed_agents.is_some() {
            return fx;
        }
        let was_agent = self.is_agent();
        // Two incumbents tied on power settle on the lower id.
        if params.policy == ElectionPolicy::MaxPower {
            let best = election::argmax_power(&self.ait);
            let mine = best.contains(&self.agent);
            let theirs = best.contains(&claimed);
            if theirs && (!mine || claimed < self.agent) {
                self.agent = claimed;
            }
        }
        let change = on_membership_change(self, net, params);
        fx.became_agent = change.became_agent;
        fx.stepped_down = was_agent && !self.is_agent();
        if self.is_agent() && !change.became_agent && claimed != self.id() {
            self.multicast(net, Body::AgentAnnounce);
            fx.reasserted = true;
        }
        fx.announce_mismatch = self.agent != claimed;
        fx
    }

    /// Dispatches a delivered membership message. Discovery and data
    /// messages are left to the caller.
    pub fn on_message(&mut self, msg: &Message, net: &mut Network, params: &ProtocolParams) -> Effects {
        let sender = msg.sender;
        if sender.node_id == self.id() {
            return Effects::ignored("own message");
        }
        match msg.kind() {
            MessageKind::Join => self.on_join_received(sender, net, params),
            MessageKind::Accept => self.on_accept_received(sender, net, params),
            MessageKind::Leave => self.on_leave_received(sender.node_id, net, params),
            MessageKind::Heartbeat => self.on_heartbeat_received(sender, net, params),
            MessageKind::AgentAnnounce => self.on_agent_announce(sender, net, params),
            MessageKind::Query | MessageKind::QueryResp | MessageKind::Data => Effects::default(),
        }
    }

    pub fn on_timer(&mut self, tag: &str, net: &mut Network, params: &ProtocolParams) -> Effects {
        match tag {
            TIMER_JOIN_DEADLINE => self.on_join_deadline(net, params),
            TIMER_HEARTBEAT => self.heartbeat_tick(net, params),
            _ => Effects::ignored("unknown timer"),
        }
    }

    /// Checks the structural invariants of the state.
    pub fn check_invariants(&self, params: &ProtocolParams) -> Result<(), String> {
        match self.phase {
            Phase::Member if !self.ait.contains(self.id()) => {
                Err(format!("member {} lacks its own AIT entry", self.id()))
            }
            Phase::Offline | Phase::Left if !self.ait.is_empty() || !self.agent.is_none() => {
                Err(format!("offline node {} retains state", self.id()))
            }
            _ if params.fixed_agents.is_none() && !self.agent.is_none() && !self.ait.contains(self.agent) => {
                Err(format!("node {} follows agent {} outside its AIT", self.id(), self.agent))
            }
            _ => Ok(()),
        }
    }
}

/// Re-runs agent selection over the node's current table. When the node
/// elects itself it announces the fact to its domain.
pub fn on_membership_change(state: &mut NodeState, net: &mut Network, params: &ProtocolParams) -> Effects {
    let mut fx = Effects::default();
    if state.phase != Phase::Member {
        return fx;
    }
    if let Some(fixed) = &params.fixed_agents {
        state.agent = fixed.get(&state.domain).copied().unwrap_or(NodeId::NONE);
        return fx;
    }
    let before = state.agent;
    let incumbent = if state.ait.contains(before) { before } else { NodeId::NONE };
    let adj = AdjacencyView::observed(
        &state.ait,
        state.id(),
        &state.last_heard,
        net.now(),
        params.failure_timeout_ms,
    );
    let chosen = election::select_agent(&state.ait, incumbent, params.policy, &adj)
        .expect("a member's table holds at least its own entry");
    state.agent = chosen;
    let me = state.id();
    if chosen != before {
        if chosen == me {
            fx.became_agent = true;
            state.multicast(net, Body::AgentAnnounce);
        } else if before == me {
            fx.stepped_down = true;
        }
    }
    fx
}
