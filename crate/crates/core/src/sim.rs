//! A whole deployment: every node's protocol state, the virtual domain
//! registry and the capacity ledger, driven by one [`Network`].

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{
    self, Answer, CapacityPool, DiscoveryError, QueryDesk, ServiceEndpoint, StorageQuery, TransferReport,
    VirtualDomain,
};
use crate::election::{self, ElectionPolicy};
use crate::membership::{Effects, MembershipError, NodeState, Phase, ProtocolParams, RemovalCause};
use crate::metrics::{MetricKind, MetricsRecord, Unit};
use crate::model::{AitEntry, Body, DomainId, Message, ModelError, NodeId};
use crate::simnet::{EventHandler, EventKind, LinkConfig, LinkScope, NetError, Network, SimEvent, Topology, TraceRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Membership(#[from] MembershipError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
}

/// Static description of one storage node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub domain: DomainId,
    pub ip: Ipv4Addr,
    pub capacity_mb: f64,
    pub power_mhz: f64,
}

impl NodeSpec {
    pub fn entry(&self) -> Result<AitEntry, ModelError> {
        AitEntry::new(self.id, self.ip, self.capacity_mb, self.power_mhz)
    }
}

const QUERY_TIMEOUT_PREFIX: &str = "query-timeout:";
const QUERY_WINDOW_PREFIX: &str = "query-window:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Found,
    NotFound,
    TimedOut,
    NoAgent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub requester: NodeId,
    pub required_mb: f64,
    pub issued_ms: f64,
    pub resolved_ms: f64,
    pub status: QueryStatus,
    pub candidate: Option<AitEntry>,
    pub remote: bool,
    pub allocation: Option<Result<discovery::Allocation, DiscoveryError>>,
}

impl QueryOutcome {
    pub fn succeeded(&self) -> bool {
        self.status == QueryStatus::Found
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipChange {
    Added,
    Removed(RemovalCause),
}

/// One AIT mutation observed at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembershipEvent {
    pub time_ms: f64,
    pub observer: NodeId,
    pub subject: NodeId,
    pub change: MembershipChange,
}

#[derive(Debug, Clone, Copy)]
struct Request {
    requester: NodeId,
    required_mb: f64,
    issued_ms: f64,
    allocate: bool,
}

struct World {
    nodes: BTreeMap<NodeId, NodeState>,
    desks: BTreeMap<NodeId, QueryDesk>,
    registry: VirtualDomain,
    pool: CapacityPool,
    params: ProtocolParams,
    metrics: Vec<MetricsRecord>,
    requests: BTreeMap<u64, Request>,
    outcomes: Vec<QueryOutcome>,
    log: Vec<MembershipEvent>,
    join_started: BTreeMap<NodeId, f64>,
    vacancy: BTreeMap<DomainId, f64>,
    announce_mismatches: usize,
}

impl World {
    fn sync_virtual(&self, net: &mut Network) {
        net.set_virtual_members(self.registry.members());
    }

    fn apply(&mut self, net: &mut Network, id: NodeId, fx: Effects) {
        let now = net.now();
        for subject in &fx.added {
            self.log.push(MembershipEvent {
                time_ms: now,
                observer: id,
                subject: *subject,
                change: MembershipChange::Added,
            });
        }
        for (subject, cause) in &fx.removed {
            self.log.push(MembershipEvent {
                time_ms: now,
                observer: id,
                subject: *subject,
                change: MembershipChange::Removed(*cause),
            });
        }
        let node = &self.nodes[&id];
        if fx.became_member {
            if let Some(start) = self.join_started.remove(&id) {
                self.metrics.push(
                    MetricsRecord::new(MetricKind::JoinLatency, now - start, Unit::Ms, now)
                        .label("node", id)
                        .label("domain", node.domain)
                        .label("ait_size", node.ait.len()),
                );
            }
        }
        if fx.announce_mismatch {
            self.announce_mismatches += 1;
        }
        if (fx.became_agent || fx.reasserted) && node.is_agent() {
            let domain = node.domain;
            let endpoints = ServiceEndpoint::standard_set(&node.self_entry);
            match self.registry.register_agent(node, endpoints) {
                Ok(evicted) => {
                    debug!("domain {domain}: agent {id} registered, evicted {evicted:?}");
                    if let Some(since) = self.vacancy.remove(&domain) {
                        self.metrics.push(
                            MetricsRecord::new(MetricKind::ElectionLatency, now - since, Unit::Ms, now)
                                .label("domain", domain)
                                .label("agent", id),
                        );
                    }
                    self.sync_virtual(net);
                }
                Err(e) => debug!("registration of {id} refused: {e}"),
            }
        }
    }

    fn resolve(&mut self, net: &mut Network, query_id: u64, candidate: Option<AitEntry>, status: QueryStatus) {
        let Some(req) = self.requests.remove(&query_id) else {
            return;
        };
        let now = net.now();
        net.cancel_timer(req.requester, &format!("{QUERY_TIMEOUT_PREFIX}{query_id}"));
        let status = match (status, candidate) {
            (QueryStatus::Found, None) => QueryStatus::NotFound,
            (s, _) => s,
        };
        let remote = candidate.is_some_and(|c| net.domain_of(c.node_id).ok() != net.domain_of(req.requester).ok());
        let allocation = match (req.allocate, candidate) {
            (true, Some(c)) => {
                let result = self.pool.allocate(c.node_id, req.required_mb);
                if result.is_ok() {
                    let remaining = self.pool.remaining(c.node_id).expect("known node");
                    if let Some(n) = self.nodes.get_mut(&c.node_id) {
                        n.set_capacity(remaining);
                    }
                }
                Some(result)
            }
            _ => None,
        };
        let mut record = MetricsRecord::new(MetricKind::QueryResponse, now - req.issued_ms, Unit::Ms, now)
            .label("query_id", query_id)
            .label("requester", req.requester)
            .label("required_mb", req.required_mb)
            .label("status", format!("{status:?}").to_lowercase())
            .label("scope", if remote { "remote" } else { "local" });
        if let Some(c) = candidate {
            record = record.label("candidate", c.node_id);
        }
        if let Some(a) = &allocation {
            record = record.label("allocation", if a.is_ok() { "ok" } else { "refused" });
        }
        self.metrics.push(record);
        self.outcomes.push(QueryOutcome {
            query_id,
            requester: req.requester,
            required_mb: req.required_mb,
            issued_ms: req.issued_ms,
            resolved_ms: now,
            status,
            candidate,
            remote,
            allocation,
        });
    }

    fn finish_answer(&mut self, net: &mut Network, agent: NodeId, answer: Answer) {
        let node = &self.nodes[&agent];
        if let Some(local) = discovery::deliver_answer(node, answer, net) {
            self.resolve(net, local.query_id, local.candidate, QueryStatus::Found);
        }
    }

    fn on_query(&mut self, net: &mut Network, to: NodeId, from: NodeId, query_id: u64, required_mb: f64) {
        let Some(node) = self.nodes.get(&to) else { return };
        if !node.is_member() {
            return;
        }
        let same_domain = net.domain_of(from).ok() == Some(node.domain);
        if same_domain {
            let q = StorageQuery {
                requester: from,
                required_mb,
                query_id,
            };
            let desk = self.desks.entry(to).or_default();
            if let Some(answer) = desk.begin(node, q, net, &self.params) {
                self.finish_answer(net, to, answer);
            }
        } else if let Err(e) = discovery::answer_remote_query(node, from, query_id, required_mb, net) {
            debug!("node {to}: cannot answer query {query_id}: {e}");
        }
    }
}

impl EventHandler for World {
    fn handle(&mut self, net: &mut Network, event: SimEvent) {
        match event.kind {
            EventKind::Deliver { from, to, msg } => {
                let Some(node) = self.nodes.get_mut(&to) else { return };
                if matches!(node.phase, Phase::Offline | Phase::Left) {
                    return;
                }
                match msg.body {
                    Body::Query {
                        query_id,
                        required_mb,
                    } => self.on_query(net, to, from, query_id, required_mb),
                    Body::QueryResp {
                        query_id,
                        candidate,
                    } => {
                        let consumed = self.desks.entry(to).or_default().on_response(query_id, candidate);
                        if !consumed && self.requests.get(&query_id).is_some_and(|r| r.requester == to) {
                            self.resolve(net, query_id, candidate, QueryStatus::Found);
                        }
                    }
                    Body::Data { .. } => {}
                    _ => {
                        let fx = node.on_message(&msg, net, &self.params);
                        self.apply(net, to, fx);
                    }
                }
            }
            EventKind::Timer { owner, tag } => {
                if let Some(id) = tag.strip_prefix(QUERY_TIMEOUT_PREFIX) {
                    let id: u64 = id.parse().expect("timer tag carries a query id");
                    self.resolve(net, id, None, QueryStatus::TimedOut);
                } else if let Some(id) = tag.strip_prefix(QUERY_WINDOW_PREFIX) {
                    let id: u64 = id.parse().expect("timer tag carries a query id");
                    let answer = self.desks.entry(owner).or_default().close(id);
                    if let Some(answer) = answer {
                        if self.nodes[&owner].is_member() {
                            self.finish_answer(net, owner, answer);
                        }
                    }
                } else if let Some(node) = self.nodes.get_mut(&owner) {
                    let fx = node.on_timer(&tag, net, &self.params);
                    self.apply(net, owner, fx);
                }
            }
        }
    }
}

pub struct Simulation {
    net: Network,
    world: World,
    specs: BTreeMap<NodeId, NodeSpec>,
    next_query_id: u64,
}

impl Simulation {
    pub fn new(
        specs: &[NodeSpec],
        intra: LinkConfig,
        inter: LinkConfig,
        params: ProtocolParams,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut topology = Topology::new(intra, inter);
        let mut nodes = BTreeMap::new();
        let mut pool = CapacityPool::new();
        let mut spec_map = BTreeMap::new();
        for spec in specs {
            topology = topology.with_node(spec.id, spec.domain);
            nodes.insert(spec.id, NodeState::new(spec.entry()?, spec.domain));
            pool.add_node(spec.id, spec.capacity_mb);
            spec_map.insert(spec.id, *spec);
        }
        let mut net = Network::new(&topology, seed)?;
        let mut registry = VirtualDomain::new();
        if let Some(fixed) = &params.fixed_agents {
            for (domain, agent) in fixed {
                let entry = nodes.get(agent).ok_or(NetError::UnknownNode(*agent))?.self_entry;
                registry.pin(*domain, entry, ServiceEndpoint::standard_set(&entry));
            }
            net.set_virtual_members(registry.members());
        }
        Ok(Simulation {
            net,
            world: World {
                nodes,
                desks: BTreeMap::new(),
                registry,
                pool,
                params,
                metrics: Vec::new(),
                requests: BTreeMap::new(),
                outcomes: Vec::new(),
                log: Vec::new(),
                join_started: BTreeMap::new(),
                vacancy: BTreeMap::new(),
                announce_mismatches: 0,
            },
            specs: spec_map,
            next_query_id: 1,
        })
    }

    pub fn now(&self) -> f64 {
        self.net.now()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.world.params
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.world.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.world.nodes.values()
    }

    pub fn spec(&self, id: NodeId) -> Option<&NodeSpec> {
        self.specs.get(&id)
    }

    pub fn registry(&self) -> &VirtualDomain {
        &self.world.registry
    }

    pub fn pool(&self) -> &CapacityPool {
        &self.world.pool
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.world.metrics
    }

    pub fn outcomes(&self) -> &[QueryOutcome] {
        &self.world.outcomes
    }

    pub fn membership_log(&self) -> &[MembershipEvent] {
        &self.world.log
    }

    pub fn announce_mismatches(&self) -> usize {
        self.world.announce_mismatches
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.net.trace()
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut NodeState, SimError> {
        self.world.nodes.get_mut(&id).ok_or(SimError::Net(NetError::UnknownNode(id)))
    }

    /// Live (member) nodes of `domain`.
    pub fn live_members(&self, domain: DomainId) -> Vec<NodeId> {
        self.nodes()
            .filter(|n| n.domain == domain && n.is_member())
            .map(|n| n.id())
            .collect()
    }

    pub fn domains(&self) -> BTreeSet<DomainId> {
        self.specs.values().map(|s| s.domain).collect()
    }

    pub fn run_until(&mut self, t: f64) {
        self.net.run_until(t, &mut self.world);
    }

    pub fn run_for(&mut self, dt: f64) {
        let t = self.net.now() + dt;
        self.run_until(t);
    }

    /// Runs to `max_time_ms` (or an empty queue) and abandons any query
    /// still unanswered.
    pub fn finish(&mut self, max_time_ms: f64) {
        self.net.run_until_quiescent(max_time_ms, &mut self.world);
        let open: Vec<u64> = self.world.requests.keys().copied().collect();
        for id in open {
            self.world.resolve(&mut self.net, id, None, QueryStatus::TimedOut);
        }
    }

    pub fn join(&mut self, id: NodeId) -> Result<(), SimError> {
        let now = self.net.now();
        let Simulation { net, world, .. } = self;
        let node = world.nodes.get_mut(&id).ok_or(NetError::UnknownNode(id))?;
        let fx = node.initiate_join(net, &world.params)?;
        let domain = node.domain;
        world.join_started.insert(id, now);
        let vacant = match world.registry.agent_of(domain) {
            None => true,
            Some(a) => !world.nodes[&a].is_member(),
        };
        if vacant {
            world.vacancy.entry(domain).or_insert(now);
        }
        world.apply(net, id, fx);
        Ok(())
    }

    pub fn leave(&mut self, id: NodeId) -> Result<(), SimError> {
        let now = self.net.now();
        let fixed = self.world.params.fixed_agents.is_some();
        let node = self.node_mut(id)?;
        let domain = node.domain;
        let Simulation { net, world, .. } = self;
        let fx = world.nodes.get_mut(&id).expect("checked").initiate_leave(net)?;
        world.desks.remove(&id);
        if fx.stepped_down && !fixed {
            world.registry.deregister(domain, id);
            world.sync_virtual(net);
            world.vacancy.entry(domain).or_insert(now);
        }
        self.abandon_requests_of(id);
        Ok(())
    }

    /// Silently stops a node: no LEAVE, no registry update.
    pub fn crash(&mut self, id: NodeId) -> Result<(), SimError> {
        let now = self.net.now();
        let fixed = self.world.params.fixed_agents.is_some();
        let Simulation { net, world, .. } = self;
        let node = world.nodes.get_mut(&id).ok_or(NetError::UnknownNode(id))?;
        let domain = node.domain;
        let fx = node.crash(net);
        world.desks.remove(&id);
        if fx.stepped_down && !fixed {
            world.vacancy.entry(domain).or_insert(now);
        }
        self.abandon_requests_of(id);
        Ok(())
    }

    fn abandon_requests_of(&mut self, id: NodeId) {
        let mine: Vec<u64> = self
            .world
            .requests
            .iter()
            .filter(|(_, r)| r.requester == id)
            .map(|(q, _)| *q)
            .collect();
        for q in mine {
            self.world.resolve(&mut self.net, q, None, QueryStatus::TimedOut);
        }
    }

    pub fn set_link(&mut self, scope: LinkScope, link: LinkConfig) -> Result<(), SimError> {
        Ok(self.net.set_link(scope, link)?)
    }

    /// Starts a storage query from `requester`. The outcome shows up in
    /// [`Simulation::outcomes`] once resolved.
    pub fn issue_query(&mut self, requester: NodeId, required_mb: f64, allocate: bool) -> Result<u64, SimError> {
        let query_id = self.next_query_id;
        let q = StorageQuery {
            requester,
            required_mb,
            query_id,
        };
        q.validate()?;
        self.next_query_id += 1;
        let now = self.net.now();
        let Simulation { net, world, .. } = self;
        let node = world.nodes.get(&requester).ok_or(NetError::UnknownNode(requester))?;
        world.requests.insert(
            query_id,
            Request {
                requester,
                required_mb,
                issued_ms: now,
                allocate,
            },
        );
        if !node.is_member() || node.agent.is_none() {
            world.resolve(net, query_id, None, QueryStatus::NoAgent);
            return Ok(query_id);
        }
        let agent = node.agent;
        let timeout = world.params.query_timeout_ms;
        net.set_timer(requester, &format!("{QUERY_TIMEOUT_PREFIX}{query_id}"), timeout)?;
        if agent == requester {
            let desk = world.desks.entry(requester).or_default();
            if let Some(answer) = desk.begin(node, q, net, &world.params) {
                world.finish_answer(net, requester, answer);
            }
        } else {
            let msg = Message::new(
                node.self_entry,
                Body::Query {
                    query_id,
                    required_mb,
                },
            );
            net.send_unicast(requester, agent, msg)?;
        }
        Ok(query_id)
    }

    pub fn outcome(&self, query_id: u64) -> Option<&QueryOutcome> {
        self.world.outcomes.iter().find(|o| o.query_id == query_id)
    }

    /// Runs a query to completion. `Ok(None)` means no domain can hold
    /// `required_mb`.
    pub fn find_storage(&mut self, requester: NodeId, required_mb: f64) -> Result<Option<AitEntry>, DiscoveryError> {
        let id = match self.issue_query(requester, required_mb, false) {
            Ok(id) => id,
            Err(SimError::Discovery(e)) => return Err(e),
            Err(_) => return Err(DiscoveryError::UnknownNode(requester)),
        };
        let deadline = self.net.now() + self.world.params.query_timeout_ms;
        while self.world.requests.contains_key(&id) && self.net.now() < deadline {
            let step = (deadline - self.net.now()).min(1.0);
            self.run_for(step);
        }
        if self.world.requests.contains_key(&id) {
            self.run_until(deadline);
        }
        let outcome = self.outcome(id).expect("query resolves by its timeout");
        match outcome.status {
            QueryStatus::Found => Ok(outcome.candidate),
            QueryStatus::NotFound => Ok(None),
            QueryStatus::TimedOut | QueryStatus::NoAgent => Err(DiscoveryError::NoAgent(requester)),
        }
    }

    pub fn allocate(&mut self, target: NodeId, size_mb: f64) -> Result<discovery::Allocation, DiscoveryError> {
        let node = self.world.nodes.get(&target).ok_or(DiscoveryError::UnknownNode(target))?;
        if !node.is_member() {
            return Err(DiscoveryError::UnknownNode(target));
        }
        let alloc = self.world.pool.allocate(target, size_mb)?;
        let remaining = self.world.pool.remaining(target).expect("known node");
        self.world.nodes.get_mut(&target).expect("checked").set_capacity(remaining);
        Ok(alloc)
    }

    pub fn release(&mut self, allocation_id: u64) -> Result<discovery::Allocation, DiscoveryError> {
        let alloc = self.world.pool.release(allocation_id)?;
        let remaining = self.world.pool.remaining(alloc.node).expect("known node");
        if let Some(n) = self.world.nodes.get_mut(&alloc.node) {
            n.set_capacity(remaining);
        }
        Ok(alloc)
    }

    pub fn transfer_file(&mut self, from: NodeId, to: NodeId, size_mb: f64) -> Result<TransferReport, DiscoveryError> {
        let sender = self.world.nodes.get(&from).ok_or(DiscoveryError::UnknownNode(from))?.self_entry;
        let link = self.net.link_between(from, to)?;
        let report = discovery::transfer_file(&mut self.net, &sender, to, size_mb)?;
        let now = self.net.now();
        let labelled = |r: MetricsRecord| {
            r.label("from", from)
                .label("to", to)
                .label("size_mb", size_mb)
                .label("delay_ms", link.delay_ms)
                .label("bandwidth_mbps", link.bandwidth_mbps)
        };
        self.world.metrics.push(labelled(MetricsRecord::new(
            MetricKind::TransferResponse,
            report.response_ms,
            Unit::Ms,
            now,
        )));
        self.world.metrics.push(labelled(MetricsRecord::new(
            MetricKind::Throughput,
            report.achieved_mbps,
            Unit::Mbps,
            now,
        )));
        Ok(report)
    }

    /// Checks every domain with live members: each member's AIT keys equal
    /// the live member set, all members name the same agent, and (under
    /// the max-power policy) that agent is among the most powerful.
    pub fn check_consistency(&self) -> Result<(), String> {
        let params = &self.world.params;
        for n in self.nodes() {
            n.check_invariants(params)?;
            if n.phase == Phase::Joining {
                return Err(format!("node {} is still joining", n.id()));
            }
        }
        for domain in self.domains() {
            let live = self.live_members(domain);
            let Some(first) = live.first() else { continue };
            let expected: BTreeSet<NodeId> = live.iter().copied().collect();
            let agent = self.world.nodes[first].agent;
            for id in &live {
                let n = &self.world.nodes[id];
                let keys: BTreeSet<NodeId> = n.ait.ids().collect();
                if keys != expected {
                    return Err(format!(
                        "domain {domain}: node {id} holds AIT {keys:?}, live members are {expected:?}"
                    ));
                }
                if n.agent != agent {
                    return Err(format!(
                        "domain {domain}: node {id} follows agent {}, node {first} follows {agent}",
                        n.agent
                    ));
                }
            }
            if params.fixed_agents.is_none() && params.policy == ElectionPolicy::MaxPower {
                let best = election::argmax_power(&self.world.nodes[first].ait);
                if !best.contains(&agent) {
                    return Err(format!("domain {domain}: agent {agent} is not among {best:?}"));
                }
            }
        }
        Ok(())
    }
}
