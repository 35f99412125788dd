//! Upper tier: the virtual domain of agents, its service endpoint
//! directory, cross-domain storage discovery and capacity accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membership::{NodeState, ProtocolParams};
use crate::model::{AitEntry, Body, DomainId, Message, NodeId};
use crate::simnet::{Group, LinkConfig, NetError, Network};

pub const SERVICE_PORT: u16 = 8080;
pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiscoveryError {
    #[error("node {0} is not the computed agent of its domain")]
    NotAnAgent(NodeId),
    #[error("requester {0} has no live agent")]
    NoAgent(NodeId),
    #[error("node {node} has {available} MB free, {requested} MB requested")]
    InsufficientCapacity {
        node: NodeId,
        requested: f64,
        available: f64,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("allocation {0} already released")]
    AlreadyReleased(u64),
    #[error("unknown allocation {0}")]
    UnknownAllocation(u64),
    #[error("invalid size {0} MB")]
    InvalidSize(f64),
    #[error("malformed endpoint url {0:?}")]
    MalformedUrl(String),
}

impl From<NetError> for DiscoveryError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::UnknownNode(n) => DiscoveryError::UnknownNode(n),
            other => DiscoveryError::MalformedUrl(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Storservice,
    Mgtservice,
    Secservice,
    Comservice,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 4] = [
        ServiceKind::Storservice,
        ServiceKind::Mgtservice,
        ServiceKind::Secservice,
        ServiceKind::Comservice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Storservice => "storservice",
            ServiceKind::Mgtservice => "mgtservice",
            ServiceKind::Secservice => "secservice",
            ServiceKind::Comservice => "comservice",
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceKind {
    type Err = DiscoveryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServiceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DiscoveryError::MalformedUrl(s.to_string()))
    }
}

/// A service published by an agent, e.g.
/// `http://192.168.16.10:8080/srmd/services/storservice`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub agent: NodeId,
    pub kind: ServiceKind,
    pub url: String,
}

impl ServiceEndpoint {
    pub fn new(agent: &AitEntry, kind: ServiceKind) -> Self {
        ServiceEndpoint {
            agent: agent.node_id,
            kind,
            url: format!("http://{}:{}/srmd/services/{}", agent.ip, SERVICE_PORT, kind),
        }
    }

    /// The four standard endpoints of an agent.
    pub fn standard_set(agent: &AitEntry) -> Vec<ServiceEndpoint> {
        ServiceKind::ALL.iter().map(|k| ServiceEndpoint::new(agent, *k)).collect()
    }
}

/// Splits an endpoint url back into `(ip, port, kind)`.
pub fn parse_endpoint_url(url: &str) -> Result<(Ipv4Addr, u16, ServiceKind), DiscoveryError> {
    let bad = || DiscoveryError::MalformedUrl(url.to_string());
    let rest = url.strip_prefix("http://").ok_or_else(bad)?;
    let (authority, path) = rest.split_once('/').ok_or_else(bad)?;
    let (host, port) = authority.split_once(':').ok_or_else(bad)?;
    let ip: Ipv4Addr = host.parse().map_err(|_| bad())?;
    let port: u16 = port.parse().map_err(|_| bad())?;
    let kind = path.strip_prefix("srmd/services/").ok_or_else(bad)?.parse()?;
    Ok((ip, port, kind))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredAgent {
    pub entry: AitEntry,
    pub endpoints: Vec<ServiceEndpoint>,
}

/// Registry of the agents forming the virtual domain, one per physical
/// domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VirtualDomain {
    agents: BTreeMap<DomainId, RegisteredAgent>,
}

impl VirtualDomain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `claimant` as its domain's agent, replacing any earlier
    /// registrant of that domain. Returns the evicted agent, if any.
    pub fn register_agent(
        &mut self,
        claimant: &NodeState,
        endpoints: Vec<ServiceEndpoint>,
    ) -> Result<Option<NodeId>, DiscoveryError> {
        if !claimant.is_agent() {
            return Err(DiscoveryError::NotAnAgent(claimant.id()));
        }
        if endpoints
            .iter()
            .any(|e| e.agent != claimant.id() || parse_endpoint_url(&e.url).map(|(ip, ..)| ip) != Ok(claimant.self_entry.ip))
        {
            return Err(DiscoveryError::MalformedUrl(format!(
                "endpoint does not belong to agent {}",
                claimant.id()
            )));
        }
        Ok(self.pin(claimant.domain, claimant.self_entry, endpoints))
    }

    /// Installs an agent without checking agency (administratively
    /// configured agents).
    pub fn pin(&mut self, domain: DomainId, entry: AitEntry, endpoints: Vec<ServiceEndpoint>) -> Option<NodeId> {
        self.agents
            .insert(domain, RegisteredAgent { entry, endpoints })
            .map(|old| old.entry.node_id)
            .filter(|old| *old != entry.node_id)
    }

    /// Removes `agent` if it is the current registrant of `domain`.
    pub fn deregister(&mut self, domain: DomainId, agent: NodeId) -> bool {
        if self.agent_of(domain) == Some(agent) {
            self.agents.remove(&domain);
            true
        } else {
            false
        }
    }

    pub fn agent_of(&self, domain: DomainId) -> Option<NodeId> {
        self.agents.get(&domain).map(|a| a.entry.node_id)
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.agents.values().map(|a| a.entry.node_id)
    }

    pub fn domains(&self) -> impl Iterator<Item = (DomainId, &RegisteredAgent)> {
        self.agents.iter().map(|(d, a)| (*d, a))
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Every endpoint of `kind`, ordered by domain.
    pub fn lookup_service(&self, kind: ServiceKind) -> Vec<ServiceEndpoint> {
        self.agents
            .values()
            .flat_map(|a| a.endpoints.iter().filter(|e| e.kind == kind).cloned())
            .collect()
    }
}

/// A storage request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageQuery {
    pub requester: NodeId,
    pub required_mb: f64,
    pub query_id: u64,
}

impl StorageQuery {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if !(self.required_mb.is_finite() && self.required_mb > 0.0) {
            return Err(DiscoveryError::InvalidSize(self.required_mb));
        }
        Ok(())
    }
}

fn better(a: &AitEntry, b: &AitEntry) -> bool {
    a.storage_capacity_mb > b.storage_capacity_mb
        || (a.storage_capacity_mb == b.storage_capacity_mb && a.node_id < b.node_id)
}

/// Among entries with at least `required_mb` free, the one with the most
/// free capacity; ties go to the lowest node id.
pub fn best_fit<'a, I>(entries: I, required_mb: f64) -> Option<AitEntry>
where
    I: IntoIterator<Item = &'a AitEntry>,
{
    entries
        .into_iter()
        .filter(|e| e.storage_capacity_mb >= required_mb)
        .fold(None, |best: Option<AitEntry>, e| match best {
            Some(b) if !better(e, &b) => Some(b),
            _ => Some(*e),
        })
}

/// Outcome of a query as seen by the node that resolves it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Answer {
    pub requester: NodeId,
    pub query_id: u64,
    pub candidate: Option<AitEntry>,
    /// Whether the candidate came from another domain.
    pub remote: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Fanout {
    requester: NodeId,
    best: Option<AitEntry>,
}

pub fn fanout_timer_tag(query_id: u64) -> String {
    format!("query-window:{query_id}")
}

/// Agent-side bookkeeping of queries forwarded to the virtual domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryDesk {
    pending: BTreeMap<u64, Fanout>,
}

impl QueryDesk {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_pending(&self, query_id: u64) -> bool {
        self.pending.contains_key(&query_id)
    }

    /// Handles a storage request reaching `agent` from its own domain.
    /// A local candidate answers immediately; otherwise the query goes to
    /// the virtual group and `None` is returned until the window closes.
    pub fn begin(
        &mut self,
        agent: &NodeState,
        query: StorageQuery,
        net: &mut Network,
        params: &ProtocolParams,
    ) -> Option<Answer> {
        if let Some(candidate) = best_fit(agent.ait.entries(), query.required_mb) {
            return Some(Answer {
                requester: query.requester,
                query_id: query.query_id,
                candidate: Some(candidate),
                remote: false,
            });
        }
        let peers = net.virtual_members().iter().any(|m| *m != agent.id());
        if !peers {
            return Some(Answer {
                requester: query.requester,
                query_id: query.query_id,
                candidate: None,
                remote: false,
            });
        }
        let msg = Message::new(
            agent.self_entry,
            Body::Query {
                query_id: query.query_id,
                required_mb: query.required_mb,
            },
        );
        net.send_multicast(agent.id(), Group::Virtual, msg)
            .expect("agent is part of the topology");
        net.set_timer(agent.id(), &fanout_timer_tag(query.query_id), params.response_window_ms)
            .expect("agent is part of the topology");
        self.pending.insert(
            query.query_id,
            Fanout {
                requester: query.requester,
                best: None,
            },
        );
        None
    }

    /// Folds a remote agent's answer into a pending query.
    pub fn on_response(&mut self, query_id: u64, candidate: Option<AitEntry>) -> bool {
        let Some(f) = self.pending.get_mut(&query_id) else {
            return false;
        };
        if let Some(c) = candidate {
            if f.best.as_ref().is_none_or(|b| better(&c, b)) {
                f.best = Some(c);
            }
        }
        true
    }

    /// Closes the response window of `query_id`.
    pub fn close(&mut self, query_id: u64) -> Option<Answer> {
        self.pending.remove(&query_id).map(|f| Answer {
            requester: f.requester,
            query_id,
            candidate: f.best,
            remote: f.best.is_some(),
        })
    }
}

/// A remote agent's reply to a virtual-domain QUERY.
pub fn answer_remote_query(
    responder: &NodeState,
    querying_agent: NodeId,
    query_id: u64,
    required_mb: f64,
    net: &mut Network,
) -> Result<(), NetError> {
    let candidate = best_fit(responder.ait.entries(), required_mb);
    let msg = Message::new(
        responder.self_entry,
        Body::QueryResp {
            query_id,
            candidate,
        },
    );
    net.send_unicast(responder.id(), querying_agent, msg)
}

/// Sends `answer` back to its requester, or hands it back when the agent
/// is the requester itself.
pub fn deliver_answer(agent: &NodeState, answer: Answer, net: &mut Network) -> Option<Answer> {
    if answer.requester == agent.id() {
        return Some(answer);
    }
    let msg = Message::new(
        agent.self_entry,
        Body::QueryResp {
            query_id: answer.query_id,
            candidate: answer.candidate,
        },
    );
    net.send_unicast(agent.id(), answer.requester, msg)
        .expect("requester is part of the topology");
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub allocation_id: u64,
    pub node: NodeId,
    pub size_mb: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Capacity {
    initial: f64,
    remaining: f64,
}

/// Authoritative remaining-capacity ledger of every node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CapacityPool {
    nodes: BTreeMap<NodeId, Capacity>,
    allocations: BTreeMap<u64, Allocation>,
    next_id: u64,
}

impl CapacityPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: NodeId, capacity_mb: f64) {
        self.nodes.insert(
            node,
            Capacity {
                initial: capacity_mb,
                remaining: capacity_mb,
            },
        );
    }

    pub fn remaining(&self, node: NodeId) -> Option<f64> {
        self.nodes.get(&node).map(|c| c.remaining)
    }

    pub fn initial(&self, node: NodeId) -> Option<f64> {
        self.nodes.get(&node).map(|c| c.initial)
    }

    pub fn allocate(&mut self, target: NodeId, size_mb: f64) -> Result<Allocation, DiscoveryError> {
        if !(size_mb.is_finite() && size_mb > 0.0) {
            return Err(DiscoveryError::InvalidSize(size_mb));
        }
        let cap = self
            .nodes
            .get_mut(&target)
            .ok_or(DiscoveryError::UnknownNode(target))?;
        if cap.remaining < size_mb {
            return Err(DiscoveryError::InsufficientCapacity {
                node: target,
                requested: size_mb,
                available: cap.remaining,
            });
        }
        cap.remaining -= size_mb;
        let alloc = Allocation {
            allocation_id: self.next_id,
            node: target,
            size_mb,
            active: true,
        };
        self.next_id += 1;
        self.allocations.insert(alloc.allocation_id, alloc);
        Ok(alloc)
    }

    /// Returns the released allocation, now inactive.
    pub fn release(&mut self, allocation_id: u64) -> Result<Allocation, DiscoveryError> {
        let alloc = self
            .allocations
            .get_mut(&allocation_id)
            .ok_or(DiscoveryError::UnknownAllocation(allocation_id))?;
        if !alloc.active {
            return Err(DiscoveryError::AlreadyReleased(allocation_id));
        }
        alloc.active = false;
        let cap = self.nodes.get_mut(&alloc.node).expect("allocated node is known");
        cap.remaining += alloc.size_mb;
        Ok(*alloc)
    }

    pub fn active_allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values().filter(|a| a.active)
    }
}

/// Timing of a bulk transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferReport {
    pub size_mb: f64,
    pub response_ms: f64,
    pub achieved_mbps: f64,
}

impl TransferReport {
    pub fn new(size_mb: f64, response_ms: f64) -> Self {
        let megabits = size_mb * BYTES_PER_MB * 8.0 / 1e6;
        TransferReport {
            size_mb,
            response_ms,
            achieved_mbps: megabits / (response_ms / 1000.0),
        }
    }
}

/// Closed-form response time of a `size_mb` transfer over `link`.
pub fn transfer_time_ms(link: &LinkConfig, size_mb: f64) -> f64 {
    link.latency_ms(size_mb * BYTES_PER_MB)
}

/// Puts a DATA message of `size_mb` on the wire and reports the latency
/// the network scheduled for it.
pub fn transfer_file(
    net: &mut Network,
    from: &AitEntry,
    to: NodeId,
    size_mb: f64,
) -> Result<TransferReport, DiscoveryError> {
    if !(size_mb.is_finite() && size_mb > 0.0) {
        return Err(DiscoveryError::InvalidSize(size_mb));
    }
    let msg = Message::new(*from, Body::Data { size_mb });
    let latency = net.send_bulk(from.node_id, to, msg, size_mb * BYTES_PER_MB)?;
    Ok(TransferReport::new(size_mb, latency))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::Topology;
    use proptest::prelude::*;

    fn entry(id: u32, cap: f64) -> AitEntry {
        AitEntry::new(NodeId(id), Ipv4Addr::new(192, 168, 16, id as u8), cap, 2800.0).unwrap()
    }

    fn agent_state(id: u32, domain: u16) -> NodeState {
        let mut s = NodeState::new(entry(id, 100.0), DomainId(domain));
        s.phase = crate::membership::Phase::Member;
        s.ait.upsert(s.self_entry);
        s.agent = s.id();
        s
    }

    #[test]
    fn endpoint_url_format() {
        let e = entry(10, 1.0);
        let ep = ServiceEndpoint::new(&e, ServiceKind::Storservice);
        assert_eq!(ep.url, "http://192.168.16.10:8080/srmd/services/storservice");
        assert_eq!(
            parse_endpoint_url(&ep.url).unwrap(),
            (Ipv4Addr::new(192, 168, 16, 10), 8080, ServiceKind::Storservice)
        );
        for bad in [
            "https://1.2.3.4:8080/srmd/services/storservice",
            "http://1.2.3.4/srmd/services/storservice",
            "http://1.2.3.4:8080/srmd/services/nope",
            "http://host:8080/srmd/services/storservice",
        ] {
            assert!(parse_endpoint_url(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn registry_replaces_per_domain() {
        let mut vd = VirtualDomain::new();
        let a = agent_state(1, 1);
        let b = agent_state(2, 2);
        vd.register_agent(&a, ServiceEndpoint::standard_set(&a.self_entry)).unwrap();
        vd.register_agent(&b, ServiceEndpoint::standard_set(&b.self_entry)).unwrap();
        assert_eq!(vd.len(), 2);

        let a2 = agent_state(3, 1);
        let evicted = vd.register_agent(&a2, ServiceEndpoint::standard_set(&a2.self_entry)).unwrap();
        assert_eq!(evicted, Some(NodeId(1)));
        assert_eq!(vd.len(), 2);
        assert_eq!(vd.agent_of(DomainId(1)), Some(NodeId(3)));

        let mut follower = agent_state(4, 1);
        follower.agent = NodeId(3);
        follower.ait.upsert(entry(3, 1.0));
        assert_eq!(
            vd.register_agent(&follower, vec![]),
            Err(DiscoveryError::NotAnAgent(NodeId(4)))
        );
        let mut offline = agent_state(5, 3);
        offline.phase = crate::membership::Phase::Offline;
        assert!(vd.register_agent(&offline, vec![]).is_err());
    }

    #[test]
    fn lookup_by_kind_in_domain_order() {
        let mut vd = VirtualDomain::new();
        for (id, d) in [(20, 2), (10, 1)] {
            let s = agent_state(id, d);
            vd.register_agent(&s, ServiceEndpoint::standard_set(&s.self_entry)).unwrap();
        }
        let stor = vd.lookup_service(ServiceKind::Storservice);
        assert_eq!(stor.len(), 2);
        assert_eq!(stor[0].agent, NodeId(10));
        assert_eq!(stor[1].url, "http://192.168.16.20:8080/srmd/services/storservice");
        assert!(VirtualDomain::new().lookup_service(ServiceKind::Secservice).is_empty());

        let mut only_mgt = VirtualDomain::new();
        let s = agent_state(7, 1);
        only_mgt
            .register_agent(&s, vec![ServiceEndpoint::new(&s.self_entry, ServiceKind::Mgtservice)])
            .unwrap();
        assert!(only_mgt.lookup_service(ServiceKind::Storservice).is_empty());
        assert!(vd.deregister(DomainId(1), NodeId(10)));
        assert!(!vd.deregister(DomainId(2), NodeId(10)));
    }

    #[test]
    fn best_fit_prefers_largest_then_lowest_id() {
        let entries = [entry(3, 500.0), entry(1, 200.0), entry(2, 500.0)];
        assert_eq!(best_fit(&entries, 100.0).unwrap().node_id, NodeId(2));
        assert_eq!(best_fit(&entries, 500.0).unwrap().node_id, NodeId(2));
        assert!(best_fit(&entries, 500.1).is_none());
        assert!(best_fit(&[], 1.0).is_none());
    }

    #[test]
    fn desk_prefers_local_then_fans_out() {
        let topo = Topology::new(LinkConfig::new(1.0, 0.0, 100.0).unwrap(), LinkConfig::new(20.0, 0.0, 100.0).unwrap())
            .with_node(NodeId(1), DomainId(1))
            .with_node(NodeId(2), DomainId(2));
        let mut net = Network::new(&topo, 0).unwrap();
        let params = ProtocolParams::for_links(&net.link(crate::simnet::LinkScope::Intra), &net.link(crate::simnet::LinkScope::Inter));
        let a = agent_state(1, 1);
        let mut desk = QueryDesk::new();
        let q = StorageQuery { requester: NodeId(1), required_mb: 50.0, query_id: 1 };
        let ans = desk.begin(&a, q, &mut net, &params).unwrap();
        assert_eq!(ans.candidate.unwrap().node_id, NodeId(1));
        assert!(!ans.remote);
        assert!(net.trace().is_empty());

        // Nothing local and no other agents: immediate miss.
        let q = StorageQuery { requester: NodeId(1), required_mb: 500.0, query_id: 2 };
        assert_eq!(desk.begin(&a, q, &mut net, &params).unwrap().candidate, None);

        net.set_virtual_members([NodeId(1), NodeId(2)]);
        let q = StorageQuery { requester: NodeId(1), required_mb: 500.0, query_id: 3 };
        assert!(desk.begin(&a, q, &mut net, &params).is_none());
        assert!(desk.is_pending(3));
        assert!(desk.on_response(3, Some(entry(2, 800.0))));
        assert!(desk.on_response(3, None));
        assert!(!desk.on_response(99, None));
        let ans = desk.close(3).unwrap();
        assert_eq!(ans.candidate.unwrap().node_id, NodeId(2));
        assert!(ans.remote);
        assert!(desk.close(3).is_none());
    }

    #[test]
    fn allocation_arithmetic() {
        let mut pool = CapacityPool::new();
        pool.add_node(NodeId(1), 1024.0);
        let a = pool.allocate(NodeId(1), 512.0).unwrap();
        assert_eq!(pool.remaining(NodeId(1)), Some(512.0));
        let b = pool.allocate(NodeId(1), 512.0).unwrap();
        assert_eq!(pool.remaining(NodeId(1)), Some(0.0));
        assert!(matches!(
            pool.allocate(NodeId(1), 1e-9),
            Err(DiscoveryError::InsufficientCapacity { .. })
        ));
        assert_eq!(pool.remaining(NodeId(1)), Some(0.0));
        pool.release(a.allocation_id).unwrap();
        let released = pool.release(b.allocation_id).unwrap();
        assert!(!released.active);
        assert_eq!(pool.remaining(NodeId(1)), Some(1024.0));
        assert_eq!(
            pool.release(a.allocation_id),
            Err(DiscoveryError::AlreadyReleased(a.allocation_id))
        );
        assert_eq!(pool.allocate(NodeId(9), 1.0), Err(DiscoveryError::UnknownNode(NodeId(9))));
        assert_eq!(pool.release(77), Err(DiscoveryError::UnknownAllocation(77)));
        assert!(matches!(pool.allocate(NodeId(1), 0.0), Err(DiscoveryError::InvalidSize(_))));
    }

    #[test]
    fn transfer_time_arithmetic() {
        let link = LinkConfig::new(0.0, 0.0, 100.0).unwrap();
        // 100 MB = 838,860,800 bits at 1e8 bit/s.
        let t = transfer_time_ms(&link, 100.0);
        assert!((t - 8388.608).abs() < 1e-9);
        let r = TransferReport::new(100.0, t);
        assert!((r.achieved_mbps - 100.0).abs() < 1e-9);

        let slow = LinkConfig::new(50.0, 0.0, 100.0).unwrap();
        assert!((transfer_time_ms(&slow, 100.0) - t - 50.0).abs() < 1e-9);
        assert!(TransferReport::new(100.0, t + 50.0).achieved_mbps < r.achieved_mbps);
    }

    proptest! {
        #[test]
        fn capacity_is_conserved(
            caps in prop::collection::vec(1.0f64..1e4, 1..5),
            ops in prop::collection::vec((any::<bool>(), 0usize..5, 0.01f64..2e3, 0usize..64), 0..80),
        ) {
            let mut pool = CapacityPool::new();
            for (i, c) in caps.iter().enumerate() {
                pool.add_node(NodeId(i as u32 + 1), *c);
            }
            let mut live: Vec<Allocation> = Vec::new();
            for (alloc, node, size, pick) in ops {
                let node = NodeId((node % caps.len()) as u32 + 1);
                if alloc || live.is_empty() {
                    if let Ok(a) = pool.allocate(node, size) {
                        live.push(a);
                    }
                } else {
                    let a = live.remove(pick % live.len());
                    pool.release(a.allocation_id).unwrap();
                }
                for (i, c) in caps.iter().enumerate() {
                    let id = NodeId(i as u32 + 1);
                    let held: f64 = live.iter().filter(|a| a.node == id).map(|a| a.size_mb).sum();
                    let remaining = pool.remaining(id).unwrap();
                    prop_assert!(remaining >= -1e-9);
                    prop_assert!((remaining + held - c).abs() <= 1e-9 * c.max(1.0));
                }
            }
        }
    }
}
