//! Deterministic discrete-event network.
//!
//! A [`Network`] owns the virtual clock, the pending event queue, per-node
//! timers and a seeded random source used only for drop decisions. Nodes
//! are addressed by [`NodeId`]; each belongs to exactly one physical domain.
//! Multicast reaches the subscribed members of a domain group, or the
//! current members of the virtual (inter-agent) group.
//!
//! Delivery latency for a message of `n` bytes over a link is
//! `delay_ms + n * 8 / (bandwidth_mbps * 1000)` milliseconds.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DomainId, Message, NodeId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid link config: {0}")]
    InvalidLink(String),
}

/// Link model shared by every pair of nodes in a scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub delay_ms: f64,
    pub drop_probability: f64,
    pub bandwidth_mbps: f64,
}

impl LinkConfig {
    pub fn new(delay_ms: f64, drop_probability: f64, bandwidth_mbps: f64) -> Result<Self, NetError> {
        let link = LinkConfig {
            delay_ms,
            drop_probability,
            bandwidth_mbps,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.delay_ms.is_finite() && self.delay_ms >= 0.0) {
            return Err(NetError::InvalidLink(format!("delay_ms {} < 0", self.delay_ms)));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(NetError::InvalidLink(format!(
                "drop_probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            return Err(NetError::InvalidLink(format!(
                "bandwidth_mbps {} must be > 0",
                self.bandwidth_mbps
            )));
        }
        Ok(())
    }

    /// Serialization time of `bytes` on this link, in ms.
    pub fn serialization_ms(&self, bytes: f64) -> f64 {
        bytes * 8.0 / (self.bandwidth_mbps * 1000.0)
    }

    /// One-way latency of a `bytes`-sized message, in ms.
    pub fn latency_ms(&self, bytes: f64) -> f64 {
        self.delay_ms + self.serialization_ms(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkScope {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyNode {
    pub id: NodeId,
    pub domain: Option<DomainId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<TopologyNode>,
    pub intra_domain_link: LinkConfig,
    pub inter_domain_link: LinkConfig,
}

impl Topology {
    pub fn new(intra_domain_link: LinkConfig, inter_domain_link: LinkConfig) -> Self {
        Topology {
            nodes: Vec::new(),
            intra_domain_link,
            inter_domain_link,
        }
    }

    pub fn with_node(mut self, id: NodeId, domain: DomainId) -> Self {
        self.nodes.push(TopologyNode {
            id,
            domain: Some(domain),
        });
        self
    }

    fn domain_map(&self) -> Result<BTreeMap<NodeId, DomainId>, NetError> {
        self.intra_domain_link.validate()?;
        self.inter_domain_link.validate()?;
        let mut map = BTreeMap::new();
        for n in &self.nodes {
            if n.id.is_none() {
                return Err(NetError::InvalidTopology("node id 0 is reserved".into()));
            }
            let domain = n
                .domain
                .ok_or_else(|| NetError::InvalidTopology(format!("node {} has no domain", n.id)))?;
            if map.insert(n.id, domain).is_some() {
                return Err(NetError::InvalidTopology(format!("duplicate node {}", n.id)));
            }
        }
        Ok(map)
    }
}

/// Multicast group address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Domain(DomainId),
    /// The inter-domain group of current domain agents.
    Virtual,
}

/// Destination column of a trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Node(NodeId),
    Group(Group),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node(id) => write!(f, "{id}"),
            Target::Group(Group::Domain(d)) => write!(f, "domain:{d}"),
            Target::Group(Group::Virtual) => f.write_str("virtual"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    Timer {
        owner: NodeId,
        tag: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: EventKind,
}

struct Queued(SimEvent);

impl Queued {
    fn key(&self) -> (f64, u64) {
        (self.0.time_ms, self.0.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, sa) = self.key();
        let (tb, sb) = other.key();
        ta.total_cmp(&tb).then(sa.cmp(&sb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    /// A unicast (or one multicast fan-out leg) was put on the wire.
    Send,
    /// A multicast was issued; legs follow as `Send`/`Drop` records.
    Multicast,
    Drop,
    Deliver,
    Timer,
    /// The run stopped at its time limit with events still pending.
    Horizon,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Send => "send",
            TraceKind::Multicast => "multicast",
            TraceKind::Drop => "drop",
            TraceKind::Deliver => "deliver",
            TraceKind::Timer => "timer",
            TraceKind::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: TraceKind,
    pub from: NodeId,
    pub to: Target,
    /// Message kind, or the timer tag for timer records.
    pub msg_kind: String,
    pub size_bytes: u64,
}

pub const TRACE_CSV_HEADER: &str = "time_ms,seq,kind,from,to,msg_kind,size_bytes";

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.time_ms,
            self.seq,
            self.kind.as_str(),
            self.from,
            self.to,
            self.msg_kind,
            self.size_bytes
        )
    }
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace is ascii")
}

/// Receives events popped from the queue.
pub trait EventHandler {
    fn handle(&mut self, net: &mut Network, event: SimEvent);
}

impl<F: FnMut(&mut Network, SimEvent)> EventHandler for F {
    fn handle(&mut self, net: &mut Network, event: SimEvent) {
        self(net, event)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// Trace records appended during this run.
    pub records: Vec<TraceRecord>,
    pub events_processed: usize,
    pub hit_time_limit: bool,
}

pub struct Network {
    domains: BTreeMap<NodeId, DomainId>,
    intra: LinkConfig,
    inter: LinkConfig,
    clock_ms: f64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    timers: BTreeMap<(NodeId, String), u64>,
    rng: ChaCha8Rng,
    subscribed: BTreeSet<NodeId>,
    virtual_members: BTreeSet<NodeId>,
    trace: Vec<TraceRecord>,
}

impl Network {
    pub fn new(topology: &Topology, seed: u64) -> Result<Self, NetError> {
        let domains = topology.domain_map()?;
        Ok(Network {
            domains,
            intra: topology.intra_domain_link,
            inter: topology.inter_domain_link,
            clock_ms: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            timers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            subscribed: BTreeSet::new(),
            virtual_members: BTreeSet::new(),
            trace: Vec::new(),
        })
    }

    pub fn now(&self) -> f64 {
        self.clock_ms
    }

    pub fn domain_of(&self, node: NodeId) -> Result<DomainId, NetError> {
        self.domains.get(&node).copied().ok_or(NetError::UnknownNode(node))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, DomainId)> + '_ {
        self.domains.iter().map(|(n, d)| (*n, *d))
    }

    pub fn link(&self, scope: LinkScope) -> LinkConfig {
        match scope {
            LinkScope::Intra => self.intra,
            LinkScope::Inter => self.inter,
        }
    }

    pub fn set_link(&mut self, scope: LinkScope, link: LinkConfig) -> Result<(), NetError> {
        link.validate()?;
        match scope {
            LinkScope::Intra => self.intra = link,
            LinkScope::Inter => self.inter = link,
        }
        Ok(())
    }

    /// Link governing traffic between two nodes.
    pub fn link_between(&self, a: NodeId, b: NodeId) -> Result<LinkConfig, NetError> {
        let scope = if self.domain_of(a)? == self.domain_of(b)? {
            LinkScope::Intra
        } else {
            LinkScope::Inter
        };
        Ok(self.link(scope))
    }

    fn group_link(&self, group: Group) -> LinkConfig {
        match group {
            Group::Domain(_) => self.intra,
            Group::Virtual => self.inter,
        }
    }

    /// Joins `node` to its domain's multicast group.
    pub fn subscribe(&mut self, node: NodeId) -> Result<(), NetError> {
        self.domain_of(node)?;
        self.subscribed.insert(node);
        Ok(())
    }

    pub fn unsubscribe(&mut self, node: NodeId) {
        self.subscribed.remove(&node);
    }

    pub fn is_subscribed(&self, node: NodeId) -> bool {
        self.subscribed.contains(&node)
    }

    pub fn set_virtual_members<I: IntoIterator<Item = NodeId>>(&mut self, members: I) {
        self.virtual_members = members.into_iter().collect();
    }

    pub fn virtual_members(&self) -> &BTreeSet<NodeId> {
        &self.virtual_members
    }

    /// Current members of `group`, ascending.
    pub fn group_members(&self, group: Group) -> Vec<NodeId> {
        match group {
            Group::Domain(d) => self
                .subscribed
                .iter()
                .copied()
                .filter(|n| self.domains.get(n) == Some(&d))
                .collect(),
            Group::Virtual => self.virtual_members.iter().copied().collect(),
        }
    }

    fn alloc_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn record(&mut self, seq: u64, kind: TraceKind, from: NodeId, to: Target, msg_kind: String, size: u64) {
        self.trace.push(TraceRecord {
            time_ms: self.clock_ms,
            seq,
            kind,
            from,
            to,
            msg_kind,
            size_bytes: size,
        });
    }

    fn attempt(&mut self, from: NodeId, to: NodeId, msg: Message, link: LinkConfig) {
        let size = msg.encoded_len();
        let seq = self.alloc_seq();
        let draw: f64 = self.rng.gen();
        let kind = msg.kind().as_str().to_string();
        if draw < link.drop_probability {
            self.record(seq, TraceKind::Drop, from, Target::Node(to), kind, size as u64);
            return;
        }
        self.record(seq, TraceKind::Send, from, Target::Node(to), kind, size as u64);
        let at = self.clock_ms + link.latency_ms(size as f64);
        self.queue.push(Reverse(Queued(SimEvent {
            time_ms: at,
            seq,
            kind: EventKind::Deliver { from, to, msg },
        })));
    }

    pub fn send_unicast(&mut self, from: NodeId, to: NodeId, msg: Message) -> Result<(), NetError> {
        let link = self.link_between(from, to)?;
        self.attempt(from, to, msg, link);
        Ok(())
    }

    /// One independent delivery attempt per group member other than the
    /// sender. Returns the number of legs attempted.
    pub fn send_multicast(&mut self, from: NodeId, group: Group, msg: Message) -> Result<usize, NetError> {
        self.domain_of(from)?;
        let link = self.group_link(group);
        let seq = self.alloc_seq();
        self.record(
            seq,
            TraceKind::Multicast,
            from,
            Target::Group(group),
            msg.kind().as_str().to_string(),
            msg.encoded_len() as u64,
        );
        let members: Vec<NodeId> = self
            .group_members(group)
            .into_iter()
            .filter(|&m| m != from)
            .collect();
        for &to in &members {
            self.attempt(from, to, msg, link);
        }
        Ok(members.len())
    }

    /// Reliable bulk transfer: `msg` travels with the latency of a
    /// `payload_bytes`-sized body on the governing link and is never
    /// dropped. Returns the scheduled latency in ms.
    pub fn send_bulk(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: Message,
        payload_bytes: f64,
    ) -> Result<f64, NetError> {
        let link = self.link_between(from, to)?;
        let latency = link.latency_ms(payload_bytes);
        let seq = self.alloc_seq();
        self.record(
            seq,
            TraceKind::Send,
            from,
            Target::Node(to),
            msg.kind().as_str().to_string(),
            payload_bytes.round() as u64,
        );
        self.queue.push(Reverse(Queued(SimEvent {
            time_ms: self.clock_ms + latency,
            seq,
            kind: EventKind::Deliver { from, to, msg },
        })));
        Ok(latency)
    }

    /// Arms (or re-arms, replacing) the `(owner, tag)` timer.
    pub fn set_timer(&mut self, owner: NodeId, tag: &str, fire_in_ms: f64) -> Result<(), NetError> {
        self.domain_of(owner)?;
        let seq = self.alloc_seq();
        self.timers.insert((owner, tag.to_string()), seq);
        self.queue.push(Reverse(Queued(SimEvent {
            time_ms: self.clock_ms + fire_in_ms.max(0.0),
            seq,
            kind: EventKind::Timer {
                owner,
                tag: tag.to_string(),
            },
        })));
        Ok(())
    }

    pub fn cancel_timer(&mut self, owner: NodeId, tag: &str) {
        self.timers.remove(&(owner, tag.to_string()));
    }

    pub fn cancel_timers_of(&mut self, owner: NodeId) {
        self.timers.retain(|(o, _), _| *o != owner);
    }

    pub fn timer_pending(&self, owner: NodeId, tag: &str) -> bool {
        self.timers.contains_key(&(owner, tag.to_string()))
    }

    fn is_live(&self, ev: &SimEvent) -> bool {
        match &ev.kind {
            EventKind::Deliver { .. } => true,
            EventKind::Timer { owner, tag } => {
                self.timers.get(&(*owner, tag.clone())) == Some(&ev.seq)
            }
        }
    }

    /// Number of pending events, excluding superseded timers.
    pub fn pending_events(&self) -> usize {
        self.queue.iter().filter(|q| self.is_live(&q.0 .0)).count()
    }

    /// Pops the next live event due at or before `until`, advancing the
    /// clock and tracing it.
    pub fn pop_due(&mut self, until: f64) -> Option<SimEvent> {
        loop {
            let top = self.queue.peek()?;
            if top.0 .0.time_ms > until {
                return None;
            }
            let Reverse(Queued(ev)) = self.queue.pop().expect("peeked");
            if !self.is_live(&ev) {
                continue;
            }
            debug_assert!(ev.time_ms >= self.clock_ms, "event scheduled in the past");
            self.clock_ms = ev.time_ms;
            match &ev.kind {
                EventKind::Deliver { from, to, msg } => {
                    let (from, to, kind, size) = (*from, *to, msg.kind(), msg.encoded_len());
                    self.record(ev.seq, TraceKind::Deliver, from, Target::Node(to), kind.as_str().into(), size as u64);
                }
                EventKind::Timer { owner, tag } => {
                    let (owner, tag) = (*owner, tag.clone());
                    self.timers.remove(&(owner, tag.clone()));
                    self.record(ev.seq, TraceKind::Timer, owner, Target::Node(owner), tag, 0);
                }
            }
            return Some(ev);
        }
    }

    /// Processes every event due at or before `until`, then moves the clock
    /// to `until`.
    pub fn run_until<H: EventHandler + ?Sized>(&mut self, until: f64, handler: &mut H) -> usize {
        let mut n = 0;
        while let Some(ev) = self.pop_due(until) {
            handler.handle(self, ev);
            n += 1;
        }
        if until > self.clock_ms {
            self.clock_ms = until;
        }
        n
    }

    /// Processes events until the queue is empty or the next event lies
    /// beyond `max_time_ms`. Stopping at the limit adds a `horizon` record.
    pub fn run_until_quiescent<H: EventHandler + ?Sized>(
        &mut self,
        max_time_ms: f64,
        handler: &mut H,
    ) -> RunReport {
        let start = self.trace.len();
        let mut n = 0;
        while let Some(ev) = self.pop_due(max_time_ms) {
            handler.handle(self, ev);
            n += 1;
        }
        let hit_time_limit = self.pending_events() > 0;
        if hit_time_limit {
            if max_time_ms > self.clock_ms {
                self.clock_ms = max_time_ms;
            }
            let seq = self.alloc_seq();
            self.record(seq, TraceKind::Horizon, NodeId::NONE, Target::Node(NodeId::NONE), String::new(), 0);
        }
        RunReport {
            records: self.trace[start..].to_vec(),
            events_processed: n,
            hit_time_limit,
        }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AitEntry, Body};
    use std::net::Ipv4Addr;

    fn link(delay: f64, p: f64, bw: f64) -> LinkConfig {
        LinkConfig::new(delay, p, bw).unwrap()
    }

    fn topo(n: u32, p: f64) -> Topology {
        let mut t = Topology::new(link(10.0, p, 100.0), link(50.0, p, 100.0));
        for i in 1..=n {
            t = t.with_node(NodeId(i), DomainId(1));
        }
        t
    }

    fn hb(id: u32) -> Message {
        let e = AitEntry::new(NodeId(id), Ipv4Addr::new(10, 0, 0, id as u8), 1.0, 1.0).unwrap();
        Message::new(e, Body::Heartbeat)
    }

    fn drain(net: &mut Network) -> Vec<SimEvent> {
        let mut seen = Vec::new();
        net.run_until_quiescent(f64::MAX, &mut |_: &mut Network, ev: SimEvent| seen.push(ev));
        seen
    }

    #[test]
    fn fresh_network_is_empty() {
        let mut net = Network::new(&topo(3, 0.0), 42).unwrap();
        assert_eq!(net.now(), 0.0);
        assert_eq!(net.pending_events(), 0);
        let report = net.run_until_quiescent(1000.0, &mut |_: &mut Network, _| {});
        assert!(report.records.is_empty());
        assert!(!report.hit_time_limit);
        assert_eq!(net.now(), 0.0);
    }

    #[test]
    fn missing_domain_is_invalid() {
        let mut t = topo(2, 0.0);
        t.nodes.push(TopologyNode {
            id: NodeId(9),
            domain: None,
        });
        assert!(matches!(Network::new(&t, 1), Err(NetError::InvalidTopology(_))));
        let dup = topo(2, 0.0).with_node(NodeId(1), DomainId(2));
        assert!(matches!(Network::new(&dup, 1), Err(NetError::InvalidTopology(_))));
        assert!(matches!(LinkConfig::new(0.0, 1.5, 1.0), Err(NetError::InvalidLink(_))));
        assert!(matches!(LinkConfig::new(0.0, 0.5, 0.0), Err(NetError::InvalidLink(_))));
        assert!(matches!(LinkConfig::new(-1.0, 0.5, 1.0), Err(NetError::InvalidLink(_))));
    }

    #[test]
    fn unicast_latency_follows_size_and_bandwidth() {
        let mut net = Network::new(&topo(2, 0.0), 1).unwrap();
        net.send_unicast(NodeId(1), NodeId(2), hb(1)).unwrap();
        let evs = drain(&mut net);
        assert_eq!(evs.len(), 1);
        // 33 bytes * 8 / (100 Mbps * 1000) = 0.00264 ms on top of 10 ms.
        assert!((evs[0].time_ms - 10.00264).abs() < 1e-12);
        assert!(matches!(
            net.send_unicast(NodeId(1), NodeId(77), hb(1)),
            Err(NetError::UnknownNode(NodeId(77)))
        ));
    }

    #[test]
    fn drop_extremes() {
        let mut net = Network::new(&topo(2, 0.0), 3).unwrap();
        for _ in 0..100 {
            net.send_unicast(NodeId(1), NodeId(2), hb(1)).unwrap();
        }
        assert_eq!(drain(&mut net).len(), 100);

        let mut net = Network::new(&topo(2, 1.0), 3).unwrap();
        for _ in 0..100 {
            net.send_unicast(NodeId(1), NodeId(2), hb(1)).unwrap();
        }
        assert_eq!(drain(&mut net).len(), 0);
        assert_eq!(
            net.trace().iter().filter(|r| r.kind == TraceKind::Drop).count(),
            100
        );
    }

    #[test]
    fn multicast_fans_out_to_subscribed_peers() {
        let mut net = Network::new(&topo(3, 0.0), 3).unwrap();
        for i in 1..=3 {
            net.subscribe(NodeId(i)).unwrap();
        }
        assert_eq!(net.send_multicast(NodeId(1), Group::Domain(DomainId(1)), hb(1)).unwrap(), 2);
        assert_eq!(drain(&mut net).len(), 2);

        let mut solo = Network::new(&topo(1, 0.0), 3).unwrap();
        solo.subscribe(NodeId(1)).unwrap();
        solo.send_multicast(NodeId(1), Group::Domain(DomainId(1)), hb(1)).unwrap();
        assert!(drain(&mut solo).is_empty());
        assert_eq!(solo.trace().len(), 1);
        assert_eq!(solo.trace()[0].kind, TraceKind::Multicast);

        let mut lossy = Network::new(&topo(5, 1.0), 3).unwrap();
        for i in 1..=5 {
            lossy.subscribe(NodeId(i)).unwrap();
        }
        lossy.send_multicast(NodeId(2), Group::Domain(DomainId(1)), hb(2)).unwrap();
        assert!(drain(&mut lossy).is_empty());
    }

    #[test]
    fn virtual_group_uses_inter_link() {
        let t = Topology::new(link(1.0, 0.0, 100.0), link(50.0, 0.0, 100.0))
            .with_node(NodeId(1), DomainId(1))
            .with_node(NodeId(2), DomainId(2));
        let mut net = Network::new(&t, 0).unwrap();
        net.set_virtual_members([NodeId(1), NodeId(2)]);
        net.send_multicast(NodeId(1), Group::Virtual, hb(1)).unwrap();
        let evs = drain(&mut net);
        assert_eq!(evs.len(), 1);
        assert!((evs[0].time_ms - 50.00264).abs() < 1e-12);
    }

    #[test]
    fn timers_fire_and_replace() {
        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "hb", 1000.0).unwrap();
        let evs = drain(&mut net);
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].time_ms, 1000.0);

        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "hb", 500.0).unwrap();
        net.set_timer(NodeId(1), "hb", 800.0).unwrap();
        assert_eq!(net.pending_events(), 1);
        let evs = drain(&mut net);
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].time_ms, 800.0);

        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "hb", 500.0).unwrap();
        net.set_timer(NodeId(2), "hb", 500.0).unwrap();
        assert_eq!(drain(&mut net).len(), 2);

        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "hb", 500.0).unwrap();
        net.cancel_timer(NodeId(1), "hb");
        assert!(drain(&mut net).is_empty());
        assert!(net.set_timer(NodeId(9), "x", 1.0).is_err());
    }

    #[test]
    fn events_ordered_by_time_then_seq() {
        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "b", 10.0).unwrap();
        net.set_timer(NodeId(1), "a", 10.0).unwrap();
        net.set_timer(NodeId(2), "c", 5.0).unwrap();
        let evs = drain(&mut net);
        let order: Vec<_> = evs.iter().map(|e| (e.time_ms, e.seq)).collect();
        assert_eq!(order, vec![(5.0, 2), (10.0, 0), (10.0, 1)]);
    }

    #[test]
    fn handlers_can_schedule_more_work() {
        let mut net = Network::new(&topo(2, 0.0), 0).unwrap();
        net.set_timer(NodeId(1), "tick", 100.0).unwrap();
        let mut fired = Vec::new();
        let report = net.run_until_quiescent(1000.0, &mut |net: &mut Network, ev: SimEvent| {
            fired.push(ev.time_ms);
            net.set_timer(NodeId(1), "tick", 100.0).unwrap();
        });
        assert!(report.hit_time_limit);
        assert_eq!(fired.len(), 10);
        assert_eq!(report.records.last().unwrap().kind, TraceKind::Horizon);
        for w in fired.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    fn lossy_run(seed: u64) -> String {
        let mut net = Network::new(&topo(4, 0.3), seed).unwrap();
        for i in 1..=4 {
            net.subscribe(NodeId(i)).unwrap();
        }
        for i in 1..=4 {
            net.set_timer(NodeId(i), "hb", i as f64).unwrap();
        }
        net.run_until_quiescent(5_000.0, &mut |net: &mut Network, ev: SimEvent| {
            if let EventKind::Timer { owner, .. } = ev.kind {
                net.send_multicast(owner, Group::Domain(DomainId(1)), hb(owner.0)).unwrap();
                net.set_timer(owner, "hb", 250.0).unwrap();
            }
        });
        trace_to_csv(net.trace())
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(lossy_run(7), lossy_run(7));
        assert_ne!(lossy_run(7), lossy_run(8));
        assert!(lossy_run(7).starts_with(TRACE_CSV_HEADER));
    }
}
