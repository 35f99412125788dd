//! Scenario files and the experiment driver.
//!
//! A scenario names a set of nodes, the two link models, protocol
//! parameters and a timed script. Running it replays the script on a
//! fresh [`Simulation`] and collects the event trace and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::election::ElectionPolicy;
use crate::membership::ProtocolParams;
use crate::metrics::MetricsRecord;
use crate::model::{AitEntry, DomainId, NodeId};
use crate::sim::{NodeSpec, QueryOutcome, SimError, Simulation};
use crate::simnet::{LinkConfig, LinkScope, TraceRecord};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("at t={time_ms} ms: consistency check failed: {check}")]
    AssertionFailure { time_ms: f64, check: String },
    #[error("at t={time_ms} ms: {source}")]
    Action {
        time_ms: f64,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub intra_domain_link: LinkConfig,
    pub inter_domain_link: LinkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntrySpec {
    pub id: NodeId,
    /// Required; a missing domain is reported as a validation error.
    #[serde(default)]
    pub domain: Option<DomainId>,
    /// Defaults to `10.<id bytes>`.
    #[serde(default)]
    pub ip: Option<Ipv4Addr>,
    pub capacity_mb: f64,
    pub power_mhz: f64,
}

impl NodeEntrySpec {
    fn default_ip(id: NodeId) -> Ipv4Addr {
        let [_, b, c, d] = id.0.to_be_bytes();
        Ipv4Addr::new(10, b, c, d)
    }
}

/// Optional overrides; anything left out is derived from the links.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(default)]
    pub accept_window_ms: Option<f64>,
    #[serde(default)]
    pub heartbeat_period_ms: Option<f64>,
    #[serde(default)]
    pub failure_timeout_ms: Option<f64>,
    #[serde(default)]
    pub response_window_ms: Option<f64>,
    #[serde(default)]
    pub query_timeout_ms: Option<f64>,
    #[serde(default)]
    pub election_policy: Option<ElectionPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    JoinNode {
        node: NodeId,
    },
    LeaveNode {
        node: NodeId,
    },
    CrashNode {
        node: NodeId,
    },
    Query {
        requester: NodeId,
        required_mb: f64,
        #[serde(default)]
        allocate: bool,
    },
    Transfer {
        from: NodeId,
        to: NodeId,
        size_mb: f64,
    },
    /// Changes a link model mid-run, as on a WAN emulator.
    ConfigureLink {
        scope: LinkScope,
        #[serde(default)]
        delay_ms: Option<f64>,
        #[serde(default)]
        drop_probability: Option<f64>,
        #[serde(default)]
        bandwidth_mbps: Option<f64>,
    },
    AssertQuiescentConsistency,
}

impl Action {
    fn referenced_nodes(&self) -> Vec<NodeId> {
        match self {
            Action::JoinNode { node } | Action::LeaveNode { node } | Action::CrashNode { node } => vec![*node],
            Action::Query { requester, .. } => vec![*requester],
            Action::Transfer { from, to, .. } => vec![*from, *to],
            Action::ConfigureLink { .. } | Action::AssertQuiescentConsistency => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at_ms: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologySpec,
    pub node_specs: Vec<NodeEntrySpec>,
    #[serde(default)]
    pub params: ParamsSpec,
    pub script: Vec<TimedAction>,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&fs::read_to_string(path)?)
}

fn positive(name: &str, v: Option<f64>) -> Result<(), ScenarioError> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => {
            Err(ScenarioError::Validation(format!("params.{name} must be > 0, got {x}")))
        }
        _ => Ok(()),
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Validation(msg));
        for (name, link) in [
            ("intra_domain_link", &self.topology.intra_domain_link),
            ("inter_domain_link", &self.topology.inter_domain_link),
        ] {
            if let Err(e) = link.validate() {
                return invalid(format!("topology.{name}: {e}"));
            }
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.node_specs.iter().enumerate() {
            if n.domain.is_none() {
                return invalid(format!("node_specs[{i}]: invalid topology: node {} has no domain", n.id));
            }
            if !ids.insert(n.id) {
                return invalid(format!("node_specs[{i}]: duplicate node id {}", n.id));
            }
            let ip = n.ip.unwrap_or_else(|| NodeEntrySpec::default_ip(n.id));
            if let Err(e) = AitEntry::new(n.id, ip, n.capacity_mb, n.power_mhz) {
                return invalid(format!("node_specs[{i}]: {e}"));
            }
        }
        let p = &self.params;
        positive("accept_window_ms", p.accept_window_ms)?;
        positive("heartbeat_period_ms", p.heartbeat_period_ms)?;
        positive("failure_timeout_ms", p.failure_timeout_ms)?;
        positive("response_window_ms", p.response_window_ms)?;
        positive("query_timeout_ms", p.query_timeout_ms)?;

        let mut last = 0.0f64;
        for (i, step) in self.script.iter().enumerate() {
            if !(step.at_ms.is_finite() && step.at_ms >= 0.0) {
                return invalid(format!("script[{i}]: at_ms must be >= 0, got {}", step.at_ms));
            }
            if step.at_ms < last {
                return invalid(format!(
                    "script[{i}]: action times must be non-decreasing ({} after {last})",
                    step.at_ms
                ));
            }
            last = step.at_ms;
            for node in step.action.referenced_nodes() {
                if !ids.contains(&node) {
                    return invalid(format!("script[{i}]: node {node} is not in node_specs"));
                }
            }
            match &step.action {
                Action::Query { required_mb, .. } if !(required_mb.is_finite() && *required_mb > 0.0) => {
                    return invalid(format!("script[{i}]: required_mb must be > 0"));
                }
                Action::Transfer { size_mb, .. } if !(size_mb.is_finite() && *size_mb > 0.0) => {
                    return invalid(format!("script[{i}]: size_mb must be > 0"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> Vec<NodeSpec> {
        self.node_specs
            .iter()
            .map(|n| NodeSpec {
                id: n.id,
                domain: n.domain.expect("validated"),
                ip: n.ip.unwrap_or_else(|| NodeEntrySpec::default_ip(n.id)),
                capacity_mb: n.capacity_mb,
                power_mhz: n.power_mhz,
            })
            .collect()
    }

    /// Protocol parameters after applying overrides to link-derived
    /// defaults.
    pub fn protocol_params(&self) -> ProtocolParams {
        let intra = &self.topology.intra_domain_link;
        let inter = &self.topology.inter_domain_link;
        let mut params = ProtocolParams::for_links(intra, inter);
        let p = &self.params;
        if let Some(v) = p.accept_window_ms {
            params.accept_window_ms = v;
        }
        if let Some(v) = p.heartbeat_period_ms {
            params.heartbeat_period_ms = v;
            params.failure_timeout_ms = 3.0 * v;
        }
        if let Some(v) = p.failure_timeout_ms {
            params.failure_timeout_ms = v;
        }
        if let Some(v) = p.response_window_ms {
            params.response_window_ms = v;
            params.query_timeout_ms = ProtocolParams::default_query_timeout(intra, v);
        }
        if let Some(v) = p.query_timeout_ms {
            params.query_timeout_ms = v;
        }
        if let Some(v) = p.election_policy {
            params.policy = v;
        }
        params
    }

    /// First listed node of every domain.
    pub fn first_node_per_domain(&self) -> BTreeMap<DomainId, NodeId> {
        let mut out = BTreeMap::new();
        for n in self.nodes() {
            out.entry(n.domain).or_insert(n.id);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full protocol: re-election and capacity refresh.
    Dynamic,
    /// Agents pinned to the first node of each domain, no re-election, no
    /// capacity refresh.
    Static,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dynamic => "dynamic",
            Mode::Static => "static",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: Vec<MetricsRecord>,
    pub outcomes: Vec<QueryOutcome>,
    pub assertions_checked: usize,
    pub registered_agents: BTreeMap<DomainId, NodeId>,
    pub end_time_ms: f64,
}

impl RunOutput {
    pub fn summary(&self, mode: Mode) -> ModeSummary {
        let queries = self.outcomes.len();
        let found: Vec<&QueryOutcome> = self.outcomes.iter().filter(|o| o.succeeded()).collect();
        let mean = if found.is_empty() {
            0.0
        } else {
            found.iter().map(|o| o.resolved_ms - o.issued_ms).sum::<f64>() / found.len() as f64
        };
        ModeSummary {
            mode,
            queries,
            successes: found.len(),
            success_rate: if queries == 0 { 0.0 } else { found.len() as f64 / queries as f64 },
            mean_response_ms: mean,
        }
    }
}

/// Time the protocol needs after the last scripted action to settle.
pub fn settle_time_ms(params: &ProtocolParams) -> f64 {
    params.accept_window_ms + params.heartbeat_period_ms + params.failure_timeout_ms + params.query_timeout_ms
}

fn apply_action(sim: &mut Simulation, action: &Action) -> Result<(), SimError> {
    match action {
        Action::JoinNode { node } => sim.join(*node),
        Action::LeaveNode { node } => sim.leave(*node),
        Action::CrashNode { node } => sim.crash(*node),
        Action::Query {
            requester,
            required_mb,
            allocate,
        } => sim.issue_query(*requester, *required_mb, *allocate).map(|_| ()),
        Action::Transfer { from, to, size_mb } => sim.transfer_file(*from, *to, *size_mb).map(|_| ()).map_err(SimError::from),
        Action::ConfigureLink {
            scope,
            delay_ms,
            drop_probability,
            bandwidth_mbps,
        } => {
            let mut link = sim.network().link(*scope);
            if let Some(v) = delay_ms {
                link.delay_ms = *v;
            }
            if let Some(v) = drop_probability {
                link.drop_probability = *v;
            }
            if let Some(v) = bandwidth_mbps {
                link.bandwidth_mbps = *v;
            }
            sim.set_link(*scope, link)
        }
        Action::AssertQuiescentConsistency => Ok(()),
    }
}

pub fn build_simulation(s: &Scenario, mode: Mode) -> Result<Simulation, ScenarioError> {
    let mut params = s.protocol_params();
    if mode == Mode::Static {
        params.fixed_agents = Some(s.first_node_per_domain());
        params.refresh_capacity = false;
    }
    Simulation::new(
        &s.nodes(),
        s.topology.intra_domain_link,
        s.topology.inter_domain_link,
        params,
        s.seed,
    )
    .map_err(|e| ScenarioError::Validation(e.to_string()))
}

/// Replays the script. In dynamic mode every consistency assertion must
/// hold; static mode skips them, since pinned agents are expected to go
/// stale.
pub fn run_scenario_mode(s: &Scenario, mode: Mode) -> Result<RunOutput, ScenarioError> {
    s.validate()?;
    let mut sim = build_simulation(s, mode)?;
    let mut assertions_checked = 0;
    for step in &s.script {
        sim.run_until(step.at_ms);
        if step.action == Action::AssertQuiescentConsistency {
            if mode == Mode::Dynamic {
                sim.check_consistency().map_err(|check| ScenarioError::AssertionFailure {
                    time_ms: step.at_ms,
                    check,
                })?;
                assertions_checked += 1;
            }
            continue;
        }
        apply_action(&mut sim, &step.action).map_err(|source| ScenarioError::Action {
            time_ms: step.at_ms,
            source,
        })?;
    }
    let last = s.script.last().map_or(0.0, |a| a.at_ms);
    let end = last + settle_time_ms(sim.params());
    sim.finish(end);
    Ok(RunOutput {
        trace: sim.trace().to_vec(),
        metrics: sim.metrics().to_vec(),
        outcomes: sim.outcomes().to_vec(),
        assertions_checked,
        registered_agents: sim.registry().domains().map(|(d, a)| (d, a.entry.node_id)).collect(),
        end_time_ms: sim.now(),
    })
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutput, ScenarioError> {
    run_scenario_mode(s, Mode::Dynamic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub queries: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_response_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ModeSummary>,
    /// Per query id: candidate chosen by static and by dynamic mode.
    #[serde(skip)]
    pub candidates: Vec<(u64, Option<NodeId>, Option<NodeId>)>,
}

impl Comparison {
    pub fn row(&self, mode: Mode) -> &ModeSummary {
        self.rows.iter().find(|r| r.mode == mode).expect("both modes present")
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode,queries,successes,success_rate,mean_response_ms")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{:.4},{:.3}",
                r.mode, r.queries, r.successes, r.success_rate, r.mean_response_ms
            )?;
        }
        Ok(())
    }
}

/// Runs `s` with pinned agents and with the full protocol.
pub fn compare_static_dynamic(s: &Scenario) -> Result<Comparison, ScenarioError> {
    let stat = run_scenario_mode(s, Mode::Static)?;
    let dynamic = run_scenario_mode(s, Mode::Dynamic)?;
    let by_id = |out: &RunOutput| -> BTreeMap<u64, Option<NodeId>> {
        out.outcomes
            .iter()
            .map(|o| (o.query_id, o.candidate.map(|c| c.node_id)))
            .collect()
    };
    let (a, b) = (by_id(&stat), by_id(&dynamic));
    let candidates = a
        .iter()
        .map(|(id, c)| (*id, *c, b.get(id).copied().flatten()))
        .collect();
    Ok(Comparison {
        rows: vec![stat.summary(Mode::Static), dynamic.summary(Mode::Dynamic)],
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "mini",
        "seed": 3,
        "topology": {
            "intra_domain_link": {"delay_ms": 1.0, "drop_probability": 0.0, "bandwidth_mbps": 100.0},
            "inter_domain_link": {"delay_ms": 20.0, "drop_probability": 0.0, "bandwidth_mbps": 100.0}
        },
        "node_specs": [
            {"id": 1, "domain": 1, "capacity_mb": 100.0, "power_mhz": 2800.0},
            {"id": 2, "domain": 1, "capacity_mb": 300.0, "power_mhz": 2660.0}
        ],
        "script": [
            {"at_ms": 0, "action": "join_node", "node": 1},
            {"at_ms": 100, "action": "join_node", "node": 2},
            {"at_ms": 6000, "action": "assert_quiescent_consistency"},
            {"at_ms": 6000, "action": "query", "requester": 2, "required_mb": 200.0}
        ]
    }"#;

    #[test]
    fn parses_and_runs_minimal() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.node_specs.len(), 2);
        assert_eq!(s.nodes()[0].ip, Ipv4Addr::new(10, 0, 0, 1));
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.assertions_checked, 1);
        assert_eq!(out.outcomes.len(), 1);
        assert_eq!(out.outcomes[0].candidate.unwrap().node_id, NodeId(2));
        assert_eq!(out.registered_agents.get(&DomainId(1)), Some(&NodeId(1)));
    }

    #[test]
    fn decreasing_times_rejected() {
        let bad = MINIMAL.replace(r#""at_ms": 100"#, r#""at_ms": 0"#).replace(
            r#"{"at_ms": 0, "action": "join_node", "node": 1}"#,
            r#"{"at_ms": 50, "action": "join_node", "node": 1}"#,
        );
        assert!(matches!(parse_scenario(&bad), Err(ScenarioError::Validation(m)) if m.contains("non-decreasing")));
    }

    #[test]
    fn unknown_node_rejected() {
        let bad = MINIMAL.replace(r#""requester": 2"#, r#""requester": 9"#);
        assert!(matches!(parse_scenario(&bad), Err(ScenarioError::Validation(m)) if m.contains("node 9")));
    }

    #[test]
    fn missing_domain_rejected() {
        let bad = MINIMAL.replace(r#""id": 2, "domain": 1,"#, r#""id": 2,"#);
        assert!(matches!(parse_scenario(&bad), Err(ScenarioError::Validation(m)) if m.contains("no domain")));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_scenario("{\n  \"name\": 5\n}").unwrap_err();
        match err {
            ScenarioError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("invalid type"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_scenario(&MINIMAL.replace("join_node", "jump")).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { .. }));
    }

    #[test]
    fn param_overrides() {
        let mut s = parse_scenario(MINIMAL).unwrap();
        s.params.heartbeat_period_ms = Some(200.0);
        s.params.election_policy = Some(ElectionPolicy::LowestId);
        let p = s.protocol_params();
        assert_eq!(p.heartbeat_period_ms, 200.0);
        assert_eq!(p.failure_timeout_ms, 600.0);
        assert_eq!(p.policy, ElectionPolicy::LowestId);
        assert_eq!(p.accept_window_ms, 10.0);
        s.params.failure_timeout_ms = Some(-1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn comparison_has_two_rows() {
        let s = parse_scenario(MINIMAL).unwrap();
        let cmp = compare_static_dynamic(&s).unwrap();
        let text = cmp.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("static,"));
        assert!(lines[2].starts_with("dynamic,"));
        for (_, a, b) in &cmp.candidates {
            assert_eq!(a, b);
        }
    }
}
