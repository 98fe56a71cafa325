//! Mesh configuration: TOML schema, loading and cross-reference checks.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::l7::{ClusterDef, FilterRule, LbPolicy, PathKind, PathMatcher, RouteRule};
use crate::match_action::{ChainError, ChainSpec, DsaStub};
use crate::model::{make_listener_key, Endpoint, FlowKey};
use crate::slow_path::TableSet;

/// Default local MAC the L2 switch accepts.
pub const DEFAULT_LOCAL_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerConfig {
    pub name: String,
    pub dip: Ipv4Addr,
    pub dport: u16,
    /// Forward raw streams to this cluster without L7 processing.
    #[serde(default)]
    pub l4_cluster: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub listener: String,
    pub path_matchers: Vec<PathMatcher>,
    pub cluster: String,
    #[serde(default)]
    pub dsa: Option<String>,
}

fn default_weight() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub address: Ipv4Addr,
    pub port: u16,
    #[serde(default = "default_weight")]
    pub weight: u32,
    #[serde(default = "yes")]
    pub healthy: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(rename = "ref")]
    pub name: String,
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default = "default_policy")]
    pub policy: LbPolicy,
}

fn default_policy() -> LbPolicy {
    LbPolicy::RoundRobin
}

/// What the slow path does with a request no filter rule matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultFilter {
    /// Install a catch-all allow rule and reinject.
    #[default]
    Allow,
    /// Answer 403.
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub listeners: Vec<ListenerConfig>,
    #[serde(default)]
    pub filters: Vec<FilterRule>,
    #[serde(default)]
    pub routes: Vec<RouteConfig>,
    #[serde(default)]
    pub clusters: Vec<ClusterConfig>,
    pub chain: ChainSpec,
    #[serde(default)]
    pub cost_profile: Option<String>,
    #[serde(default)]
    pub dsas: Vec<DsaStub>,
    #[serde(default)]
    pub default_filter: DefaultFilter,
    #[serde(default)]
    pub local_mac: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dangling cluster reference \"{0}\"")]
    DanglingClusterRef(String),
    #[error("dangling listener reference \"{0}\"")]
    DanglingListenerRef(String),
    #[error("invalid chain: {0}")]
    InvalidChain(#[from] ChainError),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

pub fn parse_mac(s: &str) -> Option<[u8; 6]> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 6 {
        return None;
    }
    let mut mac = [0u8; 6];
    for (m, p) in mac.iter_mut().zip(parts) {
        *m = u8::from_str_radix(p, 16).ok()?;
    }
    Some(mac)
}

impl MeshConfig {
    pub fn local_mac(&self) -> [u8; 6] {
        self.local_mac
            .as_deref()
            .and_then(parse_mac)
            .unwrap_or(DEFAULT_LOCAL_MAC)
    }

    pub fn listener_key(&self, name: &str) -> Option<FlowKey> {
        self.listeners
            .iter()
            .find(|l| l.name == name)
            .map(|l| make_listener_key(l.dip, l.dport))
    }

    /// Route rules with listener names resolved to keys.
    pub fn route_rules(&self) -> Vec<RouteRule> {
        self.routes
            .iter()
            .filter_map(|r| {
                Some(RouteRule {
                    listener: self.listener_key(&r.listener)?,
                    path_matchers: r.path_matchers.clone(),
                    cluster: r.cluster.clone(),
                    dsa: r.dsa.clone(),
                })
            })
            .collect()
    }

    pub fn cluster_defs(&self) -> Vec<ClusterDef> {
        self.clusters
            .iter()
            .map(|c| ClusterDef {
                name: c.name.clone(),
                policy: c.policy,
                endpoints: c
                    .endpoints
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let id = e.id.clone().unwrap_or_else(|| format!("{}-{i}", c.name));
                        let mut ep = Endpoint::new(id, e.address, e.port, e.weight);
                        ep.healthy = e.healthy;
                        ep
                    })
                    .collect(),
            })
            .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut names = BTreeSet::new();
        let mut keys = BTreeSet::new();
        for l in &self.listeners {
            if !names.insert(l.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate listener \"{}\"", l.name)));
            }
            if !keys.insert(make_listener_key(l.dip, l.dport)) {
                return Err(ConfigError::Invalid(format!(
                    "listener \"{}\" reuses {}:{}",
                    l.name, l.dip, l.dport
                )));
            }
        }
        let mut clusters = BTreeSet::new();
        for c in &self.clusters {
            if !clusters.insert(c.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate cluster \"{}\"", c.name)));
            }
        }
        for l in &self.listeners {
            if let Some(c) = &l.l4_cluster {
                if !clusters.contains(c.as_str()) {
                    return Err(ConfigError::DanglingClusterRef(c.clone()));
                }
            }
        }
        let dsas: BTreeSet<&str> = self.dsas.iter().map(|d| d.name.as_str()).collect();
        for r in &self.routes {
            if !names.contains(r.listener.as_str()) {
                return Err(ConfigError::DanglingListenerRef(r.listener.clone()));
            }
            if !clusters.contains(r.cluster.as_str()) {
                return Err(ConfigError::DanglingClusterRef(r.cluster.clone()));
            }
            if r.path_matchers.is_empty() || r.path_matchers.iter().any(|p| p.pattern.is_empty()) {
                return Err(ConfigError::Invalid(format!(
                    "route on \"{}\" needs non-empty path patterns",
                    r.listener
                )));
            }
            if let Some(d) = &r.dsa {
                if !dsas.contains(d.as_str()) {
                    return Err(ConfigError::Invalid(format!("unknown dsa \"{d}\"")));
                }
            }
        }
        if let Some(m) = &self.local_mac {
            if parse_mac(m).is_none() {
                return Err(ConfigError::Invalid(format!("bad local_mac \"{m}\"")));
            }
        }
        // Chain check against a scratch instance of the built-in modules.
        let scratch = TableSet::new();
        scratch.compile(&self.chain, &self.dsas)?;
        Ok(())
    }
}

/// Parses and validates a config document.
pub fn load_config(text: &str) -> Result<MeshConfig, ConfigError> {
    let cfg: MeshConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_owned(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<MeshConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_config(&text)
}

/// Smallest useful config: one listener, one exact route, one endpoint.
pub fn minimal_config(dip: Ipv4Addr, dport: u16, endpoint: (Ipv4Addr, u16)) -> MeshConfig {
    MeshConfig {
        listeners: vec![ListenerConfig {
            name: "web".into(),
            dip,
            dport,
            l4_cluster: None,
        }],
        filters: Vec::new(),
        routes: vec![RouteConfig {
            listener: "web".into(),
            path_matchers: vec![PathMatcher {
                kind: PathKind::Exact,
                pattern: "/".into(),
            }],
            cluster: "svc".into(),
            dsa: None,
        }],
        clusters: vec![ClusterConfig {
            name: "svc".into(),
            endpoints: vec![EndpointConfig {
                id: None,
                address: endpoint.0,
                port: endpoint.1,
                weight: 1,
                healthy: true,
            }],
            policy: LbPolicy::RoundRobin,
        }],
        chain: ChainSpec::linear(&["toe", "http_parser", "filter", "router", "http_deparser"]),
        cost_profile: None,
        dsas: Vec::new(),
        default_filter: DefaultFilter::Allow,
        local_mac: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[listeners]]
name = "web"
dip = "10.0.0.2"
dport = 8080

[[routes]]
listener = "web"
cluster = "svc"
path_matchers = [{ kind = "exact", pattern = "/" }]

[[clusters]]
ref = "svc"
endpoints = [{ address = "10.1.0.1", port = 9000, weight = 1 }]
policy = "round_robin"

[chain]
nodes = ["toe", "http_parser", "filter", "router", "http_deparser"]
"#;

    #[test]
    fn minimal_parses() {
        let cfg = load_config(MINIMAL).unwrap();
        assert_eq!(cfg.listeners.len(), 1);
        assert_eq!(cfg.route_rules().len(), 1);
        assert_eq!(cfg.cluster_defs()[0].endpoints[0].id.0, "svc-0");
    }

    #[test]
    fn dangling_cluster() {
        let text = MINIMAL.replace("cluster = \"svc\"", "cluster = \"c9\"");
        assert_eq!(load_config(&text), Err(ConfigError::DanglingClusterRef("c9".into())));
    }

    #[test]
    fn empty_and_unknown_fields() {
        assert!(matches!(load_config(""), Err(ConfigError::Parse { line: 1, .. })));
        let text = MINIMAL.replace("dport = 8080", "dport = 8080\nbogus = 1");
        match load_config(&text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_chain() {
        let text = MINIMAL.replace(
            "nodes = [\"toe\", \"http_parser\", \"filter\", \"router\", \"http_deparser\"]",
            "nodes = [\"vswitch\", \"router\"]\nedges = [[\"vswitch\", \"router\"]]",
        );
        assert!(matches!(
            load_config(&text),
            Err(ConfigError::InvalidChain(ChainError::LayerAdjacencyViolation { .. }))
        ));
        let text = MINIMAL.replace("\"filter\",", "\"nope\",");
        assert!(matches!(
            load_config(&text),
            Err(ConfigError::InvalidChain(ChainError::UnknownPpm(_)))
        ));
    }
}
