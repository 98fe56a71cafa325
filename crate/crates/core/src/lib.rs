//! Service-mesh data plane built from match-action processing modules,
//! with a discrete-event simulator and a small live HTTP mode.

pub mod config;
pub mod dataplane;
pub mod fast_path;
pub mod http;
pub mod l7;
pub mod live;
pub mod match_action;
pub mod model;
pub mod sim;
pub mod slow_path;
pub mod stats;
pub mod vq;
pub mod wire;
