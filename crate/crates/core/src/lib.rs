//! Routing traces, expert placement, scheduling policies and a
//! discrete-event simulator for hybrid fast/slow-device Mixture-of-Experts
//! decoding.

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod placement;
pub mod policies;
mod serde_util;
pub mod simulator;
pub mod trace;

pub use error::{Error, Result};
pub use placement::{Device, ExpertPlacement, SwapEvent, SwapThreshold};
pub use policies::{Engine, PolicyConfig};
pub use simulator::{default_cost_model, CostModel, TimelineResult};
pub use trace::{ModelShape, Phase, RoutingTrace, TokenRouting};
