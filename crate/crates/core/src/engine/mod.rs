//! Event loop, trace and metrics.

pub mod metrics;
pub mod queue;
mod sim;
pub mod trace;

pub use metrics::{collect_metrics, Metrics, MetricsRow};
pub use queue::{EventQueue, ScheduleError};
pub use sim::{run, BundleFate, EngineError, SimulationResult};
pub use trace::{Trace, TraceError, TraceEvent, TraceRecord};
