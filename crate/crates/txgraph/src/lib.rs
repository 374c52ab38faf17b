//! Payment-graph analysis: how long a set of transactions takes when run
//! one at a time versus as soon as their inputs exist, and how many-party
//! transactions decompose into two-account steps.

pub mod generate;
pub mod graph;
pub mod path;
pub mod refactor;
pub mod report;

pub use generate::{scale_free, GenParams};
pub use graph::{load_graph, parse_graph, write_graph, GraphError, Id, Tx, TxGraph};
pub use path::{critical_path, CriticalPath};
pub use refactor::{refactor_two_account, refactor_values, Fragment, RefactorError, Sink};
pub use report::{compare, refactor_graph, timing, Comparison, Timing};
