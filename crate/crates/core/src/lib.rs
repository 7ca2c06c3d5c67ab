//! Human interaction understanding on a third-order factor graph.
//!
//! A factor-graph network scores every person's action and every pairwise
//! interaction; a mean-field layer then refines those scores under learned
//! compatibility and transitivity penalties. Exhaustive oracles, a
//! synthetic scene generator and the usual metrics are included for testing.

pub mod car;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod learn;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod togn;

pub use error::{Error, Result};
pub use model::Model;
