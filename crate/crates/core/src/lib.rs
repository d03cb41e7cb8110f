//! Passive filter pruning for sequential CNNs.
//!
//! Filters of a conv layer are reduced to rank-1 representatives, compared by
//! cosine distance, and a greedy closest-pair pass decides which filters are
//! important and which are redundant. The redundant ones are cut out of the
//! network together with every downstream weight that consumed them, and the
//! parameter and MAC savings are reported.
//!
//! Pipeline: [`container::load_model`] → [`selector::select_layer`] per conv
//! layer → [`surgery::build_plan`] / [`surgery::apply_plan`] →
//! [`complexity::reduction_report`].

pub mod baseline;
pub mod complexity;
pub mod container;
pub mod error;
pub mod model;
pub mod rank1;
pub mod reference_net;
pub mod selector;
pub mod similarity;
pub mod surgery;

pub use error::{Error, Result, Violation};
pub use model::{Model, ModelBuilder, ModelDescriptor};
