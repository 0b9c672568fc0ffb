//! Normalization contexts and the robust canonical map
//! `Φ(d, C) = (d − median_C) / (MAD_C + ε)`.

mod context;
mod stats;

pub use context::{
    build_global_context, build_hdn_contexts, build_hdn_contexts_with, build_sa_hdn_contexts,
    Context, ContextHierarchy, ContextKind, HdnScheme, Instance, InstanceMasks, Mask,
    DEFAULT_HDN_LEVELS,
};
pub use stats::{normalize_phi, robust_stats, stats_of, NormStats, DEFAULT_EPSILON};
