//! MapReduce over an encrypted content-based publish/subscribe router.
//!
//! Job coordination, code provisioning, data splitting, shuffling and
//! result collection are all publications routed by header matching. User
//! map/reduce logic is a sandboxed Lua script hosted inside a simulated
//! sealed region, and every frame outside a region is encrypted.

pub mod region;
pub mod wire;
pub mod router;
pub mod transport;
pub mod script;
pub mod job;
pub mod worker;
pub mod kmeans;
pub mod client;
pub mod deploy;
pub mod bench;

/// Reference scripts shipped with the crate.
pub mod scripts {
    /// Word count mapper with combine and first-byte hash.
    pub const WORDCOUNT_MAP: &str = include_str!("../scripts/wordcount_map.lua");
    pub const WORDCOUNT_REDUCE: &str = include_str!("../scripts/wordcount_reduce.lua");
    /// k-means assignment step; reads `shared_state.centers`.
    pub const KMEANS_MAP: &str = include_str!("../scripts/kmeans_map.lua");
    /// k-means update step; sums points in sorted order.
    pub const KMEANS_REDUCE: &str = include_str!("../scripts/kmeans_reduce.lua");
}
