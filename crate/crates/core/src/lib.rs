//! Tree-grouped secure aggregation with partial parameter disclosure.

pub mod adversary;
pub mod aggserver;
pub mod baseline;
pub mod crypto;
pub mod detection;
pub mod numeric;
pub mod orgtree;
pub mod sim;
pub mod useragent;
pub mod wire;
