//! Full-pairwise double-mask aggregation: every user masks with all `N-1`
//! others and shares its secrets `t`-out-of-`N`.
//!
//! The protocol runs on the same [`UserAgent`]/[`AggServer`] pair as the
//! tree protocol with [`TopologyMode::Complete`] and single-lane uploads; this
//! module holds the standalone masking rule and cost formulas.
//!
//! [`UserAgent`]: crate::useragent::UserAgent
//! [`AggServer`]: crate::aggserver::AggServer

use crate::aggserver::TopologyMode;
use crate::crypto::prg_expand;
use crate::numeric::{ParamVector, Sign};
use crate::orgtree::TreeConfig;
use crate::useragent::MaskLayout;

/// `y = x + PRG(b) + sum_{v>u} PRG(s_uv) - sum_{v<u} PRG(s_uv)`.
///
/// `peers` holds `(seed, u < v)` for every other user.
pub fn baseline_mask(x: &ParamVector, self_seed: &[u8; 32], peers: &[([u8; 32], bool)]) -> ParamVector {
    let spec = *x.spec();
    let mut y = x.clone();
    y.add_slice(prg_expand(self_seed, x.len(), &spec).as_slice(), Sign::Plus);
    for (seed, lower) in peers {
        let sign = if *lower { Sign::Plus } else { Sign::Minus };
        y.add_slice(prg_expand(seed, x.len(), &spec).as_slice(), sign);
    }
    y
}

/// Default baseline threshold: a strict majority of `N`.
pub fn default_threshold(users: usize) -> usize {
    users / 2 + 1
}

pub fn topology_mode(users: usize, threshold: Option<usize>) -> TopologyMode {
    TopologyMode::Complete {
        threshold: threshold.unwrap_or_else(|| default_threshold(users)),
    }
}

pub const LAYOUT: MaskLayout = MaskLayout::Flat;

/// PRG expansions per user in the baseline: one per peer plus the self mask.
pub fn baseline_prg_per_user(users: usize) -> usize {
    users
}

/// PRG expansions per user in the tree protocol with full peer sets.
pub fn tree_prg_per_user(tree: &TreeConfig) -> usize {
    2 * tree.kappa_intra + tree.height as usize * tree.inter_per_layer() + 1
}
