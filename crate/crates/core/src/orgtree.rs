//! Oblivious random grouping: commitment-ordered identities, leaf
//! assignment and the intra/inter peer rules of the masking tree.
//!
//! Leaves are numbered `0..d^h`; digit `l-1` of a leaf index in base `d` is
//! its ancestor's position under the layer-`l` parent. Inter-group peers at
//! layer `l` sit at the same relative position in the leaf whose layer-`l`
//! digit differs by `±1..=kappa_inter` (mod `d`) and whose other digits match.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{commit, sha256, verify, Commitment};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrgError {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("{users} users cannot fill {leaves} subgroups of at least two")]
    TooFewUsers { users: usize, leaves: usize },
    #[error("commitment opening failed for {0}")]
    OpeningMismatch(Party),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Server,
    User(usize),
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Party::Server => write!(f, "server"),
            Party::User(u) => write!(f, "user {u}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub height: u32,
    pub degree: u32,
    pub kappa_intra: usize,
    pub kappa_inter: usize,
    /// Share threshold; `None` picks a strict majority of the smallest subgroup.
    pub threshold: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            height: 3,
            degree: 3,
            kappa_intra: 2,
            kappa_inter: 1,
            threshold: None,
        }
    }
}

impl TreeConfig {
    pub fn new(height: u32, degree: u32, kappa_intra: usize) -> Self {
        Self {
            height,
            degree,
            kappa_intra,
            ..Self::default()
        }
    }

    pub fn leaf_count(&self) -> usize {
        (self.degree as usize).pow(self.height)
    }

    /// Largest subgroup size, `ceil(N / G)`.
    pub fn subgroup_size(&self, users: usize) -> usize {
        users.div_ceil(self.leaf_count())
    }

    pub fn min_subgroup_size(&self, users: usize) -> usize {
        users / self.leaf_count()
    }

    pub fn threshold_for(&self, users: usize) -> usize {
        self.threshold
            .unwrap_or_else(|| self.min_subgroup_size(users) / 2 + 1)
    }

    /// Distinct inter peers per layer when every subgroup is full.
    pub fn inter_per_layer(&self) -> usize {
        (2 * self.kappa_inter).min(self.degree as usize - 1)
    }

    pub fn validate(&self, users: usize) -> Result<(), OrgError> {
        if self.height == 0 || self.degree < 2 {
            return Err(OrgError::InvalidTree(format!(
                "height {} and degree {} must be at least 1 and 2",
                self.height, self.degree
            )));
        }
        if self.kappa_intra == 0 {
            return Err(OrgError::InvalidTree("kappa_intra must be positive".into()));
        }
        if (self.degree as u64).checked_pow(self.height).is_none_or(|g| g > 1 << 20) {
            return Err(OrgError::InvalidTree("tree too large".into()));
        }
        let g = self.leaf_count();
        if users < 2 * g {
            return Err(OrgError::TooFewUsers { users, leaves: g });
        }
        let n_min = self.min_subgroup_size(users);
        if n_min < 2 * self.kappa_intra + 1 {
            return Err(OrgError::InvalidTree(format!(
                "subgroup size {n_min} below 2*kappa+1 = {}",
                2 * self.kappa_intra + 1
            )));
        }
        let t = self.threshold_for(users);
        if t < 2 || t > n_min - 1 {
            return Err(OrgError::InvalidTree(format!(
                "threshold {t} must lie in [2, {}]",
                n_min - 1
            )));
        }
        Ok(())
    }

    /// Canonical bytes committed to by the server before identities exist.
    pub fn commit_payload(&self, users: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        out.extend_from_slice(b"tree");
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.degree.to_le_bytes());
        out.extend_from_slice(&(self.kappa_intra as u64).to_le_bytes());
        out.extend_from_slice(&(self.kappa_inter as u64).to_le_bytes());
        out.extend_from_slice(&(self.threshold_for(users) as u64).to_le_bytes());
        out.extend_from_slice(&(users as u64).to_le_bytes());
        out
    }
}

/// Which of the two independent trees an identity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeRole {
    /// Secret-sharing tree, derived from c-keys.
    Share,
    /// Masking tree, derived from s-keys.
    Mask,
}

/// A committed random contribution (`R_s` or `R_u`) and its opening nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetupSecret {
    pub value: [u8; 32],
    pub nonce: [u8; 16],
}

impl SetupSecret {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut value = [0u8; 32];
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut value);
        rng.fill_bytes(&mut nonce);
        Self { value, nonce }
    }

    pub fn commitment(&self) -> Commitment {
        commit(&self.value, &self.nonce).expect("16-byte nonce")
    }

    pub fn opens(&self, c: &Commitment) -> bool {
        verify(c, &self.value, &self.nonce)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub owner: usize,
    pub preliminary: [u8; 32],
    pub finalized: [u8; 32],
}

pub fn derive_identity(r_s: &[u8; 32], public_key: &[u8], r_u: &[u8; 32]) -> [u8; 32] {
    sha256(&[b"safeagg/id", r_s, public_key, r_u])
}

/// `final_u = H(XOR_{v != u} prelim_v)`, computed in O(N) from the total XOR.
pub fn finalize_identities(preliminary: &[[u8; 32]]) -> Vec<Identity> {
    let mut all = [0u8; 32];
    for p in preliminary {
        for (a, b) in all.iter_mut().zip(p) {
            *a ^= b;
        }
    }
    preliminary
        .iter()
        .enumerate()
        .map(|(owner, p)| {
            let mut others = all;
            for (a, b) in others.iter_mut().zip(p) {
                *a ^= b;
            }
            Identity {
                owner,
                preliminary: *p,
                finalized: sha256(&[b"safeagg/final-id", &others]),
            }
        })
        .collect()
}

/// User-to-leaf mapping for one tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Members of each leaf in ascending finalized-Id order.
    pub leaves: Vec<Vec<usize>>,
    pub leaf_of: Vec<usize>,
    /// Position of each user inside its leaf.
    pub position: Vec<usize>,
    /// Rank of each user in the global finalized-Id order.
    pub rank: Vec<usize>,
}

impl Assignment {
    pub fn users(&self) -> usize {
        self.leaf_of.len()
    }
}

/// Sorts by finalized Id (ties by owner index) and cuts the order into
/// `G` consecutive runs, the first `N mod G` of which get one extra member.
pub fn assign_subgroups(ids: &[Identity], tree: &TreeConfig) -> Result<Assignment, OrgError> {
    let n_users = ids.len();
    let g = tree.leaf_count();
    if n_users < 2 * g {
        return Err(OrgError::TooFewUsers {
            users: n_users,
            leaves: g,
        });
    }
    let mut order: Vec<&Identity> = ids.iter().collect();
    order.sort_by(|a, b| a.finalized.cmp(&b.finalized).then(a.owner.cmp(&b.owner)));
    let base = n_users / g;
    let extra = n_users % g;
    let mut leaves = Vec::with_capacity(g);
    let mut leaf_of = vec![0; n_users];
    let mut position = vec![0; n_users];
    let mut rank = vec![0; n_users];
    let mut it = order.iter().enumerate();
    for leaf in 0..g {
        let size = base + usize::from(leaf < extra);
        let mut members = Vec::with_capacity(size);
        for pos in 0..size {
            let (r, id) = it.next().expect("sizes sum to N");
            leaf_of[id.owner] = leaf;
            position[id.owner] = pos;
            rank[id.owner] = r;
            members.push(id.owner);
        }
        leaves.push(members);
    }
    Ok(Assignment {
        leaves,
        leaf_of,
        position,
        rank,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSet {
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
}

impl PeerSet {
    pub fn len(&self) -> usize {
        self.intra.len() + self.inter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, v: usize) -> bool {
        self.intra.contains(&v) || self.inter.contains(&v)
    }
}

fn sibling_leaf(leaf: usize, layer: u32, delta: isize, d: usize) -> usize {
    let stride = d.pow(layer - 1);
    let digit = (leaf / stride) % d;
    let moved = (digit as isize + delta).rem_euclid(d as isize) as usize;
    leaf - digit * stride + moved * stride
}

/// Peer sets for every user. Outgoing rule edges are symmetrised, so a user
/// in a full subgroup may gain an extra inter peer from a smaller sibling.
pub fn build_peer_sets(assign: &Assignment, tree: &TreeConfig) -> Vec<PeerSet> {
    let n_users = assign.users();
    let d = tree.degree as usize;
    let mut intra = vec![Vec::new(); n_users];
    let mut inter = vec![Vec::new(); n_users];
    for members in &assign.leaves {
        let size = members.len();
        for (pos, &u) in members.iter().enumerate() {
            for j in 1..=tree.kappa_intra.min(size / 2) {
                for v in [members[(pos + j) % size], members[(pos + size - j) % size]] {
                    if v != u {
                        intra[u].push(v);
                    }
                }
            }
        }
    }
    for (leaf, members) in assign.leaves.iter().enumerate() {
        for (pos, &u) in members.iter().enumerate() {
            for layer in 1..=tree.height {
                for j in 1..=tree.kappa_inter {
                    for delta in [j as isize, -(j as isize)] {
                        let other = sibling_leaf(leaf, layer, delta, d);
                        if other == leaf {
                            continue;
                        }
                        let sib = &assign.leaves[other];
                        let v = sib[pos % sib.len()];
                        inter[u].push(v);
                        inter[v].push(u);
                    }
                }
            }
        }
    }
    intra
        .into_iter()
        .zip(inter)
        .map(|(mut a, mut e)| {
            a.sort_unstable();
            a.dedup();
            e.sort_unstable();
            e.dedup();
            PeerSet { intra: a, inter: e }
        })
        .collect()
}

pub fn peers(u: usize, tree: &TreeConfig, assign: &Assignment) -> PeerSet {
    build_peer_sets(assign, tree).swap_remove(u)
}

/// Full output of a tree setup for one round: both assignments plus the
/// masking peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub share: Assignment,
    pub mask: Assignment,
    pub peers: Vec<PeerSet>,
    pub threshold: usize,
}

impl Topology {
    pub fn from_tree(share: Assignment, mask: Assignment, tree: &TreeConfig) -> Self {
        let peers = build_peer_sets(&mask, tree);
        let threshold = tree.threshold_for(mask.users());
        Self {
            share,
            mask,
            peers,
            threshold,
        }
    }

    /// Single group holding everyone, every pair masked.
    pub fn complete(users: usize, threshold: usize) -> Self {
        let all: Vec<usize> = (0..users).collect();
        let assign = Assignment {
            leaves: vec![all.clone()],
            leaf_of: vec![0; users],
            position: all.clone(),
            rank: all.clone(),
        };
        let peers = (0..users)
            .map(|u| PeerSet {
                intra: all.iter().copied().filter(|&v| v != u).collect(),
                inter: Vec::new(),
            })
            .collect();
        Self {
            share: assign.clone(),
            mask: assign,
            peers,
            threshold,
        }
    }

    pub fn users(&self) -> usize {
        self.mask.users()
    }

    /// Orientation: the lower-ranked end of a pair adds the mask.
    pub fn adds(&self, u: usize, v: usize) -> bool {
        self.mask.rank[u] < self.mask.rank[v]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Fraction of labelled placements of `k` attackers on a ring of `n` slots
/// (i.i.d. uniform) where each attacker sits within `1..=kappa` slots after
/// the previous one, enumerated exhaustively.
pub fn chain_fraction(n: usize, k: usize, kappa: usize) -> f64 {
    let total = n.pow(k as u32);
    let mut hits = 0usize;
    let mut slots = vec![0usize; k];
    for code in 0..total {
        let mut c = code;
        for s in slots.iter_mut() {
            *s = c % n;
            c /= n;
        }
        if slots.windows(2).all(|w| {
            let gap = (w[1] + n - w[0]) % n;
            (1..=kappa).contains(&gap)
        }) {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}
