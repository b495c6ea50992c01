//! Server state machine: tree setup, share relay, dropout recovery,
//! per-subgroup aggregation with high-lane disclosure, exclusion of flagged
//! subgroups, and the FedSGD update.
//!
//! The server never holds an individual unmasked input: it stores masked
//! uploads and per-leaf partial sums only, and leaves with fewer than two
//! survivors are voided instead of disclosed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::shamir::{combine_bytes, lagrange_at_zero, PrimeField};
use crate::crypto::{commit, derive_shared, randomize_pub, CryptoError, DhGroup};
use crate::numeric::{LaneVector, NumericError, ParamVector, SegmentSpec, Sign};
use crate::orgtree::{
    assign_subgroups, derive_identity, finalize_identities, Assignment, OrgError, Party,
    SetupSecret, Topology, TreeConfig,
};
use crate::useragent::apply_seed_mask;
use crate::wire::{Handle, MaskPeer, Message, SecretKind, ShareEnvelope, SharePeer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("protocol step out of order: {0}")]
    OutOfOrder(&'static str),
    #[error("unexpected message {got} from user {user}")]
    Unexpected { user: usize, got: &'static str },
    #[error("user {user}: {kind:?} secret unrecoverable ({have} of {need} shares)")]
    Unrecoverable {
        user: usize,
        kind: SecretKind,
        have: usize,
        need: usize,
    },
    #[error("malformed upload from user {0}")]
    BadUpload(usize),
    #[error("excluded subgroup edge of user {0} could not be cancelled")]
    ExclusionFailed(usize),
    #[error(transparent)]
    Setup(#[from] OrgError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// How users are grouped and paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyMode {
    /// Committed random tree with partial disclosure per leaf.
    Tree(TreeConfig),
    /// Everyone in one group, all pairs masked, `threshold`-of-N sharing.
    Complete { threshold: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerCounters {
    pub key_agreements: u64,
    pub randomizations: u64,
    pub prg_expansions: u64,
    pub prg_elements: u64,
    pub reconstructions: u64,
    pub dropout_cancellations: u64,
    pub exclusion_cancellations: u64,
}

/// Per-leaf partial sum as seen by the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupAggregate {
    pub leaf: usize,
    /// Sum of the survivors' balanced high parts; `None` for void leaves.
    pub revealed_high: Option<ParamVector>,
    pub survivors: usize,
    pub members: Vec<usize>,
}

impl SubgroupAggregate {
    pub fn is_void(&self) -> bool {
        self.revealed_high.is_none()
    }
}

/// Result of [`AggServer::finalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSum {
    pub sum: ParamVector,
    /// Users whose uploads entered the sum.
    pub aggregated: usize,
    /// Users replaced by the current model (excluded leaves).
    pub substituted: usize,
}

impl GlobalSum {
    pub fn contributions(&self) -> usize {
        self.aggregated + self.substituted
    }
}

#[derive(Debug, Clone)]
struct Edge {
    inter: bool,
    /// `handles[0]` is held by the lower-indexed end.
    handles: [Handle; 2],
    /// Randomized public key given to each end.
    given: [BigUint; 2],
}

#[derive(Debug, Clone)]
struct Advert {
    c_pub: BigUint,
    s_pub: BigUint,
    c_raw: Vec<u8>,
    s_raw: Vec<u8>,
    share_ru: crate::crypto::Commitment,
    mask_ru: crate::crypto::Commitment,
}

#[derive(Debug, Clone, Default)]
struct RoundState {
    round: u32,
    share_rs: Option<SetupSecret>,
    mask_rs: Option<SetupSecret>,
    tree_nonce: [u8; 16],
    adverts: Vec<Option<Advert>>,
    reveals: Vec<Option<(SetupSecret, SetupSecret)>>,
    topology: Option<Topology>,
    edges: BTreeMap<(usize, usize), Edge>,
    mask_lookup: Vec<BTreeMap<Handle, usize>>,
    share_handle: BTreeMap<(usize, usize), Handle>,
    share_lookup: Vec<BTreeMap<Handle, usize>>,
    bundles: BTreeMap<usize, Vec<ShareEnvelope>>,
    inputs: BTreeMap<usize, Vec<ParamVector>>,
    collected: BTreeMap<(usize, SecretKind), Vec<(u128, Vec<u128>)>>,
    self_seeds: BTreeMap<usize, [u8; 32]>,
    s_secrets: BTreeMap<usize, BigUint>,
    leaf_sums: Vec<Vec<ParamVector>>,
    survivors: Vec<Vec<usize>>,
    excluded: BTreeSet<usize>,
    pending_exclusion: BTreeMap<usize, Vec<(usize, Handle)>>,
}

#[derive(Clone)]
pub struct AggServer {
    group: Arc<DhGroup>,
    field: PrimeField,
    spec: SegmentSpec,
    model_len: usize,
    mode: TopologyMode,
    rng: ChaCha20Rng,
    counters: ServerCounters,
    state: RoundState,
    grinding: bool,
    /// Lagrange weights by share-index set.
    weights: HashMap<Vec<u128>, Vec<u128>>,
}

impl AggServer {
    pub fn new(
        group: Arc<DhGroup>,
        spec: SegmentSpec,
        model_len: usize,
        mode: TopologyMode,
        rng_seed: [u8; 32],
    ) -> Self {
        Self {
            group,
            field: PrimeField::mersenne127(),
            spec,
            model_len,
            mode,
            rng: ChaCha20Rng::from_seed(rng_seed),
            counters: ServerCounters::default(),
            state: RoundState::default(),
            grinding: false,
            weights: HashMap::new(),
        }
    }

    pub fn counters(&self) -> ServerCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = ServerCounters::default();
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.state.topology.as_ref()
    }

    fn lanes(&self) -> usize {
        match self.mode {
            TopologyMode::Tree(_) => 2,
            TopologyMode::Complete { .. } => 1,
        }
    }

    fn users(&self) -> usize {
        self.state.adverts.len()
    }

    /// Opens a round for `users` registered participants. In tree mode the
    /// returned commitment to `R_s` must reach every user before they
    /// advertise.
    pub fn start_round(&mut self, round: u32, users: usize) -> Option<Message> {
        self.state = RoundState {
            round,
            adverts: vec![None; users],
            reveals: vec![None; users],
            mask_lookup: vec![BTreeMap::new(); users],
            share_lookup: vec![BTreeMap::new(); users],
            ..RoundState::default()
        };
        match self.mode {
            TopologyMode::Tree(_) => {
                let share = SetupSecret::random(&mut self.rng);
                let mask = SetupSecret::random(&mut self.rng);
                self.rng.fill_bytes(&mut self.state.tree_nonce);
                self.state.share_rs = Some(share);
                self.state.mask_rs = Some(mask);
                Some(Message::ServerCommit {
                    share_rs: share.commitment(),
                    mask_rs: mask.commitment(),
                })
            }
            TopologyMode::Complete { .. } => None,
        }
    }

    pub fn receive_advertise(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::Advertise {
            c_pub,
            s_pub,
            share_ru,
            mask_ru,
        } = msg
        else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        let advert = Advert {
            c_pub: self.group.decode_element(c_pub)?,
            s_pub: self.group.decode_element(s_pub)?,
            c_raw: c_pub.clone(),
            s_raw: s_pub.clone(),
            share_ru: *share_ru,
            mask_ru: *mask_ru,
        };
        *self
            .state
            .adverts
            .get_mut(user)
            .ok_or(ServerError::Unexpected {
                user,
                got: msg.name(),
            })? = Some(advert);
        Ok(())
    }

    /// Fixes the tree shape and broadcasts its commitment with the list of
    /// every user's `R_u` commitments.
    pub fn tree_commit(&mut self) -> Result<Message, ServerError> {
        let TopologyMode::Tree(tree) = self.mode else {
            return Err(ServerError::OutOfOrder("tree commit without a tree"));
        };
        let mut users = Vec::with_capacity(self.users());
        for a in &self.state.adverts {
            let a = a.as_ref().ok_or(ServerError::OutOfOrder("missing advertisement"))?;
            users.push((a.share_ru, a.mask_ru));
        }
        let tree = commit(&tree.commit_payload(self.users()), &self.state.tree_nonce)?;
        Ok(Message::TreeCommit { tree, users })
    }

    pub fn receive_reveal(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::RevealRu { share, mask } = msg else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        let a = self.state.adverts[user]
            .as_ref()
            .ok_or(ServerError::OutOfOrder("reveal before advertise"))?;
        if !share.opens(&a.share_ru) || !mask.opens(&a.mask_ru) {
            return Err(OrgError::OpeningMismatch(Party::User(user)).into());
        }
        self.state.reveals[user] = Some((*share, *mask));
        Ok(())
    }

    fn fresh_handle(&mut self, used: &mut BTreeSet<Handle>) -> Handle {
        loop {
            let h = self.rng.next_u64();
            if used.insert(h) {
                return h;
            }
        }
    }

    fn build_tree_assignments(&self, tree: &TreeConfig) -> Result<Topology, ServerError> {
        let n = self.users();
        tree.validate(n)?;
        let share_rs = self.state.share_rs.unwrap().value;
        let mask_rs = self.state.mask_rs.unwrap().value;
        let mut share_pre = Vec::with_capacity(n);
        let mut mask_pre = Vec::with_capacity(n);
        for u in 0..n {
            let a = self.state.adverts[u].as_ref().expect("advertised");
            let (rs, rm) = self.state.reveals[u]
                .ok_or(ServerError::OutOfOrder("missing reveal"))?;
            share_pre.push(derive_identity(&share_rs, &a.c_raw, &rs.value));
            mask_pre.push(derive_identity(&mask_rs, &a.s_raw, &rm.value));
        }
        let share = assign_subgroups(&finalize_identities(&share_pre), tree)?;
        let mask = assign_subgroups(&finalize_identities(&mask_pre), tree)?;
        Ok(Topology::from_tree(share, mask, tree))
    }

    /// Builds both trees, draws randomizers and handles, and returns each
    /// user's peer assignment.
    pub fn assign_peers(&mut self) -> Result<Vec<(usize, Message)>, ServerError> {
        let n = self.users();
        if self.state.adverts.iter().any(Option::is_none) {
            return Err(ServerError::OutOfOrder("missing advertisement"));
        }
        if self.grinding {
            if let Some(s) = self.state.mask_rs.as_mut() {
                s.value[0] ^= 1;
            }
        }
        let topo = match self.mode {
            TopologyMode::Tree(tree) => self.build_tree_assignments(&tree)?,
            TopologyMode::Complete { threshold } => {
                if threshold < 2 || threshold > n {
                    return Err(OrgError::InvalidTree(format!(
                        "threshold {threshold} invalid for {n} users"
                    ))
                    .into());
                }
                Topology::complete(n, threshold)
            }
        };
        let mut used = BTreeSet::new();
        let mut edges = BTreeMap::new();
        for u in 0..n {
            for (&v, inter) in topo.peers[u]
                .intra
                .iter()
                .map(|v| (v, false))
                .chain(topo.peers[u].inter.iter().map(|v| (v, true)))
            {
                if v < u {
                    continue;
                }
                let r = self.group.random_exponent(&mut self.rng);
                let au = self.state.adverts[u].as_ref().unwrap();
                let av = self.state.adverts[v].as_ref().unwrap();
                let given = [
                    randomize_pub(&self.group, &av.s_pub, &r)?,
                    randomize_pub(&self.group, &au.s_pub, &r)?,
                ];
                self.counters.randomizations += 2;
                let handles = [self.fresh_handle(&mut used), self.fresh_handle(&mut used)];
                self.state.mask_lookup[u].insert(handles[0], v);
                self.state.mask_lookup[v].insert(handles[1], u);
                edges.insert(
                    (u, v),
                    Edge {
                        inter,
                        handles,
                        given,
                    },
                );
            }
        }
        // share links: randomized c-keys inside each sharing group
        let mut share_given: BTreeMap<(usize, usize), BigUint> = BTreeMap::new();
        for members in &topo.share.leaves {
            for (i, &u) in members.iter().enumerate() {
                for &v in &members[i + 1..] {
                    let r = self.group.random_exponent(&mut self.rng);
                    let au = self.state.adverts[u].as_ref().unwrap();
                    let av = self.state.adverts[v].as_ref().unwrap();
                    share_given.insert((u, v), randomize_pub(&self.group, &av.c_pub, &r)?);
                    share_given.insert((v, u), randomize_pub(&self.group, &au.c_pub, &r)?);
                    self.counters.randomizations += 2;
                    for (holder, target) in [(u, v), (v, u)] {
                        let h = self.fresh_handle(&mut used);
                        self.state.share_handle.insert((holder, target), h);
                        self.state.share_lookup[holder].insert(h, target);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(n);
        for u in 0..n {
            let mut mask_peers = Vec::new();
            for &v in topo.peers[u].intra.iter().chain(&topo.peers[u].inter) {
                let (key, end) = if u < v { ((u, v), 0) } else { ((v, u), 1) };
                let e = &edges[&key];
                mask_peers.push(MaskPeer {
                    handle: e.handles[end],
                    public: self.group.encode(&e.given[end]),
                    adds: topo.adds(u, v),
                    inter: e.inter,
                });
            }
            mask_peers.sort_by_key(|p| p.handle);
            let leaf = topo.share.leaf_of[u];
            let mut share_peers: Vec<SharePeer> = topo.share.leaves[leaf]
                .iter()
                .filter(|&&v| v != u)
                .map(|&v| SharePeer {
                    handle: self.state.share_handle[&(u, v)],
                    public: self.group.encode(&share_given[&(u, v)]),
                    index: topo.share.position[v] as u16 + 1,
                })
                .collect();
            share_peers.sort_by_key(|p| p.handle);
            out.push((
                u,
                Message::PeerAssignment {
                    round: self.state.round,
                    threshold: topo.threshold as u16,
                    own_index: topo.share.position[u] as u16 + 1,
                    mask_peers,
                    share_peers,
                },
            ));
        }
        self.state.edges = edges;
        self.state.topology = Some(topo);
        Ok(out)
    }

    pub fn receive_share_bundle(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::ShareBundle(items) = msg else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        self.state.bundles.insert(user, items.clone());
        Ok(())
    }

    fn shared(&self, u: usize) -> bool {
        self.state.bundles.contains_key(&u)
    }

    /// Forwards every envelope to its recipient, relabelled with the
    /// recipient's handle for the sender.
    pub fn relay_shares(&self) -> Vec<(usize, Message)> {
        let mut per: BTreeMap<usize, Vec<ShareEnvelope>> = BTreeMap::new();
        for (&sender, items) in &self.state.bundles {
            for e in items {
                let Some(&recipient) = self.state.share_lookup[sender].get(&e.handle) else {
                    continue;
                };
                let Some(&h) = self.state.share_handle.get(&(recipient, sender)) else {
                    continue;
                };
                per.entry(recipient).or_default().push(ShareEnvelope {
                    handle: h,
                    kind: e.kind,
                    sealed: e.sealed.clone(),
                });
            }
        }
        self.state
            .bundles
            .keys()
            .map(|&u| (u, Message::RelayedShares(per.remove(&u).unwrap_or_default())))
            .collect()
    }

    /// Tells each user which of its mask peers never shared and must be
    /// left out of its mask.
    pub fn upload_requests(&self) -> Vec<(usize, Message)> {
        self.state
            .bundles
            .keys()
            .map(|&u| {
                let inactive = self.state.mask_lookup[u]
                    .iter()
                    .filter(|(_, &v)| !self.shared(v))
                    .map(|(&h, _)| h)
                    .collect();
                (u, Message::UploadRequest { inactive })
            })
            .collect()
    }

    pub fn receive_input(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::MaskedInput { lanes, .. } = msg else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        if !self.shared(user)
            || lanes.len() != self.lanes()
            || lanes.iter().any(|l| l.len() != self.model_len)
        {
            return Err(ServerError::BadUpload(user));
        }
        let lanes = lanes
            .iter()
            .map(|l| ParamVector::from_elems(l.clone(), self.spec))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ServerError::BadUpload(user))?;
        self.state.inputs.insert(user, lanes);
        Ok(())
    }

    /// Users whose masked input arrived.
    pub fn online(&self) -> Vec<usize> {
        self.state.inputs.keys().copied().collect()
    }

    /// Users that shared but never uploaded.
    pub fn dropped(&self) -> Vec<usize> {
        self.state
            .bundles
            .keys()
            .copied()
            .filter(|u| !self.state.inputs.contains_key(u))
            .collect()
    }

    /// For every sharing user, asks for self-mask shares of online members
    /// and key shares of dropped members of its sharing group.
    pub fn unmask_requests(&self) -> Vec<(usize, Message)> {
        let topo = self.state.topology.as_ref().expect("assigned");
        self.state
            .bundles
            .keys()
            .map(|&v| {
                let leaf = topo.share.leaf_of[v];
                let items = topo.share.leaves[leaf]
                    .iter()
                    .filter(|&&u| u != v && self.shared(u))
                    .map(|&u| {
                        let kind = if self.state.inputs.contains_key(&u) {
                            SecretKind::SelfMask
                        } else {
                            SecretKind::SKey
                        };
                        (self.state.share_handle[&(v, u)], kind)
                    })
                    .collect();
                (v, Message::UnmaskRequest(items))
            })
            .collect()
    }

    pub fn receive_unmask(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::UnmaskResponse { released, .. } = msg else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        let topo = self.state.topology.as_ref().expect("assigned");
        let x = topo.share.position[user] as u128 + 1;
        for r in released {
            let Some(&target) = self.state.share_lookup[user].get(&r.handle) else {
                continue;
            };
            let expected = if self.state.inputs.contains_key(&target) {
                SecretKind::SelfMask
            } else {
                SecretKind::SKey
            };
            if r.kind != expected {
                continue;
            }
            self.state
                .collected
                .entry((target, r.kind))
                .or_default()
                .push((x, r.limbs.clone()));
        }
        Ok(())
    }

    fn rebuild(&mut self, user: usize, kind: SecretKind, len: usize) -> Result<Vec<u8>, ServerError> {
        let need = self.state.topology.as_ref().unwrap().threshold;
        let pts = self
            .state
            .collected
            .get(&(user, kind))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        if pts.len() < need {
            return Err(ServerError::Unrecoverable {
                user,
                kind,
                have: pts.len(),
                need,
            });
        }
        let refs: Vec<(u128, &[u128])> = pts[..need].iter().map(|(i, l)| (*i, l.as_slice())).collect();
        let idx: Vec<u128> = refs.iter().map(|r| r.0).collect();
        let basis = match self.weights.get(&idx) {
            Some(b) => b,
            None => {
                let b = lagrange_at_zero(&idx, &self.field)?;
                self.weights.entry(idx).or_insert(b)
            }
        };
        self.counters.reconstructions += 1;
        Ok(combine_bytes(&refs, basis, len, &self.field)?)
    }

    /// Reconstructs `b_u` for online users and `s^SK` for dropped ones.
    pub fn recover(&mut self) -> Result<(), ServerError> {
        for u in self.online() {
            let b = self.rebuild(u, SecretKind::SelfMask, 32)?;
            self.state.self_seeds.insert(u, b.try_into().unwrap());
        }
        let width = self.group.element_bytes();
        for d in self.dropped() {
            let raw = self.rebuild(d, SecretKind::SKey, width)?;
            let s = self.group.decode_exponent(&raw)?;
            self.state.s_secrets.insert(d, s);
        }
        Ok(())
    }

    fn edge_seed_from_secret(&mut self, owner: usize, other: usize, secret: &BigUint) -> [u8; 32] {
        let (key, end) = if owner < other {
            ((owner, other), 0)
        } else {
            ((other, owner), 1)
        };
        self.counters.key_agreements += 1;
        derive_shared(&self.group, secret, &self.state.edges[&key].given[end]).0
    }

    fn edge_is_inter(&self, a: usize, b: usize) -> bool {
        self.state.edges[&(a.min(b), a.max(b))].inter
    }

    /// Sums survivors per masking leaf, strips self masks and the masks
    /// shared with dropped peers, and exposes each leaf's high lane.
    pub fn aggregate_subgroups(&mut self) -> Result<Vec<SubgroupAggregate>, ServerError> {
        let topo = self.state.topology.clone().ok_or(ServerError::OutOfOrder("aggregate"))?;
        let lanes = self.lanes();
        let g = topo.mask.leaves.len();
        let mut sums = vec![vec![ParamVector::zeros(self.model_len, self.spec); lanes]; g];
        let mut survivors = vec![Vec::new(); g];
        let mut scratch = Vec::new();
        let online = self.online();
        for &u in &online {
            let leaf = topo.mask.leaf_of[u];
            survivors[leaf].push(u);
            for (s, l) in sums[leaf].iter_mut().zip(&self.state.inputs[&u]) {
                s.add_assign_mod(l)?;
            }
            let b = self.state.self_seeds.get(&u).copied().ok_or(ServerError::OutOfOrder(
                "aggregate before recovery",
            ))?;
            self.counters.prg_elements +=
                apply_seed_mask(&mut sums[leaf], &b, false, Sign::Minus, &mut scratch);
            self.counters.prg_expansions += 1;
        }
        for d in self.dropped() {
            let s = self.state.s_secrets[&d].clone();
            let peers: Vec<usize> = topo.peers[d]
                .intra
                .iter()
                .chain(&topo.peers[d].inter)
                .copied()
                .filter(|u| self.state.inputs.contains_key(u))
                .collect();
            for u in peers {
                let seed = self.edge_seed_from_secret(d, u, &s);
                let inter = self.edge_is_inter(u, d);
                let sign = if topo.adds(u, d) { Sign::Minus } else { Sign::Plus };
                let leaf = topo.mask.leaf_of[u];
                self.counters.prg_elements +=
                    apply_seed_mask(&mut sums[leaf], &seed, inter, sign, &mut scratch);
                self.counters.prg_expansions += 1;
                self.counters.dropout_cancellations += 1;
            }
        }
        let aggregates = (0..g)
            .map(|leaf| SubgroupAggregate {
                leaf,
                revealed_high: (lanes == 2 && survivors[leaf].len() >= 2)
                    .then(|| sums[leaf][0].clone()),
                survivors: survivors[leaf].len(),
                members: topo.mask.leaves[leaf].clone(),
            })
            .collect();
        self.state.leaf_sums = sums;
        self.state.survivors = survivors;
        Ok(aggregates)
    }

    /// Marks flagged leaves (plus void ones) as excluded and asks survivors
    /// in kept leaves for the seeds of their edges into excluded leaves.
    pub fn exclusion_requests(&mut self, flagged: &BTreeSet<usize>) -> Vec<(usize, Message)> {
        let topo = self.state.topology.as_ref().expect("assigned");
        let mut excluded = flagged.clone();
        if self.lanes() == 2 {
            for (leaf, s) in self.state.survivors.iter().enumerate() {
                if s.len() < 2 {
                    excluded.insert(leaf);
                }
            }
        }
        let mut pending: BTreeMap<usize, Vec<(usize, Handle)>> = BTreeMap::new();
        for (&(a, b), e) in &self.state.edges {
            if !e.inter {
                continue;
            }
            let (la, lb) = (topo.mask.leaf_of[a], topo.mask.leaf_of[b]);
            let both_online =
                self.state.inputs.contains_key(&a) && self.state.inputs.contains_key(&b);
            if !both_online || excluded.contains(&la) == excluded.contains(&lb) {
                continue;
            }
            let (keep, other, end) = if excluded.contains(&lb) { (a, b, 0) } else { (b, a, 1) };
            pending.entry(keep).or_default().push((other, e.handles[end]));
        }
        self.state.excluded = excluded;
        let out = pending
            .iter()
            .map(|(&u, items)| {
                (
                    u,
                    Message::ExclusionRequest(items.iter().map(|&(_, h)| h).collect()),
                )
            })
            .collect();
        self.state.pending_exclusion = pending;
        out
    }

    pub fn receive_exclusion_reply(&mut self, user: usize, msg: &Message) -> Result<(), ServerError> {
        let Message::ExclusionReply(seeds) = msg else {
            return Err(ServerError::Unexpected {
                user,
                got: msg.name(),
            });
        };
        let topo = self.state.topology.clone().expect("assigned");
        let Some(items) = self.state.pending_exclusion.remove(&user) else {
            return Ok(());
        };
        let mut scratch = Vec::new();
        let leaf = topo.mask.leaf_of[user];
        for (other, h) in items {
            let seed = seeds
                .iter()
                .find(|(sh, _)| *sh == h)
                .map(|(_, s)| *s)
                .ok_or(ServerError::ExclusionFailed(user))?;
            let sign = if topo.adds(user, other) { Sign::Minus } else { Sign::Plus };
            self.counters.prg_elements +=
                apply_seed_mask(&mut self.state.leaf_sums[leaf], &seed, true, sign, &mut scratch);
            self.counters.prg_expansions += 1;
            self.counters.exclusion_cancellations += 1;
        }
        Ok(())
    }

    /// Global sum over kept leaves. With `substitute`, each excluded leaf
    /// contributes `survivors * X_t` instead of its members' inputs.
    pub fn finalize(&mut self, x_t: &ParamVector, substitute: bool) -> Result<GlobalSum, ServerError> {
        if let Some((&u, _)) = self.state.pending_exclusion.iter().next() {
            return Err(ServerError::ExclusionFailed(u));
        }
        let lanes = self.lanes();
        let mut total = vec![ParamVector::zeros(self.model_len, self.spec); lanes];
        let mut aggregated = 0usize;
        let mut substituted = 0usize;
        for (leaf, sums) in self.state.leaf_sums.iter().enumerate() {
            let n = self.state.survivors[leaf].len();
            if self.state.excluded.contains(&leaf) {
                substituted += n;
                continue;
            }
            aggregated += n;
            for (t, s) in total.iter_mut().zip(sums) {
                t.add_assign_mod(s)?;
            }
        }
        let mut sum = if lanes == 2 {
            LaneVector {
                high: total[0].clone(),
                low: total[1].clone(),
            }
            .decode(aggregated as u64)
        } else {
            total.swap_remove(0)
        };
        if substitute && substituted > 0 {
            sum.add_assign_mod(&x_t.scale_mod(substituted as u64))?;
        } else {
            substituted = 0;
        }
        Ok(GlobalSum {
            sum,
            aggregated,
            substituted,
        })
    }

    /// Post-upload opening of `T`, `R_s` and every `R_u`.
    pub fn opening(&self) -> Result<Message, ServerError> {
        let TopologyMode::Tree(tree) = self.mode else {
            return Err(ServerError::OutOfOrder("opening without a tree"));
        };
        let reveals = self
            .state
            .reveals
            .iter()
            .map(|r| r.ok_or(ServerError::OutOfOrder("missing reveal")))
            .collect::<Result<_, _>>()?;
        Ok(Message::SetupOpening {
            tree_payload: tree.commit_payload(self.users()),
            tree_nonce: self.state.tree_nonce,
            share_rs: self.state.share_rs.unwrap(),
            mask_rs: self.state.mask_rs.unwrap(),
            reveals,
        })
    }

    /// Makes the server swap its masking-tree `R_s` after seeing the users'
    /// reveals, as a server grinding for a favourable tree would.
    #[doc(hidden)]
    pub fn set_grinding(&mut self, on: bool) {
        self.grinding = on;
    }

    /// Users in each masking leaf that survived to upload.
    pub fn survivors(&self) -> &[Vec<usize>] {
        &self.state.survivors
    }

    pub fn mask_assignment(&self) -> Option<&Assignment> {
        self.state.topology.as_ref().map(|t| &t.mask)
    }
}

/// `X_{t+1} = X_t + (eta/N)(S - N X_t)` in real arithmetic, re-quantized.
pub fn fedsgd_update(
    x_t: &ParamVector,
    sum: &ParamVector,
    n: usize,
    eta: f64,
) -> Result<ParamVector, NumericError> {
    let spec = *x_t.spec();
    let x = x_t.dequantize();
    let s = sum.dequantize();
    let nf = n as f64;
    let next: Vec<f64> = x
        .iter()
        .zip(&s)
        .map(|(&xi, &si)| xi + eta / nf * (si - nf * xi))
        .collect();
    ParamVector::quantize(&next, spec)
}
