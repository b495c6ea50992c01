//! Per-user protocol state machine.
//!
//! A user only ever sees opaque peer handles and server-randomized public
//! keys. Phases advance monotonically within a round:
//! `Advertise → Commit → Share → Upload → Unmask`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::shamir::{share_bytes, PrimeField};
use crate::crypto::{
    derive_shared, open, prg_fill, seal, Commitment, CryptoError, DhGroup, KeyPair, ShareKey,
};
use crate::numeric::{LaneVector, ParamVector, SegmentSpec, Sign};
use crate::orgtree::{OrgError, Party, SetupSecret};
use crate::wire::{Handle, MaskPeer, Message, ReleasedShare, SecretKind, ShareEnvelope};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UserError {
    #[error("message {got} not valid in phase {phase:?}")]
    Phase { phase: Phase, got: &'static str },
    #[error("{recipients} recipients plus the retained share cannot meet threshold {threshold}")]
    TooFewRecipients { recipients: usize, threshold: usize },
    #[error("share from handle {0} rejected: {1}")]
    BadShare(Handle, CryptoError),
    #[error("missing seed for peer handle {0}")]
    MissingSeed(Handle),
    #[error("input uses a different segment spec")]
    SpecMismatch,
    #[error("setup verification failed: {0}")]
    Verification(OrgError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    Advertise,
    Commit,
    Share,
    Upload,
    Unmask,
}

/// How a masked input is laid out on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLayout {
    /// One lane, every pairwise mask over the whole word.
    Flat,
    /// High and low lanes; inter-group masks touch only the low lane.
    Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UserCounters {
    pub key_agreements: u64,
    pub prg_expansions: u64,
    pub prg_elements: u64,
    pub shares_created: u64,
}

#[derive(Debug, Clone)]
struct PeerSeed {
    seed: [u8; 32],
    adds: bool,
    inter: bool,
}

#[derive(Debug, Clone)]
struct ShareLink {
    key: ShareKey,
    index: u16,
}

/// Adds `±` the mask expanded from `seed` to an upload.
///
/// Intra edges and self masks draw `2m` words (high lane, then low lane);
/// inter edges draw `m` words onto the low lane only. Flat uploads draw `m`.
pub fn apply_seed_mask(
    lanes: &mut [ParamVector],
    seed: &[u8; 32],
    inter: bool,
    sign: Sign,
    scratch: &mut Vec<u64>,
) -> u64 {
    let m = lanes[0].len();
    let spec = *lanes[0].spec();
    match (lanes.len(), inter) {
        (1, _) => {
            scratch.resize(m, 0);
            prg_fill(seed, scratch, &spec);
            lanes[0].add_slice(scratch, sign);
            m as u64
        }
        (_, true) => {
            scratch.resize(m, 0);
            prg_fill(seed, scratch, &spec);
            lanes[1].add_slice(scratch, sign);
            m as u64
        }
        _ => {
            scratch.resize(2 * m, 0);
            prg_fill(seed, scratch, &spec);
            lanes[0].add_slice(&scratch[..m], sign);
            lanes[1].add_slice(&scratch[m..], sign);
            2 * m as u64
        }
    }
}

fn limbs_to_bytes(limbs: &[u128]) -> Vec<u8> {
    limbs.iter().flat_map(|l| l.to_le_bytes()).collect()
}

fn bytes_to_limbs(b: &[u8]) -> Option<Vec<u128>> {
    if b.len() % 16 != 0 {
        return None;
    }
    Some(
        b.chunks(16)
            .map(|c| u128::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

#[derive(Clone)]
pub struct UserAgent {
    index: usize,
    group: Arc<DhGroup>,
    field: PrimeField,
    spec: SegmentSpec,
    layout: MaskLayout,
    rng: ChaCha20Rng,
    phase: Phase,
    round: u32,
    c_keys: Option<KeyPair>,
    s_keys: Option<KeyPair>,
    self_seed: [u8; 32],
    share_secret: Option<SetupSecret>,
    mask_secret: Option<SetupSecret>,
    server_commit: Option<(Commitment, Commitment)>,
    tree_commit: Option<(Commitment, Vec<(Commitment, Commitment)>)>,
    mask_peers: BTreeMap<Handle, PeerSeed>,
    share_links: BTreeMap<Handle, ShareLink>,
    threshold: usize,
    held: BTreeMap<(Handle, SecretKind), Vec<u128>>,
    released: BTreeMap<Handle, SecretKind>,
    counters: UserCounters,
}

impl UserAgent {
    /// `rng_seed` should be unique per user and run.
    pub fn new(
        index: usize,
        group: Arc<DhGroup>,
        spec: SegmentSpec,
        layout: MaskLayout,
        rng_seed: [u8; 32],
    ) -> Self {
        Self {
            index,
            group,
            field: PrimeField::mersenne127(),
            spec,
            layout,
            rng: ChaCha20Rng::from_seed(rng_seed),
            phase: Phase::Idle,
            round: 0,
            c_keys: None,
            s_keys: None,
            self_seed: [0; 32],
            share_secret: None,
            mask_secret: None,
            server_commit: None,
            tree_commit: None,
            mask_peers: BTreeMap::new(),
            share_links: BTreeMap::new(),
            threshold: 0,
            held: BTreeMap::new(),
            released: BTreeMap::new(),
            counters: UserCounters::default(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn counters(&self) -> UserCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = UserCounters::default();
    }

    /// Number of masking peers assigned this round.
    pub fn mask_peer_count(&self) -> usize {
        self.mask_peers.len()
    }

    /// Handles this user knows about; the only peer information it holds.
    pub fn visible_handles(&self) -> Vec<Handle> {
        self.mask_peers
            .keys()
            .chain(self.share_links.keys())
            .copied()
            .collect()
    }

    fn expect(&self, phase: Phase, got: &'static str) -> Result<(), UserError> {
        if self.phase != phase {
            return Err(UserError::Phase {
                phase: self.phase,
                got,
            });
        }
        Ok(())
    }

    /// Starts a round: the issuance stub hands out fresh s- and c-key pairs
    /// and the self-mask seed is redrawn.
    pub fn begin_round(&mut self, round: u32) {
        self.round = round;
        self.c_keys = Some(self.group.keygen(&mut self.rng));
        self.s_keys = Some(self.group.keygen(&mut self.rng));
        self.rng.fill_bytes(&mut self.self_seed);
        self.share_secret = Some(SetupSecret::random(&mut self.rng));
        self.mask_secret = Some(SetupSecret::random(&mut self.rng));
        self.server_commit = None;
        self.tree_commit = None;
        self.mask_peers.clear();
        self.share_links.clear();
        self.held.clear();
        self.released.clear();
        self.phase = Phase::Advertise;
    }

    /// Public keys plus commitments to this round's `R_u` values. With
    /// `server_commit` absent (no tree setup) the commitments are unused.
    pub fn advertise(&mut self, server_commit: Option<&Message>) -> Result<Message, UserError> {
        self.expect(Phase::Advertise, "advertise")?;
        if let Some(m) = server_commit {
            match m {
                Message::ServerCommit { share_rs, mask_rs } => {
                    self.server_commit = Some((*share_rs, *mask_rs))
                }
                other => {
                    return Err(UserError::Phase {
                        phase: self.phase,
                        got: other.name(),
                    })
                }
            }
        }
        let c = self.c_keys.as_ref().expect("keys issued");
        let s = self.s_keys.as_ref().expect("keys issued");
        self.phase = Phase::Commit;
        Ok(Message::Advertise {
            c_pub: self.group.encode(&c.public),
            s_pub: self.group.encode(&s.public),
            share_ru: self.share_secret.unwrap().commitment(),
            mask_ru: self.mask_secret.unwrap().commitment(),
        })
    }

    /// Answers the tree commitment by opening `R_u` for both trees.
    pub fn reveal(&mut self, tree_commit: &Message) -> Result<Message, UserError> {
        self.expect(Phase::Commit, "reveal")?;
        let Message::TreeCommit { tree, users } = tree_commit else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: tree_commit.name(),
            });
        };
        self.tree_commit = Some((*tree, users.clone()));
        Ok(Message::RevealRu {
            share: self.share_secret.unwrap(),
            mask: self.mask_secret.unwrap(),
        })
    }

    /// Derives pairwise seeds and share keys, then emits encrypted shares of
    /// `s^SK` and `b_u` for every other member of the sharing subgroup.
    pub fn distribute_shares(&mut self, assignment: &Message) -> Result<Message, UserError> {
        self.expect(Phase::Commit, "peer-assignment")?;
        let Message::PeerAssignment {
            threshold,
            mask_peers,
            share_peers,
            own_index,
            ..
        } = assignment
        else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: assignment.name(),
            });
        };
        let threshold = *threshold as usize;
        if share_peers.len() + 1 < threshold {
            return Err(UserError::TooFewRecipients {
                recipients: share_peers.len(),
                threshold,
            });
        }
        self.threshold = threshold;
        let s = self.s_keys.clone().expect("keys issued");
        let c = self.c_keys.clone().expect("keys issued");
        for MaskPeer {
            handle,
            public,
            adds,
            inter,
        } in mask_peers
        {
            let peer = self.group.decode_element(public)?;
            let seed = derive_shared(&self.group, &s.secret, &peer).0;
            self.counters.key_agreements += 1;
            self.mask_peers.insert(
                *handle,
                PeerSeed {
                    seed,
                    adds: *adds,
                    inter: *inter,
                },
            );
        }
        for p in share_peers {
            let peer = self.group.decode_element(&p.public)?;
            let key = ShareKey::from_seed(&derive_shared(&self.group, &c.secret, &peer));
            self.counters.key_agreements += 1;
            self.share_links.insert(
                p.handle,
                ShareLink {
                    key,
                    index: p.index,
                },
            );
        }
        let n = share_peers.len() + 1;
        let s_bytes = self.group.encode(&s.secret);
        let s_shares = share_bytes(&s_bytes, threshold, n, &self.field, &mut self.rng)?;
        let b_shares = share_bytes(&self.self_seed, threshold, n, &self.field, &mut self.rng)?;
        self.counters.shares_created += 2 * n as u64;
        let mut out = Vec::with_capacity(2 * share_peers.len());
        for (handle, link) in &self.share_links {
            let at = link.index as usize - 1;
            for (kind, shares) in [
                (SecretKind::SKey, &s_shares),
                (SecretKind::SelfMask, &b_shares),
            ] {
                out.push(ShareEnvelope {
                    handle: *handle,
                    kind,
                    sealed: seal(&link.key, kind.label(), &limbs_to_bytes(&shares[at])),
                });
            }
        }
        debug_assert!(*own_index as usize <= n);
        self.phase = Phase::Share;
        Ok(Message::ShareBundle(out))
    }

    /// Stores shares relayed from other members after authenticating them.
    pub fn receive_shares(&mut self, relayed: &Message) -> Result<(), UserError> {
        self.expect(Phase::Share, "relayed-shares")?;
        let Message::RelayedShares(items) = relayed else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: relayed.name(),
            });
        };
        for env in items {
            let link = self
                .share_links
                .get(&env.handle)
                .ok_or(UserError::BadShare(env.handle, CryptoError::AuthFailed))?;
            let plain = open(&link.key, env.kind.label(), &env.sealed)
                .map_err(|e| UserError::BadShare(env.handle, e))?;
            let limbs = bytes_to_limbs(&plain)
                .ok_or(UserError::BadShare(env.handle, CryptoError::BadElement))?;
            self.held.insert((env.handle, env.kind), limbs);
        }
        Ok(())
    }

    /// Masks the input. `inactive` lists peer handles that never shared and
    /// are therefore skipped.
    pub fn mask_input(&mut self, x: &ParamVector, request: &Message) -> Result<Message, UserError> {
        self.expect(Phase::Share, "upload-request")?;
        let Message::UploadRequest { inactive } = request else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: request.name(),
            });
        };
        if x.spec() != &self.spec {
            return Err(UserError::SpecMismatch);
        }
        let mut lanes = match self.layout {
            MaskLayout::Flat => vec![x.clone()],
            MaskLayout::Split => {
                let l = LaneVector::encode(x);
                vec![l.high, l.low]
            }
        };
        let mut scratch = Vec::new();
        self.counters.prg_elements +=
            apply_seed_mask(&mut lanes, &self.self_seed, false, Sign::Plus, &mut scratch);
        self.counters.prg_expansions += 1;
        for (h, p) in &self.mask_peers {
            if inactive.contains(h) {
                continue;
            }
            let sign = if p.adds { Sign::Plus } else { Sign::Minus };
            self.counters.prg_elements +=
                apply_seed_mask(&mut lanes, &p.seed, p.inter, sign, &mut scratch);
            self.counters.prg_expansions += 1;
        }
        self.phase = Phase::Upload;
        Ok(Message::MaskedInput {
            word_bytes: self.spec.word_bytes() as u8,
            lanes: lanes.into_iter().map(ParamVector::into_elems).collect(),
        })
    }

    /// Releases the requested share type per target, refusing any request
    /// that would hand out both types for the same target this round.
    pub fn unmask_response(&mut self, request: &Message) -> Result<Message, UserError> {
        if self.phase != Phase::Upload && self.phase != Phase::Unmask && self.phase != Phase::Share {
            return Err(UserError::Phase {
                phase: self.phase,
                got: request.name(),
            });
        }
        let Message::UnmaskRequest(items) = request else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: request.name(),
            });
        };
        self.phase = Phase::Unmask;
        let mut released = Vec::new();
        let mut refused = Vec::new();
        for &(handle, kind) in items {
            match self.released.get(&handle) {
                Some(&prev) if prev != kind => {
                    refused.push(handle);
                    continue;
                }
                _ => {}
            }
            match self.held.get(&(handle, kind)) {
                Some(limbs) => {
                    self.released.insert(handle, kind);
                    released.push(ReleasedShare {
                        handle,
                        kind,
                        limbs: limbs.clone(),
                    });
                }
                None => refused.push(handle),
            }
        }
        Ok(Message::UnmaskResponse { released, refused })
    }

    /// Discloses pairwise seeds of inter-group edges named by the server so
    /// an excluded subgroup's masks can be removed from this user's side.
    /// Intra-group handles are never answered.
    pub fn exclusion_reply(&mut self, request: &Message) -> Result<Message, UserError> {
        if self.phase != Phase::Unmask {
            return Err(UserError::Phase {
                phase: self.phase,
                got: request.name(),
            });
        }
        let Message::ExclusionRequest(handles) = request else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: request.name(),
            });
        };
        Ok(Message::ExclusionReply(
            handles
                .iter()
                .filter_map(|h| {
                    self.mask_peers
                        .get(h)
                        .filter(|p| p.inter)
                        .map(|p| (*h, p.seed))
                })
                .collect(),
        ))
    }

    /// Checks the server's post-upload opening against every commitment seen
    /// during setup.
    pub fn verify_opening(&self, opening: &Message) -> Result<(), UserError> {
        let Message::SetupOpening {
            tree_payload,
            tree_nonce,
            share_rs,
            mask_rs,
            reveals,
        } = opening
        else {
            return Err(UserError::Phase {
                phase: self.phase,
                got: opening.name(),
            });
        };
        let fail = |p| UserError::Verification(OrgError::OpeningMismatch(p));
        let (c_share, c_mask) = self.server_commit.ok_or(fail(Party::Server))?;
        let (c_tree, users) = self.tree_commit.as_ref().ok_or(fail(Party::Server))?;
        if !share_rs.opens(&c_share)
            || !mask_rs.opens(&c_mask)
            || !crate::crypto::verify(c_tree, tree_payload, tree_nonce)
        {
            return Err(fail(Party::Server));
        }
        if reveals.len() != users.len() {
            return Err(fail(Party::Server));
        }
        for (u, ((rs, rm), (cs, cm))) in reveals.iter().zip(users).enumerate() {
            if !rs.opens(cs) || !rm.opens(cm) {
                return Err(fail(Party::User(u)));
            }
        }
        let own = users.get(self.index).ok_or(fail(Party::Server))?;
        if own.0 != self.share_secret.unwrap().commitment()
            || own.1 != self.mask_secret.unwrap().commitment()
        {
            return Err(fail(Party::Server));
        }
        Ok(())
    }

    #[doc(hidden)]
    pub fn self_seed(&self) -> [u8; 32] {
        self.self_seed
    }

    #[doc(hidden)]
    pub fn s_secret(&self) -> Option<&BigUint> {
        self.s_keys.as_ref().map(|k| &k.secret)
    }
}
