//! Length-prefixed binary records exchanged between the server and users.
//!
//! Record layout: `tag: u8 | body_len: u32 LE | body`. Integers are
//! little-endian. Byte strings and lists carry a `u32` length prefix. Ring
//! elements are packed at `ceil(w/8)` bytes each; share limbs at 16 bytes.
//!
//! | tag | message          | direction     |
//! |-----|------------------|---------------|
//! | 1   | ServerCommit     | server → all  |
//! | 2   | Advertise        | user → server |
//! | 3   | TreeCommit       | server → all  |
//! | 4   | RevealRu         | user → server |
//! | 5   | PeerAssignment   | server → user |
//! | 6   | ShareBundle      | user → server |
//! | 7   | RelayedShares    | server → user |
//! | 8   | UploadRequest    | server → user |
//! | 9   | MaskedInput      | user → server |
//! | 10  | UnmaskRequest    | server → user |
//! | 11  | UnmaskResponse   | user → server |
//! | 12  | ExclusionRequest | server → user |
//! | 13  | ExclusionReply   | user → server |
//! | 14  | SetupOpening     | server → all  |

use thiserror::Error;

use crate::crypto::Commitment;
use crate::orgtree::SetupSecret;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("record truncated")]
    Truncated,
    #[error("unknown record tag {0}")]
    UnknownTag(u8),
    #[error("declared length {declared} but {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid field value")]
    InvalidField,
}

pub type Handle = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SecretKind {
    /// Share of the masking secret key `s^SK`.
    SKey,
    /// Share of the self-mask seed `b_u`.
    SelfMask,
}

impl SecretKind {
    pub fn label(self) -> u8 {
        match self {
            SecretKind::SKey => 1,
            SecretKind::SelfMask => 2,
        }
    }

    fn from_label(v: u8) -> Result<Self, WireError> {
        match v {
            1 => Ok(SecretKind::SKey),
            2 => Ok(SecretKind::SelfMask),
            _ => Err(WireError::InvalidField),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPeer {
    pub handle: Handle,
    pub public: Vec<u8>,
    /// True when this user adds the pairwise mask, false when it subtracts.
    pub adds: bool,
    /// Inter-group edge: mask the low lane only.
    pub inter: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharePeer {
    pub handle: Handle,
    pub public: Vec<u8>,
    /// Evaluation point of this recipient's share.
    pub index: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareEnvelope {
    pub handle: Handle,
    pub kind: SecretKind,
    pub sealed: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleasedShare {
    pub handle: Handle,
    pub kind: SecretKind,
    pub limbs: Vec<u128>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ServerCommit {
        share_rs: Commitment,
        mask_rs: Commitment,
    },
    Advertise {
        c_pub: Vec<u8>,
        s_pub: Vec<u8>,
        share_ru: Commitment,
        mask_ru: Commitment,
    },
    TreeCommit {
        tree: Commitment,
        users: Vec<(Commitment, Commitment)>,
    },
    RevealRu {
        share: SetupSecret,
        mask: SetupSecret,
    },
    PeerAssignment {
        round: u32,
        threshold: u16,
        own_index: u16,
        mask_peers: Vec<MaskPeer>,
        share_peers: Vec<SharePeer>,
    },
    ShareBundle(Vec<ShareEnvelope>),
    RelayedShares(Vec<ShareEnvelope>),
    UploadRequest {
        inactive: Vec<Handle>,
    },
    MaskedInput {
        word_bytes: u8,
        lanes: Vec<Vec<u64>>,
    },
    UnmaskRequest(Vec<(Handle, SecretKind)>),
    UnmaskResponse {
        released: Vec<ReleasedShare>,
        refused: Vec<Handle>,
    },
    ExclusionRequest(Vec<Handle>),
    ExclusionReply(Vec<(Handle, [u8; 32])>),
    SetupOpening {
        tree_payload: Vec<u8>,
        tree_nonce: [u8; 16],
        share_rs: SetupSecret,
        mask_rs: SetupSecret,
        reveals: Vec<(SetupSecret, SetupSecret)>,
    },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("list fits u32"));
    }
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.raw(b);
    }
    fn secret(&mut self, s: &SetupSecret) {
        self.raw(&s.value);
        self.raw(&s.nonce);
    }
    fn envelopes(&mut self, items: &[ShareEnvelope]) {
        self.len(items.len());
        for e in items {
            self.u64(e.handle);
            self.u8(e.kind.label());
            self.bytes(&e.sealed);
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.0.len() < n {
            return Err(WireError::Truncated);
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn u128(&mut self) -> Result<u128, WireError> {
        Ok(u128::from_le_bytes(self.arr()?))
    }
    fn len(&mut self) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        // every list element occupies at least one byte
        if n > self.0.len() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }
    fn commitment(&mut self) -> Result<Commitment, WireError> {
        Ok(Commitment(self.arr()?))
    }
    fn secret(&mut self) -> Result<SetupSecret, WireError> {
        Ok(SetupSecret {
            value: self.arr()?,
            nonce: self.arr()?,
        })
    }
    fn flag(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::InvalidField),
        }
    }
    fn envelopes(&mut self) -> Result<Vec<ShareEnvelope>, WireError> {
        let n = self.len()?;
        (0..n)
            .map(|_| {
                Ok(ShareEnvelope {
                    handle: self.u64()?,
                    kind: SecretKind::from_label(self.u8()?)?,
                    sealed: self.bytes()?,
                })
            })
            .collect()
    }
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ServerCommit { .. } => 1,
            Message::Advertise { .. } => 2,
            Message::TreeCommit { .. } => 3,
            Message::RevealRu { .. } => 4,
            Message::PeerAssignment { .. } => 5,
            Message::ShareBundle(_) => 6,
            Message::RelayedShares(_) => 7,
            Message::UploadRequest { .. } => 8,
            Message::MaskedInput { .. } => 9,
            Message::UnmaskRequest(_) => 10,
            Message::UnmaskResponse { .. } => 11,
            Message::ExclusionRequest(_) => 12,
            Message::ExclusionReply(_) => 13,
            Message::SetupOpening { .. } => 14,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::ServerCommit { .. } => "server-commit",
            Message::Advertise { .. } => "advertise",
            Message::TreeCommit { .. } => "tree-commit",
            Message::RevealRu { .. } => "reveal-ru",
            Message::PeerAssignment { .. } => "peer-assignment",
            Message::ShareBundle(_) => "share-bundle",
            Message::RelayedShares(_) => "relayed-shares",
            Message::UploadRequest { .. } => "upload-request",
            Message::MaskedInput { .. } => "masked-input",
            Message::UnmaskRequest(_) => "unmask-request",
            Message::UnmaskResponse { .. } => "unmask-response",
            Message::ExclusionRequest(_) => "exclusion-request",
            Message::ExclusionReply(_) => "exclusion-reply",
            Message::SetupOpening { .. } => "setup-opening",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        match self {
            Message::ServerCommit { share_rs, mask_rs } => {
                w.raw(&share_rs.0);
                w.raw(&mask_rs.0);
            }
            Message::Advertise {
                c_pub,
                s_pub,
                share_ru,
                mask_ru,
            } => {
                w.bytes(c_pub);
                w.bytes(s_pub);
                w.raw(&share_ru.0);
                w.raw(&mask_ru.0);
            }
            Message::TreeCommit { tree, users } => {
                w.raw(&tree.0);
                w.len(users.len());
                for (a, b) in users {
                    w.raw(&a.0);
                    w.raw(&b.0);
                }
            }
            Message::RevealRu { share, mask } => {
                w.secret(share);
                w.secret(mask);
            }
            Message::PeerAssignment {
                round,
                threshold,
                own_index,
                mask_peers,
                share_peers,
            } => {
                w.u32(*round);
                w.u16(*threshold);
                w.u16(*own_index);
                w.len(mask_peers.len());
                for p in mask_peers {
                    w.u64(p.handle);
                    w.bytes(&p.public);
                    w.u8(p.adds as u8);
                    w.u8(p.inter as u8);
                }
                w.len(share_peers.len());
                for p in share_peers {
                    w.u64(p.handle);
                    w.bytes(&p.public);
                    w.u16(p.index);
                }
            }
            Message::ShareBundle(items) | Message::RelayedShares(items) => w.envelopes(items),
            Message::UploadRequest { inactive } => {
                w.len(inactive.len());
                inactive.iter().for_each(|&h| w.u64(h));
            }
            Message::MaskedInput { word_bytes, lanes } => {
                w.u8(*word_bytes);
                w.len(lanes.len());
                for lane in lanes {
                    w.len(lane.len());
                    for &e in lane {
                        w.raw(&e.to_le_bytes()[..*word_bytes as usize]);
                    }
                }
            }
            Message::UnmaskRequest(items) => {
                w.len(items.len());
                for (h, k) in items {
                    w.u64(*h);
                    w.u8(k.label());
                }
            }
            Message::UnmaskResponse { released, refused } => {
                w.len(released.len());
                for r in released {
                    w.u64(r.handle);
                    w.u8(r.kind.label());
                    w.len(r.limbs.len());
                    r.limbs.iter().for_each(|&l| w.u128(l));
                }
                w.len(refused.len());
                refused.iter().for_each(|&h| w.u64(h));
            }
            Message::ExclusionRequest(handles) => {
                w.len(handles.len());
                handles.iter().for_each(|&h| w.u64(h));
            }
            Message::ExclusionReply(seeds) => {
                w.len(seeds.len());
                for (h, s) in seeds {
                    w.u64(*h);
                    w.raw(s);
                }
            }
            Message::SetupOpening {
                tree_payload,
                tree_nonce,
                share_rs,
                mask_rs,
                reveals,
            } => {
                w.bytes(tree_payload);
                w.raw(tree_nonce);
                w.secret(share_rs);
                w.secret(mask_rs);
                w.len(reveals.len());
                for (a, b) in reveals {
                    w.secret(a);
                    w.secret(b);
                }
            }
        }
        let body = w.0;
        let mut out = Vec::with_capacity(body.len() + 5);
        out.push(self.tag());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        if bytes.len() < 5 {
            return Err(WireError::Truncated);
        }
        let tag = bytes[0];
        let declared = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if declared != bytes.len() - 5 {
            return Err(WireError::LengthMismatch {
                declared,
                actual: bytes.len() - 5,
            });
        }
        let mut r = Reader(&bytes[5..]);
        let msg = match tag {
            1 => Message::ServerCommit {
                share_rs: r.commitment()?,
                mask_rs: r.commitment()?,
            },
            2 => Message::Advertise {
                c_pub: r.bytes()?,
                s_pub: r.bytes()?,
                share_ru: r.commitment()?,
                mask_ru: r.commitment()?,
            },
            3 => {
                let tree = r.commitment()?;
                let n = r.len()?;
                let users = (0..n)
                    .map(|_| Ok((r.commitment()?, r.commitment()?)))
                    .collect::<Result<_, WireError>>()?;
                Message::TreeCommit { tree, users }
            }
            4 => Message::RevealRu {
                share: r.secret()?,
                mask: r.secret()?,
            },
            5 => {
                let round = r.u32()?;
                let threshold = r.u16()?;
                let own_index = r.u16()?;
                let n = r.len()?;
                let mask_peers = (0..n)
                    .map(|_| {
                        Ok(MaskPeer {
                            handle: r.u64()?,
                            public: r.bytes()?,
                            adds: r.flag()?,
                            inter: r.flag()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                let n = r.len()?;
                let share_peers = (0..n)
                    .map(|_| {
                        Ok(SharePeer {
                            handle: r.u64()?,
                            public: r.bytes()?,
                            index: r.u16()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                Message::PeerAssignment {
                    round,
                    threshold,
                    own_index,
                    mask_peers,
                    share_peers,
                }
            }
            6 => Message::ShareBundle(r.envelopes()?),
            7 => Message::RelayedShares(r.envelopes()?),
            8 => {
                let n = r.len()?;
                Message::UploadRequest {
                    inactive: (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?,
                }
            }
            9 => {
                let word_bytes = r.u8()?;
                if word_bytes == 0 || word_bytes > 8 {
                    return Err(WireError::InvalidField);
                }
                let nl = r.len()?;
                let mut lanes = Vec::with_capacity(nl);
                for _ in 0..nl {
                    let n = r.len()?;
                    let raw = r.take(n * word_bytes as usize)?;
                    lanes.push(
                        raw.chunks(word_bytes as usize)
                            .map(|c| {
                                let mut b = [0u8; 8];
                                b[..c.len()].copy_from_slice(c);
                                u64::from_le_bytes(b)
                            })
                            .collect(),
                    );
                }
                Message::MaskedInput { word_bytes, lanes }
            }
            10 => {
                let n = r.len()?;
                Message::UnmaskRequest(
                    (0..n)
                        .map(|_| Ok((r.u64()?, SecretKind::from_label(r.u8()?)?)))
                        .collect::<Result<_, WireError>>()?,
                )
            }
            11 => {
                let n = r.len()?;
                let released = (0..n)
                    .map(|_| {
                        let handle = r.u64()?;
                        let kind = SecretKind::from_label(r.u8()?)?;
                        let nl = r.len()?;
                        let limbs = (0..nl).map(|_| r.u128()).collect::<Result<_, _>>()?;
                        Ok(ReleasedShare {
                            handle,
                            kind,
                            limbs,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                let n = r.len()?;
                let refused = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                Message::UnmaskResponse { released, refused }
            }
            12 => {
                let n = r.len()?;
                Message::ExclusionRequest((0..n).map(|_| r.u64()).collect::<Result<_, _>>()?)
            }
            13 => {
                let n = r.len()?;
                Message::ExclusionReply(
                    (0..n)
                        .map(|_| Ok((r.u64()?, r.arr()?)))
                        .collect::<Result<_, WireError>>()?,
                )
            }
            14 => {
                let tree_payload = r.bytes()?;
                let tree_nonce = r.arr()?;
                let share_rs = r.secret()?;
                let mask_rs = r.secret()?;
                let n = r.len()?;
                let reveals = (0..n)
                    .map(|_| Ok((r.secret()?, r.secret()?)))
                    .collect::<Result<_, WireError>>()?;
                Message::SetupOpening {
                    tree_payload,
                    tree_nonce,
                    share_rs,
                    mask_rs,
                    reveals,
                }
            }
            t => return Err(WireError::UnknownTag(t)),
        };
        if !r.0.is_empty() {
            return Err(WireError::LengthMismatch {
                declared,
                actual: declared - r.0.len(),
            });
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secret(b: u8) -> SetupSecret {
        SetupSecret {
            value: [b; 32],
            nonce: [b ^ 0xff; 16],
        }
    }

    fn samples() -> Vec<Message> {
        vec![
            Message::ServerCommit {
                share_rs: Commitment([1; 32]),
                mask_rs: Commitment([2; 32]),
            },
            Message::Advertise {
                c_pub: vec![1, 2, 3],
                s_pub: vec![4; 8],
                share_ru: Commitment([3; 32]),
                mask_ru: Commitment([4; 32]),
            },
            Message::TreeCommit {
                tree: Commitment([5; 32]),
                users: vec![(Commitment([6; 32]), Commitment([7; 32]))],
            },
            Message::RevealRu {
                share: secret(1),
                mask: secret(2),
            },
            Message::PeerAssignment {
                round: 3,
                threshold: 4,
                own_index: 2,
                mask_peers: vec![MaskPeer {
                    handle: 9,
                    public: vec![7; 8],
                    adds: true,
                    inter: false,
                }],
                share_peers: vec![SharePeer {
                    handle: 10,
                    public: vec![8; 8],
                    index: 3,
                }],
            },
            Message::ShareBundle(vec![ShareEnvelope {
                handle: 1,
                kind: SecretKind::SKey,
                sealed: vec![0; 20],
            }]),
            Message::RelayedShares(vec![ShareEnvelope {
                handle: 2,
                kind: SecretKind::SelfMask,
                sealed: vec![1; 3],
            }]),
            Message::UploadRequest {
                inactive: vec![5, 6],
            },
            Message::MaskedInput {
                word_bytes: 4,
                lanes: vec![vec![0xdead_beef, 1], vec![2, 3]],
            },
            Message::UnmaskRequest(vec![(1, SecretKind::SelfMask), (2, SecretKind::SKey)]),
            Message::UnmaskResponse {
                released: vec![ReleasedShare {
                    handle: 4,
                    kind: SecretKind::SKey,
                    limbs: vec![u128::MAX >> 1, 7],
                }],
                refused: vec![8],
            },
            Message::ExclusionRequest(vec![11]),
            Message::ExclusionReply(vec![(11, [9; 32])]),
            Message::SetupOpening {
                tree_payload: vec![1, 2],
                tree_nonce: [3; 16],
                share_rs: secret(4),
                mask_rs: secret(5),
                reveals: vec![(secret(6), secret(7))],
            },
        ]
    }

    #[test]
    fn round_trip_all_messages() {
        for m in samples() {
            let enc = m.encode();
            assert_eq!(enc[0], m.tag());
            assert_eq!(Message::decode(&enc).unwrap(), m, "{}", m.name());
        }
    }

    #[test]
    fn malformed_records() {
        let enc = samples()[1].encode();
        assert_eq!(Message::decode(&enc[..3]), Err(WireError::Truncated));
        assert!(matches!(
            Message::decode(&enc[..enc.len() - 1]),
            Err(WireError::LengthMismatch { .. })
        ));
        let mut bad = enc.clone();
        bad[0] = 99;
        assert_eq!(Message::decode(&bad), Err(WireError::UnknownTag(99)));
        let mut kind = Message::UnmaskRequest(vec![(1, SecretKind::SKey)]).encode();
        let last = kind.len() - 1;
        kind[last] = 7;
        assert_eq!(Message::decode(&kind), Err(WireError::InvalidField));
    }

    #[test]
    fn masked_input_packs_words() {
        let m = Message::MaskedInput {
            word_bytes: 4,
            lanes: vec![vec![0; 100], vec![0; 100]],
        };
        assert_eq!(m.encode().len(), 5 + 1 + 4 + 2 * (4 + 400));
    }
}
