//! In-memory star transport: users talk only to the server, one phase at a
//! time. Every message is encoded, counted, and decoded on delivery.

use serde::Serialize;
use thiserror::Error;

use crate::wire::{Message, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundPhase {
    Commit,
    Advertise,
    TreeCommit,
    Reveal,
    Assign,
    Share,
    Relay,
    Upload,
    Unmask,
    Exclusion,
    Opening,
}

impl RoundPhase {
    /// Whether `msg` may travel during this phase.
    pub fn admits(self, msg: &Message) -> bool {
        use Message::*;
        matches!(
            (self, msg),
            (RoundPhase::Commit, ServerCommit { .. })
                | (RoundPhase::Advertise, Advertise { .. })
                | (RoundPhase::TreeCommit, TreeCommit { .. })
                | (RoundPhase::Reveal, RevealRu { .. })
                | (RoundPhase::Assign, PeerAssignment { .. })
                | (RoundPhase::Share, ShareBundle(_))
                | (RoundPhase::Relay, RelayedShares(_))
                | (RoundPhase::Upload, UploadRequest { .. } | MaskedInput { .. })
                | (RoundPhase::Unmask, UnmaskRequest(_) | UnmaskResponse { .. })
                | (RoundPhase::Exclusion, ExclusionRequest(_) | ExclusionReply(_))
                | (RoundPhase::Opening, SetupOpening { .. })
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("phase {next:?} cannot follow {current:?}")]
    PhaseOrder { current: RoundPhase, next: RoundPhase },
    #[error("{msg} not allowed in phase {phase:?}")]
    WrongPhase { phase: RoundPhase, msg: &'static str },
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrafficTotals {
    pub messages: u64,
    pub server_sent: u64,
    pub server_received: u64,
    pub user_sent: Vec<u64>,
    pub user_received: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct StarTransport {
    phase: Option<RoundPhase>,
    traffic: TrafficTotals,
}

impl StarTransport {
    pub fn new(users: usize) -> Self {
        Self {
            phase: None,
            traffic: TrafficTotals {
                user_sent: vec![0; users],
                user_received: vec![0; users],
                ..Default::default()
            },
        }
    }

    pub fn begin_round(&mut self) {
        self.phase = None;
    }

    pub fn enter(&mut self, next: RoundPhase) -> Result<(), TransportError> {
        if let Some(current) = self.phase {
            if next <= current {
                return Err(TransportError::PhaseOrder { current, next });
            }
        }
        self.phase = Some(next);
        Ok(())
    }

    fn carry(&mut self, msg: &Message) -> Result<(Message, u64), TransportError> {
        let phase = self.phase.unwrap_or(RoundPhase::Commit);
        if !phase.admits(msg) {
            return Err(TransportError::WrongPhase {
                phase,
                msg: msg.name(),
            });
        }
        let bytes = msg.encode();
        self.traffic.messages += 1;
        Ok((Message::decode(&bytes)?, bytes.len() as u64))
    }

    pub fn to_server(&mut self, user: usize, msg: &Message) -> Result<Message, TransportError> {
        let (m, n) = self.carry(msg)?;
        self.traffic.user_sent[user] += n;
        self.traffic.server_received += n;
        Ok(m)
    }

    pub fn to_user(&mut self, user: usize, msg: &Message) -> Result<Message, TransportError> {
        let (m, n) = self.carry(msg)?;
        self.traffic.server_sent += n;
        self.traffic.user_received[user] += n;
        Ok(m)
    }

    /// Delivers one server message to every listed user. The payload is
    /// encoded once but counted once per recipient.
    pub fn broadcast(&mut self, users: impl IntoIterator<Item = usize>, msg: &Message) -> Result<Message, TransportError> {
        let (m, n) = self.carry(msg)?;
        self.traffic.messages -= 1;
        for u in users {
            self.traffic.messages += 1;
            self.traffic.server_sent += n;
            self.traffic.user_received[u] += n;
        }
        Ok(m)
    }

    pub fn traffic(&self) -> &TrafficTotals {
        &self.traffic
    }

    pub fn reset_traffic(&mut self) {
        let users = self.traffic.user_sent.len();
        self.traffic = StarTransport::new(users).traffic;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_are_ordered() {
        let mut t = StarTransport::new(2);
        t.enter(RoundPhase::Advertise).unwrap();
        t.enter(RoundPhase::Upload).unwrap();
        assert!(matches!(t.enter(RoundPhase::Share), Err(TransportError::PhaseOrder { .. })));
        let msg = Message::UploadRequest { inactive: vec![1] };
        let got = t.to_user(1, &msg).unwrap();
        assert_eq!(got, msg);
        assert!(t.traffic().user_received[1] > 0);
        assert!(matches!(
            t.to_server(0, &Message::ExclusionRequest(vec![])),
            Err(TransportError::WrongPhase { .. })
        ));
    }
}
