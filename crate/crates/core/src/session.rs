//! Sequential access to one episode, plus the byte-accounted memory bank.
//!
//! A session hands out support sets strictly in order. Views borrow the
//! session mutably, so in-process a learner cannot hold two support sets at
//! once; the next call invalidates the previous view. Nothing the session
//! keeps can reach an already consumed support set.

use std::sync::Arc;

use thiserror::Error;

use crate::metrics::{atm, AtmReport};
use crate::pack::DatasetPack;
use crate::rng::derive_seed;
use crate::sampler::{Episode, LabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Streaming,
    AwaitingPredictions,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuardError {
    #[error("all support sets have been consumed")]
    StreamExhausted,
    #[error("support set {requested} was already consumed (cursor at {cursor})")]
    PastSetInaccessible { requested: u32, cursor: u32 },
    #[error("support set {requested} requested but set {next} comes next")]
    OutOfOrder { requested: u32, next: u32 },
    #[error("target set unavailable: {cursor} of {nss} support sets consumed")]
    TargetNotYetAvailable { cursor: u32, nss: u32 },
    #[error("predictions submitted before the target set was requested")]
    TargetNotRequested,
    #[error("session is closed")]
    SessionClosed,
    #[error("expected {expected} predictions, got {got}")]
    PredictionShape { expected: usize, got: usize },
    #[error("memory bank is append-only while support sets are streaming")]
    BankAppendOnly,
}

impl GuardError {
    /// Stable snake_case code, also used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            GuardError::StreamExhausted => "stream_exhausted",
            GuardError::PastSetInaccessible { .. } => "past_set_inaccessible",
            GuardError::OutOfOrder { .. } => "out_of_order",
            GuardError::TargetNotYetAvailable { .. } => "target_not_ready",
            GuardError::TargetNotRequested => "target_not_requested",
            GuardError::SessionClosed => "session_closed",
            GuardError::PredictionShape { .. } => "prediction_shape",
            GuardError::BankAppendOnly => "bank_append_only",
        }
    }
}

/// What a bank entry represents. Only representations of inputs count
/// toward across-task memory; label-side bookkeeping is tracked separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Representation,
    Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryEntry {
    pub tag: String,
    /// Empty for entries whose size was only reported (remote clients).
    pub payload: Vec<u8>,
    /// Accounted size in bytes.
    pub len: u64,
    /// Bytes per stored scalar.
    pub element_width: u32,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    total_bytes: u64,
    representation_bytes: u64,
    peak_representation_bytes: u64,
}

impl MemoryBank {
    fn push(&mut self, entry: MemoryEntry) {
        let len = entry.len;
        self.total_bytes += len;
        if entry.kind == EntryKind::Representation {
            self.representation_bytes += len;
            self.peak_representation_bytes =
                self.peak_representation_bytes.max(self.representation_bytes);
        }
        self.entries.push(entry);
    }

    fn evict(&mut self, tag: &str) -> u64 {
        let mut freed = 0;
        self.entries.retain(|e| {
            let keep = e.tag != tag;
            if !keep {
                freed += e.len;
            }
            keep
        });
        // peak stays where it was
        self.recount();
        freed
    }

    fn recount(&mut self) {
        self.total_bytes = self.entries.iter().map(|e| e.len).sum();
        self.representation_bytes = self
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::Representation)
            .map(|e| e.len)
            .sum();
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Most recent entry stored under `tag`.
    pub fn latest(&self, tag: &str) -> Option<&MemoryEntry> {
        self.entries.iter().rev().find(|e| e.tag == tag)
    }

    /// Sum of all live payload lengths.
    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn representation_bytes(&self) -> u64 {
        self.representation_bytes
    }

    /// Largest representation footprint observed so far.
    pub fn peak_representation_bytes(&self) -> u64 {
        self.peak_representation_bytes
    }
}

/// Support set pixels and labels, borrowed from the pack.
#[derive(Debug)]
pub struct SupportView<'a> {
    pub position: u32,
    pub labels: Vec<u32>,
    pub inputs: Vec<&'a [u8]>,
}

impl SupportView<'_> {
    pub fn to_contiguous(&self) -> Vec<u8> {
        self.inputs.concat()
    }
}

/// Target inputs; labels stay inside the session.
#[derive(Debug)]
pub struct TargetView<'a> {
    pub inputs: Vec<&'a [u8]>,
}

impl TargetView<'_> {
    pub fn to_contiguous(&self) -> Vec<u8> {
        self.inputs.concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScore {
    pub episode_index: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub atm: AtmReport,
}

#[derive(Debug)]
pub struct EpisodeSession {
    pack: Arc<DatasetPack>,
    episode: Episode,
    cursor: u32,
    state: SessionState,
    bank: MemoryBank,
}

fn resolve<'a>(pack: &'a DatasetPack, entries: &[LabeledSample]) -> Vec<&'a [u8]> {
    entries
        .iter()
        .map(|e| pack.sample(e.sample.class, e.sample.instance))
        .collect()
}

impl EpisodeSession {
    /// The episode must have been sampled from `pack`.
    pub fn new(pack: Arc<DatasetPack>, episode: Episode) -> Self {
        EpisodeSession {
            pack,
            episode,
            cursor: 0,
            state: SessionState::Streaming,
            bank: MemoryBank::default(),
        }
    }

    pub fn cursor(&self) -> u32 {
        self.cursor
    }

    pub fn nss(&self) -> u32 {
        self.episode.config.nss
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn pack(&self) -> &DatasetPack {
        &self.pack
    }

    pub fn episode_index(&self) -> u64 {
        self.episode.episode_index
    }

    pub fn config(&self) -> &crate::config::TaskConfig {
        &self.episode.config
    }

    pub fn target_len(&self) -> usize {
        self.episode.target_set.entries.len()
    }

    /// Seed for learner-side randomness tied to this episode.
    pub fn seed(&self, base: u64) -> u64 {
        derive_seed(base, self.episode.episode_index)
    }

    pub fn next_support(&mut self) -> Result<SupportView<'_>, GuardError> {
        self.support_at(self.cursor + 1)
    }

    /// Requests support set `position` (1-based). Only `cursor + 1` is served.
    pub fn support_at(&mut self, position: u32) -> Result<SupportView<'_>, GuardError> {
        if self.state == SessionState::Closed {
            return Err(GuardError::SessionClosed);
        }
        if position <= self.cursor {
            return Err(GuardError::PastSetInaccessible {
                requested: position,
                cursor: self.cursor,
            });
        }
        if self.cursor == self.nss() {
            return Err(GuardError::StreamExhausted);
        }
        if position != self.cursor + 1 {
            return Err(GuardError::OutOfOrder {
                requested: position,
                next: self.cursor + 1,
            });
        }
        self.cursor += 1;
        let set = &self.episode.support_sets[(self.cursor - 1) as usize];
        Ok(SupportView {
            position: set.position,
            labels: set.entries.iter().map(|e| e.label).collect(),
            inputs: resolve(&self.pack, &set.entries),
        })
    }

    fn check_open(&self) -> Result<(), GuardError> {
        if self.state == SessionState::Closed {
            Err(GuardError::SessionClosed)
        } else {
            Ok(())
        }
    }

    /// Appends an input representation to the memory bank.
    pub fn store(
        &mut self,
        tag: impl Into<String>,
        payload: Vec<u8>,
        element_width: u32,
    ) -> Result<(), GuardError> {
        self.check_open()?;
        self.bank.push(MemoryEntry {
            tag: tag.into(),
            len: payload.len() as u64,
            payload,
            element_width,
            kind: EntryKind::Representation,
        });
        Ok(())
    }

    /// Accounts for `len` bytes kept elsewhere, e.g. by a remote client.
    pub fn store_reported(
        &mut self,
        tag: impl Into<String>,
        len: u64,
        element_width: u32,
        kind: EntryKind,
    ) -> Result<(), GuardError> {
        self.check_open()?;
        self.bank.push(MemoryEntry {
            tag: tag.into(),
            payload: Vec::new(),
            len,
            element_width,
            kind,
        });
        Ok(())
    }

    /// Appends label-side bookkeeping (class counts, label ids).
    pub fn store_label(&mut self, tag: impl Into<String>, payload: Vec<u8>) -> Result<(), GuardError> {
        self.check_open()?;
        self.bank.push(MemoryEntry {
            tag: tag.into(),
            len: payload.len() as u64,
            payload,
            element_width: 1,
            kind: EntryKind::Label,
        });
        Ok(())
    }

    /// Drops entries under `tag`. Only allowed once streaming is over; the
    /// peak footprint used for ATM is unaffected.
    pub fn evict(&mut self, tag: &str) -> Result<u64, GuardError> {
        match self.state {
            SessionState::Closed => Err(GuardError::SessionClosed),
            SessionState::Streaming => Err(GuardError::BankAppendOnly),
            SessionState::AwaitingPredictions => Ok(self.bank.evict(tag)),
        }
    }

    pub fn request_target(&mut self) -> Result<TargetView<'_>, GuardError> {
        self.check_open()?;
        if self.cursor < self.nss() {
            return Err(GuardError::TargetNotYetAvailable {
                cursor: self.cursor,
                nss: self.nss(),
            });
        }
        self.state = SessionState::AwaitingPredictions;
        Ok(TargetView {
            inputs: resolve(&self.pack, &self.episode.target_set.entries),
        })
    }

    pub fn submit_predictions(&mut self, predicted: &[u32]) -> Result<EpisodeScore, GuardError> {
        match self.state {
            SessionState::Closed => return Err(GuardError::SessionClosed),
            SessionState::Streaming if self.cursor < self.nss() => {
                return Err(GuardError::TargetNotYetAvailable {
                    cursor: self.cursor,
                    nss: self.nss(),
                })
            }
            SessionState::Streaming => return Err(GuardError::TargetNotRequested),
            SessionState::AwaitingPredictions => {}
        }
        let target = &self.episode.target_set.entries;
        if predicted.len() != target.len() {
            return Err(GuardError::PredictionShape {
                expected: target.len(),
                got: predicted.len(),
            });
        }
        let correct = target
            .iter()
            .zip(predicted)
            .filter(|(t, &p)| t.label == p)
            .count();
        self.state = SessionState::Closed;
        let atm = atm(
            self.bank.peak_representation_bytes(),
            &self.episode,
            self.pack.sample_bytes() as u64,
            1,
        )
        .expect("episodes always contain support inputs");
        Ok(EpisodeScore {
            episode_index: self.episode.episode_index,
            correct,
            total: target.len(),
            accuracy: correct as f64 / target.len() as f64,
            atm,
        })
    }

    /// Closes the session without scoring (idle expiry, client abort).
    pub fn close(&mut self) {
        self.state = SessionState::Closed;
    }

    /// True labels of the target set. Test-only: learners never see these.
    #[cfg(test)]
    pub(crate) fn target_labels(&self) -> Vec<u32> {
        self.episode.target_set.entries.iter().map(|e| e.label).collect()
    }
}
