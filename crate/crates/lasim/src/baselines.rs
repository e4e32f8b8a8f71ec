//! One-shot agreement baselines, runnable under the same simulator and
//! metrics as the main protocol for side-by-side latency tables.
//!
//! Both automatons follow the same conventions as the main protocol node:
//! pure step functions returning their sends, no self-sends (a node's own
//! reaction to its own message is applied locally at the moment it would
//! have sent it), and one-shot semantics — each node proposes exactly one
//! initial value and learns exactly once.
//!
//! The proposer/acceptor baseline trades round trips for simplicity: a
//! proposer re-sends a refined proposal until a majority acknowledges it
//! verbatim. The view-array baseline floods values instead: every node
//! relays each value it has not seen and learns once enough columns of its
//! view agree with its own.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{AsoVector, LatticeConfig, LatticeError};
use crate::NodeId;

/// One scheduled input for a baseline node.
#[derive(Clone, Debug)]
pub enum OneShotInput<M> {
    /// The node's single initial value.
    Start(AsoVector),
    /// A message from another node arrives.
    Deliver { sender: NodeId, msg: M },
}

/// Sends plus at most one learn (one-shot protocols learn once).
#[derive(Clone, Debug, Default)]
pub struct OneShotOutput<M> {
    pub sends: Vec<(NodeId, M)>,
    pub learned: Option<AsoVector>,
}

impl<M> OneShotOutput<M> {
    fn new() -> Self {
        OneShotOutput {
            sends: Vec::new(),
            learned: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("sender {sender} is not a peer of this {n}-node system")]
    UnknownSender { sender: NodeId, n: usize },
    #[error("node {me} already started its one-shot proposal")]
    AlreadyStarted { me: NodeId },
    #[error("node {me} may not propose after learning")]
    ProposeAfterLearn { me: NodeId },
    #[error("node {me} received a message before its start event")]
    NotStarted { me: NodeId },
}

// ---------------------------------------------------------------------------
// Proposer/acceptor baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaleiroMsg {
    /// A proposer asks every acceptor to endorse `value`.
    Proposal { number: u64, value: AsoVector },
    /// The acceptor held nothing the proposal misses.
    Ack { number: u64 },
    /// The acceptor knew more: here is everything it has accepted.
    Nack { number: u64, accepted: AsoVector },
}

/// Both roles folded into one node, as common for this protocol family.
/// The proposer side numbers its proposals so replies to a superseded
/// proposal cannot corrupt the current tally.
#[derive(Clone, Debug)]
pub struct FaleiroNode {
    pub me: NodeId,
    pub n: usize,
    /// Join of every proposal this node's acceptor side has seen.
    accepted: AsoVector,
    /// Current proposal value; grows by refinement.
    proposed: AsoVector,
    /// Current proposal number; 0 until started.
    number: u64,
    /// Distinct repliers for the current proposal number.
    repliers: BTreeSet<NodeId>,
    /// Join of NACK payloads received for the current proposal number.
    nacked: AsoVector,
    any_nack: bool,
    started: bool,
    learned: Option<AsoVector>,
    cfg: LatticeConfig,
}

impl FaleiroNode {
    pub fn new(cfg: LatticeConfig, me: NodeId, n: usize) -> FaleiroNode {
        FaleiroNode {
            me,
            n,
            accepted: cfg.bottom(),
            proposed: cfg.bottom(),
            number: 0,
            repliers: BTreeSet::new(),
            nacked: cfg.bottom(),
            any_nack: false,
            started: false,
            learned: None,
            cfg,
        }
    }

    pub fn learned(&self) -> Option<&AsoVector> {
        self.learned.as_ref()
    }

    /// How many rounds of refinement this node went through (1 = the
    /// initial proposal sufficed).
    pub fn proposal_number(&self) -> u64 {
        self.number
    }

    fn majority(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn step(
        &mut self,
        input: OneShotInput<FaleiroMsg>,
    ) -> Result<OneShotOutput<FaleiroMsg>, BaselineError> {
        let mut out = OneShotOutput::new();
        match input {
            OneShotInput::Start(v) => {
                if self.learned.is_some() {
                    return Err(BaselineError::ProposeAfterLearn { me: self.me });
                }
                if self.started {
                    return Err(BaselineError::AlreadyStarted { me: self.me });
                }
                self.started = true;
                self.proposed = v;
                self.send_proposal(&mut out)?;
            }
            OneShotInput::Deliver { sender, msg } => {
                if sender == self.me || sender >= self.n {
                    return Err(BaselineError::UnknownSender {
                        sender,
                        n: self.n,
                    });
                }
                if !self.started {
                    return Err(BaselineError::NotStarted { me: self.me });
                }
                match msg {
                    FaleiroMsg::Proposal { number, value } => {
                        let reply = self.accept(&value)?;
                        out.sends.push((sender, reply_msg(reply, number)));
                    }
                    FaleiroMsg::Ack { number } => {
                        if number == self.number && self.learned.is_none() {
                            self.repliers.insert(sender);
                            self.close_round_if_ready(&mut out)?;
                        }
                    }
                    FaleiroMsg::Nack { number, accepted } => {
                        if number == self.number && self.learned.is_none() {
                            self.repliers.insert(sender);
                            self.nacked.join_assign(&accepted)?;
                            self.any_nack = true;
                            self.close_round_if_ready(&mut out)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Acceptor side: fold the proposal in; acknowledge iff it contained
    /// everything already accepted, otherwise send everything back.
    fn accept(&mut self, value: &AsoVector) -> Result<Reply, BaselineError> {
        let had = self.accepted.clone();
        self.accepted.join_assign(value)?;
        Ok(if had.leq(value)? {
            Reply::Ack
        } else {
            Reply::Nack(self.accepted.clone())
        })
    }

    /// Number and broadcast the current proposal, resetting the tally. The
    /// node's own acceptor processes the proposal on the spot.
    fn send_proposal(&mut self, out: &mut OneShotOutput<FaleiroMsg>) -> Result<(), BaselineError> {
        self.number += 1;
        self.repliers.clear();
        self.nacked = self.cfg.bottom();
        self.any_nack = false;

        let self_reply = self.accept(&self.proposed.clone())?;
        self.repliers.insert(self.me);
        if let Reply::Nack(accepted) = self_reply {
            self.nacked.join_assign(&accepted)?;
            self.any_nack = true;
        }

        for to in 0..self.n {
            if to != self.me {
                out.sends.push((
                    to,
                    FaleiroMsg::Proposal {
                        number: self.number,
                        value: self.proposed.clone(),
                    },
                ));
            }
        }
        // A single-node system is its own majority.
        self.close_round_if_ready(out)
    }

    /// At exactly a majority of distinct replies: learn on a clean sweep of
    /// acknowledgments, otherwise refine with everything the naysayers
    /// reported and go again.
    fn close_round_if_ready(
        &mut self,
        out: &mut OneShotOutput<FaleiroMsg>,
    ) -> Result<(), BaselineError> {
        if self.learned.is_some() || self.repliers.len() < self.majority() {
            return Ok(());
        }
        if self.any_nack {
            self.proposed.join_assign(&self.nacked.clone())?;
            self.send_proposal(out)?;
        } else {
            self.learned = Some(self.proposed.clone());
            out.learned = Some(self.proposed.clone());
        }
        Ok(())
    }
}

enum Reply {
    Ack,
    Nack(AsoVector),
}

fn reply_msg(reply: Reply, number: u64) -> FaleiroMsg {
    match reply {
        Reply::Ack => FaleiroMsg::Ack { number },
        Reply::Nack(accepted) => FaleiroMsg::Nack { number, accepted },
    }
}

// ---------------------------------------------------------------------------
// View-array baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GargMsg {
    pub value: AsoVector,
}

/// Flooding with per-sender bookkeeping: `view[j]` joins every value
/// received from node `j`, and `view[me]` mirrors everything this node has
/// itself sent (its initial value plus every value it relayed). A value is
/// learned once at least `n - f` columns — own column included — agree with
/// `view[me]`.
#[derive(Clone, Debug)]
pub struct GargNode {
    pub me: NodeId,
    pub n: usize,
    pub f: usize,
    view: Vec<AsoVector>,
    started: bool,
    learned: Option<AsoVector>,
}

impl GargNode {
    pub fn new(cfg: LatticeConfig, me: NodeId, n: usize, f: usize) -> GargNode {
        GargNode {
            me,
            n,
            f,
            view: vec![cfg.bottom(); n],
            started: false,
            learned: None,
        }
    }

    pub fn learned(&self) -> Option<&AsoVector> {
        self.learned.as_ref()
    }

    pub fn view(&self, node: NodeId) -> &AsoVector {
        &self.view[node]
    }

    pub fn step(
        &mut self,
        input: OneShotInput<GargMsg>,
    ) -> Result<OneShotOutput<GargMsg>, BaselineError> {
        let mut out = OneShotOutput::new();
        match input {
            OneShotInput::Start(v) => {
                if self.learned.is_some() {
                    return Err(BaselineError::ProposeAfterLearn { me: self.me });
                }
                if self.started {
                    return Err(BaselineError::AlreadyStarted { me: self.me });
                }
                self.started = true;
                self.view[self.me].join_assign(&v)?;
                self.broadcast(&mut out, v);
            }
            OneShotInput::Deliver { sender, msg } => {
                if sender == self.me || sender >= self.n {
                    return Err(BaselineError::UnknownSender {
                        sender,
                        n: self.n,
                    });
                }
                self.view[sender].join_assign(&msg.value)?;
                // Relay each value at most once: exactly when it brings
                // something this node has never sent on.
                if self.view[self.me].join_assign(&msg.value)? {
                    self.broadcast(&mut out, msg.value);
                }
            }
        }
        self.try_learn(&mut out)?;
        Ok(out)
    }

    fn broadcast(&self, out: &mut OneShotOutput<GargMsg>, value: AsoVector) {
        for to in 0..self.n {
            if to != self.me {
                out.sends.push((
                    to,
                    GargMsg {
                        value: value.clone(),
                    },
                ));
            }
        }
    }

    /// Learn the own column once enough columns agree with it: a set of at
    /// least `n - f` nodes, this one included, whose columns all equal
    /// `view[me]`.
    fn try_learn(&mut self, out: &mut OneShotOutput<GargMsg>) -> Result<(), BaselineError> {
        if self.learned.is_some() || !self.started {
            return Ok(());
        }
        let mine = &self.view[self.me];
        let mut agree = 0;
        for column in &self.view {
            if column == mine {
                agree += 1;
            }
        }
        if agree >= self.n - self.f {
            self.learned = Some(mine.clone());
            out.learned = Some(mine.clone());
        }
        Ok(())
    }
}
