//! The long-lived lattice agreement node automaton.
//!
//! Each node keeps four vectors — `mpool` (values requested but not yet
//! proposed), `proposing` (the value currently out for validation),
//! `validated` (the join of everything quorum-validated or adopted), and
//! `learned` (the last learned value) — plus a `pending` table mapping each
//! proposal value seen on the wire to the set of nodes supporting it.
//!
//! One [`la_step`](LaNode::la_step) consumes a single input (an application
//! proposal, a delivered message, or a tick), applies the matching handler,
//! and then fires the guarded blocks — start-proposal, quorum validation,
//! learn — in that fixed order until none is enabled. Running guards to a
//! fixpoint inside the step keeps executions replayable: a quorum completed
//! by an incoming message produces its learn in the same event.
//!
//! All sends are returned to the caller rather than performed; a node never
//! sends to itself, and records its own support for a proposal locally at
//! the moment it would have self-sent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{AsoVector, LatticeConfig, LatticeError};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaMsgKind {
    /// Carry a fresh application value toward every pool.
    Request,
    /// Ask for support on a proposal value.
    Propose,
    /// Announce a learned value.
    Accept,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaMessage {
    pub kind: LaMsgKind,
    pub value: AsoVector,
}

/// One scheduled input for a node.
#[derive(Clone, Debug)]
pub enum LaInput {
    /// The application hands the node a value to get learned.
    AppPropose(AsoVector),
    /// A message from another node arrives.
    Deliver { sender: NodeId, msg: LaMessage },
    /// Fire enabled guarded blocks only.
    Tick,
}

/// A learn: the node's `learned` vector advanced (or an application
/// proposal was found already contained in it). `satisfied` lists the
/// application-proposed values this learn completes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnReport {
    pub value: AsoVector,
    pub satisfied: Vec<AsoVector>,
}

#[derive(Clone, Debug, Default)]
pub struct LaOutput {
    pub sends: Vec<(NodeId, LaMessage)>,
    pub learns: Vec<LearnReport>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PendingEntry {
    value: AsoVector,
    supporters: BTreeSet<NodeId>,
}

/// State of one agreement node.
#[derive(Clone, Debug)]
pub struct LaNode {
    pub me: NodeId,
    pub n: usize,
    pub f: usize,
    cfg: LatticeConfig,
    mpool: AsoVector,
    proposing: AsoVector,
    validated: AsoVector,
    learned: AsoVector,
    /// Proposal value (keyed by canonical encoding) -> supporter set.
    /// Entries are never removed; supporter sets only grow.
    pending: BTreeMap<Vec<u8>, PendingEntry>,
    /// Application proposals not yet contained in `learned`, oldest first.
    pending_ops: Vec<AsoVector>,
}

impl LaNode {
    /// A fresh node. Requires `me < n` and `2f < n` (quorums of size
    /// `n - f` must pairwise intersect in a correct node).
    pub fn la_init(
        cfg: LatticeConfig,
        me: NodeId,
        n: usize,
        f: usize,
    ) -> Result<LaNode, ProtocolError> {
        if n == 0 || me >= n {
            return Err(ProtocolError::NodeOutOfRange { me, n });
        }
        if 2 * f >= n {
            return Err(ProtocolError::InvalidFaultBound { n, f });
        }
        let bottom = cfg.bottom();
        Ok(LaNode {
            me,
            n,
            f,
            cfg,
            mpool: bottom.clone(),
            proposing: bottom.clone(),
            validated: bottom.clone(),
            learned: bottom,
            pending: BTreeMap::new(),
            pending_ops: Vec::new(),
        })
    }

    /// The last learned value (bottom until the first learn).
    pub fn la_learned(&self) -> &AsoVector {
        &self.learned
    }

    /// Whether any guarded block could fire right now. After any
    /// [`la_step`](Self::la_step) this is false — steps run guards to a
    /// fixpoint — so it can only hold on states built by hand or imported.
    pub fn guard_enabled(&self) -> bool {
        if !self.mpool.is_bottom(&self.cfg) && self.proposing.is_bottom(&self.cfg) {
            return true;
        }
        let quorum = self.n - self.f;
        for entry in self.pending.values() {
            if entry.supporters.len() >= quorum
                && !entry.value.leq(&self.validated).unwrap_or(true)
            {
                return true;
            }
        }
        self.learn_guard_enabled().unwrap_or(false)
    }

    fn learn_guard_enabled(&self) -> Result<bool, LatticeError> {
        if !self.learned.lt(&self.validated)? {
            return Ok(false);
        }
        let mut all = self.cfg.bottom();
        for entry in self.pending.values() {
            all = all.join(&entry.value)?;
        }
        all.leq(&self.validated)
    }

    /// Apply one input, then fire enabled guards to a fixpoint. Returns the
    /// messages to send and any learns this step produced.
    pub fn la_step(&mut self, input: LaInput) -> Result<LaOutput, ProtocolError> {
        let mut out = LaOutput::default();
        match input {
            LaInput::AppPropose(v) => {
                self.check_value(&v)?;
                self.mpool = self.mpool.join(&v)?;
                self.pending_ops.push(v.clone());
                self.broadcast(&mut out, LaMsgKind::Request, v);
            }
            LaInput::Deliver { sender, msg } => {
                if sender == self.me || sender >= self.n {
                    return Err(ProtocolError::UnknownSender { sender, n: self.n });
                }
                self.check_value(&msg.value)?;
                match msg.kind {
                    LaMsgKind::Request => self.on_request(&mut out, msg.value)?,
                    LaMsgKind::Propose => self.on_propose(&mut out, sender, msg.value)?,
                    LaMsgKind::Accept => self.on_accept(&mut out, msg.value)?,
                }
            }
            LaInput::Tick => {}
        }
        self.run_guards(&mut out)?;
        self.sweep_completions(&mut out)?;
        Ok(out)
    }

    /// A value travels toward every pool unless this node already accounts
    /// for it; fresh values are absorbed and relayed so that every node
    /// ends up proposing them.
    fn on_request(&mut self, out: &mut LaOutput, v: AsoVector) -> Result<(), ProtocolError> {
        let known = v.leq(&self.mpool.join(&self.proposing)?.join(&self.learned)?)?;
        if !known {
            self.mpool = self.mpool.join(&v)?;
            self.broadcast(out, LaMsgKind::Request, v);
        }
        Ok(())
    }

    /// Count distinct supporters per proposal value; the first sighting of
    /// a value is relayed to every other node — including back toward its
    /// sender — and supported locally on the spot. The echo to the sender
    /// is what carries this node's support to the value's originator;
    /// without it a contended proposal would strand one vote short at the
    /// very node waiting on it. Duplicate relays are harmless because
    /// supporters are counted as a set.
    fn on_propose(
        &mut self,
        out: &mut LaOutput,
        sender: NodeId,
        v: AsoVector,
    ) -> Result<(), ProtocolError> {
        let key = v.encode();
        if let Some(entry) = self.pending.get_mut(&key) {
            entry.supporters.insert(sender);
        } else {
            self.pending.insert(
                key,
                PendingEntry {
                    value: v.clone(),
                    supporters: BTreeSet::from([sender, self.me]),
                },
            );
            self.broadcast(out, LaMsgKind::Propose, v);
        }
        Ok(())
    }

    /// Adopt a learned value announced by another node, provided it
    /// contains everything this node is currently committed to. The
    /// announcement is re-broadcast only when `learned` strictly grows;
    /// otherwise adopting an echo would re-announce forever.
    fn on_accept(&mut self, out: &mut LaOutput, w: AsoVector) -> Result<(), ProtocolError> {
        let committed = self.proposing.join(&self.learned)?;
        if committed.leq(&w)? && self.learned.lt(&w)? {
            self.validated = self.validated.join(&w)?;
            self.learned = w;
            self.proposing = self.cfg.bottom();
            self.broadcast(out, LaMsgKind::Accept, self.learned.clone());
            out.learns.push(LearnReport {
                value: self.learned.clone(),
                satisfied: Vec::new(),
            });
        }
        Ok(())
    }

    /// Guarded blocks, in a fixed order, until none fires:
    /// start-proposal, quorum validation, learn.
    fn run_guards(&mut self, out: &mut LaOutput) -> Result<(), ProtocolError> {
        loop {
            let mut changed = false;

            // Start a proposal: move the pool into `proposing`, support it
            // locally, ask everyone else for support.
            if !self.mpool.is_bottom(&self.cfg) && self.proposing.is_bottom(&self.cfg) {
                self.proposing = std::mem::replace(&mut self.mpool, self.cfg.bottom());
                let key = self.proposing.encode();
                let me = self.me;
                self.pending
                    .entry(key)
                    .or_insert_with(|| PendingEntry {
                        value: self.proposing.clone(),
                        supporters: BTreeSet::new(),
                    })
                    .supporters
                    .insert(me);
                self.broadcast(out, LaMsgKind::Propose, self.proposing.clone());
                changed = true;
            }

            // Quorum validation: a value supported by n - f distinct nodes
            // is safe to learn.
            let quorum = self.n - self.f;
            for entry in self.pending.values() {
                if entry.supporters.len() >= quorum && self.validated.join_assign(&entry.value)? {
                    changed = true;
                }
            }

            // Learn: once every pending value is validated, everything
            // validated can be learned at once.
            if self.learn_guard_enabled()? {
                self.learned = self.validated.clone();
                self.proposing = self.cfg.bottom();
                self.broadcast(out, LaMsgKind::Accept, self.learned.clone());
                out.learns.push(LearnReport {
                    value: self.learned.clone(),
                    satisfied: Vec::new(),
                });
                changed = true;
            }

            if !changed {
                return Ok(());
            }
        }
    }

    /// An application proposal completes at the first step where its value
    /// is contained in `learned`. Completions attach to the step's final
    /// learn report; if the value was already learned at injection time, a
    /// report is synthesized so the caller still sees the completion.
    fn sweep_completions(&mut self, out: &mut LaOutput) -> Result<(), ProtocolError> {
        let mut satisfied = Vec::new();
        let mut remaining = Vec::new();
        for v in self.pending_ops.drain(..) {
            if v.leq(&self.learned)? {
                satisfied.push(v);
            } else {
                remaining.push(v);
            }
        }
        self.pending_ops = remaining;
        if satisfied.is_empty() {
            return Ok(());
        }
        match out.learns.last_mut() {
            Some(last) => last.satisfied.extend(satisfied),
            None => out.learns.push(LearnReport {
                value: self.learned.clone(),
                satisfied,
            }),
        }
        Ok(())
    }

    /// Queue `kind(value)` for every node but this one.
    fn broadcast(&self, out: &mut LaOutput, kind: LaMsgKind, value: AsoVector) {
        for to in 0..self.n {
            if to == self.me {
                continue;
            }
            out.sends.push((
                to,
                LaMessage {
                    kind,
                    value: value.clone(),
                },
            ));
        }
    }

    fn check_value(&self, v: &AsoVector) -> Result<(), ProtocolError> {
        // Any vector of the right shape is acceptable; shape errors surface
        // through the lattice operations on first contact.
        let _ = v.leq(&self.learned)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("node id {me} out of range for n = {n}")]
    NodeOutOfRange { me: NodeId, n: usize },
    #[error("fault bound f = {f} requires 2f < n = {n}")]
    InvalidFaultBound { n: usize, f: usize },
    #[error("message from unknown or own node id {sender} (n = {n})")]
    UnknownSender { sender: NodeId, n: usize },
}
