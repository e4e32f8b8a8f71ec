//! Snapshot-object clients layered on the agreement protocol.
//!
//! An [`AsoClient`] turns register operations into proposal vectors and
//! watches the node's learned values for their completion. An update
//! contributes a single-cell vector `(w, v)` at the writer's register; a
//! snapshot contributes a bump of the caller's read counter and returns the
//! register column of the first learned vector containing that bump. The
//! multi-writer update runs a snapshot first and then writes the observed
//! count plus one, so it costs two agreement operations.
//!
//! Clients are sequential: one outstanding operation per node. Completion
//! is keyed on the operation's marker vector — the single cell or counter
//! it contributed — being contained in a learned value, whoever's proposal
//! carried it there.

use thiserror::Error;

use crate::lattice::{AsoVector, LatticeConfig, LatticeError, Payload};
use crate::NodeId;

/// What the outstanding operation is waiting for.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Phase {
    /// A write: done as soon as the marker is learned.
    Write,
    /// A snapshot: done when the counter bump is learned; returns the
    /// registers of the containing learned value.
    Read,
    /// The snapshot half of a multi-writer update; chains into a write of
    /// `payload` at `register` once it completes.
    ReadThenWrite { register: usize, payload: Payload },
}

#[derive(Clone, Debug)]
struct Outstanding {
    marker: AsoVector,
    phase: Phase,
}

/// How an outstanding operation advanced after a learn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AsoProgress {
    /// Nothing outstanding, or the marker is not yet learned.
    Pending,
    /// The update completed; usable as a fire-and-forget acknowledgment.
    UpdateDone,
    /// The snapshot completed with these register contents.
    SnapshotDone(Vec<Payload>),
    /// A multi-writer update finished its snapshot half; the caller must
    /// now propose this vector as the write half of the same operation.
    WritePhase(AsoVector),
}

/// Per-node operation driver: sequence counters plus the one outstanding
/// operation. The caller (the simulator) owns proposal submission and calls
/// [`observe_learn`](AsoClient::observe_learn) for every learn at this node.
#[derive(Clone, Debug)]
pub struct AsoClient {
    pub me: NodeId,
    cfg: LatticeConfig,
    writes: u64,
    reads: u64,
    outstanding: Option<Outstanding>,
}

impl AsoClient {
    pub fn new(cfg: LatticeConfig, me: NodeId) -> AsoClient {
        AsoClient {
            me,
            cfg,
            writes: 0,
            reads: 0,
            outstanding: None,
        }
    }

    /// True when an operation is in flight and further calls must wait.
    pub fn busy(&self) -> bool {
        self.outstanding.is_some()
    }

    /// Start a single-writer update of this node's own register. Returns
    /// the vector to propose.
    pub fn begin_update(
        &mut self,
        register: usize,
        payload: Payload,
    ) -> Result<AsoVector, AsoError> {
        if register != self.me {
            return Err(AsoError::NotOwnRegister {
                register,
                me: self.me,
            });
        }
        self.check_idle()?;
        self.writes += 1;
        let v = self.cfg.make_update_vector(register, self.writes, payload)?;
        self.outstanding = Some(Outstanding {
            marker: v.clone(),
            phase: Phase::Write,
        });
        Ok(v)
    }

    /// Start a snapshot. Returns the vector to propose.
    pub fn begin_snapshot(&mut self) -> Result<AsoVector, AsoError> {
        self.check_idle()?;
        self.reads += 1;
        let v = self.cfg.make_snapshot_vector(self.me, self.reads)?;
        self.outstanding = Some(Outstanding {
            marker: v.clone(),
            phase: Phase::Read,
        });
        Ok(v)
    }

    /// Start a multi-writer update of any register: snapshot now, write
    /// (observed count + 1, payload) when the snapshot lands. Returns the
    /// snapshot-phase vector to propose.
    pub fn begin_mw_update(
        &mut self,
        register: usize,
        payload: Payload,
    ) -> Result<AsoVector, AsoError> {
        if register >= self.cfg.registers {
            return Err(AsoError::Lattice(LatticeError::RegisterOutOfRange {
                register,
                registers: self.cfg.registers,
            }));
        }
        self.check_idle()?;
        self.reads += 1;
        let v = self.cfg.make_snapshot_vector(self.me, self.reads)?;
        self.outstanding = Some(Outstanding {
            marker: v.clone(),
            phase: Phase::ReadThenWrite { register, payload },
        });
        Ok(v)
    }

    /// Feed one learned value. At most one phase advances per call; a
    /// [`AsoProgress::WritePhase`] result obliges the caller to propose the
    /// returned vector (the client is already waiting on it).
    pub fn observe_learn(&mut self, learned: &AsoVector) -> Result<AsoProgress, AsoError> {
        let outstanding = match &self.outstanding {
            None => return Ok(AsoProgress::Pending),
            Some(o) => o,
        };
        if !outstanding.marker.leq(learned)? {
            return Ok(AsoProgress::Pending);
        }
        match outstanding.phase.clone() {
            Phase::Write => {
                self.outstanding = None;
                Ok(AsoProgress::UpdateDone)
            }
            Phase::Read => {
                self.outstanding = None;
                Ok(AsoProgress::SnapshotDone(learned.project_registers()))
            }
            Phase::ReadThenWrite { register, payload } => {
                let observed = learned.cells[register].writes;
                let count = if register == self.me {
                    // Writing our own register through the two-phase path
                    // must stay ahead of the single-writer counter, and
                    // vice versa, or a later plain update could reuse the
                    // count and collide on the value order.
                    self.writes = self.writes.max(observed) + 1;
                    self.writes
                } else {
                    observed + 1
                };
                let v = self.cfg.make_update_vector(register, count, payload)?;
                self.outstanding = Some(Outstanding {
                    marker: v.clone(),
                    phase: Phase::Write,
                });
                Ok(AsoProgress::WritePhase(v))
            }
        }
    }

    fn check_idle(&self) -> Result<(), AsoError> {
        match &self.outstanding {
            Some(_) => Err(AsoError::Busy { me: self.me }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum AsoError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("node {me} may only single-writer-update register {me}, not {register}")]
    NotOwnRegister { register: usize, me: NodeId },
    #[error("node {me} already has an operation in flight")]
    Busy { me: NodeId },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(n: usize, me: NodeId) -> AsoClient {
        AsoClient::new(LatticeConfig::square(n), me)
    }

    #[test]
    fn updates_count_up_and_mark_the_writers_register() {
        let mut c = client(3, 1);
        let v1 = c.begin_update(1, "a".into()).unwrap();
        assert_eq!(v1.cells[1].writes, 1);
        assert_eq!(v1.cells[1].value, "a".into());
        assert_eq!(v1.cells[0].writes, 0);
        assert_eq!(c.observe_learn(&v1).unwrap(), AsoProgress::UpdateDone);

        let v2 = c.begin_update(1, "b".into()).unwrap();
        assert_eq!(v2.cells[1].writes, 2);
        assert_eq!(v2.cells[1].value, "b".into());
    }

    #[test]
    fn updating_someone_elses_register_is_rejected() {
        let mut c = client(3, 1);
        assert!(matches!(
            c.begin_update(2, "a".into()),
            Err(AsoError::NotOwnRegister { register: 2, me: 1 })
        ));
    }

    #[test]
    fn one_operation_at_a_time() {
        let mut c = client(3, 0);
        let _ = c.begin_update(0, "a".into()).unwrap();
        assert!(matches!(
            c.begin_snapshot(),
            Err(AsoError::Busy { me: 0 })
        ));
        assert!(c.busy());
    }

    #[test]
    fn snapshot_returns_the_registers_of_the_containing_learn() {
        let cfg = LatticeConfig::square(2);
        let mut c = client(2, 0);
        let snap = c.begin_snapshot().unwrap();
        assert_eq!(snap.counters, vec![1, 0]);

        // A learn that does not contain the counter bump leaves the
        // snapshot pending.
        let unrelated = cfg.make_update_vector(1, 1, "x".into()).unwrap();
        assert_eq!(c.observe_learn(&unrelated).unwrap(), AsoProgress::Pending);

        // One that does completes it with the projected registers.
        let learned = unrelated.join(&snap).unwrap();
        match c.observe_learn(&learned).unwrap() {
            AsoProgress::SnapshotDone(regs) => {
                assert_eq!(regs, vec![Payload::default(), "x".into()]);
            }
            other => panic!("expected snapshot completion, got {other:?}"),
        }
        assert!(!c.busy());
    }

    #[test]
    fn fresh_snapshot_of_an_untouched_object_sees_initial_values() {
        let mut c = client(2, 1);
        let snap = c.begin_snapshot().unwrap();
        match c.observe_learn(&snap).unwrap() {
            AsoProgress::SnapshotDone(regs) => {
                assert_eq!(regs, vec![Payload::default(); 2]);
            }
            other => panic!("expected snapshot completion, got {other:?}"),
        }
    }

    #[test]
    fn mw_update_writes_one_past_the_observed_count() {
        let cfg = LatticeConfig::square(3);
        let mut c = client(3, 0);

        // Fresh register: observes 0, writes 1.
        let phase1 = c.begin_mw_update(2, "m".into()).unwrap();
        match c.observe_learn(&phase1).unwrap() {
            AsoProgress::WritePhase(v) => {
                assert_eq!(v.cells[2].writes, 1);
                assert_eq!(v.cells[2].value, "m".into());
                let done = c.observe_learn(&v).unwrap();
                assert_eq!(done, AsoProgress::UpdateDone);
            }
            other => panic!("expected write phase, got {other:?}"),
        }

        // Register already at five writes: observes 5, writes 6.
        let phase1 = c.begin_mw_update(2, "n".into()).unwrap();
        let learned = phase1
            .join(&cfg.make_update_vector(2, 5, "w5".into()).unwrap())
            .unwrap();
        match c.observe_learn(&learned).unwrap() {
            AsoProgress::WritePhase(v) => assert_eq!(v.cells[2].writes, 6),
            other => panic!("expected write phase, got {other:?}"),
        }
    }

    #[test]
    fn mw_update_of_own_register_keeps_the_write_counter_ahead() {
        let mut c = client(2, 0);
        let v = c.begin_update(0, "a".into()).unwrap();
        c.observe_learn(&v).unwrap();

        let phase1 = c.begin_mw_update(0, "b".into()).unwrap();
        let learned = phase1.join(&v).unwrap();
        let write = match c.observe_learn(&learned).unwrap() {
            AsoProgress::WritePhase(v) => v,
            other => panic!("expected write phase, got {other:?}"),
        };
        assert_eq!(write.cells[0].writes, 2);
        c.observe_learn(&write).unwrap();

        // The next plain update does not collide with the two-phase write.
        let v3 = c.begin_update(0, "c".into()).unwrap();
        assert_eq!(v3.cells[0].writes, 3);
    }

    #[test]
    fn mw_update_range_checks_the_register() {
        let mut c = client(2, 0);
        assert!(matches!(
            c.begin_mw_update(7, "x".into()),
            Err(AsoError::Lattice(LatticeError::RegisterOutOfRange { .. }))
        ));
    }

    #[test]
    fn learns_without_an_outstanding_operation_are_ignored() {
        let cfg = LatticeConfig::square(2);
        let mut c = client(2, 0);
        let learned = cfg.make_update_vector(1, 3, "z".into()).unwrap();
        assert_eq!(c.observe_learn(&learned).unwrap(), AsoProgress::Pending);
    }
}
