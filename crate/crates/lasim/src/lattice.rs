//! The snapshot-object join semilattice.
//!
//! A vector has one [`RegisterCell`] per register (positions `0..m`) and one
//! plain counter per process (positions `m..m+n`). Cells are totally ordered
//! by write count first, then payload; counters by `<=`. Vectors are ordered
//! position-wise, which is a partial order, and joined position-wise, which
//! is the least upper bound. The bottom vector has every cell at
//! `(0, initial)` and every counter at 0.
//!
//! Updates and snapshots are encoded as vectors that are bottom everywhere
//! except one position: an update by process `i` raises cell `i` to its next
//! `(writes, payload)` pair, a snapshot by process `i` raises counter `i` to
//! its next sequence number. Joining such vectors into an agreed value is
//! what the protocols in this crate do; [`AsoVector::project_registers`]
//! reads the payload column back out of an agreed value.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::NodeId;

/// Opaque register payload. The total order used to break ties between
/// cells with equal write counts is the byte-wise lexicographic order of the
/// payload; swap in a different `Ord` here to change that policy.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Payload(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Self {
        Payload(s.as_bytes().to_vec())
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if s.chars().all(|c| !c.is_control()) => write!(f, "{s:?}"),
            _ => {
                write!(f, "0x")?;
                for b in &self.0 {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
        }
    }
}

/// One register position: how many times it has been written, and the
/// payload of the latest write. The derived `Ord` compares `writes` first
/// and falls back to the payload order, which is exactly the cell order the
/// protocols rely on — field order matters here.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegisterCell {
    pub writes: u64,
    pub value: Payload,
}

impl fmt::Debug for RegisterCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{:?})", self.writes, self.value)
    }
}

/// Whether `a` precedes-or-equals `b` in the total cell order: fewer writes
/// wins, equal write counts fall back to the payload order.
pub fn cell_leq(a: &RegisterCell, b: &RegisterCell) -> bool {
    a <= b
}

/// Shape of the vectors a system exchanges: `registers` cells, `processes`
/// counters, and the payload every unwritten register carries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub registers: usize,
    pub processes: usize,
    pub initial_payload: Payload,
}

impl LatticeConfig {
    /// A square configuration (`registers == processes`) with an empty
    /// initial payload — the shape the snapshot client uses.
    pub fn square(n: usize) -> Self {
        LatticeConfig {
            registers: n,
            processes: n,
            initial_payload: Payload::default(),
        }
    }

    /// The least vector: every cell `(0, initial)`, every counter 0.
    pub fn bottom(&self) -> AsoVector {
        AsoVector {
            cells: vec![
                RegisterCell {
                    writes: 0,
                    value: self.initial_payload.clone(),
                };
                self.registers
            ],
            counters: vec![0; self.processes],
        }
    }

    /// A vector that is bottom everywhere except register `register`, which
    /// holds `(writes, payload)`. This is the unit an update contributes.
    pub fn make_update_vector(
        &self,
        register: usize,
        writes: u64,
        payload: Payload,
    ) -> Result<AsoVector, LatticeError> {
        if register >= self.registers {
            return Err(LatticeError::RegisterOutOfRange {
                register,
                registers: self.registers,
            });
        }
        if writes == 0 {
            return Err(LatticeError::ZeroWriteCount);
        }
        let mut v = self.bottom();
        v.cells[register] = RegisterCell {
            writes,
            value: payload,
        };
        Ok(v)
    }

    /// A vector that is bottom everywhere except counter `process`, which
    /// holds `seq`. This is the unit a snapshot contributes.
    pub fn make_snapshot_vector(
        &self,
        process: NodeId,
        seq: u64,
    ) -> Result<AsoVector, LatticeError> {
        if process >= self.processes {
            return Err(LatticeError::ProcessOutOfRange {
                process,
                processes: self.processes,
            });
        }
        let mut v = self.bottom();
        v.counters[process] = seq;
        Ok(v)
    }
}

/// A point of the snapshot-object lattice. Equality is structural, and two
/// vectors are equal exactly when their canonical encodings are.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AsoVector {
    pub cells: Vec<RegisterCell>,
    pub counters: Vec<u64>,
}

impl AsoVector {
    pub fn registers(&self) -> usize {
        self.cells.len()
    }

    pub fn processes(&self) -> usize {
        self.counters.len()
    }

    fn check_shape(&self, other: &AsoVector) -> Result<(), LatticeError> {
        if self.cells.len() != other.cells.len() || self.counters.len() != other.counters.len() {
            return Err(LatticeError::DimensionMismatch {
                left: (self.cells.len(), self.counters.len()),
                right: (other.cells.len(), other.counters.len()),
            });
        }
        Ok(())
    }

    /// Position-wise order: every cell and every counter of `self` must be
    /// `<=` its counterpart in `other`.
    pub fn leq(&self, other: &AsoVector) -> Result<bool, LatticeError> {
        self.check_shape(other)?;
        let cells_ok = self
            .cells
            .iter()
            .zip(&other.cells)
            .all(|(a, b)| cell_leq(a, b));
        let counters_ok = self
            .counters
            .iter()
            .zip(&other.counters)
            .all(|(a, b)| a <= b);
        Ok(cells_ok && counters_ok)
    }

    /// Strict order: `self ⊑ other` and the two differ.
    pub fn lt(&self, other: &AsoVector) -> Result<bool, LatticeError> {
        Ok(self.leq(other)? && self != other)
    }

    /// Whether the two vectors are ordered either way. Incomparable vectors
    /// are what contention between proposals looks like.
    pub fn comparable(&self, other: &AsoVector) -> Result<bool, LatticeError> {
        Ok(self.leq(other)? || other.leq(self)?)
    }

    /// Least upper bound: position-wise max of cells and counters.
    pub fn join(&self, other: &AsoVector) -> Result<AsoVector, LatticeError> {
        self.check_shape(other)?;
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| if cell_leq(a, b) { b.clone() } else { a.clone() })
            .collect();
        let counters = self
            .counters
            .iter()
            .zip(&other.counters)
            .map(|(a, b)| (*a).max(*b))
            .collect();
        Ok(AsoVector { cells, counters })
    }

    /// Join `other` into `self`, reporting whether `self` grew.
    pub fn join_assign(&mut self, other: &AsoVector) -> Result<bool, LatticeError> {
        if other.leq(self)? {
            return Ok(false);
        }
        *self = self.join(other)?;
        Ok(true)
    }

    /// Whether this vector is the bottom of `cfg`'s lattice.
    pub fn is_bottom(&self, cfg: &LatticeConfig) -> bool {
        self.cells
            .iter()
            .all(|c| c.writes == 0 && c.value == cfg.initial_payload)
            && self.counters.iter().all(|&k| k == 0)
    }

    /// The payload column: one payload per register.
    pub fn project_registers(&self) -> Vec<Payload> {
        self.cells.iter().map(|c| c.value.clone()).collect()
    }

    /// Canonical byte encoding, used in trace files and as a map key. The
    /// leading byte is a format version; everything else is big-endian and
    /// length-prefixed, so the encoding is injective.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.cells.len() * 12 + self.counters.len() * 8);
        out.push(ENCODING_VERSION);
        out.extend_from_slice(&(self.cells.len() as u32).to_be_bytes());
        out.extend_from_slice(&(self.counters.len() as u32).to_be_bytes());
        for cell in &self.cells {
            out.extend_from_slice(&cell.writes.to_be_bytes());
            out.extend_from_slice(&(cell.value.0.len() as u32).to_be_bytes());
            out.extend_from_slice(&cell.value.0);
        }
        for counter in &self.counters {
            out.extend_from_slice(&counter.to_be_bytes());
        }
        out
    }

    /// Inverse of [`AsoVector::encode`].
    pub fn decode(bytes: &[u8]) -> Result<AsoVector, LatticeError> {
        let mut r = Reader { bytes, at: 0 };
        let version = r.u8()?;
        if version != ENCODING_VERSION {
            return Err(LatticeError::Malformed("unsupported encoding version"));
        }
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        if m > MAX_DECODE_POSITIONS || n > MAX_DECODE_POSITIONS {
            return Err(LatticeError::Malformed("implausible vector shape"));
        }
        let mut cells = Vec::with_capacity(m);
        for _ in 0..m {
            let writes = r.u64()?;
            let len = r.u32()? as usize;
            let value = Payload(r.take(len)?.to_vec());
            cells.push(RegisterCell { writes, value });
        }
        let mut counters = Vec::with_capacity(n);
        for _ in 0..n {
            counters.push(r.u64()?);
        }
        if r.at != bytes.len() {
            return Err(LatticeError::Malformed("trailing bytes"));
        }
        Ok(AsoVector { cells, counters })
    }

    /// Short hex digest of the canonical encoding, for trace event lines.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.encode());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for AsoVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, cell) in self.cells.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{cell:?}")?;
        }
        write!(f, "|")?;
        for (i, k) in self.counters.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, "]")
    }
}

const ENCODING_VERSION: u8 = 1;
const MAX_DECODE_POSITIONS: usize = 1 << 20;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], LatticeError> {
        let end = self
            .at
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(LatticeError::Malformed("truncated encoding"))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, LatticeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, LatticeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LatticeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("vector shapes differ: {left:?} vs {right:?} (cells, counters)")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("register {register} out of range ({registers} registers)")]
    RegisterOutOfRange { register: usize, registers: usize },
    #[error("process {process} out of range ({processes} processes)")]
    ProcessOutOfRange { process: usize, processes: usize },
    #[error("update vectors require a write count of at least 1")]
    ZeroWriteCount,
    #[error("malformed vector encoding: {0}")]
    Malformed(&'static str),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg2() -> LatticeConfig {
        LatticeConfig::square(2)
    }

    fn cell(writes: u64, value: &str) -> RegisterCell {
        RegisterCell {
            writes,
            value: value.into(),
        }
    }

    /// Build a 2x2 vector from cells and counters.
    fn vec2(c0: RegisterCell, c1: RegisterCell, k0: u64, k1: u64) -> AsoVector {
        AsoVector {
            cells: vec![c0, c1],
            counters: vec![k0, k1],
        }
    }

    #[test]
    fn cell_order_compares_writes_first_then_payload() {
        assert!(cell_leq(&cell(1, "z"), &cell(2, "a")));
        assert!(!cell_leq(&cell(2, "a"), &cell(1, "z")));
        assert!(cell_leq(&cell(2, "a"), &cell(2, "b")));
        assert!(!cell_leq(&cell(2, "b"), &cell(2, "a")));
        assert!(cell_leq(&cell(2, "a"), &cell(2, "a")));
    }

    #[test]
    fn bottom_is_least() {
        let cfg = cfg2();
        let bot = cfg.bottom();
        let v = vec2(cell(1, "a"), cell(0, ""), 0, 3);
        assert!(bot.leq(&v).unwrap());
        assert!(bot.leq(&bot).unwrap());
        assert!(bot.is_bottom(&cfg));
        assert!(!v.is_bottom(&cfg));
    }

    #[test]
    fn leq_is_position_wise() {
        let lo = vec2(cell(1, "a"), cell(0, ""), 0, 0);
        let hi = vec2(cell(1, "a"), cell(2, "b"), 1, 0);
        assert!(lo.leq(&hi).unwrap());
        assert!(!hi.leq(&lo).unwrap());

        // One register ahead, everything else behind: unordered both ways.
        let a = vec2(cell(2, "a"), cell(0, ""), 0, 0);
        let b = vec2(cell(1, "b"), cell(5, "z"), 9, 9);
        assert!(!a.leq(&b).unwrap());
        assert!(!b.leq(&a).unwrap());
        assert!(!a.comparable(&b).unwrap());
    }

    #[test]
    fn concurrent_updates_are_incomparable() {
        let a = vec2(cell(1, "a"), cell(0, ""), 0, 0);
        let b = vec2(cell(0, ""), cell(1, "b"), 0, 0);
        assert!(!a.comparable(&b).unwrap());
        let joined = a.join(&b).unwrap();
        assert!(a.leq(&joined).unwrap());
        assert!(b.leq(&joined).unwrap());
        assert_eq!(joined, vec2(cell(1, "a"), cell(1, "b"), 0, 0));
    }

    #[test]
    fn join_takes_position_wise_max() {
        let cfg = LatticeConfig::square(1);
        let a = AsoVector {
            cells: vec![cell(1, "a")],
            counters: vec![0],
        };
        let b = AsoVector {
            cells: vec![cell(1, "b")],
            counters: vec![2],
        };
        let j = a.join(&b).unwrap();
        assert_eq!(j.cells, vec![cell(1, "b")]);
        assert_eq!(j.counters, vec![2]);
        assert!(j.leq(&a.join(&b).unwrap()).unwrap());
        assert!(!j.is_bottom(&cfg));
    }

    #[test]
    fn update_and_snapshot_vectors_touch_one_position() {
        let cfg = cfg2();
        let u = cfg.make_update_vector(0, 1, "a".into()).unwrap();
        assert_eq!(u, vec2(cell(1, "a"), cell(0, ""), 0, 0));
        let s = cfg.make_snapshot_vector(1, 4).unwrap();
        assert_eq!(s, vec2(cell(0, ""), cell(0, ""), 0, 4));

        assert_eq!(
            cfg.make_update_vector(2, 1, "a".into()),
            Err(LatticeError::RegisterOutOfRange {
                register: 2,
                registers: 2
            })
        );
        assert_eq!(
            cfg.make_update_vector(0, 0, "a".into()),
            Err(LatticeError::ZeroWriteCount)
        );
        assert_eq!(
            cfg.make_snapshot_vector(7, 1),
            Err(LatticeError::ProcessOutOfRange {
                process: 7,
                processes: 2
            })
        );
    }

    #[test]
    fn project_reads_the_payload_column() {
        let v = vec2(cell(1, "a"), cell(2, "b"), 3, 0);
        assert_eq!(
            v.project_registers(),
            vec![Payload::from("a"), Payload::from("b")]
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = cfg2().bottom();
        let b = LatticeConfig::square(3).bottom();
        assert!(matches!(
            a.leq(&b),
            Err(LatticeError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            a.join(&b),
            Err(LatticeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn encoding_round_trips_and_is_injective_on_samples() {
        let cfg = cfg2();
        let samples = [
            cfg.bottom(),
            cfg.make_update_vector(0, 1, "a".into()).unwrap(),
            cfg.make_update_vector(1, 1, "a".into()).unwrap(),
            cfg.make_snapshot_vector(0, 1).unwrap(),
            vec2(cell(1, "a"), cell(2, "b"), 3, 9),
        ];
        for v in &samples {
            let enc = v.encode();
            assert_eq!(&AsoVector::decode(&enc).unwrap(), v);
        }
        for (i, a) in samples.iter().enumerate() {
            for (j, b) in samples.iter().enumerate() {
                assert_eq!(a.encode() == b.encode(), i == j);
            }
        }
        assert!(AsoVector::decode(&[]).is_err());
        assert!(AsoVector::decode(&[9, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        let mut truncated = samples[4].encode();
        truncated.pop();
        assert!(AsoVector::decode(&truncated).is_err());
    }

    #[test]
    fn digest_is_stable_and_short() {
        let v = cfg2().make_update_vector(0, 1, "a".into()).unwrap();
        let d = v.digest();
        assert_eq!(d.len(), 16);
        assert_eq!(d, v.clone().digest());
    }
}
