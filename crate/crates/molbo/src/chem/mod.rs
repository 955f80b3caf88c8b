//! Molecular graphs, SMILES parsing, and circular fingerprints.
//!
//! The pool files tabulate candidates as SMILES strings over the organic
//! subset (B, C, N, O, P, S, F, Cl, Br, I, plus aromatic c/n/o/s). The parser
//! builds a heavy-atom [`MolGraph`] — hydrogens are counted per atom, not
//! materialized as nodes — and the fingerprint module folds Morgan-style
//! circular substructure codes into a fixed-width bit vector for the
//! Tanimoto kernel.

mod fingerprint;
mod parser;
mod writer;

pub use fingerprint::{morgan_fingerprint, tanimoto, Fingerprint};
pub use parser::parse_smiles;
pub use writer::write_smiles;

use thiserror::Error;

/// Errors from SMILES parsing and fingerprint construction. Parse errors
/// carry the byte offset of the offending character in the input string.
#[derive(Debug, Error, PartialEq)]
pub enum ChemError {
    #[error("empty SMILES string")]
    EmptyInput,
    #[error("unexpected character {found:?} at byte {offset}")]
    UnexpectedChar { offset: usize, found: char },
    #[error("unknown element {symbol:?} at byte {offset}")]
    UnknownElement { offset: usize, symbol: String },
    #[error("dot-separated fragments are not supported (byte {offset})")]
    DisconnectedFragment { offset: usize },
    #[error("unmatched closing parenthesis at byte {offset}")]
    UnmatchedClose { offset: usize },
    #[error("unclosed branch opened at byte {offset}")]
    UnclosedBranch { offset: usize },
    #[error("ring bond {label} opened at byte {offset} is never closed")]
    UnclosedRing { offset: usize, label: u16 },
    #[error("ring bond {label} at byte {offset} closes onto its own atom")]
    RingSelfLoop { offset: usize, label: u16 },
    #[error("conflicting bond orders for ring bond {label} at byte {offset}")]
    RingBondConflict { offset: usize, label: u16 },
    #[error("duplicate bond between atoms {a} and {b} at byte {offset}")]
    DuplicateBond { offset: usize, a: usize, b: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom")]
    DanglingBond { offset: usize },
    #[error("bond symbol at byte {offset} has no preceding atom")]
    LeadingBond { offset: usize },
    #[error("malformed bracket atom at byte {offset}: {reason}")]
    MalformedBracket { offset: usize, reason: String },
    #[error(
        "valence violation on atom {atom} ({symbol}) at byte {offset}: \
         bond order sum {bond_sum} exceeds maximum valence {max_valence}"
    )]
    ValenceViolation {
        offset: usize,
        atom: usize,
        symbol: String,
        bond_sum: u8,
        max_valence: u8,
    },
    #[error("fingerprint width {width} is not a power of two >= 64")]
    BadFingerprintWidth { width: usize },
    #[error("fingerprint widths differ: {a} vs {b}")]
    WidthMismatch { a: usize, b: usize },
    #[error("cannot fingerprint an empty molecular graph")]
    EmptyGraph,
}

/// Chemical elements of the SMILES organic subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    /// Atomic number, used as a stable invariant in fingerprint hashing.
    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::P => 15,
            Element::S => 16,
            Element::F => 9,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    /// Normal valences in ascending order. Multi-valent elements list every
    /// accepted valence; implicit hydrogen counts use the smallest valence
    /// that accommodates the explicit bond order sum.
    pub fn default_valences(self) -> &'static [u8] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3, 5],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
        }
    }

    /// Whether lowercase aromatic notation is accepted for this element.
    pub fn supports_aromatic(self) -> bool {
        matches!(self, Element::C | Element::N | Element::O | Element::S)
    }
}

/// Bond orders; aromatic bonds arise between two aromatic atoms when no
/// explicit bond symbol is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to an atom's valence. Aromatic bonds count 1 here; the
    /// delocalized contribution is handled by a flat aromatic adjustment when
    /// computing implicit hydrogens.
    pub fn order(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    /// Stable small integer used in fingerprint hashing.
    pub fn code(self) -> u64 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

/// A heavy atom with its bookkeeping. `hydrogens` is the implicit count for
/// organic-subset atoms, or the explicit count for bracket atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    pub hydrogens: u8,
    pub aromatic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

/// Heavy-atom molecular graph. Guaranteed connected (the grammar rejects
/// dot-separated fragments), with no self-loops or duplicate bonds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// adjacency[i] lists (neighbor atom index, bond index) pairs.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub(crate) fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Self {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (idx, bond) in bonds.iter().enumerate() {
            adjacency[bond.a].push((bond.b, idx));
            adjacency[bond.b].push((bond.a, idx));
        }
        MolGraph {
            atoms,
            bonds,
            adjacency,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom(&self, idx: usize) -> &Atom {
        &self.atoms[idx]
    }

    /// Heavy-atom degree (number of explicit neighbors).
    pub fn degree(&self, idx: usize) -> usize {
        self.adjacency[idx].len()
    }

    /// Neighbors of `idx` as (atom index, bond index) pairs.
    pub fn neighbors(&self, idx: usize) -> &[(usize, usize)] {
        &self.adjacency[idx]
    }
}
