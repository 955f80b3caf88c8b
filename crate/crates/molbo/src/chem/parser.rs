//! SMILES parser for the organic subset.
//!
//! Supported notation: organic-subset atoms (`B C N O P S F Cl Br I`),
//! aromatic lowercase `c n o s`, bracket atoms with explicit hydrogen counts
//! and formal charges (`[nH]`, `[O-]`, `[NH4+]`, `[S+2]`), single/double/
//! triple bond symbols (`-`, `=`, `#`), parenthesized branches, and ring
//! closures `1`-`9` or `%nn`. Isotopes, stereo markers, wildcard atoms, and
//! dot-separated fragments are rejected. Every error reports the byte offset
//! of the offending character.
//!
//! Hydrogens never become graph nodes: organic-subset atoms receive an
//! implicit count from their default valence (aromatic atoms donate one
//! valence unit to the ring system), bracket atoms use the written count
//! verbatim. A bond-order sum exceeding the element's maximum valence is a
//! parse error for organic-subset atoms; bracket atoms are taken as written.

use std::collections::HashMap;

use super::{Atom, Bond, BondOrder, ChemError, Element, MolGraph};

/// Parse a SMILES string into a heavy-atom molecular graph.
pub fn parse_smiles(smiles: &str) -> Result<MolGraph, ChemError> {
    Parser::new(smiles).run()
}

/// Atom under construction; `explicit_h` is `Some` for bracket atoms (count
/// as written) and `None` for organic-subset atoms (implicit count derived
/// from valence after the whole graph is known).
struct PendingAtom {
    element: Element,
    charge: i8,
    aromatic: bool,
    explicit_h: Option<u8>,
    offset: usize,
}

struct RingOpening {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<PendingAtom>,
    bonds: Vec<Bond>,
    prev: Option<usize>,
    pending_bond: Option<(BondOrder, usize)>,
    branch_stack: Vec<(usize, usize)>,
    rings: HashMap<u16, RingOpening>,
}

impl<'a> Parser<'a> {
    fn new(smiles: &'a str) -> Self {
        Parser {
            bytes: smiles.as_bytes(),
            pos: 0,
            atoms: Vec::new(),
            bonds: Vec::new(),
            prev: None,
            pending_bond: None,
            branch_stack: Vec::new(),
            rings: HashMap::new(),
        }
    }

    fn run(mut self) -> Result<MolGraph, ChemError> {
        if self.bytes.is_empty() {
            return Err(ChemError::EmptyInput);
        }
        while let Some(&b) = self.bytes.get(self.pos) {
            match b {
                b'-' | b'=' | b'#' => self.take_bond(b)?,
                b'(' => self.open_branch()?,
                b')' => self.close_branch()?,
                b'1'..=b'9' => {
                    let label = u16::from(b - b'0');
                    let offset = self.pos;
                    self.pos += 1;
                    self.ring_closure(label, offset)?;
                }
                b'%' => {
                    let offset = self.pos;
                    let label = self.take_percent_label()?;
                    self.ring_closure(label, offset)?;
                }
                b'[' => {
                    let atom = self.take_bracket_atom()?;
                    self.push_atom(atom)?;
                }
                b'.' => {
                    return Err(ChemError::DisconnectedFragment { offset: self.pos });
                }
                _ => {
                    let atom = self.take_organic_atom()?;
                    self.push_atom(atom)?;
                }
            }
        }
        if let Some((bond_offset, _)) = self.pending_bond.map(|(o, off)| (off, o)) {
            return Err(ChemError::DanglingBond {
                offset: bond_offset,
            });
        }
        if let Some(&(_, offset)) = self.branch_stack.last() {
            return Err(ChemError::UnclosedBranch { offset });
        }
        if let Some((&label, opening)) = self.rings.iter().min_by_key(|(_, o)| o.offset) {
            return Err(ChemError::UnclosedRing {
                offset: opening.offset,
                label,
            });
        }
        self.finish()
    }

    // ----- token handlers -------------------------------------------------

    fn take_bond(&mut self, b: u8) -> Result<(), ChemError> {
        if self.prev.is_none() {
            return Err(ChemError::LeadingBond { offset: self.pos });
        }
        if let Some((_, offset)) = self.pending_bond {
            return Err(ChemError::DanglingBond { offset });
        }
        let order = match b {
            b'-' => BondOrder::Single,
            b'=' => BondOrder::Double,
            _ => BondOrder::Triple,
        };
        self.pending_bond = Some((order, self.pos));
        self.pos += 1;
        Ok(())
    }

    fn open_branch(&mut self) -> Result<(), ChemError> {
        if let Some((_, offset)) = self.pending_bond {
            return Err(ChemError::DanglingBond { offset });
        }
        match self.prev {
            Some(prev) => {
                self.branch_stack.push((prev, self.pos));
                self.pos += 1;
                Ok(())
            }
            None => Err(ChemError::UnexpectedChar {
                offset: self.pos,
                found: '(',
            }),
        }
    }

    fn close_branch(&mut self) -> Result<(), ChemError> {
        if let Some((_, offset)) = self.pending_bond {
            return Err(ChemError::DanglingBond { offset });
        }
        match self.branch_stack.pop() {
            Some((prev, _)) => {
                self.prev = Some(prev);
                self.pos += 1;
                Ok(())
            }
            None => Err(ChemError::UnmatchedClose { offset: self.pos }),
        }
    }

    fn take_percent_label(&mut self) -> Result<u16, ChemError> {
        // '%' must be followed by exactly two digits (labels 10-99).
        let percent = self.pos;
        self.pos += 1;
        let mut label = 0u16;
        for _ in 0..2 {
            match self.bytes.get(self.pos) {
                Some(&b @ b'0'..=b'9') => {
                    label = label * 10 + u16::from(b - b'0');
                    self.pos += 1;
                }
                Some(&b) => {
                    return Err(ChemError::UnexpectedChar {
                        offset: self.pos,
                        found: char::from(b),
                    });
                }
                None => {
                    return Err(ChemError::UnexpectedChar {
                        offset: percent,
                        found: '%',
                    });
                }
            }
        }
        Ok(label)
    }

    fn take_organic_atom(&mut self) -> Result<PendingAtom, ChemError> {
        let offset = self.pos;
        let b = self.bytes[self.pos];
        let (element, aromatic, len) = match b {
            b'C' if self.bytes.get(self.pos + 1) == Some(&b'l') => (Element::Cl, false, 2),
            b'B' if self.bytes.get(self.pos + 1) == Some(&b'r') => (Element::Br, false, 2),
            b'B' => (Element::B, false, 1),
            b'C' => (Element::C, false, 1),
            b'N' => (Element::N, false, 1),
            b'O' => (Element::O, false, 1),
            b'P' => (Element::P, false, 1),
            b'S' => (Element::S, false, 1),
            b'F' => (Element::F, false, 1),
            b'I' => (Element::I, false, 1),
            b'c' => (Element::C, true, 1),
            b'n' => (Element::N, true, 1),
            b'o' => (Element::O, true, 1),
            b's' => (Element::S, true, 1),
            _ => {
                return Err(ChemError::UnexpectedChar {
                    offset,
                    found: char::from(b),
                });
            }
        };
        self.pos += len;
        Ok(PendingAtom {
            element,
            charge: 0,
            aromatic,
            explicit_h: None,
            offset,
        })
    }

    fn take_bracket_atom(&mut self) -> Result<PendingAtom, ChemError> {
        let open = self.pos;
        self.pos += 1; // consume '['

        let (element, aromatic) = self.take_bracket_element(open)?;
        let mut hydrogens = 0u8;
        if self.bytes.get(self.pos) == Some(&b'H') {
            self.pos += 1;
            hydrogens = 1;
            if let Some(&b @ b'0'..=b'9') = self.bytes.get(self.pos) {
                hydrogens = b - b'0';
                self.pos += 1;
            }
        }
        let charge = self.take_bracket_charge(open)?;
        match self.bytes.get(self.pos) {
            Some(&b']') => {
                self.pos += 1;
            }
            other => {
                return Err(ChemError::MalformedBracket {
                    offset: open,
                    reason: match other {
                        Some(&b) => format!("expected ']', found {:?}", char::from(b)),
                        None => "unterminated bracket".to_string(),
                    },
                });
            }
        }
        Ok(PendingAtom {
            element,
            charge,
            aromatic,
            explicit_h: Some(hydrogens),
            offset: open,
        })
    }

    fn take_bracket_element(&mut self, open: usize) -> Result<(Element, bool), ChemError> {
        let offset = self.pos;
        let b = match self.bytes.get(self.pos) {
            Some(&b) => b,
            None => {
                return Err(ChemError::MalformedBracket {
                    offset: open,
                    reason: "unterminated bracket".to_string(),
                });
            }
        };
        // Two-letter symbols of the subset first, then single letters. An
        // unexpected trailing lowercase letter (e.g. "[Si]") is reported as an
        // unknown element rather than a stray character.
        let two = self.bytes.get(self.pos + 1).map(|&n| (b, n));
        if let Some((b'C', b'l')) = two {
            self.pos += 2;
            return Ok((Element::Cl, false));
        }
        if let Some((b'B', b'r')) = two {
            self.pos += 2;
            return Ok((Element::Br, false));
        }
        let single = match b {
            b'B' => Some((Element::B, false)),
            b'C' => Some((Element::C, false)),
            b'N' => Some((Element::N, false)),
            b'O' => Some((Element::O, false)),
            b'P' => Some((Element::P, false)),
            b'S' => Some((Element::S, false)),
            b'F' => Some((Element::F, false)),
            b'I' => Some((Element::I, false)),
            b'c' => Some((Element::C, true)),
            b'n' => Some((Element::N, true)),
            b'o' => Some((Element::O, true)),
            b's' => Some((Element::S, true)),
            _ => None,
        };
        match single {
            Some((element, aromatic)) => {
                // Reject a lowercase continuation that would spell a symbol
                // outside the subset ("[Se]", "[Si]", ...). 'H' and digits and
                // signs are legitimate continuations handled by the caller.
                if let Some(&next) = self.bytes.get(self.pos + 1) {
                    if next.is_ascii_lowercase() {
                        return Err(ChemError::UnknownElement {
                            offset,
                            symbol: format!("{}{}", char::from(b), char::from(next)),
                        });
                    }
                }
                self.pos += 1;
                Ok((element, aromatic))
            }
            None => Err(ChemError::UnknownElement {
                offset,
                symbol: char::from(b).to_string(),
            }),
        }
    }

    fn take_bracket_charge(&mut self, open: usize) -> Result<i8, ChemError> {
        let sign = match self.bytes.get(self.pos) {
            Some(&b'+') => 1i8,
            Some(&b'-') => -1i8,
            _ => return Ok(0),
        };
        self.pos += 1;
        // Either a digit magnitude ("+2") or repeated signs ("++"); mixing is
        // malformed.
        if let Some(&b @ b'0'..=b'9') = self.bytes.get(self.pos) {
            self.pos += 1;
            return Ok(sign * (b - b'0') as i8);
        }
        let mut magnitude = 1i8;
        while let Some(&b) = self.bytes.get(self.pos) {
            let repeat = if sign > 0 { b'+' } else { b'-' };
            let opposite = if sign > 0 { b'-' } else { b'+' };
            if b == repeat {
                magnitude += 1;
                self.pos += 1;
            } else if b == opposite {
                return Err(ChemError::MalformedBracket {
                    offset: open,
                    reason: "mixed charge signs".to_string(),
                });
            } else {
                break;
            }
        }
        Ok(sign * magnitude)
    }

    // ----- graph assembly -------------------------------------------------

    fn push_atom(&mut self, atom: PendingAtom) -> Result<(), ChemError> {
        let idx = self.atoms.len();
        let aromatic = atom.aromatic;
        self.atoms.push(atom);
        if let Some(prev) = self.prev {
            let order = match self.pending_bond.take() {
                Some((order, _)) => order,
                None => self.default_bond(prev, idx, aromatic),
            };
            self.add_bond(prev, idx, order, self.pos)?;
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, label: u16, offset: usize) -> Result<(), ChemError> {
        let current = match self.prev {
            Some(idx) => idx,
            None => {
                return Err(ChemError::UnexpectedChar {
                    offset,
                    found: char::from(self.bytes[offset]),
                });
            }
        };
        let pending = self.pending_bond.take().map(|(order, _)| order);
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(
                    label,
                    RingOpening {
                        atom: current,
                        bond: pending,
                        offset,
                    },
                );
                Ok(())
            }
            Some(opening) => {
                if opening.atom == current {
                    return Err(ChemError::RingSelfLoop { offset, label });
                }
                let order = match (opening.bond, pending) {
                    (None, None) => {
                        self.default_bond(opening.atom, current, self.atoms[current].aromatic)
                    }
                    (Some(order), None) | (None, Some(order)) => order,
                    (Some(a), Some(b)) if a == b => a,
                    (Some(_), Some(_)) => {
                        return Err(ChemError::RingBondConflict { offset, label });
                    }
                };
                self.add_bond(opening.atom, current, order, offset)
            }
        }
    }

    fn default_bond(&self, a: usize, b: usize, b_aromatic: bool) -> BondOrder {
        let _ = b;
        if self.atoms[a].aromatic && b_aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, offset: usize) -> Result<(), ChemError> {
        let key = (a.min(b), a.max(b));
        if self
            .bonds
            .iter()
            .any(|bond| (bond.a.min(bond.b), bond.a.max(bond.b)) == key)
        {
            return Err(ChemError::DuplicateBond {
                offset,
                a: key.0,
                b: key.1,
            });
        }
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }

    /// Resolve implicit hydrogens and valence checks, then build the graph.
    fn finish(self) -> Result<MolGraph, ChemError> {
        let mut bond_sums = vec![0u8; self.atoms.len()];
        for bond in &self.bonds {
            bond_sums[bond.a] = bond_sums[bond.a].saturating_add(bond.order.order());
            bond_sums[bond.b] = bond_sums[bond.b].saturating_add(bond.order.order());
        }
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for (idx, pending) in self.atoms.iter().enumerate() {
            let hydrogens = match pending.explicit_h {
                Some(h) => h,
                None => {
                    // Aromatic atoms contribute one valence unit to the
                    // delocalized system on top of their explicit bonds.
                    let effective = bond_sums[idx] + u8::from(pending.aromatic);
                    let valences = pending.element.default_valences();
                    match valences.iter().find(|&&v| v >= effective) {
                        Some(&v) => v - effective,
                        None => {
                            return Err(ChemError::ValenceViolation {
                                offset: pending.offset,
                                atom: idx,
                                symbol: pending.element.symbol().to_string(),
                                bond_sum: effective,
                                max_valence: *valences.last().expect("non-empty valence list"),
                            });
                        }
                    }
                }
            };
            atoms.push(Atom {
                element: pending.element,
                charge: pending.charge,
                hydrogens,
                aromatic: pending.aromatic,
            });
        }
        Ok(MolGraph::new(atoms, self.bonds))
    }
}
