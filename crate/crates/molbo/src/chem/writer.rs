//! SMILES output for molecular graphs.
//!
//! The writer walks the graph depth-first in a caller-chosen atom priority
//! and emits one string per traversal, so the same molecule can be written
//! under many different atom orders. That makes it the natural counterpart
//! to order-invariance tests: parsing any of those strings must produce an
//! isomorphic graph with identical fingerprints. No canonicalization is
//! attempted - two different priorities usually yield two different strings.

use super::{BondOrder, MolGraph};

#[derive(Clone, Copy, PartialEq)]
enum EdgeClass {
    Unseen,
    Tree,
    Ring,
}

/// Write `mol` as SMILES, visiting atoms by the priority in `order` (a
/// permutation of `0..atom_count`; `order[0]` roots the traversal and ties
/// among unvisited neighbors go to the atom appearing earliest in `order`).
/// The output re-parses to an isomorphic graph: hydrogen counts, charges,
/// aromaticity, and bond orders survive the round trip.
///
/// # Panics
/// Panics when `order` is not a permutation of the atom indices, or when
/// the graph is empty.
pub fn write_smiles(mol: &MolGraph, order: &[usize]) -> String {
    let n = mol.atom_count();
    assert!(n > 0, "cannot write an empty molecular graph");
    assert_eq!(order.len(), n, "order must list every atom exactly once");
    let mut rank = vec![usize::MAX; n];
    for (r, &atom) in order.iter().enumerate() {
        assert!(atom < n, "atom index {atom} out of range");
        assert_eq!(rank[atom], usize::MAX, "atom index {atom} repeated");
        rank[atom] = r;
    }

    let mut writer = Writer {
        mol,
        rank: &rank,
        edges: vec![EdgeClass::Unseen; mol.bond_count()],
        children: vec![Vec::new(); n],
        opens: vec![Vec::new(); n],
        closes: vec![Vec::new(); n],
        labels: vec![0u16; mol.bond_count()],
        label_used: vec![false; 100],
        out: String::new(),
    };
    let mut visited = vec![false; n];
    writer.classify(order[0], &mut visited);
    writer.emit(order[0]);
    writer.out
}

struct Writer<'a> {
    mol: &'a MolGraph,
    rank: &'a [usize],
    edges: Vec<EdgeClass>,
    /// Tree children per atom, in priority order: (child, bond index).
    children: Vec<Vec<(usize, usize)>>,
    /// Ring bonds whose label is introduced at this atom (the earlier
    /// endpoint in the walk) / resolved at this atom (the later endpoint).
    opens: Vec<Vec<usize>>,
    closes: Vec<Vec<usize>>,
    labels: Vec<u16>,
    label_used: Vec<bool>,
    out: String,
}

impl Writer<'_> {
    /// Depth-first pass splitting bonds into spanning-tree edges and ring
    /// closures. A ring bond always connects an atom to one of its tree
    /// ancestors, so the ancestor gets the opening digit.
    fn classify(&mut self, u: usize, visited: &mut [bool]) {
        visited[u] = true;
        let mut neighbors = self.mol.neighbors(u).to_vec();
        neighbors.sort_by_key(|&(v, _)| self.rank[v]);
        for (v, bond) in neighbors {
            if self.edges[bond] != EdgeClass::Unseen {
                continue;
            }
            if visited[v] {
                self.edges[bond] = EdgeClass::Ring;
                self.opens[v].push(bond);
                self.closes[u].push(bond);
            } else {
                self.edges[bond] = EdgeClass::Tree;
                self.children[u].push((v, bond));
                self.classify(v, visited);
            }
        }
    }

    fn emit(&mut self, u: usize) {
        let token = self.atom_token(u);
        self.out.push_str(&token);
        for k in 0..self.closes[u].len() {
            let bond = self.closes[u][k];
            let label = self.labels[bond];
            self.label_used[label as usize] = false;
            self.push_label(label);
        }
        for k in 0..self.opens[u].len() {
            let bond = self.opens[u][k];
            let label = (1..100u16)
                .find(|&l| !self.label_used[l as usize])
                .expect("more than 99 simultaneously open ring bonds");
            self.label_used[label as usize] = true;
            self.labels[bond] = label;
            self.out.push_str(self.bond_symbol(bond));
            self.push_label(label);
        }
        for k in 0..self.children[u].len() {
            let (child, bond) = self.children[u][k];
            let symbol = self.bond_symbol(bond);
            if k + 1 < self.children[u].len() {
                self.out.push('(');
                self.out.push_str(symbol);
                self.emit(child);
                self.out.push(')');
            } else {
                self.out.push_str(symbol);
                self.emit(child);
            }
        }
    }

    fn push_label(&mut self, label: u16) {
        if label < 10 {
            self.out.push(char::from(b'0' + label as u8));
        } else {
            self.out.push_str(&format!("%{label:02}"));
        }
    }

    /// The bond symbol the parser needs to reconstruct this order: nothing
    /// for defaults (single, or aromatic between two aromatic atoms), an
    /// explicit `-` for a single bond that would otherwise default to
    /// aromatic, `=`/`#` for double/triple.
    fn bond_symbol(&self, bond: usize) -> &'static str {
        let b = self.mol.bonds()[bond];
        let both_aromatic = self.mol.atom(b.a).aromatic && self.mol.atom(b.b).aromatic;
        match b.order {
            BondOrder::Single => {
                if both_aromatic {
                    "-"
                } else {
                    ""
                }
            }
            BondOrder::Double => "=",
            BondOrder::Triple => "#",
            BondOrder::Aromatic => {
                assert!(
                    both_aromatic,
                    "aromatic bond between non-aromatic atoms cannot be written"
                );
                ""
            }
        }
    }

    /// Bare organic-subset symbol when the parser would infer exactly this
    /// atom's hydrogen count and charge, a bracket atom otherwise.
    fn atom_token(&self, u: usize) -> String {
        let atom = self.mol.atom(u);
        let bond_sum: u8 = self
            .mol
            .neighbors(u)
            .iter()
            .map(|&(_, b)| self.mol.bonds()[b].order.order())
            .sum();
        let effective = bond_sum + u8::from(atom.aromatic);
        let inferred = atom
            .element
            .default_valences()
            .iter()
            .find(|&&v| v >= effective)
            .map(|&v| v - effective);
        let symbol = if atom.aromatic {
            assert!(
                atom.element.supports_aromatic(),
                "element {} cannot be aromatic",
                atom.element.symbol()
            );
            atom.element.symbol().to_ascii_lowercase()
        } else {
            atom.element.symbol().to_string()
        };
        if atom.charge == 0 && inferred == Some(atom.hydrogens) {
            return symbol;
        }

        let mut token = String::from("[");
        token.push_str(&symbol);
        match atom.hydrogens {
            0 => {}
            1 => token.push('H'),
            h => {
                assert!(h <= 9, "hydrogen count {h} is not expressible");
                token.push_str(&format!("H{h}"));
            }
        }
        match atom.charge {
            0 => {}
            1 => token.push('+'),
            -1 => token.push('-'),
            c if (2..=9).contains(&c) => token.push_str(&format!("+{c}")),
            c if (-9..=-2).contains(&c) => token.push_str(&format!("-{}", -c)),
            c => {
                // Parser charge digits are single characters; larger
                // magnitudes fall back to repeated signs.
                let sign = if c > 0 { '+' } else { '-' };
                for _ in 0..c.unsigned_abs() {
                    token.push(sign);
                }
            }
        }
        token.push(']');
        token
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Element, parse_smiles};
    use super::*;
    use crate::chem::morgan_fingerprint;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn identity(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn identity_order_reproduces_simple_strings() {
        for s in [
            "CCO",
            "c1ccccc1",
            "CC(C)C(=O)O",
            "C1CC1",
            "CC#N",
            "ClCBr",
            "C1CCOC1",
        ] {
            let mol = parse_smiles(s).unwrap();
            assert_eq!(write_smiles(&mol, &identity(mol.atom_count())), s);
        }
    }

    #[test]
    fn bracket_atoms_survive() {
        for s in ["[NH4+]", "[O-]", "[S+2]", "c1cc[nH]c1", "C[N+](=O)[O-]"] {
            let mol = parse_smiles(s).unwrap();
            let written = write_smiles(&mol, &identity(mol.atom_count()));
            let reparsed = parse_smiles(&written).unwrap_or_else(|e| {
                panic!("{s} -> {written}: {e}");
            });
            assert_eq!(reparsed.atom_count(), mol.atom_count());
            for (a, b) in reparsed.atoms().iter().zip(mol.atoms()) {
                assert_eq!(a, b, "{s} -> {written}");
            }
        }
    }

    #[test]
    fn single_bonds_between_aromatic_rings_stay_single() {
        let biphenyl = "c1ccc(cc1)-c1ccccc1";
        let mol = parse_smiles(biphenyl).unwrap();
        let written = write_smiles(&mol, &identity(mol.atom_count()));
        let reparsed = parse_smiles(&written).unwrap();
        let singles = |m: &MolGraph| {
            m.bonds()
                .iter()
                .filter(|b| b.order == BondOrder::Single)
                .count()
        };
        assert_eq!(singles(&reparsed), singles(&mol));
        assert_eq!(reparsed.bond_count(), mol.bond_count());
    }

    /// Order-insensitive structural summary: atom records plus, per atom,
    /// the sorted list of (neighbor element, bond code) pairs.
    fn signature(mol: &MolGraph) -> Vec<(u8, i8, u8, bool, Vec<(u8, u64)>)> {
        let mut sig: Vec<_> = (0..mol.atom_count())
            .map(|u| {
                let a = mol.atom(u);
                let mut nbrs: Vec<(u8, u64)> = mol
                    .neighbors(u)
                    .iter()
                    .map(|&(v, b)| {
                        (
                            mol.atom(v).element.atomic_number(),
                            mol.bonds()[b].order.code(),
                        )
                    })
                    .collect();
                nbrs.sort_unstable();
                (
                    a.element.atomic_number(),
                    a.charge,
                    a.hydrogens,
                    a.aromatic,
                    nbrs,
                )
            })
            .collect();
        sig.sort();
        sig
    }

    #[test]
    fn random_orders_round_trip_to_the_same_structure() {
        let corpus = [
            "CCO",
            "CC(=O)Oc1ccccc1C(=O)O",
            "c1ccc2ccccc2c1",
            "CC(C)(C)c1ccc(O)cc1",
            "C1CCC2(CC1)CCCCC2",
            "c1cc[nH]c1",
            "C[N+](=O)[O-]",
            "N#Cc1ccccc1",
            "OS(=O)(=O)O",
            "C1CC2CC1C2",
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        for s in corpus {
            let mol = parse_smiles(s).unwrap();
            let fp = morgan_fingerprint(&mol, 2, 1024).unwrap();
            for _ in 0..10 {
                let mut order = identity(mol.atom_count());
                order.shuffle(&mut rng);
                let written = write_smiles(&mol, &order);
                let reparsed = parse_smiles(&written)
                    .unwrap_or_else(|e| panic!("{s} under {order:?} -> {written}: {e}"));
                assert_eq!(signature(&reparsed), signature(&mol), "{s} -> {written}");
                let fp2 = morgan_fingerprint(&reparsed, 2, 1024).unwrap();
                assert_eq!(fp, fp2, "{s} -> {written}");
            }
        }
    }

    #[test]
    fn different_orders_produce_different_strings() {
        let mol = parse_smiles("CC(=O)Oc1ccccc1").unwrap();
        let n = mol.atom_count();
        let base = write_smiles(&mol, &identity(n));
        let reversed: Vec<usize> = (0..n).rev().collect();
        assert_ne!(base, write_smiles(&mol, &reversed));
    }

    #[test]
    fn nitrogen_with_unusual_hydrogen_count_gets_a_bracket() {
        // Trimethylamine nitrogen: inferred hydrogens match, bare N.
        let mol = parse_smiles("CN(C)C").unwrap();
        let written = write_smiles(&mol, &identity(4));
        assert_eq!(written, "CN(C)C");
        // A quaternary bracket nitrogen keeps its bracket.
        let mol = parse_smiles("C[NH+](C)C").unwrap();
        let written = write_smiles(&mol, &identity(4));
        assert!(written.contains("[NH+]"), "{written}");
        let n = parse_smiles(&written)
            .unwrap()
            .atoms()
            .iter()
            .find(|a| a.element == Element::N)
            .copied()
            .unwrap();
        assert_eq!(n.hydrogens, 1);
        assert_eq!(n.charge, 1);
    }
}
