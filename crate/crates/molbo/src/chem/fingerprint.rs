//! Morgan-style circular fingerprints and Tanimoto similarity.
//!
//! Each atom starts from a hashed invariant tuple (element, charge, degree,
//! total hydrogen count, aromaticity). Larger neighborhoods are built
//! iteratively: at radius r an atom's code combines its previous code with
//! the sorted list of (bond code, neighbor code) pairs, so the code captures
//! the substructure up to r bonds away and is independent of input atom
//! order. Every (atom, radius) code — including radius 0 — is folded into a
//! fixed-width bit vector by taking the code modulo the width.

use crate::hashing::{combine, mix64};

use super::{ChemError, MolGraph};

/// Binary fingerprint of fixed width (a power of two, at least 64 bits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    words: Vec<u64>,
    width: usize,
}

impl Fingerprint {
    /// All-zero fingerprint of the given width.
    pub fn empty(width: usize) -> Result<Self, ChemError> {
        if width < 64 || !width.is_power_of_two() {
            return Err(ChemError::BadFingerprintWidth { width });
        }
        Ok(Fingerprint {
            words: vec![0; width / 64],
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fingerprint with exactly the given bits set. Lets callers load
    /// precomputed fingerprints or build synthetic ones for kernel tests.
    /// Panics if a bit index is out of range.
    pub fn from_on_bits(width: usize, bits: &[usize]) -> Result<Self, ChemError> {
        let mut fp = Self::empty(width)?;
        for &bit in bits {
            assert!(bit < width, "bit {bit} out of range for width {width}");
            fp.set(bit);
        }
        Ok(fp)
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] & (1 << (bit % 64)) != 0
    }

    /// Number of set bits.
    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Number of bits set in both fingerprints.
    pub fn intersection(&self, other: &Fingerprint) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    /// Indices of set bits, ascending.
    pub fn on_bits(&self) -> Vec<usize> {
        (0..self.width).filter(|&b| self.get(b)).collect()
    }
}

/// Tanimoto similarity |a AND b| / |a OR b|. Two all-zero fingerprints are
/// defined to have similarity 1 (they are indistinguishable), which keeps the
/// kernel matrix positive on the diagonal.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, ChemError> {
    if a.width != b.width {
        return Err(ChemError::WidthMismatch {
            a: a.width,
            b: b.width,
        });
    }
    let inter = f64::from(a.intersection(b));
    let union = f64::from(a.popcount()) + f64::from(b.popcount()) - inter;
    if union == 0.0 {
        Ok(1.0)
    } else {
        Ok(inter / union)
    }
}

/// Initial per-atom invariant: a hash of (atomic number, charge, heavy-atom
/// degree, hydrogen count, aromatic flag).
fn initial_codes(mol: &MolGraph) -> Vec<u64> {
    (0..mol.atom_count())
        .map(|idx| {
            let atom = mol.atom(idx);
            let mut acc = mix64(0x6174_6f6d_5f69_6e76); // fixed domain tag
            acc = combine(acc, u64::from(atom.element.atomic_number()));
            acc = combine(acc, atom.charge as u64);
            acc = combine(acc, mol.degree(idx) as u64);
            acc = combine(acc, u64::from(atom.hydrogens));
            acc = combine(acc, u64::from(atom.aromatic));
            acc
        })
        .collect()
}

/// Circular fingerprint with neighborhoods up to `radius` bonds, folded into
/// `width` bits (power of two, >= 64; 1024 is the conventional default).
pub fn morgan_fingerprint(
    mol: &MolGraph,
    radius: u32,
    width: usize,
) -> Result<Fingerprint, ChemError> {
    let mut fp = Fingerprint::empty(width)?;
    if mol.atom_count() == 0 {
        return Err(ChemError::EmptyGraph);
    }
    let mask = (width - 1) as u64;

    let mut codes = initial_codes(mol);
    for &code in &codes {
        fp.set((code & mask) as usize);
    }
    for _ in 0..radius {
        let mut next = Vec::with_capacity(codes.len());
        for idx in 0..mol.atom_count() {
            // Sorting the (bond, neighbor-code) pairs makes the combined code
            // invariant to the order neighbors appear in the input.
            let mut env: Vec<(u64, u64)> = mol
                .neighbors(idx)
                .iter()
                .map(|&(nbr, bond)| (mol.bonds()[bond].order.code(), codes[nbr]))
                .collect();
            env.sort_unstable();
            let mut acc = combine(mix64(0x6e62_685f_6974_6572), codes[idx]);
            for (bond_code, nbr_code) in env {
                acc = combine(acc, bond_code);
                acc = combine(acc, nbr_code);
            }
            next.push(acc);
        }
        codes = next;
        for &code in &codes {
            fp.set((code & mask) as usize);
        }
    }
    Ok(fp)
}
