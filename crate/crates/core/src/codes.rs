//! Stabilizer code families and the binary decoding problems derived from them.
//!
//! Geometry conventions:
//!
//! * Toric code, distance `L`: qubits live on the edges of an `L x L` periodic
//!   square lattice. Horizontal edge `(r, c)` joins vertices `(r, c)` and
//!   `(r, c+1)` and has index `r*L + c`; vertical edge `(r, c)` joins `(r, c)`
//!   and `(r+1, c)` and has index `L^2 + r*L + c`. Vertex `(r, c)` carries an
//!   X-type check, face `(r, c)` (top-left corner at vertex `(r, c)`) a Z-type
//!   check. The last generator of each type is dropped because the product of
//!   all generators of one type is the identity.
//! * Rotated surface code, odd distance `L`: qubit `(r, c)` has index
//!   `r*L + c`. Face `(r, c)` with `r, c` in `[-1, L-1]` covers the grid points
//!   `(r..=r+1, c..=c+1)` that exist; it is X-type when `r + c` is even and
//!   Z-type otherwise. All `(L-1)^2` bulk faces are kept; weight-2 faces are
//!   kept on the top/bottom boundary when X-type and on the left/right
//!   boundary when Z-type. Generators are ordered by `(r, c)`.
//! * Repetition code, length `L`: Z-type checks `Z_i Z_{i+1}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf2::{BitMatrix, BitVector, Gf2Error};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodeError {
    #[error("invalid code distance {distance} for {family}: {reason}")]
    InvalidDistance {
        family: CodeFamily,
        distance: usize,
        reason: &'static str,
    },
    #[error("{family} code has no {missing} stabilizers; the {sector} sector is undetectable")]
    MissingSector {
        family: CodeFamily,
        missing: &'static str,
        sector: &'static str,
    },
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeFamily {
    Toric,
    RotatedSurface,
    Repetition,
}

impl CodeFamily {
    pub fn build(self, distance: usize) -> Result<StabilizerCode, CodeError> {
        match self {
            CodeFamily::Toric => StabilizerCode::toric(distance),
            CodeFamily::RotatedSurface => StabilizerCode::rotated_surface(distance),
            CodeFamily::Repetition => StabilizerCode::repetition(distance),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CodeFamily::Toric => "toric",
            CodeFamily::RotatedSurface => "rotated-surface",
            CodeFamily::Repetition => "repetition",
        }
    }
}

impl std::fmt::Display for CodeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which Pauli component the decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sector {
    /// Bit-flip errors, detected by Z-type checks.
    XErrors,
    /// Phase-flip errors, detected by X-type checks.
    ZErrors,
    /// Full symplectic representation `(e_x | e_z)`.
    Depolarizing,
}

impl Sector {
    pub fn as_str(self) -> &'static str {
        match self {
            Sector::XErrors => "x",
            Sector::ZErrors => "z",
            Sector::Depolarizing => "xz",
        }
    }
}

/// A CSS stabilizer code given by its X- and Z-type generator supports and a
/// symplectic basis of logical operators (`lx[i]` pairs with `lz[i]`).
#[derive(Clone, Debug)]
pub struct StabilizerCode {
    pub family: CodeFamily,
    pub distance: usize,
    pub n_qubits: usize,
    pub k_logical: usize,
    pub hx: BitMatrix,
    pub hz: BitMatrix,
    pub lx: BitMatrix,
    pub lz: BitMatrix,
}

impl StabilizerCode {
    pub fn toric(l: usize) -> Result<Self, CodeError> {
        if l < 2 {
            return Err(CodeError::InvalidDistance {
                family: CodeFamily::Toric,
                distance: l,
                reason: "toric codes need L >= 2",
            });
        }
        let n = 2 * l * l;
        let h = |r: usize, c: usize| (r % l) * l + (c % l);
        let v = |r: usize, c: usize| l * l + (r % l) * l + (c % l);

        let mut vertex = Vec::with_capacity(l * l);
        let mut face = Vec::with_capacity(l * l);
        for r in 0..l {
            for c in 0..l {
                vertex.push(vec![h(r, c), h(r, c + l - 1), v(r, c), v(r + l - 1, c)]);
                face.push(vec![h(r, c), h(r + 1, c), v(r, c), v(r, c + 1)]);
            }
        }
        vertex.pop();
        face.pop();

        let lx = vec![
            (0..l).map(|r| h(r, 0)).collect::<Vec<_>>(),
            (0..l).map(|c| v(0, c)).collect(),
        ];
        let lz = vec![
            (0..l).map(|c| h(0, c)).collect::<Vec<_>>(),
            (0..l).map(|r| v(r, 0)).collect(),
        ];

        Ok(Self {
            family: CodeFamily::Toric,
            distance: l,
            n_qubits: n,
            k_logical: 2,
            hx: BitMatrix::from_supports(n, &vertex),
            hz: BitMatrix::from_supports(n, &face),
            lx: BitMatrix::from_supports(n, &lx),
            lz: BitMatrix::from_supports(n, &lz),
        })
    }

    pub fn rotated_surface(l: usize) -> Result<Self, CodeError> {
        if l < 3 || l.is_multiple_of(2) {
            return Err(CodeError::InvalidDistance {
                family: CodeFamily::RotatedSurface,
                distance: l,
                reason: "rotated surface codes need odd L >= 3",
            });
        }
        let n = l * l;
        let li = l as isize;
        let mut x_checks = Vec::new();
        let mut z_checks = Vec::new();
        for r in -1..li {
            for c in -1..li {
                let x_type = (r + c).rem_euclid(2) == 0;
                let on_row_boundary = r == -1 || r == li - 1;
                let on_col_boundary = c == -1 || c == li - 1;
                if on_row_boundary && on_col_boundary {
                    continue;
                }
                if on_row_boundary && !x_type || on_col_boundary && x_type {
                    continue;
                }
                let mut support = Vec::with_capacity(4);
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (qr, qc) = (r + dr, c + dc);
                        if (0..li).contains(&qr) && (0..li).contains(&qc) {
                            support.push((qr * li + qc) as usize);
                        }
                    }
                }
                if x_type {
                    x_checks.push(support);
                } else {
                    z_checks.push(support);
                }
            }
        }
        let lx = vec![(0..l).map(|r| r * l).collect::<Vec<_>>()];
        let lz = vec![(0..l).collect::<Vec<_>>()];
        Ok(Self {
            family: CodeFamily::RotatedSurface,
            distance: l,
            n_qubits: n,
            k_logical: 1,
            hx: BitMatrix::from_supports(n, &x_checks),
            hz: BitMatrix::from_supports(n, &z_checks),
            lx: BitMatrix::from_supports(n, &lx),
            lz: BitMatrix::from_supports(n, &lz),
        })
    }

    pub fn repetition(l: usize) -> Result<Self, CodeError> {
        if l < 2 {
            return Err(CodeError::InvalidDistance {
                family: CodeFamily::Repetition,
                distance: l,
                reason: "repetition codes need L >= 2",
            });
        }
        let checks: Vec<Vec<usize>> = (0..l - 1).map(|i| vec![i, i + 1]).collect();
        Ok(Self {
            family: CodeFamily::Repetition,
            distance: l,
            n_qubits: l,
            k_logical: 1,
            hx: BitMatrix::zeros(0, l),
            hz: BitMatrix::from_supports(l, &checks),
            lx: BitMatrix::from_supports(l, &[(0..l).collect()]),
            lz: BitMatrix::from_supports(l, &[vec![0]]),
        })
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.family, self.distance)
    }

    /// Total number of independent stabilizer generators.
    pub fn num_stabilizers(&self) -> usize {
        self.hx.rows() + self.hz.rows()
    }

    /// Decoding problem for one error type (independent noise).
    pub fn sector_problem(&self, sector: Sector) -> Result<DecodingProblem, CodeError> {
        let (checks, logicals, stabilizers) = match sector {
            Sector::XErrors => (&self.hz, &self.lz, &self.hx),
            Sector::ZErrors => (&self.hx, &self.lx, &self.hz),
            Sector::Depolarizing => return self.depolarizing_problem(),
        };
        if checks.rows() == 0 {
            return Err(CodeError::MissingSector {
                family: self.family,
                missing: if sector == Sector::XErrors { "Z-type" } else { "X-type" },
                sector: sector.as_str(),
            });
        }
        Ok(DecodingProblem::new(
            self.name(),
            sector,
            checks.clone(),
            logicals.clone(),
            stabilizers.clone(),
        ))
    }

    /// Symplectic problem over `e = (e_x | e_z)`. Check rows are `[Hz, 0]`
    /// followed by `[0, Hx]`; logical rows are `[Lz, 0]` then `[0, Lx]`.
    pub fn depolarizing_problem(&self) -> Result<DecodingProblem, CodeError> {
        if self.hx.rows() == 0 || self.hz.rows() == 0 {
            return Err(CodeError::MissingSector {
                family: self.family,
                missing: if self.hx.rows() == 0 { "X-type" } else { "Z-type" },
                sector: Sector::Depolarizing.as_str(),
            });
        }
        let checks = self.hz.block_diag(&self.hx);
        let logicals = self.lz.block_diag(&self.lx);
        let stabilizers = self.hx.block_diag(&self.hz);
        Ok(DecodingProblem::new(
            self.name(),
            Sector::Depolarizing,
            checks,
            logicals,
            stabilizers,
        ))
    }

    /// Golden-file text: a `#` header line then both check matrices and both
    /// logical matrices, each preceded by a label line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# name={} L={} n={} k={} m={}",
            self.family,
            self.distance,
            self.n_qubits,
            self.k_logical,
            self.num_stabilizers()
        );
        for (label, m) in [("hx", &self.hx), ("hz", &self.hz), ("lx", &self.lx), ("lz", &self.lz)] {
            let _ = writeln!(out, "[{label} {}x{}]", m.rows(), m.cols());
            out.push_str(&m.to_string());
        }
        out
    }
}

/// One decodable binary problem: error bits map to syndrome bits through
/// `checks` and to logical-class bits through `logicals`. `stabilizers`
/// holds the error-space representation of the stabilizer generators
/// (degenerate errors differ by their span).
#[derive(Clone, Debug)]
pub struct DecodingProblem {
    pub code_name: String,
    pub sector: Sector,
    pub checks: BitMatrix,
    pub logicals: BitMatrix,
    pub stabilizers: BitMatrix,
}

impl DecodingProblem {
    pub fn new(
        code_name: String,
        sector: Sector,
        checks: BitMatrix,
        logicals: BitMatrix,
        stabilizers: BitMatrix,
    ) -> Self {
        assert_eq!(checks.cols(), logicals.cols());
        assert_eq!(checks.cols(), stabilizers.cols());
        Self {
            code_name,
            sector,
            checks,
            logicals,
            stabilizers,
        }
    }

    pub fn n_err(&self) -> usize {
        self.checks.cols()
    }

    /// Number of syndrome bits.
    pub fn m(&self) -> usize {
        self.checks.rows()
    }

    pub fn n_log(&self) -> usize {
        self.logicals.rows()
    }

    pub fn n_classes(&self) -> usize {
        1 << self.n_log()
    }

    /// `[checks; logicals]`.
    pub fn augmented(&self) -> BitMatrix {
        self.checks
            .vstack(&self.logicals)
            .expect("checks and logicals share the error space")
    }

    pub fn syndrome(&self, e: &BitVector) -> Result<BitVector, Gf2Error> {
        self.checks.matvec(e)
    }

    pub fn logical_bits(&self, e: &BitVector) -> Result<BitVector, Gf2Error> {
        self.logicals.matvec(e)
    }

    /// Class index with bit `j` set iff logical row `j` flips.
    pub fn logical_class(&self, e: &BitVector) -> Result<usize, Gf2Error> {
        Ok(class_index(&self.logical_bits(e)?))
    }

    /// Logical-class bits for a class index (inverse of `logical_class`).
    pub fn class_bits(&self, class: usize) -> BitVector {
        assert!(class < self.n_classes(), "class {class} out of range");
        BitVector::from_u64(self.n_log(), class as u64)
    }

    pub fn attention_mask(&self) -> SyndromeMask {
        SyndromeMask::from_checks(&self.checks)
    }
}

pub fn class_index(bits: &BitVector) -> usize {
    bits.support().iter().map(|&j| 1usize << j).sum()
}

/// Which syndrome-stream token pairs may attend to each other. Index 0 is the
/// global token; index `i + 1` is syndrome bit `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyndromeMask {
    size: usize,
    allow: Vec<bool>,
}

impl SyndromeMask {
    /// Allows `(i, j)` when checks `i` and `j` share a qubit (or `i == j`),
    /// plus every pair involving the global token.
    pub fn from_checks(checks: &BitMatrix) -> Self {
        let m = checks.rows();
        let gram = checks.integer_gram();
        let size = m + 1;
        let mut allow = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allow[i * size + j] = i == 0
                    || j == 0
                    || i == j
                    || gram.get(i - 1, j - 1) > 0;
            }
        }
        Self { size, allow }
    }

    /// Mask with only the diagonal and the global row/column allowed.
    pub fn diagonal(m: usize) -> Self {
        let size = m + 1;
        let allow = (0..size * size)
            .map(|idx| {
                let (i, j) = (idx / size, idx % size);
                i == 0 || j == 0 || i == j
            })
            .collect();
        Self { size, allow }
    }

    pub fn full(m: usize) -> Self {
        let size = m + 1;
        Self {
            size,
            allow: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }

    /// Allowed key indices for each query row.
    pub fn allowed_lists(&self) -> Vec<Vec<usize>> {
        (0..self.size)
            .map(|i| (0..self.size).filter(|&j| self.allows(i, j)).collect())
            .collect()
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Same mask with token indices relabelled by `perm` (new index `perm[i]`
    /// for old index `i`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.size);
        let mut allow = vec![false; self.size * self.size];
        for i in 0..self.size {
            for j in 0..self.size {
                allow[perm[i] * self.size + perm[j]] = self.allows(i, j);
            }
        }
        Self {
            size: self.size,
            allow,
        }
    }
}
