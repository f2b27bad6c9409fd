//! Dense linear algebra over GF(2).
//!
//! Vectors and matrices are stored word-packed (64 bits per `u64`, row-major
//! for matrices). All elimination routines pick the leftmost pivot column and,
//! within a column, the first row at or below the current pivot row holding a
//! one, so every result is deterministic.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

const WORD: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Gf2Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix is rank deficient: rank {rank} < {rows} rows")]
    RankDeficient { rank: usize, rows: usize },
    #[error("matrix has more rows ({rows}) than columns ({cols}); no left inverse exists")]
    TooManyRows { rows: usize, cols: usize },
    #[error("invalid matrix text at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<(), Gf2Error> {
    if expected == got {
        Ok(())
    } else {
        Err(Gf2Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// Fixed-length vector over GF(2).
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; words_for(len)],
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            assert!(b <= 1, "bit values must be 0 or 1");
            if b == 1 {
                v.set(i, true);
            }
        }
        v
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        let bits: Vec<bool> = bits.into_iter().collect();
        let mut v = Self::zeros(bits.len());
        for (i, b) in bits.into_iter().enumerate() {
            v.set(i, b);
        }
        v
    }

    /// Vector with ones exactly at `support`.
    pub fn from_support(len: usize, support: &[usize]) -> Self {
        let mut v = Self::zeros(len);
        for &i in support {
            v.set(i, true);
        }
        v
    }

    /// Unit vector with a single one at `index`.
    pub fn unit(len: usize, index: usize) -> Self {
        Self::from_support(len, &[index])
    }

    /// Low `len` bits of `value`, bit `i` of the vector = bit `i` of the integer.
    pub fn from_u64(len: usize, value: u64) -> Self {
        assert!(len <= 64);
        let mut v = Self::zeros(len);
        if len > 0 {
            let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
            v.words[0] = value & mask;
        }
        v
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn xor_assign(&mut self, other: &BitVector) {
        assert_eq!(self.len, other.len, "xor of vectors with different lengths");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn xor(&self, other: &BitVector) -> BitVector {
        let mut out = self.clone();
        out.xor_assign(other);
        out
    }

    /// GF(2) inner product.
    pub fn dot(&self, other: &BitVector) -> bool {
        assert_eq!(self.len, other.len, "dot of vectors with different lengths");
        let ones: u32 = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum();
        ones & 1 == 1
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Indices of set bits, ascending.
    pub fn support(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (wi, &w) in self.words.iter().enumerate() {
            let mut w = w;
            while w != 0 {
                let tz = w.trailing_zeros() as usize;
                out.push(wi * WORD + tz);
                w &= w - 1;
            }
        }
        out
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.iter().map(u8::from).collect()
    }

    /// Little-endian integer value (bit `i` weighs `2^i`). Requires `len <= 64`.
    pub fn to_u64(&self) -> u64 {
        assert!(self.len <= 64, "vector too long for u64 conversion");
        self.words.first().copied().unwrap_or(0)
    }

    /// Concatenation `[self; other]`.
    pub fn concat(&self, other: &BitVector) -> BitVector {
        let mut out = BitVector::zeros(self.len + other.len);
        for i in self.support() {
            out.set(i, true);
        }
        for i in other.support() {
            out.set(self.len + i, true);
        }
        out
    }

    pub fn slice(&self, start: usize, end: usize) -> BitVector {
        assert!(start <= end && end <= self.len);
        BitVector::from_bools((start..end).map(|i| self.get(i)))
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector({self})")
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Dense row-major matrix over GF(2).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Self {
            rows,
            cols,
            stride,
            data: vec![0; rows * stride],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Build from nested 0/1 rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged rows");
            for (j, &b) in row.iter().enumerate() {
                assert!(b <= 1, "bit values must be 0 or 1");
                m.set(i, j, b == 1);
            }
        }
        m
    }

    pub fn from_row_vectors(cols: usize, rows: &[BitVector]) -> Self {
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "row length mismatch");
            m.row_words_mut(i).copy_from_slice(r.words());
        }
        m
    }

    /// Rows given by their supports.
    pub fn from_supports(cols: usize, supports: &[Vec<usize>]) -> Self {
        let mut m = Self::zeros(supports.len(), cols);
        for (i, s) in supports.iter().enumerate() {
            for &j in s {
                m.set(i, j, true);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of range");
        (self.data[i * self.stride + j / WORD] >> (j % WORD)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of range");
        let mask = 1u64 << (j % WORD);
        let w = &mut self.data[i * self.stride + j / WORD];
        if value {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    #[inline]
    fn row_words(&self, i: usize) -> &[u64] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    #[inline]
    fn row_words_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn row(&self, i: usize) -> BitVector {
        BitVector {
            len: self.cols,
            words: self.row_words(i).to_vec(),
        }
    }

    pub fn row_vectors(&self) -> Vec<BitVector> {
        (0..self.rows).map(|i| self.row(i)).collect()
    }

    pub fn column(&self, j: usize) -> BitVector {
        BitVector::from_bools((0..self.rows).map(|i| self.get(i, j)))
    }

    pub fn row_weight(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices of ones in row `i`.
    pub fn row_support(&self, i: usize) -> Vec<usize> {
        self.row(i).support()
    }

    /// `row[dst] ^= row[src]`.
    fn xor_rows(&mut self, dst: usize, src: usize) {
        debug_assert_ne!(dst, src);
        let s = self.stride;
        let (lo, hi) = if dst < src {
            let (a, b) = self.data.split_at_mut(src * s);
            (&mut a[dst * s..(dst + 1) * s], &b[..s])
        } else {
            let (a, b) = self.data.split_at_mut(dst * s);
            (&mut b[..s], &a[src * s..(src + 1) * s] as &[u64])
        };
        for (d, v) in lo.iter_mut().zip(hi) {
            *d ^= v;
        }
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for w in 0..self.stride {
            self.data.swap(a * self.stride + w, b * self.stride + w);
        }
    }

    pub fn transpose(&self) -> BitMatrix {
        let mut t = BitMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in self.row_support(i) {
                t.set(j, i, true);
            }
        }
        t
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&w| w == 0)
    }

    /// `[self; other]`.
    pub fn vstack(&self, other: &BitMatrix) -> Result<BitMatrix, Gf2Error> {
        check_dim("vstack column count", self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(BitMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            stride: self.stride,
            data,
        })
    }

    /// `[self | other]`.
    pub fn hstack(&self, other: &BitMatrix) -> Result<BitMatrix, Gf2Error> {
        check_dim("hstack row count", self.rows, other.rows)?;
        let mut out = BitMatrix::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            for j in self.row_support(i) {
                out.set(i, j, true);
            }
            for j in other.row_support(i) {
                out.set(i, self.cols + j, true);
            }
        }
        Ok(out)
    }

    /// Block-diagonal `[[self, 0], [0, other]]`.
    pub fn block_diag(&self, other: &BitMatrix) -> BitMatrix {
        let mut out = BitMatrix::zeros(self.rows + other.rows, self.cols + other.cols);
        for i in 0..self.rows {
            for j in self.row_support(i) {
                out.set(i, j, true);
            }
        }
        for i in 0..other.rows {
            for j in other.row_support(i) {
                out.set(self.rows + i, self.cols + j, true);
            }
        }
        out
    }

    /// Submatrix of the listed rows.
    pub fn select_rows(&self, rows: &[usize]) -> BitMatrix {
        let mut out = BitMatrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_words_mut(dst).copy_from_slice(self.row_words(src));
        }
        out
    }

    /// `A·x` over GF(2).
    pub fn matvec(&self, x: &BitVector) -> Result<BitVector, Gf2Error> {
        check_dim("matvec: cols(A) vs len(x)", self.cols, x.len())?;
        let mut out = BitVector::zeros(self.rows);
        for i in 0..self.rows {
            let parity: u32 = self
                .row_words(i)
                .iter()
                .zip(x.words())
                .map(|(a, b)| (a & b).count_ones())
                .sum();
            if parity & 1 == 1 {
                out.set(i, true);
            }
        }
        Ok(out)
    }

    /// `A·B` over GF(2).
    pub fn matmul(&self, other: &BitMatrix) -> Result<BitMatrix, Gf2Error> {
        check_dim("matmul: cols(A) vs rows(B)", self.cols, other.rows)?;
        let mut out = BitMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in self.row_support(i) {
                let src = other.row_words(k);
                let dst = &mut out.data[i * out.stride..(i + 1) * out.stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d ^= s;
                }
            }
        }
        Ok(out)
    }

    /// Integer Gram matrix `A·Aᵀ` over the integers: entry `(i, j)` counts the
    /// columns where rows `i` and `j` are both one.
    pub fn integer_gram(&self) -> IntMatrix {
        let mut g = IntMatrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                let c: u32 = self
                    .row_words(i)
                    .iter()
                    .zip(self.row_words(j))
                    .map(|(a, b)| (a & b).count_ones())
                    .sum();
                g.set(i, j, c as i64);
            }
        }
        g
    }

    pub fn rank(&self) -> usize {
        Rref::new(self).rank()
    }

    /// Some `x` with `A·x = b`, or `None` when the system is inconsistent.
    /// Free variables are set to zero.
    pub fn solve(&self, b: &BitVector) -> Result<Option<BitVector>, Gf2Error> {
        check_dim("solve: rows(A) vs len(b)", self.rows, b.len())?;
        Ok(Rref::new(self).solve(b))
    }

    /// `B` (cols × rows) with `A·B = I`, built column by column from the
    /// systems `A·x_i = e_i`.
    pub fn left_inverse(&self) -> Result<BitMatrix, Gf2Error> {
        if self.rows > self.cols {
            return Err(Gf2Error::TooManyRows {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let rref = Rref::new(self);
        if rref.rank() < self.rows {
            return Err(Gf2Error::RankDeficient {
                rank: rref.rank(),
                rows: self.rows,
            });
        }
        let mut b = BitMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            let x = rref
                .solve(&BitVector::unit(self.rows, i))
                .expect("full row rank implies every unit system is consistent");
            for j in x.support() {
                b.set(j, i, true);
            }
        }
        Ok(b)
    }

    /// Basis of `{v : A·v = 0}` as rows, one per free column of the RREF
    /// (ascending), each with a single one among the free columns.
    pub fn nullspace_basis(&self) -> BitMatrix {
        let rref = Rref::new(self);
        let free = rref.free_columns();
        let mut basis = BitMatrix::zeros(free.len(), self.cols);
        for (k, &f) in free.iter().enumerate() {
            basis.set(k, f, true);
            for (r, &p) in rref.pivots.iter().enumerate() {
                if rref.reduced.get(r, f) {
                    basis.set(k, p, true);
                }
            }
        }
        basis
    }

    /// Bits of the matrix as a `Vec<Vec<u8>>`, row-major.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|i| self.row(i).to_bits()).collect()
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMatrix {}x{}", self.rows, self.cols)?;
        write!(f, "{self}")
    }
}

/// One row per line of `0`/`1` characters.
impl fmt::Display for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            writeln!(f, "{}", self.row(i))?;
        }
        Ok(())
    }
}

impl FromStr for BitMatrix {
    type Err = Gf2Error;

    /// Parses the line format produced by `Display`. Blank lines are skipped;
    /// the column count is taken from the first row.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut rows = Vec::new();
        for (ln, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<u8>, _> = line
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Gf2Error::Parse {
                        line: ln + 1,
                        reason: format!("unexpected character {other:?}"),
                    }),
                })
                .collect();
            let row = row?;
            if let Some(first) = rows.first() {
                let first: &Vec<u8> = first;
                if first.len() != row.len() {
                    return Err(Gf2Error::Parse {
                        line: ln + 1,
                        reason: format!("expected {} columns, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        Ok(BitMatrix::from_rows(&rows))
    }
}

/// Reduced row echelon form together with the row transform `T` satisfying
/// `T·A = R`.
#[derive(Clone, Debug)]
pub struct Rref {
    reduced: BitMatrix,
    transform: BitMatrix,
    pivots: Vec<usize>,
}

impl Rref {
    pub fn new(a: &BitMatrix) -> Self {
        let mut reduced = a.clone();
        let mut transform = BitMatrix::identity(a.rows());
        let mut pivots = Vec::new();
        let mut row = 0;
        for col in 0..a.cols() {
            if row == a.rows() {
                break;
            }
            let Some(p) = (row..a.rows()).find(|&r| reduced.get(r, col)) else {
                continue;
            };
            reduced.swap_rows(row, p);
            transform.swap_rows(row, p);
            for r in 0..a.rows() {
                if r != row && reduced.get(r, col) {
                    reduced.xor_rows(r, row);
                    transform.xor_rows(r, row);
                }
            }
            pivots.push(col);
            row += 1;
        }
        Self {
            reduced,
            transform,
            pivots,
        }
    }

    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn reduced(&self) -> &BitMatrix {
        &self.reduced
    }

    pub fn transform(&self) -> &BitMatrix {
        &self.transform
    }

    pub fn free_columns(&self) -> Vec<usize> {
        let mut is_pivot = vec![false; self.reduced.cols()];
        for &p in &self.pivots {
            is_pivot[p] = true;
        }
        (0..self.reduced.cols()).filter(|&c| !is_pivot[c]).collect()
    }

    /// Solution with free variables fixed to zero.
    pub fn solve(&self, b: &BitVector) -> Option<BitVector> {
        let c = self.transform.matvec(b).expect("transform is square in rows(A)");
        if (self.rank()..c.len()).any(|i| c.get(i)) {
            return None;
        }
        let mut x = BitVector::zeros(self.reduced.cols());
        for (r, &p) in self.pivots.iter().enumerate() {
            if c.get(r) {
                x.set(p, true);
            }
        }
        Some(x)
    }
}

/// Small dense integer matrix (used for overlap counts).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: i64) {
        self.data[i * self.cols + j] = v;
    }
}
