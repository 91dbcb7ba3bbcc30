//! Binary LDPC code machinery: the sparse parity-check matrix with its
//! Tanner-graph index sets and edge numbering, alist I/O, GF(2) nullspace
//! bases for encoding, and the bipolar view of codewords.
//!
//! Indices are 0-based in memory. The alist format is 1-based and the
//! conversion happens only in [`parse_alist`] and
//! [`ParityCheckMatrix::to_alist`].

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{check_len, Error, Result};

/// Sparse binary `m x n` parity-check matrix.
///
/// Edges `(i, j)` with `H[i][j] = 1` are numbered row-major: increasing `i`,
/// then increasing `j`. The edges of row `i` therefore form the contiguous
/// range [`ParityCheckMatrix::row_edges`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityCheckMatrix {
    n: usize,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    row_offsets: Vec<usize>,
    col_edges: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

/// `(degree, count)` pairs in increasing degree.
pub type DegreeCounts = Vec<(usize, usize)>;

impl ParityCheckMatrix {
    /// Builds the matrix from the column support of each row, `A(i)`.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut rows = rows;
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "row {i} lists a column twice"
                )));
            }
            if let Some(&j) = row.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidParameter(format!(
                    "row {i} references column {j} but n = {n}"
                )));
            }
        }
        let mut cols = vec![Vec::new(); n];
        let mut col_edges = vec![Vec::new(); n];
        let mut edges = Vec::new();
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                col_edges[j].push(edges.len());
                cols[j].push(i);
                edges.push((i, j));
            }
            row_offsets.push(edges.len());
        }
        Ok(ParityCheckMatrix {
            n,
            rows,
            cols,
            row_offsets,
            col_edges,
            edges,
        })
    }

    /// Builds the matrix from a dense 0/1 array of rows.
    pub fn from_dense(dense: &[Vec<u8>]) -> Result<Self> {
        let n = dense.first().map_or(0, Vec::len);
        let rows = dense
            .iter()
            .enumerate()
            .map(|(i, r)| {
                check_len(n, r.len())?;
                r.iter()
                    .enumerate()
                    .filter_map(|(j, &v)| match v {
                        0 => None,
                        1 => Some(Ok(j)),
                        _ => Some(Err(Error::InvalidParameter(format!(
                            "entry ({i},{j}) is {v}, not binary"
                        )))),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(n, rows)
    }

    /// Number of checks.
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    /// Code length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of ones in `H`, i.e. Tanner graph edges.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Column indices `A(i)` of row `i`, ascending.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Row indices `B(j)` of column `j`, ascending.
    pub fn col(&self, j: usize) -> &[usize] {
        &self.cols[j]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn cols(&self) -> &[Vec<usize>] {
        &self.cols
    }

    /// All edges `(i, j)` in numbering order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edge numbers belonging to row `i`.
    pub fn row_edges(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    /// Edge numbers belonging to column `j`, ascending.
    pub fn col_edges(&self, j: usize) -> &[usize] {
        &self.col_edges[j]
    }

    /// Number of the edge `(i, j)`, if `H[i][j] = 1`.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let row = self.rows.get(i)?;
        row.binary_search(&j).ok().map(|p| self.row_offsets[i] + p)
    }

    /// Design rate `(n - m) / n`.
    pub fn design_rate(&self) -> f64 {
        (self.n as f64 - self.m() as f64) / self.n as f64
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let mut dense = vec![vec![0u8; self.n]; self.m()];
        for &(i, j) in &self.edges {
            dense[i][j] = 1;
        }
        dense
    }

    /// Serializes in unpadded alist format.
    pub fn to_alist(&self) -> String {
        let max_col = self.cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let join = |v: &mut dyn Iterator<Item = usize>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n, self.m());
        let _ = writeln!(s, "{max_col} {max_row}");
        let _ = writeln!(s, "{}", join(&mut self.cols.iter().map(Vec::len)));
        let _ = writeln!(s, "{}", join(&mut self.rows.iter().map(Vec::len)));
        for c in &self.cols {
            let _ = writeln!(s, "{}", join(&mut c.iter().map(|i| i + 1)));
        }
        for r in &self.rows {
            let _ = writeln!(s, "{}", join(&mut r.iter().map(|j| j + 1)));
        }
        s
    }

    /// Degree counts for variable and check nodes.
    pub fn degree_profile(&self) -> (DegreeCounts, DegreeCounts) {
        fn hist(lists: &[Vec<usize>]) -> DegreeCounts {
            let mut h = std::collections::BTreeMap::new();
            for l in lists {
                *h.entry(l.len()).or_insert(0) += 1;
            }
            h.into_iter().collect()
        }
        (hist(&self.cols), hist(&self.rows))
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    /// Next non-blank line as (1-based line number, integers).
    fn next_ints(&mut self, what: &str) -> Result<(usize, Vec<usize>)> {
        for (idx, line) in self.inner.by_ref() {
            if line.trim().is_empty() {
                continue;
            }
            let nums = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        msg: format!("`{tok}` is not a nonnegative integer"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok((idx + 1, nums));
        }
        Err(Error::Parse {
            line: 0,
            msg: format!("unexpected end of input while reading {what}"),
        })
    }
}

/// Parses an alist description of a parity-check matrix.
///
/// Zero entries in the adjacency lists are padding and ignored. Declared
/// degrees and maximum degrees must agree with the lists, and the column
/// lists must describe the same matrix as the row lists.
pub fn parse_alist(text: &str) -> Result<ParityCheckMatrix> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let perr = |line: usize, msg: String| Error::Parse { line, msg };

    let (l, hdr) = lines.next_ints("header")?;
    let [n, m] = hdr[..] else {
        return Err(perr(l, "header must be `n m`".into()));
    };
    if n == 0 || m == 0 {
        return Err(perr(l, "n and m must be positive".into()));
    }
    let (lmax, maxes) = lines.next_ints("maximum degrees")?;
    let [max_col, max_row] = maxes[..] else {
        return Err(perr(lmax, "expected `max_col_deg max_row_deg`".into()));
    };
    let (lc, col_deg) = lines.next_ints("column degrees")?;
    if col_deg.len() != n {
        return Err(perr(lc, format!("expected {n} column degrees, found {}", col_deg.len())));
    }
    let (lr, row_deg) = lines.next_ints("row degrees")?;
    if row_deg.len() != m {
        return Err(perr(lr, format!("expected {m} row degrees, found {}", row_deg.len())));
    }
    if col_deg.iter().copied().max() != Some(max_col) {
        return Err(perr(lmax, "maximum column degree disagrees with degree list".into()));
    }
    if row_deg.iter().copied().max() != Some(max_row) {
        return Err(perr(lmax, "maximum row degree disagrees with degree list".into()));
    }

    let mut cols = Vec::with_capacity(n);
    for (j, &deg) in col_deg.iter().enumerate() {
        let (l, mut list) = lines.next_ints("column lists")?;
        list.retain(|&x| x != 0);
        if list.len() != deg {
            return Err(perr(l, format!("column {} lists {} rows, degree says {deg}", j + 1, list.len())));
        }
        if let Some(&bad) = list.iter().find(|&&i| i > m) {
            return Err(perr(l, format!("row index {bad} out of range 1..={m}")));
        }
        let mut list: Vec<usize> = list.into_iter().map(|i| i - 1).collect();
        list.sort_unstable();
        if list.windows(2).any(|w| w[0] == w[1]) {
            return Err(perr(l, format!("column {} repeats a row index", j + 1)));
        }
        cols.push(list);
    }

    let mut rows = Vec::with_capacity(m);
    let mut row_lines = Vec::with_capacity(m);
    for (i, &deg) in row_deg.iter().enumerate() {
        let (l, mut list) = lines.next_ints("row lists")?;
        list.retain(|&x| x != 0);
        if list.len() != deg {
            return Err(perr(l, format!("row {} lists {} columns, degree says {deg}", i + 1, list.len())));
        }
        if let Some(&bad) = list.iter().find(|&&j| j > n) {
            return Err(perr(l, format!("column index {bad} out of range 1..={n}")));
        }
        let list: Vec<usize> = list.into_iter().map(|j| j - 1).collect();
        if list.iter().collect::<std::collections::HashSet<_>>().len() != list.len() {
            return Err(perr(l, format!("row {} repeats a column index", i + 1)));
        }
        rows.push(list);
        row_lines.push(l);
    }

    let h = ParityCheckMatrix::from_rows(n, rows)?;
    for (i, &l) in row_lines.iter().enumerate() {
        for &j in h.row(i) {
            if cols[j].binary_search(&i).is_err() {
                return Err(perr(
                    l,
                    format!("row {} lists column {} but that column does not list the row", i + 1, j + 1),
                ));
            }
        }
    }
    if h.cols != cols {
        return Err(perr(lc, "column lists disagree with row lists".into()));
    }
    Ok(h)
}

/// A word of `{+1, -1}` values; `+1` is binary 0 and `-1` is binary 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BipolarWord(Vec<f64>);

impl BipolarWord {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidParameter(format!("{v} is not bipolar")));
        }
        Ok(BipolarWord(values))
    }

    pub fn all_ones(n: usize) -> Self {
        BipolarWord(vec![1.0; n])
    }

    /// Maps bits through `0 -> +1`, `1 -> -1`.
    pub fn from_bits(bits: &[u8]) -> Self {
        BipolarWord(bits.iter().map(|&b| if b & 1 == 0 { 1.0 } else { -1.0 }).collect())
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&v| u8::from(v < 0.0)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Number of positions where the words differ.
    pub fn hamming_distance(&self, other: &BipolarWord) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl AsRef<[f64]> for BipolarWord {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Component-wise sign with `0 -> +1`.
pub fn sign_decision(s: &[f64]) -> BipolarWord {
    BipolarWord(s.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect())
}

/// True iff every check's product of bipolar values is `+1`.
pub fn check_parity(x: &BipolarWord, h: &ParityCheckMatrix) -> Result<bool> {
    check_len(h.n(), x.len())?;
    let v = x.as_slice();
    Ok(h
        .rows()
        .iter()
        .all(|row| row.iter().filter(|&&j| v[j] < 0.0).count() % 2 == 0))
}

/// Basis of the binary nullspace of `H`, stored as packed bit rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorBasis {
    n: usize,
    basis: Vec<Vec<u64>>,
}

impl GeneratorBasis {
    /// Code dimension.
    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Basis vector `idx` as 0/1 bytes.
    pub fn vector(&self, idx: usize) -> Vec<u8> {
        unpack(&self.basis[idx], self.n)
    }

    pub fn vectors(&self) -> impl Iterator<Item = Vec<u8>> + '_ {
        (0..self.k()).map(|i| self.vector(i))
    }
}

fn unpack(words: &[u64], n: usize) -> Vec<u8> {
    (0..n).map(|j| ((words[j / 64] >> (j % 64)) & 1) as u8).collect()
}

/// Nullspace of `H` over GF(2) by Gauss-Jordan elimination.
///
/// Every free column after elimination yields one basis vector, so
/// `k = n - rank(H)`.
pub fn gf2_nullspace(h: &ParityCheckMatrix) -> GeneratorBasis {
    let n = h.n();
    let words = n.div_ceil(64);
    let mut rows: Vec<Vec<u64>> = h
        .rows()
        .iter()
        .map(|r| {
            let mut w = vec![0u64; words];
            for &j in r {
                w[j / 64] |= 1 << (j % 64);
            }
            w
        })
        .collect();

    let bit = |w: &[u64], j: usize| (w[j / 64] >> (j % 64)) & 1 == 1;
    let mut pivots: Vec<usize> = Vec::new();
    let mut rank = 0;
    for col in 0..n {
        let Some(p) = (rank..rows.len()).find(|&r| bit(&rows[r], col)) else {
            continue;
        };
        rows.swap(rank, p);
        let pivot_row = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && bit(row, col) {
                for (a, b) in row.iter_mut().zip(&pivot_row) {
                    *a ^= b;
                }
            }
        }
        pivots.push(col);
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }

    let mut is_pivot = vec![false; n];
    for &p in &pivots {
        is_pivot[p] = true;
    }
    let basis = (0..n)
        .filter(|&f| !is_pivot[f])
        .map(|f| {
            let mut v = vec![0u64; words];
            v[f / 64] |= 1 << (f % 64);
            for (r, &p) in pivots.iter().enumerate() {
                if bit(&rows[r], f) {
                    v[p / 64] |= 1 << (p % 64);
                }
            }
            v
        })
        .collect();
    GeneratorBasis { n, basis }
}

/// Uniformly random codeword: each basis vector enters the sum with
/// probability one half.
pub fn random_codeword<R: Rng + ?Sized>(basis: &GeneratorBasis, rng: &mut R) -> BipolarWord {
    let mut acc = vec![0u64; basis.n.div_ceil(64)];
    for b in &basis.basis {
        if rng.random::<bool>() {
            for (a, w) in acc.iter_mut().zip(b) {
                *a ^= w;
            }
        }
    }
    BipolarWord::from_bits(&unpack(&acc, basis.n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) const APPENDIX_ALIST: &str = include_str!("../../../codes/appendix_3x6.alist");

    fn appendix() -> ParityCheckMatrix {
        parse_alist(APPENDIX_ALIST).unwrap()
    }

    #[test]
    fn single_parity_check() {
        let h = parse_alist("2 1\n1 2\n1 1\n2\n1\n1\n1 2\n").unwrap();
        assert_eq!((h.m(), h.n(), h.num_edges()), (1, 2, 2));
        assert_eq!(h.row(0), &[0, 1]);
    }

    #[test]
    fn appendix_code_index_sets() {
        let h = appendix();
        assert_eq!(h.num_edges(), 8);
        assert_eq!(h.row(0), &[0, 1, 2]);
        assert_eq!(h.row(1), &[2, 3]);
        assert_eq!(h.row(2), &[3, 4, 5]);
        assert_eq!(h.col(2), &[0, 1]);
        // row-major numbering reproduces phi(2,3)=4, phi(3,4)=6 (1-based)
        assert_eq!(h.edge_index(1, 2), Some(3));
        assert_eq!(h.edge_index(2, 3), Some(5));
        assert_eq!(h.edge_index(0, 5), None);
        for (k, &(i, j)) in h.edges().iter().enumerate() {
            assert_eq!(h.edge_index(i, j), Some(k));
        }
    }

    #[test]
    fn padded_and_unpadded_agree() {
        let unpadded = "6 3\n2 3\n1 1 2 2 1 1\n3 2 3\n1\n1\n1 2\n2 3\n3\n3\n1 2 3\n3 4\n4 5 6\n";
        assert_eq!(parse_alist(unpadded).unwrap(), appendix());
    }

    #[test]
    fn alist_round_trip() {
        let h = appendix();
        assert_eq!(parse_alist(&h.to_alist()).unwrap(), h);
    }

    #[test]
    fn parse_errors_name_lines() {
        // degree mismatch in the third column list (line 7)
        let bad = "6 3\n2 3\n1 1 2 2 1 1\n3 2 3\n1 0\n1 0\n1 0\n2 3\n3 0\n3 0\n1 2 3\n3 4 0\n4 5 6\n";
        match parse_alist(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
        // row index out of range
        let bad = "2 1\n1 2\n1 1\n2\n2\n1\n1 2\n";
        assert!(matches!(parse_alist(bad), Err(Error::Parse { line: 5, .. })));
        // malformed header
        assert!(matches!(parse_alist("2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_alist("x 1\n"), Err(Error::Parse { line: 1, .. })));
        // rows inconsistent with columns
        let bad = "2 1\n1 2\n1 1\n2\n1\n1\n1 1\n";
        assert!(matches!(parse_alist(bad), Err(Error::Parse { .. })));
        // truncated
        assert!(matches!(parse_alist("2 1\n1 2\n1 1\n2\n1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn nullspace_small_cases() {
        let rep = parse_alist("2 1\n1 2\n1 1\n2\n1\n1\n1 2\n").unwrap();
        let b = gf2_nullspace(&rep);
        assert_eq!(b.k(), 1);
        assert_eq!(b.vector(0), vec![1, 1]);

        let ident = ParityCheckMatrix::from_rows(4, (0..4).map(|i| vec![i]).collect()).unwrap();
        assert_eq!(gf2_nullspace(&ident).k(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(random_codeword(&gf2_nullspace(&ident), &mut rng), BipolarWord::all_ones(4));
        }
    }

    #[test]
    fn nullspace_matches_enumeration() {
        let h = appendix();
        let basis = gf2_nullspace(&h);
        assert_eq!(basis.k(), 3);
        // Exhaustive oracle over all 2^6 words.
        let enumerated: Vec<Vec<u8>> = (0u32..64)
            .map(|w| (0..6).map(|j| ((w >> j) & 1) as u8).collect::<Vec<u8>>())
            .filter(|b| check_parity(&BipolarWord::from_bits(b), &h).unwrap())
            .collect();
        assert_eq!(enumerated.len(), 8);
        // Span of the basis equals the enumerated set.
        let mut span = std::collections::HashSet::new();
        for mask in 0u32..8 {
            let mut acc = vec![0u8; 6];
            for (t, v) in basis.vectors().enumerate() {
                if (mask >> t) & 1 == 1 {
                    for (a, b) in acc.iter_mut().zip(&v) {
                        *a ^= b;
                    }
                }
            }
            span.insert(acc);
        }
        assert_eq!(span.len(), 8);
        for c in &enumerated {
            assert!(span.contains(c));
        }
    }

    #[test]
    fn repetition_parity() {
        let h = parse_alist("2 1\n1 2\n1 1\n2\n1\n1\n1 2\n").unwrap();
        let ok = BipolarWord::new(vec![-1.0, -1.0]).unwrap();
        let bad = BipolarWord::new(vec![1.0, -1.0]).unwrap();
        assert!(check_parity(&BipolarWord::all_ones(2), &h).unwrap());
        assert!(check_parity(&ok, &h).unwrap());
        assert!(!check_parity(&bad, &h).unwrap());
        assert!(matches!(
            check_parity(&BipolarWord::all_ones(3), &h),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sign_decision_cases() {
        assert_eq!(sign_decision(&[0.9642, 0.9901]).as_slice(), &[1.0, 1.0]);
        assert_eq!(sign_decision(&[-0.3, 2.0]).as_slice(), &[-1.0, 1.0]);
        assert_eq!(sign_decision(&[0.0, -0.5]).as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn random_codeword_is_uniform_on_repetition_code() {
        let h = parse_alist("2 1\n1 2\n1 1\n2\n1\n1\n1 2\n").unwrap();
        let basis = gf2_nullspace(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mut plus = 0usize;
        for _ in 0..draws {
            let c = random_codeword(&basis, &mut rng);
            assert!(check_parity(&c, &h).unwrap());
            if c.as_slice()[0] > 0.0 {
                plus += 1;
            }
        }
        let expected = draws as f64 / 2.0;
        let chi2 = 2.0 * (plus as f64 - expected).powi(2) / expected;
        // chi-square, 1 dof, 99.9% quantile
        assert!(chi2 < 10.83, "chi2 = {chi2}");
    }

    #[test]
    fn bipolar_map() {
        let w = BipolarWord::from_bits(&[0, 1, 1, 0]);
        assert_eq!(w.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(w.to_bits(), vec![0, 1, 1, 0]);
        assert!(BipolarWord::new(vec![1.0, 0.5]).is_err());
    }
}
