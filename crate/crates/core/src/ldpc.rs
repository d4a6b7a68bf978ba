//! Regular LDPC codes: construction, systematic encoding and min-sum decoding.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 25;
pub const MIN_SUM_SCALE: f64 = 0.75;
const CONSTRUCTION_ATTEMPTS: usize = 64;
const REPAIR_PASSES: usize = 200;

/// Dense GF(2) row stored as 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn zeros(n: usize) -> Self {
        BitRow(vec![0; n.div_ceil(64)])
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn xor(&mut self, other: &BitRow) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a ^= b;
        }
    }
}

/// Parity-check matrix plus systematic encoder.
#[derive(Clone, Debug)]
pub struct LdpcCode {
    n: usize,
    m: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    vars: Vec<Vec<usize>>,
    /// Codeword positions carrying the information bits.
    info_cols: Vec<usize>,
    /// Codeword positions carrying parity, one per independent check.
    parity_cols: Vec<usize>,
    /// `parity[i] = ⊕_j a[i][j]·info[j]`.
    a: Vec<BitRow>,
}

/// Decoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub bits: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

fn count_four_cycles(checks: &[Vec<usize>]) -> usize {
    let mut pair = std::collections::HashMap::<(usize, usize), usize>::new();
    for row in checks {
        for (i, &a) in row.iter().enumerate() {
            for &b in &row[i + 1..] {
                *pair.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    pair.values().map(|&c| c * (c - 1) / 2).sum()
}

/// Socket assignment: `sockets[e]` is the check of edge `e`, variable `e / col_weight`.
fn edges_to_checks(sockets: &[usize], m: usize, col_weight: usize) -> Vec<Vec<usize>> {
    let mut checks = vec![Vec::new(); m];
    for (e, &c) in sockets.iter().enumerate() {
        checks[c].push(e / col_weight);
    }
    checks
}

fn repeated_edges(sockets: &[usize], col_weight: usize) -> usize {
    sockets
        .chunks(col_weight)
        .map(|s| (1..s.len()).filter(|&j| s[..j].contains(&s[j])).count())
        .sum()
}

/// Repeated edges dominate, then 4-cycles.
fn defect_cost(sockets: &[usize], m: usize, col_weight: usize) -> usize {
    let checks = edges_to_checks(sockets, m, col_weight);
    let dup = repeated_edges(sockets, col_weight);
    dup * 1_000_000 + if dup == 0 { count_four_cycles(&checks) } else { 0 }
}

/// Edges touching a repeated edge or a 4-cycle.
fn conflicted_edges(sockets: &[usize], m: usize, col_weight: usize) -> Vec<usize> {
    let n = sockets.len() / col_weight;
    let checks = edges_to_checks(sockets, m, col_weight);
    let mut bad = Vec::new();
    for v in 0..n {
        let mine = &sockets[v * col_weight..(v + 1) * col_weight];
        let mut seen = std::collections::HashSet::new();
        for (j, &c) in mine.iter().enumerate() {
            if mine[..j].contains(&c) {
                bad.push(v * col_weight + j);
                continue;
            }
            for &u in &checks[c] {
                if u != v && !seen.insert(u) {
                    bad.push(v * col_weight + j);
                    break;
                }
            }
        }
    }
    bad
}

/// GF(2) row reduction. Returns the pivot columns and the reduced rows.
fn row_reduce(rows: &mut [BitRow], n: usize) -> Vec<usize> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..n {
        if r == rows.len() {
            break;
        }
        let Some(p) = (r..rows.len()).find(|&i| rows[i].get(col)) else {
            continue;
        };
        rows.swap(r, p);
        let pivot = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i != r && row.get(col) {
                row.xor(&pivot);
            }
        }
        pivots.push(col);
        r += 1;
    }
    pivots
}

/// Rank of a binary matrix given as rows of column indices.
pub fn gf2_rank(rows: &[Vec<usize>], n: usize) -> usize {
    let mut dense: Vec<BitRow> = rows
        .iter()
        .map(|r| {
            let mut b = BitRow::zeros(n);
            for &c in r {
                b.0[c / 64] ^= 1 << (c % 64);
            }
            b
        })
        .collect();
    row_reduce(&mut dense, n).len()
}

impl LdpcCode {
    /// Random `(col_weight, 2·col_weight)`-regular code of length `n`.
    ///
    /// Each attempt draws a socket permutation, then swaps sockets to remove
    /// repeated edges and 4-cycles. The attempt with the fewest remaining
    /// 4-cycles whose rank deficiency is at most one is kept.
    pub fn construct(n: usize, col_weight: usize, seed: u64) -> Result<Self> {
        let row_weight = 2 * col_weight;
        if col_weight < 2 {
            return Err(Error::Construction(format!("column weight {col_weight} is below 2")));
        }
        if n == 0 || (n * col_weight) % row_weight != 0 {
            return Err(Error::Construction(format!(
                "length {n} does not admit a ({col_weight}, {row_weight})-regular code"
            )));
        }
        let m = n * col_weight / row_weight;
        if m < row_weight {
            return Err(Error::Construction(format!("length {n} is too short")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(usize, Vec<Vec<usize>>)> = None;
        for _ in 0..CONSTRUCTION_ATTEMPTS {
            let mut sockets: Vec<usize> = (0..n * col_weight).map(|e| e / row_weight).collect();
            sockets.shuffle(&mut rng);
            let mut cost = defect_cost(&sockets, m, col_weight);
            for _ in 0..REPAIR_PASSES {
                let bad = conflicted_edges(&sockets, m, col_weight);
                if bad.is_empty() {
                    break;
                }
                for e in bad {
                    let other = rng.random_range(0..sockets.len());
                    sockets.swap(e, other);
                    let c = defect_cost(&sockets, m, col_weight);
                    if c <= cost {
                        cost = c;
                    } else {
                        sockets.swap(e, other);
                    }
                }
            }
            let checks = edges_to_checks(&sockets, m, col_weight);
            if repeated_edges(&sockets, col_weight) > 0 || gf2_rank(&checks, n) + 1 < m {
                continue;
            }
            let cycles = count_four_cycles(&checks);
            if best.as_ref().is_none_or(|(c, _)| cycles < *c) {
                best = Some((cycles, checks));
            }
            if cycles == 0 {
                break;
            }
        }
        let (_, checks) = best.ok_or_else(|| {
            Error::Construction(format!(
                "no valid ({col_weight}, {row_weight}) code of length {n} in {CONSTRUCTION_ATTEMPTS} attempts"
            ))
        })?;
        Ok(Self::from_checks(n, checks))
    }

    fn from_checks(n: usize, mut checks: Vec<Vec<usize>>) -> Self {
        for c in &mut checks {
            c.sort_unstable();
        }
        let m = checks.len();
        let mut vars = vec![Vec::new(); n];
        for (ci, row) in checks.iter().enumerate() {
            for &v in row {
                vars[v].push(ci);
            }
        }
        let mut dense: Vec<BitRow> = checks
            .iter()
            .map(|r| {
                let mut b = BitRow::zeros(n);
                r.iter().for_each(|&c| b.set(c));
                b
            })
            .collect();
        let parity_cols = row_reduce(&mut dense, n);
        let info_cols: Vec<usize> = (0..n).filter(|c| !parity_cols.contains(c)).collect();
        let a = dense[..parity_cols.len()]
            .iter()
            .map(|row| {
                let mut b = BitRow::zeros(info_cols.len());
                for (j, &c) in info_cols.iter().enumerate() {
                    if row.get(c) {
                        b.set(j);
                    }
                }
                b
            })
            .collect();
        LdpcCode {
            n,
            m,
            checks,
            vars,
            info_cols,
            parity_cols,
            a,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.info_cols.len()
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn four_cycles(&self) -> usize {
        count_four_cycles(&self.checks)
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::Dimension(format!(
                "{} information bits for a code with k = {}",
                info.len(),
                self.k()
            )));
        }
        let mut u = BitRow::zeros(self.k());
        for (j, &b) in info.iter().enumerate() {
            if b & 1 == 1 {
                u.set(j);
            }
        }
        let mut c = vec![0u8; self.n];
        for (&col, &b) in self.info_cols.iter().zip(info) {
            c[col] = b & 1;
        }
        for (row, &col) in self.a.iter().zip(&self.parity_cols) {
            let ones: u32 = row.0.iter().zip(&u.0).map(|(a, b)| (a & b).count_ones()).sum();
            c[col] = (ones & 1) as u8;
        }
        Ok(c)
    }

    pub fn syndrome_ok(&self, c: &[u8]) -> bool {
        self.checks
            .iter()
            .all(|row| row.iter().fold(0u8, |acc, &v| acc ^ c[v]) == 0)
    }

    /// Information bits of a codeword.
    pub fn info_bits(&self, c: &[u8]) -> Vec<u8> {
        self.info_cols.iter().map(|&i| c[i]).collect()
    }

    /// Flooding normalized min-sum. `llr > 0` favors bit 1.
    pub fn decode(&self, llr: &[f64], max_iter: usize) -> Result<Decoded> {
        if llr.len() != self.n {
            return Err(Error::Dimension(format!("{} LLRs for a length-{} code", llr.len(), self.n)));
        }
        if max_iter == 0 {
            return Err(Error::Contract("decode needs at least one iteration".into()));
        }
        // Decoder-internal sign: positive favors 0.
        let prior: Vec<f64> = llr.iter().map(|l| -l).collect();
        let edges: usize = self.checks.iter().map(Vec::len).sum();
        let mut c2v = vec![0.0; edges];
        let mut offsets = Vec::with_capacity(self.m);
        let mut acc = 0;
        for row in &self.checks {
            offsets.push(acc);
            acc += row.len();
        }
        let mut posterior = prior.clone();
        let mut bits = vec![0u8; self.n];
        let mut v2c = vec![0.0; edges];
        for it in 1..=max_iter {
            for (ci, row) in self.checks.iter().enumerate() {
                let o = offsets[ci];
                for (j, &v) in row.iter().enumerate() {
                    v2c[o + j] = posterior[v] - c2v[o + j];
                }
                let msgs = &v2c[o..o + row.len()];
                let mut sign = 1.0;
                let (mut min1, mut min2, mut argmin) = (f64::INFINITY, f64::INFINITY, 0);
                for (j, &x) in msgs.iter().enumerate() {
                    if x < 0.0 {
                        sign = -sign;
                    }
                    let a = x.abs();
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        argmin = j;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for (j, &x) in msgs.iter().enumerate() {
                    let s = if x < 0.0 { -sign } else { sign };
                    let mag = if j == argmin { min2 } else { min1 };
                    c2v[o + j] = MIN_SUM_SCALE * s * mag;
                }
            }
            posterior.copy_from_slice(&prior);
            for (ci, row) in self.checks.iter().enumerate() {
                let o = offsets[ci];
                for (j, &v) in row.iter().enumerate() {
                    posterior[v] += c2v[o + j];
                }
            }
            for (b, &p) in bits.iter_mut().zip(&posterior) {
                *b = (p < 0.0) as u8;
            }
            // A zero posterior is an erasure, never a confident codeword.
            if posterior.iter().all(|&p| p != 0.0) && self.syndrome_ok(&bits) {
                return Ok(Decoded {
                    bits,
                    converged: true,
                    iterations: it,
                });
            }
        }
        Ok(Decoded {
            bits,
            converged: false,
            iterations: max_iter,
        })
    }

    /// The parity-check matrix in alist format.
    pub fn to_alist(&self) -> String {
        let mut s = String::new();
        let max_col = self.vars.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.checks.iter().map(Vec::len).max().unwrap_or(0);
        let line = |v: &mut String, xs: &mut dyn Iterator<Item = usize>| {
            let parts: Vec<String> = xs.map(|x| x.to_string()).collect();
            let _ = writeln!(v, "{}", parts.join(" "));
        };
        let _ = writeln!(s, "{} {}", self.n, self.m);
        let _ = writeln!(s, "{max_col} {max_row}");
        line(&mut s, &mut self.vars.iter().map(Vec::len));
        line(&mut s, &mut self.checks.iter().map(Vec::len));
        for col in &self.vars {
            let mut idx: Vec<usize> = col.iter().map(|c| c + 1).collect();
            idx.resize(max_col, 0);
            line(&mut s, &mut idx.into_iter());
        }
        for row in &self.checks {
            let mut idx: Vec<usize> = row.iter().map(|v| v + 1).collect();
            idx.resize(max_row, 0);
            line(&mut s, &mut idx.into_iter());
        }
        s
    }

    pub fn write_alist(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_alist())?;
        Ok(())
    }

    /// Parses the output of [`LdpcCode::to_alist`] (row lists are authoritative).
    pub fn from_alist(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Construction(format!("malformed alist: {what}"));
        let mut lines = text.lines().map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| bad(t)))
                .collect::<Result<Vec<_>>>()
        });
        let mut next = || lines.next().ok_or_else(|| bad("truncated"))?;
        let dims = next()?;
        let (n, m) = match dims[..] {
            [n, m] => (n, m),
            _ => return Err(bad("header")),
        };
        next()?;
        next()?;
        next()?;
        for _ in 0..n {
            next()?;
        }
        let mut checks = Vec::with_capacity(m);
        for _ in 0..m {
            let row: Vec<usize> = next()?.into_iter().filter(|&v| v > 0).map(|v| v - 1).collect();
            if row.iter().any(|&v| v >= n) {
                return Err(bad("variable index out of range"));
            }
            checks.push(row);
        }
        Ok(Self::from_checks(n, checks))
    }
}

/// Fraction of blocks with at least one differing bit.
pub fn bler(decoded: &[Vec<u8>], reference: &[Vec<u8>]) -> Result<f64> {
    if decoded.len() != reference.len() || decoded.is_empty() {
        return Err(Error::Dimension(format!(
            "{} decoded blocks against {} reference blocks",
            decoded.len(),
            reference.len()
        )));
    }
    let errors = decoded.iter().zip(reference).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / decoded.len() as f64)
}
