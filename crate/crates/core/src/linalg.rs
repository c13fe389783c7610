//! Sparse Jacobians and a bordered-band Cholesky solver for their normal
//! equations.
//!
//! Every hypothesis model packs its unknowns as a handful of scalar
//! parameters followed by the voltage trajectories interleaved sample by
//! sample. Each output row touches at most three consecutive samples, so
//! `HᵀH` restricted to trajectory columns is banded, with a dense border for
//! the parameters. Factoring that structure costs `O(n·b²)` instead of the
//! `O(n³)` of a dense solve.

use crate::error::{Error, Result};

/// A pivot is treated as zero when it falls below this fraction of the
/// corresponding diagonal entry before elimination.
const SINGULAR_PIVOT: f64 = 1e-12;

/// Row-compressed sparse matrix. Columns `0..border` are dense parameter
/// columns; the rest are expected to be locally coupled.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    cols: usize,
    border: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Jacobian {
    pub fn new(cols: usize, border: usize) -> Self {
        Self { cols, border: border.min(cols), row_ptr: vec![0], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Dense matrix given row by row. No border columns.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut jac = Self::new(cols, 0);
        let mut entries = Vec::new();
        for row in rows {
            assert_eq!(row.len(), cols, "ragged dense matrix");
            entries.clear();
            entries.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)));
            jac.push_row(&mut entries);
        }
        jac
    }

    /// Appends a row. Entries are sorted by column and duplicates summed.
    pub fn push_row(&mut self, entries: &mut [(usize, f64)]) {
        entries.sort_unstable_by_key(|e| e.0);
        let start = self.col_idx.len();
        for &(c, v) in entries.iter() {
            debug_assert!(c < self.cols);
            if self.col_idx.len() > start && *self.col_idx.last().unwrap() == c {
                *self.values.last_mut().unwrap() += v;
            } else {
                self.col_idx.push(c);
                self.values.push(v);
            }
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn border(&self) -> usize {
        self.border
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|r| {
                let mut dense = vec![0.0; self.cols];
                let (cols, vals) = self.row(r);
                for (c, v) in cols.iter().zip(vals) {
                    dense[*c] = *v;
                }
                dense
            })
            .collect()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            sq[*c] += v * v;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn scale_columns(&mut self, scale: &[f64]) {
        assert_eq!(scale.len(), self.cols);
        for (c, v) in self.col_idx.iter().zip(self.values.iter_mut()) {
            *v *= scale[*c];
        }
    }

    /// `H x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows())
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(c, v)| v * x[*c]).sum()
            })
            .collect()
    }

    /// `Hᵀ e`
    pub fn tmul_vec(&self, e: &[f64]) -> Vec<f64> {
        assert_eq!(e.len(), self.rows());
        let mut out = vec![0.0; self.cols];
        for (r, er) in e.iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                out[*c] += v * er;
            }
        }
        out
    }

    /// Half-bandwidth of `HᵀH` over the non-border columns.
    fn normal_bandwidth(&self) -> usize {
        (0..self.rows())
            .map(|r| {
                let (cols, _) = self.row(r);
                let mut inner = cols.iter().filter(|c| **c >= self.border);
                match (inner.next(), cols.last()) {
                    (Some(lo), Some(hi)) => hi - lo,
                    _ => 0,
                }
            })
            .max()
            .unwrap_or(0)
    }
}

/// Normal matrix `HᵀH + λI` stored as a dense border block, a dense
/// border-to-band coupling block and a lower band.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    p: usize,
    nt: usize,
    bw: usize,
    /// `p × p`, row major.
    border: Vec<f64>,
    /// `nt × p`, row major.
    coupling: Vec<f64>,
    /// Lower band, `nt × (bw + 1)`; entry `(i, j)` at `i * (bw + 1) + bw - (i - j)`,
    /// so each row runs in ascending column order and ends on the diagonal.
    band: Vec<f64>,
}

impl NormalEquations {
    pub fn assemble(h: &Jacobian) -> Self {
        let p = h.border;
        let nt = h.cols - p;
        let bw = h.normal_bandwidth();
        let w = bw + 1;
        let mut ne = Self {
            p,
            nt,
            bw,
            border: vec![0.0; p * p],
            coupling: vec![0.0; nt * p],
            band: vec![0.0; nt * w],
        };
        for r in 0..h.rows() {
            let (cols, vals) = h.row(r);
            for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                for (&cb, &vb) in cols[..=a].iter().zip(&vals[..=a]) {
                    // cb <= ca because rows are sorted
                    let prod = va * vb;
                    if ca < p {
                        ne.border[ca * p + cb] += prod;
                        if ca != cb {
                            ne.border[cb * p + ca] += prod;
                        }
                    } else if cb < p {
                        ne.coupling[(ca - p) * p + cb] += prod;
                    } else {
                        let (i, j) = (ca - p, cb - p);
                        ne.band[i * w + bw - (i - j)] += prod;
                    }
                }
            }
        }
        ne
    }

    pub fn dim(&self) -> usize {
        self.p + self.nt
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let w = self.bw + 1;
        (0..self.p)
            .map(|i| self.border[i * self.p + i])
            .chain((0..self.nt).map(|i| self.band[i * w + self.bw]))
            .collect()
    }

    pub fn add_to_diagonal(&mut self, lambda: f64) {
        let w = self.bw + 1;
        for i in 0..self.p {
            self.border[i * self.p + i] += lambda;
        }
        for i in 0..self.nt {
            self.band[i * w + self.bw] += lambda;
        }
    }

    /// Solves `M x = rhs` by Cholesky factorization of the band and of the
    /// Schur complement on the border.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(rhs.len(), self.dim());
        let (p, nt) = (self.p, self.nt);
        self.factor_band()?;

        // One pass over the band for [B | rhs_t]: columns 0..p give T⁻¹B,
        // column p gives T⁻¹ rhs_t. Stored in blocks of four columns.
        let k = p + 1;
        let nblk = k.div_ceil(4);
        let mut z = vec![[0.0; 4]; nt * nblk];
        for i in 0..nt {
            for c in 0..p {
                z[i * nblk + c / 4][c % 4] = self.coupling[i * p + c];
            }
            z[i * nblk + p / 4][p % 4] = rhs[p + i];
        }
        if nblk == 1 {
            with_bandwidth!(self.bw, |BW| solve_kernel::<BW>(&self.band, nt, self.bw, &mut z));
        } else {
            let mut blk = vec![[0.0; 4]; nt];
            for b in 0..nblk {
                blk.iter_mut().enumerate().for_each(|(i, v)| *v = z[i * nblk + b]);
                with_bandwidth!(self.bw, |BW| solve_kernel::<BW>(&self.band, nt, self.bw, &mut blk));
                blk.iter().enumerate().for_each(|(i, v)| z[i * nblk + b] = *v);
            }
        }
        let zat = |i: usize, c: usize| z[i * nblk + c / 4][c % 4];

        // S = P - Bᵀ T⁻¹ B and the reduced right-hand side
        let mut schur = self.border.clone();
        let mut xp = rhs[..p].to_vec();
        if nblk == 1 {
            let mut acc = [[0.0; 4]; 4];
            for (b, zi) in self.coupling.chunks_exact(p.max(1)).zip(&z) {
                for (a, ba) in b.iter().enumerate() {
                    for c in 0..4 {
                        acc[a][c] += ba * zi[c];
                    }
                }
            }
            for a in 0..p {
                for c in 0..p {
                    schur[a * p + c] -= acc[a][c];
                }
                xp[a] -= acc[a][p];
            }
        } else {
            for i in 0..nt {
                for a in 0..p {
                    let ba = self.coupling[i * p + a];
                    for c in 0..p {
                        schur[a * p + c] -= ba * zat(i, c);
                    }
                    xp[a] -= ba * zat(i, p);
                }
            }
        }
        let schur_diag: Vec<f64> = (0..p).map(|i| self.border[i * p + i]).collect();
        cholesky_dense(&mut schur, p, &schur_diag)?;
        dense_cholesky_solve(&schur, p, &mut xp);

        let mut out = xp.clone();
        out.extend((0..nt).map(|i| zat(i, p) - (0..p).map(|c| zat(i, c) * xp[c]).sum::<f64>()));
        Ok(out)
    }

    fn factor_band(&mut self) -> Result<()> {
        let orig: Vec<f64> = (0..self.nt).map(|i| self.band[i * (self.bw + 1) + self.bw]).collect();
        let bad = with_bandwidth!(self.bw, |BW| factor_kernel::<BW>(&mut self.band, self.nt, self.bw, &orig));
        match bad {
            Some((j, pivot)) => Err(Error::Singular { column: self.p + j, pivot }),
            None => Ok(()),
        }
    }
}

/// Evaluates `$body` with `$b` bound to the bandwidth as a const generic
/// for the widths the models produce, so the short inner loops unroll.
macro_rules! with_bandwidth {
    ($bw:expr, |$b:ident| $body:expr) => {{
        match $bw {
            3 => { const $b: usize = 3; $body }
            5 => { const $b: usize = 5; $body }
            7 => { const $b: usize = 7; $body }
            9 => { const $b: usize = 9; $body }
            11 => { const $b: usize = 11; $body }
            13 => { const $b: usize = 13; $body }
            15 => { const $b: usize = 15; $body }
            _ => { const $b: usize = 0; $body }
        }
    }};
}
use with_bandwidth;

/// Band Cholesky. `BW` is the bandwidth when known at compile time, 0
/// otherwise. Returns the first failing pivot.
fn factor_kernel<const BW: usize>(band: &mut [f64], nt: usize, bw: usize, orig: &[f64]) -> Option<(usize, f64)> {
    if BW == 0 {
        return factor_dynamic(band, nt, bw, orig);
    }
    // Row i holds columns i-BW..=i; columns before 0 are zero padding.
    for i in 0..nt {
        let (done, rest) = band.split_at_mut(i * (BW + 1));
        let row_i = &mut rest[..BW + 1];
        for s in (1..=BW.min(i)).rev() {
            let j = i - s;
            let row_j = &done[j * (BW + 1)..(j + 1) * (BW + 1)];
            // columns j-BW+s..j-1 are shared: row_i[q], row_j[q + s]
            let mut acc = [0.0; 4];
            for q in 0..BW - s {
                acc[q % 4] += row_i[q] * row_j[q + s];
            }
            let dot = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            row_i[BW - s] = (row_i[BW - s] - dot) / row_j[BW];
        }
        let mut acc = [0.0; 4];
        for q in 0..BW {
            acc[q % 4] += row_i[q] * row_i[q];
        }
        let sq = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let sdiag = row_i[BW] - sq;
        if !(orig[i] > 0.0) || !(sdiag > SINGULAR_PIVOT * orig[i]) || !sdiag.is_finite() {
            return Some((i, sdiag));
        }
        row_i[BW] = sdiag.sqrt();
    }
    None
}

/// Right-looking variant for widths without a specialization.
fn factor_dynamic(band: &mut [f64], nt: usize, bw: usize, orig: &[f64]) -> Option<(usize, f64)> {
    let w = bw + 1;
    let mut col = vec![0.0; bw];
    for j in 0..nt {
        let s = band[j * w + bw];
        if !(orig[j] > 0.0) || !(s > SINGULAR_PIVOT * orig[j]) || !s.is_finite() {
            return Some((j, s));
        }
        let d = s.sqrt();
        band[j * w + bw] = d;
        let m = bw.min(nt - 1 - j);
        let rows = &mut band[(j + 1) * w..(j + 1 + m) * w];
        for t in 0..m {
            // row j+1+t, column j sits at bw - 1 - t
            let v = rows[t * w + bw - 1 - t] / d;
            rows[t * w + bw - 1 - t] = v;
            col[t] = v;
        }
        for t in 0..m {
            let l = col[t];
            let row = &mut rows[t * w + bw - t..(t + 1) * w];
            for (r, c) in row.iter_mut().zip(&col[..=t]) {
                *r -= l * c;
            }
        }
    }
    None
}

fn solve_kernel<const BW: usize>(band: &[f64], nt: usize, bw: usize, blk: &mut [[f64; 4]]) {
    let bw = if BW > 0 { BW } else { bw };
    let w = bw + 1;
    for i in 0..nt {
        let row = &band[i * w..(i + 1) * w];
        let mut acc = blk[i];
        if BW > 0 && i >= BW {
            let prev = &blk[i - BW..i];
            for q in 0..BW {
                for c in 0..4 {
                    acc[c] -= row[q] * prev[q][c];
                }
            }
        } else {
            let lo = i.saturating_sub(bw);
            for (zj, l) in blk[lo..i].iter().zip(&row[lo + bw - i..bw]) {
                for c in 0..4 {
                    acc[c] -= l * zj[c];
                }
            }
        }
        let d = row[bw];
        blk[i] = acc.map(|a| a / d);
    }
    for i in (0..nt).rev() {
        let row = &band[i * w..(i + 1) * w];
        let d = row[bw];
        let zi = blk[i].map(|v| v / d);
        blk[i] = zi;
        if BW > 0 && i >= BW {
            let prev = &mut blk[i - BW..i];
            for q in 0..BW {
                for c in 0..4 {
                    prev[q][c] -= row[q] * zi[c];
                }
            }
        } else {
            let lo = i.saturating_sub(bw);
            for (zj, l) in blk[lo..i].iter_mut().zip(&row[lo + bw - i..bw]) {
                for c in 0..4 {
                    zj[c] -= l * zi[c];
                }
            }
        }
    }
}

/// In-place lower Cholesky factor of a small dense SPD matrix.
fn cholesky_dense(a: &mut [f64], n: usize, orig_diag: &[f64]) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(orig_diag[i] > 0.0) || !(s > SINGULAR_PIVOT * orig_diag[i]) || !s.is_finite() {
                    return Err(Error::Singular { column: i, pivot: s });
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    Ok(())
}

fn dense_cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_normal(h: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
        let n = h[0].len();
        let mut m = vec![vec![0.0; n]; n];
        for row in h {
            for i in 0..n {
                for j in 0..n {
                    m[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, r) in m.iter_mut().enumerate() {
            r[i] += lambda;
        }
        m
    }

    #[test]
    fn push_row_merges_duplicates() {
        let mut j = Jacobian::new(4, 1);
        j.push_row(&mut vec![(3, 1.0), (0, 2.0), (3, 0.5)]);
        assert_eq!(j.row(0), (&[0usize, 3][..], &[2.0, 1.5][..]));
        assert_eq!(j.get(0, 3), 1.5);
        assert_eq!(j.get(0, 1), 0.0);
    }

    #[test]
    fn zero_column_is_singular() {
        let h = Jacobian::from_dense(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let ne = NormalEquations::assemble(&h);
        assert!(matches!(ne.solve(&[1.0, 0.0]), Err(Error::Singular { .. })));
    }

    proptest! {
        // Bordered band solve agrees with the dense normal equations on
        // random banded Jacobians.
        #[test]
        fn bordered_band_matches_dense(
            seed in proptest::collection::vec(-1.0f64..1.0, 400),
            border in 0usize..4,
            lambda in 0.0f64..0.5,
        ) {
            let cols = 12;
            let rows = 30;
            let mut k = 0;
            let mut next = || { k += 1; seed[k % seed.len()] };
            let mut dense = vec![vec![0.0; cols]; rows];
            for (r, row) in dense.iter_mut().enumerate() {
                for c in 0..border {
                    row[c] = next();
                }
                let centre = border + (r * (cols - border)) / rows;
                for c in centre.saturating_sub(1).max(border)..(centre + 2).min(cols) {
                    row[c] = next() + if c == centre { 2.0 } else { 0.0 };
                }
            }
            let mut h = Jacobian::from_dense(&dense);
            h.border = border;
            let rhs: Vec<f64> = (0..cols).map(|_| next()).collect();
            let mut ne = NormalEquations::assemble(&h);
            ne.add_to_diagonal(lambda + 1e-3);
            let x = ne.solve(&rhs).unwrap();
            let m = dense_normal(&dense, lambda + 1e-3);
            for i in 0..cols {
                let lhs: f64 = (0..cols).map(|j| m[i][j] * x[j]).sum();
                prop_assert!((lhs - rhs[i]).abs() < 1e-8 * (1.0 + rhs[i].abs()));
            }
        }
    }
}
