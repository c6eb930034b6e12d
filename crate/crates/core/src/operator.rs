//! Vectorized sensing operators.
//!
//! The fixed-site operator is kept in factored form. Column `(g1, c)` of RIS `i` is
//! `s_i·(z_c ⊗ a_{g1})` with `z_c[t] = x_t Σ_n conj(b_c[n]) h[n] θ[n,t]`, so Gram
//! matrices and adjoint products never touch the full MT × P matrix.
//! Measurement rows follow `vec` order, row `m + M·t` (plus `M·T·n_s` for bands).

use serde::Serialize;

use crate::channel::{ula_derivative, ula_dictionary, ura_derivatives, ura_dictionary, ura_unchecked};
use crate::error::{dim_err, Result};
use crate::linalg::{CMatrix, CVector, C64, ZERO};

/// Meaning of one sparse coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ColumnTag {
    FixedSite { ris: usize, g1: usize, g2: usize, g3: usize },
    MultiUe { ue: usize, ris: usize, cell: usize },
}

/// Explicit operator with its column map.
#[derive(Clone, Debug)]
pub struct SensingOperator {
    pub matrix: CMatrix,
    pub columns: Vec<ColumnTag>,
}

/// Refinable BS-RIS grid of one RIS (`ν_i`).
#[derive(Clone, Debug, PartialEq)]
pub struct BsGrid {
    pub arrival: Vec<f64>,
    pub departure_u: Vec<f64>,
    pub departure_v: Vec<f64>,
}

impl BsGrid {
    pub fn from_grids(g: &crate::channel::RisGrids) -> Self {
        Self { arrival: g.arrival.clone(), departure_u: g.departure_u.clone(), departure_v: g.departure_v.clone() }
    }
    pub fn cells(&self) -> usize {
        self.arrival.len() * self.departure_u.len() * self.departure_v.len()
    }
}

/// Known quantities of one RIS as seen by the fixed-site estimator.
#[derive(Clone, Debug)]
pub struct FixedSiteRis {
    pub ny: usize,
    pub nz: usize,
    pub paths: usize,
    /// `h_b,i0`
    pub site: CVector,
    /// `Θ_i`, N × T
    pub theta: CMatrix,
}

impl FixedSiteRis {
    pub fn elements(&self) -> usize {
        self.ny * self.nz
    }
}

#[derive(Clone, Debug)]
pub struct FixedSiteBlock {
    pub scale: f64,
    /// `A_R2B,i`, M × G1
    pub a: CMatrix,
    /// `Θ^T diag(h) conj(B)`, T × G2G3, symbol free
    pub base: CMatrix,
    /// `diag(x)·base`
    pub zc: CMatrix,
    pub g1: usize,
    pub g2: usize,
    pub g3: usize,
    pub offset: usize,
}

impl FixedSiteBlock {
    pub fn cols(&self) -> usize {
        self.g1 * self.g2 * self.g3
    }
}

/// `Θ^T diag(h) conj(B)` for a dictionary `B`.
pub(crate) fn ris_projection(ris: &FixedSiteRis, b: &CMatrix) -> CMatrix {
    let mut hb = b.map(|z| z.conj());
    for (n, mut row) in hb.row_iter_mut().enumerate() {
        row *= ris.site[n];
    }
    ris.theta.transpose() * hb
}

fn scale_rows(m: &CMatrix, x: &[C64]) -> CMatrix {
    let mut out = m.clone();
    for (t, mut row) in out.row_iter_mut().enumerate() {
        row *= x[t];
    }
    out
}

/// Fixed-site operator `Z_R2B(X_0, ν)`.
#[derive(Clone, Debug)]
pub struct FixedSiteOperator {
    pub blocks: Vec<FixedSiteBlock>,
    pub symbols: Vec<C64>,
    pub antennas: usize,
}

impl FixedSiteOperator {
    pub fn new(antennas: usize, ris: &[FixedSiteRis], grids: &[BsGrid], symbols: &[C64]) -> Result<Self> {
        if ris.len() != grids.len() {
            return dim_err("one grid per RIS is required");
        }
        let t = symbols.len();
        let mut blocks = Vec::with_capacity(ris.len());
        let mut offset = 0;
        for (r, g) in ris.iter().zip(grids) {
            if r.theta.shape() != (r.elements(), t) || r.site.len() != r.elements() {
                return dim_err("RIS schedule or site channel does not match the frame");
            }
            let b = ura_dictionary(&g.departure_u, &g.departure_v, r.ny, r.nz);
            let base = ris_projection(r, &b);
            let zc = scale_rows(&base, symbols);
            let block = FixedSiteBlock {
                scale: ((antennas * r.elements()) as f64 / r.paths as f64).sqrt(),
                a: ula_dictionary(&g.arrival, antennas),
                base,
                zc,
                g1: g.arrival.len(),
                g2: g.departure_u.len(),
                g3: g.departure_v.len(),
                offset,
            };
            offset += block.cols();
            blocks.push(block);
        }
        Ok(Self { blocks, symbols: symbols.to_vec(), antennas })
    }

    pub fn rows(&self) -> usize {
        self.antennas * self.symbols.len()
    }

    pub fn cols(&self) -> usize {
        self.blocks.iter().map(|b| b.cols()).sum()
    }

    pub fn slots(&self) -> usize {
        self.symbols.len()
    }

    pub fn set_symbols(&mut self, symbols: &[C64]) {
        self.symbols = symbols.to_vec();
        for b in &mut self.blocks {
            b.zc = scale_rows(&b.base, symbols);
        }
    }

    pub fn set_grid(&mut self, i: usize, ris: &FixedSiteRis, grid: &BsGrid) {
        let b = ura_dictionary(&grid.departure_u, &grid.departure_v, ris.ny, ris.nz);
        let blk = &mut self.blocks[i];
        blk.a = ula_dictionary(&grid.arrival, self.antennas);
        blk.base = ris_projection(ris, &b);
        blk.zc = scale_rows(&blk.base, &self.symbols);
    }

    pub fn tags(&self) -> Vec<ColumnTag> {
        let mut tags = Vec::with_capacity(self.cols());
        for (i, b) in self.blocks.iter().enumerate() {
            for g3 in 0..b.g3 {
                for g2 in 0..b.g2 {
                    for g1 in 0..b.g1 {
                        tags.push(ColumnTag::FixedSite { ris: i, g1, g2, g3 });
                    }
                }
            }
        }
        tags
    }

    /// `ZᴴZ`, assembled from `(Z_cᴴZ_c) ⊗ (AᴴA)` blocks.
    pub fn gram(&self) -> CMatrix {
        kron_gram(&self.blocks, |b| &b.zc)
    }

    /// `ZᴴZ` with all symbols set to one.
    pub fn base_gram(&self) -> CMatrix {
        kron_gram(&self.blocks, |b| &b.base)
    }

    /// `Zᴴ vec(Y)`.
    pub fn adjoint_apply(&self, y: &CMatrix) -> CVector {
        let mut out = CVector::zeros(self.cols());
        for b in &self.blocks {
            let m = (b.a.ad_mul(y) * b.zc.map(|z| z.conj())) * C64::new(b.scale, 0.0);
            out.rows_mut(b.offset, b.cols()).copy_from_slice(m.as_slice());
        }
        out
    }

    /// `Z·ω` reshaped to M × T.
    pub fn apply(&self, omega: &CVector) -> CMatrix {
        self.apply_with(omega, |b| &b.zc)
    }

    /// Effective channel `H_eff(ω)` (one column per slot, symbols excluded).
    pub fn channel(&self, omega: &CVector) -> CMatrix {
        self.apply_with(omega, |b| &b.base)
    }

    fn apply_with<'a>(&'a self, omega: &CVector, f: impl Fn(&'a FixedSiteBlock) -> &'a CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.antennas, self.slots());
        for b in &self.blocks {
            let om = CMatrix::from_column_slice(b.g1, b.g2 * b.g3, omega.rows(b.offset, b.cols()).as_slice());
            if om.iter().all(|z| *z == ZERO) {
                continue;
            }
            out += (&b.a * om) * f(b).transpose() * C64::new(b.scale, 0.0);
        }
        out
    }

    /// Estimated BS-RIS channels `√(MN/L)·A Ω Bᴴ`.
    pub fn bs_ris_channels(&self, omega: &CVector, ris: &[FixedSiteRis], grids: &[BsGrid]) -> Vec<CMatrix> {
        self.blocks
            .iter()
            .zip(ris.iter().zip(grids))
            .map(|(b, (r, g))| {
                let om = CMatrix::from_column_slice(b.g1, b.g2 * b.g3, omega.rows(b.offset, b.cols()).as_slice());
                let bd = ura_dictionary(&g.departure_u, &g.departure_v, r.ny, r.nz);
                (&b.a * om) * bd.adjoint() * C64::new(b.scale, 0.0)
            })
            .collect()
    }

    /// Block holding global column `col`, with the column's local index.
    pub fn locate(&self, col: usize) -> (usize, usize) {
        for (i, b) in self.blocks.iter().enumerate() {
            if col < b.offset + b.cols() {
                return (i, col - b.offset);
            }
        }
        panic!("column {col} out of range");
    }

    /// One explicit column, `s·(z_c ⊗ a_g1)`.
    pub fn column(&self, col: usize) -> CVector {
        let (i, local) = self.locate(col);
        let b = &self.blocks[i];
        let (g1, c) = (local % b.g1, local / b.g1);
        let m = self.antennas;
        CVector::from_fn(m * self.slots(), |r, _| b.a[(r % m, g1)] * b.zc[(r / m, c)] * b.scale)
    }

    /// Explicit MT × P matrix.
    pub fn to_dense(&self) -> SensingOperator {
        let (m, t) = (self.antennas, self.slots());
        let mut z = CMatrix::zeros(m * t, self.cols());
        for b in &self.blocks {
            for c in 0..b.g2 * b.g3 {
                for g1 in 0..b.g1 {
                    let col = b.offset + g1 + b.g1 * c;
                    for s in 0..t {
                        let w = b.zc[(s, c)] * b.scale;
                        for mm in 0..m {
                            z[(mm + m * s, col)] = b.a[(mm, g1)] * w;
                        }
                    }
                }
            }
        }
        SensingOperator { matrix: z, columns: self.tags() }
    }
}

fn kron_gram<'a>(blocks: &'a [FixedSiteBlock], f: impl Fn(&'a FixedSiteBlock) -> &'a CMatrix) -> CMatrix {
    let p: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut g = CMatrix::zeros(p, p);
    for bi in blocks {
        for bj in blocks {
            if bj.offset < bi.offset {
                continue;
            }
            let kz = f(bi).ad_mul(f(bj));
            let ka = bi.a.ad_mul(&bj.a);
            let blk = kz.kronecker(&ka) * C64::new(bi.scale * bj.scale, 0.0);
            g.view_mut((bi.offset, bj.offset), (bi.cols(), bj.cols())).copy_from(&blk);
            if bi.offset != bj.offset {
                g.view_mut((bj.offset, bi.offset), (bj.cols(), bi.cols())).copy_from(&blk.adjoint());
            }
        }
    }
    g
}

/// Derivatives of a fixed-site block with respect to its three grid families.
pub(crate) struct BlockDerivatives {
    /// `∂A/∂w^A`, column g1 differentiated at its own grid value
    pub da: CMatrix,
    /// `diag(x)·∂base/∂w^D` per column
    pub dzu: CMatrix,
    /// `diag(x)·∂base/∂g^D` per column
    pub dzv: CMatrix,
}

pub(crate) fn block_derivatives(
    antennas: usize,
    ris: &FixedSiteRis,
    grid: &BsGrid,
    symbols: &[C64],
) -> BlockDerivatives {
    let g1 = grid.arrival.len();
    let mut da = CMatrix::zeros(antennas, g1);
    for (g, &u) in grid.arrival.iter().enumerate() {
        da.set_column(g, &ula_derivative(u, antennas));
    }
    let g2 = grid.departure_u.len();
    let pc = g2 * grid.departure_v.len();
    let mut bu = CMatrix::zeros(ris.elements(), pc);
    let mut bv = CMatrix::zeros(ris.elements(), pc);
    for (c3, &v) in grid.departure_v.iter().enumerate() {
        for (c2, &u) in grid.departure_u.iter().enumerate() {
            let (du, dv) = ura_derivatives(u, v, ris.ny, ris.nz);
            bu.set_column(c2 + g2 * c3, &du);
            bv.set_column(c2 + g2 * c3, &dv);
        }
    }
    BlockDerivatives {
        da,
        dzu: scale_rows(&ris_projection(ris, &bu), symbols),
        dzv: scale_rows(&ris_projection(ris, &bv), symbols),
    }
}

/// Known quantities of one RIS for the multi-UE stage.
#[derive(Clone, Debug)]
pub struct MultiUeRis {
    pub ny: usize,
    pub nz: usize,
    /// `H_r,i`, M × N
    pub bs_ris: CMatrix,
    /// `Θ_i`, N × T
    pub theta: CMatrix,
}

impl MultiUeRis {
    pub fn elements(&self) -> usize {
        self.ny * self.nz
    }

    /// `√N·H diag(b) Θ`, M × T.
    pub fn response(&self, b: &CVector) -> CMatrix {
        let n = self.elements();
        let mut hb = self.bs_ris.clone();
        for (col, mut c) in hb.column_iter_mut().enumerate() {
            c *= b[col] * (n as f64).sqrt();
        }
        hb * &self.theta
    }

    pub fn response_at(&self, u: f64, v: f64) -> CMatrix {
        self.response(&ura_unchecked(u, v, self.ny, self.nz))
    }

    /// Multiplies charged for one `response` evaluation.
    pub fn response_cost(&self) -> usize {
        let (m, n) = self.bs_ris.shape();
        m * n + m * n * self.theta.ncols()
    }
}

/// UE-side grid of one RIS (`w_U2R`, `g_U2R`).
#[derive(Clone, Debug, PartialEq)]
pub struct UeGrid {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl UeGrid {
    pub fn from_grids(g: &crate::channel::RisGrids) -> Self {
        Self { u: g.ue_u.clone(), v: g.ue_v.clone() }
    }
    pub fn cells(&self) -> usize {
        self.u.len() * self.v.len()
    }
    pub fn cell_angles(&self, cell: usize) -> (f64, f64) {
        (self.u[cell % self.u.len()], self.v[cell / self.u.len()])
    }
}

/// Multi-UE operator `D = V_2(X)·B_U2(η)`; column order `(k, i, cell)`, cell fastest.
#[derive(Clone, Debug)]
pub struct MultiUeOperator {
    /// per RIS: `vec(W_{i,g})` as columns, (M·T) × G_i
    pub w: Vec<CMatrix>,
    /// per UE: N_s × T symbols
    pub symbols: Vec<CMatrix>,
    pub antennas: usize,
    pub slots: usize,
    pub bands: usize,
    ris_offsets: Vec<usize>,
    per_ue: usize,
}

impl MultiUeOperator {
    pub fn new(ris: &[MultiUeRis], grids: &[UeGrid], symbols: &[CMatrix]) -> Result<Self> {
        if ris.len() != grids.len() || ris.is_empty() {
            return dim_err("one UE grid per RIS is required");
        }
        if symbols.is_empty() {
            return dim_err("no UE symbols");
        }
        let (bands, slots) = symbols[0].shape();
        if symbols.iter().any(|x| x.shape() != (bands, slots)) {
            return dim_err("UE symbol matrices differ in shape");
        }
        let antennas = ris[0].bs_ris.nrows();
        let mut w = Vec::with_capacity(ris.len());
        let mut ris_offsets = Vec::with_capacity(ris.len());
        let mut off = 0;
        for (r, g) in ris.iter().zip(grids) {
            if r.theta.ncols() != slots || r.bs_ris.nrows() != antennas {
                return dim_err("RIS schedule does not match the frame");
            }
            let dict = ura_dictionary(&g.u, &g.v, r.ny, r.nz);
            let mut wi = CMatrix::zeros(antennas * slots, g.cells());
            for cell in 0..g.cells() {
                let resp = r.response(&dict.column(cell).into_owned());
                wi.set_column(cell, &CVector::from_column_slice(resp.as_slice()));
            }
            ris_offsets.push(off);
            off += g.cells();
            w.push(wi);
        }
        Ok(Self { w, symbols: symbols.to_vec(), antennas, slots, bands, ris_offsets, per_ue: off })
    }

    pub fn ues(&self) -> usize {
        self.symbols.len()
    }

    pub fn rows(&self) -> usize {
        self.antennas * self.slots * self.bands
    }

    pub fn cols(&self) -> usize {
        self.per_ue * self.ues()
    }

    pub fn per_ue(&self) -> usize {
        self.per_ue
    }

    pub fn ris_offset(&self, i: usize) -> usize {
        self.ris_offsets[i]
    }

    pub fn column_index(&self, ue: usize, ris: usize, cell: usize) -> usize {
        ue * self.per_ue + self.ris_offsets[ris] + cell
    }

    pub fn tags(&self) -> Vec<ColumnTag> {
        let mut tags = Vec::with_capacity(self.cols());
        for ue in 0..self.ues() {
            for (ris, wi) in self.w.iter().enumerate() {
                for cell in 0..wi.ncols() {
                    tags.push(ColumnTag::MultiUe { ue, ris, cell });
                }
            }
        }
        tags
    }

    pub fn set_symbols(&mut self, symbols: &[CMatrix]) {
        self.symbols = symbols.to_vec();
    }

    /// Recomputes the dictionary columns of RIS `i`.
    pub fn set_grid(&mut self, i: usize, ris: &MultiUeRis, grid: &UeGrid) {
        let dict = ura_dictionary(&grid.u, &grid.v, ris.ny, ris.nz);
        for cell in 0..grid.cells() {
            let resp = ris.response(&dict.column(cell).into_owned());
            self.w[i].set_column(cell, &CVector::from_column_slice(resp.as_slice()));
        }
    }

    /// `W_t`: M × (Σ_i G_i) slice of slot `t`.
    fn slot_matrix(&self, t: usize) -> CMatrix {
        let m = self.antennas;
        let mut wt = CMatrix::zeros(m, self.per_ue);
        for (i, wi) in self.w.iter().enumerate() {
            wt.view_mut((0, self.ris_offsets[i]), (m, wi.ncols())).copy_from(&wi.rows(t * m, m));
        }
        wt
    }

    /// `DᴴD` via per-slot inner products weighted by symbol products.
    pub fn gram(&self) -> CMatrix {
        let k = self.ues();
        let pu = self.per_ue;
        let grams: Vec<CMatrix> = (0..self.slots).map(|t| {
            let wt = self.slot_matrix(t);
            wt.ad_mul(&wt)
        }).collect();
        let mut g = CMatrix::zeros(k * pu, k * pu);
        for a in 0..k {
            for b in a..k {
                let weights: Vec<C64> = (0..self.slots)
                    .map(|t| (0..self.bands).map(|n| self.symbols[a][(n, t)].conj() * self.symbols[b][(n, t)]).sum())
                    .collect();
                if weights.iter().all(|w| *w == ZERO) {
                    continue;
                }
                let mut blk = CMatrix::zeros(pu, pu);
                for (t, w) in weights.iter().enumerate() {
                    if *w != ZERO {
                        blk.zip_apply(&grams[t], |a, b| *a += *w * b);
                    }
                }
                g.view_mut((a * pu, b * pu), (pu, pu)).copy_from(&blk);
                if a != b {
                    g.view_mut((b * pu, a * pu), (pu, pu)).copy_from(&blk.adjoint());
                }
            }
        }
        crate::linalg::hermitize(g)
    }

    /// `Dᴴ y` for stacked measurements `y[n_s]` (each M × T).
    pub fn adjoint_apply(&self, y: &[CMatrix]) -> CVector {
        let pu = self.per_ue;
        let mut out = CVector::zeros(self.cols());
        for t in 0..self.slots {
            let wt = self.slot_matrix(t);
            for (n, yb) in y.iter().enumerate() {
                let proj = wt.ad_mul(&yb.column(t));
                for k in 0..self.ues() {
                    let x = self.symbols[k][(n, t)];
                    if x == ZERO {
                        continue;
                    }
                    let mut seg = out.rows_mut(k * pu, pu);
                    seg.axpy(x.conj(), &proj, C64::new(1.0, 0.0));
                }
            }
        }
        out
    }

    /// `D·ψ`, one M × T matrix per band.
    pub fn apply(&self, psi: &CVector) -> Vec<CMatrix> {
        let pu = self.per_ue;
        let mut out = vec![CMatrix::zeros(self.antennas, self.slots); self.bands];
        for t in 0..self.slots {
            let wt = self.slot_matrix(t);
            let resp: Vec<CVector> = (0..self.ues()).map(|k| &wt * psi.rows(k * pu, pu)).collect();
            for (n, yb) in out.iter_mut().enumerate() {
                let mut col = yb.column_mut(t);
                for (k, r) in resp.iter().enumerate() {
                    let x = self.symbols[k][(n, t)];
                    if x != ZERO {
                        col.axpy(x, r, C64::new(1.0, 0.0));
                    }
                }
            }
        }
        out
    }

    /// One explicit column.
    pub fn column(&self, ue: usize, ris: usize, cell: usize) -> CVector {
        multiue_column(&self.w[ris].column(cell).into_owned(), &self.symbols[ue], self.antennas)
    }

    pub fn to_dense(&self) -> SensingOperator {
        let mut d = CMatrix::zeros(self.rows(), self.cols());
        for ue in 0..self.ues() {
            for ris in 0..self.w.len() {
                for cell in 0..self.w[ris].ncols() {
                    d.set_column(self.column_index(ue, ris, cell), &self.column(ue, ris, cell));
                }
            }
        }
        SensingOperator { matrix: d, columns: self.tags() }
    }

    /// `∂W/∂u` and `∂W/∂v` of every cell of RIS `i`, as (M·T) × G_i matrices.
    pub(crate) fn grid_derivatives(&self, ris: &MultiUeRis, grid: &UeGrid) -> (CMatrix, CMatrix) {
        let mt = self.antennas * self.slots;
        let mut du = CMatrix::zeros(mt, grid.cells());
        let mut dv = CMatrix::zeros(mt, grid.cells());
        for cell in 0..grid.cells() {
            let (u, v) = grid.cell_angles(cell);
            let (bu, bv) = ura_derivatives(u, v, ris.ny, ris.nz);
            du.set_column(cell, &CVector::from_column_slice(ris.response(&bu).as_slice()));
            dv.set_column(cell, &CVector::from_column_slice(ris.response(&bv).as_slice()));
        }
        (du, dv)
    }
}

/// Stacks `vec(W·diag(x_{n_s}))` over bands.
pub fn multiue_column(w: &CVector, symbols: &CMatrix, antennas: usize) -> CVector {
    let (bands, slots) = symbols.shape();
    let mut col = CVector::zeros(antennas * slots * bands);
    for n in 0..bands {
        for t in 0..slots {
            let x = symbols[(n, t)];
            if x == ZERO {
                continue;
            }
            let base = antennas * t + antennas * slots * n;
            for m in 0..antennas {
                col[base + m] = w[m + antennas * t] * x;
            }
        }
    }
    col
}

/// Stacks per-band M × T blocks into one vector.
pub fn stack_bands(blocks: &[CMatrix]) -> CVector {
    let mut v = Vec::with_capacity(blocks.iter().map(|b| b.len()).sum());
    for b in blocks {
        v.extend_from_slice(b.as_slice());
    }
    CVector::from_vec(v)
}
