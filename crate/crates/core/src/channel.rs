//! Geometry, steering vectors, path sampling and angle dictionaries.
//!
//! Effective angles are direction cosines scaled by `2·spacing/λ`. The BS is a
//! ULA along the y axis and every RIS is a URA in the y-z plane, element
//! index `n = n_y·N_z + n_z`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, IsacError, Result};
use crate::linalg::{phasor, CMatrix, CVector, C64};

pub type Point3 = [f64; 3];

/// One reflecting surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RisConfig {
    pub position: Point3,
    pub ny: usize,
    pub nz: usize,
    /// element spacing in meters
    pub spacing: f64,
    /// number of BS-RIS paths, the first being LoS
    pub paths: usize,
}

impl RisConfig {
    pub fn elements(&self) -> usize {
        self.ny * self.nz
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemGeometry {
    pub bs_position: Point3,
    pub antennas: usize,
    pub bs_spacing: f64,
    pub wavelength: f64,
    pub ris: Vec<RisConfig>,
    pub fixed_site: Point3,
    pub ue_positions: Vec<Point3>,
}

impl SystemGeometry {
    /// Table-I coordinates with a desk-scale array (M = 8, 8×8 RIS, L = 3).
    pub fn desk_scale() -> Self {
        let wavelength = 0.0107; // 28 GHz
        let ris = |position| RisConfig { position, ny: 8, nz: 8, spacing: wavelength / 2.0, paths: 3 };
        Self {
            bs_position: [0.0, 0.0, 0.0],
            antennas: 8,
            bs_spacing: wavelength / 2.0,
            wavelength,
            ris: vec![ris([-30.0, 28.0, 21.0]), ris([-20.0, 30.0, 20.0])],
            fixed_site: [10.0, 20.0, 5.0],
            ue_positions: vec![
                [12.0, 8.0, 3.0],
                [18.0, 22.0, 15.0],
                [25.0, 12.0, 9.0],
                [14.0, 17.0, 18.0],
                [28.0, 6.0, 12.0],
                [21.0, 24.0, 4.0],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return dim_err("BS antenna count must be at least 1");
        }
        if !(self.bs_spacing > 0.0 && self.wavelength > 0.0) {
            return config_err("spacings and wavelength must be positive");
        }
        if self.ris.is_empty() {
            return config_err("at least one RIS is required");
        }
        for (i, r) in self.ris.iter().enumerate() {
            if r.ny == 0 || r.nz == 0 {
                return dim_err(format!("RIS {i} has zero elements"));
            }
            if r.paths == 0 {
                return config_err(format!("RIS {i} needs at least one BS path"));
            }
            if !(r.spacing > 0.0) {
                return config_err(format!("RIS {i} spacing must be positive"));
            }
            for p in std::iter::once(&self.bs_position)
                .chain(std::iter::once(&self.fixed_site))
                .chain(self.ue_positions.iter())
            {
                if distance(p, &r.position) == 0.0 {
                    return Err(IsacError::DegenerateGeometry(format!("a node coincides with RIS {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn bs_scale(&self) -> f64 {
        2.0 * self.bs_spacing / self.wavelength
    }

    pub fn ris_scale(&self, i: usize) -> f64 {
        2.0 * self.ris[i].spacing / self.wavelength
    }

    /// LoS BS-RIS angles: arrival at the BS and departure at the RIS.
    pub fn los_angles(&self, i: usize) -> Result<(f64, PathAngles)> {
        let q = &self.ris[i].position;
        let arrival = angles_from_positions(q, &self.bs_position, self.bs_spacing, self.wavelength)?;
        let departure = angles_from_positions(&self.bs_position, q, self.ris[i].spacing, self.wavelength)?;
        Ok((arrival.u, departure))
    }

    /// Arrival angles at RIS `i` of the link from `source`.
    pub fn arrival_at_ris(&self, i: usize, source: &Point3) -> Result<PathAngles> {
        angles_from_positions(source, &self.ris[i].position, self.ris[i].spacing, self.wavelength)
    }
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathAngles {
    pub u: f64,
    pub v: f64,
}

impl PathAngles {
    /// Effective angles from physical elevation and azimuth (radians).
    pub fn from_physical(elevation: f64, azimuth: f64, scale: f64) -> Self {
        Self { u: scale * elevation.cos() * azimuth.sin(), v: scale * elevation.sin() }
    }
}

/// Effective angles observed at `to` for the path leaving `from`:
/// `u = s·(to_y − from_y)/d`, `v = s·(to_z − from_z)/d`, `s = 2·spacing/λ`.
pub fn angles_from_positions(from: &Point3, to: &Point3, spacing: f64, wavelength: f64) -> Result<PathAngles> {
    let d = distance(from, to);
    if d == 0.0 || !d.is_finite() {
        return Err(IsacError::DegenerateGeometry("coincident points".into()));
    }
    let s = 2.0 * spacing / wavelength;
    Ok(PathAngles { u: s * (to[1] - from[1]) / d, v: s * (to[2] - from[2]) / d })
}

/// `a_M(u)[m] = exp(jπ m u)/√M`.
pub fn ula_response(u: f64, m: usize) -> Result<CVector> {
    if m == 0 {
        return dim_err("ULA needs at least one element");
    }
    Ok(ula_unchecked(u, m))
}

pub(crate) fn ula_unchecked(u: f64, m: usize) -> CVector {
    let s = 1.0 / (m as f64).sqrt();
    CVector::from_fn(m, |i, _| phasor(PI * i as f64 * u) * s)
}

/// Derivative of `ula_response` with respect to `u`.
pub fn ula_derivative(u: f64, m: usize) -> CVector {
    let s = 1.0 / (m as f64).sqrt();
    CVector::from_fn(m, |i, _| {
        let k = PI * i as f64;
        phasor(k * u) * C64::new(0.0, k * s)
    })
}

pub fn ura_response(u: f64, v: f64, ny: usize, nz: usize) -> Result<CVector> {
    if ny == 0 || nz == 0 {
        return dim_err("URA needs nonzero dimensions");
    }
    Ok(ura_unchecked(u, v, ny, nz))
}

pub(crate) fn ura_unchecked(u: f64, v: f64, ny: usize, nz: usize) -> CVector {
    let s = 1.0 / ((ny * nz) as f64).sqrt();
    CVector::from_fn(ny * nz, |n, _| {
        let (iy, iz) = (n / nz, n % nz);
        phasor(PI * (iy as f64 * u + iz as f64 * v)) * s
    })
}

/// Partial derivatives of `ura_response` with respect to `u` and `v`.
pub fn ura_derivatives(u: f64, v: f64, ny: usize, nz: usize) -> (CVector, CVector) {
    let b = ura_unchecked(u, v, ny, nz);
    let du = CVector::from_fn(ny * nz, |n, _| b[n] * C64::new(0.0, PI * (n / nz) as f64));
    let dv = CVector::from_fn(ny * nz, |n, _| b[n] * C64::new(0.0, PI * (n % nz) as f64));
    (du, dv)
}

/// Distance-based path-loss law for gain magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathGainModel {
    pub reference_distance: f64,
    pub reference_loss_db: f64,
    pub exponent: f64,
    pub nlos_excess_loss_db: f64,
}

impl Default for PathGainModel {
    fn default() -> Self {
        Self { reference_distance: 40.0, reference_loss_db: 0.0, exponent: 2.0, nlos_excess_loss_db: 6.0 }
    }
}

impl PathGainModel {
    pub fn magnitude(&self, d: f64, nlos: bool) -> f64 {
        let mut loss = self.reference_loss_db + 10.0 * self.exponent * (d / self.reference_distance).log10();
        if nlos {
            loss += self.nlos_excess_loss_db;
        }
        10f64.powf(-loss / 20.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub gain: PathGainModel,
    /// minimum per-coordinate distance of NLoS angles from the LoS angles
    pub nlos_min_separation: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { gain: PathGainModel::default(), nlos_min_separation: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsRisPath {
    /// arrival angle at the BS
    pub arrival: f64,
    /// departure angles at the RIS
    pub departure: PathAngles,
    pub gain: C64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsRisLink {
    pub paths: Vec<BsRisPath>,
    /// `H_r,i`, M × N_i
    pub matrix: CMatrix,
}

/// Single-path transmitter-to-RIS link.
#[derive(Clone, Debug, PartialEq)]
pub struct RisLink {
    pub angles: PathAngles,
    pub gain: C64,
    /// `h_b = √N·α·b(u, v)`
    pub vector: CVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub bs_ris: Vec<BsRisLink>,
    /// fixed site to each RIS
    pub fixed_site: Vec<RisLink>,
    /// `ue[i][k]`: UE k to RIS i
    pub ue: Vec<Vec<RisLink>>,
}

/// `H = √(MN/L) Σ_l α_l a(u^A_l) b^H(u^D_l, v^D_l)`.
pub fn bs_ris_matrix(paths: &[BsRisPath], m: usize, ny: usize, nz: usize) -> CMatrix {
    let n = ny * nz;
    let scale = ((m * n) as f64 / paths.len() as f64).sqrt();
    let mut h = CMatrix::zeros(m, n);
    for p in paths {
        let a = ula_unchecked(p.arrival, m);
        let b = ura_unchecked(p.departure.u, p.departure.v, ny, nz);
        h += (a * b.adjoint()) * (p.gain * scale);
    }
    h
}

pub fn ris_link_vector(angles: PathAngles, gain: C64, ny: usize, nz: usize) -> CVector {
    ura_unchecked(angles.u, angles.v, ny, nz) * (gain * ((ny * nz) as f64).sqrt())
}

fn random_phase<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    phasor(rng.random_range(0.0..2.0 * PI))
}

fn sample_nlos<R: Rng + ?Sized>(rng: &mut R, los: f64, range: f64, sep: f64) -> f64 {
    // fall back to the unconstrained draw if the separation cannot be met
    for _ in 0..1000 {
        let x = rng.random_range(-range..range);
        if (x - los).abs() >= sep {
            return x;
        }
    }
    rng.random_range(-range..range)
}

/// Draws one channel realization. Path 1 of every BS-RIS link is LoS.
pub fn sample_channels<R: Rng + ?Sized>(
    geom: &SystemGeometry,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    geom.validate()?;
    let m = geom.antennas;
    let mut bs_ris = Vec::with_capacity(geom.ris.len());
    let mut fixed_site = Vec::with_capacity(geom.ris.len());
    let mut ue = Vec::with_capacity(geom.ris.len());
    for (i, r) in geom.ris.iter().enumerate() {
        let (ua, dep) = geom.los_angles(i)?;
        let d = distance(&geom.bs_position, &r.position);
        let (sb, sr) = (geom.bs_scale(), geom.ris_scale(i));
        let mut paths = vec![BsRisPath { arrival: ua, departure: dep, gain: random_phase(rng) * cfg.gain.magnitude(d, false) }];
        for _ in 1..r.paths {
            let arrival = sample_nlos(rng, ua, sb, cfg.nlos_min_separation);
            let u = sample_nlos(rng, dep.u, sr, cfg.nlos_min_separation);
            let v = sample_nlos(rng, dep.v, sr, cfg.nlos_min_separation);
            let gain = random_phase(rng) * cfg.gain.magnitude(d, true);
            paths.push(BsRisPath { arrival, departure: PathAngles { u, v }, gain });
        }
        let matrix = bs_ris_matrix(&paths, m, r.ny, r.nz);
        bs_ris.push(BsRisLink { paths, matrix });

        let link = |rng: &mut R, p: &Point3| -> Result<RisLink> {
            let angles = geom.arrival_at_ris(i, p)?;
            let gain = random_phase(rng) * cfg.gain.magnitude(distance(p, &r.position), false);
            Ok(RisLink { angles, gain, vector: ris_link_vector(angles, gain, r.ny, r.nz) })
        };
        fixed_site.push(link(rng, &geom.fixed_site)?);
        let mut per_ue = Vec::with_capacity(geom.ue_positions.len());
        for p in &geom.ue_positions {
            per_ue.push(link(rng, p)?);
        }
        ue.push(per_ue);
    }
    Ok(ChannelRealization { bs_ris, fixed_site, ue })
}

/// Draws a realization whose NLoS and UE angles sit exactly on grid points.
/// NLoS paths of one RIS occupy distinct grid cells, never the LoS cell.
pub fn sample_channels_on_grid<R: Rng + ?Sized>(
    geom: &SystemGeometry,
    grids: &DictionaryGrids,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    let mut chan = sample_channels(geom, cfg, rng)?;
    for (i, r) in geom.ris.iter().enumerate() {
        let g = &grids.ris[i];
        let mut used = vec![(0usize, 0usize, 0usize)];
        for l in 1..r.paths {
            if g.arrival.len() < 2 || g.departure_u.len() < 2 || g.departure_v.len() < 2 {
                return config_err("on-grid sampling with several paths needs grids of size >= 2");
            }
            let cell = loop {
                let c = (
                    rng.random_range(1..g.arrival.len()),
                    rng.random_range(1..g.departure_u.len()),
                    rng.random_range(1..g.departure_v.len()),
                );
                if !used.contains(&c) {
                    break c;
                }
                if used.len() > g.arrival.len() * g.departure_u.len() * g.departure_v.len() / 2 {
                    return config_err("grid too small for distinct on-grid paths");
                }
            };
            used.push(cell);
            let p = &mut chan.bs_ris[i].paths[l];
            p.arrival = g.arrival[cell.0];
            p.departure = PathAngles { u: g.departure_u[cell.1], v: g.departure_v[cell.2] };
        }
        chan.bs_ris[i].matrix = bs_ris_matrix(&chan.bs_ris[i].paths, geom.antennas, r.ny, r.nz);
        for link in chan.ue[i].iter_mut() {
            link.angles = PathAngles {
                u: g.ue_u[rng.random_range(0..g.ue_u.len())],
                v: g.ue_v[rng.random_range(0..g.ue_v.len())],
            };
            link.vector = ris_link_vector(link.angles, link.gain, r.ny, r.nz);
        }
    }
    Ok(chan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSizes {
    pub g1: usize,
    pub g2: usize,
    pub g3: usize,
    pub g4: usize,
    pub g5: usize,
}

/// Angle grids of one RIS.
#[derive(Clone, Debug, PartialEq)]
pub struct RisGrids {
    /// `w^A_R2B`, arrival at the BS; entry 0 is LoS
    pub arrival: Vec<f64>,
    /// `w^D_R2B`; entry 0 is LoS
    pub departure_u: Vec<f64>,
    /// `g^D_R2B`; entry 0 is LoS
    pub departure_v: Vec<f64>,
    /// `w^A_U2R`
    pub ue_u: Vec<f64>,
    /// `g^A_U2R`
    pub ue_v: Vec<f64>,
    pub bs_range: f64,
    pub ris_range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryGrids {
    pub ris: Vec<RisGrids>,
    pub sizes: GridSizes,
}

/// `count` midpoints of an even split of `[-range, range]`.
pub fn uniform_midpoints(count: usize, range: f64) -> Vec<f64> {
    let w = 2.0 * range / count as f64;
    (0..count).map(|k| -range + w * (k as f64 + 0.5)).collect()
}

fn los_first(los: f64, count: usize, range: f64) -> Vec<f64> {
    let mut g = vec![los];
    if count > 1 {
        g.extend(uniform_midpoints(count - 1, range));
    }
    g
}

pub fn build_grids(geom: &SystemGeometry, sizes: GridSizes) -> Result<DictionaryGrids> {
    geom.validate()?;
    if sizes.g4 < 2 || sizes.g5 < 2 {
        return config_err("G4 and G5 must be at least 2");
    }
    let mut ris = Vec::with_capacity(geom.ris.len());
    for (i, r) in geom.ris.iter().enumerate() {
        let min = if r.paths >= 2 { 2 } else { 1 };
        if sizes.g1 < min || sizes.g2 < min || sizes.g3 < min {
            return config_err(format!("G1, G2, G3 must be at least {min} for RIS {i} with {} paths", r.paths));
        }
        let (ua, dep) = geom.los_angles(i)?;
        let (sb, sr) = (geom.bs_scale(), geom.ris_scale(i));
        ris.push(RisGrids {
            arrival: los_first(ua, sizes.g1, sb),
            departure_u: los_first(dep.u, sizes.g2, sr),
            departure_v: los_first(dep.v, sizes.g3, sr),
            ue_u: uniform_midpoints(sizes.g4, sr),
            ue_v: uniform_midpoints(sizes.g5, sr),
            bs_range: sb,
            ris_range: sr,
        });
    }
    Ok(DictionaryGrids { ris, sizes })
}

/// Columns `a_M(w_g)` for every grid value.
pub fn ula_dictionary(grid: &[f64], m: usize) -> CMatrix {
    let mut d = CMatrix::zeros(m, grid.len());
    for (g, &u) in grid.iter().enumerate() {
        d.set_column(g, &ula_unchecked(u, m));
    }
    d
}

/// Columns `b(u_{c mod G_u}, v_{c div G_u})`.
pub fn ura_dictionary(grid_u: &[f64], grid_v: &[f64], ny: usize, nz: usize) -> CMatrix {
    let gu = grid_u.len();
    let mut d = CMatrix::zeros(ny * nz, gu * grid_v.len());
    for (c3, &v) in grid_v.iter().enumerate() {
        for (c2, &u) in grid_u.iter().enumerate() {
            d.set_column(c2 + gu * c3, &ura_unchecked(u, v, ny, nz));
        }
    }
    d
}

impl RisGrids {
    pub fn arrival_dictionary(&self, m: usize) -> CMatrix {
        ula_dictionary(&self.arrival, m)
    }
    pub fn departure_dictionary(&self, ny: usize, nz: usize) -> CMatrix {
        ura_dictionary(&self.departure_u, &self.departure_v, ny, nz)
    }
    pub fn ue_dictionary(&self, ny: usize, nz: usize) -> CMatrix {
        ura_dictionary(&self.ue_u, &self.ue_v, ny, nz)
    }
    pub fn g1(&self) -> usize {
        self.arrival.len()
    }
    pub fn g2(&self) -> usize {
        self.departure_u.len()
    }
    pub fn g3(&self) -> usize {
        self.departure_v.len()
    }
    pub fn ue_cells(&self) -> usize {
        self.ue_u.len() * self.ue_v.len()
    }
    /// Cell of the BS-side dictionary holding the given grid indices.
    pub fn bs_cell(&self, g1: usize, g2: usize, g3: usize) -> usize {
        g1 + self.g1() * (g2 + self.g2() * g3)
    }
}

/// Sparse coefficients `vec(Ω_i)` of an on-grid BS-RIS link.
/// Paths off the grid are matched to the nearest cell.
pub fn bs_ris_coefficients(link: &BsRisLink, grids: &RisGrids) -> CVector {
    let mut omega = CVector::zeros(grids.g1() * grids.g2() * grids.g3());
    for p in &link.paths {
        let g1 = nearest(&grids.arrival, p.arrival);
        let g2 = nearest(&grids.departure_u, p.departure.u);
        let g3 = nearest(&grids.departure_v, p.departure.v);
        omega[grids.bs_cell(g1, g2, g3)] += p.gain;
    }
    omega
}

/// Sparse coefficients `ψ_{i,k}` of an on-grid UE link.
pub fn ue_coefficients(link: &RisLink, grids: &RisGrids) -> CVector {
    let mut psi = CVector::zeros(grids.ue_cells());
    let g4 = nearest(&grids.ue_u, link.angles.u);
    let g5 = nearest(&grids.ue_v, link.angles.v);
    psi[g4 + grids.ue_u.len() * g5] = link.gain;
    psi
}

pub fn nearest(grid: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if (g - x).abs() < (grid[best] - x).abs() {
            best = i;
        }
    }
    best
}
