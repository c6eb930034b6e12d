//! Configuration, method registry and Monte Carlo runner.

use std::fmt;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_grids, sample_channels, sample_channels_on_grid, ChannelConfig, ChannelRealization, GridSizes, Point3, SystemGeometry, DictionaryGrids};
use crate::error::{config_err, IsacError, Result};
use crate::fixed_site::{
    atoms_to_channels, cascade_from_channels, demod_remod, lmmse_data_init, lmmse_detect, omp_off_grid, omp_on_grid,
    run_algorithm1_traced, tr_ls_init, Algorithm1Config, FixedSiteProblem,
};
use crate::linalg::{CMatrix, OpCounter, C64};
use crate::metrics::{
    bit_error_rate, effective_sinr_fixed, effective_sinr_multiue, estimated_paths, localization_error, nmse_angles,
    nmse_channel, path_triples, spectral_efficiency, summarize, MetricsReport, PathTriple,
};
use crate::multiue::{detect_frame, run_algorithm3_traced, Algorithm3Config, MultiUeProblem, ScmaFrame};
use crate::scma::ScmaCodebook;
use crate::signal::{
    apply_symbols, fixed_site_cascade, generate_ris_schedule, mean_received_power, noise_matrix,
    noise_variance_for_snr, qpsk_bit_errors, synthesize_multiue, ue_cascade, RisSchedule, SuperimposedFrame,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FixedSite,
    MultiUe,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::FixedSite => "fixed-site",
            Scenario::MultiUe => "multi-ue",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = IsacError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-site" => Ok(Scenario::FixedSite),
            "multi-ue" => Ok(Scenario::MultiUe),
            other => Err(IsacError::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Where Algorithm 3 takes the BS-RIS matrices from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BsRisSource {
    Truth,
    /// Algorithm 1 on a fixed-site block of `t1[0]` slots over the same channels
    Estimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MethodInfo {
    pub name: &'static str,
    pub scenario: Scenario,
    pub description: &'static str,
}

const METHODS: &[MethodInfo] = &[
    MethodInfo { name: "alg1", scenario: Scenario::FixedSite, description: "structure-aware SBL with off-grid refinement and data feedback" },
    MethodInfo { name: "sbl-on-grid", scenario: Scenario::FixedSite, description: "the same SBL with the grids frozen" },
    MethodInfo { name: "omp-on-grid", scenario: Scenario::FixedSite, description: "OMP on the dictionary after LMMSE data initialization" },
    MethodInfo { name: "omp-off-grid", scenario: Scenario::FixedSite, description: "OMP followed by per-atom gradient refinement" },
    MethodInfo { name: "pure-pilot", scenario: Scenario::FixedSite, description: "SBL on a full-power pilot block, no data" },
    MethodInfo { name: "orthogonal-reference", scenario: Scenario::FixedSite, description: "time-multiplexed pilots, RIS frozen, no sensing" },
    MethodInfo { name: "single-ris", scenario: Scenario::FixedSite, description: "alg1 with the second RIS turned off" },
    MethodInfo { name: "oracle", scenario: Scenario::FixedSite, description: "LMMSE detection with the true cascaded channel" },
    MethodInfo { name: "alg3", scenario: Scenario::MultiUe, description: "UAMP-SBL, SCMA detection, reduced refinement and localization" },
    MethodInfo { name: "oracle-csi", scenario: Scenario::MultiUe, description: "SCMA detection with the true cascaded channels" },
];

pub fn methods() -> &'static [MethodInfo] {
    METHODS
}

pub fn find_method(scenario: Scenario, name: &str) -> Result<&'static MethodInfo> {
    METHODS
        .iter()
        .find(|m| m.name == name && m.scenario == scenario)
        .ok_or_else(|| IsacError::UnknownMethod(format!("'{name}' for scenario {scenario}")))
}

/// One JSON document describing a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    /// empty selects every method of the scenario
    pub methods: Vec<String>,
    pub geometry: SystemGeometry,
    pub channel: ChannelConfig,
    /// draw the UE positions of every trial uniformly in `ue_box`
    pub random_ue_positions: bool,
    /// `[[x_min, x_max], [y_min, y_max], [z_min, z_max]]`
    pub ue_box: [[f64; 2]; 3],
    /// place NLoS and UE angles on the dictionary grids
    pub on_grid: bool,
    pub users: usize,
    pub bands: usize,
    /// SCMA codebook JSON; the built-in codebook when absent
    pub codebook_file: Option<String>,
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
    pub xi0: f64,
    pub xi_k: f64,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub grids: GridSizes,
    pub algorithm1: Algorithm1Config,
    pub algorithm3: Algorithm3Config,
    pub bs_ris_source: BsRisSource,
    /// pilot share of the orthogonal reference
    pub reference_pilot_fraction: f64,
    pub omp_rounds: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::FixedSite,
            methods: Vec::new(),
            geometry: SystemGeometry::desk_scale(),
            channel: ChannelConfig::default(),
            random_ue_positions: false,
            ue_box: [[10.0, 30.0], [5.0, 25.0], [0.0, 20.0]],
            on_grid: false,
            users: 6,
            bands: 4,
            codebook_file: None,
            t1: vec![128],
            t2: vec![64],
            xi0: 0.5,
            xi_k: 0.5,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            trials: 10,
            seed: 1,
            grids: GridSizes { g1: 4, g2: 4, g3: 4, g4: 8, g5: 8 },
            algorithm1: Algorithm1Config::default(),
            algorithm3: Algorithm3Config::default(),
            bs_ris_source: BsRisSource::Truth,
            reference_pilot_fraction: 1.0 / 16.0,
            omp_rounds: 30,
        }
    }
}

impl SimulationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The methods to run, after defaulting.
    pub fn selected_methods(&self) -> Result<Vec<&'static MethodInfo>> {
        if self.methods.is_empty() {
            return Ok(METHODS.iter().filter(|m| m.scenario == self.scenario).collect());
        }
        self.methods.iter().map(|n| find_method(self.scenario, n)).collect()
    }

    pub fn codebook(&self) -> Result<ScmaCodebook> {
        let cb = match &self.codebook_file {
            Some(p) => ScmaCodebook::from_json(&std::fs::read_to_string(p)?)?,
            None => ScmaCodebook::default_codebook(),
        };
        if cb.bands != self.bands {
            return config_err(format!("codebook has {} bands, config asks for {}", cb.bands, self.bands));
        }
        cb.restrict(self.users)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.trials == 0 || self.users == 0 || self.bands == 0 || self.omp_rounds == 0 {
            return config_err("trials, users, bands and omp_rounds must be at least 1");
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return config_err("snr_db must be a non-empty list of finite values");
        }
        if self.t1.is_empty() || self.t2.is_empty() || self.t1.iter().chain(&self.t2).any(|&t| t == 0) {
            return config_err("t1 and t2 must be non-empty lists of positive slot counts");
        }
        for (name, xi) in [("xi0", self.xi0), ("xi_k", self.xi_k)] {
            if !(xi > 0.0 && xi < 1.0) {
                return config_err(format!("{name} = {xi} outside (0, 1)"));
            }
        }
        if !(self.reference_pilot_fraction > 0.0 && self.reference_pilot_fraction < 1.0) {
            return config_err("reference_pilot_fraction must lie in (0, 1)");
        }
        for (a, &[lo, hi]) in ["x", "y", "z"].iter().zip(&self.ue_box) {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return config_err(format!("ue_box {a} range is empty"));
            }
        }
        self.algorithm1.validate()?;
        self.algorithm3.validate()?;
        build_grids(&self.geometry, self.grids)?;
        self.selected_methods()?;
        if self.scenario == Scenario::MultiUe {
            if self.geometry.ris.len() < 2 {
                return config_err("the multi-UE scenario needs at least two RISs");
            }
            if !self.random_ue_positions && self.geometry.ue_positions.len() < self.users {
                return config_err(format!(
                    "{} UE positions for {} users",
                    self.geometry.ue_positions.len(),
                    self.users
                ));
            }
            self.codebook()?;
        }
        Ok(())
    }

    /// `E_b/N_0` in dB implied by the configured SNR definition.
    pub fn ebn0_db(&self, snr_db: f64, bits_per_slot: usize) -> f64 {
        let xi = match self.scenario {
            Scenario::FixedSite => self.xi0,
            Scenario::MultiUe => self.xi_k,
        };
        snr_db + 10.0 * (xi / ((1.0 - xi) * bits_per_slot as f64)).log10()
    }
}

/// Threads requested through `ISAC_THREADS`.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("ISAC_THREADS").ok().and_then(|s| s.trim().parse().ok()).filter(|&n: &usize| n > 0)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// worker count; `ISAC_THREADS` or the rayon default when absent
    pub threads: Option<usize>,
    pub trace: bool,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub snr_db: f64,
    pub t1: usize,
    pub t2: usize,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    pub seed0: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceLine {
    pub scenario: Scenario,
    pub method: String,
    pub snr_db: f64,
    pub t1: usize,
    pub t2: usize,
    pub trial: usize,
    pub record: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailedTrial {
    pub method: String,
    pub snr_db: f64,
    pub t1: usize,
    pub t2: usize,
    pub trial: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub method: &'static str,
    pub outcome: std::result::Result<MetricsReport, String>,
    pub trace: Vec<serde_json::Value>,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<FailedTrial>,
    pub traces: Vec<TraceLine>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Point {
    snr_db: f64,
    t1: usize,
    t2: usize,
}

fn sweep_points(cfg: &SimulationConfig) -> Vec<Point> {
    let mut out = Vec::new();
    match cfg.scenario {
        Scenario::FixedSite => {
            for &t1 in &cfg.t1 {
                for &snr_db in &cfg.snr_db {
                    out.push(Point { snr_db, t1, t2: cfg.t2[0] });
                }
            }
        }
        Scenario::MultiUe => {
            for &t2 in &cfg.t2 {
                for &snr_db in &cfg.snr_db {
                    out.push(Point { snr_db, t1: cfg.t1[0], t2 });
                }
            }
        }
    }
    out
}

/// Random stream of one trial. Independent of the sweep point, so every
/// point sees the same drops.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

/// Runs the sweep. Trials that error or panic are reported, not propagated.
pub fn run_experiment(cfg: &SimulationConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let methods = cfg.selected_methods()?;
    let grids = build_grids(&cfg.geometry, cfg.grids)?;
    let codebook = match cfg.scenario {
        Scenario::MultiUe => Some(cfg.codebook()?),
        Scenario::FixedSite => None,
    };
    let points = sweep_points(cfg);
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..cfg.trials).map(move |t| (p, t))).collect();
    info!("{} points x {} trials x {} methods", points.len(), cfg.trials, methods.len());

    let run_job = |&(p, trial): &(usize, usize)| -> Vec<TrialResult> {
        let pt = points[p];
        let ctx = TrialContext { cfg, grids: &grids, codebook: codebook.as_ref(), point: pt, trial };
        match cfg.scenario {
            Scenario::FixedSite => run_fixed_trial(&ctx, &methods),
            Scenario::MultiUe => run_multiue_trial(&ctx, &methods),
        }
    };
    let threads = opts.threads.or_else(threads_from_env);
    let results: Vec<Vec<TrialResult>> = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| IsacError::Config(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run_job).collect()),
        None => jobs.par_iter().map(run_job).collect(),
    };

    let mut out = ExperimentOutput::default();
    for (p, pt) in points.iter().enumerate() {
        for m in &methods {
            let mut per_metric: Vec<(&'static str, Vec<f64>)> = Vec::new();
            let mut ok = 0;
            for (&(jp, trial), res) in jobs.iter().zip(&results) {
                if jp != p {
                    continue;
                }
                let Some(r) = res.iter().find(|r| r.method == m.name) else { continue };
                if opts.trace {
                    for rec in &r.trace {
                        out.traces.push(TraceLine {
                            scenario: cfg.scenario,
                            method: m.name.into(),
                            snr_db: pt.snr_db,
                            t1: pt.t1,
                            t2: pt.t2,
                            trial,
                            record: rec.clone(),
                        });
                    }
                }
                match &r.outcome {
                    Ok(rep) => {
                        ok += 1;
                        for (k, v) in rep.entries() {
                            match per_metric.iter_mut().find(|(n, _)| *n == k) {
                                Some((_, vals)) => vals.push(v),
                                None => per_metric.push((k, vec![v])),
                            }
                        }
                    }
                    Err(msg) => {
                        warn!("{} trial {trial} at {} dB failed: {msg}", m.name, pt.snr_db);
                        out.failures.push(FailedTrial {
                            method: m.name.into(),
                            snr_db: pt.snr_db,
                            t1: pt.t1,
                            t2: pt.t2,
                            trial,
                            message: msg.clone(),
                        });
                    }
                }
            }
            let row = |metric: &str, mean: f64, stderr: f64, trials: usize| ResultRow {
                scenario: cfg.scenario.to_string(),
                method: m.name.into(),
                snr_db: pt.snr_db,
                t1: pt.t1,
                t2: pt.t2,
                metric: metric.into(),
                mean,
                stderr,
                trials,
                seed0: cfg.seed,
            };
            let bits = match &codebook {
                Some(cb) => cb.bits_per_symbol(),
                None => 2,
            };
            out.rows.push(row("ebn0_db", cfg.ebn0_db(pt.snr_db, bits), 0.0, ok));
            for (k, vals) in &per_metric {
                let s = summarize(vals);
                out.rows.push(row(k, s.mean, s.stderr, s.count));
            }
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_trace<W: Write>(traces: &[TraceLine], mut w: W) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

struct TrialContext<'a> {
    cfg: &'a SimulationConfig,
    grids: &'a DictionaryGrids,
    codebook: Option<&'a ScmaCodebook>,
    point: Point,
    trial: usize,
}

fn guarded<F>(name: &'static str, f: F) -> TrialResult
where
    F: FnOnce(&mut Vec<serde_json::Value>) -> Result<MetricsReport>,
{
    let mut trace = Vec::new();
    let outcome = match catch_unwind(AssertUnwindSafe(|| f(&mut trace))) {
        Ok(Ok(r)) => Ok(r),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("panic: {}", panic_message(p))),
    };
    TrialResult { method: name, outcome, trace }
}

fn draw_channels<R: Rng>(ctx: &TrialContext, geom: &SystemGeometry, rng: &mut R) -> Result<ChannelRealization> {
    if ctx.cfg.on_grid {
        sample_channels_on_grid(geom, ctx.grids, &ctx.cfg.channel, rng)
    } else {
        sample_channels(geom, &ctx.cfg.channel, rng)
    }
}

fn elements(geom: &SystemGeometry) -> Vec<usize> {
    geom.ris.iter().map(|r| r.elements()).collect()
}

// ---------------------------------------------------------------- fixed site

struct FixedScene {
    chan: ChannelRealization,
    schedule: RisSchedule,
    frame: SuperimposedFrame,
    unit_noise: CMatrix,
    /// cascaded channel with every RIS on
    cascade: CMatrix,
    n0: f64,
}

impl FixedScene {
    fn draw<R: Rng>(ctx: &TrialContext, geom: &SystemGeometry, t: usize, snr_db: f64, rng: &mut R) -> Result<Self> {
        let chan = draw_channels(ctx, geom, rng)?;
        let schedule = generate_ris_schedule(&elements(geom), t, rng)?;
        let frame = SuperimposedFrame::random(t, ctx.cfg.xi0, rng);
        let unit_noise = noise_matrix(geom.antennas, t, 1.0, rng);
        let all: Vec<usize> = (0..geom.ris.len()).collect();
        let cascade = fixed_site_cascade(&chan, &schedule, &all)?;
        let n0 = noise_variance_for_snr(mean_received_power(&cascade), ctx.cfg.xi0, snr_db);
        Ok(Self { chan, schedule, frame, unit_noise, cascade, n0 })
    }

    fn received(&self, cascade: &CMatrix, symbols: &[C64]) -> Result<CMatrix> {
        Ok(apply_symbols(cascade, symbols)? + &self.unit_noise * C64::new(self.n0.sqrt(), 0.0))
    }

    fn truth(&self, active: &[usize]) -> Vec<CMatrix> {
        active.iter().map(|&i| self.chan.bs_ris[i].matrix.clone()).collect()
    }

    fn true_paths(&self, active: &[usize]) -> Vec<Vec<PathTriple>> {
        active.iter().map(|&i| path_triples(&self.chan.bs_ris[i].paths)).collect()
    }

    fn bits(&self, idx: &[usize]) -> Result<(usize, usize)> {
        let errors: usize = idx.iter().zip(&self.frame.data_index).map(|(a, b)| qpsk_bit_errors(*a, *b)).sum();
        Ok((errors, 2 * self.frame.data_index.len()))
    }
}

/// Data-bearing metrics of a superimposed frame.
fn data_metrics(
    rep: &mut MetricsReport,
    scene: &FixedScene,
    truth: &CMatrix,
    est: &CMatrix,
    idx: &[usize],
    xi: f64,
) -> Result<()> {
    let (errors, bits) = scene.bits(idx)?;
    rep.ber = Some(bit_error_rate(errors, bits)?);
    rep.se = Some(spectral_efficiency(&effective_sinr_fixed(truth, est, xi, scene.n0)?, 1.0));
    rep.effective_throughput = Some((bits - errors) as f64);
    rep.nmse_cascade_db = Some(nmse_channel(std::slice::from_ref(truth), std::slice::from_ref(est))?);
    Ok(())
}

fn run_fixed_trial(ctx: &TrialContext, methods: &[&'static MethodInfo]) -> Vec<TrialResult> {
    let cfg = ctx.cfg;
    let geom = &cfg.geometry;
    let mut rng = trial_rng(cfg.seed, ctx.trial);
    let scene = match FixedScene::draw(ctx, geom, ctx.point.t1, ctx.point.snr_db, &mut rng) {
        Ok(s) => s,
        Err(e) => {
            return methods
                .iter()
                .map(|m| TrialResult { method: m.name, outcome: Err(format!("scene: {e}")), trace: Vec::new() })
                .collect()
        }
    };
    let all: Vec<usize> = (0..geom.ris.len()).collect();
    let paths: Vec<usize> = geom.ris.iter().map(|r| r.paths).collect();
    let xi = cfg.xi0;
    let pilot = scene.frame.pilot.clone();
    let problem = |active: &[usize], cascade: &CMatrix, symbols: &[C64], xi: f64| -> Result<FixedSiteProblem> {
        let y = scene.received(cascade, symbols)?;
        FixedSiteProblem::from_scene(geom, ctx.grids, &scene.chan, &scene.schedule, active, y, pilot.clone(), xi, scene.n0)
    };
    let tx = scene.frame.transmitted();

    let alg1 = |a1: &Algorithm1Config, active: &[usize], trace: &mut Vec<serde_json::Value>| -> Result<MetricsReport> {
        let cascade = if active.len() == all.len() { scene.cascade.clone() } else { fixed_site_cascade(&scene.chan, &scene.schedule, active)? };
        let p = problem(active, &cascade, &tx, xi)?;
        let out = run_algorithm1_traced(&p, a1, |r| trace.push(serde_json::to_value(r).unwrap_or_default()))?;
        let l: Vec<usize> = active.iter().map(|&i| paths[i]).collect();
        let mut rep = MetricsReport {
            nmse_hr_db: Some(nmse_channel(&scene.truth(active), &out.channels(&p)?)?),
            nmse_phi_db: Some(nmse_angles(&scene.true_paths(active), &estimated_paths(&out.grids, &out.omega, &l)?)?),
            iterations: Some(out.trace.len() as f64),
            ..Default::default()
        };
        data_metrics(&mut rep, &scene, &cascade, &out.cascade(&p)?, &out.data_index, xi)?;
        Ok(rep)
    };

    // data symbols for the OMP baselines: TR-LS, LMMSE and hard decisions
    let omp_start = || -> Result<(FixedSiteProblem, Vec<C64>)> {
        let p = problem(&all, &scene.cascade, &tx, xi)?;
        let w0 = tr_ls_init(&p, &p.grids, cfg.algorithm1.rho)?;
        let (_, d) = demod_remod(&lmmse_data_init(&p, &p.grids, &w0)?);
        let s = p.transmitted(&d);
        Ok((p, s))
    };
    let omp_finish = |p: &FixedSiteProblem, channels: Vec<CMatrix>, est_paths: Vec<Vec<PathTriple>>| -> Result<MetricsReport> {
        let h = cascade_from_channels(p, &channels);
        let (idx, _) = demod_remod(&lmmse_detect(&h, &p.y, &p.pilot, p.xi, p.noise_var, p.power));
        let mut rep = MetricsReport {
            nmse_hr_db: Some(nmse_channel(&scene.truth(&all), &channels)?),
            nmse_phi_db: Some(nmse_angles(&scene.true_paths(&all), &est_paths)?),
            ..Default::default()
        };
        data_metrics(&mut rep, &scene, &scene.cascade, &h, &idx, xi)?;
        Ok(rep)
    };

    methods
        .iter()
        .map(|m| {
            guarded(m.name, |trace| match m.name {
                "alg1" => alg1(&cfg.algorithm1, &all, trace),
                "sbl-on-grid" => alg1(&Algorithm1Config { refine: false, ..cfg.algorithm1.clone() }, &all, trace),
                "single-ris" => alg1(&cfg.algorithm1, &all[..1], trace),
                "omp-on-grid" => {
                    let (p, s) = omp_start()?;
                    let omega = omp_on_grid(&p, &s)?;
                    let op = p.operator(&p.pilot)?;
                    let channels = op.bs_ris_channels(&omega, &p.ris, &p.grids);
                    omp_finish(&p, channels, estimated_paths(&p.grids, &omega, &paths)?)
                }
                "omp-off-grid" => {
                    let (p, s) = omp_start()?;
                    let (atoms, gains) = omp_off_grid(&p, &s, &cfg.algorithm1.step, cfg.omp_rounds)?;
                    let mut est: Vec<Vec<PathTriple>> = vec![Vec::new(); all.len()];
                    for a in &atoms {
                        est[a.ris].push([a.arrival, a.departure_u, a.departure_v]);
                    }
                    omp_finish(&p, atoms_to_channels(&p, &atoms, &gains), est)
                }
                "pure-pilot" => {
                    let mut p = problem(&all, &scene.cascade, &pilot, xi)?;
                    p.xi = 0.0;
                    let a1 = Algorithm1Config { update_data: false, ..cfg.algorithm1.clone() };
                    let out = run_algorithm1_traced(&p, &a1, |r| trace.push(serde_json::to_value(r).unwrap_or_default()))?;
                    let h = out.cascade(&p)?;
                    Ok(MetricsReport {
                        nmse_hr_db: Some(nmse_channel(&scene.truth(&all), &out.channels(&p)?)?),
                        nmse_phi_db: Some(nmse_angles(&scene.true_paths(&all), &estimated_paths(&out.grids, &out.omega, &paths)?)?),
                        nmse_cascade_db: Some(nmse_channel(std::slice::from_ref(&scene.cascade), std::slice::from_ref(&h))?),
                        iterations: Some(out.trace.len() as f64),
                        ..Default::default()
                    })
                }
                "orthogonal-reference" => orthogonal_reference(&scene, &all, cfg.reference_pilot_fraction),
                "oracle" => {
                    let p = problem(&all, &scene.cascade, &tx, xi)?;
                    let (idx, _) = demod_remod(&lmmse_detect(&scene.cascade, &p.y, &p.pilot, xi, scene.n0, p.power));
                    let mut rep = MetricsReport::default();
                    data_metrics(&mut rep, &scene, &scene.cascade, &scene.cascade, &idx, xi)?;
                    rep.nmse_cascade_db = None;
                    Ok(rep)
                }
                other => Err(IsacError::UnknownMethod(other.into())),
            })
        })
        .collect()
}

/// Pilots in the first `T_p` slots at full power, data in the rest, the RIS
/// held at its slot-0 configuration. Least squares from the pilots, matched
/// filter on the data.
fn orthogonal_reference(scene: &FixedScene, all: &[usize], fraction: f64) -> Result<MetricsReport> {
    let t = scene.frame.slots();
    let tp = ((fraction * t as f64).round() as usize).clamp(1, t.saturating_sub(1).max(1));
    if tp >= t {
        return config_err("the orthogonal reference needs at least two slots");
    }
    let frozen = scene.schedule.frozen_at(0);
    let h = fixed_site_cascade(&scene.chan, &frozen, all)?;
    let x: Vec<C64> = (0..t).map(|s| if s < tp { scene.frame.pilot[s] } else { scene.frame.data[s] }).collect();
    let y = scene.received(&h, &x)?;
    let mut est = y.column(0) * C64::new(0.0, 0.0);
    for s in 0..tp {
        est += y.column(s) * (x[s].conj() / x[s].norm_sqr());
    }
    est /= C64::new(tp as f64, 0.0);
    let e2 = est.norm_squared().max(f64::MIN_POSITIVE);
    let mut errors = 0;
    for s in tp..t {
        let z = est.dotc(&y.column(s)) / e2;
        errors += qpsk_bit_errors(crate::signal::qpsk_demod(z), scene.frame.data_index[s]);
    }
    let bits = 2 * (t - tp);
    let truth = CMatrix::from_fn(h.nrows(), t - tp, |m, _| h[(m, 0)]);
    let est_m = CMatrix::from_fn(h.nrows(), t - tp, |m, _| est[m]);
    let sinr = effective_sinr_fixed(&truth, &est_m, 1.0, scene.n0)?;
    Ok(MetricsReport {
        ber: Some(bit_error_rate(errors, bits)?),
        se: Some(spectral_efficiency(&sinr, (t - tp) as f64 / t as f64)),
        effective_throughput: Some((bits - errors) as f64),
        nmse_cascade_db: Some(nmse_channel(&[truth.clone()], &[est_m])?),
        ..Default::default()
    })
}

// ---------------------------------------------------------------- multi-UE

fn run_multiue_trial(ctx: &TrialContext, methods: &[&'static MethodInfo]) -> Vec<TrialResult> {
    let fail_all = |e: IsacError| -> Vec<TrialResult> {
        methods.iter().map(|m| TrialResult { method: m.name, outcome: Err(format!("scene: {e}")), trace: Vec::new() }).collect()
    };
    let cfg = ctx.cfg;
    let Some(cb) = ctx.codebook else { return fail_all(IsacError::Config("no codebook".into())) };
    let mut rng = trial_rng(cfg.seed, ctx.trial);
    let mut geom = cfg.geometry.clone();
    if cfg.random_ue_positions {
        geom.ue_positions = (0..cfg.users)
            .map(|_| -> Point3 { std::array::from_fn(|a| rng.random_range(cfg.ue_box[a][0]..=cfg.ue_box[a][1])) })
            .collect();
    } else {
        geom.ue_positions.truncate(cfg.users);
    }
    let scene = (|| -> Result<_> {
        let chan = draw_channels(ctx, &geom, &mut rng)?;
        let t = ctx.point.t2;
        let schedule = generate_ris_schedule(&elements(&geom), t, &mut rng)?;
        let frame = ScmaFrame::random(cb, t, cfg.xi_k, &mut rng);
        let symbols = frame.symbols(cb);
        let truth: Vec<CMatrix> = (0..cb.ues()).map(|k| ue_cascade(&chan, &schedule, k)).collect::<Result<_>>()?;
        let rx_power = truth.iter().map(mean_received_power).sum::<f64>() / truth.len() as f64;
        let n0 = noise_variance_for_snr(rx_power, cfg.xi_k, ctx.point.snr_db);
        let y: Vec<CMatrix> = synthesize_multiue(&chan, &symbols, &schedule, n0, &mut rng)?.into_iter().map(|b| b.y).collect();
        let bs_ris = match cfg.bs_ris_source {
            BsRisSource::Truth => None,
            BsRisSource::Estimate => Some(estimate_bs_ris(ctx, &geom, &chan, &mut rng)?),
        };
        let problem = MultiUeProblem::from_scene(
            &geom,
            ctx.grids,
            &chan,
            &schedule,
            bs_ris.as_deref(),
            y,
            frame.pilots(cb),
            cb.clone(),
            cfg.xi_k,
            n0,
        )?;
        Ok((frame, symbols, truth, problem))
    })();
    let (frame, symbols, truth, problem) = match scene {
        Ok(s) => s,
        Err(e) => return fail_all(e),
    };
    let k_count = cb.ues();
    let t = problem.slots();
    let energy: Vec<Vec<f64>> =
        symbols.iter().map(|s| (0..t).map(|c| s.column(c).norm_squared()).collect()).collect();
    let sigma2 = vec![cfg.xi_k; k_count];
    let bits = k_count * t * cb.bits_per_symbol();
    let data_metrics = |rep: &mut MetricsReport, est: &[CMatrix], idx: &[Vec<usize>]| -> Result<()> {
        let mut errors = 0;
        for (e, tr) in idx.iter().zip(&frame.data_index) {
            for (a, b) in e.iter().zip(tr) {
                errors += cb.bit_errors(*a, *b);
            }
        }
        rep.ber = Some(bit_error_rate(errors, bits)?);
        let sinr = effective_sinr_multiue(&truth, est, &energy, &sigma2, problem.noise_var)?;
        rep.se = Some(spectral_efficiency(&sinr.concat(), 1.0));
        rep.effective_throughput = Some((bits - errors) as f64);
        Ok(())
    };

    methods
        .iter()
        .map(|m| {
            guarded(m.name, |trace| match m.name {
                "alg3" => {
                    let out = run_algorithm3_traced(
                        &problem,
                        &cfg.algorithm3,
                        Some(&frame.data_index),
                        &OpCounter::new(),
                        |r| trace.push(serde_json::to_value(r).unwrap_or_default()),
                    )?;
                    let est = out.channels(&problem);
                    let positions: Vec<Option<Point3>> = out
                        .positions
                        .iter()
                        .map(|p| p.as_ref().ok().map(|l| l.position).filter(|x| x.iter().all(|c| c.is_finite())))
                        .collect();
                    let (loc, failures) = localization_error(&positions, &geom.ue_positions)?;
                    let mut rep = MetricsReport {
                        nmse_cascade_db: Some(nmse_channel(&truth, &est)?),
                        localization_error: loc,
                        localization_failures: Some(failures as f64),
                        iterations: Some(out.trace.len() as f64),
                        ..Default::default()
                    };
                    data_metrics(&mut rep, &est, &out.data_index)?;
                    Ok(rep)
                }
                "oracle-csi" => {
                    let (idx, _) = detect_frame(&problem, &truth, problem.noise_var, &cfg.algorithm3.mpa)?;
                    let mut rep = MetricsReport::default();
                    data_metrics(&mut rep, &truth, &idx)?;
                    Ok(rep)
                }
                other => Err(IsacError::UnknownMethod(other.into())),
            })
        })
        .collect()
}

/// BS-RIS matrices estimated by Algorithm 1 from a fixed-site block.
fn estimate_bs_ris<R: Rng>(ctx: &TrialContext, geom: &SystemGeometry, chan: &ChannelRealization, rng: &mut R) -> Result<Vec<CMatrix>> {
    let cfg = ctx.cfg;
    let t = ctx.point.t1;
    let all: Vec<usize> = (0..geom.ris.len()).collect();
    let schedule = generate_ris_schedule(&elements(geom), t, rng)?;
    let frame = SuperimposedFrame::random(t, cfg.xi0, rng);
    let cascade = fixed_site_cascade(chan, &schedule, &all)?;
    let n0 = noise_variance_for_snr(mean_received_power(&cascade), cfg.xi0, ctx.point.snr_db);
    let y = apply_symbols(&cascade, &frame.transmitted())? + noise_matrix(geom.antennas, t, n0, rng);
    let p = FixedSiteProblem::from_scene(geom, ctx.grids, chan, &schedule, &all, y, frame.pilot.clone(), cfg.xi0, n0)?;
    let out = run_algorithm1_traced(&p, &cfg.algorithm1, |_| {})?;
    out.channels(&p)
}
