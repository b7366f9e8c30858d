//! Patch-graph compartmental dynamics for county-scale importation risk.
//!
//! Each patch carries five human compartments (susceptible, exposed,
//! symptomatic, asymptomatic, recovered) and two vector compartments
//! (susceptible, infected). Humans move between patches at the per-capita
//! rates in the flux matrix; vectors do not move, since their flight range
//! is tiny against patch size. Per patch `i` with static population `N_hi`
//! and vector capacity `N_vi`:
//!
//! ```text
//! S'_hi = -b·β_vh·I_vi·S_hi/N_hi                + Σ_j α_ji·S_hj - Σ_j α_ij·S_hi
//! E'_hi =  b·β_vh·I_vi·S_hi/N_hi - δ·E_hi       + Σ_j α_ji·E_hj - Σ_j α_ij·E_hi
//! I'_hi =  δ·(1-φ)·E_hi - γ·I_hi                + Σ_j α_ji·I_hj - Σ_j α_ij·I_hi
//! A'_hi =  δ·φ·E_hi     - γ·A_hi                + Σ_j α_ji·A_hj - Σ_j α_ij·A_hi
//! R'_hi =  γ·(I_hi+A_hi)                        + Σ_j α_ji·R_hj - Σ_j α_ij·R_hi
//! S'_vi = -b·β_hv·(I_hi+A_hi)·S_vi/N_hi - μ·(S_vi - N_vi)
//! I'_vi =  b·β_hv·(I_hi+A_hi)·S_vi/N_hi - μ·I_vi
//! ```
//!
//! The flux terms cancel pairwise when summed over patches, so total human
//! population is conserved exactly. Integration is classical fourth-order
//! Runge–Kutta with step rejection: a step driving any compartment below
//! -1e-9 is retried at half the step (at most 40 consecutive halvings),
//! and values in [-1e-9, 0] clamp to zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::FluxMatrix;
use crate::geo::Patch;

/// Transmission and progression rates. Defaults are commonly used Zika
/// estimates; the vector death rate defaults to a two-week mosquito
/// lifespan since published parameter tables rarely pin it down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    /// Bites per vector per day.
    #[serde(rename = "b", default = "default_bite_rate")]
    pub bite_rate: f64,
    /// Human-to-vector infection probability per bite-day.
    #[serde(rename = "beta_hv", default = "default_beta_hv")]
    pub human_to_vector: f64,
    /// Vector-to-human infection probability per bite-day.
    #[serde(rename = "beta_vh", default = "default_beta_vh")]
    pub vector_to_human: f64,
    /// Incubation rate (1/δ is the intrinsic incubation period in days).
    #[serde(rename = "delta", default = "default_incubation_rate")]
    pub incubation_rate: f64,
    /// Recovery rate.
    #[serde(rename = "gamma", default = "default_recovery_rate")]
    pub recovery_rate: f64,
    /// Proportion of infections that stay asymptomatic.
    #[serde(rename = "phi", default = "default_asymptomatic_fraction")]
    pub asymptomatic_fraction: f64,
    /// Vector death rate.
    #[serde(rename = "mu", default = "default_vector_death_rate")]
    pub vector_death_rate: f64,
}

fn default_bite_rate() -> f64 {
    0.5
}
fn default_beta_hv() -> f64 {
    0.5
}
fn default_beta_vh() -> f64 {
    0.4
}
fn default_incubation_rate() -> f64 {
    1.0 / 5.0
}
fn default_recovery_rate() -> f64 {
    0.25
}
fn default_asymptomatic_fraction() -> f64 {
    0.18
}
fn default_vector_death_rate() -> f64 {
    1.0 / 14.0
}

impl Default for EpiParams {
    fn default() -> Self {
        EpiParams {
            bite_rate: default_bite_rate(),
            human_to_vector: default_beta_hv(),
            vector_to_human: default_beta_vh(),
            incubation_rate: default_incubation_rate(),
            recovery_rate: default_recovery_rate(),
            asymptomatic_fraction: default_asymptomatic_fraction(),
            vector_death_rate: default_vector_death_rate(),
        }
    }
}

impl EpiParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("b", self.bite_rate),
            ("beta_hv", self.human_to_vector),
            ("beta_vh", self.vector_to_human),
            ("delta", self.incubation_rate),
            ("gamma", self.recovery_rate),
            ("mu", self.vector_death_rate),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.asymptomatic_fraction) {
            return Err(Error::Validation(format!(
                "phi must lie in [0, 1], got {}",
                self.asymptomatic_fraction
            )));
        }
        Ok(())
    }
}

/// On-disk model configuration: the rates plus the optional source
/// boundary condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpiConfig {
    #[serde(flatten)]
    pub params: EpiParams,
    /// Patch id whose human compartments are held at a fixed prevalence,
    /// modelling an importation source with its own unmodelled dynamics.
    #[serde(default)]
    pub pin_source: Option<String>,
    /// Infectious prevalence (I+A fraction of the patch population) for the
    /// pinned source.
    #[serde(default = "default_source_prevalence")]
    pub source_prevalence: f64,
}

fn default_source_prevalence() -> f64 {
    0.01
}

impl Default for EpiConfig {
    fn default() -> Self {
        EpiConfig {
            params: EpiParams::default(),
            pin_source: None,
            source_prevalence: default_source_prevalence(),
        }
    }
}

impl EpiConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Compartment values for every patch, struct-of-arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiState {
    pub s_h: Vec<f64>,
    pub e_h: Vec<f64>,
    pub i_h: Vec<f64>,
    pub a_h: Vec<f64>,
    pub r_h: Vec<f64>,
    pub s_v: Vec<f64>,
    pub i_v: Vec<f64>,
}

impl EpiState {
    pub fn zeros(n: usize) -> Self {
        EpiState {
            s_h: vec![0.0; n],
            e_h: vec![0.0; n],
            i_h: vec![0.0; n],
            a_h: vec![0.0; n],
            r_h: vec![0.0; n],
            s_v: vec![0.0; n],
            i_v: vec![0.0; n],
        }
    }

    /// Everyone susceptible and vectors at carrying capacity.
    pub fn all_susceptible(graph: &PatchGraph) -> Self {
        let mut st = EpiState::zeros(graph.len());
        for (i, p) in graph.patches.iter().enumerate() {
            st.s_h[i] = p.human_population;
            st.s_v[i] = p.vector_capacity;
        }
        st
    }

    pub fn len(&self) -> usize {
        self.s_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_h.is_empty()
    }

    fn fields(&self) -> [&Vec<f64>; 7] {
        [&self.s_h, &self.e_h, &self.i_h, &self.a_h, &self.r_h, &self.s_v, &self.i_v]
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 7] {
        let EpiState { s_h, e_h, i_h, a_h, r_h, s_v, i_v } = self;
        [s_h, e_h, i_h, a_h, r_h, s_v, i_v]
    }

    pub fn total_humans(&self) -> f64 {
        self.s_h
            .iter()
            .chain(&self.e_h)
            .chain(&self.i_h)
            .chain(&self.a_h)
            .chain(&self.r_h)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for field in self.fields() {
            if field.len() != self.s_h.len() {
                return Err(Error::Validation("ragged state vectors".into()));
            }
            for &v in field.iter() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "compartment value {v} must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    fn min_value(&self) -> f64 {
        self.fields()
            .into_iter()
            .flat_map(|f| f.iter())
            .fold(f64::INFINITY, |acc, &v| acc.min(v))
    }

    fn clamp_tiny_negatives(&mut self) {
        for field in self.fields_mut() {
            for v in field.iter_mut() {
                if *v < 0.0 && *v >= -1e-9 {
                    *v = 0.0;
                }
            }
        }
    }

    /// dst = a + c * b, elementwise.
    fn set_axpy(&mut self, a: &EpiState, c: f64, b: &EpiState) {
        for (d, (x, y)) in self
            .fields_mut()
            .into_iter()
            .zip(a.fields().into_iter().zip(b.fields()))
        {
            for i in 0..x.len() {
                d[i] = x[i] + c * y[i];
            }
        }
    }

    /// dst = y + dt/6 * (k1 + 2 k2 + 2 k3 + k4), elementwise.
    #[allow(clippy::too_many_arguments)]
    fn set_rk4_combine(
        &mut self,
        y: &EpiState,
        dt: f64,
        k1: &EpiState,
        k2: &EpiState,
        k3: &EpiState,
        k4: &EpiState,
    ) {
        let fields = self.fields_mut();
        let ys = y.fields();
        let k1s = k1.fields();
        let k2s = k2.fields();
        let k3s = k3.fields();
        let k4s = k4.fields();
        for (idx, d) in fields.into_iter().enumerate() {
            let (y, k1, k2, k3, k4) = (ys[idx], k1s[idx], k2s[idx], k3s[idx], k4s[idx]);
            for i in 0..y.len() {
                d[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
}

/// The patch system: an ordered patch list and the flux matrix over it.
#[derive(Debug, Clone)]
pub struct PatchGraph {
    pub patches: Vec<Patch>,
    pub alpha: FluxMatrix,
    /// Nonzero (from, to, rate) flux entries, diagonal excluded.
    edges: Vec<(usize, usize, f64)>,
}

impl PatchGraph {
    pub fn new(patches: Vec<Patch>, alpha: FluxMatrix) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Validation("patch graph needs at least one patch".into()));
        }
        for p in &patches {
            p.validate()?;
        }
        alpha.validate()?;
        let patch_ids: Vec<&str> = patches.iter().map(|p| p.id.as_str()).collect();
        let alpha_ids: Vec<&str> = alpha.patch_ids.iter().map(String::as_str).collect();
        if patch_ids != alpha_ids {
            return Err(Error::Validation(
                "flux matrix patch order does not match the patch list".into(),
            ));
        }
        let mut edges = Vec::new();
        for (i, row) in alpha.rates.iter().enumerate() {
            for (j, &rate) in row.iter().enumerate() {
                if rate != 0.0 && i != j {
                    edges.push((i, j, rate));
                }
            }
        }
        Ok(PatchGraph { patches, alpha, edges })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn index_of(&self, patch_id: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.id == patch_id)
    }
}

/// Boundary condition holding one patch's human compartments at a fixed
/// infectious prevalence.
#[derive(Debug, Clone, Copy)]
pub struct SourcePin {
    pub patch: usize,
    pub prevalence: f64,
}

impl SourcePin {
    pub fn resolve(graph: &PatchGraph, patch_id: &str, prevalence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prevalence) {
            return Err(Error::Validation(format!(
                "source prevalence must lie in [0, 1], got {prevalence}"
            )));
        }
        let patch = graph
            .index_of(patch_id)
            .ok_or_else(|| Error::Validation(format!("pin_source patch {patch_id:?} not in graph")))?;
        Ok(SourcePin { patch, prevalence })
    }

    /// Overwrite the pinned patch's human compartments with the fixed
    /// profile: prevalence split between symptomatic and asymptomatic by
    /// the asymptomatic fraction, remainder susceptible.
    pub fn apply(&self, state: &mut EpiState, graph: &PatchGraph, params: &EpiParams) {
        let n = graph.patches[self.patch].human_population;
        let i = self.patch;
        state.s_h[i] = (1.0 - self.prevalence) * n;
        state.e_h[i] = 0.0;
        state.i_h[i] = (1.0 - params.asymptomatic_fraction) * self.prevalence * n;
        state.a_h[i] = params.asymptomatic_fraction * self.prevalence * n;
        state.r_h[i] = 0.0;
    }
}

fn rhs_into(
    state: &EpiState,
    graph: &PatchGraph,
    params: &EpiParams,
    pin: Option<usize>,
    out: &mut EpiState,
) {
    let z = graph.len();
    let b = params.bite_rate;
    let beta_hv = params.human_to_vector;
    let beta_vh = params.vector_to_human;
    let delta = params.incubation_rate;
    let gamma = params.recovery_rate;
    let phi = params.asymptomatic_fraction;
    let mu = params.vector_death_rate;

    for i in 0..z {
        let n_h = graph.patches[i].human_population;
        let n_v = graph.patches[i].vector_capacity;
        let infect_h = b * beta_vh * state.i_v[i] * state.s_h[i] / n_h;
        let infect_v = b * beta_hv * (state.i_h[i] + state.a_h[i]) * state.s_v[i] / n_h;
        out.s_h[i] = -infect_h;
        out.e_h[i] = infect_h - delta * state.e_h[i];
        out.i_h[i] = delta * (1.0 - phi) * state.e_h[i] - gamma * state.i_h[i];
        out.a_h[i] = delta * phi * state.e_h[i] - gamma * state.a_h[i];
        out.r_h[i] = gamma * (state.i_h[i] + state.a_h[i]);
        out.s_v[i] = -infect_v - mu * (state.s_v[i] - n_v);
        out.i_v[i] = infect_v - mu * state.i_v[i];
    }

    // Human flux along the patch graph; vectors stay put.
    for &(from, to, rate) in &graph.edges {
        for (field, deriv) in [
            (&state.s_h, &mut out.s_h),
            (&state.e_h, &mut out.e_h),
            (&state.i_h, &mut out.i_h),
            (&state.a_h, &mut out.a_h),
            (&state.r_h, &mut out.r_h),
        ] {
            let moved = rate * field[from];
            deriv[from] -= moved;
            deriv[to] += moved;
        }
    }

    if let Some(p) = pin {
        out.s_h[p] = 0.0;
        out.e_h[p] = 0.0;
        out.i_h[p] = 0.0;
        out.a_h[p] = 0.0;
        out.r_h[p] = 0.0;
    }
}

/// Time derivative of the full state.
pub fn rhs(state: &EpiState, graph: &PatchGraph, params: &EpiParams) -> EpiState {
    let mut out = EpiState::zeros(graph.len());
    rhs_into(state, graph, params, None, &mut out);
    out
}

struct Integrator<'a> {
    graph: &'a PatchGraph,
    params: &'a EpiParams,
    pin: Option<usize>,
    k1: EpiState,
    k2: EpiState,
    k3: EpiState,
    k4: EpiState,
    tmp: EpiState,
    candidate: EpiState,
}

impl<'a> Integrator<'a> {
    fn new(graph: &'a PatchGraph, params: &'a EpiParams, pin: Option<usize>) -> Self {
        let z = graph.len();
        Integrator {
            graph,
            params,
            pin,
            k1: EpiState::zeros(z),
            k2: EpiState::zeros(z),
            k3: EpiState::zeros(z),
            k4: EpiState::zeros(z),
            tmp: EpiState::zeros(z),
            candidate: EpiState::zeros(z),
        }
    }

    fn derivative(&mut self, state: &EpiState) {
        rhs_into(state, self.graph, self.params, self.pin, &mut self.k1);
    }

    /// One classical RK4 evaluation of size `dt` into `self.candidate`,
    /// assuming `self.k1` already holds the derivative at `state`.
    fn rk4_candidate(&mut self, state: &EpiState, dt: f64) {
        self.tmp.set_axpy(state, dt / 2.0, &self.k1);
        rhs_into(&self.tmp, self.graph, self.params, self.pin, &mut self.k2);
        self.tmp.set_axpy(state, dt / 2.0, &self.k2);
        rhs_into(&self.tmp, self.graph, self.params, self.pin, &mut self.k3);
        self.tmp.set_axpy(state, dt, &self.k3);
        rhs_into(&self.tmp, self.graph, self.params, self.pin, &mut self.k4);

        self.candidate
            .set_rk4_combine(state, dt, &self.k1, &self.k2, &self.k3, &self.k4);
    }

    /// Advance `state` by exactly `dt` days, halving the internal step when
    /// a compartment would go below -1e-9.
    fn advance(&mut self, state: &mut EpiState, dt: f64, t: f64) -> Result<()> {
        let mut remaining = dt;
        let mut sub = dt;
        let mut halvings = 0u32;
        while remaining > 0.0 {
            let step = sub.min(remaining);
            self.derivative(state);
            self.rk4_candidate(state, step);
            if self.candidate.min_value() < -1e-9 {
                halvings += 1;
                if halvings > 40 {
                    return Err(Error::Stiffness {
                        t,
                        dt: step,
                        diagnostic: stiffness_diagnostic(&self.candidate, self.graph),
                    });
                }
                sub = step / 2.0;
                continue;
            }
            halvings = 0;
            self.candidate.clamp_tiny_negatives();
            std::mem::swap(state, &mut self.candidate);
            remaining -= step;
        }
        Ok(())
    }
}

fn stiffness_diagnostic(state: &EpiState, graph: &PatchGraph) -> String {
    let names = ["S_h", "E_h", "I_h", "A_h", "R_h", "S_v", "I_v"];
    let mut worst = (0usize, 0usize, 0.0f64);
    for (f, field) in state.fields().into_iter().enumerate() {
        for (i, &v) in field.iter().enumerate() {
            if v < worst.2 {
                worst = (f, i, v);
            }
        }
    }
    format!(
        "most negative compartment {} in patch {} at {:.3e}",
        names[worst.0], graph.patches[worst.1].id, worst.2
    )
}

/// One RK4 step of `dt` days with internal rejection/halving.
pub fn step_rk4(state: &EpiState, graph: &PatchGraph, params: &EpiParams, dt: f64) -> Result<EpiState> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Validation(format!("dt must be > 0, got {dt}")));
    }
    params.validate()?;
    let mut integrator = Integrator::new(graph, params, None);
    let mut out = state.clone();
    integrator.advance(&mut out, dt, 0.0)?;
    Ok(out)
}

/// Controls for [`integrate_to_steady`].
#[derive(Debug, Clone)]
pub struct SteadyOptions {
    /// Convergence threshold on max |dX/dt| / max(X, 1).
    pub tol: f64,
    /// Give up (converged = false) at this model time.
    pub t_max: f64,
    /// Base step in days.
    pub dt: f64,
    /// The residual must stay below `tol` this long before convergence is
    /// declared, so slow drifts are not mistaken for equilibrium.
    pub sustain_days: f64,
    /// Optional fixed-prevalence source boundary condition.
    pub pin: Option<SourcePin>,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        SteadyOptions {
            tol: 1e-9,
            t_max: 50_000.0,
            dt: 0.1,
            sustain_days: 10.0,
            pin: None,
        }
    }
}

/// Integration outcome.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub state: EpiState,
    /// max |dX/dt| / max(X, 1) at the final step.
    pub residual: f64,
    pub t_elapsed: f64,
    pub converged: bool,
}

/// Step the system until the normalized derivative stays below `tol` for
/// `sustain_days` of model time, or until `t_max`.
pub fn integrate_to_steady(
    init: &EpiState,
    graph: &PatchGraph,
    params: &EpiParams,
    opts: &SteadyOptions,
) -> Result<SteadyState> {
    if !opts.tol.is_finite() || opts.tol <= 0.0 {
        return Err(Error::Validation(format!("tol must be > 0, got {}", opts.tol)));
    }
    if !opts.t_max.is_finite() || opts.t_max <= 0.0 || !opts.dt.is_finite() || opts.dt <= 0.0 {
        return Err(Error::Validation("t_max and dt must be > 0".into()));
    }
    params.validate()?;
    init.validate()?;
    if init.len() != graph.len() {
        return Err(Error::Validation(format!(
            "state has {} patches, graph has {}",
            init.len(),
            graph.len()
        )));
    }

    let mut state = init.clone();
    if let Some(pin) = &opts.pin {
        pin.apply(&mut state, graph, params);
    }
    let mut integrator = Integrator::new(graph, params, opts.pin.map(|p| p.patch));

    let mut t = 0.0;
    let mut below_since: Option<f64> = None;
    let mut residual: f64;
    let mut converged = false;
    loop {
        integrator.derivative(&state);
        residual = 0.0;
        for (deriv, val) in integrator.k1.fields().into_iter().zip(state.fields()) {
            for i in 0..deriv.len() {
                residual = residual.max(deriv[i].abs() / val[i].max(1.0));
            }
        }
        if residual < opts.tol {
            let since = *below_since.get_or_insert(t);
            if t - since >= opts.sustain_days {
                converged = true;
                break;
            }
        } else {
            below_since = None;
        }
        if t >= opts.t_max {
            break;
        }
        integrator.advance(&mut state, opts.dt, t)?;
        t += opts.dt;
    }

    Ok(SteadyState {
        state,
        residual,
        t_elapsed: t,
        converged,
    })
}

/// Relative risk per patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskScores {
    pub entries: Vec<RiskEntry>,
    /// These are estimates of relative risk between patches, not case
    /// counts; absolute magnitudes carry no meaning.
    pub relative: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskEntry {
    pub patch_id: String,
    pub i_h_steady: f64,
    pub risk: f64,
}

/// Risk per patch: steady symptomatic count scaled by a 100-day active
/// vector season out of the year. Refuses unconverged input.
pub fn risk_scores(ss: &SteadyState, graph: &PatchGraph) -> Result<RiskScores> {
    if !ss.converged {
        return Err(Error::NotConverged {
            residual: ss.residual,
            t: ss.t_elapsed,
        });
    }
    let entries = graph
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| RiskEntry {
            patch_id: p.id.clone(),
            i_h_steady: ss.state.i_h[i],
            risk: ss.state.i_h[i] * 100.0 / 365.0,
        })
        .collect();
    Ok(RiskScores {
        entries,
        relative: true,
    })
}

/// Patches ordered by descending risk; ties break toward the smaller id.
pub fn rank_patches(risks: &RiskScores) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = risks
        .entries
        .iter()
        .map(|e| (e.patch_id.clone(), e.risk))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked
}

/// Write `patch_id,I_h_steady,risk` rows in patch order.
pub fn save_risk_csv(path: impl AsRef<Path>, risks: &RiskScores) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    w.write_record(["patch_id", "I_h_steady", "risk"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for e in &risks.entries {
        w.write_record([
            e.patch_id.as_str(),
            &format!("{:.6}", e.i_h_steady),
            &format!("{:.6}", e.risk),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, Polygon};

    fn square(offset: f64) -> Polygon {
        Polygon::new(vec![vec![
            GeoPoint { lat: offset, lon: 0.0 },
            GeoPoint { lat: offset, lon: 1.0 },
            GeoPoint { lat: offset + 1.0, lon: 1.0 },
            GeoPoint { lat: offset + 1.0, lon: 0.0 },
        ]])
        .unwrap()
    }

    fn patch(id: &str, idx: usize, n_h: f64, n_v: f64) -> Patch {
        Patch {
            id: id.into(),
            name: id.to_uppercase(),
            geometry: square(idx as f64 * 2.0),
            human_population: n_h,
            vector_capacity: n_v,
        }
    }

    fn graph_of(patches: Vec<Patch>, entries: &[(usize, usize, f64)]) -> PatchGraph {
        let ids: Vec<String> = patches.iter().map(|p| p.id.clone()).collect();
        let mut alpha = FluxMatrix::zeros(ids);
        for &(i, j, v) in entries {
            alpha.rates[i][j] = v;
        }
        PatchGraph::new(patches, alpha).unwrap()
    }

    #[test]
    fn disease_free_equilibrium_has_zero_derivative() {
        let graph = graph_of(
            vec![patch("a", 0, 1000.0, 1500.0), patch("b", 1, 2000.0, 3000.0)],
            &[],
        );
        let state = EpiState::all_susceptible(&graph);
        let d = rhs(&state, &graph, &EpiParams::default());
        for field in d.fields() {
            assert!(field.iter().all(|&v| v == 0.0), "nonzero derivative {field:?}");
        }
    }

    #[test]
    fn incubation_splits_by_symptomatic_fraction() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 0.0)], &[]);
        let mut state = EpiState::zeros(1);
        state.e_h[0] = 100.0;
        let params = EpiParams {
            incubation_rate: 0.2,
            asymptomatic_fraction: 0.18,
            ..EpiParams::default()
        };
        let d = rhs(&state, &graph, &params);
        assert!((d.i_h[0] - 16.4).abs() < 1e-9, "I' = {}", d.i_h[0]);
        assert!((d.a_h[0] - 3.6).abs() < 1e-9, "A' = {}", d.a_h[0]);
    }

    #[test]
    fn flux_terms_cancel_over_patches() {
        let graph = graph_of(
            vec![patch("a", 0, 1000.0, 1500.0), patch("b", 1, 500.0, 700.0)],
            &[(0, 1, 3e-3), (1, 0, 7e-4)],
        );
        let mut state = EpiState::zeros(2);
        for (k, field) in state.fields_mut().into_iter().enumerate() {
            field[0] = 100.0 + 13.0 * k as f64;
            field[1] = 250.0 - 11.0 * k as f64;
        }
        let d = rhs(&state, &graph, &EpiParams::default());
        let total: f64 = d.s_h.iter().sum::<f64>()
            + d.e_h.iter().sum::<f64>()
            + d.i_h.iter().sum::<f64>()
            + d.a_h.iter().sum::<f64>()
            + d.r_h.iter().sum::<f64>();
        assert!(total.abs() < 1e-12, "human flux leaked: {total}");
    }

    #[test]
    fn step_at_equilibrium_is_identity() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 1500.0)], &[]);
        let state = EpiState::all_susceptible(&graph);
        let next = step_rk4(&state, &graph, &EpiParams::default(), 0.1).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn pure_recovery_matches_exponential_decay() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 0.0)], &[]);
        let mut state = EpiState::zeros(1);
        state.i_h[0] = 100.0;
        let params = EpiParams {
            bite_rate: 0.0,
            incubation_rate: 0.0,
            recovery_rate: 0.25,
            vector_death_rate: 0.0,
            ..EpiParams::default()
        };
        let next = step_rk4(&state, &graph, &params, 0.1).unwrap();
        let expected = 100.0 * (-0.025f64).exp();
        assert!(
            (next.i_h[0] - expected).abs() < 1e-8,
            "got {} want {expected}",
            next.i_h[0]
        );
    }

    #[test]
    fn rk4_close_to_fine_euler() {
        // Module-scale version of the integrator cross-check; the full
        // 200-day, 1e-4-step comparison lives in the acceptance suite.
        let graph = graph_of(
            vec![patch("a", 0, 1000.0, 1500.0), patch("b", 1, 800.0, 900.0)],
            &[(0, 1, 1e-3), (1, 0, 1e-3)],
        );
        let params = EpiParams::default();
        let mut init = EpiState::all_susceptible(&graph);
        init.i_v[0] = 50.0;
        init.s_v[0] -= 50.0;

        let mut rk = init.clone();
        let mut integrator = Integrator::new(&graph, &params, None);
        let horizon = 20.0;
        let mut t = 0.0;
        while t < horizon - 1e-12 {
            integrator.advance(&mut rk, 0.05, t).unwrap();
            t += 0.05;
        }

        // Hand-rolled Euler at a fine step, written against the equations
        // rather than the integrator.
        let mut euler = init.clone();
        let dt = 1e-3;
        let steps = (horizon / dt).round() as usize;
        for _ in 0..steps {
            let d = rhs(&euler, &graph, &params);
            for (f, df) in euler.fields_mut().into_iter().zip(d.fields()) {
                for i in 0..df.len() {
                    f[i] += dt * df[i];
                }
            }
        }

        for (a, b) in rk.fields().into_iter().zip(euler.fields()) {
            for i in 0..a.len() {
                let denom = b[i].abs().max(1.0);
                assert!(
                    ((a[i] - b[i]) / denom).abs() < 1e-3,
                    "divergence {} vs {}",
                    a[i],
                    b[i]
                );
            }
        }
    }

    #[test]
    fn everyone_recovers_without_vectors() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 0.0)], &[]);
        let mut init = EpiState::zeros(1);
        init.s_h[0] = 900.0;
        init.e_h[0] = 100.0;
        let opts = SteadyOptions {
            tol: 1e-9,
            t_max: 2000.0,
            ..SteadyOptions::default()
        };
        let ss = integrate_to_steady(&init, &graph, &EpiParams::default(), &opts).unwrap();
        assert!(ss.converged);
        assert!(ss.state.e_h[0] < 1e-6);
        assert!(ss.state.i_h[0] < 1e-6);
        assert!(ss.state.a_h[0] < 1e-6);
        assert!((ss.state.r_h[0] - 100.0).abs() / 100.0 < 1e-6, "R = {}", ss.state.r_h[0]);
        assert!((ss.state.s_h[0] - 900.0).abs() / 900.0 < 1e-6);
    }

    #[test]
    fn disease_free_init_converges_immediately() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 1500.0)], &[]);
        let init = EpiState::all_susceptible(&graph);
        let opts = SteadyOptions {
            t_max: 100.0,
            ..SteadyOptions::default()
        };
        let ss = integrate_to_steady(&init, &graph, &EpiParams::default(), &opts).unwrap();
        assert!(ss.converged);
        assert_eq!(ss.state, init);
        assert!(ss.t_elapsed <= opts.sustain_days + opts.dt);
    }

    #[test]
    fn integration_is_deterministic() {
        let graph = graph_of(
            vec![patch("a", 0, 1000.0, 1500.0), patch("b", 1, 800.0, 900.0)],
            &[(0, 1, 2e-3), (1, 0, 1e-3)],
        );
        let mut init = EpiState::all_susceptible(&graph);
        init.i_v[1] = 10.0;
        let opts = SteadyOptions {
            tol: 1e-8,
            t_max: 3000.0,
            ..SteadyOptions::default()
        };
        let a = integrate_to_steady(&init, &graph, &EpiParams::default(), &opts).unwrap();
        let b = integrate_to_steady(&init, &graph, &EpiParams::default(), &opts).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.t_elapsed, b.t_elapsed);
    }

    #[test]
    fn pinned_source_feeds_neighbors() {
        let graph = graph_of(
            vec![patch("src", 0, 10_000.0, 0.0), patch("dst", 1, 10_000.0, 15_000.0)],
            &[(0, 1, 1e-4), (1, 0, 1e-4)],
        );
        let params = EpiParams::default();
        let init = EpiState::all_susceptible(&graph);
        let pin = SourcePin::resolve(&graph, "src", 0.02).unwrap();
        let opts = SteadyOptions {
            tol: 1e-7,
            t_max: 60_000.0,
            pin: Some(pin),
            ..SteadyOptions::default()
        };
        let ss = integrate_to_steady(&init, &graph, &params, &opts).unwrap();
        assert!(ss.converged, "residual {} at t={}", ss.residual, ss.t_elapsed);
        // Source humans stay pinned: I = (1 - phi) * prevalence * N.
        assert!((ss.state.i_h[0] - 0.82 * 0.02 * 10_000.0).abs() < 1e-9);
        // Importation sustains infection downstream.
        assert!(ss.state.i_h[1] > 0.0, "no steady infection: {}", ss.state.i_h[1]);
    }

    #[test]
    fn extreme_rates_trip_the_stiffness_guard() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 1500.0)], &[]);
        let mut state = EpiState::all_susceptible(&graph);
        state.i_v[0] = 1500.0;
        let params = EpiParams {
            bite_rate: 1e20,
            vector_to_human: 1.0,
            ..EpiParams::default()
        };
        assert!(matches!(
            step_rk4(&state, &graph, &params, 0.1),
            Err(Error::Stiffness { .. })
        ));
    }

    #[test]
    fn risk_formula_and_refusal() {
        let graph = graph_of(vec![patch("a", 0, 1000.0, 1500.0)], &[]);
        let mut ss = SteadyState {
            state: EpiState::zeros(1),
            residual: 0.0,
            t_elapsed: 10.0,
            converged: true,
        };
        ss.state.i_h[0] = 365.0;
        let risks = risk_scores(&ss, &graph).unwrap();
        assert_eq!(risks.entries[0].risk, 100.0);
        assert!(risks.relative);

        ss.state.i_h[0] = 0.0;
        let zero = risk_scores(&ss, &graph).unwrap();
        assert_eq!(zero.entries[0].risk, 0.0);

        ss.converged = false;
        assert!(matches!(risk_scores(&ss, &graph), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let risks = RiskScores {
            entries: vec![
                RiskEntry { patch_id: "b".into(), i_h_steady: 5.0, risk: 5.0 },
                RiskEntry { patch_id: "a".into(), i_h_steady: 5.0, risk: 5.0 },
                RiskEntry { patch_id: "c".into(), i_h_steady: 9.0, risk: 9.0 },
            ],
            relative: true,
        };
        let ranked = rank_patches(&risks);
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<RiskEntry> = (0..50)
            .map(|i| {
                let risk = (rng.gen_range(0..20) as f64) * 0.5;
                RiskEntry {
                    patch_id: format!("p{i:02}"),
                    i_h_steady: risk,
                    risk,
                }
            })
            .collect();
        let risks = RiskScores { entries: entries.clone(), relative: true };
        let ranked = rank_patches(&risks);

        let mut oracle: Vec<(String, f64)> =
            entries.iter().map(|e| (e.patch_id.clone(), e.risk)).collect();
        // Insertion-sort oracle, independent of the library sort.
        for i in 1..oracle.len() {
            let mut j = i;
            while j > 0
                && (oracle[j].1 > oracle[j - 1].1
                    || (oracle[j].1 == oracle[j - 1].1 && oracle[j].0 < oracle[j - 1].0))
            {
                oracle.swap(j, j - 1);
                j -= 1;
            }
        }
        assert_eq!(ranked, oracle);
    }

    #[test]
    fn params_json_uses_rate_symbol_keys() {
        let json = r#"{"b":0.5,"beta_hv":0.5,"beta_vh":0.4,"delta":0.2,"gamma":0.25,"phi":0.18,"mu":0.0714,"pin_source":"pr","source_prevalence":0.02}"#;
        let cfg: EpiConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.params.vector_to_human, 0.4);
        assert_eq!(cfg.pin_source.as_deref(), Some("pr"));
        assert_eq!(cfg.source_prevalence, 0.02);
        let default: EpiConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(default.params, EpiParams::default());
        assert!((default.params.vector_death_rate - 1.0 / 14.0).abs() < 1e-15);
    }
}
