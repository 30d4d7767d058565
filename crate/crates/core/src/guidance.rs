//! The deterministic velocity field a wavefunction induces on configurations,
//! and trajectory integration along it.
//!
//! For a sum of product branches the velocity of dof `k` at configuration `c`
//! is
//!
//! ```text
//! v_k(c) = (hbar / m_k) * Im(N_k) / D
//! N_k = Σ_ij conj(A_i Φ_i(c)) A_j Φ_j(c) <int_i, int_j> L_jk(c)
//! D   = Σ_ij conj(A_i Φ_i(c)) A_j Φ_j(c) <int_i, int_j>
//! ```
//!
//! where `Φ_i` is branch i's packet product, `L_jk` the log-derivative of
//! branch j's packet for dof k, and `<,>` the internal inner product. The
//! internal degrees are summed over, which is what the Gram factors do.
//!
//! Branches whose packet product at `c` is negligible relative to the
//! largest one are skipped: their diagonal and cross contributions sit far
//! below double-precision resolution of the kept terms, so the sums are
//! unchanged to machine accuracy while distant branches cost nothing.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::packet::{GaussianPacket, PacketError, PhysicalParams};
use crate::spin::{InternalState, SlotId, SpinLabel};
use crate::stats::{ks_test, StatsError};
use crate::wavefunction::{
    Configuration, DofId, DofInfo, DofRegistry, DofRole, WaveFunction, WaveFunctionError,
};

/// Below this Born density the velocity field is treated as undefined.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Relative spatial weight below which a branch is dropped from the sums.
const BRANCH_SKIP_REL: f64 = 1e-60;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(
        "guiding density {density:.3e} is below the floor: the configuration \
         is outside every branch's support"
    )]
    NullRegion { density: f64 },
    #[error(
        "guiding density {density:.3e} is below the floor at t={t}, \
         positions {positions:?}"
    )]
    NullRegionAt {
        t: f64,
        density: f64,
        positions: Vec<f64>,
    },
    #[error("time step must be positive and finite, got {dt}")]
    BadTimeStep { dt: f64 },
    #[error("time interval is backwards: t0={t0}, t1={t1}")]
    BackwardsInterval { t0: f64, t1: f64 },
    #[error(transparent)]
    WaveFunction(#[from] WaveFunctionError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// A wavefunction prepared for repeated velocity evaluation: the internal
/// Gram matrix is precomputed, masses and dof order are laid out flat.
#[derive(Debug)]
pub struct VelocityContext {
    wf: Arc<WaveFunction>,
    /// `<int_i, int_j>`, row-major over branches.
    gram: Vec<Complex64>,
    hbar: f64,
    /// `(dof, mass)` in registry (ascending id) order.
    dofs: Vec<(DofId, f64)>,
}

/// Reusable buffers for velocity evaluation and stepping.
#[derive(Default)]
pub struct Scratch {
    vals: Vec<Complex64>,
    logd: Vec<Complex64>,
    prod: Vec<Complex64>,
    active: Vec<usize>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl VelocityContext {
    pub fn new(wf: Arc<WaveFunction>, params: PhysicalParams) -> Result<Self, GuidanceError> {
        let n = wf.n_branches();
        let mut gram = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = wf.branches()[i]
                    .internal
                    .inner(&wf.branches()[j].internal)
                    .map_err(WaveFunctionError::from)?;
            }
        }
        let dofs = wf.registry().dofs().iter().map(|d| (d.id, d.mass)).collect();
        Ok(VelocityContext {
            wf,
            gram,
            hbar: params.hbar,
            dofs,
        })
    }

    pub fn wavefunction(&self) -> &Arc<WaveFunction> {
        &self.wf
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// Dof ids in the order `velocities_slice` writes velocities.
    pub fn dof_ids(&self) -> impl Iterator<Item = DofId> + '_ {
        self.dofs.iter().map(|(d, _)| *d)
    }

    fn positions_slice(
        &self,
        c: &Configuration,
        out: &mut Vec<f64>,
    ) -> Result<(), GuidanceError> {
        out.clear();
        for (dof, _) in &self.dofs {
            out.push(c.require(*dof)?);
        }
        Ok(())
    }

    /// Velocities of every dof at positions `xs` (registry order), written
    /// to `out` in the same order.
    pub fn velocities_slice(
        &self,
        xs: &[f64],
        out: &mut [f64],
        scratch: &mut Scratch,
    ) -> Result<(), GuidanceError> {
        let b = self.wf.n_branches();
        let d = self.dofs.len();
        debug_assert_eq!(xs.len(), d);
        debug_assert_eq!(out.len(), d);

        scratch.vals.clear();
        scratch.logd.clear();
        scratch.prod.clear();
        for branch in self.wf.branches() {
            let mut p = branch.amplitude;
            for (pkt, &x) in branch.packets.values().zip(xs) {
                let v = pkt.evaluate(x);
                scratch.vals.push(v);
                scratch.logd.push(pkt.log_derivative(x));
                p *= v;
            }
            scratch.prod.push(p);
        }

        let max_weight = scratch
            .prod
            .iter()
            .map(|p| p.norm())
            .fold(0.0f64, f64::max);
        if max_weight == 0.0 {
            return Err(GuidanceError::NullRegion { density: 0.0 });
        }
        scratch.active.clear();
        scratch.active.extend(
            (0..b).filter(|i| scratch.prod[*i].norm() >= max_weight * BRANCH_SKIP_REL),
        );

        let mut density = 0.0;
        for &i in &scratch.active {
            for &j in &scratch.active {
                let g = self.gram[i * b + j];
                if g.norm_sqr() == 0.0 {
                    continue;
                }
                density += (scratch.prod[i].conj() * scratch.prod[j] * g).re;
            }
        }
        if !(density > DENSITY_FLOOR) {
            return Err(GuidanceError::NullRegion { density });
        }

        for (k, slot) in out.iter_mut().enumerate() {
            let mut num = Complex64::new(0.0, 0.0);
            for &i in &scratch.active {
                for &j in &scratch.active {
                    let g = self.gram[i * b + j];
                    if g.norm_sqr() == 0.0 {
                        continue;
                    }
                    num += scratch.prod[i].conj()
                        * scratch.prod[j]
                        * g
                        * scratch.logd[j * d + k];
                }
            }
            let mass = self.dofs[k].1;
            *slot = self.hbar / mass * num.im / density;
        }
        Ok(())
    }

    /// Velocity of every dof at a configuration.
    pub fn velocities(
        &self,
        c: &Configuration,
    ) -> Result<BTreeMap<DofId, f64>, GuidanceError> {
        let mut scratch = Scratch::default();
        let mut xs = Vec::new();
        self.positions_slice(c, &mut xs)?;
        let mut out = vec![0.0; self.dofs.len()];
        self.velocities_slice(&xs, &mut out, &mut scratch)?;
        Ok(self
            .dofs
            .iter()
            .map(|(d, _)| *d)
            .zip(out)
            .collect())
    }

    /// Velocity of one dof at a configuration.
    pub fn velocity(&self, c: &Configuration, dof: DofId) -> Result<f64, GuidanceError> {
        self.velocities(c)?
            .get(&dof)
            .copied()
            .ok_or(GuidanceError::WaveFunction(
                WaveFunctionError::MissingCoordinate { dof },
            ))
    }
}

/// Supplies the guiding wavefunction (as a velocity context) at any time.
pub trait FieldProvider {
    fn field_at(&self, t: f64) -> Result<Arc<VelocityContext>, GuidanceError>;
}

/// A time-independent field.
pub struct FrozenField(pub Arc<VelocityContext>);

impl FieldProvider for FrozenField {
    fn field_at(&self, _t: f64) -> Result<Arc<VelocityContext>, GuidanceError> {
        Ok(self.0.clone())
    }
}

/// Piecewise-constant field: each epoch starts at a time and holds until the
/// next. Times before the first epoch use the first epoch's field.
pub struct PiecewiseField {
    epochs: Vec<(f64, Arc<VelocityContext>)>,
}

impl PiecewiseField {
    pub fn new(mut epochs: Vec<(f64, Arc<VelocityContext>)>) -> Option<Self> {
        if epochs.is_empty() {
            return None;
        }
        epochs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Some(PiecewiseField { epochs })
    }
}

impl FieldProvider for PiecewiseField {
    fn field_at(&self, t: f64) -> Result<Arc<VelocityContext>, GuidanceError> {
        let idx = self
            .epochs
            .partition_point(|(start, _)| *start <= t)
            .saturating_sub(1);
        Ok(self.epochs[idx].1.clone())
    }
}

/// Freely evolving product state: every packet spreads and drifts under its
/// dof's mass; the internal state rides along unchanged.
pub struct FreeEvolutionField {
    pub registry: Arc<DofRegistry>,
    pub internal: InternalState,
    pub packets: BTreeMap<DofId, GaussianPacket>,
    pub params: PhysicalParams,
}

impl FieldProvider for FreeEvolutionField {
    fn field_at(&self, t: f64) -> Result<Arc<VelocityContext>, GuidanceError> {
        let mut packets = BTreeMap::new();
        for (dof, pkt) in &self.packets {
            let mass = self
                .registry
                .mass(*dof)
                .ok_or(WaveFunctionError::UnknownDof { index: 0, dof: *dof })?;
            packets.insert(*dof, pkt.free_evolve(self.params, mass, t)?);
        }
        let wf = WaveFunction::single_branch(
            self.registry.clone(),
            self.internal.clone(),
            packets,
        )?;
        Ok(Arc::new(VelocityContext::new(Arc::new(wf), self.params)?))
    }
}

fn check_interval(t0: f64, t1: f64, dt: f64) -> Result<(), GuidanceError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(GuidanceError::BadTimeStep { dt });
    }
    if t1 < t0 {
        return Err(GuidanceError::BackwardsInterval { t0, t1 });
    }
    Ok(())
}

/// One classical RK4 step of length `dt` over all dofs, sampling the field
/// at the start, midpoint and end of the step.
fn rk4_in_place(
    start: &VelocityContext,
    mid: &VelocityContext,
    end: &VelocityContext,
    xs: &mut [f64],
    dt: f64,
    scratch: &mut Scratch,
) -> Result<(), GuidanceError> {
    let d = xs.len();
    let mut k1 = std::mem::take(&mut scratch.k1);
    let mut k2 = std::mem::take(&mut scratch.k2);
    let mut k3 = std::mem::take(&mut scratch.k3);
    let mut k4 = std::mem::take(&mut scratch.k4);
    let mut tmp = std::mem::take(&mut scratch.tmp);
    k1.resize(d, 0.0);
    k2.resize(d, 0.0);
    k3.resize(d, 0.0);
    k4.resize(d, 0.0);
    tmp.resize(d, 0.0);

    let result = (|| {
        start.velocities_slice(xs, &mut k1, scratch)?;
        for i in 0..d {
            tmp[i] = xs[i] + 0.5 * dt * k1[i];
        }
        mid.velocities_slice(&tmp, &mut k2, scratch)?;
        for i in 0..d {
            tmp[i] = xs[i] + 0.5 * dt * k2[i];
        }
        mid.velocities_slice(&tmp, &mut k3, scratch)?;
        for i in 0..d {
            tmp[i] = xs[i] + dt * k3[i];
        }
        end.velocities_slice(&tmp, &mut k4, scratch)?;
        for i in 0..d {
            xs[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    })();

    scratch.k1 = k1;
    scratch.k2 = k2;
    scratch.k3 = k3;
    scratch.k4 = k4;
    scratch.tmp = tmp;
    result
}

/// One RK4 step under a frozen field.
pub fn step(
    ctx: &VelocityContext,
    c: &Configuration,
    dt: f64,
) -> Result<Configuration, GuidanceError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(GuidanceError::BadTimeStep { dt });
    }
    let mut scratch = Scratch::default();
    let mut xs = Vec::new();
    ctx.positions_slice(c, &mut xs)?;
    rk4_in_place(ctx, ctx, ctx, &mut xs, dt, &mut scratch)?;
    let mut out = c.clone();
    for ((dof, _), x) in ctx.dofs.iter().zip(&xs) {
        out.set(*dof, *x);
    }
    Ok(out)
}

fn attach_time(err: GuidanceError, t: f64, xs: &[f64]) -> GuidanceError {
    match err {
        GuidanceError::NullRegion { density } => GuidanceError::NullRegionAt {
            t,
            density,
            positions: xs.to_vec(),
        },
        other => other,
    }
}

/// Integrates a configuration from `t0` to `t1` with fixed step `dt` (the
/// final step is shortened to land exactly on `t1`).
pub fn evolve_to(
    provider: &dyn FieldProvider,
    c0: &Configuration,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Configuration, GuidanceError> {
    check_interval(t0, t1, dt)?;
    let ctx0 = provider.field_at(t0)?;
    let mut scratch = Scratch::default();
    let mut xs = Vec::new();
    ctx0.positions_slice(c0, &mut xs)?;
    integrate_slice(provider, &mut xs, t0, t1, dt, &mut scratch)?;
    let mut out = c0.clone();
    for ((dof, _), x) in ctx0.dofs.iter().zip(&xs) {
        out.set(*dof, *x);
    }
    Ok(out)
}

/// Splits `[t0, t1]` into the fewest uniform steps of length at most `dt`.
/// Returns `(n_steps, boundary)` where `boundary(i)` is exact at both ends.
fn uniform_steps(t0: f64, t1: f64, dt: f64) -> (usize, impl Fn(usize) -> f64) {
    let span = t1 - t0;
    let n = if span > 0.0 {
        (span / dt).ceil().max(1.0) as usize
    } else {
        0
    };
    (n, move |i: usize| {
        if i == 0 {
            t0
        } else if i == n {
            t1
        } else {
            t0 + span * (i as f64 / n as f64)
        }
    })
}

fn integrate_slice(
    provider: &dyn FieldProvider,
    xs: &mut [f64],
    t0: f64,
    t1: f64,
    dt: f64,
    scratch: &mut Scratch,
) -> Result<(), GuidanceError> {
    let (n, boundary) = uniform_steps(t0, t1, dt);
    for i in 0..n {
        let (ta, tb) = (boundary(i), boundary(i + 1));
        let start = provider.field_at(ta)?;
        let mid = provider.field_at(0.5 * (ta + tb))?;
        let end = provider.field_at(tb)?;
        rk4_in_place(&start, &mid, &end, xs, tb - ta, scratch)
            .map_err(|e| attach_time(e, ta, xs))?;
    }
    Ok(())
}

/// A recorded trajectory: positions of every dof at sampled times plus the
/// id of the branch steering the configuration there.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub dof_names: Vec<String>,
    pub times: Vec<f64>,
    /// One row per recorded time, positions in `dof_names` order.
    pub positions: Vec<Vec<f64>>,
    pub branch_ids: Vec<usize>,
}

impl Trajectory {
    /// CSV with header `t,<dof names...>,branch_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for name in &self.dof_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",branch_id\n");
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for x in &self.positions[i] {
                out.push_str(&format!(",{x}"));
            }
            out.push_str(&format!(",{}\n", self.branch_ids[i]));
        }
        out
    }
}

/// Like [`evolve_to`] but records every `stride`-th step (plus the first and
/// last); `n_sigma` truncates packet supports for branch identification.
pub fn evolve_recording(
    provider: &dyn FieldProvider,
    c0: &Configuration,
    t0: f64,
    t1: f64,
    dt: f64,
    n_sigma: f64,
    stride: usize,
) -> Result<Trajectory, GuidanceError> {
    check_interval(t0, t1, dt)?;
    let stride = stride.max(1);
    let ctx0 = provider.field_at(t0)?;
    let mut scratch = Scratch::default();
    let mut xs = Vec::new();
    ctx0.positions_slice(c0, &mut xs)?;

    let dof_ids: Vec<DofId> = ctx0.dof_ids().collect();
    let dof_names = dof_ids
        .iter()
        .map(|d| {
            ctx0.wf
                .registry()
                .get(*d)
                .map(|i| i.name.clone())
                .unwrap_or_else(|| d.to_string())
        })
        .collect();
    let mut traj = Trajectory {
        dof_names,
        times: Vec::new(),
        positions: Vec::new(),
        branch_ids: Vec::new(),
    };

    let config_of = |xs: &[f64]| {
        Configuration::from_pairs(dof_ids.iter().copied().zip(xs.iter().copied()))
    };
    let mut record = |t: f64, xs: &[f64]| -> Result<(), GuidanceError> {
        let ctx = provider.field_at(t)?;
        let id = ctx.wf.effective_branch_id(&config_of(xs), n_sigma)?;
        traj.times.push(t);
        traj.positions.push(xs.to_vec());
        traj.branch_ids.push(id);
        Ok(())
    };

    record(t0, &xs)?;
    let (n, boundary) = uniform_steps(t0, t1, dt);
    for i in 0..n {
        let (ta, tb) = (boundary(i), boundary(i + 1));
        let start = provider.field_at(ta)?;
        let mid = provider.field_at(0.5 * (ta + tb))?;
        let end = provider.field_at(tb)?;
        rk4_in_place(&start, &mid, &end, &mut xs, tb - ta, &mut scratch)
            .map_err(|e| attach_time(e, ta, &xs))?;
        if (i + 1) % stride == 0 || i + 1 == n {
            record(tb, &xs)?;
        }
    }
    Ok(traj)
}

/// Result of the spreading-statistics check: an ensemble of Born-sampled
/// trajectories under a freely spreading packet is tested against the
/// exactly evolved density.
#[derive(Debug, Clone, Serialize)]
pub struct EquivarianceReport {
    pub n: usize,
    pub t: f64,
    pub dt: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub expected_mean: f64,
    pub expected_variance: f64,
    /// Packet parameters at the final time.
    pub evolved: GaussianPacket,
    #[serde(skip)]
    pub final_positions: Vec<f64>,
}

/// Draws `n` initial positions from `p0`'s Born density, integrates each
/// along the guiding field of the freely evolving packet for time `t`, and
/// compares the final empirical distribution with the evolved packet's
/// density (Kolmogorov-Smirnov, plus first two moments).
///
/// All trajectories advance in lockstep so each step's three field
/// evaluations are shared across the ensemble.
pub fn equivariance_test<R: Rng + ?Sized>(
    p0: GaussianPacket,
    params: PhysicalParams,
    mass: f64,
    n: usize,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<EquivarianceReport, GuidanceError> {
    let t0 = p0.born_at;
    let t1 = t0 + t;
    check_interval(t0, t1, dt)?;
    if n == 0 {
        return Err(StatsError::Empty.into());
    }

    let registry = Arc::new(
        DofRegistry::new(vec![DofInfo {
            id: DofId(0),
            name: "x".into(),
            role: DofRole::Particle(SlotId(1)),
            mass,
        }])
        .map_err(WaveFunctionError::from)?,
    );
    let internal = InternalState::basis(&[(SlotId(1), SpinLabel::A)])
        .map_err(WaveFunctionError::from)?;
    let provider = FreeEvolutionField {
        registry,
        internal,
        packets: BTreeMap::from([(DofId(0), p0)]),
        params,
    };

    let normal = Normal::new(p0.center, p0.sigma).expect("validated sigma");
    let mut xs: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();

    let mut scratch = Scratch::default();
    let mut vel = [0.0f64; 1];
    let (n_steps, boundary) = uniform_steps(t0, t1, dt);
    for i in 0..n_steps {
        let (ta, tb) = (boundary(i), boundary(i + 1));
        let h = tb - ta;
        let start = provider.field_at(ta)?;
        let mid = provider.field_at(0.5 * (ta + tb))?;
        let end = provider.field_at(tb)?;
        for x in xs.iter_mut() {
            // Inline RK4 on the single coordinate, sharing the contexts.
            let x0 = *x;
            start.velocities_slice(&[x0], &mut vel, &mut scratch)?;
            let k1 = vel[0];
            mid.velocities_slice(&[x0 + 0.5 * h * k1], &mut vel, &mut scratch)?;
            let k2 = vel[0];
            mid.velocities_slice(&[x0 + 0.5 * h * k2], &mut vel, &mut scratch)?;
            let k3 = vel[0];
            end.velocities_slice(&[x0 + h * k3], &mut vel, &mut scratch)?;
            let k4 = vel[0];
            *x = x0 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
    }

    let evolved = p0.free_evolve(params, mass, t1)?;
    let ks = ks_test(&xs, |x| {
        crate::stats::normal_cdf(x, evolved.center, evolved.sigma)
    })?;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    Ok(EquivarianceReport {
        n,
        t,
        dt,
        ks_statistic: ks.statistic,
        p_value: ks.p_value,
        sample_mean: mean,
        sample_variance: variance,
        expected_mean: evolved.center,
        expected_variance: evolved.sigma * evolved.sigma,
        evolved,
        final_positions: xs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{bell_state, tensor, BellKind};
    use crate::wavefunction::Branch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slot(n: u8) -> SlotId {
        SlotId(n)
    }

    fn dof(n: u32) -> DofId {
        DofId(n)
    }

    const PARAMS: PhysicalParams = PhysicalParams { hbar: 1.0 };

    fn registry_1d(mass: f64) -> Arc<DofRegistry> {
        Arc::new(
            DofRegistry::new(vec![DofInfo {
                id: dof(0),
                name: "x".into(),
                role: DofRole::Particle(slot(1)),
                mass,
            }])
            .unwrap(),
        )
    }

    fn registry_2d(m0: f64, m1: f64) -> Arc<DofRegistry> {
        Arc::new(
            DofRegistry::new(vec![
                DofInfo {
                    id: dof(0),
                    name: "x1".into(),
                    role: DofRole::Particle(slot(1)),
                    mass: m0,
                },
                DofInfo {
                    id: dof(1),
                    name: "x2".into(),
                    role: DofRole::Particle(slot(2)),
                    mass: m1,
                },
            ])
            .unwrap(),
        )
    }

    fn single_packet_context(pkt: GaussianPacket, mass: f64) -> VelocityContext {
        let wf = WaveFunction::single_branch(
            registry_1d(mass),
            InternalState::basis(&[(slot(1), SpinLabel::A)]).unwrap(),
            BTreeMap::from([(dof(0), pkt)]),
        )
        .unwrap();
        VelocityContext::new(Arc::new(wf), PARAMS).unwrap()
    }

    /// v(x) for one packet: (hbar/m) (k + chi (x - c) / (2 sigma^2)).
    fn single_packet_velocity(pkt: &GaussianPacket, mass: f64, x: f64) -> f64 {
        PARAMS.hbar / mass
            * (pkt.wavenumber + pkt.chirp * (x - pkt.center) / (2.0 * pkt.sigma * pkt.sigma))
    }

    #[test]
    fn single_branch_matches_closed_form() {
        let pkt = GaussianPacket::new(0.4, 0.8)
            .unwrap()
            .with_wavenumber(1.3)
            .with_chirp(0.7);
        let ctx = single_packet_context(pkt, 1.7);
        for x in [-1.5, 0.0, 0.4, 0.9, 2.5] {
            let c = Configuration::from_pairs([(dof(0), x)]);
            let got = ctx.velocity(&c, dof(0)).unwrap();
            let want = single_packet_velocity(&pkt, 1.7, x);
            assert!((got - want).abs() < 1e-10, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn masses_divide_per_dof() {
        let p0 = GaussianPacket::new(0.0, 1.0).unwrap().with_wavenumber(2.0);
        let p1 = GaussianPacket::new(3.0, 0.5).unwrap().with_chirp(-0.4);
        let internal = bell_state(BellKind::Alpha, slot(1), slot(2), 2).unwrap();
        let wf = WaveFunction::single_branch(
            registry_2d(1.0, 4.0),
            internal,
            BTreeMap::from([(dof(0), p0), (dof(1), p1)]),
        )
        .unwrap();
        let ctx = VelocityContext::new(Arc::new(wf), PARAMS).unwrap();
        let c = Configuration::from_pairs([(dof(0), 0.3), (dof(1), 2.6)]);
        let v = ctx.velocities(&c).unwrap();
        assert!((v[&dof(0)] - single_packet_velocity(&p0, 1.0, 0.3)).abs() < 1e-12);
        assert!((v[&dof(1)] - single_packet_velocity(&p1, 4.0, 2.6)).abs() < 1e-12);
    }

    /// Dense oracle: enumerate the internal basis, evaluate the full
    /// wavefunction component-wise, differentiate numerically.
    fn dense_velocity(wf: &WaveFunction, c: &Configuration, target: DofId, mass: f64) -> f64 {
        let slots = wf.registry().particle_slots();
        let n = slots.len();
        let component = |positions: &Configuration, assignment: usize| -> Complex64 {
            let mut total = Complex64::new(0.0, 0.0);
            for branch in wf.branches() {
                let coeff = branch
                    .internal
                    .terms()
                    .iter()
                    .find(|t| {
                        t.labels
                            .iter()
                            .enumerate()
                            .all(|(k, l)| l.bit() == (assignment >> (n - 1 - k)) & 1)
                    })
                    .map(|t| t.amplitude)
                    .unwrap_or_else(|| Complex64::new(0.0, 0.0));
                if coeff.norm_sqr() == 0.0 {
                    continue;
                }
                let mut v = branch.amplitude * coeff;
                for (d, p) in &branch.packets {
                    v *= p.evaluate(positions.get(*d).unwrap());
                }
                total += v;
            }
            total
        };
        let h = 1e-6;
        let mut up = c.clone();
        up.set(target, c.get(target).unwrap() + h);
        let mut down = c.clone();
        down.set(target, c.get(target).unwrap() - h);
        let mut num = 0.0;
        let mut den = 0.0;
        for assignment in 0..(1usize << n) {
            let mid = component(c, assignment);
            let grad = (component(&up, assignment) - component(&down, assignment))
                / (2.0 * h);
            num += (mid.conj() * grad).im;
            den += mid.norm_sqr();
        }
        PARAMS.hbar / mass * num / den
    }

    #[test]
    fn interfering_branches_match_dense_oracle() {
        // Two branches sharing internal content (non-orthogonal) and
        // shifted, chirped packets: the velocity has genuine cross terms.
        let registry = registry_2d(1.0, 2.0);
        let int_a = bell_state(BellKind::Alpha, slot(1), slot(2), 2).unwrap();
        let int_b = InternalState::basis(&[
            (slot(1), SpinLabel::A),
            (slot(2), SpinLabel::B),
        ])
        .unwrap();
        let mk = |c0: f64, k0: f64, c1: f64| {
            BTreeMap::from([
                (
                    dof(0),
                    GaussianPacket::new(c0, 1.0)
                        .unwrap()
                        .with_wavenumber(k0)
                        .with_chirp(0.3),
                ),
                (dof(1), GaussianPacket::new(c1, 0.7).unwrap()),
            ])
        };
        let wf = WaveFunction::new(
            registry,
            vec![
                Branch {
                    amplitude: Complex64::new(0.8, 0.1),
                    internal: int_a,
                    packets: mk(-0.4, 0.6, 0.2),
                },
                Branch {
                    amplitude: Complex64::new(0.0, -0.55),
                    internal: int_b,
                    packets: mk(0.5, -0.2, -0.1),
                },
            ],
        )
        .unwrap();
        let ctx = VelocityContext::new(Arc::new(wf.clone()), PARAMS).unwrap();
        for (x0, x1) in [(0.0, 0.0), (0.3, -0.2), (-0.7, 0.4)] {
            let c = Configuration::from_pairs([(dof(0), x0), (dof(1), x1)]);
            let v = ctx.velocities(&c).unwrap();
            for (d, mass) in [(dof(0), 1.0), (dof(1), 2.0)] {
                let want = dense_velocity(&wf, &c, d, mass);
                let got = v[&d];
                assert!(
                    (got - want).abs() < 1e-6 * want.abs().max(1.0),
                    "dof {d}: {got} vs {want}"
                );
            }
        }
    }

    /// Branches far apart in configuration space: the full-state field and
    /// the locally supporting branch's field agree to high accuracy.
    #[test]
    fn effective_locality() {
        let registry = registry_2d(1.0, 1.0);
        let int_a = bell_state(BellKind::Alpha, slot(1), slot(2), 2).unwrap();
        let int_b = bell_state(BellKind::Beta, slot(1), slot(2), 2).unwrap();
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        let mk = |c1: f64| {
            BTreeMap::from([
                (
                    dof(0),
                    GaussianPacket::new(0.0, 1.0)
                        .unwrap()
                        .with_chirp(0.5)
                        .with_wavenumber(0.3),
                ),
                (dof(1), GaussianPacket::new(c1, 1.0).unwrap().with_chirp(-0.2)),
            ])
        };
        let wf = WaveFunction::new(
            registry,
            vec![
                Branch {
                    amplitude: Complex64::new(inv, 0.0),
                    internal: int_a,
                    packets: mk(25.0),
                },
                Branch {
                    amplitude: Complex64::new(0.0, inv),
                    internal: int_b,
                    packets: mk(-25.0),
                },
            ],
        )
        .unwrap();
        let c = Configuration::from_pairs([(dof(0), 0.4), (dof(1), 24.3)]);
        let full = VelocityContext::new(Arc::new(wf.clone()), PARAMS).unwrap();
        let eff_wf = wf.effective(&c, 5.0).unwrap();
        assert_eq!(eff_wf.n_branches(), 1);
        let eff = VelocityContext::new(Arc::new(eff_wf), PARAMS).unwrap();
        let v_full = full.velocities(&c).unwrap();
        let v_eff = eff.velocities(&c).unwrap();
        for d in [dof(0), dof(1)] {
            assert!(
                (v_full[&d] - v_eff[&d]).abs() < 1e-10,
                "dof {d}: {} vs {}",
                v_full[&d],
                v_eff[&d]
            );
        }
    }

    /// Orthogonal internals with identical packets: cross terms cancel via
    /// the Gram matrix, so the field equals the shared single-packet field.
    #[test]
    fn orthogonal_internal_cross_terms_cancel() {
        let registry = registry_2d(1.0, 1.0);
        let packets = BTreeMap::from([
            (
                dof(0),
                GaussianPacket::new(0.2, 1.1).unwrap().with_chirp(0.4),
            ),
            (
                dof(1),
                GaussianPacket::new(-0.3, 0.9)
                    .unwrap()
                    .with_wavenumber(0.8),
            ),
        ]);
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        let wf = WaveFunction::new(
            registry,
            vec![
                Branch {
                    amplitude: Complex64::new(inv, 0.0),
                    internal: bell_state(BellKind::Alpha, slot(1), slot(2), 2).unwrap(),
                    packets: packets.clone(),
                },
                Branch {
                    amplitude: Complex64::new(-inv, 0.0),
                    internal: bell_state(BellKind::Delta, slot(1), slot(2), 2).unwrap(),
                    packets: packets.clone(),
                },
            ],
        )
        .unwrap();
        let ctx = VelocityContext::new(Arc::new(wf), PARAMS).unwrap();
        let c = Configuration::from_pairs([(dof(0), 0.5), (dof(1), 0.1)]);
        let v = ctx.velocities(&c).unwrap();
        let want0 = single_packet_velocity(&packets[&dof(0)], 1.0, 0.5);
        let want1 = single_packet_velocity(&packets[&dof(1)], 1.0, 0.1);
        assert!((v[&dof(0)] - want0).abs() < 1e-12);
        assert!((v[&dof(1)] - want1).abs() < 1e-12);
    }

    #[test]
    fn null_region_is_an_error() {
        let pkt = GaussianPacket::new(0.0, 1.0).unwrap();
        let ctx = single_packet_context(pkt, 1.0);
        let c = Configuration::from_pairs([(dof(0), 60.0)]);
        assert!(matches!(
            ctx.velocity(&c, dof(0)),
            Err(GuidanceError::NullRegion { .. })
        ));
    }

    #[test]
    fn step_rejects_bad_dt() {
        let ctx = single_packet_context(GaussianPacket::new(0.0, 1.0).unwrap(), 1.0);
        let c = Configuration::from_pairs([(dof(0), 0.0)]);
        assert!(matches!(
            step(&ctx, &c, 0.0),
            Err(GuidanceError::BadTimeStep { .. })
        ));
        assert!(matches!(
            step(&ctx, &c, -0.1),
            Err(GuidanceError::BadTimeStep { .. })
        ));
        assert!(matches!(
            evolve_to(
                &FrozenField(Arc::new(single_packet_context(
                    GaussianPacket::new(0.0, 1.0).unwrap(),
                    1.0
                ))),
                &c,
                1.0,
                0.5,
                0.1
            ),
            Err(GuidanceError::BackwardsInterval { .. })
        ));
    }

    /// Under free spreading from a chirp-free packet, trajectories follow
    /// the exact scaling law x(t) = x0 sigma(t) / sigma0.
    #[test]
    fn trajectories_follow_the_scaling_solution() {
        let p0 = GaussianPacket::new(0.0, 1.0).unwrap();
        let provider = FreeEvolutionField {
            registry: registry_1d(1.0),
            internal: InternalState::basis(&[(slot(1), SpinLabel::A)]).unwrap(),
            packets: BTreeMap::from([(dof(0), p0)]),
            params: PARAMS,
        };
        let t1 = 2.0 * 3.0f64.sqrt(); // theta = sqrt(3): width doubles
        for (dt, tol) in [(0.02, 1e-4), (0.002, 1e-8)] {
            for x0 in [0.7, -1.3] {
                let c0 = Configuration::from_pairs([(dof(0), x0)]);
                let c1 = evolve_to(&provider, &c0, 0.0, t1, dt).unwrap();
                let sigma_t = p0.free_evolve(PARAMS, 1.0, t1).unwrap().sigma;
                let want = x0 * sigma_t / p0.sigma;
                let got = c1.get(dof(0)).unwrap();
                assert!(
                    (got - want).abs() < tol * want.abs(),
                    "dt={dt}, x0={x0}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn recording_and_csv() {
        let pkt = GaussianPacket::new(0.0, 1.0).unwrap().with_chirp(0.2);
        let ctx = Arc::new(single_packet_context(pkt, 1.0));
        let provider = FrozenField(ctx);
        let c0 = Configuration::from_pairs([(dof(0), 0.5)]);
        let traj = evolve_recording(&provider, &c0, 0.0, 1.0, 0.1, 5.0, 2).unwrap();
        // Records at t=0 and after steps 2, 4, 6, 8, 10.
        assert_eq!(traj.times.len(), 6);
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        assert!(traj.branch_ids.iter().all(|&b| b == 0));
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x,branch_id");
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0.5,"));
    }

    #[test]
    fn integration_is_deterministic() {
        let pkt = GaussianPacket::new(0.3, 0.9)
            .unwrap()
            .with_chirp(0.4)
            .with_wavenumber(-0.3);
        let provider = FreeEvolutionField {
            registry: registry_1d(1.3),
            internal: InternalState::basis(&[(slot(1), SpinLabel::A)]).unwrap(),
            packets: BTreeMap::from([(dof(0), pkt)]),
            params: PARAMS,
        };
        let c0 = Configuration::from_pairs([(dof(0), -0.2)]);
        let a = evolve_to(&provider, &c0, 0.0, 2.0, 0.01).unwrap();
        let b = evolve_to(&provider, &c0, 0.0, 2.0, 0.01).unwrap();
        assert_eq!(a.get(dof(0)).unwrap().to_bits(), b.get(dof(0)).unwrap().to_bits());
    }

    #[test]
    fn equivariance_smoke() {
        let p0 = GaussianPacket::new(0.0, 1.0).unwrap();
        let t = 2.0 * 3.0f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report =
            equivariance_test(p0, PARAMS, 1.0, 2000, t, t / 256.0, &mut rng).unwrap();
        assert!(report.p_value > 0.001, "p = {}", report.p_value);
        let expected = report.expected_variance;
        assert!(
            (report.sample_variance - expected).abs() < 0.1 * expected,
            "variance {} vs {}",
            report.sample_variance,
            expected
        );
        assert_eq!(report.final_positions.len(), 2000);
        // Width doubled, so the variance quadrupled.
        assert!((expected - 4.0).abs() < 1e-10);
    }

    #[test]
    fn piecewise_field_picks_epochs() {
        let ctx_a = Arc::new(single_packet_context(
            GaussianPacket::new(0.0, 1.0).unwrap().with_wavenumber(1.0),
            1.0,
        ));
        let ctx_b = Arc::new(single_packet_context(
            GaussianPacket::new(0.0, 1.0).unwrap().with_wavenumber(-1.0),
            1.0,
        ));
        let field = PiecewiseField::new(vec![(0.0, ctx_a), (1.0, ctx_b)]).unwrap();
        let c = Configuration::from_pairs([(dof(0), 0.0)]);
        assert!(field.field_at(0.5).unwrap().velocity(&c, dof(0)).unwrap() > 0.0);
        assert!(field.field_at(1.5).unwrap().velocity(&c, dof(0)).unwrap() < 0.0);
        // Before the first epoch: first field.
        assert!(field.field_at(-0.5).unwrap().velocity(&c, dof(0)).unwrap() > 0.0);
    }

    /// The swap-protocol shape: four orthogonal branches, pointer packets
    /// disjoint. The velocity at a configuration inside one pointer support
    /// is exactly that branch's single-packet field.
    #[test]
    fn four_branch_velocity_is_branch_local() {
        let registry = Arc::new(
            DofRegistry::new(
                (1..=4)
                    .map(|i| DofInfo {
                        id: dof(i - 1),
                        name: format!("x{i}"),
                        role: DofRole::Particle(slot(i as u8)),
                        mass: 1.0,
                    })
                    .chain(std::iter::once(DofInfo {
                        id: dof(4),
                        name: "pointer".into(),
                        role: DofRole::Pointer,
                        mass: 1.0,
                    }))
                    .collect(),
            )
            .unwrap(),
        );
        let kinds = [
            (BellKind::Alpha, 10.0, 0.5),
            (BellKind::Beta, 20.0, -0.5),
            (BellKind::Gamma, 30.0, 0.5),
            (BellKind::Delta, 40.0, -0.5),
        ];
        let pointer_pkt =
            |ctr: f64| GaussianPacket::new(ctr, 0.25).unwrap().with_chirp(0.6);
        let branches: Vec<Branch> = kinds
            .iter()
            .map(|(kind, ctr, amp)| {
                let internal = tensor(&[
                    bell_state(*kind, slot(1), slot(3), 4).unwrap(),
                    bell_state(*kind, slot(2), slot(4), 4).unwrap(),
                ])
                .unwrap();
                let mut packets = BTreeMap::new();
                for d in 0..4 {
                    packets.insert(dof(d), GaussianPacket::new(0.0, 1.0).unwrap());
                }
                packets.insert(dof(4), pointer_pkt(*ctr));
                Branch {
                    amplitude: Complex64::new(*amp, 0.0),
                    internal,
                    packets,
                }
            })
            .collect();
        let wf = WaveFunction::new(registry, branches).unwrap();
        let ctx = VelocityContext::new(Arc::new(wf), PARAMS).unwrap();
        let c = Configuration::from_pairs([
            (dof(0), 0.1),
            (dof(1), -0.2),
            (dof(2), 0.3),
            (dof(3), 0.0),
            (dof(4), 30.2),
        ]);
        let v = ctx.velocities(&c).unwrap();
        let want = single_packet_velocity(&pointer_pkt(30.0), 1.0, 30.2);
        assert!((v[&dof(4)] - want).abs() < 1e-12);
    }
}
