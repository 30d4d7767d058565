//! The four-particle exchange experiment end to end.
//!
//! Two Bell pairs (slots 1,2 and 3,4) start in a product of pair states; a
//! joint Bell measurement of slots 1 and 3 at t=1 entangles 2 and 4, whose
//! spins are then measured in sequence. A scenario is the full recipe —
//! registry, initial state, device schedule, step size, seeds — and a run is
//! one Born-sampled configuration carried through it: integrate between
//! events, rewrite + re-draw at each event, read outcomes from positions.
//!
//! Packets are frozen between events: rewritten packets are outcome labels,
//! not spreading wavefunctions, so the inter-event velocity field is static
//! (and identically zero in the default zero-wavenumber geometry). The
//! drift variant gives the particle packets a small wavenumber and chirp so
//! ensemble runs exercise real integration.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::devices::{
    resolve_positions_after_event, BranchRewrite, DeviceError, DeviceEvent, OutcomeMap,
};
use crate::guidance::{
    evolve_recording, evolve_to, FrozenField, GuidanceError, Trajectory, VelocityContext,
};
use crate::packet::{GaussianPacket, PacketError, PhysicalParams};
use crate::spin::{
    accumulate_reduced_outer, bell_state, density_from_parts, is_entangled, tensor, BellKind,
    DensityMatrix, InternalState, SlotId, SpinError, SpinLabel,
};
use crate::stats::{binomial_radius, chi_square_independence_2x2, StatsError};
use crate::wavefunction::{
    Configuration, DofId, DofInfo, DofRegistry, DofRole, WaveFunction, WaveFunctionError,
};

pub const BELL_LABELS: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
pub const SPIN_LABELS: [&str; 2] = ["a", "b"];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("event times must be finite, strictly increasing, and inside (0, t_end]")]
    BadSchedule,
    #[error("ensemble needs at least one run")]
    NoRuns,
    #[error("run {run} (seed {seed}): {source}")]
    Run {
        run: usize,
        seed: u64,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error("scenario structure: {detail}")]
    Structure { detail: String },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    WaveFunction(#[from] WaveFunctionError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Everything needed to reproduce an ensemble: physical setup, device
/// schedule, run count and seeding, numerical knobs.
#[derive(Debug, Clone)]
pub struct ExchangeScenario {
    pub registry: Arc<DofRegistry>,
    pub params: PhysicalParams,
    pub initial_internal: InternalState,
    pub initial_packets: BTreeMap<DofId, GaussianPacket>,
    pub events: Vec<DeviceEvent>,
    pub t_end: f64,
    pub n_runs: usize,
    pub base_seed: u64,
    /// Support window for disjointness, effective-branch selection, and
    /// trajectory branch ids.
    pub n_sigma: f64,
    /// Wider window used only to classify readout positions. Keeps readout
    /// infallible at the tail positions Born sampling actually produces
    /// (a 5-sigma window fails once per ~10⁶ draws; 10 sigma never at any
    /// feasible ensemble size) while the dead zones between packets stay
    /// wide, so the ambiguous-readout error remains reachable.
    pub readout_n_sigma: f64,
    pub dt: f64,
    /// Runs with index below this record a thinned trajectory.
    pub trajectory_runs: usize,
    /// Record every this-many integration steps (plus epoch boundaries).
    pub trajectory_stride: usize,
}

/// One completed run: outcome labels, the event log, and final positions.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Readout of the first Bell analyzer in the schedule.
    pub bell: Option<String>,
    /// Readout of the first spin splitter in the schedule.
    pub spin2: Option<String>,
    /// Readout of the second spin splitter in the schedule.
    pub spin4: Option<String>,
    pub events: Vec<EventRecord>,
    pub final_positions: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
}

/// What happened at one device firing: positions immediately after the
/// moved dofs were re-drawn, and the readout if the event has one.
#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub t: f64,
    pub device: String,
    pub outcome: Option<String>,
    pub positions: BTreeMap<String, f64>,
}

/// 2x2 outcome table of the two spin readouts, `a` row/column first.
#[derive(Debug, Clone, Serialize)]
pub struct JointSpinTable {
    pub n: u64,
    pub counts: [[u64; 2]; 2],
    /// Normalized within the table (sums to 1 when n > 0).
    pub frequencies: [[f64; 2]; 2],
    pub spin2_a_frequency: f64,
    pub spin4_a_frequency: f64,
    /// Mean of the product with a = +1, b = -1: -1 for perfect
    /// anticorrelation, +1 for perfect correlation, 0 for independence.
    pub product_mean: f64,
    /// Pearson correlation of the +/-1-coded outcomes; absent when either
    /// marginal is constant.
    pub pearson: Option<f64>,
}

impl JointSpinTable {
    fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        let n: u64 = counts.iter().flatten().sum();
        let nf = n as f64;
        let mut frequencies = [[0.0; 2]; 2];
        if n > 0 {
            for (i, row) in counts.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    frequencies[i][j] = *c as f64 / nf;
                }
            }
        }
        let p2a = frequencies[0][0] + frequencies[0][1];
        let p4a = frequencies[0][0] + frequencies[1][0];
        let product_mean =
            frequencies[0][0] + frequencies[1][1] - frequencies[0][1] - frequencies[1][0];
        let (m2, m4) = (2.0 * p2a - 1.0, 2.0 * p4a - 1.0);
        let (v2, v4) = (1.0 - m2 * m2, 1.0 - m4 * m4);
        let pearson = if n > 0 && v2 > 0.0 && v4 > 0.0 {
            Some((product_mean - m2 * m4) / (v2 * v4).sqrt())
        } else {
            None
        };
        JointSpinTable {
            n,
            counts,
            frequencies,
            spin2_a_frequency: p2a,
            spin4_a_frequency: p4a,
            product_mean,
            pearson,
        }
    }
}

/// Ensemble summary: outcome frequencies with confidence radii, per-outcome
/// spin tables, and exact-correlation violation counts.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub n_runs: usize,
    pub bell_counts: BTreeMap<String, u64>,
    pub bell_frequencies: BTreeMap<String, f64>,
    /// 3-sigma binomial radius around 1/4 at this ensemble size.
    pub bell_radius_3sigma: f64,
    /// 3-sigma binomial radius around 1/2 at each table's size.
    pub spin_radius_3sigma: BTreeMap<String, f64>,
    pub joint_by_bell: BTreeMap<String, JointSpinTable>,
    /// Runs with an anticorrelated Bell outcome (alpha, beta) whose spins
    /// came out equal.
    pub anticorrelation_violations: u64,
    /// Runs with a correlated Bell outcome (gamma, delta) whose spins came
    /// out different.
    pub correlation_violations: u64,
}

/// Aggregates run records into a [`StatsReport`].
pub fn aggregate(records: &[RunRecord]) -> StatsReport {
    let n = records.len();
    let mut bell_counts: BTreeMap<String, u64> =
        BELL_LABELS.iter().map(|l| (l.to_string(), 0)).collect();
    let mut tables: BTreeMap<String, [[u64; 2]; 2]> = BTreeMap::new();
    let mut anti_violations = 0;
    let mut corr_violations = 0;

    let spin_index = |label: &str| SPIN_LABELS.iter().position(|l| *l == label);
    for r in records {
        let Some(bell) = &r.bell else { continue };
        *bell_counts.entry(bell.clone()).or_insert(0) += 1;
        let (Some(s2), Some(s4)) = (&r.spin2, &r.spin4) else {
            continue;
        };
        if let (Some(i), Some(j)) = (spin_index(s2), spin_index(s4)) {
            tables.entry(bell.clone()).or_insert([[0; 2]; 2])[i][j] += 1;
        }
        match bell.as_str() {
            "alpha" | "beta" if s2 == s4 => anti_violations += 1,
            "gamma" | "delta" if s2 != s4 => corr_violations += 1,
            _ => {}
        }
    }

    let bell_frequencies = bell_counts
        .iter()
        .map(|(l, c)| (l.clone(), if n > 0 { *c as f64 / n as f64 } else { 0.0 }))
        .collect();
    let joint_by_bell: BTreeMap<String, JointSpinTable> = tables
        .into_iter()
        .map(|(l, t)| (l, JointSpinTable::from_counts(t)))
        .collect();
    let spin_radius_3sigma = joint_by_bell
        .iter()
        .map(|(l, t)| (l.clone(), binomial_radius(0.5, t.n as usize)))
        .collect();
    StatsReport {
        n_runs: n,
        bell_counts,
        bell_frequencies,
        bell_radius_3sigma: binomial_radius(0.25, n),
        spin_radius_3sigma,
        joint_by_bell,
        anticorrelation_violations: anti_violations,
        correlation_violations: corr_violations,
    }
}

/// Per-run seed: splitmix64-style avalanche of the base seed and the run
/// index, so consecutive runs get statistically independent streams and the
/// mapping is documented and stable.
pub fn child_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Registry of the standard setup: particle dofs x1..x4 carrying slots 1..4
/// (ids 0..3) and one pointer dof (id 4), unit masses.
pub fn standard_registry() -> Arc<DofRegistry> {
    let mut dofs: Vec<DofInfo> = (1u32..=4)
        .map(|i| DofInfo {
            id: DofId(i - 1),
            name: format!("x{i}"),
            role: DofRole::Particle(SlotId(i as u8)),
            mass: 1.0,
        })
        .collect();
    dofs.push(DofInfo {
        id: DofId(4),
        name: "pointer".into(),
        role: DofRole::Pointer,
        mass: 1.0,
    });
    Arc::new(DofRegistry::new(dofs).expect("standard registry is valid"))
}

pub const POINTER_SIGMA: f64 = 0.25;
pub const PARTICLE_SIGMA: f64 = 1.0;
pub const POINTER_OUTPUT_CENTERS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];
pub const DUSTBIN_CENTER: f64 = -30.0;
pub const SPIN_OUT_CENTERS: [f64; 2] = [-25.0, 25.0];

fn standard_scenario(drift: bool, recombine: bool) -> ExchangeScenario {
    let registry = standard_registry();
    let particle = |center: f64| {
        let p = GaussianPacket::new(center, PARTICLE_SIGMA).expect("valid packet");
        if drift {
            // Chirp makes the velocity position-dependent, so step size
            // genuinely matters; it is kept small because frozen chirped
            // packets push tails outward (rate chirp/(2 sigma^2) per unit
            // time) and a plausible Born draw must stay inside the support
            // window for the whole inter-event stretch.
            p.with_wavenumber(0.05).with_chirp(0.1)
        } else {
            p
        }
    };
    let pointer_packet =
        |center: f64| GaussianPacket::new(center, POINTER_SIGMA).expect("valid packet");

    let initial_internal = tensor(&[
        bell_state(BellKind::Alpha, SlotId(1), SlotId(2), 4).expect("valid pair"),
        bell_state(BellKind::Alpha, SlotId(3), SlotId(4), 4).expect("valid pair"),
    ])
    .expect("disjoint pairs");
    let mut initial_packets = BTreeMap::new();
    for d in 0..4 {
        initial_packets.insert(DofId(d), particle(0.0));
    }
    initial_packets.insert(DofId(4), pointer_packet(0.0));

    let n_sigma = 5.0;
    let ready = pointer_packet(0.0);
    let outputs = POINTER_OUTPUT_CENTERS.map(pointer_packet);
    let dustbin = GaussianPacket::new(DUSTBIN_CENTER, PARTICLE_SIGMA).expect("valid packet");
    let bell = BranchRewrite::bell_analyzer(
        "bell",
        (SlotId(1), SlotId(3)),
        (DofId(0), DofId(2)),
        DofId(4),
        outputs,
        (dustbin, dustbin),
        ready,
        n_sigma,
    )
    .expect("standard pointer geometry is disjoint");
    let bell_readout = OutcomeMap {
        device: "bell".into(),
        dof: DofId(4),
        outcomes: outputs
            .into_iter()
            .zip(BELL_LABELS)
            .map(|(p, l)| (p, l.to_string()))
            .collect(),
    };
    let spin_splitter = |name: &str, slot: u8, dof: u32| {
        let out_a = particle(SPIN_OUT_CENTERS[0]);
        let out_b = particle(SPIN_OUT_CENTERS[1]);
        let rewrite = BranchRewrite::stern_gerlach(
            name,
            SlotId(slot),
            DofId(dof),
            out_a,
            out_b,
            n_sigma,
        )
        .expect("standard spin outputs are disjoint");
        let readout = OutcomeMap {
            device: name.into(),
            dof: DofId(dof),
            outcomes: vec![
                (out_a, SPIN_LABELS[0].to_string()),
                (out_b, SPIN_LABELS[1].to_string()),
            ],
        };
        (rewrite, readout)
    };

    let mut events = vec![DeviceEvent {
        time: 1.0,
        rewrite: bell,
        readout: Some(bell_readout),
    }];
    let mut next_time = 2.0;
    if recombine {
        events.push(DeviceEvent {
            time: next_time,
            rewrite: BranchRewrite::pointer_recombiner("recombine", DofId(4), outputs, ready)
                .expect("recombiner construction is total"),
            readout: None,
        });
        next_time += 1.0;
    }
    let (sg2, sg2_read) = spin_splitter("sg2", 2, 1);
    events.push(DeviceEvent {
        time: next_time,
        rewrite: sg2,
        readout: Some(sg2_read),
    });
    let (sg4, sg4_read) = spin_splitter("sg4", 4, 3);
    events.push(DeviceEvent {
        time: next_time + 1.0,
        rewrite: sg4,
        readout: Some(sg4_read),
    });
    let t_end = next_time + 1.5;

    ExchangeScenario {
        registry,
        params: PhysicalParams::default(),
        initial_internal,
        initial_packets,
        events,
        t_end,
        n_runs: 10_000,
        base_seed: 42,
        n_sigma,
        readout_n_sigma: 10.0,
        dt: 0.02,
        trajectory_runs: 0,
        trajectory_stride: 5,
    }
}

/// The standard exchange run: Bell measurement of slots (1,3) at t=1, spin
/// measurements of slots 2 and 4 at t=2 and t=3. Zero-wavenumber packets,
/// so the inter-event velocity field vanishes identically.
pub fn default_exchange() -> ExchangeScenario {
    standard_scenario(false, false)
}

/// Same schedule, but every particle packet carries wavenumber 0.05 and
/// chirp 0.1 so positions genuinely move between events.
pub fn drift_exchange() -> ExchangeScenario {
    standard_scenario(true, false)
}

/// Bell measurement at t=1, pointer recombination at t=2, then the two spin
/// measurements at t=3 and t=4.
pub fn recombine_exchange() -> ExchangeScenario {
    standard_scenario(false, true)
}

/// A validated scenario with every post-event wavefunction and velocity
/// context precomputed. Rewrites are configuration-independent, so the
/// state timeline is shared by all runs; only positions differ per run.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    scenario: ExchangeScenario,
    /// `states[k]` holds between events k-1 and k (`states[0]` is initial).
    states: Vec<Arc<WaveFunction>>,
    contexts: Vec<Arc<VelocityContext>>,
    moved: Vec<BTreeSet<DofId>>,
}

impl ExchangeScenario {
    pub fn initial_state(&self) -> Result<WaveFunction, ProtocolError> {
        Ok(WaveFunction::single_branch(
            self.registry.clone(),
            self.initial_internal.clone(),
            self.initial_packets.clone(),
        )?)
    }

    pub fn prepare(&self) -> Result<PreparedScenario, ProtocolError> {
        let mut last = 0.0;
        for ev in &self.events {
            if !(ev.time.is_finite() && ev.time > last && ev.time <= self.t_end) {
                return Err(ProtocolError::BadSchedule);
            }
            last = ev.time;
        }
        let mut states = vec![Arc::new(self.initial_state()?)];
        let mut moved = Vec::new();
        for ev in &self.events {
            let next = ev.rewrite.apply(states.last().expect("nonempty"))?;
            states.push(Arc::new(next));
            moved.push(ev.rewrite.touched_dofs().into_iter().collect());
        }
        let contexts = states
            .iter()
            .map(|s| Ok(Arc::new(VelocityContext::new(s.clone(), self.params)?)))
            .collect::<Result<_, GuidanceError>>()?;
        Ok(PreparedScenario {
            scenario: self.clone(),
            states,
            contexts,
            moved,
        })
    }
}

/// Positions keyed by dof name, for human-readable outputs.
pub fn named_positions(registry: &DofRegistry, c: &Configuration) -> BTreeMap<String, f64> {
    registry
        .dofs()
        .iter()
        .filter_map(|d| c.get(d.id).map(|x| (d.name.clone(), x)))
        .collect()
}

/// Inverse of [`named_positions`]; `None` if a name is not in the registry.
pub fn configuration_from_names(
    registry: &DofRegistry,
    named: &BTreeMap<String, f64>,
) -> Option<Configuration> {
    let mut pairs = Vec::new();
    for (name, x) in named {
        pairs.push((registry.by_name(name)?.id, *x));
    }
    Some(Configuration::from_pairs(pairs))
}

impl PreparedScenario {
    pub fn scenario(&self) -> &ExchangeScenario {
        &self.scenario
    }

    /// State timeline: entry k holds between events k-1 and k.
    pub fn states(&self) -> &[Arc<WaveFunction>] {
        &self.states
    }

    /// The state right after the named device fired.
    pub fn state_after(&self, device: &str) -> Option<&Arc<WaveFunction>> {
        let idx = self
            .scenario
            .events
            .iter()
            .position(|e| e.rewrite.name() == device)?;
        Some(&self.states[idx + 1])
    }

    pub fn context(&self, epoch: usize) -> &Arc<VelocityContext> {
        &self.contexts[epoch]
    }

    pub fn run_once(&self, run: usize) -> Result<RunRecord, ProtocolError> {
        let seed = child_seed(self.scenario.base_seed, run as u64);
        self.run_impl(run, seed, run < self.scenario.trajectory_runs)
            .map_err(|source| ProtocolError::Run {
                run,
                seed,
                source: Box::new(source),
            })
    }

    fn run_impl(&self, run: usize, seed: u64, record: bool) -> Result<RunRecord, ProtocolError> {
        let s = &self.scenario;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = self.states[0].sample_configuration(&mut rng)?;
        let mut trajectory: Option<Trajectory> = None;
        let mut bell = None;
        let mut spins: Vec<String> = Vec::new();
        let mut events_out = Vec::new();
        let mut t_prev = 0.0;

        let advance = |c: &Configuration,
                           epoch: usize,
                           t0: f64,
                           t1: f64,
                           trajectory: &mut Option<Trajectory>|
         -> Result<Configuration, ProtocolError> {
            let field = FrozenField(self.contexts[epoch].clone());
            if record {
                let seg = evolve_recording(
                    &field,
                    c,
                    t0,
                    t1,
                    s.dt,
                    s.n_sigma,
                    s.trajectory_stride,
                )?;
                let last = seg.positions.last().expect("records start point");
                let out = Configuration::from_pairs(
                    self.contexts[epoch]
                        .dof_ids()
                        .zip(last.iter().copied()),
                );
                match trajectory {
                    None => *trajectory = Some(seg),
                    Some(t) => {
                        t.times.extend(seg.times);
                        t.positions.extend(seg.positions);
                        t.branch_ids.extend(seg.branch_ids);
                    }
                }
                Ok(out)
            } else {
                Ok(evolve_to(&field, c, t0, t1, s.dt)?)
            }
        };

        for (k, ev) in s.events.iter().enumerate() {
            c = advance(&c, k, t_prev, ev.time, &mut trajectory)?;
            c = resolve_positions_after_event(
                &self.states[k + 1],
                &c,
                &self.moved[k],
                ev.rewrite.name(),
                &mut rng,
            )?;
            let outcome = match &ev.readout {
                Some(map) => Some(map.read(&c, s.readout_n_sigma)?),
                None => None,
            };
            if let Some(label) = &outcome {
                match ev.rewrite.kind_name() {
                    "bell_analyzer" if bell.is_none() => bell = Some(label.clone()),
                    "stern_gerlach" => spins.push(label.clone()),
                    _ => {}
                }
            }
            events_out.push(EventRecord {
                t: ev.time,
                device: ev.rewrite.name().to_string(),
                outcome,
                positions: named_positions(&s.registry, &c),
            });
            t_prev = ev.time;
        }
        c = advance(&c, s.events.len(), t_prev, s.t_end, &mut trajectory)?;

        let mut spins = spins.into_iter();
        Ok(RunRecord {
            run,
            seed,
            bell,
            spin2: spins.next(),
            spin4: spins.next(),
            events: events_out,
            final_positions: named_positions(&s.registry, &c),
            trajectory,
        })
    }

    /// Runs the whole ensemble (in parallel, deterministically ordered) and
    /// aggregates the statistics. Fails fast on the first failing run.
    pub fn run_ensemble(&self) -> Result<(Vec<RunRecord>, StatsReport), ProtocolError> {
        let n = self.scenario.n_runs;
        if n == 0 {
            return Err(ProtocolError::NoRuns);
        }
        let records: Vec<RunRecord> = (0..n)
            .into_par_iter()
            .map(|i| self.run_once(i))
            .collect::<Result<_, _>>()?;
        let report = aggregate(&records);
        Ok((records, report))
    }
}

/// Reduced density matrix of the kept internal slots from a full
/// wavefunction: spatial dofs and the remaining slots are traced out, with
/// branch cross terms weighted by the products of packet overlaps.
pub fn wavefunction_reduced_density(
    wf: &WaveFunction,
    keep: &[SlotId],
) -> Result<DensityMatrix, ProtocolError> {
    if keep.is_empty() {
        return Err(SpinError::EmptyKeep.into());
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort();
    keep_sorted.dedup();
    let dim = 1usize << keep_sorted.len();
    let mut mat = DMatrix::<Complex64>::zeros(dim, dim);
    let branches = wf.branches();
    for (i, bi) in branches.iter().enumerate() {
        for (j, bj) in branches.iter().enumerate() {
            let mut weight = bi.amplitude * bj.amplitude.conj();
            if i != j {
                for (dof, pi) in &bi.packets {
                    // <spatial_j | spatial_i> factor for Tr |b_i><b_j|
                    weight *= bj.packets[dof].overlap(pi);
                }
            }
            if weight.norm() > 0.0 {
                accumulate_reduced_outer(&mut mat, weight, &bi.internal, &bj.internal, &keep_sorted)?;
            }
        }
    }
    Ok(density_from_parts(keep_sorted, mat))
}

/// Spin statistics of an ordered slot pair from the full wavefunction.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationCheck {
    pub slots: (u8, u8),
    /// Largest entrywise deviation of the reduced density matrix from the
    /// maximally mixed one.
    pub max_dev_from_maximally_mixed: f64,
    pub p_first_a: f64,
    pub p_second_a: f64,
    pub p_second_a_given_first_a: f64,
    pub p_second_b_given_first_a: f64,
}

/// Reduces the full state to the two slots and reports their unconditional
/// and conditional spin probabilities.
pub fn full_state_correlation_check(
    wf: &WaveFunction,
    slots: (SlotId, SlotId),
) -> Result<CorrelationCheck, ProtocolError> {
    let rho = wavefunction_reduced_density(wf, &[slots.0, slots.1])?;
    Ok(CorrelationCheck {
        slots: (slots.0 .0, slots.1 .0),
        max_dev_from_maximally_mixed: rho.max_dev_from_maximally_mixed(),
        p_first_a: rho.probability(slots.0, SpinLabel::A)?,
        p_second_a: rho.probability(slots.1, SpinLabel::A)?,
        p_second_a_given_first_a: rho.conditional_probability(
            slots.1,
            SpinLabel::A,
            slots.0,
            SpinLabel::A,
        )?,
        p_second_b_given_first_a: rho.conditional_probability(
            slots.1,
            SpinLabel::B,
            slots.0,
            SpinLabel::A,
        )?,
    })
}

/// Outcome of the pointer-recombination analysis.
#[derive(Debug, Clone, Serialize)]
pub struct RecombinationReport {
    /// Post-recombination state equals the initial internal state times the
    /// parked packets, up to a global phase, at 1e-12.
    pub state_matches_product_form: bool,
    /// The internal slots measured by the two spin splitters.
    pub spin_slots: (u8, u8),
    /// Entanglement verdict for those slots in the post-recombination state.
    pub entangled: bool,
    /// Spin outcomes pooled over all runs (not split by Bell outcome).
    pub joint_spins: JointSpinTable,
    pub chi_square_statistic: f64,
    pub chi_square_p_value: f64,
    pub stats: StatsReport,
    /// Human-readable details for every failed assertion; empty on success.
    pub failures: Vec<String>,
}

/// Runs the recombination scenario: checks that recombining the pointer
/// restores the product form and disentangles the spin-measured pair, then
/// measures both spins over the ensemble and tests their independence.
pub fn recombination_check(
    scenario: &ExchangeScenario,
) -> Result<RecombinationReport, ProtocolError> {
    let events = &scenario.events;
    let bell_idx = events
        .iter()
        .position(|e| e.rewrite.kind_name() == "bell_analyzer")
        .ok_or_else(|| ProtocolError::Structure {
            detail: "schedule has no Bell analyzer".into(),
        })?;
    let rec_idx = events
        .iter()
        .position(|e| e.rewrite.kind_name() == "pointer_recombiner")
        .ok_or_else(|| ProtocolError::Structure {
            detail: "schedule has no pointer recombiner".into(),
        })?;
    if rec_idx < bell_idx {
        return Err(ProtocolError::Structure {
            detail: "pointer recombiner fires before the Bell analyzer".into(),
        });
    }
    let spin_slots: Vec<SlotId> = events[rec_idx + 1..]
        .iter()
        .filter_map(|e| e.rewrite.measured_slot())
        .collect();
    let &[slot2, slot4] = spin_slots.as_slice() else {
        return Err(ProtocolError::Structure {
            detail: "schedule must measure exactly two spins after recombination".into(),
        });
    };

    let prepared = scenario.prepare()?;
    let mut failures = Vec::new();

    // Reference: the untouched initial internal state, with the measured
    // particles parked in the dustbins and the pointer back at ready.
    let bell_rw = &events[bell_idx].rewrite;
    let bell_dofs = bell_rw.touched_dofs();
    let (bin_i, bin_j) = bell_rw.dustbins().expect("analyzer has dustbins");
    let ready = events[rec_idx]
        .rewrite
        .ready_packet()
        .expect("recombiner has a ready packet");
    let mut ref_packets = scenario.initial_packets.clone();
    ref_packets.insert(bell_dofs[0], *bin_i);
    ref_packets.insert(bell_dofs[1], *bin_j);
    ref_packets.insert(bell_dofs[2], *ready);
    let reference = WaveFunction::single_branch(
        scenario.registry.clone(),
        scenario.initial_internal.clone(),
        ref_packets,
    )?;
    let post = &prepared.states()[rec_idx + 1];
    let state_matches = post.approx_eq_up_to_phase(&reference, 1e-12);
    if !state_matches {
        failures.push(format!(
            "post-recombination state differs from the product form:\n{}\nexpected:\n{}",
            post.describe(),
            reference.describe()
        ));
    }

    let entangled = if post.n_branches() == 1 {
        is_entangled(&post.branches()[0].internal, &[slot2], &[slot4])?
    } else {
        failures.push(format!(
            "post-recombination state has {} branches, expected 1",
            post.n_branches()
        ));
        true
    };
    if entangled {
        failures.push(format!(
            "slots {} and {} are still entangled after recombination",
            slot2.0, slot4.0
        ));
    }

    let (records, stats) = prepared.run_ensemble()?;
    let mut counts = [[0u64; 2]; 2];
    for r in &records {
        let (Some(s2), Some(s4)) = (&r.spin2, &r.spin4) else {
            continue;
        };
        let idx = |l: &str| SPIN_LABELS.iter().position(|s| *s == l);
        if let (Some(i), Some(j)) = (idx(s2), idx(s4)) {
            counts[i][j] += 1;
        }
    }
    let joint = JointSpinTable::from_counts(counts);
    let chi = chi_square_independence_2x2(counts)?;
    if chi.p_value <= 0.01 {
        failures.push(format!(
            "spin outcomes look dependent: chi-square p = {:.5}",
            chi.p_value
        ));
    }

    Ok(RecombinationReport {
        state_matches_product_form: state_matches,
        spin_slots: (slot2.0, slot4.0),
        entangled,
        joint_spins: joint,
        chi_square_statistic: chi.statistic,
        chi_square_p_value: chi.p_value,
        stats,
        failures,
    })
}
