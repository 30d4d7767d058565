//! Multi-particle wavefunctions as finite sums of product branches.
//!
//! Each branch is `amplitude × internal-state × Π_d packet_d(x_d)`: one
//! Gaussian packet per degree of freedom (dof) and one internal state over
//! the particle slots. Every dof lives on its own axis, so a configuration
//! assigns one real coordinate per dof. This product form is closed under
//! the branch rewrites the measurement devices perform, which is what makes
//! exact (grid-free) trajectory integration possible.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::notation::render_factored;
use crate::packet::{GaussianPacket, PacketError};
use crate::spin::{InternalState, SlotId, SpinError};

/// Branches with |amplitude| below this are dropped by rewrites.
pub const BRANCH_AMP_EPS: f64 = 1e-14;
/// Branch overlap above this aborts Born sampling (cross terms present).
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
/// Allowed deviation of a branch's internal-state norm from 1.
pub const INTERNAL_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry must have at least one dof")]
    Empty,
    #[error("duplicate dof id {0}")]
    DuplicateId(u32),
    #[error("duplicate dof name `{0}`")]
    DuplicateName(String),
    #[error("slot {0} is claimed by more than one dof")]
    DuplicateSlot(u8),
    #[error("dof `{name}`: mass must be positive and finite, got {mass}")]
    BadMass { name: String, mass: f64 },
}

#[derive(Debug, Error)]
pub enum WaveFunctionError {
    #[error("wavefunction must have at least one branch")]
    Empty,
    #[error("branch {index}: missing packet for dof {dof}")]
    MissingPacket { index: usize, dof: DofId },
    #[error("branch {index}: packet for dof {dof} not in the registry")]
    UnknownDof { index: usize, dof: DofId },
    #[error("branch {index}: internal state covers slots {got:?}, registry requires {want:?}")]
    SlotCoverage {
        index: usize,
        got: Vec<u8>,
        want: Vec<u8>,
    },
    #[error("branch {index}: internal state norm is {norm}, expected 1")]
    UnnormalizedInternal { index: usize, norm: f64 },
    #[error("branch {index}: amplitude is not finite")]
    BadAmplitude { index: usize },
    #[error(
        "branches {i} and {j} are not orthogonal (|<b{i}|b{j}>| = {overlap:.3e}): \
         cross terms would make branch-wise Born sampling wrong, refusing to approximate"
    )]
    NonOrthogonalBranches { i: usize, j: usize, overlap: f64 },
    #[error("no branch supports the configuration within {n_sigma} sigma")]
    NoSupportingBranch { n_sigma: f64 },
    #[error("configuration does not cover dof {dof}")]
    MissingCoordinate { dof: DofId },
    #[error("zero-norm wavefunction cannot be renormalized")]
    ZeroNorm,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

/// Identifier of one degree of freedom (one axis of configuration space).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct DofId(pub u32);

impl fmt::Display for DofId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// What a dof's coordinate describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DofRole {
    /// Position of the particle carrying the given internal slot.
    Particle(SlotId),
    /// A device pointer; carries no internal slot.
    Pointer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofInfo {
    pub id: DofId,
    pub name: String,
    pub role: DofRole,
    pub mass: f64,
}

/// The fixed set of dofs a simulation runs over, with names and masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofRegistry {
    dofs: Vec<DofInfo>,
}

impl DofRegistry {
    pub fn new(mut dofs: Vec<DofInfo>) -> Result<Self, RegistryError> {
        if dofs.is_empty() {
            return Err(RegistryError::Empty);
        }
        dofs.sort_by_key(|d| d.id);
        for w in dofs.windows(2) {
            if w[0].id == w[1].id {
                return Err(RegistryError::DuplicateId(w[0].id.0));
            }
        }
        let mut names = BTreeMap::new();
        let mut slots = BTreeMap::new();
        for d in &dofs {
            if names.insert(d.name.clone(), d.id).is_some() {
                return Err(RegistryError::DuplicateName(d.name.clone()));
            }
            if let DofRole::Particle(slot) = d.role {
                if slots.insert(slot, d.id).is_some() {
                    return Err(RegistryError::DuplicateSlot(slot.0));
                }
            }
            if !(d.mass.is_finite() && d.mass > 0.0) {
                return Err(RegistryError::BadMass {
                    name: d.name.clone(),
                    mass: d.mass,
                });
            }
        }
        Ok(DofRegistry { dofs })
    }

    /// Dofs in ascending id order.
    pub fn dofs(&self) -> &[DofInfo] {
        &self.dofs
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn get(&self, id: DofId) -> Option<&DofInfo> {
        self.dofs.binary_search_by_key(&id, |d| d.id).ok().map(|i| &self.dofs[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&DofInfo> {
        self.dofs.iter().find(|d| d.name == name)
    }

    pub fn mass(&self, id: DofId) -> Option<f64> {
        self.get(id).map(|d| d.mass)
    }

    /// Internal slots carried by particles, ascending.
    pub fn particle_slots(&self) -> Vec<SlotId> {
        let mut slots: Vec<SlotId> = self
            .dofs
            .iter()
            .filter_map(|d| match d.role {
                DofRole::Particle(s) => Some(s),
                DofRole::Pointer => None,
            })
            .collect();
        slots.sort();
        slots
    }

    pub fn dof_for_slot(&self, slot: SlotId) -> Option<DofId> {
        self.dofs.iter().find_map(|d| match d.role {
            DofRole::Particle(s) if s == slot => Some(d.id),
            _ => None,
        })
    }
}

/// One point of configuration space: a coordinate for every dof.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    positions: BTreeMap<DofId, f64>,
}

impl Configuration {
    pub fn new(positions: BTreeMap<DofId, f64>) -> Self {
        Configuration { positions }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (DofId, f64)>) -> Self {
        Configuration {
            positions: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, dof: DofId) -> Option<f64> {
        self.positions.get(&dof).copied()
    }

    pub fn require(&self, dof: DofId) -> Result<f64, WaveFunctionError> {
        self.get(dof)
            .ok_or(WaveFunctionError::MissingCoordinate { dof })
    }

    pub fn set(&mut self, dof: DofId, x: f64) {
        self.positions.insert(dof, x);
    }

    /// Coordinates in ascending dof order.
    pub fn iter(&self) -> impl Iterator<Item = (DofId, f64)> + '_ {
        self.positions.iter().map(|(d, x)| (*d, *x))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One product branch: `amplitude × internal × Π_d packets[d](x_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub amplitude: Complex64,
    pub internal: InternalState,
    pub packets: BTreeMap<DofId, GaussianPacket>,
}

impl Branch {
    /// Spatial part times amplitude at a configuration (internal not
    /// included; it enters pairings through inner products).
    pub fn value_at(&self, c: &Configuration) -> Result<Complex64, WaveFunctionError> {
        let mut v = self.amplitude;
        for (dof, pkt) in &self.packets {
            v *= pkt.evaluate(c.require(*dof)?);
        }
        Ok(v)
    }

    /// Whether every packet's truncated support contains the configuration.
    pub fn supports(&self, c: &Configuration, n_sigma: f64) -> Result<bool, WaveFunctionError> {
        for (dof, pkt) in &self.packets {
            if !pkt.support_contains(c.require(*dof)?, n_sigma) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A wavefunction: finite sum of product branches over a shared dof registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveFunction {
    registry: Arc<DofRegistry>,
    branches: Vec<Branch>,
    /// Marks a state produced by effective-branch selection (collapsed view).
    effective: bool,
}

impl WaveFunction {
    pub fn new(
        registry: Arc<DofRegistry>,
        branches: Vec<Branch>,
    ) -> Result<Self, WaveFunctionError> {
        Self::with_effective_flag(registry, branches, false)
    }

    fn with_effective_flag(
        registry: Arc<DofRegistry>,
        branches: Vec<Branch>,
        effective: bool,
    ) -> Result<Self, WaveFunctionError> {
        if branches.is_empty() {
            return Err(WaveFunctionError::Empty);
        }
        let want_slots = registry.particle_slots();
        for (index, b) in branches.iter().enumerate() {
            if !(b.amplitude.re.is_finite() && b.amplitude.im.is_finite()) {
                return Err(WaveFunctionError::BadAmplitude { index });
            }
            for d in registry.dofs() {
                if !b.packets.contains_key(&d.id) {
                    return Err(WaveFunctionError::MissingPacket { index, dof: d.id });
                }
            }
            for dof in b.packets.keys() {
                if registry.get(*dof).is_none() {
                    return Err(WaveFunctionError::UnknownDof { index, dof: *dof });
                }
            }
            if b.internal.slots() != want_slots.as_slice() {
                return Err(WaveFunctionError::SlotCoverage {
                    index,
                    got: b.internal.slots().iter().map(|s| s.0).collect(),
                    want: want_slots.iter().map(|s| s.0).collect(),
                });
            }
            let norm = b.internal.norm();
            if (norm - 1.0).abs() > INTERNAL_NORM_TOL {
                return Err(WaveFunctionError::UnnormalizedInternal { index, norm });
            }
        }
        Ok(WaveFunction {
            registry,
            branches,
            effective,
        })
    }

    /// Single-branch wavefunction with unit amplitude.
    pub fn single_branch(
        registry: Arc<DofRegistry>,
        internal: InternalState,
        packets: BTreeMap<DofId, GaussianPacket>,
    ) -> Result<Self, WaveFunctionError> {
        WaveFunction::new(
            registry,
            vec![Branch {
                amplitude: Complex64::new(1.0, 0.0),
                internal,
                packets,
            }],
        )
    }

    pub fn registry(&self) -> &Arc<DofRegistry> {
        &self.registry
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn is_effective(&self) -> bool {
        self.effective
    }

    /// Devices carry the flag through rewrites: a rewrite of an effective
    /// wavefunction is still the effective wavefunction.
    pub(crate) fn set_effective(&mut self, flag: bool) {
        self.effective = flag;
    }

    #[cfg(test)]
    pub(crate) fn reverse_branches_for_test(&mut self) {
        self.branches.reverse();
    }

    /// `<b_i|b_j>` with unit amplitudes: internal inner product times the
    /// product of per-dof packet overlaps.
    pub fn branch_inner(&self, i: usize, j: usize) -> Result<Complex64, WaveFunctionError> {
        let (bi, bj) = (&self.branches[i], &self.branches[j]);
        let mut v = bi.internal.inner(&bj.internal)?;
        for (dof, pi) in &bi.packets {
            v *= pi.overlap(&bj.packets[dof]);
        }
        Ok(v)
    }

    /// `<Ψ|Ψ>`, cross terms included.
    pub fn norm_sqr(&self) -> Result<f64, WaveFunctionError> {
        let mut total = Complex64::new(0.0, 0.0);
        for i in 0..self.branches.len() {
            for j in 0..self.branches.len() {
                total += self.branches[i].amplitude.conj()
                    * self.branches[j].amplitude
                    * self.branch_inner(i, j)?;
            }
        }
        Ok(total.re.max(0.0))
    }

    pub fn norm(&self) -> Result<f64, WaveFunctionError> {
        Ok(self.norm_sqr()?.sqrt())
    }

    pub fn renormalize(&self) -> Result<WaveFunction, WaveFunctionError> {
        let n = self.norm()?;
        if n < 1e-12 {
            return Err(WaveFunctionError::ZeroNorm);
        }
        let mut out = self.clone();
        for b in &mut out.branches {
            b.amplitude /= n;
        }
        Ok(out)
    }

    /// `Σ_s |Ψ(c, s)|²`: the position-space Born density at a configuration,
    /// internal degrees summed over. Cross terms are kept, so this is exact
    /// whether or not branches overlap.
    pub fn born_density(&self, c: &Configuration) -> Result<f64, WaveFunctionError> {
        let values: Vec<Complex64> = self
            .branches
            .iter()
            .map(|b| b.value_at(c))
            .collect::<Result<_, _>>()?;
        let mut total = Complex64::new(0.0, 0.0);
        for i in 0..self.branches.len() {
            for j in 0..self.branches.len() {
                let gram = self.branches[i].internal.inner(&self.branches[j].internal)?;
                if gram.norm_sqr() == 0.0 {
                    continue;
                }
                total += values[i].conj() * values[j] * gram;
            }
        }
        Ok(total.re.max(0.0))
    }

    /// Draws a configuration from the Born density.
    ///
    /// Requires (and checks) that branches are pairwise orthogonal as full
    /// branch vectors, so the density is an exact mixture of per-branch
    /// Gaussian products: pick a branch by |amplitude|², then sample each
    /// dof from its packet's |ψ|². Errors rather than approximates if cross
    /// terms are present.
    pub fn sample_configuration<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<Configuration, WaveFunctionError> {
        for i in 0..self.branches.len() {
            for j in (i + 1)..self.branches.len() {
                let overlap = self.branch_inner(i, j)?.norm();
                if overlap > ORTHOGONALITY_TOL {
                    return Err(WaveFunctionError::NonOrthogonalBranches { i, j, overlap });
                }
            }
        }
        let weights: Vec<f64> = self
            .branches
            .iter()
            .map(|b| b.amplitude.norm_sqr())
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(WaveFunctionError::ZeroNorm);
        }
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = self.branches.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        let branch = &self.branches[chosen];
        let mut positions = BTreeMap::new();
        for (dof, pkt) in &branch.packets {
            // |ψ|² of a packet is a Gaussian with standard deviation sigma.
            let normal = Normal::new(pkt.center, pkt.sigma).expect("validated sigma");
            positions.insert(*dof, normal.sample(rng));
        }
        Ok(Configuration::new(positions))
    }

    /// Indices of branches whose every packet support contains `c`.
    pub fn supporting_branches(
        &self,
        c: &Configuration,
        n_sigma: f64,
    ) -> Result<Vec<usize>, WaveFunctionError> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            if b.supports(c, n_sigma)? {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// The branch actually steering a configuration: the supporting branch,
    /// by largest `|amplitude × Π packets|²` if several overlap there.
    pub fn effective_branch_id(
        &self,
        c: &Configuration,
        n_sigma: f64,
    ) -> Result<usize, WaveFunctionError> {
        let supporting = self.supporting_branches(c, n_sigma)?;
        supporting
            .into_iter()
            .map(|i| -> Result<_, WaveFunctionError> {
                Ok((i, self.branches[i].value_at(c)?.norm_sqr()))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .ok_or(WaveFunctionError::NoSupportingBranch { n_sigma })
    }

    /// The renormalized sum of branches supporting `c`: the wavefunction
    /// that actually guides a configuration sitting at `c`. Idempotent.
    pub fn effective(
        &self,
        c: &Configuration,
        n_sigma: f64,
    ) -> Result<WaveFunction, WaveFunctionError> {
        let keep = self.supporting_branches(c, n_sigma)?;
        if keep.is_empty() {
            return Err(WaveFunctionError::NoSupportingBranch { n_sigma });
        }
        let branches: Vec<Branch> = keep
            .into_iter()
            .map(|i| self.branches[i].clone())
            .collect();
        let wf =
            WaveFunction::with_effective_flag(self.registry.clone(), branches, true)?;
        wf.renormalize().map(|mut w| {
            w.effective = true;
            w
        })
    }

    /// Canonical form: per branch, the internal state's leading phase is
    /// absorbed into the amplitude, then branches are sorted by a total
    /// order on (packets, internal, amplitude). Rewrites use this to make
    /// output branch order independent of input order.
    pub fn canonicalize(&self) -> WaveFunction {
        let mut out = self.clone();
        for b in &mut out.branches {
            let (phase, canon) = b.internal.canonical_phase();
            b.amplitude *= phase;
            b.internal = canon;
        }
        out.branches.sort_by(compare_branches);
        out
    }

    /// Structural equality of canonicalized branch lists within `tol`
    /// (amplitudes, internal terms, packet parameters; `born_at` ignored).
    pub fn approx_eq(&self, other: &WaveFunction, tol: f64) -> bool {
        self.eq_with_phase(other, tol, Complex64::new(1.0, 0.0))
    }

    /// Like [`approx_eq`](Self::approx_eq) but allows one global phase on
    /// the whole wavefunction.
    pub fn approx_eq_up_to_phase(&self, other: &WaveFunction, tol: f64) -> bool {
        let a = self.canonicalize();
        let b = other.canonicalize();
        let (lead_a, lead_b) = match (a.branches.first(), b.branches.first()) {
            (Some(x), Some(y)) => (x.amplitude, y.amplitude),
            _ => return false,
        };
        if lead_b.norm() < BRANCH_AMP_EPS {
            return false;
        }
        let phase = (lead_a / lead_b) / (lead_a / lead_b).norm();
        self.eq_with_phase(other, tol, phase)
    }

    fn eq_with_phase(&self, other: &WaveFunction, tol: f64, phase: Complex64) -> bool {
        let a = self.canonicalize();
        let b = other.canonicalize();
        if a.branches.len() != b.branches.len() {
            return false;
        }
        if a.registry.dofs().len() != b.registry.dofs().len() {
            return false;
        }
        for (x, y) in a.branches.iter().zip(&b.branches) {
            if (x.amplitude - phase * y.amplitude).norm() > tol {
                return false;
            }
            if !x.internal.approx_eq(&y.internal, tol) {
                return false;
            }
            for (dof, px) in &x.packets {
                match y.packets.get(dof) {
                    Some(py) if px.approx_eq(py, tol) => {}
                    _ => return false,
                }
            }
        }
        true
    }

    /// Human-readable multi-line listing of the branches.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.branches.iter().enumerate() {
            let packets: Vec<String> = b
                .packets
                .iter()
                .map(|(dof, p)| {
                    let name = self
                        .registry
                        .get(*dof)
                        .map(|d| d.name.clone())
                        .unwrap_or_else(|| dof.to_string());
                    format!("{name}@{}", crate::notation::format_float(p.center))
                })
                .collect();
            out.push_str(&format!(
                "branch {i}: {} x [{}] x {{{}}}\n",
                crate::notation::format_amplitude(b.amplitude),
                render_factored(&b.internal),
                packets.join(", ")
            ));
        }
        out
    }
}

/// Total order on branches for canonical sorting: packet parameters first
/// (bitwise on the floats), then internal term labels, then amplitude.
fn compare_branches(a: &Branch, b: &Branch) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let key = |br: &Branch| -> Vec<(DofId, [u64; 5])> {
        br.packets
            .iter()
            .map(|(d, p)| {
                (
                    *d,
                    [
                        p.center.to_bits(),
                        p.sigma.to_bits(),
                        p.wavenumber.to_bits(),
                        p.phase.to_bits(),
                        p.chirp.to_bits(),
                    ],
                )
            })
            .collect()
    };
    match key(a).cmp(&key(b)) {
        Ordering::Equal => {}
        o => return o,
    }
    let labels = |br: &Branch| -> Vec<Vec<u8>> {
        br.internal
            .terms()
            .iter()
            .map(|t| t.labels.iter().map(|l| l.bit() as u8).collect())
            .collect()
    };
    match labels(a).cmp(&labels(b)) {
        Ordering::Equal => {}
        o => return o,
    }
    (a.amplitude.re, a.amplitude.im)
        .partial_cmp(&(b.amplitude.re, b.amplitude.im))
        .unwrap_or(Ordering::Equal)
}
