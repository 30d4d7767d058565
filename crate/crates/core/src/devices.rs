//! Measurement devices as instantaneous branch rewrites.
//!
//! A device is a linear map defined branch-by-branch: it splits or relabels
//! product branches, moving some dofs' packets to new (disjoint) locations
//! while leaving every other factor untouched. Applying one to a
//! wavefunction is unitary on the states the device is meant for, and the
//! implementation checks norm preservation on every call rather than
//! assuming it.
//!
//! Positions are held fixed while a rewrite fires; the moved dofs are then
//! re-drawn from the conditional Born density given the unmoved coordinates
//! ([`resolve_positions_after_event`]). Readouts afterwards are pure support
//! lookups: which outcome packet contains the coordinate.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::packet::GaussianPacket;
use crate::spin::{bell_split, bell_state, tensor, InternalState, SlotId, SpinError};
use crate::wavefunction::{
    Branch, Configuration, DofId, WaveFunction, WaveFunctionError, BRANCH_AMP_EPS,
};

/// Packet-parameter tolerance when matching a branch's packet against a
/// device's expected input.
pub const PACKET_MATCH_TOL: f64 = 1e-12;
/// Allowed change of the wavefunction norm across a rewrite.
pub const NORM_PRESERVATION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(
        "device `{device}`: output packets at centers {a} and {b} are not \
         disjoint at {n_sigma} sigma"
    )]
    NonDisjointOutputs {
        device: String,
        a: f64,
        b: f64,
        n_sigma: f64,
    },
    #[error("device `{device}`: slots must be distinct")]
    RepeatedSlot { device: String },
    #[error("device `{device}`: dofs must be distinct")]
    RepeatedDof { device: String },
    #[error(
        "device `{device}`: branch {index} pointer packet (center {found}) is \
         not the ready packet (center {want}); device fired out of order?"
    )]
    PointerNotReady {
        device: String,
        index: usize,
        found: f64,
        want: f64,
    },
    #[error(
        "device `{device}`: branch {index} pointer packet (center {found}) \
         matches none of the expected input packets"
    )]
    StructureMismatch {
        device: String,
        index: usize,
        found: f64,
    },
    #[error("device `{device}` touches dof {dof}, which the wavefunction does not have")]
    DomainMismatch { device: String, dof: DofId },
    #[error("device `{device}` measures slot {slot}, which no particle carries")]
    MissingSlot { device: String, slot: u8 },
    #[error(
        "rewrite `{device}` changed the norm from {before} to {after}: the \
         branch table is not unitary on this state"
    )]
    NormNotPreserved {
        device: String,
        before: f64,
        after: f64,
    },
    #[error("rewrite `{device}` cancelled every branch")]
    EmptyResult { device: String },
    #[error(
        "readout `{device}`: coordinate {position} lies in {count} outcome \
         supports, expected exactly one"
    )]
    AmbiguousReadout {
        device: String,
        position: f64,
        count: usize,
    },
    #[error("conditional density after `{device}` vanished; cannot redraw moved dofs")]
    ZeroConditionalDensity { device: String },
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    WaveFunction(#[from] WaveFunctionError),
}

#[derive(Debug, Clone)]
enum RewriteKind {
    /// Splits a slot's internal state on its basis labels and routes the
    /// carrying dof's packet to a per-label output.
    SpinSplit {
        slot: SlotId,
        dof: DofId,
        out_a: GaussianPacket,
        out_b: GaussianPacket,
    },
    /// Splits two slots jointly over the Bell basis; the measured particles'
    /// packets are parked in dustbins and the pointer is kicked from its
    /// ready packet to the output matching the Bell component.
    BellAnalyze {
        slots: (SlotId, SlotId),
        dofs: (DofId, DofId),
        pointer: DofId,
        outputs: [GaussianPacket; 4],
        dustbins: (GaussianPacket, GaussianPacket),
        ready: GaussianPacket,
    },
    /// Inverse of the pointer coupling on its range: maps each of the four
    /// output packets back to the ready packet, touching nothing else.
    PointerReset {
        pointer: DofId,
        inputs: [GaussianPacket; 4],
        ready: GaussianPacket,
    },
}

/// A named device: a branch-linear rewrite of wavefunctions.
#[derive(Debug, Clone)]
pub struct BranchRewrite {
    name: String,
    kind: RewriteKind,
}

impl BranchRewrite {
    /// Spin splitter: routes label `a` of `slot` to `out_a` and label `b`
    /// to `out_b` on the carrying dof `dof`. Outputs must be disjoint at
    /// `n_sigma` so a later readout is unambiguous.
    pub fn stern_gerlach(
        name: impl Into<String>,
        slot: SlotId,
        dof: DofId,
        out_a: GaussianPacket,
        out_b: GaussianPacket,
        n_sigma: f64,
    ) -> Result<Self, DeviceError> {
        let name = name.into();
        if !out_a.disjoint_from(&out_b, n_sigma) {
            return Err(DeviceError::NonDisjointOutputs {
                device: name,
                a: out_a.center,
                b: out_b.center,
                n_sigma,
            });
        }
        Ok(BranchRewrite {
            name,
            kind: RewriteKind::SpinSplit {
                slot,
                dof,
                out_a,
                out_b,
            },
        })
    }

    /// Joint Bell-basis analyzer of `slots`, recording the component in the
    /// pointer dof. `outputs[m]` is the pointer packet for the m-th Bell
    /// state (order: alpha, beta, gamma, delta), `ready` the pointer packet
    /// the device expects on input, `dustbins` where the measured particles'
    /// packets are parked. Outputs and ready must be mutually disjoint at
    /// `n_sigma`; the dustbins must be disjoint from each other only if they
    /// share a dof axis, which they never do here (one per particle), so
    /// they are not constrained.
    #[allow(clippy::too_many_arguments)]
    pub fn bell_analyzer(
        name: impl Into<String>,
        slots: (SlotId, SlotId),
        dofs: (DofId, DofId),
        pointer: DofId,
        outputs: [GaussianPacket; 4],
        dustbins: (GaussianPacket, GaussianPacket),
        ready: GaussianPacket,
        n_sigma: f64,
    ) -> Result<Self, DeviceError> {
        let name = name.into();
        if slots.0 == slots.1 {
            return Err(DeviceError::RepeatedSlot { device: name });
        }
        if dofs.0 == dofs.1 || dofs.0 == pointer || dofs.1 == pointer {
            return Err(DeviceError::RepeatedDof { device: name });
        }
        let mut pointer_family: Vec<&GaussianPacket> = outputs.iter().collect();
        pointer_family.push(&ready);
        for i in 0..pointer_family.len() {
            for j in (i + 1)..pointer_family.len() {
                if !pointer_family[i].disjoint_from(pointer_family[j], n_sigma) {
                    return Err(DeviceError::NonDisjointOutputs {
                        device: name,
                        a: pointer_family[i].center,
                        b: pointer_family[j].center,
                        n_sigma,
                    });
                }
            }
        }
        Ok(BranchRewrite {
            name,
            kind: RewriteKind::BellAnalyze {
                slots,
                dofs,
                pointer,
                outputs,
                dustbins,
                ready,
            },
        })
    }

    /// Pointer recombiner: the unique linear extension of "each output
    /// packet goes back to ready" — the inverse of the analyzer's pointer
    /// coupling on its range.
    pub fn pointer_recombiner(
        name: impl Into<String>,
        pointer: DofId,
        inputs: [GaussianPacket; 4],
        ready: GaussianPacket,
    ) -> Result<Self, DeviceError> {
        Ok(BranchRewrite {
            name: name.into(),
            kind: RewriteKind::PointerReset {
                pointer,
                inputs,
                ready,
            },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Which device family the rewrite belongs to.
    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            RewriteKind::SpinSplit { .. } => "stern_gerlach",
            RewriteKind::BellAnalyze { .. } => "bell_analyzer",
            RewriteKind::PointerReset { .. } => "pointer_recombiner",
        }
    }

    /// The internal slot a spin splitter measures.
    pub fn measured_slot(&self) -> Option<SlotId> {
        match &self.kind {
            RewriteKind::SpinSplit { slot, .. } => Some(*slot),
            _ => None,
        }
    }

    /// Dofs whose packets this rewrite replaces (and whose coordinates must
    /// be re-drawn afterwards).
    pub fn touched_dofs(&self) -> Vec<DofId> {
        match &self.kind {
            RewriteKind::SpinSplit { dof, .. } => vec![*dof],
            RewriteKind::BellAnalyze { dofs, pointer, .. } => {
                vec![dofs.0, dofs.1, *pointer]
            }
            RewriteKind::PointerReset { pointer, .. } => vec![*pointer],
        }
    }

    /// The analyzer's pointer output packets, in Bell order.
    pub fn pointer_outputs(&self) -> Option<&[GaussianPacket; 4]> {
        match &self.kind {
            RewriteKind::BellAnalyze { outputs, .. } => Some(outputs),
            RewriteKind::PointerReset { inputs, .. } => Some(inputs),
            RewriteKind::SpinSplit { .. } => None,
        }
    }

    /// The pointer packet the device leaves or expects in the ready state.
    pub fn ready_packet(&self) -> Option<&GaussianPacket> {
        match &self.kind {
            RewriteKind::BellAnalyze { ready, .. }
            | RewriteKind::PointerReset { ready, .. } => Some(ready),
            RewriteKind::SpinSplit { .. } => None,
        }
    }

    pub fn dustbins(&self) -> Option<(&GaussianPacket, &GaussianPacket)> {
        match &self.kind {
            RewriteKind::BellAnalyze { dustbins, .. } => {
                Some((&dustbins.0, &dustbins.1))
            }
            _ => None,
        }
    }

    /// Image of a single branch under the rewrite table.
    fn apply_branch(&self, branch: &Branch, index: usize) -> Result<Vec<Branch>, DeviceError> {
        match &self.kind {
            RewriteKind::SpinSplit {
                slot,
                dof,
                out_a,
                out_b,
            } => {
                let mut out = Vec::new();
                for (label, pkt) in [
                    (crate::spin::SpinLabel::A, out_a),
                    (crate::spin::SpinLabel::B, out_b),
                ] {
                    if let Some(proj) = branch.internal.project(*slot, label)? {
                        let weight = proj.norm();
                        let (phase, canon) = proj.normalized()?.canonical_phase();
                        let mut packets = branch.packets.clone();
                        packets.insert(*dof, *pkt);
                        out.push(Branch {
                            amplitude: branch.amplitude * weight * phase,
                            internal: canon,
                            packets,
                        });
                    }
                }
                Ok(out)
            }
            RewriteKind::BellAnalyze {
                slots,
                dofs,
                pointer,
                outputs,
                dustbins,
                ready,
            } => {
                let found = &branch.packets[pointer];
                if !found.approx_eq(ready, PACKET_MATCH_TOL) {
                    return Err(DeviceError::PointerNotReady {
                        device: self.name.clone(),
                        index,
                        found: found.center,
                        want: ready.center,
                    });
                }
                let max_slot = branch.internal.slots().last().expect("nonempty").0;
                let mut out = Vec::new();
                for (m, comp) in bell_split(&branch.internal, slots.0, slots.1)?
                    .into_iter()
                    .enumerate()
                {
                    if comp.amplitude.norm() < BRANCH_AMP_EPS {
                        continue;
                    }
                    let bell = bell_state(comp.kind, slots.0, slots.1, max_slot)?;
                    let internal = match &comp.rest {
                        Some(rest) => tensor(&[bell, rest.clone()])?,
                        None => bell,
                    };
                    let mut packets = branch.packets.clone();
                    packets.insert(dofs.0, dustbins.0);
                    packets.insert(dofs.1, dustbins.1);
                    packets.insert(*pointer, outputs[m]);
                    out.push(Branch {
                        amplitude: branch.amplitude * comp.amplitude,
                        internal,
                        packets,
                    });
                }
                Ok(out)
            }
            RewriteKind::PointerReset {
                pointer,
                inputs,
                ready,
            } => {
                let found = &branch.packets[pointer];
                let matched = inputs
                    .iter()
                    .any(|p| found.approx_eq(p, PACKET_MATCH_TOL));
                if !matched {
                    return Err(DeviceError::StructureMismatch {
                        device: self.name.clone(),
                        index,
                        found: found.center,
                    });
                }
                let mut packets = branch.packets.clone();
                packets.insert(*pointer, *ready);
                Ok(vec![Branch {
                    amplitude: branch.amplitude,
                    internal: branch.internal.clone(),
                    packets,
                }])
            }
        }
    }

    fn check_domain(&self, wf: &WaveFunction) -> Result<(), DeviceError> {
        for dof in self.touched_dofs() {
            if wf.registry().get(dof).is_none() {
                return Err(DeviceError::DomainMismatch {
                    device: self.name.clone(),
                    dof,
                });
            }
        }
        let slots = wf.registry().particle_slots();
        let needed: Vec<SlotId> = match &self.kind {
            RewriteKind::SpinSplit { slot, .. } => vec![*slot],
            RewriteKind::BellAnalyze { slots, .. } => vec![slots.0, slots.1],
            RewriteKind::PointerReset { .. } => vec![],
        };
        for s in needed {
            if !slots.contains(&s) {
                return Err(DeviceError::MissingSlot {
                    device: self.name.clone(),
                    slot: s.0,
                });
            }
        }
        Ok(())
    }

    /// Applies the rewrite to every branch, merges branches that land on the
    /// same packet product, drops cancelled ones, and verifies the norm is
    /// unchanged. The output is in canonical branch order, so it does not
    /// depend on the input branch order.
    pub fn apply(&self, wf: &WaveFunction) -> Result<WaveFunction, DeviceError> {
        self.check_domain(wf)?;
        let before = wf.norm()?;

        let mut rewritten = Vec::new();
        for (index, branch) in wf.branches().iter().enumerate() {
            rewritten.extend(self.apply_branch(branch, index)?);
        }

        // Merge on identical packet products (devices copy packets from
        // their fixed tables, so equality is exact bit equality).
        let key = |b: &Branch| -> Vec<(u32, [u64; 6])> {
            b.packets
                .iter()
                .map(|(d, p)| {
                    (
                        d.0,
                        [
                            p.center.to_bits(),
                            p.sigma.to_bits(),
                            p.wavenumber.to_bits(),
                            p.phase.to_bits(),
                            p.chirp.to_bits(),
                            p.born_at.to_bits(),
                        ],
                    )
                })
                .collect()
        };
        let mut groups: BTreeMap<Vec<(u32, [u64; 6])>, Vec<Branch>> = BTreeMap::new();
        for b in rewritten {
            groups.entry(key(&b)).or_default().push(b);
        }

        let mut merged = Vec::new();
        for (_, group) in groups {
            let packets = group[0].packets.clone();
            let mut acc: Option<InternalState> = None;
            for b in group {
                let scaled = b.internal.scaled(b.amplitude)?;
                acc = match acc {
                    None => Some(scaled),
                    Some(a) => a.add_scaled(&scaled, Complex64::new(1.0, 0.0))?,
                };
            }
            let Some(total) = acc else { continue };
            let weight = total.norm();
            if weight < BRANCH_AMP_EPS {
                continue;
            }
            let (phase, canon) = total.normalized()?.canonical_phase();
            merged.push(Branch {
                amplitude: weight * phase,
                internal: canon,
                packets,
            });
        }
        if merged.is_empty() {
            return Err(DeviceError::EmptyResult {
                device: self.name.clone(),
            });
        }

        let mut out = WaveFunction::new(wf.registry().clone(), merged)?.canonicalize();
        out.set_effective(wf.is_effective());
        let after = out.norm()?;
        if (after - before).abs() > NORM_PRESERVATION_TOL * before.max(1.0) {
            return Err(DeviceError::NormNotPreserved {
                device: self.name.clone(),
                before,
                after,
            });
        }
        Ok(out)
    }
}

/// Maps a dof's coordinate to an outcome label by packet support.
#[derive(Debug, Clone)]
pub struct OutcomeMap {
    pub device: String,
    pub dof: DofId,
    pub outcomes: Vec<(GaussianPacket, String)>,
}

impl OutcomeMap {
    /// The unique outcome whose packet support (at `n_sigma`) contains the
    /// coordinate. Zero or several hits are an error: the configuration is
    /// not in a readable position.
    pub fn read(&self, c: &Configuration, n_sigma: f64) -> Result<String, DeviceError> {
        let x = c.require(self.dof)?;
        let hits: Vec<&str> = self
            .outcomes
            .iter()
            .filter(|(p, _)| p.support_contains(x, n_sigma))
            .map(|(_, label)| label.as_str())
            .collect();
        if hits.len() == 1 {
            Ok(hits[0].to_string())
        } else {
            Err(DeviceError::AmbiguousReadout {
                device: self.device.clone(),
                position: x,
                count: hits.len(),
            })
        }
    }
}

/// A scheduled device firing: the rewrite plus an optional readout of one
/// dof immediately after the positions are re-drawn.
#[derive(Debug, Clone)]
pub struct DeviceEvent {
    pub time: f64,
    pub rewrite: BranchRewrite,
    pub readout: Option<OutcomeMap>,
}

/// Re-draws the coordinates of `moved` dofs from the post-rewrite
/// conditional Born density given the unmoved coordinates.
///
/// Valid when branches are orthogonal in the internal ⊗ unmoved sector, so
/// the conditional is an exact mixture over branches: weight `|amplitude|² ×
/// Π_unmoved |packet(x_d)|²`, then per-dof Gaussians of the chosen branch.
/// The bound `|<int_i,int_j>| √(w_i w_j)` dominates every cross term's
/// possible contribution; if it is not negligible the function refuses.
pub fn resolve_positions_after_event<R: Rng + ?Sized>(
    wf_post: &WaveFunction,
    c_pre: &Configuration,
    moved: &BTreeSet<DofId>,
    device: &str,
    rng: &mut R,
) -> Result<Configuration, DeviceError> {
    if moved.is_empty() {
        return Ok(c_pre.clone());
    }
    let branches = wf_post.branches();
    let mut weights = Vec::with_capacity(branches.len());
    for b in branches {
        let mut w = b.amplitude.norm_sqr();
        for (dof, pkt) in &b.packets {
            if !moved.contains(dof) {
                w *= pkt.density(c_pre.require(*dof)?);
            }
        }
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 1e-300) {
        return Err(DeviceError::ZeroConditionalDensity {
            device: device.to_string(),
        });
    }
    for i in 0..branches.len() {
        for j in (i + 1)..branches.len() {
            let gram = branches[i].internal.inner(&branches[j].internal)?.norm();
            if gram * (weights[i] * weights[j]).sqrt() > crate::wavefunction::ORTHOGONALITY_TOL * total
            {
                return Err(DeviceError::WaveFunction(
                    WaveFunctionError::NonOrthogonalBranches {
                        i,
                        j,
                        overlap: gram,
                    },
                ));
            }
        }
    }

    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = branches.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            chosen = i;
            break;
        }
        pick -= w;
    }
    let mut out = c_pre.clone();
    for (dof, pkt) in &branches[chosen].packets {
        if moved.contains(dof) {
            let normal = Normal::new(pkt.center, pkt.sigma).expect("validated sigma");
            out.set(*dof, normal.sample(rng));
        }
    }
    Ok(out)
}
