//! Sparse internal (spin-like) states over labelled slots, the Bell basis,
//! and reduced density matrices.
//!
//! A state is a list of product terms: each term assigns one of two labels
//! (`a` or `b`) to every slot the state covers and carries a complex
//! amplitude. Slots are global ids, so a two-slot state "embedded at slots
//! 1 and 3" knows exactly which subsystems it talks about and tensoring is
//! just a disjoint union of slot sets.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::notation::format_amplitude;

/// Amplitudes below this are treated as structural zeros.
pub const AMP_EPS: f64 = 1e-14;
/// Singular values / eigenvalues below this do not count toward ranks.
pub const RANK_EPS: f64 = 1e-10;
/// Default tolerance for state comparisons.
pub const STATE_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SpinError {
    #[error("slot {slot} out of range 1..={n}")]
    InvalidSlot { slot: u8, n: u8 },
    #[error("slots must be distinct, {slot} repeats")]
    RepeatedSlot { slot: u8 },
    #[error("states overlap on slot {slot}, tensor factors must cover disjoint slots")]
    OverlappingSlots { slot: u8 },
    #[error("states cover different slot sets")]
    SlotMismatch,
    #[error("state has no terms")]
    EmptyState,
    #[error("state does not cover slot {slot}")]
    UnknownSlot { slot: u8 },
    #[error("no slots kept in partial trace")]
    EmptyKeep,
    #[error("partial trace must discard at least one slot")]
    KeepAll,
    #[error("groups do not form a valid bipartition: {0}")]
    BadBipartition(String),
    #[error("operation needs a 4-slot state, got {n} slots")]
    NotFourSlots { n: usize },
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("mixture weight {weight} is negative")]
    NegativeWeight { weight: f64 },
}

/// One of the two internal basis labels per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpinLabel {
    A,
    B,
}

impl SpinLabel {
    pub fn flip(self) -> SpinLabel {
        match self {
            SpinLabel::A => SpinLabel::B,
            SpinLabel::B => SpinLabel::A,
        }
    }

    pub fn bit(self) -> usize {
        match self {
            SpinLabel::A => 0,
            SpinLabel::B => 1,
        }
    }

    pub fn letter(self) -> char {
        match self {
            SpinLabel::A => 'a',
            SpinLabel::B => 'b',
        }
    }
}

/// Global slot id, 1-based.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SlotId(pub u8);

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The four maximally entangled two-slot states.
///
/// With `s = 1/sqrt(2)`:
/// - `Alpha = s (a b + b a)`
/// - `Beta  = s (a b - b a)`
/// - `Gamma = s (a a + b b)`
/// - `Delta = s (a a - b b)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BellKind {
    Alpha,
    Beta,
    Gamma,
    Delta,
}

pub const BELL_KINDS: [BellKind; 4] = [
    BellKind::Alpha,
    BellKind::Beta,
    BellKind::Gamma,
    BellKind::Delta,
];

impl BellKind {
    pub fn index(self) -> usize {
        match self {
            BellKind::Alpha => 0,
            BellKind::Beta => 1,
            BellKind::Gamma => 2,
            BellKind::Delta => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BellKind::Alpha => "alpha",
            BellKind::Beta => "beta",
            BellKind::Gamma => "gamma",
            BellKind::Delta => "delta",
        }
    }

    /// Label pairs and signs of the two terms, in (first, second) slot order.
    fn terms(self) -> [((SpinLabel, SpinLabel), f64); 2] {
        use SpinLabel::{A, B};
        match self {
            BellKind::Alpha => [((A, B), 1.0), ((B, A), 1.0)],
            BellKind::Beta => [((A, B), 1.0), ((B, A), -1.0)],
            BellKind::Gamma => [((A, A), 1.0), ((B, B), 1.0)],
            BellKind::Delta => [((A, A), 1.0), ((B, B), -1.0)],
        }
    }
}

impl fmt::Display for BellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpha" => Ok(BellKind::Alpha),
            "beta" => Ok(BellKind::Beta),
            "gamma" => Ok(BellKind::Gamma),
            "delta" => Ok(BellKind::Delta),
            other => Err(format!("unknown bell state name `{other}`")),
        }
    }
}

/// One product term: a label per covered slot plus a complex amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductTerm {
    pub labels: Vec<SpinLabel>,
    pub amplitude: Complex64,
}

/// A sparse internal state over a fixed, sorted set of slot ids.
///
/// Terms are kept canonical: sorted lexicographically by label tuple, no
/// duplicate tuples, no amplitudes below [`AMP_EPS`]. States produced by the
/// public constructors are unit-norm; [`InternalState::add_scaled`] exists
/// for building linear combinations and may leave the norm arbitrary until
/// [`InternalState::normalized`] is called.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalState {
    slots: Vec<SlotId>,
    terms: Vec<ProductTerm>,
}

impl InternalState {
    /// Builds a state from raw terms, canonicalizing as it goes.
    pub fn new(slots: Vec<SlotId>, terms: Vec<ProductTerm>) -> Result<Self, SpinError> {
        if slots.is_empty() {
            return Err(SpinError::EmptyState);
        }
        let mut sorted = slots.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(SpinError::RepeatedSlot { slot: w[0].0 });
            }
        }
        // Terms arrive with labels aligned to the caller's slot order; realign
        // to the sorted order before canonicalizing.
        let perm: Vec<usize> = sorted
            .iter()
            .map(|s| slots.iter().position(|t| t == s).unwrap())
            .collect();
        let mut state = InternalState {
            slots: sorted,
            terms: Vec::with_capacity(terms.len()),
        };
        for t in terms {
            if t.labels.len() != state.slots.len() {
                return Err(SpinError::SlotMismatch);
            }
            let labels: Vec<SpinLabel> = perm.iter().map(|&p| t.labels[p]).collect();
            state.push_term(labels, t.amplitude);
        }
        if state.terms.is_empty() {
            return Err(SpinError::EmptyState);
        }
        Ok(state)
    }

    /// A single product term with unit amplitude, e.g. `a1 b2`.
    pub fn basis(assignment: &[(SlotId, SpinLabel)]) -> Result<Self, SpinError> {
        let slots: Vec<SlotId> = assignment.iter().map(|(s, _)| *s).collect();
        let labels: Vec<SpinLabel> = assignment.iter().map(|(_, l)| *l).collect();
        InternalState::new(
            slots,
            vec![ProductTerm {
                labels,
                amplitude: Complex64::new(1.0, 0.0),
            }],
        )
    }

    fn push_term(&mut self, labels: Vec<SpinLabel>, amplitude: Complex64) {
        match self.terms.binary_search_by(|t| t.labels.cmp(&labels)) {
            Ok(pos) => {
                self.terms[pos].amplitude += amplitude;
                if self.terms[pos].amplitude.norm() < AMP_EPS {
                    self.terms.remove(pos);
                }
            }
            Err(pos) => {
                if amplitude.norm() >= AMP_EPS {
                    self.terms.insert(pos, ProductTerm { labels, amplitude });
                }
            }
        }
    }

    pub fn slots(&self) -> &[SlotId] {
        &self.slots
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn terms(&self) -> &[ProductTerm] {
        &self.terms
    }

    fn slot_pos(&self, slot: SlotId) -> Result<usize, SpinError> {
        self.slots
            .iter()
            .position(|s| *s == slot)
            .ok_or(SpinError::UnknownSlot { slot: slot.0 })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Scales every amplitude.
    pub fn scaled(&self, factor: Complex64) -> Result<Self, SpinError> {
        InternalState::new(
            self.slots.clone(),
            self.terms
                .iter()
                .map(|t| ProductTerm {
                    labels: t.labels.clone(),
                    amplitude: t.amplitude * factor,
                })
                .collect(),
        )
    }

    /// `self + factor * other`; both states must cover the same slots.
    /// The result may be unnormalized or empty (`None` if it cancels).
    pub fn add_scaled(&self, other: &Self, factor: Complex64) -> Result<Option<Self>, SpinError> {
        if self.slots != other.slots {
            return Err(SpinError::SlotMismatch);
        }
        let mut out = self.clone();
        for t in &other.terms {
            out.push_term(t.labels.clone(), t.amplitude * factor);
        }
        if out.terms.is_empty() {
            Ok(None)
        } else {
            Ok(Some(out))
        }
    }

    /// Unit-norm copy.
    pub fn normalized(&self) -> Result<Self, SpinError> {
        let n = self.norm();
        if n < AMP_EPS {
            return Err(SpinError::ZeroNorm);
        }
        self.scaled(Complex64::new(1.0 / n, 0.0))
    }

    /// Rephased so the first canonical term has a positive real amplitude.
    pub fn canonical_phase(&self) -> (Complex64, Self) {
        let lead = self.terms[0].amplitude;
        let phase = lead / lead.norm();
        let state = self
            .scaled(phase.conj())
            .expect("rephasing keeps the term list valid");
        (phase, state)
    }

    /// Hermitian inner product; conjugate-linear in `self`.
    pub fn inner(&self, other: &Self) -> Result<Complex64, SpinError> {
        if self.slots != other.slots {
            return Err(SpinError::SlotMismatch);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        let (mut i, mut j) = (0, 0);
        while i < self.terms.len() && j < other.terms.len() {
            match self.terms[i].labels.cmp(&other.terms[j].labels) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.terms[i].amplitude.conj() * other.terms[j].amplitude;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(acc)
    }

    /// Keeps only terms whose label at `slot` equals `label` (unnormalized).
    /// `None` if nothing survives.
    pub fn project(&self, slot: SlotId, label: SpinLabel) -> Result<Option<Self>, SpinError> {
        let pos = self.slot_pos(slot)?;
        let kept: Vec<ProductTerm> = self
            .terms
            .iter()
            .filter(|t| t.labels[pos] == label)
            .cloned()
            .collect();
        if kept.is_empty() {
            Ok(None)
        } else {
            Ok(Some(InternalState {
                slots: self.slots.clone(),
                terms: kept,
            }))
        }
    }

    /// Term-list equality within `tol`, same slot cover required.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if self.slots != other.slots || self.terms.len() != other.terms.len() {
            return false;
        }
        self.terms
            .iter()
            .zip(&other.terms)
            .all(|(x, y)| x.labels == y.labels && (x.amplitude - y.amplitude).norm() <= tol)
    }

    /// Equality up to a single global phase.
    pub fn approx_eq_up_to_phase(&self, other: &Self, tol: f64) -> bool {
        let (_, lhs) = self.canonical_phase();
        let (_, rhs) = other.canonical_phase();
        lhs.approx_eq(&rhs, tol)
    }
}

impl fmt::Display for InternalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (idx, term) in self.terms.iter().enumerate() {
            let amp = term.amplitude;
            // Pull a leading minus out of purely real negative amplitudes so
            // sums read naturally: `0.5 a1 b2 - 0.5 b1 a2`.
            let (sign_neg, shown) = if amp.im.abs() < AMP_EPS && amp.re < 0.0 {
                (true, -amp)
            } else {
                (false, amp)
            };
            if idx == 0 {
                if sign_neg {
                    write!(f, "-")?;
                }
            } else if sign_neg {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let amp_str = format_amplitude(shown);
            if amp_str != "1" {
                write!(f, "{amp_str} ")?;
            }
            let labels: Vec<String> = term
                .labels
                .iter()
                .zip(&self.slots)
                .map(|(l, s)| format!("{}{}", l.letter(), s))
                .collect();
            write!(f, "{}", labels.join(" "))?;
        }
        Ok(())
    }
}

/// The normalized two-slot Bell state of the given kind on slots `i`, `j`
/// of an `n`-slot system. The state covers exactly `{i, j}`; callers tensor
/// the remaining slots separately.
pub fn bell_state(kind: BellKind, i: SlotId, j: SlotId, n: u8) -> Result<InternalState, SpinError> {
    for s in [i, j] {
        if s.0 < 1 || s.0 > n {
            return Err(SpinError::InvalidSlot { slot: s.0, n });
        }
    }
    if i == j {
        return Err(SpinError::RepeatedSlot { slot: i.0 });
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let terms = kind
        .terms()
        .iter()
        .map(|((li, lj), sign)| ProductTerm {
            labels: vec![*li, *lj],
            amplitude: Complex64::new(s * sign, 0.0),
        })
        .collect();
    // `new` realigns labels if i > j.
    InternalState::new(vec![i, j], terms)
}

/// Tensor product of states with pairwise disjoint slot sets.
pub fn tensor(states: &[InternalState]) -> Result<InternalState, SpinError> {
    if states.is_empty() {
        return Err(SpinError::EmptyState);
    }
    let mut seen: BTreeSet<SlotId> = BTreeSet::new();
    for st in states {
        for s in st.slots() {
            if !seen.insert(*s) {
                return Err(SpinError::OverlappingSlots { slot: s.0 });
            }
        }
    }
    let slots: Vec<SlotId> = seen.into_iter().collect();
    // Cross product of term lists; labels are scattered to the combined
    // positions of each factor's slots.
    let positions: Vec<Vec<usize>> = states
        .iter()
        .map(|st| {
            st.slots()
                .iter()
                .map(|s| slots.iter().position(|t| t == s).unwrap())
                .collect()
        })
        .collect();
    let mut terms: Vec<ProductTerm> = vec![ProductTerm {
        labels: vec![SpinLabel::A; slots.len()],
        amplitude: Complex64::new(1.0, 0.0),
    }];
    for (st, pos) in states.iter().zip(&positions) {
        let mut next = Vec::with_capacity(terms.len() * st.terms().len());
        for base in &terms {
            for t in st.terms() {
                let mut labels = base.labels.clone();
                for (p, l) in pos.iter().zip(&t.labels) {
                    labels[*p] = *l;
                }
                next.push(ProductTerm {
                    labels,
                    amplitude: base.amplitude * t.amplitude,
                });
            }
        }
        terms = next;
    }
    InternalState::new(slots, terms)
}

/// Coefficients of a 4-slot state in the product Bell basis
/// `bell_m(pair1) (x) bell_n(pair2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BellCoefficients {
    pub pair1: (SlotId, SlotId),
    pub pair2: (SlotId, SlotId),
    coeffs: [[Complex64; 4]; 4],
}

impl BellCoefficients {
    pub fn get(&self, m: BellKind, n: BellKind) -> Complex64 {
        self.coeffs[m.index()][n.index()]
    }

    /// Iterates all sixteen coefficients in (alpha..delta, alpha..delta) order.
    pub fn iter(&self) -> impl Iterator<Item = (BellKind, BellKind, Complex64)> + '_ {
        BELL_KINDS.iter().flat_map(move |m| {
            BELL_KINDS
                .iter()
                .map(move |n| (*m, *n, self.coeffs[m.index()][n.index()]))
        })
    }

    /// Coefficients with magnitude above [`AMP_EPS`].
    pub fn nonzero(&self) -> Vec<(BellKind, BellKind, Complex64)> {
        self.iter().filter(|(_, _, c)| c.norm() >= AMP_EPS).collect()
    }

    pub fn sum_norm_sqr(&self) -> f64 {
        self.iter().map(|(_, _, c)| c.norm_sqr()).sum()
    }

    /// Rebuilds the state `sum_mn c_mn bell_m(pair1) (x) bell_n(pair2)`.
    pub fn reconstruct(&self) -> Result<InternalState, SpinError> {
        let n = 4;
        let mut acc: Option<InternalState> = None;
        for (m, kn, c) in self.iter() {
            if c.norm() < AMP_EPS {
                continue;
            }
            let prod = tensor(&[
                bell_state(m, self.pair1.0, self.pair1.1, n)?,
                bell_state(kn, self.pair2.0, self.pair2.1, n)?,
            ])?
            .scaled(c)?;
            acc = Some(match acc {
                None => prod,
                Some(a) => a
                    .add_scaled(&prod, Complex64::new(1.0, 0.0))?
                    .ok_or(SpinError::ZeroNorm)?,
            });
        }
        acc.ok_or(SpinError::ZeroNorm)
    }
}

/// Expands a 4-slot state in the product Bell basis over the two given
/// slot pairs. The pairs must cover all four slots of the state.
pub fn bell_decompose(
    state: &InternalState,
    pair1: (SlotId, SlotId),
    pair2: (SlotId, SlotId),
) -> Result<BellCoefficients, SpinError> {
    if state.n_slots() != 4 {
        return Err(SpinError::NotFourSlots {
            n: state.n_slots(),
        });
    }
    let mut cover: Vec<SlotId> = vec![pair1.0, pair1.1, pair2.0, pair2.1];
    cover.sort();
    for w in cover.windows(2) {
        if w[0] == w[1] {
            return Err(SpinError::RepeatedSlot { slot: w[0].0 });
        }
    }
    if cover != state.slots() {
        return Err(SpinError::BadBipartition(
            "pairs must cover exactly the state's slots".into(),
        ));
    }
    let mut coeffs = [[Complex64::new(0.0, 0.0); 4]; 4];
    for m in BELL_KINDS {
        for n in BELL_KINDS {
            let basis = tensor(&[
                bell_state(m, pair1.0, pair1.1, 4)?,
                bell_state(n, pair2.0, pair2.1, 4)?,
            ])?;
            coeffs[m.index()][n.index()] = basis.inner(state)?;
        }
    }
    Ok(BellCoefficients {
        pair1,
        pair2,
        coeffs,
    })
}

/// One component of a Bell-basis split on a slot pair.
#[derive(Debug, Clone)]
pub struct BellComponent {
    pub kind: BellKind,
    /// Coefficient of `bell_kind (x) rest` in the original state.
    pub amplitude: Complex64,
    /// Normalized state of the remaining slots, rephased so its leading term
    /// is positive real. `None` when the state covers only the split pair.
    pub rest: Option<InternalState>,
}

/// Splits `state = sum_m amplitude_m * bell_m(i, j) (x) rest_m` over the
/// Bell basis of slots `(i, j)`. Components with zero amplitude carry
/// `amplitude == 0` and `rest == None`.
pub fn bell_split(
    state: &InternalState,
    i: SlotId,
    j: SlotId,
) -> Result<[BellComponent; 4], SpinError> {
    let pi = state.slot_pos(i)?;
    let pj = state.slot_pos(j)?;
    if i == j {
        return Err(SpinError::RepeatedSlot { slot: i.0 });
    }
    let rest_slots: Vec<SlotId> = state
        .slots()
        .iter()
        .copied()
        .filter(|s| *s != i && *s != j)
        .collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;

    let mut out: Vec<BellComponent> = Vec::with_capacity(4);
    for kind in BELL_KINDS {
        // <bell_kind(i,j) (x) u | state> for every rest tuple u.
        let mut rest_terms: Vec<ProductTerm> = Vec::new();
        let mut scalar = Complex64::new(0.0, 0.0);
        for term in state.terms() {
            let pair = (term.labels[pi], term.labels[pj]);
            let coeff = kind
                .terms()
                .iter()
                .find(|(labels, _)| *labels == pair)
                .map(|(_, sign)| Complex64::new(s * sign, 0.0));
            let Some(coeff) = coeff else { continue };
            let amp = coeff.conj() * term.amplitude;
            if rest_slots.is_empty() {
                scalar += amp;
            } else {
                let labels: Vec<SpinLabel> = term
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|(idx, _)| *idx != pi && *idx != pj)
                    .map(|(_, l)| *l)
                    .collect();
                rest_terms.push(ProductTerm {
                    labels,
                    amplitude: amp,
                });
            }
        }
        if rest_slots.is_empty() {
            out.push(BellComponent {
                kind,
                amplitude: scalar,
                rest: None,
            });
            continue;
        }
        match InternalState::new(rest_slots.clone(), rest_terms) {
            Err(SpinError::EmptyState) => out.push(BellComponent {
                kind,
                amplitude: Complex64::new(0.0, 0.0),
                rest: None,
            }),
            Err(e) => return Err(e),
            Ok(raw) => {
                let norm = raw.norm();
                let (phase, canonical) = raw
                    .normalized()
                    .expect("nonempty term list has positive norm")
                    .canonical_phase();
                out.push(BellComponent {
                    kind,
                    amplitude: phase * norm,
                    rest: Some(canonical),
                });
            }
        }
    }
    Ok(out.try_into().expect("four components"))
}

/// Dense density matrix over a sorted subset of slots. Basis index order is
/// lexicographic in the kept slots (first kept slot is the most significant
/// bit, label `a` = 0, `b` = 1).
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    slots: Vec<SlotId>,
    mat: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn slots(&self) -> &[SlotId] {
        &self.slots
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.mat[(row, col)]
    }

    pub fn trace(&self) -> Complex64 {
        self.mat.trace()
    }

    pub fn max_abs_diff(&self, other: &DMatrix<Complex64>) -> f64 {
        (&self.mat - other)
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// Largest deviation from `(1/dim) * I`.
    pub fn max_dev_from_maximally_mixed(&self) -> f64 {
        let dim = self.dim();
        let ident = DMatrix::<Complex64>::identity(dim, dim) / Complex64::new(dim as f64, 0.0);
        self.max_abs_diff(&ident)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (&self.mat - self.mat.adjoint())
            .iter()
            .all(|c| c.norm() <= tol)
    }

    /// Eigenvalues of the (Hermitian) matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .mat
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Transposes the indices of one kept slot.
    pub fn partial_transpose(&self, slot: SlotId) -> Result<DensityMatrix, SpinError> {
        let pos = self
            .slots
            .iter()
            .position(|s| *s == slot)
            .ok_or(SpinError::UnknownSlot { slot: slot.0 })?;
        let n = self.slots.len();
        let bit = n - 1 - pos; // most significant bit is the first slot
        let mask = 1usize << bit;
        let dim = self.dim();
        let mut out = DMatrix::<Complex64>::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                let rr = (r & !mask) | (c & mask);
                let cc = (c & !mask) | (r & mask);
                out[(rr, cc)] = self.mat[(r, c)];
            }
        }
        Ok(DensityMatrix {
            slots: self.slots.clone(),
            mat: out,
        })
    }

    /// Negativity witness: the smallest eigenvalue of the partial transpose.
    /// For two-slot matrices a value below `-RANK_EPS` certifies entanglement
    /// and nonnegativity certifies separability.
    pub fn min_ppt_eigenvalue(&self) -> Result<f64, SpinError> {
        let slot = *self.slots.last().ok_or(SpinError::EmptyKeep)?;
        let pt = self.partial_transpose(slot)?;
        Ok(pt.eigenvalues().first().copied().unwrap_or(0.0))
    }

    /// Probability of finding `label` at `slot` (sum of matching diagonal
    /// entries).
    pub fn probability(&self, slot: SlotId, label: SpinLabel) -> Result<f64, SpinError> {
        let pos = self
            .slots
            .iter()
            .position(|s| *s == slot)
            .ok_or(SpinError::UnknownSlot { slot: slot.0 })?;
        let bit = self.slots.len() - 1 - pos;
        let mut p = 0.0;
        for idx in 0..self.dim() {
            if (idx >> bit) & 1 == label.bit() {
                p += self.mat[(idx, idx)].re;
            }
        }
        Ok(p)
    }

    /// Conditional probability of `label_at` at `slot` given `given` at
    /// `given_slot`.
    pub fn conditional_probability(
        &self,
        slot: SlotId,
        label_at: SpinLabel,
        given_slot: SlotId,
        given: SpinLabel,
    ) -> Result<f64, SpinError> {
        let pos_a = self
            .slots
            .iter()
            .position(|s| *s == slot)
            .ok_or(SpinError::UnknownSlot { slot: slot.0 })?;
        let pos_g = self
            .slots
            .iter()
            .position(|s| *s == given_slot)
            .ok_or(SpinError::UnknownSlot {
                slot: given_slot.0,
            })?;
        let bit_a = self.slots.len() - 1 - pos_a;
        let bit_g = self.slots.len() - 1 - pos_g;
        let mut joint = 0.0;
        let mut marginal = 0.0;
        for idx in 0..self.dim() {
            if (idx >> bit_g) & 1 != given.bit() {
                continue;
            }
            let p = self.mat[(idx, idx)].re;
            marginal += p;
            if (idx >> bit_a) & 1 == label_at.bit() {
                joint += p;
            }
        }
        if marginal <= 0.0 {
            return Err(SpinError::ZeroNorm);
        }
        Ok(joint / marginal)
    }
}

/// Accumulates `weight * Tr_discard |s1><s2|` into `mat`. Both states must
/// cover the same slots; `keep` selects the kept slots in ascending order.
pub(crate) fn accumulate_reduced_outer(
    mat: &mut DMatrix<Complex64>,
    weight: Complex64,
    s1: &InternalState,
    s2: &InternalState,
    keep: &[SlotId],
) -> Result<(), SpinError> {
    if s1.slots() != s2.slots() {
        return Err(SpinError::SlotMismatch);
    }
    let keep_pos: Vec<usize> = keep
        .iter()
        .map(|s| s1.slot_pos(*s))
        .collect::<Result<_, _>>()?;
    let discard_pos: Vec<usize> = (0..s1.n_slots()).filter(|p| !keep_pos.contains(p)).collect();
    let index_of = |labels: &[SpinLabel]| -> usize {
        keep_pos
            .iter()
            .fold(0usize, |acc, &p| (acc << 1) | labels[p].bit())
    };
    for t1 in s1.terms() {
        for t2 in s2.terms() {
            if discard_pos.iter().any(|&p| t1.labels[p] != t2.labels[p]) {
                continue;
            }
            let r = index_of(&t1.labels);
            let c = index_of(&t2.labels);
            mat[(r, c)] += weight * t1.amplitude * t2.amplitude.conj();
        }
    }
    Ok(())
}

/// Reduced density matrix of a weighted mixture of pure states, tracing out
/// every slot not in `keep`. Weights must be nonnegative; they are used as
/// given (pass probabilities summing to one for a normalized result).
pub fn reduced_density(
    mixture: &[(f64, InternalState)],
    keep: &[SlotId],
) -> Result<DensityMatrix, SpinError> {
    let first = mixture.first().ok_or(SpinError::EmptyState)?;
    if keep.is_empty() {
        return Err(SpinError::EmptyKeep);
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort();
    keep_sorted.dedup();
    if keep_sorted.len() == first.1.n_slots() {
        return Err(SpinError::KeepAll);
    }
    let dim = 1usize << keep_sorted.len();
    let mut mat = DMatrix::<Complex64>::zeros(dim, dim);
    for (w, state) in mixture {
        if *w < 0.0 {
            return Err(SpinError::NegativeWeight { weight: *w });
        }
        if state.slots() != first.1.slots() {
            return Err(SpinError::SlotMismatch);
        }
        accumulate_reduced_outer(&mut mat, Complex64::new(*w, 0.0), state, state, &keep_sorted)?;
    }
    Ok(DensityMatrix {
        slots: keep_sorted,
        mat,
    })
}

pub(crate) fn density_from_parts(slots: Vec<SlotId>, mat: DMatrix<Complex64>) -> DensityMatrix {
    DensityMatrix { slots, mat }
}

/// Schmidt rank of a pure state across a bipartition of all its slots;
/// singular values above [`RANK_EPS`] count.
pub fn schmidt_rank(
    state: &InternalState,
    left: &[SlotId],
    right: &[SlotId],
) -> Result<usize, SpinError> {
    let mut cover: Vec<SlotId> = left.iter().chain(right.iter()).copied().collect();
    cover.sort();
    for w in cover.windows(2) {
        if w[0] == w[1] {
            return Err(SpinError::RepeatedSlot { slot: w[0].0 });
        }
    }
    if cover != state.slots() || left.is_empty() || right.is_empty() {
        return Err(SpinError::BadBipartition(
            "groups must partition the state's slots".into(),
        ));
    }
    let mut left_sorted = left.to_vec();
    left_sorted.sort();
    let mut right_sorted = right.to_vec();
    right_sorted.sort();
    let lpos: Vec<usize> = left_sorted
        .iter()
        .map(|s| state.slot_pos(*s))
        .collect::<Result<_, _>>()?;
    let rpos: Vec<usize> = right_sorted
        .iter()
        .map(|s| state.slot_pos(*s))
        .collect::<Result<_, _>>()?;
    let (lm, rn) = (1usize << lpos.len(), 1usize << rpos.len());
    let mut m = DMatrix::<Complex64>::zeros(lm, rn);
    for t in state.terms() {
        let r = lpos.iter().fold(0usize, |a, &p| (a << 1) | t.labels[p].bit());
        let c = rpos.iter().fold(0usize, |a, &p| (a << 1) | t.labels[p].bit());
        m[(r, c)] += t.amplitude;
    }
    // Squared singular values are the eigenvalues of M M^dagger.
    let gram = &m * m.adjoint();
    let rank = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .filter(|ev| **ev > RANK_EPS * RANK_EPS)
        .count();
    Ok(rank)
}

/// Whether any slot of `left` is entangled with any slot of `right`.
///
/// Each cross pair `(i, j)` is tested on its two-slot marginal density
/// matrix via the partial-transpose witness (exact for two two-level
/// systems). Slots outside a tested pair are traced out, so this asks the
/// pairwise question: "does some particle on the left share entanglement
/// with some particle on the right?". The groups must be disjoint nonempty
/// subsets of the state's slots; they need not cover it. Note a group-level
/// correlation can exist without any entangled pair; [`schmidt_rank`]
/// measures that group-level quantity on full bipartitions instead.
pub fn is_entangled(
    state: &InternalState,
    left: &[SlotId],
    right: &[SlotId],
) -> Result<bool, SpinError> {
    let mut cover: Vec<SlotId> = left.iter().chain(right.iter()).copied().collect();
    cover.sort();
    for w in cover.windows(2) {
        if w[0] == w[1] {
            return Err(SpinError::RepeatedSlot { slot: w[0].0 });
        }
    }
    if left.is_empty() || right.is_empty() {
        return Err(SpinError::BadBipartition(
            "both groups must be nonempty".into(),
        ));
    }
    for s in &cover {
        if !state.slots().contains(s) {
            return Err(SpinError::UnknownSlot { slot: s.0 });
        }
    }
    for i in left {
        for j in right {
            let entangled = if state.n_slots() == 2 {
                schmidt_rank(state, &[*i], &[*j])? > 1
            } else {
                let rho = reduced_density(&[(1.0, state.clone())], &[*i, *j])?;
                rho.min_ppt_eigenvalue()? < -RANK_EPS
            };
            if entangled {
                return Ok(true);
            }
        }
    }
    Ok(false)
}
