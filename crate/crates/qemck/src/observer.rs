//! Records, persistent records, informational persistence, admissible
//! observers and communities.
//!
//! A subsystem's information survives a step when some same-dimension
//! carrier holds a faithful copy (a record) and the step acts on that
//! carrier as a local unitary times a residual map. Informational
//! persistence demands such a carrier chain from every moment to the
//! end of the history; a system is an admissible observer when the
//! background observer can never rule persistence out.

use crate::linalg::{cr, hermitian_eigen, permute_factors, ComplexMatrix, Tolerance, C64};
use crate::protocol::{build_protocol, Protocol, ProtocolError, SlotSpec, StepMap, StepSpec};
use crate::system::{ModelError, RelativeState, StepDef, System, Universe};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ObserverError {
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
    #[error("record check needs systems of equal dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("community must contain the background observer")]
    ObserverNotInCommunity,
}

/// Witness that `target` is a record of `source` in a state: a unitary
/// encoder mapping each positive-probability basis element of the
/// source to the target's conditional state.
#[derive(Debug, Clone)]
pub struct RecordWitness {
    pub source: System,
    pub target: System,
    pub encoder: ComplexMatrix,
    pub conditional_states: BTreeMap<usize, Vec<C64>>,
    pub zero_prob_indices: BTreeSet<usize>,
}

/// Tests whether `b` holds a faithful copy of `a`'s basis content in
/// the given state: every positive-probability basis element of `a`
/// must leave `b` in a pure conditional state, and those conditionals
/// must be pairwise orthogonal.
pub fn is_record(
    a: &System,
    b: &System,
    state: &RelativeState,
    tol: Tolerance,
) -> Result<Option<RecordWitness>, ObserverError> {
    let universe = &state.universe;
    let dim_a = a.dim(universe);
    let dim_b = b.dim(universe);
    if dim_a != dim_b {
        return Err(ObserverError::DimensionMismatch(dim_a, dim_b));
    }
    let a_labels = a.label_vec();
    let b_labels = b.label_vec();
    let loose = decision_eps(tol);

    let mut conditionals: BTreeMap<usize, Vec<C64>> = BTreeMap::new();
    let mut zero_prob = BTreeSet::new();
    for idx in 0..dim_a {
        match state.conditional_reduced(&a_labels, idx, &b_labels, tol)? {
            None => {
                zero_prob.insert(idx);
            }
            Some((_prob, sigma)) => {
                // purity: tr(sigma^2) must be 1
                let purity = sigma.matmul(&sigma).trace().re;
                if purity < 1.0 - loose {
                    return Ok(None);
                }
                let (vals, vecs) = hermitian_eigen(&sigma);
                debug_assert!(vals[0] > 0.5);
                let v: Vec<C64> = (0..dim_b).map(|i| vecs.get(i, 0)).collect();
                conditionals.insert(idx, v);
            }
        }
    }
    // pairwise orthogonality of the conditional family
    let keys: Vec<usize> = conditionals.keys().copied().collect();
    for (i, &ki) in keys.iter().enumerate() {
        for &kj in keys.iter().skip(i + 1) {
            let inner: C64 = conditionals[&ki]
                .iter()
                .zip(conditionals[&kj].iter())
                .map(|(x, y)| x.conj() * y)
                .sum();
            if inner.norm() > loose {
                return Ok(None);
            }
        }
    }
    let encoder = match unitary_extension(&conditionals, &zero_prob, dim_a) {
        Some(u) => u,
        None => return Ok(None),
    };
    Ok(Some(RecordWitness {
        source: a.clone(),
        target: b.clone(),
        encoder,
        conditional_states: conditionals,
        zero_prob_indices: zero_prob,
    }))
}

/// Completes the positive-index conditionals to a full unitary by
/// Gram-Schmidt over the standard basis; zero-probability indices take
/// the completion vectors in order.
fn unitary_extension(
    conditionals: &BTreeMap<usize, Vec<C64>>,
    zero_prob: &BTreeSet<usize>,
    dim: usize,
) -> Option<ComplexMatrix> {
    let mut columns: Vec<Option<Vec<C64>>> = vec![None; dim];
    let mut fixed: Vec<Vec<C64>> = Vec::new();
    for (&idx, v) in conditionals {
        columns[idx] = Some(v.clone());
        fixed.push(v.clone());
    }
    let mut completion: Vec<Vec<C64>> = Vec::new();
    for i in 0..dim {
        if fixed.len() + completion.len() >= dim {
            break;
        }
        let mut r: Vec<C64> = (0..dim)
            .map(|k| if k == i { cr(1.0) } else { cr(0.0) })
            .collect();
        for base in fixed.iter().chain(completion.iter()) {
            let inner: C64 = base.iter().zip(r.iter()).map(|(x, y)| x.conj() * y).sum();
            for k in 0..dim {
                r[k] -= inner * base[k];
            }
        }
        let norm: f64 = r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.5 {
            let inv = cr(1.0 / norm);
            completion.push(r.iter().map(|z| z * inv).collect());
        }
    }
    let mut next = completion.into_iter();
    for &idx in zero_prob {
        columns[idx] = Some(next.next()?);
    }
    let mut u = ComplexMatrix::zeros(dim, dim);
    for (c, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (r, z) in col.into_iter().enumerate() {
            u.set(r, c, z);
        }
    }
    if !u.is_unitary(Tolerance::new(1e-7)) {
        return None;
    }
    Some(u)
}

fn decision_eps(tol: Tolerance) -> f64 {
    (tol.eps * 100.0).max(1e-8)
}

/// Attempts to split a step's realized linear map as a local unitary on
/// `part` tensored with a residual map on the complement; returns the
/// local unitary. For non-selective Kraus families every component must
/// factor with the same local unitary (up to phase).
pub fn factor_as_local_unitary(
    map: &StepMap,
    part: &System,
    universe: &Universe,
    tol: Tolerance,
) -> Option<ComplexMatrix> {
    match map {
        StepMap::Unitary(m) | StepMap::Branch(m) => factor_matrix(m, part, universe, tol),
        StepMap::Kraus(ks) => {
            let mut shared: Option<ComplexMatrix> = None;
            for k in ks {
                let u = factor_matrix(k, part, universe, tol)?;
                match &shared {
                    None => shared = Some(u),
                    Some(u0) => {
                        // equal up to a global phase
                        let d = u0.adjoint().matmul(&u);
                        let phase = d.get(0, 0);
                        if (phase.norm() - 1.0).abs() > 1e-6 {
                            return None;
                        }
                        let m = u0.rows;
                        let mut diff = 0.0f64;
                        for i in 0..m {
                            for j in 0..m {
                                let expect = if i == j { phase } else { cr(0.0) };
                                diff += (d.get(i, j) - expect).norm_sqr();
                            }
                        }
                        if diff.sqrt() > 1e-6 {
                            return None;
                        }
                    }
                }
            }
            shared
        }
    }
}

/// Rank-one reshuffle test: `m = u ⊗ w` across the `part`/rest split
/// with `u` unitary (after scale normalization).
fn factor_matrix(
    m: &ComplexMatrix,
    part: &System,
    universe: &Universe,
    _tol: Tolerance,
) -> Option<ComplexMatrix> {
    let dims = universe.dims();
    let part_labels = part.label_vec();
    let rest_labels: Vec<usize> = (0..dims.len()).filter(|l| !part.contains(*l)).collect();
    let perm: Vec<usize> = part_labels.iter().chain(rest_labels.iter()).copied().collect();
    let mp = permute_factors(m, &dims, &perm);
    let pdim: usize = part_labels.iter().map(|&l| dims[l]).product();
    let rdim: usize = rest_labels
        .iter()
        .map(|&l| dims[l])
        .product::<usize>()
        .max(1);

    // reshuffle: r[(i,k),(j,l)] = mp[i*rdim + j, k*rdim + l]
    let rows = pdim * pdim;
    let cols = rdim * rdim;
    let mut r = ComplexMatrix::zeros(rows, cols);
    let mut max_abs = 0.0f64;
    let mut pivot = (0usize, 0usize);
    for i in 0..pdim {
        for k in 0..pdim {
            for j in 0..rdim {
                for l in 0..rdim {
                    let v = mp.get(i * rdim + j, k * rdim + l);
                    r.set(i * pdim + k, j * rdim + l, v);
                    if v.norm() > max_abs {
                        max_abs = v.norm();
                        pivot = (i * pdim + k, j * rdim + l);
                    }
                }
            }
        }
    }
    if max_abs < 1e-12 {
        return None;
    }
    let (pr, pc) = pivot;
    let pivot_val = r.get(pr, pc);
    // rank-one check: r[a,b] == r[a,pc] * r[pr,b] / pivot
    for a in 0..rows {
        let ua = r.get(a, pc);
        for b in 0..cols {
            let expect = ua * r.get(pr, b) / pivot_val;
            if (r.get(a, b) - expect).norm() > 1e-8 * max_abs.max(1.0) {
                return None;
            }
        }
    }
    let mut u = ComplexMatrix::zeros(pdim, pdim);
    for i in 0..pdim {
        for k in 0..pdim {
            u.set(i, k, r.get(i * pdim + k, pc));
        }
    }
    // u must be unitary up to positive scale
    let g = u.adjoint().matmul(&u);
    let scale = g.trace().re / pdim as f64;
    if scale <= 1e-12 {
        return None;
    }
    let mut off = 0.0f64;
    for i in 0..pdim {
        for j in 0..pdim {
            let expect = if i == j { cr(scale) } else { cr(0.0) };
            off += (g.get(i, j) - expect).norm_sqr();
        }
    }
    if off.sqrt() > 1e-7 * scale * pdim as f64 {
        return None;
    }
    Some(u.scale(cr(1.0 / scale.sqrt())))
}

/// Witness that a step leaves a carrier intact: the extracted local
/// unitary on the carrier.
#[derive(Debug, Clone)]
pub struct FactorWitness {
    pub carrier: System,
    pub local_unitary: ComplexMatrix,
}

/// `a` has a persistent record at (1-based) step time `t` of history
/// `h` via `aprime`: `aprime` records `a` in the state before the step
/// and the step acts on `aprime` as a local unitary.
pub fn is_persistent_record(
    a: &System,
    aprime: &System,
    t: usize,
    h: &crate::protocol::History,
    universe: &Universe,
    tol: Tolerance,
) -> Result<Option<(RecordWitness, FactorWitness)>, ObserverError> {
    assert!(t >= 1 && t <= h.length(), "step time out of range");
    let record = match is_record(a, aprime, &h.states[t - 1], tol)? {
        Some(w) => w,
        None => return Ok(None),
    };
    let map = h.step_map(t - 1, universe)?;
    match factor_as_local_unitary(&map, aprime, universe, tol) {
        Some(u) => Ok(Some((
            record,
            FactorWitness {
                carrier: aprime.clone(),
                local_unitary: u,
            },
        ))),
        None => Ok(None),
    }
}

/// A carrier chain from one start time to the end of a history.
#[derive(Debug, Clone)]
pub struct ChainStart {
    /// 1-based step time the chain starts at.
    pub time: usize,
    /// Carrier after each step from `time` to the history's end.
    pub carriers: Vec<System>,
}

/// Evidence of informational persistence: one carrier chain per start
/// time.
#[derive(Debug, Clone)]
pub struct PersistenceChain {
    pub subject: System,
    pub starts: Vec<ChainStart>,
}

/// Per-history persistence search with memoized carrier survival.
struct PersistenceSearch<'a> {
    h: &'a crate::protocol::History,
    universe: &'a Universe,
    tol: Tolerance,
    candidates: Vec<System>,
    step_maps: Vec<Option<StepMap>>,
    /// (carrier labels, state time) -> chosen next carrier, or None
    survive_memo: BTreeMap<(Vec<usize>, usize), Option<System>>,
    factor_memo: BTreeMap<(Vec<usize>, usize), bool>,
}

impl<'a> PersistenceSearch<'a> {
    fn new(
        subject_dim: usize,
        h: &'a crate::protocol::History,
        universe: &'a Universe,
        tol: Tolerance,
    ) -> Self {
        let n_labels = universe.labels.len();
        let dims = universe.dims();
        let mut candidates = Vec::new();
        for mask in 1usize..(1 << n_labels) {
            let labels: Vec<usize> = (0..n_labels).filter(|l| mask & (1 << l) != 0).collect();
            let dim: usize = labels.iter().map(|&l| dims[l]).product();
            if dim == subject_dim {
                candidates.push(System::new(labels));
            }
        }
        PersistenceSearch {
            h,
            universe,
            tol,
            candidates,
            step_maps: vec![None; h.length()],
            survive_memo: BTreeMap::new(),
            factor_memo: BTreeMap::new(),
        }
    }

    fn step_factors(&mut self, k: usize, carrier: &System) -> Result<bool, ObserverError> {
        let key = (carrier.label_vec(), k);
        if let Some(&v) = self.factor_memo.get(&key) {
            return Ok(v);
        }
        if self.step_maps[k].is_none() {
            self.step_maps[k] = Some(self.h.step_map(k, self.universe)?);
        }
        let ok = factor_as_local_unitary(
            self.step_maps[k].as_ref().unwrap(),
            carrier,
            self.universe,
            self.tol,
        )
        .is_some();
        self.factor_memo.insert(key, ok);
        Ok(ok)
    }

    /// Can `x`'s content at state time `t` be carried through the
    /// remaining steps? Memoized; records the chosen next carrier.
    fn survives_from(&mut self, x: &System, t: usize) -> Result<bool, ObserverError> {
        let n = self.h.length();
        if t >= n {
            return Ok(true);
        }
        let key = (x.label_vec(), t);
        if let Some(v) = self.survive_memo.get(&key) {
            return Ok(v.is_some());
        }
        self.survive_memo.insert(key.clone(), None);
        let candidates = self.candidates.clone();
        for y in candidates {
            if is_record(x, &y, &self.h.states[t], self.tol)?.is_none() {
                continue;
            }
            if !self.step_factors(t, &y)? {
                continue;
            }
            if self.survives_from(&y, t + 1)? {
                self.survive_memo.insert(key, Some(y));
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn chain_from(&self, x: &System, mut t: usize) -> Vec<System> {
        let mut out = Vec::new();
        let mut cur = x.clone();
        while t < self.h.length() {
            match self.survive_memo.get(&(cur.label_vec(), t)) {
                Some(Some(next)) => {
                    out.push(next.clone());
                    cur = next.clone();
                    t += 1;
                }
                _ => break,
            }
        }
        out
    }
}

/// Searches for carrier chains of `a` from every start time to the end
/// of `h`; `a` is informationally persistent when all of them exist.
/// On failure returns the earliest (1-based) step time with no chain.
pub fn informationally_persistent(
    a: &System,
    h: &crate::protocol::History,
    universe: &Universe,
    tol: Tolerance,
) -> Result<Result<PersistenceChain, usize>, ObserverError> {
    let mut search = PersistenceSearch::new(a.dim(universe), h, universe, tol);
    let n = h.length();
    let mut starts = Vec::new();
    for t in 0..n {
        if !search.survives_from(a, t)? {
            return Ok(Err(t + 1));
        }
        starts.push(ChainStart {
            time: t + 1,
            carriers: search.chain_from(a, t),
        });
    }
    Ok(Ok(PersistenceChain {
        subject: a.clone(),
        starts,
    }))
}

/// Admissibility verdict with its supporting evidence.
#[derive(Debug, Clone)]
pub struct AdmissibilityVerdict {
    pub candidate: System,
    pub background: System,
    pub verdict: bool,
    pub evidence: AdmissibilityEvidence,
}

#[derive(Debug, Clone)]
pub enum AdmissibilityEvidence {
    /// The candidate is the background observer itself.
    SelfObserver,
    /// Per distinct cell: a member history in which the candidate is
    /// persistent, with its chain.
    Admissible { witnesses: Vec<CellWitness> },
    /// The earliest point at which the background observer knows the
    /// candidate is not persistent, plus per-history break times.
    Inadmissible {
        known_at: (usize, usize),
        per_history: Vec<(String, Option<usize>)>,
    },
}

#[derive(Debug, Clone)]
pub struct CellWitness {
    pub anchor: (usize, usize),
    pub witness: usize,
    pub chain: PersistenceChain,
}

/// A subsystem is an admissible observer when, at every moment of every
/// history, the background observer's cell contains at least one
/// history in which the subsystem is informationally persistent.
pub fn admissible_observer(
    a: &System,
    pi: &Protocol,
    tol: Tolerance,
) -> Result<AdmissibilityVerdict, ObserverError> {
    let universe = &pi.universe;
    if *a == universe.observer {
        return Ok(AdmissibilityVerdict {
            candidate: a.clone(),
            background: universe.observer.clone(),
            verdict: true,
            evidence: AdmissibilityEvidence::SelfObserver,
        });
    }
    let mut persists: Vec<Option<PersistenceChain>> = Vec::new();
    let mut breaks: Vec<(String, Option<usize>)> = Vec::new();
    for h in &pi.histories {
        match informationally_persistent(a, h, universe, tol)? {
            Ok(chain) => {
                persists.push(Some(chain));
                breaks.push((h.id.clone(), None));
            }
            Err(break_time) => {
                persists.push(None);
                breaks.push((h.id.clone(), Some(break_time)));
            }
        }
    }

    let mut witnesses: Vec<CellWitness> = Vec::new();
    let mut seen_cells: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    for t in 0..=pi.length {
        for h in 0..pi.histories.len() {
            let cell = pi.cell(h, t);
            if !seen_cells.insert((t, cell.members.clone())) {
                continue;
            }
            match cell.members.iter().find(|&&m| persists[m].is_some()) {
                Some(&w) => witnesses.push(CellWitness {
                    anchor: (h, t),
                    witness: w,
                    chain: persists[w].clone().unwrap(),
                }),
                None => {
                    return Ok(AdmissibilityVerdict {
                        candidate: a.clone(),
                        background: universe.observer.clone(),
                        verdict: false,
                        evidence: AdmissibilityEvidence::Inadmissible {
                            known_at: (h, t),
                            per_history: breaks,
                        },
                    });
                }
            }
        }
    }
    Ok(AdmissibilityVerdict {
        candidate: a.clone(),
        background: universe.observer.clone(),
        verdict: true,
        evidence: AdmissibilityEvidence::Admissible { witnesses },
    })
}

/// Rebuilds the protocol from a member's perspective: the member
/// becomes the background observer, measurements it witnesses stay
/// measurements, and every other measurement becomes non-selective
/// decoherence by its original actor.
pub fn re_anchor(pi: &Protocol, b: &System) -> Result<Protocol, ObserverError> {
    if *b == pi.universe.observer {
        return Ok(pi.clone());
    }
    let old = &pi.source;
    let universe = Arc::new(Universe::new(
        pi.universe.labels.clone(),
        b.clone(),
        pi.universe.agents.clone(),
        pi.universe.memory.clone(),
    )?);
    let convert = |spec: &StepSpec| -> StepSpec {
        match spec {
            StepSpec::Measure {
                name,
                actor,
                target,
                basis,
                slot,
                broadcast,
            } => {
                let witnessed = b.contains(*slot) || broadcast.iter().any(|l| b.contains(*l));
                if witnessed {
                    StepSpec::Measure {
                        name: name.clone(),
                        actor: actor.union(b),
                        target: target.clone(),
                        basis: basis.clone(),
                        slot: *slot,
                        broadcast: broadcast.clone(),
                    }
                } else {
                    StepSpec::Decohere {
                        name: name.clone(),
                        actor: actor.clone(),
                        target: target.clone(),
                        basis: basis.clone(),
                    }
                }
            }
            other => other.clone(),
        }
    };
    let slots: Vec<SlotSpec> = old
        .slots
        .iter()
        .map(|s| match s {
            SlotSpec::Shared(spec) => SlotSpec::Shared(convert(spec)),
            SlotSpec::Variants(vs) => SlotSpec::Variants(
                vs.iter()
                    .map(|(n, spec)| (n.clone(), convert(spec)))
                    .collect(),
            ),
        })
        .collect();
    let spec = crate::protocol::ProtocolSpec {
        universe,
        initial: old.initial.clone(),
        slots,
        alternatives: old.alternatives.clone(),
        halting: old.halting.clone(),
        tolerance: old.tolerance,
    };
    let mut rebuilt = build_protocol(&spec)?;
    rebuilt.gate_records = pi.gate_records.clone();
    Ok(rebuilt)
}

/// Pairwise admissibility verdicts for a set of named systems.
#[derive(Debug, Clone)]
pub struct CommunityReport {
    pub verdict: bool,
    /// (candidate, as seen by, verdict); `None` when the perspective
    /// holder cannot serve as a background observer at all.
    pub pairwise: Vec<(String, String, Option<bool>)>,
}

/// A community of admissible observers: every member is admissible with
/// respect to the background observer and to every other member (the
/// latter evaluated on the protocol re-anchored to that member).
pub fn community(
    members: &[(String, System)],
    pi: &Protocol,
    tol: Tolerance,
) -> Result<CommunityReport, ObserverError> {
    if !members.iter().any(|(_, s)| *s == pi.universe.observer) {
        return Err(ObserverError::ObserverNotInCommunity);
    }
    let mut pairwise = Vec::new();
    let mut verdict = true;
    // with respect to the background observer first
    for (name, sys) in members {
        let v = admissible_observer(sys, pi, tol)?.verdict;
        verdict &= v;
        pairwise.push((
            name.clone(),
            pi.universe.system_name(&pi.universe.observer),
            Some(v),
        ));
    }
    for (bn, bs) in members {
        if *bs == pi.universe.observer {
            continue;
        }
        match re_anchor(pi, bs) {
            Ok(re) => {
                for (an, asys) in members {
                    if an == bn {
                        continue;
                    }
                    let v = admissible_observer(asys, &re, tol)?.verdict;
                    verdict &= v;
                    pairwise.push((an.clone(), bn.clone(), Some(v)));
                }
            }
            Err(_) => {
                // the member's memory is not even definite along the
                // histories, so no description can be anchored to it
                for (an, _) in members {
                    if an == bn {
                        continue;
                    }
                    pairwise.push((an.clone(), bn.clone(), None));
                }
                verdict = false;
            }
        }
    }
    Ok(CommunityReport { verdict, pairwise })
}

/// Settles the admissibility gate of every decoherence step: each actor
/// must be an admissible observer on the protocol itself. With
/// `allow_override` the protocol is kept and the failure recorded;
/// otherwise gating fails the build.
pub fn gate_decohere_steps(
    pi: &mut Protocol,
    allow_override: bool,
    tol: Tolerance,
) -> Result<(), ObserverError> {
    let mut records = Vec::new();
    for k in 0..pi.step_names.len() {
        let def = pi.histories[0].steps[k].clone();
        if let StepDef::Decohere(d) = def.as_ref() {
            let verdict = admissible_observer(&d.actor, pi, tol)?;
            if !verdict.verdict && !allow_override {
                return Err(ObserverError::Model(ModelError::DecohereNotCleared(
                    d.name.clone(),
                )));
            }
            records.push(crate::protocol::GateRecord {
                step: d.name.clone(),
                actor: pi.universe.system_name(&d.actor),
                admissible: verdict.verdict,
                overridden: !verdict.verdict,
            });
        }
    }
    pi.gate_records.extend(records);
    Ok(())
}
