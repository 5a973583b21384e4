//! Histories, protocols, epistemic cells and described states.
//!
//! A protocol is built by threading an initial state through a step
//! list, materializing one history per realized measurement-outcome
//! combination and per declared classical alternative. Knowledge for
//! the background observer is prefix agreement over these histories;
//! classical alternatives differing only in their variant steps stay
//! epistemically merged until a recorded outcome separates them.

use crate::linalg::{cr, ComplexMatrix, Tolerance, C64};
use crate::system::{
    self, Basis, Clearance, DecohereStep, GateSpec, MeasureStep, ModelError, RelativeState,
    StepDef, System, Universe, UnitaryStep,
};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("invalid protocol: {0}")]
    Invalid(String),
    #[error("invariant violated at history `{history}`, time {time}: {what}")]
    InvariantViolated {
        history: String,
        time: usize,
        what: String,
    },
    #[error("time {0} out of range (protocol length {1})")]
    TimeOutOfRange(usize, usize),
    #[error("unknown history `{0}`")]
    UnknownHistory(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
}

/// A named classical alternative with its prior weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub name: String,
    pub weight: f64,
}

/// One entry of the step list: either shared by all alternatives, or
/// one unitary variant per alternative.
#[derive(Debug, Clone)]
pub enum SlotSpec {
    Shared(StepSpec),
    Variants(Vec<(String, StepSpec)>),
}

/// A step before materialization of its full-space matrices.
#[derive(Debug, Clone)]
pub enum StepSpec {
    Unitary {
        name: String,
        gate: GateSpec,
    },
    Measure {
        name: String,
        actor: System,
        target: Vec<usize>,
        basis: Basis,
        slot: usize,
        broadcast: Vec<usize>,
    },
    Decohere {
        name: String,
        actor: System,
        target: Vec<usize>,
        basis: Basis,
    },
}

impl StepSpec {
    pub fn name(&self) -> &str {
        match self {
            StepSpec::Unitary { name, .. }
            | StepSpec::Measure { name, .. }
            | StepSpec::Decohere { name, .. } => name,
        }
    }
}

/// Build input for a protocol: the cast, the initial amplitudes over
/// the full product basis, the step list and the classical priors.
#[derive(Debug, Clone)]
pub struct ProtocolSpec {
    pub universe: Arc<Universe>,
    pub initial: Vec<C64>,
    pub slots: Vec<SlotSpec>,
    pub alternatives: Vec<Alternative>,
    /// Outcome conjunction defining the `halted` atom, if any.
    pub halting: Vec<(String, String)>,
    pub tolerance: Tolerance,
}

/// A weighted alternating state/step sequence with realized outcomes.
#[derive(Debug, Clone)]
pub struct History {
    pub id: String,
    /// Index into the protocol's alternatives (None when no classical
    /// uncertainty was declared).
    pub alternative: Option<usize>,
    pub prior: f64,
    pub states: Vec<RelativeState>,
    pub steps: Vec<Arc<StepDef>>,
    pub outcomes: BTreeMap<usize, usize>,
    pub branch_prob: f64,
}

impl History {
    pub fn length(&self) -> usize {
        self.steps.len()
    }

    /// The linear map the history's step applies at slot `k` (the
    /// realized branch map for measurements).
    pub fn step_map(&self, k: usize, universe: &Universe) -> Result<StepMap, ProtocolError> {
        match self.steps[k].as_ref() {
            StepDef::Unitary(u) => Ok(StepMap::Unitary(u.matrix.clone())),
            StepDef::Measure(m) => {
                let outcome = *self.outcomes.get(&k).ok_or_else(|| {
                    ProtocolError::Invalid(format!("no outcome recorded at slot {}", k))
                })?;
                let p = system::embed_projector_on(universe, &m.target, &m.basis.vectors[outcome])?;
                let mut slots = vec![m.slot];
                slots.extend(m.broadcast.iter().copied());
                let shift = system::slot_shift_matrix(universe, &slots, outcome);
                Ok(StepMap::Branch(shift.matmul(&p)))
            }
            StepDef::Decohere(d) => {
                let mut kraus = Vec::new();
                for b in &d.basis.vectors {
                    kraus.push(system::embed_projector_on(universe, &d.target, b)?);
                }
                Ok(StepMap::Kraus(kraus))
            }
        }
    }
}

/// The realized linear map of one step of one history.
#[derive(Debug, Clone)]
pub enum StepMap {
    /// A unitary on the full space.
    Unitary(ComplexMatrix),
    /// A single (generally non-unitary) branch operator.
    Branch(ComplexMatrix),
    /// A non-selective Kraus family.
    Kraus(Vec<ComplexMatrix>),
}

/// The set of histories an observer cannot distinguish from the anchor
/// at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicCell {
    pub anchor: (usize, usize),
    pub members: Vec<usize>,
}

/// Record of how a decoherence step was admitted into the protocol.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GateRecord {
    pub step: String,
    pub actor: String,
    pub admissible: bool,
    pub overridden: bool,
}

/// A same-length, same-initial-state family of histories.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub universe: Arc<Universe>,
    pub histories: Vec<History>,
    pub length: usize,
    pub alternatives: Vec<Alternative>,
    pub alt_slots: BTreeSet<usize>,
    pub step_names: Vec<String>,
    pub halting: Vec<(usize, usize)>,
    pub tolerance: Tolerance,
    pub gate_records: Vec<GateRecord>,
    /// The spec this protocol was built from (used for re-anchoring).
    pub source: ProtocolSpec,
}

struct PartialHistory {
    states: Vec<RelativeState>,
    steps: Vec<Arc<StepDef>>,
    outcomes: BTreeMap<usize, usize>,
    branch_prob: f64,
}

/// Expands a spec into the full history family, pruning
/// zero-probability branches and re-checking every stored state.
pub fn build_protocol(spec: &ProtocolSpec) -> Result<Protocol, ProtocolError> {
    let tol = spec.tolerance;
    let universe = spec.universe.clone();

    // priors
    if !spec.alternatives.is_empty() {
        let total: f64 = spec.alternatives.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > tol.eps * 10.0 {
            return Err(ProtocolError::Invalid(format!(
                "alternative weights sum to {}",
                total
            )));
        }
        if spec.alternatives.iter().any(|a| a.weight <= 0.0) {
            return Err(ProtocolError::Invalid(
                "alternative weight must be positive".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for a in &spec.alternatives {
            if !seen.insert(a.name.clone()) {
                return Err(ProtocolError::Invalid(format!(
                    "duplicate alternative `{}`",
                    a.name
                )));
            }
        }
    }

    // step names unique; variant slots well-formed
    let mut names = BTreeSet::new();
    for slot in &spec.slots {
        match slot {
            SlotSpec::Shared(s) => {
                if !names.insert(s.name().to_string()) {
                    return Err(ProtocolError::Invalid(format!(
                        "duplicate step name `{}`",
                        s.name()
                    )));
                }
            }
            SlotSpec::Variants(vs) => {
                if spec.alternatives.is_empty() {
                    return Err(ProtocolError::Invalid(
                        "variant step without declared alternatives".into(),
                    ));
                }
                let expect: Vec<&str> =
                    spec.alternatives.iter().map(|a| a.name.as_str()).collect();
                let got: Vec<&str> = vs.iter().map(|(n, _)| n.as_str()).collect();
                if got != expect {
                    return Err(ProtocolError::Invalid(format!(
                        "variant slot must list one step per alternative in order ({:?})",
                        expect
                    )));
                }
                for (_, s) in vs {
                    if !matches!(s, StepSpec::Unitary { .. }) {
                        return Err(ProtocolError::Invalid(
                            "variant steps must be unitary".into(),
                        ));
                    }
                    if !names.insert(s.name().to_string()) {
                        return Err(ProtocolError::Invalid(format!(
                            "duplicate step name `{}`",
                            s.name()
                        )));
                    }
                }
            }
        }
    }

    // initial state
    let norm: f64 = spec.initial.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > tol.eps * 100.0 {
        return Err(ProtocolError::Invalid(format!(
            "initial vector has norm {}",
            norm
        )));
    }
    if spec.initial.len() != universe.total_dim() {
        return Err(ProtocolError::Invalid(format!(
            "initial vector length {} does not match total dimension {}",
            spec.initial.len(),
            universe.total_dim()
        )));
    }
    let initial = RelativeState::pure_full(universe.clone(), spec.initial.clone(), tol)?;

    // memory slot reuse across steps
    let mut used_slots = BTreeSet::new();
    for slot in &spec.slots {
        if let SlotSpec::Shared(StepSpec::Measure {
            slot: s, broadcast, ..
        }) = slot
        {
            for l in std::iter::once(*s).chain(broadcast.iter().copied()) {
                if !used_slots.insert(l) {
                    return Err(ProtocolError::Invalid(format!(
                        "memory slot `{}` used by more than one step",
                        universe.label_name(l)
                    )));
                }
            }
        }
    }

    // materialize per-alternative step lists
    let alt_indices: Vec<Option<usize>> = if spec.alternatives.is_empty() {
        vec![None]
    } else {
        (0..spec.alternatives.len()).map(Some).collect()
    };
    let mut alt_slots = BTreeSet::new();
    let mut step_names = Vec::new();
    for (k, slot) in spec.slots.iter().enumerate() {
        match slot {
            SlotSpec::Shared(s) => step_names.push(s.name().to_string()),
            SlotSpec::Variants(vs) => {
                alt_slots.insert(k);
                step_names.push(vs[0].1.name().to_string());
            }
        }
    }

    let mut shared_defs: BTreeMap<usize, Arc<StepDef>> = BTreeMap::new();
    let mut histories = Vec::new();
    for &alt in &alt_indices {
        let prior = alt.map(|i| spec.alternatives[i].weight).unwrap_or(1.0);
        let mut frontier = vec![PartialHistory {
            states: vec![initial.clone()],
            steps: Vec::new(),
            outcomes: BTreeMap::new(),
            branch_prob: 1.0,
        }];
        for (k, slot) in spec.slots.iter().enumerate() {
            let (step_spec, shared) = match slot {
                SlotSpec::Shared(s) => (s, true),
                SlotSpec::Variants(vs) => (&vs[alt.unwrap()].1, false),
            };
            let def = if shared {
                if let Some(d) = shared_defs.get(&k) {
                    d.clone()
                } else {
                    let d = Arc::new(materialize(step_spec, &universe)?);
                    shared_defs.insert(k, d.clone());
                    d
                }
            } else {
                Arc::new(materialize(step_spec, &universe)?)
            };
            let mut next = Vec::new();
            for ph in frontier {
                let last = ph.states.last().unwrap().clone();
                match def.as_ref() {
                    StepDef::Unitary(u) => {
                        let st = last.apply_unitary(&u.matrix, tol)?;
                        let mut states = ph.states.clone();
                        states.push(st);
                        let mut steps = ph.steps.clone();
                        steps.push(def.clone());
                        next.push(PartialHistory {
                            states,
                            steps,
                            outcomes: ph.outcomes.clone(),
                            branch_prob: ph.branch_prob,
                        });
                    }
                    StepDef::Measure(m) => {
                        for (outcome, p, st) in last.measure_and_record(m, tol)? {
                            let mut states = ph.states.clone();
                            states.push(st);
                            let mut steps = ph.steps.clone();
                            steps.push(def.clone());
                            let mut outcomes = ph.outcomes.clone();
                            outcomes.insert(k, outcome);
                            next.push(PartialHistory {
                                states,
                                steps,
                                outcomes,
                                branch_prob: ph.branch_prob * p,
                            });
                        }
                    }
                    StepDef::Decohere(d) => {
                        let mut cleared = d.clone();
                        cleared.clearance = Clearance::Verified;
                        let st = last.decohere(&cleared, tol)?;
                        let mut states = ph.states.clone();
                        states.push(st);
                        let mut steps = ph.steps.clone();
                        steps.push(def.clone());
                        next.push(PartialHistory {
                            states,
                            steps,
                            outcomes: ph.outcomes.clone(),
                            branch_prob: ph.branch_prob,
                        });
                    }
                }
            }
            frontier = next;
        }
        for ph in frontier {
            let id = format!("h{}", histories.len());
            histories.push(History {
                id,
                alternative: alt,
                prior,
                states: ph.states,
                steps: ph.steps,
                outcomes: ph.outcomes,
                branch_prob: ph.branch_prob,
            });
        }
    }

    if histories.is_empty() {
        return Err(ProtocolError::Invalid("protocol has no histories".into()));
    }

    // total weight
    let total: f64 = histories.iter().map(|h| h.prior * h.branch_prob).sum();
    if (total - 1.0).abs() > tol.eps * 100.0 {
        return Err(ProtocolError::Invalid(format!(
            "history weights sum to {}",
            total
        )));
    }

    // same initial state
    for h in &histories[1..] {
        if !h.states[0].approx_eq(&histories[0].states[0], tol) {
            return Err(ProtocolError::InvariantViolated {
                history: h.id.clone(),
                time: 0,
                what: "initial state differs".into(),
            });
        }
    }

    // halting condition resolution
    let mut halting = Vec::new();
    for (step_name, label) in &spec.halting {
        let slot = step_names
            .iter()
            .position(|n| n == step_name)
            .ok_or_else(|| ProtocolError::UnknownStep(step_name.clone()))?;
        let def = histories[0].steps[slot].as_ref();
        let outcome = match def {
            StepDef::Measure(m) => m.basis.outcome_index(label).ok_or_else(|| {
                ProtocolError::Invalid(format!("step `{}` has no outcome `{}`", step_name, label))
            })?,
            _ => {
                return Err(ProtocolError::Invalid(format!(
                    "halting condition references non-measurement step `{}`",
                    step_name
                )))
            }
        };
        halting.push((slot, outcome));
    }

    let protocol = Protocol {
        universe,
        histories,
        length: spec.slots.len(),
        alternatives: spec.alternatives.clone(),
        alt_slots,
        step_names,
        halting,
        tolerance: tol,
        gate_records: Vec::new(),
        source: spec.clone(),
    };
    protocol.verify_rederivation()?;
    Ok(protocol)
}

/// Whether the background observer witnesses a measurement's outcome:
/// its record lands in the observer's memory, directly or by
/// broadcast.
pub fn observed_by_background(m: &MeasureStep, universe: &Universe) -> bool {
    universe.observer.contains(m.slot)
        || m.broadcast.iter().any(|b| universe.observer.contains(*b))
}

fn materialize(spec: &StepSpec, universe: &Universe) -> Result<StepDef, ProtocolError> {
    Ok(match spec {
        StepSpec::Unitary { name, gate } => {
            let matrix = system::gate_matrix(gate, universe)?;
            StepDef::Unitary(UnitaryStep {
                name: name.clone(),
                gate: gate.clone(),
                matrix,
            })
        }
        StepSpec::Measure {
            name,
            actor,
            target,
            basis,
            slot,
            broadcast,
        } => {
            let step = MeasureStep {
                name: name.clone(),
                actor: actor.clone(),
                target: target.clone(),
                basis: basis.clone(),
                slot: *slot,
                broadcast: broadcast.clone(),
            };
            // A measurement recorded into the background observer's
            // memory is the observer's own interaction and must include
            // it; an unwitnessed measurement belongs to a candidate
            // observer and must stay outside the background observer.
            if observed_by_background(&step, universe) {
                if !universe.observer.is_subset(actor) {
                    return Err(ProtocolError::Invalid(format!(
                        "measurement `{}` writes observer memory but its actor \
                         does not include the background observer",
                        name
                    )));
                }
            } else if !actor.is_disjoint(&universe.observer) {
                return Err(ProtocolError::Invalid(format!(
                    "measurement `{}` involves the background observer but \
                     records no outcome in its memory",
                    name
                )));
            }
            let target_sys = System::new(target.iter().copied());
            if !target_sys.is_disjoint(actor) {
                return Err(ProtocolError::Invalid(format!(
                    "measurement `{}` target overlaps its actor",
                    name
                )));
            }
            if !actor.contains(*slot) || !universe.memory.contains(slot) {
                return Err(ProtocolError::Invalid(format!(
                    "measurement `{}` slot must be a memory label of the actor",
                    name
                )));
            }
            for b in broadcast {
                if !universe.memory.contains(b) {
                    return Err(ProtocolError::Invalid(format!(
                        "measurement `{}` broadcast target must be a memory label",
                        name
                    )));
                }
            }
            StepDef::Measure(step)
        }
        StepSpec::Decohere {
            name,
            actor,
            target,
            basis,
        } => {
            let target_sys = System::new(target.iter().copied());
            if !target_sys.is_disjoint(actor) {
                return Err(ProtocolError::Invalid(format!(
                    "decoherence `{}` target overlaps its actor",
                    name
                )));
            }
            StepDef::Decohere(DecohereStep {
                name: name.clone(),
                actor: actor.clone(),
                target: target.clone(),
                basis: basis.clone(),
                clearance: Clearance::Pending,
            })
        }
    })
}

impl Protocol {
    pub fn history_index(&self, id: &str) -> Result<usize, ProtocolError> {
        self.histories
            .iter()
            .position(|h| h.id == id)
            .ok_or_else(|| ProtocolError::UnknownHistory(id.to_string()))
    }

    pub fn step_index(&self, name: &str) -> Result<usize, ProtocolError> {
        self.step_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ProtocolError::UnknownStep(name.to_string()))
    }

    pub fn measure_step(&self, slot: usize) -> Option<&MeasureStep> {
        match self.histories[0].steps.get(slot).map(|s| s.as_ref()) {
            Some(StepDef::Measure(m)) => Some(m),
            _ => None,
        }
    }

    /// The initial `t`-long subsequence of a history: `t` steps and
    /// `t + 1` states.
    pub fn restrict(&self, h: &History, t: usize) -> Result<History, ProtocolError> {
        if t > self.length {
            return Err(ProtocolError::TimeOutOfRange(t, self.length));
        }
        Ok(History {
            id: h.id.clone(),
            alternative: h.alternative,
            prior: h.prior,
            states: h.states[..=t].to_vec(),
            steps: h.steps[..t].to_vec(),
            outcomes: h
                .outcomes
                .iter()
                .filter(|(k, _)| **k < t)
                .map(|(k, v)| (*k, *v))
                .collect(),
            branch_prob: h.branch_prob,
        })
    }

    /// Observational prefix agreement between two histories through
    /// time `t`, from the background observer's standpoint: shared
    /// steps must match structurally and witnessed measurement outcomes
    /// must agree. What the observer cannot see — which classical
    /// alternative ran, or the outcome of a candidate observer's
    /// unwitnessed measurement — does not separate prefixes; from the
    /// first such invisible divergence on, states are no longer
    /// compared either.
    pub fn prefix_equal(&self, a: usize, b: usize, t: usize) -> bool {
        let (ha, hb) = (&self.histories[a], &self.histories[b]);
        let tol = self.tolerance;
        let mut diverged = false;
        if !ha.states[0].approx_eq(&hb.states[0], tol) {
            return false;
        }
        for k in 0..t {
            if self.alt_slots.contains(&k) {
                if ha.alternative != hb.alternative {
                    diverged = true;
                }
            } else {
                if !Arc::ptr_eq(&ha.steps[k], &hb.steps[k])
                    && !steps_structurally_equal(&ha.steps[k], &hb.steps[k], tol)
                {
                    return false;
                }
                if let StepDef::Measure(m) = ha.steps[k].as_ref() {
                    if ha.outcomes.get(&k) != hb.outcomes.get(&k) {
                        if observed_by_background(m, &self.universe) {
                            return false;
                        }
                        diverged = true;
                    }
                }
            }
            if !diverged && !ha.states[k + 1].approx_eq(&hb.states[k + 1], tol) {
                return false;
            }
        }
        true
    }

    /// The background observer's epistemic cell at `(h, t)`.
    pub fn cell(&self, h: usize, t: usize) -> EpistemicCell {
        let members: Vec<usize> = (0..self.histories.len())
            .filter(|&other| self.prefix_equal(h, other, t))
            .collect();
        EpistemicCell {
            anchor: (h, t),
            members,
        }
    }

    /// Prior-and-branch-weighted, normalized mixture of the subsystem
    /// states over the cell at `(h, t)`.
    pub fn described_state(
        &self,
        h: usize,
        t: usize,
        target: &System,
    ) -> Result<ComplexMatrix, ProtocolError> {
        if t > self.length {
            return Err(ProtocolError::TimeOutOfRange(t, self.length));
        }
        let cell = self.cell(h, t);
        let dim = target.dim(&self.universe);
        let mut mix = ComplexMatrix::zeros(dim, dim);
        let mut total = 0.0f64;
        for &m in &cell.members {
            let hist = &self.histories[m];
            let w = hist.prior * hist.branch_prob;
            let rho = hist.states[t].reduced(&target.label_vec())?;
            mix = mix.add(&rho.scale(cr(w)));
            total += w;
        }
        Ok(mix.scale(cr(1.0 / total)))
    }

    /// Re-derives every history from its initial state and steps and
    /// compares against the stored states.
    pub fn verify_rederivation(&self) -> Result<(), ProtocolError> {
        let tol = self.tolerance;
        for h in &self.histories {
            let mut current = h.states[0].clone();
            for (k, step) in h.steps.iter().enumerate() {
                let next = match step.as_ref() {
                    StepDef::Unitary(u) => current.apply_unitary(&u.matrix, tol)?,
                    StepDef::Measure(m) => {
                        let want = *h.outcomes.get(&k).ok_or_else(|| {
                            ProtocolError::InvariantViolated {
                                history: h.id.clone(),
                                time: k + 1,
                                what: "missing outcome".into(),
                            }
                        })?;
                        let branches = current.measure_and_record(m, tol)?;
                        branches
                            .into_iter()
                            .find(|(i, _, _)| *i == want)
                            .map(|(_, _, st)| st)
                            .ok_or_else(|| ProtocolError::InvariantViolated {
                                history: h.id.clone(),
                                time: k + 1,
                                what: format!("outcome {} not reachable", want),
                            })?
                    }
                    StepDef::Decohere(d) => {
                        let mut cleared = d.clone();
                        cleared.clearance = Clearance::Verified;
                        current.decohere(&cleared, tol)?
                    }
                };
                if !next.approx_eq(&h.states[k + 1], tol) {
                    return Err(ProtocolError::InvariantViolated {
                        history: h.id.clone(),
                        time: k + 1,
                        what: "stored state differs from re-derived state".into(),
                    });
                }
                current = next;
            }
        }
        Ok(())
    }

    /// True when history `h` realizes outcome `label` at the named
    /// measurement step.
    pub fn outcome_holds(
        &self,
        h: usize,
        step_name: &str,
        label: &str,
    ) -> Result<bool, ProtocolError> {
        let slot = self.step_index(step_name)?;
        let m = self.measure_step(slot).ok_or_else(|| {
            ProtocolError::Invalid(format!("`{}` is not a measurement", step_name))
        })?;
        let idx = m
            .basis
            .outcome_index(label)
            .ok_or_else(|| ProtocolError::Invalid(format!("unknown outcome `{}`", label)))?;
        Ok(self.histories[h].outcomes.get(&slot) == Some(&idx))
    }

    /// True when history `h` satisfies the protocol's halting
    /// condition.
    pub fn halted(&self, h: usize) -> Result<bool, ProtocolError> {
        if self.halting.is_empty() {
            return Err(ProtocolError::Invalid(
                "protocol declares no halting condition".into(),
            ));
        }
        Ok(self
            .halting
            .iter()
            .all(|(slot, outcome)| self.histories[h].outcomes.get(slot) == Some(outcome)))
    }

    /// Joint probability of a conjunction of step outcomes, summed over
    /// histories (prior times branch probability).
    pub fn joint_probability(&self, wanted: &[(String, String)]) -> Result<f64, ProtocolError> {
        let mut resolved = Vec::new();
        for (step, label) in wanted {
            let slot = self.step_index(step)?;
            let m = self.measure_step(slot).ok_or_else(|| {
                ProtocolError::Invalid(format!("`{}` is not a measurement", step))
            })?;
            let idx = m.basis.outcome_index(label).ok_or_else(|| {
                ProtocolError::Invalid(format!("unknown outcome `{}` at `{}`", label, step))
            })?;
            resolved.push((slot, idx));
        }
        Ok(self
            .histories
            .iter()
            .filter(|h| {
                resolved
                    .iter()
                    .all(|(slot, idx)| h.outcomes.get(slot) == Some(idx))
            })
            .map(|h| h.prior * h.branch_prob)
            .sum())
    }
}

fn steps_structurally_equal(a: &StepDef, b: &StepDef, tol: Tolerance) -> bool {
    match (a, b) {
        (StepDef::Unitary(x), StepDef::Unitary(y)) => x.matrix.approx_eq(&y.matrix, tol),
        (StepDef::Measure(x), StepDef::Measure(y)) => {
            x.actor == y.actor
                && x.target == y.target
                && x.slot == y.slot
                && x.broadcast == y.broadcast
                && bases_equal(&x.basis, &y.basis, tol)
        }
        (StepDef::Decohere(x), StepDef::Decohere(y)) => {
            x.actor == y.actor && x.target == y.target && bases_equal(&x.basis, &y.basis, tol)
        }
        _ => false,
    }
}

fn bases_equal(a: &Basis, b: &Basis, tol: Tolerance) -> bool {
    a.dim == b.dim
        && a.vectors.len() == b.vectors.len()
        && a
            .vectors
            .iter()
            .zip(b.vectors.iter())
            .all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| (p - q).norm() < tol.eps))
}

/// Outcome of a protocol-relative description comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompatReport {
    pub compatible: bool,
    /// Human-readable description of the conditioning event that makes
    /// the descriptions agree, when one exists.
    pub conditioning: Option<String>,
    /// Per-measurement total-variation distances for the best event.
    pub distances: Vec<(String, f64)>,
}

/// Protocol-relative compatibility of two state descriptions of
/// `target`: after refining both by Bayesian conditioning on a shared
/// outcome event of the protocol's own measurements, the Born
/// distributions of every in-target measurement agree within eps.
///
/// Conditioning counts as a refinement only when it does not disturb:
/// the conditioned state's support must stay inside the original's.
pub fn protocol_compatible(
    pi: &Protocol,
    desc1: &ComplexMatrix,
    desc2: &ComplexMatrix,
    target: &System,
) -> Result<CompatReport, ProtocolError> {
    let tol = pi.tolerance;
    let dims: Vec<usize> = {
        let all = pi.universe.dims();
        target.label_vec().iter().map(|&l| all[l]).collect()
    };
    let dim: usize = dims.iter().product();
    if desc1.rows != dim || desc2.rows != dim {
        return Err(ProtocolError::Invalid(format!(
            "descriptions must live on the target dimension {}",
            dim
        )));
    }
    let target_labels = target.label_vec();

    // measurements of the protocol acting within the target
    struct InTarget {
        name: String,
        projectors: Vec<ComplexMatrix>,
    }
    let mut measurements: Vec<InTarget> = Vec::new();
    for (k, name) in pi.step_names.iter().enumerate() {
        let def = pi.histories[0].steps[k].as_ref();
        let (step_target, basis) = match def {
            StepDef::Measure(m) => (&m.target, &m.basis),
            StepDef::Decohere(d) => (&d.target, &d.basis),
            _ => continue,
        };
        if !step_target.iter().all(|l| target.contains(*l)) {
            continue;
        }
        let positions: Vec<usize> = step_target
            .iter()
            .map(|l| target_labels.iter().position(|x| x == l).unwrap())
            .collect();
        let mut projectors = Vec::new();
        for b in &basis.vectors {
            projectors.push(embed_projector_in(b, &positions, &dims));
        }
        measurements.push(InTarget {
            name: name.clone(),
            projectors,
        });
    }

    let make_dist = |rho: &ComplexMatrix, m: &InTarget| -> Vec<f64> {
        m.projectors
            .iter()
            .map(|p| p.matmul(rho).trace().re.max(0.0))
            .collect()
    };
    let eval_event = |sigma1: &ComplexMatrix, sigma2: &ComplexMatrix| -> (f64, Vec<(String, f64)>) {
        let mut rows = Vec::new();
        let mut worst = 0.0f64;
        for m in &measurements {
            let d1 = make_dist(sigma1, m);
            let d2 = make_dist(sigma2, m);
            let tv = 0.5 * d1.iter().zip(d2.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            worst = worst.max(tv);
            rows.push((m.name.clone(), tv));
        }
        (worst, rows)
    };

    // candidate events: no conditioning, or a subset of one
    // measurement's outcomes
    let (w0, rows0) = eval_event(desc1, desc2);
    let mut best: (f64, Option<String>, Vec<(String, f64)>) = (w0, None, rows0);

    let support1 = system::support_projector(desc1, tol)?;
    let support2 = system::support_projector(desc2, tol)?;
    for m in &measurements {
        let n = m.projectors.len();
        for mask in 1u32..(1u32 << n) {
            if mask == (1u32 << n) - 1 {
                continue; // full set == no conditioning
            }
            let mut pe = ComplexMatrix::zeros(dim, dim);
            for (i, p) in m.projectors.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    pe = pe.add(p);
                }
            }
            let cond = |rho: &ComplexMatrix, supp: &ComplexMatrix| -> Option<ComplexMatrix> {
                let proj = pe.matmul(rho).matmul(&pe);
                let p = proj.trace().re;
                if p <= tol.eps {
                    return None;
                }
                let sigma = proj.scale(cr(1.0 / p));
                // refinement, not disturbance: support must not leave
                // the original support
                let outside = sigma.sub(&supp.matmul(&sigma).matmul(supp));
                if outside.frobenius_norm() > 1e-7 {
                    return None;
                }
                Some(sigma)
            };
            let (s1, s2) = match (cond(desc1, &support1), cond(desc2, &support2)) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            let (w, rows) = eval_event(&s1, &s2);
            if w < best.0 {
                let labels: Vec<String> = (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| i.to_string())
                    .collect();
                best = (
                    w,
                    Some(format!("{} in {{{}}}", m.name, labels.join(","))),
                    rows,
                );
            }
        }
    }

    let (worst, conditioning, distances) = best;
    Ok(CompatReport {
        compatible: worst < tol.eps,
        conditioning,
        distances,
    })
}

fn embed_projector_in(bvec: &[C64], positions: &[usize], dims: &[usize]) -> ComplexMatrix {
    use crate::linalg::{digits_to_index, index_to_digits};
    let total: usize = dims.iter().product();
    let tdims: Vec<usize> = positions.iter().map(|&p| dims[p]).collect();
    let rest: Vec<usize> = (0..dims.len()).filter(|p| !positions.contains(p)).collect();
    let rdims: Vec<usize> = rest.iter().map(|&p| dims[p]).collect();
    let mut t_of = vec![0usize; total];
    let mut r_of = vec![0usize; total];
    for k in 0..total {
        let digits = index_to_digits(k, dims);
        let td: Vec<usize> = positions.iter().map(|&p| digits[p]).collect();
        let rd: Vec<usize> = rest.iter().map(|&p| digits[p]).collect();
        t_of[k] = digits_to_index(&td, &tdims);
        r_of[k] = digits_to_index(&rd, &rdims);
    }
    let mut p = ComplexMatrix::zeros(total, total);
    for k1 in 0..total {
        let b1 = bvec[t_of[k1]];
        if b1.norm_sqr() == 0.0 {
            continue;
        }
        for k2 in 0..total {
            if r_of[k1] != r_of[k2] {
                continue;
            }
            let b2 = bvec[t_of[k2]];
            if b2.norm_sqr() == 0.0 {
                continue;
            }
            p.set(k1, k2, b1 * b2.conj());
        }
    }
    p
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::linalg::cr;
    use crate::system::test_support::*;
    use crate::system::SystemId;

    /// Minimal-cut correlating protocol: |+>|0>|0>, then cnot(s, f).
    pub fn correlating_spec() -> ProtocolSpec {
        let u = lab_universe();
        let initial = amp_product(&u, &[ket_plus(), ket0(), ket0()]);
        ProtocolSpec {
            universe: u,
            initial,
            slots: vec![SlotSpec::Shared(StepSpec::Unitary {
                name: "u_corr".into(),
                gate: GateSpec::CNot {
                    control: 0,
                    target: 1,
                },
            })],
            alternatives: vec![],
            halting: vec![],
            tolerance: Tolerance::default(),
        }
    }

    /// s, f, o_m, w_m qubits; observer {w_m}; agents F={f}, O={o_m}.
    pub fn leak_universe() -> Arc<Universe> {
        let labels = vec![
            SystemId { name: "s".into(), dim: 2 },
            SystemId { name: "f".into(), dim: 2 },
            SystemId { name: "o_m".into(), dim: 2 },
            SystemId { name: "w_m".into(), dim: 2 },
        ];
        let mut agents = BTreeMap::new();
        agents.insert("F".to_string(), System::new([1usize]));
        agents.insert("O".to_string(), System::new([2usize]));
        Arc::new(
            Universe::new(
                labels,
                System::new([3usize]),
                agents,
                [1usize, 2, 3].into_iter().collect(),
            )
            .unwrap(),
        )
    }

    /// Lab measurement with possible leak to an external memory:
    /// cnot(s,f), then either copy(f->o_m) (prior p) or identity.
    pub fn leak_spec(p: f64) -> ProtocolSpec {
        let u = leak_universe();
        let total: usize = u.total_dim();
        let mut initial = vec![crate::linalg::C64::new(0.0, 0.0); total];
        let s = 1.0 / 2f64.sqrt();
        // |+>_s |000>
        initial[0] = cr(s);
        initial[8] = cr(s);
        ProtocolSpec {
            universe: u,
            initial,
            slots: vec![
                SlotSpec::Shared(StepSpec::Unitary {
                    name: "u_corr".into(),
                    gate: GateSpec::CNot {
                        control: 0,
                        target: 1,
                    },
                }),
                SlotSpec::Variants(vec![
                    (
                        "leak".into(),
                        StepSpec::Unitary {
                            name: "u_leak".into(),
                            gate: GateSpec::Copy { from: 1, to: 2 },
                        },
                    ),
                    (
                        "noleak".into(),
                        StepSpec::Unitary {
                            name: "u_stay".into(),
                            gate: GateSpec::Identity,
                        },
                    ),
                ]),
            ],
            alternatives: vec![
                Alternative {
                    name: "leak".into(),
                    weight: p,
                },
                Alternative {
                    name: "noleak".into(),
                    weight: 1.0 - p,
                },
            ],
            halting: vec![],
            tolerance: Tolerance::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::linalg::projector;
    use crate::system::test_support::bell_basis;

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    #[test]
    fn correlating_protocol_has_one_history_ending_correlated() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        assert_eq!(pi.histories.len(), 1);
        let lab = pi.histories[0].states[1].reduced(&[0, 1]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let fail = projector(&ComplexMatrix::col_real(&[s, 0.0, 0.0, s])).unwrap();
        assert!(lab.approx_eq(&fail, tol()));
    }

    #[test]
    fn decohere_variant_ends_in_classical_mixture() {
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Decohere {
            name: "d_f".into(),
            actor: System::new([1usize]),
            target: vec![0],
            basis: Basis::standard(2),
        }));
        let pi = build_protocol(&spec).unwrap();
        assert_eq!(pi.histories.len(), 1);
        let lab = pi.histories[0].states[2].reduced(&[0, 1]).unwrap();
        let mut want = ComplexMatrix::zeros(4, 4);
        want.set(0, 0, cr(0.5));
        want.set(3, 3, cr(0.5));
        assert!(lab.approx_eq(&want, tol()));
    }

    #[test]
    fn measurement_branches_into_histories() {
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_s".into(),
            actor: spec.universe.observer.clone(),
            target: vec![0],
            basis: Basis::standard(2),
            slot: 2,
            broadcast: vec![],
        }));
        let pi = build_protocol(&spec).unwrap();
        assert_eq!(pi.histories.len(), 2);
        let total: f64 = pi.histories.iter().map(|h| h.prior * h.branch_prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(pi.outcome_holds(0, "m_s", "0").unwrap());
        assert!(pi.outcome_holds(1, "m_s", "1").unwrap());
    }

    #[test]
    fn restrict_bounds() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        let h = &pi.histories[0];
        let p0 = pi.restrict(h, 0).unwrap();
        assert_eq!(p0.states.len(), 1);
        assert_eq!(p0.steps.len(), 0);
        let pn = pi.restrict(h, pi.length).unwrap();
        assert_eq!(pn.states.len(), pi.length + 1);
        assert!(pi.restrict(h, pi.length + 1).is_err());
    }

    #[test]
    fn singleton_protocol_has_singleton_cells() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        for t in 0..=pi.length {
            let c = pi.cell(0, t);
            assert_eq!(c.members, vec![0]);
        }
    }

    #[test]
    fn leak_alternatives_stay_in_one_cell() {
        let pi = build_protocol(&leak_spec(0.01)).unwrap();
        assert_eq!(pi.histories.len(), 2);
        // the observer cannot tell the alternatives apart at any time:
        // no measurement ever separates them here
        for t in 0..=pi.length {
            let c = pi.cell(0, t);
            assert_eq!(c.members, vec![0, 1]);
        }
    }

    #[test]
    fn described_state_reproduces_prior_weighted_lab_mixture() {
        let pi = build_protocol(&leak_spec(0.01)).unwrap();
        let lab = System::new([0usize, 1]);
        let rho = pi.described_state(0, 2, &lab).unwrap();
        // {e00: 1/200, e11: 1/200, correlated pair: 99/100}
        let s = 1.0 / 2f64.sqrt();
        let fail = projector(&ComplexMatrix::col_real(&[s, 0.0, 0.0, s])).unwrap();
        let mut want = ComplexMatrix::zeros(4, 4);
        want.set(0, 0, cr(1.0 / 200.0));
        want.set(3, 3, cr(1.0 / 200.0));
        want = want.add(&fail.scale(cr(99.0 / 100.0)));
        assert!(rho.approx_eq(&want, tol()));
        assert!(rho.is_density_operator(tol()));
    }

    #[test]
    fn described_state_of_singleton_cell_is_subsystem_state() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        let s_sys = System::new([0usize]);
        let desc = pi.described_state(0, 1, &s_sys).unwrap();
        let sub = pi.histories[0].states[1]
            .subsystem_state(&s_sys)
            .unwrap()
            .density();
        assert!(desc.approx_eq(&sub, tol()));
    }

    #[test]
    fn cells_partition_and_shrink() {
        let mut spec = leak_spec(0.5);
        // a measurement that separates the alternatives: measure o_m
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_o".into(),
            actor: spec.universe.observer.clone(),
            target: vec![2],
            basis: Basis::standard(2),
            slot: 3,
            broadcast: vec![],
        }));
        let pi = build_protocol(&spec).unwrap();
        for t in 0..=pi.length {
            // partition property
            let mut seen = BTreeSet::new();
            for h in 0..pi.histories.len() {
                let cell = pi.cell(h, t);
                assert!(cell.members.contains(&h));
                for &m in &cell.members {
                    let other = pi.cell(m, t);
                    assert_eq!(other.members, cell.members);
                }
                seen.extend(cell.members.iter().copied());
            }
            assert_eq!(seen.len(), pi.histories.len());
        }
        for h in 0..pi.histories.len() {
            for t in 0..pi.length {
                let now: BTreeSet<usize> = pi.cell(h, t).members.into_iter().collect();
                let later: BTreeSet<usize> = pi.cell(h, t + 1).members.into_iter().collect();
                assert!(later.is_subset(&now));
            }
        }
        // after the o_m measurement, the leak alternative splits off
        let final_cell = pi.cell(0, pi.length);
        assert!(final_cell.members.len() < pi.histories.len());
    }

    #[test]
    fn rejects_non_unit_initial_vector() {
        let mut spec = correlating_spec();
        spec.initial[0] = cr(1.0);
        assert!(matches!(
            build_protocol(&spec),
            Err(ProtocolError::Invalid(_))
        ));
    }

    #[test]
    fn identical_descriptions_are_protocol_compatible() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        let lab = System::new([0usize, 1]);
        let rho = pi.described_state(0, 1, &lab).unwrap();
        let report = protocol_compatible(&pi, &rho, &rho, &lab).unwrap();
        assert!(report.compatible);
        assert!(report.distances.iter().all(|(_, d)| *d < 1e-12));
    }

    #[test]
    fn conditioning_reconciles_mixture_with_refinement() {
        // protocol containing only a standard-basis measurement of s
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_s".into(),
            actor: spec.universe.observer.clone(),
            target: vec![0],
            basis: Basis::standard(2),
            slot: 2,
            broadcast: vec![],
        }));
        let pi = build_protocol(&spec).unwrap();
        let s_sys = System::new([0usize]);
        let half = ComplexMatrix::identity(2).scale(cr(0.5));
        let pure0 = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        let report = protocol_compatible(&pi, &half, &pure0, &s_sys).unwrap();
        assert!(report.compatible);
        assert!(report.conditioning.is_some());
    }

    #[test]
    fn orthogonal_pure_descriptions_stay_incompatible() {
        // protocol with a correlated-basis lab measurement
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_lab".into(),
            actor: spec.universe.observer.clone(),
            target: vec![0, 1],
            basis: bell_basis(),
            slot: 2,
            broadcast: vec![],
        }));
        let pi = build_protocol(&spec).unwrap();
        let lab = System::new([0usize, 1]);
        let e00 = projector(&ComplexMatrix::basis_vector(4, 0)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let fail = projector(&ComplexMatrix::col_real(&[s, 0.0, 0.0, s])).unwrap();
        let report = protocol_compatible(&pi, &e00, &fail, &lab).unwrap();
        assert!(!report.compatible);
    }

    #[test]
    fn memory_slot_reuse_is_rejected() {
        let mut spec = correlating_spec();
        for name in ["m_a", "m_b"] {
            spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
                name: name.into(),
                actor: spec.universe.observer.clone(),
                target: vec![0],
                basis: Basis::standard(2),
                slot: 2,
                broadcast: vec![],
            }));
        }
        assert!(matches!(
            build_protocol(&spec),
            Err(ProtocolError::Invalid(_))
        ));
    }
}
