//! Labeled systems, relative states and the dynamical step kinds.
//!
//! A universe fixes an ordered list of elementary labels, a background
//! observer and the designated memory labels. States are assigned to
//! (sub)systems relative to the background observer at integer ticks.
//! Internally a state is an ensemble of weighted pure vectors (or a
//! dense operator), which keeps the desk-scale protocols cheap while
//! every query still goes through the density-operator contract.

use crate::linalg::{
    self, cr, digits_to_index, hermitian_eigen, index_to_digits, partial_trace, ComplexMatrix,
    Tolerance, C64,
};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid universe: {0}")]
    InvalidUniverse(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("introspection violated: observer memory is not a definite basis state ({0})")]
    IntrospectionViolated(String),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("memory slot `{0}` is not free")]
    MemorySlotBusy(String),
    #[error("memory slot `{slot}` cannot hold outcome index {outcome}")]
    MemorySlotTooSmall { slot: String, outcome: usize },
    #[error("system `{0}` is not part of the state")]
    NotASubsystem(String),
    #[error("decohere step `{0}` has no admissibility clearance")]
    DecohereNotCleared(String),
}

/// An elementary system: a name and a basis size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemId {
    pub name: String,
    pub dim: usize,
}

/// A composite system: a set of elementary label indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct System(BTreeSet<usize>);

impl System {
    pub fn new<I: IntoIterator<Item = usize>>(labels: I) -> Self {
        System(labels.into_iter().collect())
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn label_vec(&self) -> Vec<usize> {
        self.0.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.contains(&label)
    }

    pub fn is_subset(&self, other: &System) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn is_disjoint(&self, other: &System) -> bool {
        self.0.is_disjoint(&other.0)
    }

    pub fn union(&self, other: &System) -> System {
        System(self.0.union(&other.0).copied().collect())
    }

    pub fn intersection(&self, other: &System) -> System {
        System(self.0.intersection(&other.0).copied().collect())
    }

    pub fn dim(&self, universe: &Universe) -> usize {
        self.labels().map(|l| universe.labels[l].dim).product()
    }
}

/// The fixed cast of a protocol: all labels, the background observer,
/// the declared candidate observers, and which labels are memory.
#[derive(Debug, Clone)]
pub struct Universe {
    pub labels: Vec<SystemId>,
    pub observer: System,
    pub agents: BTreeMap<String, System>,
    pub memory: BTreeSet<usize>,
}

impl Universe {
    pub fn new(
        labels: Vec<SystemId>,
        observer: System,
        agents: BTreeMap<String, System>,
        memory: BTreeSet<usize>,
    ) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.dim < 2 {
                return Err(ModelError::InvalidUniverse(format!(
                    "label `{}` must have dimension >= 2",
                    l.name
                )));
            }
            if !seen.insert(l.name.clone()) {
                return Err(ModelError::InvalidUniverse(format!(
                    "duplicate label `{}`",
                    l.name
                )));
            }
        }
        let n = labels.len();
        if observer.is_empty() {
            return Err(ModelError::InvalidUniverse("observer must be non-empty".into()));
        }
        for l in observer.labels() {
            if l >= n {
                return Err(ModelError::InvalidUniverse("observer label out of range".into()));
            }
        }
        for (name, sys) in &agents {
            if sys.is_empty() {
                return Err(ModelError::InvalidUniverse(format!(
                    "agent `{}` must be non-empty",
                    name
                )));
            }
            if sys.labels().any(|l| l >= n) {
                return Err(ModelError::InvalidUniverse(format!(
                    "agent `{}` label out of range",
                    name
                )));
            }
        }
        if memory.iter().any(|&l| l >= n) {
            return Err(ModelError::InvalidUniverse("memory label out of range".into()));
        }
        Ok(Universe {
            labels,
            observer,
            agents,
            memory,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.labels.iter().map(|l| l.dim).product()
    }

    pub fn label_index(&self, name: &str) -> Result<usize, ModelError> {
        self.labels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLabel(name.to_string()))
    }

    pub fn label_name(&self, idx: usize) -> &str {
        &self.labels[idx].name
    }

    pub fn system_name(&self, sys: &System) -> String {
        sys.labels()
            .map(|l| self.label_name(l))
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Resolve an agent name, or a `+`-joined list of label names.
    pub fn resolve_system(&self, name: &str) -> Result<System, ModelError> {
        if let Some(sys) = self.agents.get(name) {
            return Ok(sys.clone());
        }
        let mut labels = BTreeSet::new();
        for part in name.split('+') {
            labels.insert(self.label_index(part.trim())?);
        }
        if labels.is_empty() {
            return Err(ModelError::UnknownLabel(name.to_string()));
        }
        Ok(System(labels))
    }

    pub fn all_system(&self) -> System {
        System::new(0..self.labels.len())
    }
}

/// An orthonormal, complete measurement basis on an ordered label list,
/// with named outcomes.
#[derive(Debug, Clone)]
pub struct Basis {
    pub outcome_labels: Vec<String>,
    pub vectors: Vec<Vec<C64>>,
    pub dim: usize,
}

impl Basis {
    pub fn new(outcome_labels: Vec<String>, vectors: Vec<Vec<C64>>) -> Result<Self, ModelError> {
        if vectors.is_empty() {
            return Err(ModelError::InvalidBasis("empty basis".into()));
        }
        let dim = vectors[0].len();
        if vectors.len() != dim {
            return Err(ModelError::InvalidBasis(format!(
                "{} vectors cannot be complete in dimension {}",
                vectors.len(),
                dim
            )));
        }
        if outcome_labels.len() != vectors.len() {
            return Err(ModelError::InvalidBasis("label/vector count mismatch".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &outcome_labels {
            if !seen.insert(l.clone()) {
                return Err(ModelError::InvalidBasis(format!("duplicate outcome `{}`", l)));
            }
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(ModelError::InvalidBasis("ragged basis vectors".into()));
            }
            for (j, w) in vectors.iter().enumerate() {
                let inner: C64 = v.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (inner.norm() - expect).abs() > 1e-8 {
                    return Err(ModelError::InvalidBasis(format!(
                        "vectors {} and {} are not orthonormal",
                        i, j
                    )));
                }
            }
        }
        Ok(Basis {
            outcome_labels,
            vectors,
            dim,
        })
    }

    /// Standard basis with outcome labels "0", "1", ...
    pub fn standard(dim: usize) -> Self {
        let mut labels = Vec::with_capacity(dim);
        let mut vectors = Vec::with_capacity(dim);
        for i in 0..dim {
            labels.push(i.to_string());
            let mut v = vec![C64::new(0.0, 0.0); dim];
            v[i] = cr(1.0);
            vectors.push(v);
        }
        Basis {
            outcome_labels: labels,
            vectors,
            dim,
        }
    }

    /// Standard basis with custom outcome labels (e.g. h/t, down/up).
    pub fn standard_named(labels: &[&str]) -> Result<Self, ModelError> {
        let dim = labels.len();
        let std = Self::standard(dim);
        Basis::new(
            labels.iter().map(|s| s.to_string()).collect(),
            std.vectors,
        )
    }

    pub fn outcome_index(&self, label: &str) -> Option<usize> {
        self.outcome_labels.iter().position(|l| l == label)
    }
}

/// One tick of evolution.
#[derive(Debug, Clone)]
pub enum StepDef {
    /// No-collapse evolution by a unitary on the full system.
    Unitary(UnitaryStep),
    /// Observer measurement with a memory record; branches.
    Measure(MeasureStep),
    /// Non-selective decoherence by a candidate observer; no branching.
    Decohere(DecohereStep),
}

#[derive(Debug, Clone)]
pub struct UnitaryStep {
    pub name: String,
    pub gate: GateSpec,
    /// Full-system matrix, materialized at build time.
    pub matrix: ComplexMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateSpec {
    Identity,
    Hadamard(usize),
    PauliX(usize),
    CNot { control: usize, target: usize },
    ControlledH { control: usize, target: usize },
    /// Basis-content copy `|a,b> -> |a, b+a mod d>`; the protocol file
    /// surface calls this a leak.
    Copy { from: usize, to: usize },
    Raw { labels: Vec<usize>, matrix: ComplexMatrix },
}

#[derive(Debug, Clone)]
pub struct MeasureStep {
    pub name: String,
    pub actor: System,
    pub target: Vec<usize>,
    pub basis: Basis,
    pub slot: usize,
    pub broadcast: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecohereStep {
    pub name: String,
    pub actor: System,
    pub target: Vec<usize>,
    pub basis: Basis,
    /// Admissibility clearance for the actor, settled by the protocol
    /// layer: verified, overridden by hand, or still pending.
    pub clearance: Clearance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clearance {
    Verified,
    Overridden,
    Pending,
}

impl StepDef {
    pub fn name(&self) -> &str {
        match self {
            StepDef::Unitary(u) => &u.name,
            StepDef::Measure(m) => &m.name,
            StepDef::Decohere(d) => &d.name,
        }
    }

    /// Labels whose factors the step does not act on at all.
    pub fn touched_labels(&self) -> BTreeSet<usize> {
        match self {
            StepDef::Unitary(u) => match &u.gate {
                GateSpec::Identity => BTreeSet::new(),
                GateSpec::Hadamard(l) | GateSpec::PauliX(l) => [*l].into_iter().collect(),
                GateSpec::CNot { control, target }
                | GateSpec::ControlledH { control, target } => {
                    [*control, *target].into_iter().collect()
                }
                GateSpec::Copy { from, to } => [*from, *to].into_iter().collect(),
                GateSpec::Raw { labels, .. } => labels.iter().copied().collect(),
            },
            StepDef::Measure(m) => {
                let mut s: BTreeSet<usize> = m.target.iter().copied().collect();
                s.insert(m.slot);
                s.extend(m.broadcast.iter().copied());
                s
            }
            StepDef::Decohere(d) => d.target.iter().copied().collect(),
        }
    }
}

/// Materialize a gate acting on an ordered label list into the full
/// product space of the universe.
pub fn embed_on_labels(
    gate: &ComplexMatrix,
    labels: &[usize],
    universe: &Universe,
) -> Result<ComplexMatrix, ModelError> {
    let dims = universe.dims();
    let total = universe.total_dim();
    let gate_dim: usize = labels.iter().map(|&l| dims[l]).product();
    if gate.rows != gate_dim || gate.cols != gate_dim {
        return Err(ModelError::InvalidStep(format!(
            "gate is {}x{}, labels give dimension {}",
            gate.rows, gate.cols, gate_dim
        )));
    }
    let mut distinct = BTreeSet::new();
    if !labels.iter().all(|&l| distinct.insert(l)) {
        return Err(ModelError::InvalidStep("repeated gate label".into()));
    }
    let gate_dims: Vec<usize> = labels.iter().map(|&l| dims[l]).collect();
    let mut full = ComplexMatrix::zeros(total, total);
    for k in 0..total {
        let digits = index_to_digits(k, &dims);
        let tcol: Vec<usize> = labels.iter().map(|&l| digits[l]).collect();
        let tcol_idx = digits_to_index(&tcol, &gate_dims);
        for trow_idx in 0..gate_dim {
            let g = gate.get(trow_idx, tcol_idx);
            if g.norm_sqr() == 0.0 {
                continue;
            }
            let trow = index_to_digits(trow_idx, &gate_dims);
            let mut row_digits = digits.clone();
            for (pos, &l) in labels.iter().enumerate() {
                row_digits[l] = trow[pos];
            }
            let row = digits_to_index(&row_digits, &dims);
            full.set(row, k, g);
        }
    }
    Ok(full)
}

/// Materialize a gate spec into the full-system unitary.
pub fn gate_matrix(gate: &GateSpec, universe: &Universe) -> Result<ComplexMatrix, ModelError> {
    let dims = universe.dims();
    match gate {
        GateSpec::Identity => Ok(ComplexMatrix::identity(universe.total_dim())),
        GateSpec::Hadamard(l) => {
            if dims[*l] != 2 {
                return Err(ModelError::InvalidStep("hadamard needs a qubit".into()));
            }
            embed_on_labels(&linalg::gates::hadamard(), &[*l], universe)
        }
        GateSpec::PauliX(l) => {
            embed_on_labels(&linalg::gates::pauli_x(dims[*l], 1), &[*l], universe)
        }
        GateSpec::CNot { control, target } => {
            if dims[*control] != dims[*target] {
                return Err(ModelError::InvalidStep("cnot needs equal dims".into()));
            }
            let d = dims[*control];
            let mut g = ComplexMatrix::zeros(d * d, d * d);
            for a in 0..d {
                for b in 0..d {
                    g.set(a * d + (b + a) % d, a * d + b, cr(1.0));
                }
            }
            embed_on_labels(&g, &[*control, *target], universe)
        }
        GateSpec::ControlledH { control, target } => {
            if dims[*control] != 2 || dims[*target] != 2 {
                return Err(ModelError::InvalidStep("controlled-h needs qubits".into()));
            }
            let h = linalg::gates::hadamard();
            let mut g = ComplexMatrix::identity(4);
            for i in 0..2 {
                for j in 0..2 {
                    g.set(2 + i, 2 + j, h.get(i, j));
                }
            }
            embed_on_labels(&g, &[*control, *target], universe)
        }
        GateSpec::Copy { from, to } => gate_matrix(
            &GateSpec::CNot {
                control: *from,
                target: *to,
            },
            universe,
        ),
        GateSpec::Raw { labels, matrix } => embed_on_labels(matrix, labels, universe),
    }
}

/// Internal state payload: a weighted ensemble of pure vectors, or a
/// dense operator.
#[derive(Debug, Clone)]
pub enum StateOp {
    Ensemble(Vec<(f64, Vec<C64>)>),
    Dense(ComplexMatrix),
}

/// Density operator assigned to `system` by the background observer at
/// tick `time`.
#[derive(Debug, Clone)]
pub struct RelativeState {
    pub universe: Arc<Universe>,
    pub system: Vec<usize>,
    pub time: usize,
    pub op: StateOp,
}

impl RelativeState {
    /// Full-system state from a pure vector; validates the state
    /// postulate and introspection.
    pub fn pure_full(
        universe: Arc<Universe>,
        amps: Vec<C64>,
        tol: Tolerance,
    ) -> Result<Self, ModelError> {
        let system: Vec<usize> = (0..universe.labels.len()).collect();
        let st = RelativeState {
            universe,
            system,
            time: 0,
            op: StateOp::Ensemble(vec![(1.0, amps)]),
        };
        st.validate(tol)?;
        Ok(st)
    }

    pub fn dims(&self) -> Vec<usize> {
        let dims = self.universe.dims();
        self.system.iter().map(|&l| dims[l]).collect()
    }

    pub fn dim(&self) -> usize {
        self.dims().iter().product()
    }

    fn positions_of(&self, labels: &[usize]) -> Result<Vec<usize>, ModelError> {
        labels
            .iter()
            .map(|&l| {
                self.system.iter().position(|&s| s == l).ok_or_else(|| {
                    ModelError::NotASubsystem(self.universe.label_name(l).to_string())
                })
            })
            .collect()
    }

    /// Density operator of the whole state (materialized).
    pub fn density(&self) -> ComplexMatrix {
        match &self.op {
            StateOp::Dense(m) => m.clone(),
            StateOp::Ensemble(members) => {
                let d = self.dim();
                let mut out = ComplexMatrix::zeros(d, d);
                for (w, psi) in members {
                    for i in 0..d {
                        if psi[i].norm_sqr() == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let v = out.get(i, j) + cr(*w) * psi[i] * psi[j].conj();
                            out.set(i, j, v);
                        }
                    }
                }
                out
            }
        }
    }

    /// Reduced density operator on the given labels (in label order).
    pub fn reduced(&self, labels: &[usize]) -> Result<ComplexMatrix, ModelError> {
        let mut sorted = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let positions = self.positions_of(&sorted)?;
        let dims = self.dims();
        match &self.op {
            StateOp::Dense(m) => Ok(partial_trace(m, &dims, &positions)?),
            StateOp::Ensemble(members) => {
                let keep_dims: Vec<usize> = positions.iter().map(|&p| dims[p]).collect();
                let kd: usize = keep_dims.iter().product();
                let full: usize = dims.iter().product();
                let mut out = ComplexMatrix::zeros(kd, kd);
                // group amplitudes by the traced-out digits
                let mut keep_index = vec![0usize; full];
                let mut rest_index = vec![0usize; full];
                let rest_positions: Vec<usize> =
                    (0..dims.len()).filter(|p| !positions.contains(p)).collect();
                let rest_dims: Vec<usize> = rest_positions.iter().map(|&p| dims[p]).collect();
                for k in 0..full {
                    let digits = index_to_digits(k, &dims);
                    let kdig: Vec<usize> = positions.iter().map(|&p| digits[p]).collect();
                    let rdig: Vec<usize> = rest_positions.iter().map(|&p| digits[p]).collect();
                    keep_index[k] = digits_to_index(&kdig, &keep_dims);
                    rest_index[k] = digits_to_index(&rdig, &rest_dims);
                }
                let rest_total: usize = rest_dims.iter().product::<usize>().max(1);
                for (w, psi) in members {
                    // amplitude blocks psi[(keep, rest)]
                    let mut blocks = vec![vec![C64::new(0.0, 0.0); rest_total]; kd];
                    for k in 0..full {
                        blocks[keep_index[k]][rest_index[k]] = psi[k];
                    }
                    for i in 0..kd {
                        for j in 0..kd {
                            let mut acc = C64::new(0.0, 0.0);
                            for r in 0..rest_total {
                                acc += blocks[i][r] * blocks[j][r].conj();
                            }
                            let v = out.get(i, j) + cr(*w) * acc;
                            out.set(i, j, v);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// State postulate plus introspection: the reduction onto the
    /// observer overlap must be a single standard-basis product state.
    pub fn validate(&self, tol: Tolerance) -> Result<(), ModelError> {
        match &self.op {
            StateOp::Dense(m) => {
                if !m.is_density_operator(Tolerance::new(tol.eps * 10.0)) {
                    return Err(ModelError::InvalidState(
                        "operator is not Hermitian PSD trace-one".into(),
                    ));
                }
            }
            StateOp::Ensemble(members) => {
                let total: f64 = members.iter().map(|(w, _)| *w).sum();
                if (total - 1.0).abs() > tol.eps * 10.0 {
                    return Err(ModelError::InvalidState(format!(
                        "ensemble weights sum to {}",
                        total
                    )));
                }
                for (w, psi) in members {
                    if *w < 0.0 {
                        return Err(ModelError::InvalidState("negative ensemble weight".into()));
                    }
                    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > tol.eps * 10.0 {
                        return Err(ModelError::InvalidState(format!(
                            "ensemble member has norm {}",
                            norm
                        )));
                    }
                }
            }
        }
        self.introspection_index(tol).map(|_| ())
    }

    /// The observer's definite memory configuration, as digits of the
    /// overlap labels; errors when the overlap is not definite.
    pub fn introspection_index(&self, tol: Tolerance) -> Result<Vec<usize>, ModelError> {
        let overlap: Vec<usize> = self
            .system
            .iter()
            .copied()
            .filter(|l| self.universe.observer.contains(*l))
            .collect();
        if overlap.is_empty() {
            return Ok(Vec::new());
        }
        let rho = self.reduced(&overlap)?;
        let d = rho.rows;
        let mut peak = None;
        for i in 0..d {
            if (rho.get(i, i).re - 1.0).abs() < tol.eps.max(1e-9) * 100.0 {
                peak = Some(i);
                break;
            }
        }
        let peak = peak.ok_or_else(|| {
            ModelError::IntrospectionViolated("no unit diagonal entry".to_string())
        })?;
        for i in 0..d {
            for j in 0..d {
                let expect = if i == peak && j == peak { 1.0 } else { 0.0 };
                if (rho.get(i, j) - cr(expect)).norm() > tol.eps.max(1e-9) * 100.0 {
                    return Err(ModelError::IntrospectionViolated(format!(
                        "entry ({},{}) = {}",
                        i,
                        j,
                        rho.get(i, j)
                    )));
                }
            }
        }
        let overlap_dims: Vec<usize> = {
            let dims = self.universe.dims();
            overlap.iter().map(|&l| dims[l]).collect()
        };
        Ok(index_to_digits(peak, &overlap_dims))
    }

    /// Unitary evolution; re-validates the invariants on the result.
    pub fn apply_unitary(&self, u: &ComplexMatrix, tol: Tolerance) -> Result<Self, ModelError> {
        if u.rows != self.dim() || !u.is_unitary(Tolerance::new(1e-8)) {
            return Err(ModelError::InvalidStep(
                "step matrix is not unitary on the state space".into(),
            ));
        }
        let op = match &self.op {
            StateOp::Ensemble(members) => StateOp::Ensemble(
                members
                    .iter()
                    .map(|(w, psi)| (*w, u.matvec(psi)))
                    .collect(),
            ),
            StateOp::Dense(m) => StateOp::Dense(u.matmul(m).matmul(&u.adjoint())),
        };
        let out = RelativeState {
            universe: self.universe.clone(),
            system: self.system.clone(),
            time: self.time + 1,
            op,
        };
        out.validate(tol)?;
        Ok(out)
    }

    /// Outcome probabilities of measuring `target` in `basis`:
    /// `p_i = tr((P_i ⊗ I) rho)`.
    pub fn born_distribution(
        &self,
        target: &[usize],
        basis: &Basis,
    ) -> Result<Vec<f64>, ModelError> {
        let positions = self.positions_of(target)?;
        let dims = self.dims();
        let tdim: usize = positions.iter().map(|&p| dims[p]).product();
        if basis.dim != tdim {
            return Err(ModelError::InvalidBasis(format!(
                "basis dimension {} does not match target dimension {}",
                basis.dim, tdim
            )));
        }
        let mut probs = vec![0.0f64; basis.vectors.len()];
        match &self.op {
            StateOp::Ensemble(members) => {
                let maps = self.target_maps(&positions);
                for (w, psi) in members {
                    for (i, b) in basis.vectors.iter().enumerate() {
                        probs[i] += w * projected_norm_sqr(psi, b, &maps);
                    }
                }
            }
            StateOp::Dense(m) => {
                for (i, b) in basis.vectors.iter().enumerate() {
                    let p = self.embed_target_projector(b, &positions)?;
                    probs[i] += p.matmul(m).trace().re;
                }
            }
        }
        Ok(probs)
    }

    /// Per-index (target digit index, rest index, target dim, rest dim)
    /// lookup tables for amplitude-level projections.
    fn target_maps(&self, positions: &[usize]) -> TargetMaps {
        let dims = self.dims();
        let full: usize = dims.iter().product();
        let tdims: Vec<usize> = positions.iter().map(|&p| dims[p]).collect();
        let rest_positions: Vec<usize> =
            (0..dims.len()).filter(|p| !positions.contains(p)).collect();
        let rdims: Vec<usize> = rest_positions.iter().map(|&p| dims[p]).collect();
        let mut t_of = vec![0usize; full];
        let mut r_of = vec![0usize; full];
        for k in 0..full {
            let digits = index_to_digits(k, &dims);
            let td: Vec<usize> = positions.iter().map(|&p| digits[p]).collect();
            let rd: Vec<usize> = rest_positions.iter().map(|&p| digits[p]).collect();
            t_of[k] = digits_to_index(&td, &tdims);
            r_of[k] = digits_to_index(&rd, &rdims);
        }
        TargetMaps {
            t_of,
            r_of,
            rdim: rdims.iter().product::<usize>().max(1),
        }
    }

    fn embed_target_projector(
        &self,
        bvec: &[C64],
        positions: &[usize],
    ) -> Result<ComplexMatrix, ModelError> {
        let dims = self.dims();
        let full: usize = dims.iter().product();
        let maps = self.target_maps(positions);
        let mut p = ComplexMatrix::zeros(full, full);
        for k1 in 0..full {
            let b1 = bvec[maps.t_of[k1]];
            if b1.norm_sqr() == 0.0 {
                continue;
            }
            for k2 in 0..full {
                if maps.r_of[k1] != maps.r_of[k2] {
                    continue;
                }
                let b2 = bvec[maps.t_of[k2]];
                if b2.norm_sqr() == 0.0 {
                    continue;
                }
                p.set(k1, k2, b1 * b2.conj());
            }
        }
        Ok(p)
    }

    /// Measurement with record: one branch per positive-probability
    /// outcome; the actor's slot (and any broadcast slots) are written
    /// with the outcome index.
    pub fn measure_and_record(
        &self,
        step: &MeasureStep,
        tol: Tolerance,
    ) -> Result<Vec<(usize, f64, RelativeState)>, ModelError> {
        let probs = self.born_distribution(&step.target, &step.basis)?;
        let positions = self.positions_of(&step.target)?;
        let maps = self.target_maps(&positions);
        let dims = self.dims();
        let mut slots = vec![step.slot];
        slots.extend(step.broadcast.iter().copied());
        for &slot in &slots {
            if step.target.contains(&slot) {
                return Err(ModelError::InvalidStep(
                    "memory slot overlaps the measured target".into(),
                ));
            }
            // a slot must be free (still in basis state 0)
            let r = self.reduced(&[slot])?;
            if (r.get(0, 0).re - 1.0).abs() > tol.eps * 100.0 {
                return Err(ModelError::MemorySlotBusy(
                    self.universe.label_name(slot).to_string(),
                ));
            }
        }
        let mut out = Vec::new();
        for (i, &p) in probs.iter().enumerate() {
            if p <= tol.eps {
                continue;
            }
            for &slot in &slots {
                let slot_dim = self.universe.labels[slot].dim;
                if i >= slot_dim {
                    return Err(ModelError::MemorySlotTooSmall {
                        slot: self.universe.label_name(slot).to_string(),
                        outcome: i,
                    });
                }
            }
            let op = match &self.op {
                StateOp::Ensemble(members) => {
                    let mut branch = Vec::new();
                    for (w, psi) in members {
                        let (proj, pw) = project_member(psi, &step.basis.vectors[i], &maps);
                        if pw <= 1e-30 {
                            continue;
                        }
                        let scale = 1.0 / pw.sqrt();
                        let mut v: Vec<C64> = proj.iter().map(|z| z * cr(scale)).collect();
                        write_slots(&mut v, &dims, &self.slot_positions(&slots)?, i);
                        branch.push((w * pw / p, v));
                    }
                    StateOp::Ensemble(branch)
                }
                StateOp::Dense(m) => {
                    let pr = self.embed_target_projector(&step.basis.vectors[i], &positions)?;
                    let projected = pr.matmul(m).matmul(&pr);
                    let mut normalized = projected.scale(cr(1.0 / p));
                    let slot_positions = self.slot_positions(&slots)?;
                    normalized = apply_slot_shift_dense(&normalized, &dims, &slot_positions, i);
                    StateOp::Dense(normalized)
                }
            };
            let st = RelativeState {
                universe: self.universe.clone(),
                system: self.system.clone(),
                time: self.time + 1,
                op,
            };
            st.validate(tol)?;
            out.push((i, p, st));
        }
        Ok(out)
    }

    fn slot_positions(&self, slots: &[usize]) -> Result<Vec<usize>, ModelError> {
        self.positions_of(slots)
    }

    /// Non-selective decoherence of `target` in `basis`: the projective
    /// mixture with no branch selection and no record.
    pub fn decohere(&self, step: &DecohereStep, tol: Tolerance) -> Result<Self, ModelError> {
        if step.clearance == Clearance::Pending {
            return Err(ModelError::DecohereNotCleared(step.name.clone()));
        }
        let positions = self.positions_of(&step.target)?;
        let maps = self.target_maps(&positions);
        let dims = self.dims();
        let tdim: usize = positions.iter().map(|&p| dims[p]).product();
        if step.basis.dim != tdim {
            return Err(ModelError::InvalidBasis(format!(
                "basis dimension {} does not match target dimension {}",
                step.basis.dim, tdim
            )));
        }
        let op = match &self.op {
            StateOp::Ensemble(members) => {
                let mut new_members = Vec::new();
                for (w, psi) in members {
                    for b in &step.basis.vectors {
                        let (proj, pw) = project_member(psi, b, &maps);
                        if pw <= 1e-30 {
                            continue;
                        }
                        let scale = 1.0 / pw.sqrt();
                        new_members.push((w * pw, proj.iter().map(|z| z * cr(scale)).collect()));
                    }
                }
                StateOp::Ensemble(new_members)
            }
            StateOp::Dense(m) => {
                let d = m.rows;
                let mut acc = ComplexMatrix::zeros(d, d);
                for b in &step.basis.vectors {
                    let pr = self.embed_target_projector(b, &positions)?;
                    acc = acc.add(&pr.matmul(m).matmul(&pr));
                }
                StateOp::Dense(acc)
            }
        };
        let st = RelativeState {
            universe: self.universe.clone(),
            system: self.system.clone(),
            time: self.time + 1,
            op,
        };
        st.validate(tol)?;
        Ok(st)
    }

    /// Relative state of a subsystem: partial trace onto `a`'s factors,
    /// same time and observer.
    pub fn subsystem_state(&self, a: &System) -> Result<Self, ModelError> {
        let labels = a.label_vec();
        let rho = self.reduced(&labels)?;
        Ok(RelativeState {
            universe: self.universe.clone(),
            system: labels,
            time: self.time,
            op: StateOp::Dense(rho),
        })
    }

    /// Probability of finding `labels` in their product-basis element
    /// `index`, together with the reduced state of `keep` conditional
    /// on that projection. `None` when the probability vanishes.
    pub fn conditional_reduced(
        &self,
        cond_labels: &[usize],
        index: usize,
        keep: &[usize],
        tol: Tolerance,
    ) -> Result<Option<(f64, ComplexMatrix)>, ModelError> {
        let cond_positions = self.positions_of(cond_labels)?;
        let dims = self.dims();
        let cdims: Vec<usize> = cond_positions.iter().map(|&p| dims[p]).collect();
        let digits = index_to_digits(index, &cdims);
        let full: usize = dims.iter().product();
        let mask: Vec<bool> = (0..full)
            .map(|k| {
                let kd = index_to_digits(k, &dims);
                cond_positions
                    .iter()
                    .zip(digits.iter())
                    .all(|(&p, &d)| kd[p] == d)
            })
            .collect();
        let masked_op = match &self.op {
            StateOp::Ensemble(members) => {
                let mut new_members = Vec::new();
                let mut prob = 0.0f64;
                for (w, psi) in members {
                    let masked: Vec<C64> = psi
                        .iter()
                        .enumerate()
                        .map(|(k, z)| if mask[k] { *z } else { C64::new(0.0, 0.0) })
                        .collect();
                    let n2: f64 = masked.iter().map(|z| z.norm_sqr()).sum();
                    if n2 <= 1e-30 {
                        continue;
                    }
                    prob += w * n2;
                    let scale = cr(1.0 / n2.sqrt());
                    new_members.push((w * n2, masked.iter().map(|z| z * scale).collect()));
                }
                if prob <= tol.eps {
                    return Ok(None);
                }
                for m in &mut new_members {
                    m.0 /= prob;
                }
                (prob, StateOp::Ensemble(new_members))
            }
            StateOp::Dense(m) => {
                let mut projected = ComplexMatrix::zeros(full, full);
                for i in 0..full {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..full {
                        if mask[j] {
                            projected.set(i, j, m.get(i, j));
                        }
                    }
                }
                let prob = projected.trace().re;
                if prob <= tol.eps {
                    return Ok(None);
                }
                (prob, StateOp::Dense(projected.scale(cr(1.0 / prob))))
            }
        };
        let (prob, op) = masked_op;
        let conditioned = RelativeState {
            universe: self.universe.clone(),
            system: self.system.clone(),
            time: self.time,
            op,
        };
        Ok(Some((prob, conditioned.reduced(keep)?)))
    }

    /// The underlying pure amplitude vector, when the state is a
    /// single-member pure ensemble.
    pub fn pure_amplitudes(&self) -> Option<&[C64]> {
        match &self.op {
            StateOp::Ensemble(members) if members.len() == 1 => Some(&members[0].1),
            _ => None,
        }
    }

    /// Structural state equality used by prefix comparison: densities
    /// compared entrywise within eps (cheap member-wise fast path when
    /// both sides were derived the same way).
    pub fn approx_eq(&self, other: &Self, tol: Tolerance) -> bool {
        if self.system != other.system {
            return false;
        }
        if let (StateOp::Ensemble(a), StateOp::Ensemble(b)) = (&self.op, &other.op) {
            if a.len() == b.len() {
                let member_eq = a.iter().zip(b.iter()).all(|((wa, va), (wb, vb))| {
                    (wa - wb).abs() < tol.eps
                        && va
                            .iter()
                            .zip(vb.iter())
                            .all(|(x, y)| (x - y).norm() < tol.eps)
                });
                if member_eq {
                    return true;
                }
            }
        }
        self.density().approx_eq(&other.density(), tol)
    }
}

struct TargetMaps {
    t_of: Vec<usize>,
    r_of: Vec<usize>,
    rdim: usize,
}

/// Returns `(P_b psi, |P_b psi|^2)` where `P_b` projects the target
/// factors onto basis vector `b`.
fn project_member(psi: &[C64], b: &[C64], maps: &TargetMaps) -> (Vec<C64>, f64) {
    let mut overlap = vec![C64::new(0.0, 0.0); maps.rdim];
    for (k, amp) in psi.iter().enumerate() {
        if amp.norm_sqr() == 0.0 {
            continue;
        }
        overlap[maps.r_of[k]] += b[maps.t_of[k]].conj() * amp;
    }
    let mut out = vec![C64::new(0.0, 0.0); psi.len()];
    let mut norm = 0.0f64;
    for (k, slot) in out.iter_mut().enumerate() {
        let v = b[maps.t_of[k]] * overlap[maps.r_of[k]];
        norm += v.norm_sqr();
        *slot = v;
    }
    (out, norm)
}

fn projected_norm_sqr(psi: &[C64], b: &[C64], maps: &TargetMaps) -> f64 {
    let mut overlap = vec![C64::new(0.0, 0.0); maps.rdim];
    for (k, amp) in psi.iter().enumerate() {
        if amp.norm_sqr() == 0.0 {
            continue;
        }
        overlap[maps.r_of[k]] += b[maps.t_of[k]].conj() * amp;
    }
    overlap.iter().map(|z| z.norm_sqr()).sum()
}

/// Shift the digits of the given slot positions by `outcome` (mod dim)
/// in a pure amplitude vector: the record-write unitary.
fn write_slots(psi: &mut [C64], dims: &[usize], slot_positions: &[usize], outcome: usize) {
    if outcome == 0 || slot_positions.is_empty() {
        return;
    }
    let full = psi.len();
    let mut out = vec![C64::new(0.0, 0.0); full];
    for (k, amp) in psi.iter().enumerate() {
        if amp.norm_sqr() == 0.0 {
            continue;
        }
        let mut digits = index_to_digits(k, dims);
        for &p in slot_positions {
            digits[p] = (digits[p] + outcome) % dims[p];
        }
        out[digits_to_index(&digits, dims)] = *amp;
    }
    psi.copy_from_slice(&out);
}

fn apply_slot_shift_dense(
    m: &ComplexMatrix,
    dims: &[usize],
    slot_positions: &[usize],
    outcome: usize,
) -> ComplexMatrix {
    if outcome == 0 || slot_positions.is_empty() {
        return m.clone();
    }
    let full = m.rows;
    let map: Vec<usize> = (0..full)
        .map(|k| {
            let mut digits = index_to_digits(k, dims);
            for &p in slot_positions {
                digits[p] = (digits[p] + outcome) % dims[p];
            }
            digits_to_index(&digits, dims)
        })
        .collect();
    let mut out = ComplexMatrix::zeros(full, full);
    for i in 0..full {
        for j in 0..full {
            out.set(map[i], map[j], m.get(i, j));
        }
    }
    out
}

/// Full-space projector `|b><b| ⊗ I` for a basis vector on the given
/// labels of the universe.
pub fn embed_projector_on(
    universe: &Universe,
    labels: &[usize],
    bvec: &[C64],
) -> Result<ComplexMatrix, ModelError> {
    let dims = universe.dims();
    let total = universe.total_dim();
    let tdims: Vec<usize> = labels.iter().map(|&l| dims[l]).collect();
    let tdim: usize = tdims.iter().product();
    if bvec.len() != tdim {
        return Err(ModelError::InvalidBasis(format!(
            "vector length {} does not match target dimension {}",
            bvec.len(),
            tdim
        )));
    }
    let rest: Vec<usize> = (0..dims.len()).filter(|l| !labels.contains(l)).collect();
    let rdims: Vec<usize> = rest.iter().map(|&l| dims[l]).collect();
    let mut t_of = vec![0usize; total];
    let mut r_of = vec![0usize; total];
    for k in 0..total {
        let digits = index_to_digits(k, &dims);
        let td: Vec<usize> = labels.iter().map(|&l| digits[l]).collect();
        let rd: Vec<usize> = rest.iter().map(|&l| digits[l]).collect();
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
    Ok(p)
}

/// Full-space permutation unitary shifting each slot's digit by
/// `outcome` (mod its dimension): the record-write map.
pub fn slot_shift_matrix(universe: &Universe, slots: &[usize], outcome: usize) -> ComplexMatrix {
    let dims = universe.dims();
    let total = universe.total_dim();
    let mut m = ComplexMatrix::zeros(total, total);
    for k in 0..total {
        let mut digits = index_to_digits(k, &dims);
        for &s in slots {
            digits[s] = (digits[s] + outcome) % dims[s];
        }
        m.set(digits_to_index(&digits, &dims), k, cr(1.0));
    }
    m
}

/// State-description compatibility: the operator supports have a
/// nonzero intersection (for pure inputs this is equality up to phase).
pub fn compatible(
    rho1: &ComplexMatrix,
    rho2: &ComplexMatrix,
    tol: Tolerance,
) -> Result<bool, ModelError> {
    if rho1.rows != rho2.rows || rho1.cols != rho2.cols {
        return Err(ModelError::InvalidState(
            "compatibility needs operators of equal dimension".into(),
        ));
    }
    let s1 = linalg::support_basis(rho1, tol)?;
    let s2 = linalg::support_basis(rho2, tol)?;
    let mut joint = s1.clone();
    joint.extend(s2.iter().cloned());
    let joint_rank = linalg::span_rank(&joint, tol);
    Ok(joint_rank < s1.len() + s2.len())
}

/// Projector onto the support of a density operator.
pub fn support_projector(
    rho: &ComplexMatrix,
    tol: Tolerance,
) -> Result<ComplexMatrix, ModelError> {
    let basis = linalg::support_basis(rho, tol)?;
    let d = rho.rows;
    let mut p = ComplexMatrix::zeros(d, d);
    for v in &basis {
        p = p.add(&linalg::projector(v)?);
    }
    Ok(p)
}

/// Eigendecompose a small density operator into a weighted pure
/// ensemble (eigenvalues above eps).
pub fn density_to_ensemble(rho: &ComplexMatrix, tol: Tolerance) -> Vec<(f64, Vec<C64>)> {
    let (vals, vecs) = hermitian_eigen(rho);
    let mut out = Vec::new();
    for (k, &l) in vals.iter().enumerate() {
        if l > tol.eps {
            out.push((l, (0..rho.rows).map(|i| vecs.get(i, k)).collect()));
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::linalg::projector;

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    fn plus_state() -> RelativeState {
        let u = lab_universe();
        let amps = amp_product(&u, &[ket_plus(), ket0(), ket0()]);
        RelativeState::pure_full(u, amps, tol()).unwrap()
    }

    fn fail_state() -> RelativeState {
        // CNOT(s -> f) applied to |+>|0>|0>
        let st = plus_state();
        let u = gate_matrix(
            &GateSpec::CNot { control: 0, target: 1 },
            &st.universe,
        )
        .unwrap();
        st.apply_unitary(&u, tol()).unwrap()
    }

    #[test]
    fn born_on_plus_is_uniform() {
        let st = plus_state();
        let p = st.born_distribution(&[0], &Basis::standard(2)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn born_on_biased_coin() {
        let u = lab_universe();
        let coin = vec![cr((1.0f64 / 3.0).sqrt()), cr((2.0f64 / 3.0).sqrt())];
        let amps = amp_product(&u, &[coin, ket0(), ket0()]);
        let st = RelativeState::pure_full(u, amps, tol()).unwrap();
        let p = st.born_distribution(&[0], &Basis::standard(2)).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn born_on_correlated_lab_in_bell_basis() {
        // inner products of the Bell-type vectors with (e00+e11)/sqrt2
        let st = fail_state();
        let p = st.born_distribution(&[0, 1], &bell_basis()).unwrap();
        assert!(p[0].abs() < 1e-12); // ok
        assert!((p[1] - 1.0).abs() < 1e-12); // fail
        assert!(p[2].abs() < 1e-12);
        assert!(p[3].abs() < 1e-12);
    }

    #[test]
    fn identity_step_keeps_state_and_bumps_time() {
        let st = plus_state();
        let u = ComplexMatrix::identity(st.dim());
        let next = st.apply_unitary(&u, tol()).unwrap();
        assert_eq!(next.time, st.time + 1);
        assert!(next.density().approx_eq(&st.density(), tol()));
    }

    #[test]
    fn entangling_unitary_reaches_correlated_lab_state() {
        let st = fail_state();
        let lab = st.reduced(&[0, 1]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let fail_vec = ComplexMatrix::col_real(&[s, 0.0, 0.0, s]);
        assert!(lab.approx_eq(&projector(&fail_vec).unwrap(), tol()));
    }

    #[test]
    fn hadamard_takes_zero_to_plus() {
        let u = lab_universe();
        let amps = amp_product(&u, &[ket0(), ket0(), ket0()]);
        let st = RelativeState::pure_full(u, amps, tol()).unwrap();
        let h = gate_matrix(&GateSpec::Hadamard(0), &st.universe).unwrap();
        let next = st.apply_unitary(&h, tol()).unwrap();
        let want = plus_state();
        assert!(next.density().approx_eq(&want.density(), tol()));
    }

    #[test]
    fn introspection_rejects_superposed_observer_memory() {
        let u = lab_universe();
        let amps = amp_product(&u, &[ket0(), ket0(), ket_plus()]);
        let got = RelativeState::pure_full(u, amps, tol());
        assert!(matches!(got, Err(ModelError::IntrospectionViolated(_))));
    }

    fn measure_s_step(u: &Universe) -> MeasureStep {
        MeasureStep {
            name: "m_s".into(),
            actor: u.observer.clone(),
            target: vec![0],
            basis: Basis::standard(2),
            slot: 2,
            broadcast: vec![],
        }
    }

    #[test]
    fn measuring_plus_branches_evenly_and_records() {
        let st = plus_state();
        let branches = st
            .measure_and_record(&measure_s_step(&st.universe), tol())
            .unwrap();
        assert_eq!(branches.len(), 2);
        for (i, p, b) in &branches {
            assert!((p - 0.5).abs() < 1e-12);
            let mem = b.introspection_index(tol()).unwrap();
            assert_eq!(mem, vec![*i]);
            let s_marginal = b.reduced(&[0]).unwrap();
            assert!((s_marginal.get(*i, *i).re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn measuring_definite_state_gives_single_branch() {
        let u = lab_universe();
        let amps = amp_product(&u, &[ket0(), ket0(), ket0()]);
        let st = RelativeState::pure_full(u, amps, tol()).unwrap();
        let branches = st
            .measure_and_record(&measure_s_step(&st.universe), tol())
            .unwrap();
        assert_eq!(branches.len(), 1);
        assert!((branches[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(branches[0].0, 0);
    }

    #[test]
    fn bell_measurement_of_correlated_lab_is_certain() {
        let st = fail_state();
        let step = MeasureStep {
            name: "m_lab".into(),
            actor: st.universe.observer.clone(),
            target: vec![0, 1],
            basis: bell_basis(),
            slot: 2,
            broadcast: vec![],
        };
        let branches = st.measure_and_record(&step, tol()).unwrap();
        assert_eq!(branches.len(), 1);
        assert_eq!(branches[0].0, 1); // "fail"
        assert!((branches[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn branch_probabilities_match_born_distribution() {
        let st = fail_state();
        let step = MeasureStep {
            name: "m_s".into(),
            actor: st.universe.observer.clone(),
            target: vec![0],
            basis: Basis::standard(2),
            slot: 2,
            broadcast: vec![],
        };
        let born = st.born_distribution(&[0], &Basis::standard(2)).unwrap();
        let branches = st.measure_and_record(&step, tol()).unwrap();
        let total: f64 = branches.iter().map(|(_, p, _)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (i, p, _) in &branches {
            assert!((p - born[*i]).abs() < 1e-12);
        }
    }

    fn decohere_s_step() -> DecohereStep {
        DecohereStep {
            name: "d_s".into(),
            actor: System::new([1usize]),
            target: vec![0],
            basis: Basis::standard(2),
            clearance: Clearance::Verified,
        }
    }

    #[test]
    fn decohering_correlated_lab_gives_classical_mixture() {
        let st = fail_state();
        let mixed = st.decohere(&decohere_s_step(), tol()).unwrap();
        let lab = mixed.reduced(&[0, 1]).unwrap();
        let mut want = ComplexMatrix::zeros(4, 4);
        want.set(0, 0, cr(0.5));
        want.set(3, 3, cr(0.5));
        assert!(lab.approx_eq(&want, tol()));
    }

    #[test]
    fn decohere_fixes_already_diagonal_states() {
        let st = fail_state();
        let once = st.decohere(&decohere_s_step(), tol()).unwrap();
        let twice = once.decohere(&decohere_s_step(), tol()).unwrap();
        assert!(once.density().approx_eq(&twice.density(), tol()));
    }

    #[test]
    fn decohering_plus_gives_maximally_mixed() {
        let st = plus_state();
        let mixed = st.decohere(&decohere_s_step(), tol()).unwrap();
        let s_marginal = mixed.reduced(&[0]).unwrap();
        assert!(s_marginal.approx_eq(&ComplexMatrix::identity(2).scale(cr(0.5)), tol()));
    }

    #[test]
    fn decohere_requires_clearance() {
        let st = fail_state();
        let mut step = decohere_s_step();
        step.clearance = Clearance::Pending;
        assert!(matches!(
            st.decohere(&step, tol()),
            Err(ModelError::DecohereNotCleared(_))
        ));
    }

    #[test]
    fn decohere_equals_branch_mixture_without_records() {
        let st = fail_state();
        let decohered = st.decohere(&decohere_s_step(), tol()).unwrap();
        let step = measure_s_step(&st.universe);
        let branches = st.measure_and_record(&step, tol()).unwrap();
        // the memory register is traced out before comparing
        let mut mix = ComplexMatrix::zeros(4, 4);
        for (_, p, b) in &branches {
            mix = mix.add(&b.reduced(&[0, 1]).unwrap().scale(cr(*p)));
        }
        assert!(decohered.reduced(&[0, 1]).unwrap().approx_eq(&mix, tol()));
    }

    #[test]
    fn subsystem_of_correlated_lab_is_maximally_mixed() {
        let st = fail_state();
        let sub = st.subsystem_state(&System::new([0usize])).unwrap();
        assert_eq!(sub.time, st.time);
        assert!(sub
            .density()
            .approx_eq(&ComplexMatrix::identity(2).scale(cr(0.5)), tol()));
    }

    #[test]
    fn subsystem_of_product_state_is_the_factor() {
        let st = plus_state();
        let sub = st.subsystem_state(&System::new([0usize])).unwrap();
        let plus = ComplexMatrix::col_real(&[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        assert!(sub.density().approx_eq(&projector(&plus).unwrap(), tol()));
    }

    #[test]
    fn subsystem_after_leak_traces_to_classical_lab() {
        // the three-way correlated state (|000> + |111>)/sqrt2 on s,f,o
        let labels = vec![
            SystemId { name: "s".into(), dim: 2 },
            SystemId { name: "f".into(), dim: 2 },
            SystemId { name: "o".into(), dim: 2 },
        ];
        let universe = Arc::new(
            Universe::new(
                labels,
                System::new([2usize]),
                BTreeMap::new(),
                [2usize].into_iter().collect(),
            )
            .unwrap(),
        );
        let s = 1.0 / 2f64.sqrt();
        let mut amps = vec![C64::new(0.0, 0.0); 8];
        amps[0] = cr(s);
        amps[7] = cr(s);
        // observer memory is entangled here, so skip the introspection
        // check by treating o as a plain label
        let universe2 = Arc::new(
            Universe::new(
                universe.labels.clone(),
                System::new([0usize]),
                BTreeMap::new(),
                BTreeSet::new(),
            )
            .unwrap(),
        );
        // observer overlap on s is mixed too; use a state-level check only
        let st = RelativeState {
            universe: universe2,
            system: vec![0, 1, 2],
            time: 0,
            op: StateOp::Ensemble(vec![(1.0, amps)]),
        };
        let lab = st.reduced(&[0, 1]).unwrap();
        let mut want = ComplexMatrix::zeros(4, 4);
        want.set(0, 0, cr(0.5));
        want.set(3, 3, cr(0.5));
        assert!(lab.approx_eq(&want, tol()));
    }

    #[test]
    fn compatibility_examples() {
        let t = tol();
        let e0 = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        assert!(compatible(&e0, &e0, t).unwrap());

        let s = 1.0 / 2f64.sqrt();
        let fail = projector(&ComplexMatrix::col_real(&[s, 0.0, 0.0, s])).unwrap();
        let e00 = projector(&ComplexMatrix::basis_vector(4, 0)).unwrap();
        assert!(!compatible(&e00, &fail, t).unwrap());

        let half = ComplexMatrix::identity(2).scale(cr(0.5));
        assert!(compatible(&half, &e0, t).unwrap());
    }

    #[test]
    fn compatibility_requires_equal_dims() {
        let e0 = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        let e00 = projector(&ComplexMatrix::basis_vector(4, 0)).unwrap();
        assert!(compatible(&e0, &e00, tol()).is_err());
    }
}
