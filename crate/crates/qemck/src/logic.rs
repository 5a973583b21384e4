//! The epistemic formula language and its protocol semantics.
//!
//! Grammar (`!` binds tightest, then `&`, `|`, `->`; `K[a]`/`P[a]` bind
//! like `!`; `->` associates right):
//!
//! ```text
//! formula ::= atom | "!" formula | formula "&" formula
//!           | formula "|" formula | formula "->" formula
//!           | "K[" ident "]" formula | "P[" ident "]" formula
//! atom    ::= "outcome(" step "," label ")" | "halted" | "true" | "false"
//! ```
//!
//! A knowledge operator is meaningful only for admissible observers:
//! `well_formed` walks the nesting and requires every agent to be
//! admissible from the perspective of its enclosing agent (the
//! background observer at top level). Evaluation reads `K[a] f` as: `f`
//! holds in every history the agent cannot distinguish from the actual
//! one, where the background observer distinguishes by observed
//! prefixes and any other agent by its own reduced states.

use crate::linalg::{ComplexMatrix, Tolerance};
use crate::observer::{admissible_observer, re_anchor, ObserverError};
use crate::protocol::{Protocol, ProtocolError};
use crate::system::{StepDef, System};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LogicError {
    #[error("syntax error at column {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("unknown outcome `{label}` at step `{step}`")]
    UnknownOutcome { step: String, label: String },
    #[error("protocol declares no halting condition")]
    NoHaltingCondition,
    #[error("ill-formed formula: `{inner}` is not an admissible observer for `{outer}`")]
    IllFormed { outer: String, inner: String },
    #[error("{0}")]
    Observer(String),
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
}

impl From<ObserverError> for LogicError {
    fn from(e: ObserverError) -> Self {
        LogicError::Observer(e.to_string())
    }
}

/// Epistemic proposition over a protocol's realized outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    True,
    False,
    Halted,
    Outcome(String, String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Know(String, Box<Formula>),
    Possible(String, Box<Formula>),
}

impl Formula {
    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Formula {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Formula {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn know(agent: &str, f: Formula) -> Formula {
        Formula::Know(agent.to_string(), Box::new(f))
    }

    pub fn possible(agent: &str, f: Formula) -> Formula {
        Formula::Possible(agent.to_string(), Box::new(f))
    }

    pub fn outcome(step: &str, label: &str) -> Formula {
        Formula::Outcome(step.to_string(), label.to_string())
    }

    fn precedence(&self) -> u8 {
        match self {
            Formula::Implies(..) => 1,
            Formula::Or(..) => 2,
            Formula::And(..) => 3,
            Formula::Not(..) | Formula::Know(..) | Formula::Possible(..) => 4,
            _ => 5,
        }
    }

    fn print_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        let prec = self.precedence();
        if prec < parent {
            write!(f, "(")?;
        }
        match self {
            Formula::True => write!(f, "true")?,
            Formula::False => write!(f, "false")?,
            Formula::Halted => write!(f, "halted")?,
            Formula::Outcome(step, label) => write!(f, "outcome({}, {})", step, label)?,
            Formula::Not(inner) => {
                write!(f, "!")?;
                inner.print_prec(f, 4)?;
            }
            Formula::Know(agent, inner) => {
                write!(f, "K[{}] ", agent)?;
                inner.print_prec(f, 4)?;
            }
            Formula::Possible(agent, inner) => {
                write!(f, "P[{}] ", agent)?;
                inner.print_prec(f, 4)?;
            }
            Formula::And(a, b) => {
                a.print_prec(f, 3)?;
                write!(f, " & ")?;
                b.print_prec(f, 4)?;
            }
            Formula::Or(a, b) => {
                a.print_prec(f, 2)?;
                write!(f, " | ")?;
                b.print_prec(f, 3)?;
            }
            Formula::Implies(a, b) => {
                a.print_prec(f, 2)?;
                write!(f, " -> ")?;
                b.print_prec(f, 1)?;
            }
        }
        if prec < parent {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.print_prec(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Bang,
    Amp,
    Pipe,
    Arrow,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, LogicError> {
    let mut out = Vec::new();
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '(' => {
                out.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Token::RParen));
                i += 1;
            }
            '[' => {
                out.push((i, Token::LBracket));
                i += 1;
            }
            ']' => {
                out.push((i, Token::RBracket));
                i += 1;
            }
            ',' => {
                out.push((i, Token::Comma));
                i += 1;
            }
            '!' => {
                out.push((i, Token::Bang));
                i += 1;
            }
            '&' => {
                out.push((i, Token::Amp));
                i += 1;
            }
            '|' => {
                out.push((i, Token::Pipe));
                i += 1;
            }
            '-' => {
                if bytes.get(i + 1) == Some(&'>') {
                    out.push((i, Token::Arrow));
                    i += 2;
                } else {
                    return Err(LogicError::Syntax {
                        position: i,
                        message: "expected `->`".into(),
                    });
                }
            }
            c if c.is_alphanumeric() || c == '_' || c == '+' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_alphanumeric() || bytes[i] == '_' || bytes[i] == '+')
                {
                    i += 1;
                }
                out.push((start, Token::Ident(bytes[start..i].iter().collect())));
            }
            other => {
                return Err(LogicError::Syntax {
                    position: i,
                    message: format!("unexpected character `{}`", other),
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or(self.len)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), LogicError> {
        let position = self.position();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            _ => Err(LogicError::Syntax {
                position,
                message: format!("expected {}", what),
            }),
        }
    }

    fn parse_implies(&mut self) -> Result<Formula, LogicError> {
        let lhs = self.parse_or()?;
        if self.peek() == Some(&Token::Arrow) {
            self.bump();
            let rhs = self.parse_implies()?;
            Ok(Formula::implies(lhs, rhs))
        } else {
            Ok(lhs)
        }
    }

    fn parse_or(&mut self) -> Result<Formula, LogicError> {
        let mut lhs = self.parse_and()?;
        while self.peek() == Some(&Token::Pipe) {
            self.bump();
            let rhs = self.parse_and()?;
            lhs = Formula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Formula, LogicError> {
        let mut lhs = self.parse_unary()?;
        while self.peek() == Some(&Token::Amp) {
            self.bump();
            let rhs = self.parse_unary()?;
            lhs = Formula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Formula, LogicError> {
        match self.peek() {
            Some(Token::Bang) => {
                self.bump();
                Ok(Formula::not(self.parse_unary()?))
            }
            Some(Token::Ident(name)) if (name == "K" || name == "P") => {
                // a modal head only when followed by `[`
                if self.tokens.get(self.pos + 1).map(|(_, t)| t) == Some(&Token::LBracket) {
                    let modal = name.clone();
                    self.bump();
                    self.bump();
                    let position = self.position();
                    let agent = match self.bump() {
                        Some(Token::Ident(a)) => a,
                        _ => {
                            return Err(LogicError::Syntax {
                                position,
                                message: "expected an agent name".into(),
                            })
                        }
                    };
                    self.expect(Token::RBracket, "`]`")?;
                    let inner = self.parse_unary()?;
                    Ok(if modal == "K" {
                        Formula::Know(agent, Box::new(inner))
                    } else {
                        Formula::Possible(agent, Box::new(inner))
                    })
                } else {
                    self.parse_primary()
                }
            }
            _ => self.parse_primary(),
        }
    }

    fn parse_primary(&mut self) -> Result<Formula, LogicError> {
        let position = self.position();
        match self.bump() {
            Some(Token::LParen) => {
                let inner = self.parse_implies()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Token::Ident(word)) => match word.as_str() {
                "true" => Ok(Formula::True),
                "false" => Ok(Formula::False),
                "halted" => Ok(Formula::Halted),
                "outcome" => {
                    self.expect(Token::LParen, "`(` after `outcome`")?;
                    let spos = self.position();
                    let step = match self.bump() {
                        Some(Token::Ident(s)) => s,
                        _ => {
                            return Err(LogicError::Syntax {
                                position: spos,
                                message: "expected a step name".into(),
                            })
                        }
                    };
                    self.expect(Token::Comma, "`,`")?;
                    let lpos = self.position();
                    let label = match self.bump() {
                        Some(Token::Ident(l)) => l,
                        _ => {
                            return Err(LogicError::Syntax {
                                position: lpos,
                                message: "expected an outcome label".into(),
                            })
                        }
                    };
                    self.expect(Token::RParen, "`)`")?;
                    Ok(Formula::Outcome(step, label))
                }
                other => Err(LogicError::Syntax {
                    position,
                    message: format!("unexpected word `{}`", other),
                }),
            },
            _ => Err(LogicError::Syntax {
                position,
                message: "expected a formula".into(),
            }),
        }
    }
}

/// Parses the formula DSL; round-trips through [`Formula`]'s `Display`.
pub fn parse(text: &str) -> Result<Formula, LogicError> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        len: text.len(),
    };
    let f = p.parse_implies()?;
    if p.pos != p.tokens.len() {
        return Err(LogicError::Syntax {
            position: p.position(),
            message: "trailing input".into(),
        });
    }
    Ok(f)
}

/// Gate result for a formula against a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct WellFormedness {
    pub formula: Formula,
    pub verdict: bool,
    /// The first (outer agent, inner agent) pair failing the gate.
    pub failing_nesting: Option<(String, String)>,
}

/// Shared gate/evaluation context with memoized admissibility verdicts,
/// re-anchored protocols and per-agent indistinguishability cells.
pub struct Checker<'a> {
    pi: &'a Protocol,
    tol: Tolerance,
    gate_memo: BTreeMap<(String, String), bool>,
    anchor_memo: BTreeMap<String, Option<Protocol>>,
    /// agent -> [t][h] -> cell members
    cell_memo: BTreeMap<String, Vec<Vec<Vec<usize>>>>,
}

const BACKGROUND: &str = "";

impl<'a> Checker<'a> {
    pub fn new(pi: &'a Protocol) -> Self {
        Checker {
            pi,
            tol: pi.tolerance,
            gate_memo: BTreeMap::new(),
            anchor_memo: BTreeMap::new(),
            cell_memo: BTreeMap::new(),
        }
    }

    fn resolve_agent(&self, name: &str) -> Result<System, LogicError> {
        self.pi
            .universe
            .resolve_system(name)
            .map_err(|_| LogicError::UnknownAgent(name.to_string()))
    }

    fn bind_atoms(&self, f: &Formula) -> Result<(), LogicError> {
        match f {
            Formula::Outcome(step, label) => {
                let slot = self
                    .pi
                    .step_index(step)
                    .map_err(|_| LogicError::UnknownStep(step.clone()))?;
                let m = self
                    .pi
                    .measure_step(slot)
                    .ok_or_else(|| LogicError::UnknownStep(step.clone()))?;
                if m.basis.outcome_index(label).is_none() {
                    return Err(LogicError::UnknownOutcome {
                        step: step.clone(),
                        label: label.clone(),
                    });
                }
                Ok(())
            }
            Formula::Halted => {
                if self.pi.halting.is_empty() {
                    Err(LogicError::NoHaltingCondition)
                } else {
                    Ok(())
                }
            }
            Formula::True | Formula::False => Ok(()),
            Formula::Not(a) => self.bind_atoms(a),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                self.bind_atoms(a)?;
                self.bind_atoms(b)
            }
            Formula::Know(agent, a) | Formula::Possible(agent, a) => {
                self.resolve_agent(agent)?;
                self.bind_atoms(a)
            }
        }
    }

    /// Admissibility of `inner` from the perspective of `outer`
    /// (the background observer when `outer` is `BACKGROUND`).
    fn gate(&mut self, outer: &str, inner: &str) -> Result<bool, LogicError> {
        let key = (outer.to_string(), inner.to_string());
        if let Some(&v) = self.gate_memo.get(&key) {
            return Ok(v);
        }
        let inner_sys = self.resolve_agent(inner)?;
        let verdict = if outer == BACKGROUND {
            admissible_observer(&inner_sys, self.pi, self.tol)?.verdict
        } else {
            let outer_sys = self.resolve_agent(outer)?;
            if !self.anchor_memo.contains_key(outer) {
                let anchored = re_anchor(self.pi, &outer_sys).ok();
                self.anchor_memo.insert(outer.to_string(), anchored);
            }
            match self.anchor_memo.get(outer).unwrap() {
                Some(anchored) => admissible_observer(&inner_sys, anchored, self.tol)?.verdict,
                // the outer agent's memory is not definite, so no
                // description can be anchored to it at all
                None => false,
            }
        };
        self.gate_memo.insert(key, verdict);
        Ok(verdict)
    }

    fn gate_walk(
        &mut self,
        f: &Formula,
        outer: &str,
    ) -> Result<Option<(String, String)>, LogicError> {
        match f {
            Formula::Know(agent, inner) | Formula::Possible(agent, inner) => {
                if !self.gate(outer, agent)? {
                    let outer_name = if outer == BACKGROUND {
                        self.pi.universe.system_name(&self.pi.universe.observer)
                    } else {
                        outer.to_string()
                    };
                    return Ok(Some((outer_name, agent.clone())));
                }
                self.gate_walk(inner, agent)
            }
            Formula::Not(a) => self.gate_walk(a, outer),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                if let Some(fail) = self.gate_walk(a, outer)? {
                    return Ok(Some(fail));
                }
                self.gate_walk(b, outer)
            }
            _ => Ok(None),
        }
    }

    /// The admissibility-gated well-formedness check.
    pub fn well_formed(&mut self, f: &Formula) -> Result<WellFormedness, LogicError> {
        self.bind_atoms(f)?;
        let failing = self.gate_walk(f, BACKGROUND)?;
        Ok(WellFormedness {
            formula: f.clone(),
            verdict: failing.is_none(),
            failing_nesting: failing,
        })
    }

    /// Indistinguishability cells of an agent: the background observer
    /// compares observed prefixes, any other agent its own reduced
    /// states at all times up to `t`.
    fn agent_cells(&mut self, agent: &str) -> Result<&Vec<Vec<Vec<usize>>>, LogicError> {
        if !self.cell_memo.contains_key(agent) {
            let sys = self.resolve_agent(agent)?;
            let nh = self.pi.histories.len();
            let mut per_t = Vec::with_capacity(self.pi.length + 1);
            if sys == self.pi.universe.observer {
                for t in 0..=self.pi.length {
                    let mut cells = Vec::with_capacity(nh);
                    for h in 0..nh {
                        cells.push(self.pi.cell(h, t).members);
                    }
                    per_t.push(cells);
                }
            } else {
                let labels = sys.label_vec();
                // reduced trajectory per history
                let mut reduced: Vec<Vec<ComplexMatrix>> = Vec::with_capacity(nh);
                for h in &self.pi.histories {
                    let mut traj = Vec::with_capacity(self.pi.length + 1);
                    for st in &h.states {
                        traj.push(st.reduced(&labels).map_err(ProtocolError::from)?);
                    }
                    reduced.push(traj);
                }
                for t in 0..=self.pi.length {
                    let mut cells = Vec::with_capacity(nh);
                    for h in 0..nh {
                        let members: Vec<usize> = (0..nh)
                            .filter(|&other| {
                                (0..=t).all(|k| {
                                    reduced[h][k].approx_eq(&reduced[other][k], self.tol)
                                })
                            })
                            .collect();
                        cells.push(members);
                    }
                    per_t.push(cells);
                }
            }
            self.cell_memo.insert(agent.to_string(), per_t);
        }
        Ok(self.cell_memo.get(agent).unwrap())
    }

    fn eval_unchecked(&mut self, f: &Formula, h: usize, t: usize) -> Result<bool, LogicError> {
        Ok(match f {
            Formula::True => true,
            Formula::False => false,
            Formula::Halted => self.pi.halted(h)?,
            Formula::Outcome(step, label) => self.pi.outcome_holds(h, step, label)?,
            Formula::Not(a) => !self.eval_unchecked(a, h, t)?,
            Formula::And(a, b) => self.eval_unchecked(a, h, t)? && self.eval_unchecked(b, h, t)?,
            Formula::Or(a, b) => self.eval_unchecked(a, h, t)? || self.eval_unchecked(b, h, t)?,
            Formula::Implies(a, b) => {
                !self.eval_unchecked(a, h, t)? || self.eval_unchecked(b, h, t)?
            }
            Formula::Know(agent, inner) => {
                let members = self.agent_cells(agent)?[t][h].clone();
                for m in members {
                    if !self.eval_unchecked(inner, m, t)? {
                        return Ok(false);
                    }
                }
                true
            }
            Formula::Possible(agent, inner) => {
                let members = self.agent_cells(agent)?[t][h].clone();
                for m in members {
                    if self.eval_unchecked(inner, m, t)? {
                        return Ok(true);
                    }
                }
                false
            }
        })
    }

    /// Truth of a well-formed formula at `(h, t)`.
    pub fn eval(&mut self, f: &Formula, h: usize, t: usize) -> Result<bool, LogicError> {
        let wf = self.well_formed(f)?;
        if !wf.verdict {
            let (outer, inner) = wf.failing_nesting.unwrap();
            return Err(LogicError::IllFormed { outer, inner });
        }
        self.eval_unchecked(f, h, t)
    }

    /// Validity: truth at every history and time.
    pub fn valid(&mut self, f: &Formula) -> Result<bool, LogicError> {
        let wf = self.well_formed(f)?;
        if !wf.verdict {
            let (outer, inner) = wf.failing_nesting.unwrap();
            return Err(LogicError::IllFormed { outer, inner });
        }
        Ok(self.valid_with_witness(f)?.is_none())
    }

    /// As `valid` without the gate, reporting the first counterexample.
    fn valid_with_witness(&mut self, f: &Formula) -> Result<Option<(usize, usize)>, LogicError> {
        for h in 0..self.pi.histories.len() {
            for t in 0..=self.pi.length {
                if !self.eval_unchecked(f, h, t)? {
                    return Ok(Some((h, t)));
                }
            }
        }
        Ok(None)
    }

    /// The size of an agent's cell at an anchor, for reports.
    pub fn cell_size(&mut self, agent: &str, h: usize, t: usize) -> Result<usize, LogicError> {
        Ok(self.agent_cells(agent)?[t][h].len())
    }

    pub fn cell_members(
        &mut self,
        agent: &str,
        h: usize,
        t: usize,
    ) -> Result<Vec<usize>, LogicError> {
        Ok(self.agent_cells(agent)?[t][h].clone())
    }
}

/// One counterexample to an epistemic principle.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Counterexample {
    pub formula: String,
    pub history: String,
    pub time: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PrincipleResult {
    pub checked: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl PrincipleResult {
    pub fn holds(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Results of the epistemic-principle battery over a community.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AxiomReport {
    pub factivity: PrincipleResult,
    pub monotonicity: PrincipleResult,
    pub knowledge_transfer: PrincipleResult,
}

impl AxiomReport {
    pub fn all_hold(&self) -> bool {
        self.factivity.holds() && self.monotonicity.holds() && self.knowledge_transfer.holds()
    }
}

/// Generates the formula battery: every outcome atom that occurs in
/// some history (plus `halted` when declared), the constants, their
/// negations, and all binary Boolean combinations of those.
pub fn formula_battery(pi: &Protocol) -> Vec<Formula> {
    let mut atoms = vec![Formula::True, Formula::False];
    for (k, name) in pi.step_names.iter().enumerate() {
        if let StepDef::Measure(m) = pi.histories[0].steps[k].as_ref() {
            for label in &m.basis.outcome_labels {
                let idx = m.basis.outcome_index(label).unwrap();
                if pi
                    .histories
                    .iter()
                    .any(|h| h.outcomes.get(&k) == Some(&idx))
                {
                    atoms.push(Formula::outcome(name, label));
                }
            }
        }
    }
    if !pi.halting.is_empty() {
        atoms.push(Formula::Halted);
    }
    let mut base = atoms.clone();
    base.extend(atoms.iter().cloned().map(Formula::not));
    let mut battery = base.clone();
    for a in &base {
        for b in &base {
            battery.push(Formula::and(a.clone(), b.clone()));
            battery.push(Formula::or(a.clone(), b.clone()));
            battery.push(Formula::implies(a.clone(), b.clone()));
        }
    }
    battery
}

/// Checks Factivity, Monotonicity and Knowledge Transfer over the
/// generated battery for every agent in the community.
pub fn axiom_suite(
    pi: &Protocol,
    community: &[(String, System)],
) -> Result<AxiomReport, LogicError> {
    let mut checker = Checker::new(pi);
    let battery = formula_battery(pi);
    let agents: Vec<&str> = community.iter().map(|(n, _)| n.as_str()).collect();
    let cap = 5usize;

    // factivity: K[a] f -> f
    let mut factivity = PrincipleResult {
        checked: 0,
        counterexamples: Vec::new(),
    };
    for a in &agents {
        for f in &battery {
            let claim = Formula::implies(Formula::know(a, f.clone()), f.clone());
            factivity.checked += 1;
            if let Some((h, t)) = checker.valid_with_witness(&claim)? {
                if factivity.counterexamples.len() < cap {
                    factivity.counterexamples.push(Counterexample {
                        formula: claim.to_string(),
                        history: pi.histories[h].id.clone(),
                        time: t,
                    });
                }
            }
        }
    }

    // monotonicity: whenever f -> g is valid, K[a] f -> K[a] g is valid
    let mut monotonicity = PrincipleResult {
        checked: 0,
        counterexamples: Vec::new(),
    };
    for f in &battery {
        for g in &battery {
            let imp = Formula::implies(f.clone(), g.clone());
            if checker.valid_with_witness(&imp)?.is_some() {
                continue;
            }
            for a in &agents {
                let claim =
                    Formula::implies(Formula::know(a, f.clone()), Formula::know(a, g.clone()));
                monotonicity.checked += 1;
                if let Some((h, t)) = checker.valid_with_witness(&claim)? {
                    if monotonicity.counterexamples.len() < cap {
                        monotonicity.counterexamples.push(Counterexample {
                            formula: claim.to_string(),
                            history: pi.histories[h].id.clone(),
                            time: t,
                        });
                    }
                }
            }
        }
    }

    // knowledge transfer: K[a] K[b] f -> K[a] f
    let mut transfer = PrincipleResult {
        checked: 0,
        counterexamples: Vec::new(),
    };
    for a in &agents {
        for b in &agents {
            for f in &battery {
                let claim = Formula::implies(
                    Formula::know(a, Formula::know(b, f.clone())),
                    Formula::know(a, f.clone()),
                );
                transfer.checked += 1;
                if let Some((h, t)) = checker.valid_with_witness(&claim)? {
                    if transfer.counterexamples.len() < cap {
                        transfer.counterexamples.push(Counterexample {
                            formula: claim.to_string(),
                            history: pi.histories[h].id.clone(),
                            time: t,
                        });
                    }
                }
            }
        }
    }

    Ok(AxiomReport {
        factivity,
        monotonicity,
        knowledge_transfer: transfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::test_support::*;
    use crate::protocol::{build_protocol, SlotSpec, StepSpec};
    use crate::system::Basis;

    #[test]
    fn parses_knowledge_over_atom() {
        let f = parse("K[W] outcome(m_F, 0)").unwrap();
        assert_eq!(f, Formula::know("W", Formula::outcome("m_F", "0")));
    }

    #[test]
    fn parses_nested_negated_knowledge() {
        let f = parse("K[W] K[Wbar] !outcome(m_W, ok)").unwrap();
        assert_eq!(
            f,
            Formula::know(
                "W",
                Formula::know("Wbar", Formula::not(Formula::outcome("m_W", "ok")))
            )
        );
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(
            parse("K[W] & outcome"),
            Err(LogicError::Syntax { .. })
        ));
        assert!(matches!(parse(""), Err(LogicError::Syntax { .. })));
        assert!(matches!(parse("outcome(a)"), Err(LogicError::Syntax { .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        let f = parse("true & false | true -> false").unwrap();
        // ((true & false) | true) -> false
        assert_eq!(
            f,
            Formula::implies(
                Formula::or(Formula::and(Formula::True, Formula::False), Formula::True),
                Formula::False
            )
        );
        let g = parse("true -> false -> true").unwrap();
        assert_eq!(
            g,
            Formula::implies(
                Formula::True,
                Formula::implies(Formula::False, Formula::True)
            )
        );
    }

    #[test]
    fn printer_round_trips() {
        for text in [
            "K[W] outcome(m_F, 0)",
            "K[W] K[Wbar] !outcome(m_W, ok)",
            "(true | false) & halted -> P[F] true",
            "!(true & false)",
        ] {
            let ast = parse(text).unwrap();
            let printed = ast.to_string();
            let reparsed = parse(&printed).unwrap();
            assert_eq!(ast, reparsed, "round trip failed for `{}`", text);
        }
    }

    fn measured_protocol() -> Protocol {
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_s".into(),
            actor: spec.universe.observer.clone(),
            target: vec![0],
            basis: Basis::standard(2),
            slot: 2,
            broadcast: vec![],
        }));
        spec.halting = vec![("m_s".into(), "0".into())];
        build_protocol(&spec).unwrap()
    }

    #[test]
    fn observer_knows_recorded_outcomes() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        let know0 = Formula::know(&observer_name, Formula::outcome("m_s", "0"));
        // before the measurement the outcome is open
        assert!(!checker.eval(&know0, 0, 1).unwrap());
        // afterwards the observer's cell separates
        assert!(checker.eval(&know0, 0, 2).unwrap());
        assert!(!checker.eval(&know0, 1, 2).unwrap());
    }

    #[test]
    fn possibility_is_dual_to_knowledge() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        let p = Formula::possible(&observer_name, Formula::outcome("m_s", "1"));
        assert!(checker.eval(&p, 0, 0).unwrap());
        assert!(!checker.eval(&p, 0, 2).unwrap());
    }

    #[test]
    fn singleton_protocol_knowledge_collapses_to_truth() {
        let pi = build_protocol(&correlating_spec()).unwrap();
        let mut checker = Checker::new(&pi);
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        for f in [Formula::True, Formula::False] {
            let know = Formula::know(&observer_name, f.clone());
            for t in 0..=pi.length {
                assert_eq!(
                    checker.eval(&know, 0, t).unwrap(),
                    checker.eval(&f, 0, t).unwrap()
                );
            }
        }
    }

    #[test]
    fn agent_cells_track_private_memory() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        // the friend's memory is written by the correlating step, so
        // after the s-measurement F's reduced state separates branches
        let know = Formula::know("F", Formula::outcome("m_s", "0"));
        assert!(checker.eval(&know, 0, 2).unwrap());
        assert!(!checker.eval(&know, 1, 2).unwrap());
        // before any correlation F knows nothing
        assert!(!checker.eval(&know, 0, 0).unwrap());
    }

    #[test]
    fn gate_rejects_inadmissible_agent() {
        // destructive lab measurement makes F inadmissible
        let mut spec = correlating_spec();
        spec.slots.push(SlotSpec::Shared(StepSpec::Measure {
            name: "m_lab".into(),
            actor: spec.universe.observer.clone(),
            target: vec![0, 1],
            basis: crate::system::test_support::bell_basis(),
            slot: 2,
            broadcast: vec![],
        }));
        let pi = build_protocol(&spec).unwrap();
        let mut checker = Checker::new(&pi);
        let f = Formula::know("F", Formula::outcome("m_lab", "fail"));
        let wf = checker.well_formed(&f).unwrap();
        assert!(!wf.verdict);
        let (outer, inner) = wf.failing_nesting.unwrap();
        assert_eq!(inner, "F");
        assert_eq!(outer, pi.universe.system_name(&pi.universe.observer));
        assert!(matches!(
            checker.eval(&f, 0, 0),
            Err(LogicError::IllFormed { .. })
        ));
    }

    #[test]
    fn unknown_names_are_binding_errors() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        assert!(matches!(
            checker.well_formed(&Formula::know("Ghost", Formula::True)),
            Err(LogicError::UnknownAgent(_))
        ));
        assert!(matches!(
            checker.well_formed(&Formula::outcome("m_ghost", "0")),
            Err(LogicError::UnknownStep(_))
        ));
        assert!(matches!(
            checker.well_formed(&Formula::outcome("m_s", "7")),
            Err(LogicError::UnknownOutcome { .. })
        ));
    }

    #[test]
    fn validity_quantifies_over_anchors() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        assert!(checker.valid(&parse("true").unwrap()).unwrap());
        assert!(!checker.valid(&parse("outcome(m_s, 0)").unwrap()).unwrap());
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        let factive = Formula::implies(
            Formula::know(&observer_name, Formula::outcome("m_s", "0")),
            Formula::outcome("m_s", "0"),
        );
        assert!(checker.valid(&factive).unwrap());
    }

    #[test]
    fn knowledge_of_past_outcomes_is_monotone() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        let know = Formula::know(&observer_name, Formula::outcome("m_s", "0"));
        let mut seen = false;
        for t in 0..=pi.length {
            let now = checker.eval(&know, 0, t).unwrap();
            if seen {
                assert!(now, "knowledge lost at t={}", t);
            }
            seen |= now;
        }
        assert!(seen);
    }

    #[test]
    fn axiom_suite_passes_for_observer_and_friend() {
        let pi = measured_protocol();
        let observer_name = pi.universe.system_name(&pi.universe.observer);
        let community = vec![
            (observer_name, pi.universe.observer.clone()),
            ("F".to_string(), pi.universe.agents["F"].clone()),
        ];
        let report = axiom_suite(&pi, &community).unwrap();
        assert!(report.all_hold(), "{:?}", report);
        assert!(report.factivity.checked > 0);
        assert!(report.monotonicity.checked > 0);
        assert!(report.knowledge_transfer.checked > 0);
    }

    #[test]
    fn halted_atom_follows_declared_condition() {
        let pi = measured_protocol();
        let mut checker = Checker::new(&pi);
        assert!(checker.eval(&Formula::Halted, 0, 0).unwrap());
        assert!(!checker.eval(&Formula::Halted, 1, 0).unwrap());
    }
}
