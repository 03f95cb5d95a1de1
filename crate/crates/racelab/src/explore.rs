//! Depth-bounded exhaustive search, violation reporting and trace replay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{AbstractState, Architecture, Model, OpStep};
use crate::scenario::Scenario;
use crate::RaceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bound {
    pub max_depth: usize,
    pub max_states: usize,
    pub max_processes: usize,
    pub max_messages: usize,
}

impl Default for Bound {
    fn default() -> Self {
        Self {
            max_depth: 12,
            max_states: 1_000_000,
            max_processes: 4,
            max_messages: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// R1: a message was reclaimed while a process still holds it.
    PrematureReclaim,
    /// R2: after all actors finished, a message is neither retained, held
    /// nor reclaimable.
    PermanentLeak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Messages affected, one bit per message.
    pub messages: u8,
    pub steps: Vec<OpStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exploration {
    pub architecture: Architecture,
    pub scenario: Scenario,
    pub bound: Bound,
    pub states_visited: usize,
    /// Distinct violating states found within the bound.
    pub violating_states: usize,
    /// For each kind, every violating state at that kind's minimal depth,
    /// with a shortest trace reaching it.
    pub violations: Vec<Violation>,
}

impl Exploration {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn trace(&self, index: usize) -> Trace {
        Trace {
            architecture: self.architecture,
            scenario: self.scenario.clone(),
            steps: self.violations[index].steps.clone(),
        }
    }
}

/// A self-contained replayable step sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub architecture: Architecture,
    pub scenario: Scenario,
    pub steps: Vec<OpStep>,
}

/// Classifies `state`: R1 is checked in every state, R2 only in terminal
/// states.
pub fn classify(model: &Model, state: &AbstractState) -> Option<(ViolationKind, u8)> {
    let premature = state.premature();
    if premature != 0 {
        return Some((ViolationKind::PrematureReclaim, premature));
    }
    if model.is_terminal(state) {
        let leaks = model.leaks(state);
        if leaks != 0 {
            return Some((ViolationKind::PermanentLeak, leaks));
        }
    }
    None
}

struct Search<'a> {
    model: &'a Model,
    bound: Bound,
    /// Shallowest depth at which each state has been reached.
    visited: HashMap<AbstractState, usize>,
    found: HashMap<AbstractState, (ViolationKind, u8, Vec<OpStep>)>,
    path: Vec<OpStep>,
}

impl Search<'_> {
    fn visit(&mut self, state: AbstractState) -> Result<(), RaceError> {
        if let Some((kind, messages)) = classify(self.model, &state) {
            let shorter = self.found.get(&state).map_or(true, |(_, _, t)| t.len() > self.path.len());
            if shorter {
                self.found.insert(state, (kind, messages, self.path.clone()));
            }
            return Ok(());
        }
        if self.path.len() == self.bound.max_depth {
            return Ok(());
        }
        let depth = self.path.len() + 1;
        for step in self.model.enumerate_steps(&state) {
            let next = self.model.apply(&state, &step);
            match self.visited.get(&next) {
                Some(&seen) if seen <= depth => continue,
                _ => {
                    self.visited.insert(next.clone(), depth);
                }
            }
            if self.visited.len() > self.bound.max_states {
                return Err(RaceError::BoundExceeded {
                    limit: self.bound.max_states,
                });
            }
            self.path.push(step);
            self.visit(next)?;
            self.path.pop();
        }
        Ok(())
    }
}

/// Explores every interleaving of the scenario's actors up to the bound.
///
/// The search is a depth-first traversal that revisits a state only when it
/// is reached by a strictly shorter path, so on return every recorded trace
/// is a shortest one. Output ordering does not depend on hash iteration.
pub fn explore(scenario: &Scenario, architecture: Architecture, bound: Bound) -> Result<Exploration, RaceError> {
    let model = Model::new(scenario.clone(), architecture, &bound)?;
    let initial = model.initial();
    let mut search = Search {
        model: &model,
        bound,
        visited: HashMap::from([(initial.clone(), 0)]),
        found: HashMap::new(),
        path: Vec::new(),
    };
    search.visit(initial)?;

    let violating_states = search.found.len();
    let mut violations = Vec::new();
    for kind in [ViolationKind::PrematureReclaim, ViolationKind::PermanentLeak] {
        let of_kind = search.found.values().filter(|(k, _, _)| *k == kind);
        let Some(min) = of_kind.clone().map(|(_, _, t)| t.len()).min() else {
            continue;
        };
        let mut minimal: Vec<Violation> = of_kind
            .filter(|(_, _, t)| t.len() == min)
            .map(|(kind, messages, steps)| Violation {
                kind: *kind,
                messages: *messages,
                steps: steps.clone(),
            })
            .collect();
        minimal.sort_by(|a, b| a.steps.cmp(&b.steps).then(a.messages.cmp(&b.messages)));
        violations.extend(minimal);
    }
    Ok(Exploration {
        architecture,
        scenario: scenario.clone(),
        bound,
        states_visited: search.visited.len(),
        violating_states,
        violations,
    })
}

/// Re-executes a trace from the initial state, rejecting any step that is
/// not enabled where it occurs.
pub fn replay(trace: &Trace) -> Result<AbstractState, RaceError> {
    let bound = Bound {
        max_processes: crate::scenario::MAX_PROCESSES,
        max_messages: crate::scenario::MAX_MESSAGES,
        ..Bound::default()
    };
    let model = Model::new(trace.scenario.clone(), trace.architecture, &bound)
        .map_err(|e| RaceError::MalformedTrace(e.to_string()))?;
    let mut state = model.initial();
    for (i, step) in trace.steps.iter().enumerate() {
        if !model.enumerate_steps(&state).contains(step) {
            return Err(RaceError::MalformedTrace(format!(
                "step {i} ({step:?}) is not enabled"
            )));
        }
        state = model.apply(&state, step);
    }
    Ok(state)
}
