//! Deterministic finite-state machine engine over event streams.
//!
//! A machine is the sextuple (states, event classes, actions, accepting
//! states, initial state, transition table). Event classes are predicates
//! over the run's bound values and the incoming event, so a rule can say
//! "an `after` record whose ctx_id equals the bound sockid" rather than
//! matching on names alone.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FsmError {
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("unknown event class `{0}`")]
    UnknownClass(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("no initial state")]
    NoInitialState,
    #[error("event {event_index} matches several classes in state `{state}`: {classes:?}")]
    NondeterministicMatch {
        state: String,
        event_index: usize,
        classes: Vec<String>,
    },
}

pub type StateId = usize;
pub type ClassId = usize;
pub type ActionId = usize;

/// Named integer values captured by a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bindings(Vec<(Arc<str>, i64)>);

impl Bindings {
    pub fn get(&self, name: &str) -> Option<i64> {
        self.0.iter().find(|(k, _)| &**k == name).map(|(_, v)| *v)
    }

    pub fn set(&mut self, name: impl Into<Arc<str>>, value: i64) {
        let name = name.into();
        match self.0.iter_mut().find(|(k, _)| *k == name) {
            Some(slot) => slot.1 = value,
            None => self.0.push((name, value)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, i64)> {
        self.0.iter().map(|(k, v)| (&**k, *v))
    }
}

type Predicate<E> = dyn Fn(&Bindings, &E) -> bool + Send + Sync;
type Extractor<E> = dyn Fn(&E) -> Option<i64> + Send + Sync;

struct EventClass<E> {
    name: String,
    matches: Box<Predicate<E>>,
}

struct Binding<E> {
    name: Arc<str>,
    extract: Box<Extractor<E>>,
}

struct Rule<E> {
    class: ClassId,
    to: StateId,
    action: ActionId,
    bind: Option<Binding<E>>,
}

/// Immutable machine definition, shareable between runs and threads.
pub struct StateMachineDef<E> {
    states: Vec<String>,
    classes: Vec<EventClass<E>>,
    actions: Vec<String>,
    accepting: BTreeSet<StateId>,
    initial: StateId,
    /// Outgoing rules per state.
    rules: Vec<Vec<Rule<E>>>,
}

impl<E> fmt::Debug for StateMachineDef<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateMachineDef")
            .field("states", &self.states)
            .field("classes", &self.classes.iter().map(|c| &c.name).collect::<Vec<_>>())
            .field("actions", &self.actions)
            .field("initial", &self.states[self.initial])
            .finish()
    }
}

impl<E> StateMachineDef<E> {
    pub fn builder() -> DefBuilder<E> {
        DefBuilder::default()
    }

    pub fn state_label(&self, id: StateId) -> &str {
        &self.states[id]
    }

    pub fn action_label(&self, id: ActionId) -> &str {
        &self.actions[id]
    }

    pub fn state_id(&self, label: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == label)
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn is_accepting_state(&self, id: StateId) -> bool {
        self.accepting.contains(&id)
    }

    /// Runs the machine from its initial state over `events`.
    pub fn run_sequence<'a, I>(
        self: &Arc<Self>,
        events: I,
    ) -> Result<(Vec<String>, Vec<String>), FsmError>
    where
        I: IntoIterator<Item = &'a E>,
        E: 'a,
    {
        let mut run = MachineRun::new(Arc::clone(self));
        let mut states = vec![self.states[self.initial].clone()];
        let mut actions = Vec::new();
        for ev in events {
            if let Step::Advanced { state, action } = run.step(ev)? {
                states.push(self.states[state].clone());
                actions.push(self.actions[action].clone());
            }
        }
        Ok((states, actions))
    }
}

struct PendingRule<E> {
    from: String,
    class: String,
    to: String,
    action: String,
    bind: Option<Binding<E>>,
}

pub struct DefBuilder<E> {
    states: Vec<String>,
    classes: Vec<EventClass<E>>,
    actions: Vec<String>,
    accepting: Vec<String>,
    initial: Option<String>,
    rules: Vec<PendingRule<E>>,
}

impl<E> Default for DefBuilder<E> {
    fn default() -> Self {
        DefBuilder {
            states: Vec::new(),
            classes: Vec::new(),
            actions: Vec::new(),
            accepting: Vec::new(),
            initial: None,
            rules: Vec::new(),
        }
    }
}

impl<E> DefBuilder<E> {
    pub fn states<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Self {
        self.states.extend(labels.into_iter().map(Into::into));
        self
    }

    pub fn actions<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Self {
        self.actions.extend(labels.into_iter().map(Into::into));
        self
    }

    pub fn accepting<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Self {
        self.accepting.extend(labels.into_iter().map(Into::into));
        self
    }

    pub fn initial(mut self, label: impl Into<String>) -> Self {
        self.initial = Some(label.into());
        self
    }

    pub fn class<F>(mut self, name: impl Into<String>, matches: F) -> Self
    where
        F: Fn(&Bindings, &E) -> bool + Send + Sync + 'static,
    {
        self.classes.push(EventClass {
            name: name.into(),
            matches: Box::new(matches),
        });
        self
    }

    pub fn rule(
        mut self,
        from: impl Into<String>,
        class: impl Into<String>,
        to: impl Into<String>,
        action: impl Into<String>,
    ) -> Self {
        self.rules.push(PendingRule {
            from: from.into(),
            class: class.into(),
            to: to.into(),
            action: action.into(),
            bind: None,
        });
        self
    }

    /// Like [`rule`](Self::rule), additionally capturing a value from the
    /// triggering event under `name`.
    pub fn rule_binding<F>(
        mut self,
        from: impl Into<String>,
        class: impl Into<String>,
        to: impl Into<String>,
        action: impl Into<String>,
        name: &str,
        extract: F,
    ) -> Self
    where
        F: Fn(&E) -> Option<i64> + Send + Sync + 'static,
    {
        self.rules.push(PendingRule {
            from: from.into(),
            class: class.into(),
            to: to.into(),
            action: action.into(),
            bind: Some(Binding {
                name: name.into(),
                extract: Box::new(extract),
            }),
        });
        self
    }

    pub fn build(self) -> Result<StateMachineDef<E>, FsmError> {
        fn unique(labels: &[String]) -> Result<(), FsmError> {
            let mut seen = BTreeSet::new();
            for l in labels {
                if !seen.insert(l) {
                    return Err(FsmError::DuplicateLabel(l.clone()));
                }
            }
            Ok(())
        }
        unique(&self.states)?;
        unique(&self.actions)?;
        unique(&self.classes.iter().map(|c| c.name.clone()).collect::<Vec<_>>())?;

        let state = |label: &str| {
            self.states
                .iter()
                .position(|s| s == label)
                .ok_or_else(|| FsmError::UnknownState(label.to_string()))
        };
        let initial = state(self.initial.as_deref().ok_or(FsmError::NoInitialState)?)?;
        let accepting = self
            .accepting
            .iter()
            .map(|l| state(l))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let mut rules: Vec<Vec<Rule<E>>> = (0..self.states.len()).map(|_| Vec::new()).collect();
        for pending in self.rules {
            let from = state(&pending.from)?;
            let to = state(&pending.to)?;
            let class = self
                .classes
                .iter()
                .position(|c| c.name == pending.class)
                .ok_or_else(|| FsmError::UnknownClass(pending.class.clone()))?;
            let action = self
                .actions
                .iter()
                .position(|a| *a == pending.action)
                .ok_or_else(|| FsmError::UnknownAction(pending.action.clone()))?;
            rules[from].push(Rule {
                class,
                to,
                action,
                bind: pending.bind,
            });
        }
        Ok(StateMachineDef {
            states: self.states,
            classes: self.classes,
            actions: self.actions,
            accepting,
            initial,
            rules,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Advanced { state: StateId, action: ActionId },
    NoMatch,
}

/// One transition taken by a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub event_index: usize,
    pub state: StateId,
    pub action: ActionId,
}

/// A running instance of a machine.
pub struct MachineRun<E> {
    def: Arc<StateMachineDef<E>>,
    current: StateId,
    bindings: Bindings,
    positions: Vec<Position>,
    offered: usize,
}

impl<E> fmt::Debug for MachineRun<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MachineRun")
            .field("current", &self.def.states[self.current])
            .field("bindings", &self.bindings)
            .field("positions", &self.positions)
            .finish()
    }
}

impl<E> MachineRun<E> {
    pub fn new(def: Arc<StateMachineDef<E>>) -> Self {
        Self::with_bindings(def, Bindings::default())
    }

    pub fn with_bindings(def: Arc<StateMachineDef<E>>, bindings: Bindings) -> Self {
        let current = def.initial;
        MachineRun {
            def,
            current,
            bindings,
            positions: Vec::new(),
            offered: 0,
        }
    }

    pub fn def(&self) -> &Arc<StateMachineDef<E>> {
        &self.def
    }

    pub fn current(&self) -> StateId {
        self.current
    }

    pub fn current_label(&self) -> &str {
        &self.def.states[self.current]
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn is_accepting(&self) -> bool {
        self.def.accepting.contains(&self.current)
    }

    /// Offers one event. Exactly one matching class advances the run; none
    /// leaves it untouched; more than one is a definition error.
    pub fn step(&mut self, ev: &E) -> Result<Step, FsmError> {
        let index = self.offered;
        self.offered += 1;
        let def = Arc::clone(&self.def);
        let mut matched: Option<&Rule<E>> = None;
        let mut classes: Vec<String> = Vec::new();
        for rule in &def.rules[self.current] {
            let class = &def.classes[rule.class];
            if (class.matches)(&self.bindings, ev) {
                classes.push(class.name.clone());
                matched.get_or_insert(rule);
            }
        }
        if classes.len() > 1 {
            return Err(FsmError::NondeterministicMatch {
                state: def.states[self.current].clone(),
                event_index: index,
                classes,
            });
        }
        let Some(rule) = matched else {
            return Ok(Step::NoMatch);
        };
        if let Some(bind) = &rule.bind {
            if let Some(value) = (bind.extract)(ev) {
                self.bindings.set(Arc::clone(&bind.name), value);
            }
        }
        self.current = rule.to;
        self.positions.push(Position {
            event_index: index,
            state: rule.to,
            action: rule.action,
        });
        Ok(Step::Advanced {
            state: rule.to,
            action: rule.action,
        })
    }
}
