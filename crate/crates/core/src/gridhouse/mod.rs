//! Symbolic household environment with pick/place, heat and cool goals.
//!
//! The world has a fixed set of receptacles reachable from each other in
//! one `go` step. Closable receptacles hide their contents until opened.
//! Episodes end with reward 1 as soon as the goal predicate holds.

mod dataset;
mod planner;


use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvId, Environment, Goal, Instruction, LegalAction, Transition};
use crate::error::{Error, Result};

pub use dataset::{generate_house_dataset, HouseDataConfig, HouseDataset};
pub use planner::{house_expert, plan};

pub const MAX_TURNS: usize = 20;

pub const RECEPTACLES: &[&str] = &[
    "countertop",
    "sinkbasin",
    "diningtable",
    "desk",
    "shelf",
    "garbagecan",
    "cabinet",
    "drawer",
    "fridge",
    "microwave",
];
pub const FRIDGE: usize = 8;
pub const MICROWAVE: usize = 9;

pub const OBJECTS: &[&str] = &[
    "apple", "potato", "tomato", "egg", "bread", "mug", "cup", "plate", "pencil", "book",
];
/// Objects below this index can be heated and cooled.
pub const N_TEMPERABLE: usize = 8;

const N_RECEP: usize = 10;
const N_OBJ: usize = 10;
const SLOT_GO: usize = 0;
const SLOT_OPEN: usize = N_RECEP;
const SLOT_CLOSE: usize = 2 * N_RECEP;
const SLOT_TAKE: usize = 3 * N_RECEP;
const SLOT_PUT: usize = SLOT_TAKE + N_OBJ;
const SLOT_HEAT: usize = SLOT_PUT + N_RECEP;
const SLOT_COOL: usize = SLOT_HEAT + N_OBJ;
pub const NUM_SLOTS: usize = SLOT_COOL + N_OBJ;

pub fn is_closable(recep: usize) -> bool {
    recep >= 6
}

fn recep_index(name: &str) -> Option<usize> {
    RECEPTACLES.iter().position(|r| *r == name)
}

fn object_index(name: &str) -> Option<usize> {
    OBJECTS.iter().position(|o| *o == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalTemplate {
    Place,
    HeatThenPlace,
    CoolThenPlace,
}

impl GoalTemplate {
    pub const ALL: [GoalTemplate; 3] = [
        GoalTemplate::Place,
        GoalTemplate::HeatThenPlace,
        GoalTemplate::CoolThenPlace,
    ];

    fn required_temp(self) -> Option<Temp> {
        match self {
            GoalTemplate::Place => None,
            GoalTemplate::HeatThenPlace => Some(Temp::Hot),
            GoalTemplate::CoolThenPlace => Some(Temp::Cold),
        }
    }
}

/// Object `object` must end in `receptacle`, hot or cold if the template
/// says so.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HouseGoal {
    pub template: GoalTemplate,
    pub object: String,
    pub receptacle: String,
}

impl HouseGoal {
    pub fn render(&self) -> String {
        match self.template {
            GoalTemplate::Place => format!("put some {} in {}", self.object, self.receptacle),
            GoalTemplate::HeatThenPlace => format!(
                "heat some {} and put it in {}",
                self.object, self.receptacle
            ),
            GoalTemplate::CoolThenPlace => format!(
                "cool some {} and put it in {}",
                self.object, self.receptacle
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub object: String,
    pub receptacle: String,
}

/// Goal plus the initial placement of every object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseTask {
    pub goal: HouseGoal,
    pub layout: Vec<Placement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temp {
    None,
    Hot,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjLoc {
    In(usize),
    Held,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HouseObject {
    pub kind: usize,
    pub loc: ObjLoc,
    pub temp: Temp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GoalSpec {
    pub template: GoalTemplate,
    pub object: usize,
    pub receptacle: usize,
}

impl GoalSpec {
    fn resolve(goal: &HouseGoal) -> Result<Self> {
        let object = object_index(&goal.object)
            .ok_or_else(|| Error::config("goal.object", format!("unknown object {}", goal.object)))?;
        let receptacle = recep_index(&goal.receptacle).ok_or_else(|| {
            Error::config("goal.receptacle", format!("unknown receptacle {}", goal.receptacle))
        })?;
        if goal.template != GoalTemplate::Place && object >= N_TEMPERABLE {
            return Err(Error::config(
                "goal.template",
                format!("{} cannot be heated or cooled", goal.object),
            ));
        }
        Ok(GoalSpec {
            template: goal.template,
            object,
            receptacle,
        })
    }
}

/// Full symbolic state. Objects are sorted by kind; at most one per kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HouseState {
    pub location: Option<usize>,
    pub open: [bool; N_RECEP],
    pub objects: Vec<HouseObject>,
    pub goal: GoalSpec,
}

impl HouseState {
    pub fn from_task(task: &HouseTask) -> Result<Self> {
        let goal = GoalSpec::resolve(&task.goal)?;
        let mut objects = Vec::with_capacity(task.layout.len());
        for p in &task.layout {
            let kind = object_index(&p.object)
                .ok_or_else(|| Error::config("layout.object", format!("unknown object {}", p.object)))?;
            let recep = recep_index(&p.receptacle).ok_or_else(|| {
                Error::config("layout.receptacle", format!("unknown receptacle {}", p.receptacle))
            })?;
            if objects.iter().any(|o: &HouseObject| o.kind == kind) {
                return Err(Error::config(
                    "layout",
                    format!("object {} placed twice", p.object),
                ));
            }
            objects.push(HouseObject {
                kind,
                loc: ObjLoc::In(recep),
                temp: Temp::None,
            });
        }
        objects.sort_by_key(|o| o.kind);
        Ok(HouseState {
            location: None,
            open: [false; N_RECEP],
            objects,
            goal,
        })
    }

    pub fn held(&self) -> Option<&HouseObject> {
        self.objects.iter().find(|o| o.loc == ObjLoc::Held)
    }

    fn accessible(&self, recep: usize) -> bool {
        !is_closable(recep) || self.open[recep]
    }

    fn contents(&self, recep: usize) -> impl Iterator<Item = &HouseObject> {
        self.objects.iter().filter(move |o| o.loc == ObjLoc::In(recep))
    }

    fn find(&self, kind: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.kind == kind)
    }
}

/// True iff the goal object sits in the goal receptacle with the required
/// temperature.
pub fn check_goal(state: &HouseState, goal: &GoalSpec) -> bool {
    state.objects.iter().any(|o| {
        o.kind == goal.object
            && o.loc == ObjLoc::In(goal.receptacle)
            && goal.template.required_temp().is_none_or(|t| o.temp == t)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum HouseAction {
    Go { recep: String },
    Take { object: String, recep: String },
    Put { object: String, recep: String },
    Open { recep: String },
    Close { recep: String },
    Heat { object: String, recep: String },
    Cool { object: String, recep: String },
}

impl HouseAction {
    pub fn render(&self) -> String {
        match self {
            HouseAction::Go { recep } => format!("go to {recep} 1"),
            HouseAction::Take { object, recep } => format!("take {object} 1 from {recep} 1"),
            HouseAction::Put { object, recep } => format!("put {object} 1 in/on {recep} 1"),
            HouseAction::Open { recep } => format!("open {recep} 1"),
            HouseAction::Close { recep } => format!("close {recep} 1"),
            HouseAction::Heat { object, recep } => format!("heat {object} 1 with {recep} 1"),
            HouseAction::Cool { object, recep } => format!("cool {object} 1 with {recep} 1"),
        }
    }
}

/// Index-level action used by the simulator and planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Op {
    Go(usize),
    Open(usize),
    Close(usize),
    Take(usize, usize),
    Put(usize, usize),
    Heat(usize, usize),
    Cool(usize, usize),
}

impl Op {
    fn slot(self) -> usize {
        match self {
            Op::Go(r) => SLOT_GO + r,
            Op::Open(r) => SLOT_OPEN + r,
            Op::Close(r) => SLOT_CLOSE + r,
            Op::Take(o, _) => SLOT_TAKE + o,
            Op::Put(_, r) => SLOT_PUT + r,
            Op::Heat(o, _) => SLOT_HEAT + o,
            Op::Cool(o, _) => SLOT_COOL + o,
        }
    }

    pub(crate) fn to_action(self) -> HouseAction {
        let r = |i: usize| RECEPTACLES[i].to_string();
        let o = |i: usize| OBJECTS[i].to_string();
        match self {
            Op::Go(rc) => HouseAction::Go { recep: r(rc) },
            Op::Open(rc) => HouseAction::Open { recep: r(rc) },
            Op::Close(rc) => HouseAction::Close { recep: r(rc) },
            Op::Take(ob, rc) => HouseAction::Take { object: o(ob), recep: r(rc) },
            Op::Put(ob, rc) => HouseAction::Put { object: o(ob), recep: r(rc) },
            Op::Heat(ob, rc) => HouseAction::Heat { object: o(ob), recep: r(rc) },
            Op::Cool(ob, rc) => HouseAction::Cool { object: o(ob), recep: r(rc) },
        }
    }

    fn from_action(a: &HouseAction) -> Option<Op> {
        let r = |s: &str| recep_index(s);
        let o = |s: &str| object_index(s);
        Some(match a {
            HouseAction::Go { recep } => Op::Go(r(recep)?),
            HouseAction::Open { recep } => Op::Open(r(recep)?),
            HouseAction::Close { recep } => Op::Close(r(recep)?),
            HouseAction::Take { object, recep } => Op::Take(o(object)?, r(recep)?),
            HouseAction::Put { object, recep } => Op::Put(o(object)?, r(recep)?),
            HouseAction::Heat { object, recep } => Op::Heat(o(object)?, r(recep)?),
            HouseAction::Cool { object, recep } => Op::Cool(o(object)?, r(recep)?),
        })
    }
}

/// Valid operations in slot order.
pub(crate) fn valid_ops(s: &HouseState) -> Vec<Op> {
    let mut ops = Vec::new();
    for r in 0..N_RECEP {
        if s.location != Some(r) {
            ops.push(Op::Go(r));
        }
    }
    let Some(here) = s.location else {
        return ops;
    };
    if is_closable(here) && !s.open[here] {
        ops.push(Op::Open(here));
    }
    if is_closable(here) && s.open[here] {
        ops.push(Op::Close(here));
    }
    let held = s.held().copied();
    if held.is_none() && s.accessible(here) {
        for o in s.contents(here) {
            ops.push(Op::Take(o.kind, here));
        }
    }
    if let Some(h) = held {
        if s.accessible(here) {
            ops.push(Op::Put(h.kind, here));
        }
        if h.kind < N_TEMPERABLE && s.accessible(here) {
            if here == MICROWAVE {
                ops.push(Op::Heat(h.kind, here));
            }
            if here == FRIDGE {
                ops.push(Op::Cool(h.kind, here));
            }
        }
    }
    ops.sort_by_key(|op| op.slot());
    ops
}

pub(crate) fn apply_op(s: &HouseState, op: Op) -> Option<HouseState> {
    if !valid_ops(s).contains(&op) {
        return None;
    }
    let mut n = s.clone();
    match op {
        Op::Go(r) => n.location = Some(r),
        Op::Open(r) => n.open[r] = true,
        Op::Close(r) => n.open[r] = false,
        Op::Take(o, _) => {
            let i = n.find(o)?;
            n.objects[i].loc = ObjLoc::Held;
        }
        Op::Put(o, r) => {
            let i = n.find(o)?;
            n.objects[i].loc = ObjLoc::In(r);
        }
        Op::Heat(o, _) => {
            let i = n.find(o)?;
            n.objects[i].temp = Temp::Hot;
        }
        Op::Cool(o, _) => {
            let i = n.find(o)?;
            n.objects[i].temp = Temp::Cold;
        }
    }
    Some(n)
}

fn object_label(o: &HouseObject) -> String {
    let mut s = format!("{} 1", OBJECTS[o.kind]);
    match o.temp {
        Temp::Hot => s.push_str(" (hot)"),
        Temp::Cold => s.push_str(" (cold)"),
        Temp::None => {}
    }
    s
}

/// Index of the inventory line in rendered scenes.
pub const INVENTORY_LINE: usize = N_RECEP;

/// Item line describing what is visible in a receptacle.
fn recep_line(s: &HouseState, r: usize) -> String {
    let mut body = if !s.accessible(r) {
        "(closed)".to_string()
    } else {
        let items: Vec<String> = s.contents(r).map(object_label).collect();
        if items.is_empty() {
            "nothing".to_string()
        } else {
            items.join(", ")
        }
    };
    if s.location == Some(r) {
        body.push_str(" (here)");
    }
    format!("[{r}] {} 1 | {body}", RECEPTACLES[r])
}

fn inventory_line(s: &HouseState) -> String {
    let body = s.held().map_or_else(|| "nothing".to_string(), object_label);
    format!("[{INVENTORY_LINE}] inventory | {body}")
}

/// Every receptacle line followed by the inventory line. Only closed
/// receptacles hide anything.
fn scene(s: &HouseState) -> String {
    let mut lines: Vec<String> = (0..N_RECEP).map(|r| recep_line(s, r)).collect();
    lines.push(inventory_line(s));
    lines.join("\n")
}

fn describe(s: &HouseState, op: Op) -> String {
    let r = |i: usize| RECEPTACLES[i];
    let o = |i: usize| OBJECTS[i];
    let head = match op {
        Op::Go(rc) => format!("You arrive at {} 1.", r(rc)),
        Op::Open(rc) => format!("You open the {} 1.", r(rc)),
        Op::Close(rc) => format!("You close the {} 1.", r(rc)),
        Op::Take(ob, rc) => format!("You pick up the {} 1 from the {} 1.", o(ob), r(rc)),
        Op::Put(ob, rc) => format!("You put the {} 1 in/on the {} 1.", o(ob), r(rc)),
        Op::Heat(ob, rc) => format!("You heat the {} 1 using the {} 1.", o(ob), r(rc)),
        Op::Cool(ob, rc) => format!("You cool the {} 1 using the {} 1.", o(ob), r(rc)),
    };
    format!("{head}\n{}", scene(s))
}

/// Instruction rendering: goal sentence, then the initially visible scene.
pub fn render_instruction(task: &HouseTask) -> Result<String> {
    let state = HouseState::from_task(task)?;
    Ok(format!(
        "Your task is to: {}.\nYou are in the middle of a room. Looking quickly around you, you see:\n{}",
        task.goal.render(),
        scene(&state)
    ))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GridHouse;

fn house_task(instruction: &Instruction) -> Result<&HouseTask> {
    match &instruction.goal {
        Goal::House(t) => Ok(t),
        _ => Err(Error::config(
            "instruction.goal",
            format!("task {} has no household goal", instruction.task_id),
        )),
    }
}

impl Environment for GridHouse {
    type State = HouseState;

    fn id(&self) -> EnvId {
        EnvId::GridHouse
    }

    fn max_turns(&self) -> usize {
        MAX_TURNS
    }

    fn num_slots(&self) -> usize {
        NUM_SLOTS
    }

    fn initial_state(&self, instruction: &Instruction) -> Result<HouseState> {
        HouseState::from_task(house_task(instruction)?)
    }

    fn legal_actions(&self, state: &HouseState) -> Vec<LegalAction> {
        valid_ops(state)
            .into_iter()
            .map(|op| LegalAction {
                slot: op.slot(),
                action: Action::House(op.to_action()),
            })
            .collect()
    }

    fn transition(&self, state: &HouseState, action: &Action) -> Option<Transition<HouseState>> {
        let Action::House(a) = action else {
            return None;
        };
        let op = Op::from_action(a)?;
        let next = apply_op(state, op)?;
        let observation = describe(&next, op);
        let done = check_goal(&next, &next.goal);
        Some(Transition {
            state: next,
            observation,
            done,
        })
    }

    fn outcome_reward(&self, state: &HouseState) -> f64 {
        if check_goal(state, &state.goal) {
            1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests;
