//! Deterministic side-scroller physics on an integer cell grid.
//!
//! Coordinates are `(x, y)` with `y = 0` at the bottom row; positive vertical
//! velocity moves the agent up. One call to [`step`] advances the world by a
//! single timestep in a fixed order:
//!
//! 1. horizontal intent from the action,
//! 2. jump impulse (`vy = +2`) if grounded and the action jumps,
//! 3. gravity (`vy -= 1`, floored at `-3`) for an airborne agent,
//! 4. agent movement with wall clipping (horizontal first, then vertical),
//! 5. monster patrols advance one cell, bouncing at their bounds,
//! 6. collisions along the swept agent path (lava/monster, coin),
//! 7. the timestep counter increments; reaching [`MAX_STEPS`] times out.

use std::cell::Cell as StdCell;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::level::{Level, Tile};

/// Episode length cap.
pub const MAX_STEPS: u32 = 1000;
/// Upward velocity given by a jump.
pub const JUMP_IMPULSE: i8 = 2;
/// Terminal fall speed (cells per step, negative is down).
pub const TERMINAL_VY: i8 = -3;

/// Semantic cell classes rendered into frames. Codes are stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellClass {
    Empty = 0,
    Wall = 1,
    Lava = 2,
    Coin = 3,
    Monster = 4,
    Agent = 5,
}

impl CellClass {
    pub const COUNT: usize = 6;
    pub const ALL: [CellClass; 6] = [
        CellClass::Empty,
        CellClass::Wall,
        CellClass::Lava,
        CellClass::Coin,
        CellClass::Monster,
        CellClass::Agent,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// The nine discrete actions. Codes are stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Left = 1,
    Right = 2,
    Jump = 3,
    LeftJump = 4,
    RightJump = 5,
    LeftDown = 6,
    RightDown = 7,
    Down = 8,
}

impl Action {
    pub const COUNT: usize = 9;
    pub const ALL: [Action; 9] = [
        Action::Noop,
        Action::Left,
        Action::Right,
        Action::Jump,
        Action::LeftJump,
        Action::RightJump,
        Action::LeftDown,
        Action::RightDown,
        Action::Down,
    ];
    /// The "mostly right" subset used by the baseline runner.
    pub const RIGHTWARD: [Action; 3] = [Action::Right, Action::RightJump, Action::RightDown];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn dx(self) -> i32 {
        match self {
            Action::Left | Action::LeftJump | Action::LeftDown => -1,
            Action::Right | Action::RightJump | Action::RightDown => 1,
            Action::Noop | Action::Jump | Action::Down => 0,
        }
    }

    pub fn jumps(self) -> bool {
        matches!(self, Action::Jump | Action::LeftJump | Action::RightJump)
    }
}

/// A cell coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Kinematic state of the agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Body {
    pub x: i32,
    pub y: i32,
    pub vy: i8,
    pub grounded: bool,
}

impl Body {
    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonsterState {
    pub x: i32,
    pub dir: i8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationCause {
    None,
    Coin,
    Obstacle,
    Timeout,
}

/// Mutable episode state. Cloning is cheap; `step` never mutates its input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_x: i32,
    pub agent_y: i32,
    pub vy: i8,
    pub grounded: bool,
    pub monsters: Vec<MonsterState>,
    pub t: u32,
    pub coin_collected: bool,
    pub terminated: bool,
    pub termination_cause: TerminationCause,
}

impl EnvState {
    /// Fresh episode state at the level's spawn cell.
    pub fn initial(level: &Level) -> Self {
        let spawn = level.spawn;
        Self {
            agent_x: spawn.x,
            agent_y: spawn.y,
            vy: 0,
            grounded: level.tile(spawn.x, spawn.y - 1) == Tile::Wall,
            monsters: level
                .monsters
                .iter()
                .map(|m| MonsterState { x: m.x, dir: m.dir })
                .collect(),
            t: 0,
            coin_collected: false,
            terminated: false,
            termination_cause: TerminationCause::None,
        }
    }

    pub fn body(&self) -> Body {
        Body {
            x: self.agent_x,
            y: self.agent_y,
            vy: self.vy,
            grounded: self.grounded,
        }
    }

    pub fn agent_cell(&self) -> Cell {
        Cell::new(self.agent_x, self.agent_y)
    }
}

thread_local! {
    static REWARD_READS: StdCell<u64> = const { StdCell::new(0) };
}

/// Number of times [`StepResult::reward`] has been called on this thread.
pub fn reward_reads() -> u64 {
    REWARD_READS.with(|c| c.get())
}

pub fn reset_reward_reads() {
    REWARD_READS.with(|c| c.set(0));
}

/// Outcome of one transition.
///
/// The reward is only reachable through [`StepResult::reward`], which is
/// counted per thread so tests can prove a code path never consumed it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepResult {
    reward: u8,
    pub terminated: bool,
    pub cause: TerminationCause,
}

impl StepResult {
    pub fn reward(&self) -> f64 {
        REWARD_READS.with(|c| c.set(c.get() + 1));
        f64::from(self.reward)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StepError {
    #[error("episode already terminated at t = {t} ({cause:?}); reset before stepping")]
    Terminated { t: u32, cause: TerminationCause },
}

/// Moves the agent body one step (physics stages 1–4), ignoring hazards.
///
/// `path` is cleared and receives the start cell followed by every cell the
/// agent enters, in order.
pub fn move_body(level: &Level, body: Body, action: Action, path: &mut Vec<Cell>) -> Body {
    path.clear();
    path.push(body.cell());
    let Body {
        mut x,
        mut y,
        mut vy,
        grounded,
    } = body;

    if grounded && action.jumps() {
        vy = JUMP_IMPULSE;
    } else if grounded {
        vy = 0;
    } else {
        vy = (vy - 1).max(TERMINAL_VY);
    }

    let dx = action.dx();
    if dx != 0 && level.tile(x + dx, y) != Tile::Wall {
        x += dx;
        path.push(Cell::new(x, y));
    }

    let dir = vy.signum() as i32;
    for _ in 0..vy.unsigned_abs() {
        if level.tile(x, y + dir) == Tile::Wall {
            vy = 0;
            break;
        }
        y += dir;
        path.push(Cell::new(x, y));
    }

    let grounded = vy <= 0 && level.tile(x, y - 1) == Tile::Wall;
    if grounded {
        vy = 0;
    }
    Body { x, y, vy, grounded }
}

/// Advances one patrolling monster by a cell, reversing at its bounds.
pub fn advance_monster(state: MonsterState, min_x: i32, max_x: i32) -> MonsterState {
    if min_x >= max_x {
        return state;
    }
    let mut dir = if state.dir >= 0 { 1 } else { -1 };
    let mut next = state.x + dir as i32;
    if next < min_x || next > max_x {
        dir = -dir;
        next = state.x + dir as i32;
    }
    MonsterState { x: next, dir }
}

/// Collision stage of the transition: the first hazard or coin met along the
/// swept `path` decides the outcome. Monsters are checked at their new
/// positions, plus a head-on swap against their old ones.
pub fn resolve_collisions(
    level: &Level,
    path: &[Cell],
    monsters_before: &[MonsterState],
    monsters_after: &[MonsterState],
    coin_collected: bool,
) -> TerminationCause {
    let (Some(&start), Some(&end)) = (path.first(), path.last()) else {
        return TerminationCause::None;
    };
    let swapped = monsters_before
        .iter()
        .zip(monsters_after)
        .zip(&level.monsters)
        .any(|((before, after), spec)| {
            Cell::new(before.x, spec.y) == end && Cell::new(after.x, spec.y) == start
        });
    if swapped {
        return TerminationCause::Obstacle;
    }
    for c in path {
        let monster_here = monsters_after
            .iter()
            .zip(&level.monsters)
            .any(|(m, spec)| m.x == c.x && spec.y == c.y);
        if monster_here || level.tile(c.x, c.y) == Tile::Lava {
            return TerminationCause::Obstacle;
        }
        if !coin_collected && *c == level.coin {
            return TerminationCause::Coin;
        }
    }
    TerminationCause::None
}

/// The transition function. Pure in `(state, action, level)`.
pub fn step(
    state: &EnvState,
    action: Action,
    level: &Level,
) -> Result<(EnvState, StepResult), StepError> {
    let mut path = Vec::with_capacity(8);
    step_with_path(state, action, level, &mut path)
}

/// [`step`] with a caller-provided scratch buffer for the swept path.
pub fn step_with_path(
    state: &EnvState,
    action: Action,
    level: &Level,
    path: &mut Vec<Cell>,
) -> Result<(EnvState, StepResult), StepError> {
    if state.terminated {
        return Err(StepError::Terminated {
            t: state.t,
            cause: state.termination_cause,
        });
    }
    let body = move_body(level, state.body(), action, path);

    let monsters: Vec<MonsterState> = state
        .monsters
        .iter()
        .zip(&level.monsters)
        .map(|(m, spec)| advance_monster(*m, spec.min_x, spec.max_x))
        .collect();

    let mut cause = resolve_collisions(
        level,
        path,
        &state.monsters,
        &monsters,
        state.coin_collected,
    );

    let t = state.t + 1;
    if cause == TerminationCause::None && t >= MAX_STEPS {
        cause = TerminationCause::Timeout;
    }
    let reward = u8::from(cause == TerminationCause::Coin);
    let terminated = cause != TerminationCause::None;

    let next = EnvState {
        agent_x: body.x,
        agent_y: body.y,
        vy: body.vy,
        grounded: body.grounded,
        monsters,
        t,
        coin_collected: state.coin_collected || cause == TerminationCause::Coin,
        terminated,
        termination_cause: cause,
    };
    Ok((
        next,
        StepResult {
            reward,
            terminated,
            cause,
        },
    ))
}

/// Variant of [`step`] where touching the coin latches `coin_collected` and
/// pays the reward but does not end the episode. Used only by measurement
/// probes that score two objectives on one trajectory.
pub fn step_coin_nonterminal(
    state: &EnvState,
    action: Action,
    level: &Level,
    path: &mut Vec<Cell>,
) -> Result<(EnvState, StepResult), StepError> {
    let (mut next, mut result) = step_with_path(state, action, level, path)?;
    if result.cause == TerminationCause::Coin {
        next.terminated = next.t >= MAX_STEPS;
        next.termination_cause = if next.terminated {
            TerminationCause::Timeout
        } else {
            TerminationCause::None
        };
        result.terminated = next.terminated;
        result.cause = next.termination_cause;
    }
    Ok((next, result))
}
