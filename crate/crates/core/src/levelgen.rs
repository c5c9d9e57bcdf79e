//! Procedural level generation, the two coin-placement distributions, and
//! the static solvability check.
//!
//! Terrain depends only on the seed, so a `TrainRight` level and a
//! `TestRandom` level drawn with the same seed differ in the coin cell alone.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    advance_monster, move_body, resolve_collisions, Action, Body, Cell, EnvState, MonsterState,
    TerminationCause,
};
use crate::level::{Level, MonsterSpec, Tile};

/// Where the coin goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoinMode {
    /// Training distribution: coin in the rightmost walkable column.
    TrainRight,
    /// Shifted distribution: coin column uniform over reachable columns.
    TestRandom,
}

impl CoinMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoinMode::TrainRight => "train",
            CoinMode::TestRandom => "test",
        }
    }
}

impl std::str::FromStr for CoinMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" | "train_right" => Ok(CoinMode::TrainRight),
            "test" | "test_random" => Ok(CoinMode::TestRandom),
            other => Err(format!("unknown level mode {other:?} (expected train|test)")),
        }
    }
}

/// Half-open range of level seeds with a uniform prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpace {
    pub start: u64,
    pub end: u64,
}

impl SeedSpace {
    pub const FULL: SeedSpace = SeedSpace {
        start: 0,
        end: u64::MAX,
    };

    pub fn contains(&self, seed: u64) -> bool {
        (self.start..self.end).contains(&seed)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        rng.gen_range(self.start..self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDistribution {
    pub mode: CoinMode,
    pub width: usize,
    pub height: usize,
    /// Per-segment probability of a lava pit, in `[0, 0.3]`.
    pub obstacle_density: f64,
    /// Inclusive range for the number of patrolling monsters.
    pub monster_count_range: (usize, usize),
    /// Chance that a platform starts at each candidate column, in `[0, 1]`.
    pub platform_density: f64,
    pub seed_space: SeedSpace,
}

impl LevelDistribution {
    pub fn new(mode: CoinMode) -> Self {
        Self {
            mode,
            width: 48,
            height: 16,
            obstacle_density: 0.25,
            monster_count_range: (0, 2),
            platform_density: 0.9,
            seed_space: SeedSpace::FULL,
        }
    }

    pub fn train() -> Self {
        Self::new(CoinMode::TrainRight)
    }

    pub fn test() -> Self {
        Self::new(CoinMode::TestRandom)
    }

    pub fn with_mode(&self, mode: CoinMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn with_seed_space(&self, seed_space: SeedSpace) -> Self {
        Self {
            seed_space,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("seed {seed} outside the distribution's seed space {start}..{end}")]
    SeedOutOfSpace { seed: u64, start: u64, end: u64 },
    #[error("level generation failed for seed {seed} after {attempts} attempts: {reason}")]
    Exhausted {
        seed: u64,
        attempts: u32,
        reason: String,
    },
    #[error("invalid distribution: {0}")]
    BadDistribution(String),
}

const MAX_ATTEMPTS: u32 = 64;
const COIN_SALT: u64 = 0xC01D_C0FF_EE00_0001;

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_level(dist: &LevelDistribution, seed: u64) -> Result<Level, GenerateError> {
    if !dist.seed_space.contains(seed) {
        return Err(GenerateError::SeedOutOfSpace {
            seed,
            start: dist.seed_space.start,
            end: dist.seed_space.end,
        });
    }
    if dist.width < 16 || dist.height < 12 {
        return Err(GenerateError::BadDistribution(format!(
            "level {}x{} too small (need at least 16x12)",
            dist.width, dist.height
        )));
    }
    if !(0.0..=0.3).contains(&dist.obstacle_density) {
        return Err(GenerateError::BadDistribution(format!(
            "obstacle_density {} outside [0, 0.3]",
            dist.obstacle_density
        )));
    }
    if !(0.0..=1.0).contains(&dist.platform_density) {
        return Err(GenerateError::BadDistribution(format!(
            "platform_density {} outside [0, 1]",
            dist.platform_density
        )));
    }
    let (lo, hi) = dist.monster_count_range;
    if lo > hi {
        return Err(GenerateError::BadDistribution(format!(
            "monster_count_range ({lo}, {hi}) is empty"
        )));
    }

    let mut last_reason = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(attempt) + 1));
        let mut level = build_terrain(dist, seed, &mut rng);
        let goal = Cell::new(level.rightmost_walkable_column(), 0);
        let goal = Cell::new(goal.x, floor_height(&level, goal.x));
        let reach = explore(&level, EnvState::initial(&level).body());
        if !reach.positions.contains(&goal) {
            last_reason = format!("right end {goal} unreachable");
            continue;
        }
        level.coin = match dist.mode {
            CoinMode::TrainRight => goal,
            CoinMode::TestRandom => {
                let mut coin_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, COIN_SALT));
                match pick_random_coin(&level, &reach, &mut coin_rng) {
                    Some(c) => c,
                    None => {
                        last_reason = "no reachable coin cell".into();
                        continue;
                    }
                }
            }
        };
        let verdict = validate_level(&level);
        if verdict.is_valid() {
            return Ok(level);
        }
        last_reason = verdict.reasons.join("; ");
    }
    Err(GenerateError::Exhausted {
        seed,
        attempts: MAX_ATTEMPTS,
        reason: last_reason,
    })
}

/// Height of the first non-wall cell above the bottom border in column `x`.
fn floor_height(level: &Level, x: i32) -> i32 {
    (1..level.height as i32)
        .find(|&y| level.tile(x, y) != Tile::Wall)
        .unwrap_or(level.height as i32 - 1)
}

struct Segment {
    start: i32,
    end: i32,
    h: i32,
}

fn build_terrain(dist: &LevelDistribution, seed: u64, rng: &mut ChaCha8Rng) -> Level {
    let w = dist.width as i32;
    let max_floor = ((dist.height as i32) - 10).clamp(1, 6);
    let mut level = Level::bordered(dist.width, dist.height, seed);

    let mut segments = Vec::new();
    let mut x = 1;
    let mut h = rng.gen_range(1..=max_floor.min(3));
    while x <= w - 2 {
        let min_len = if segments.is_empty() { 4 } else { 3 };
        let mut len = rng.gen_range(min_len..=7);
        // never leave a stub shorter than 3 at the right end
        if w - 1 - (x + len) < 3 {
            len = w - 1 - x;
        }
        if !segments.is_empty() {
            let step = *[-2, -1, -1, 0, 0, 1, 1, 2].choose(rng).unwrap();
            h = (h + step).clamp(1, max_floor);
        }
        segments.push(Segment {
            start: x,
            end: x + len - 1,
            h,
        });
        x += len;
    }

    for seg in &segments {
        for x in seg.start..=seg.end {
            for y in 1..seg.h {
                level.set_tile(x, y, Tile::Wall);
            }
        }
    }

    let floor_at = |x: i32| {
        segments
            .iter()
            .find(|s| (s.start..=s.end).contains(&x))
            .map_or(1, |s| s.h)
    };

    // Floating platforms: runs of 2-5 cells two rows above the highest floor
    // under and beside them, separated by gaps of 1-3 columns.
    let mut platform_cols = HashSet::new();
    let mut x = 4;
    while x <= w - 6 {
        if !rng.gen_bool(dist.platform_density) {
            x += rng.gen_range(1..=3);
            continue;
        }
        let plen = rng.gen_range(2..=5).min(w - 5 - x);
        if plen < 2 {
            break;
        }
        let hmax = (x - 1..=x + plen).map(floor_at).max().unwrap();
        let py = hmax + 2;
        if py + 2 < dist.height as i32 - 1 {
            for px in x..x + plen {
                level.set_tile(px, py, Tile::Wall);
                platform_cols.insert(px);
            }
        }
        x += plen + rng.gen_range(1..=2);
    }

    // Lava pits sit on the walking surface, never under or next to a
    // platform (a ceiling would make them impassable).
    let last = segments.len() - 1;
    let mut lava_cols = HashSet::new();
    for (i, seg) in segments.iter().enumerate() {
        if i == 0 || i == last {
            continue;
        }
        let len = seg.end - seg.start + 1;
        if len >= 3 && rng.gen_bool(dist.obstacle_density) {
            let pit = rng.gen_range(1..=2.min(len - 2));
            let a = rng.gen_range(seg.start + 1..=seg.end - pit);
            if (a - 1..a + pit + 1).any(|c| platform_cols.contains(&c)) {
                continue;
            }
            for x in a..a + pit {
                level.set_tile(x, seg.h, Tile::Lava);
                lava_cols.insert(x);
            }
        }
    }

    level.spawn = Cell::new(1, segments[0].h);

    let (lo, hi) = dist.monster_count_range;
    let n_monsters = rng.gen_range(lo..=hi);
    let mut runs: Vec<(i32, i32, i32)> = Vec::new();
    for seg in &segments {
        let mut run_start = None;
        for x in seg.start..=seg.end + 1 {
            let ok = x <= seg.end
                && x >= 6
                && x <= w - 4
                && !lava_cols.contains(&x)
                && !(x - 1..=x + 1).any(|c| platform_cols.contains(&c));
            match (ok, run_start) {
                (true, None) => run_start = Some(x),
                (false, Some(s)) => {
                    if x - s >= 3 {
                        runs.push((s, x - 1, seg.h));
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    runs.shuffle(rng);
    for &(a, b, y) in runs.iter().take(n_monsters) {
        let b = b.min(a + 2);
        level.monsters.push(MonsterSpec {
            x: rng.gen_range(a..=b),
            y,
            min_x: a,
            max_x: b,
            dir: if rng.gen_bool(0.5) { 1 } else { -1 },
        });
    }
    level
}

/// Coin column uniform over columns with a reachable standable cell
/// (excluding the spawn cell); within the column, the highest such cell.
fn pick_random_coin(level: &Level, reach: &Reachability, rng: &mut ChaCha8Rng) -> Option<Cell> {
    let by_column = coin_candidates(level, reach);
    let columns: Vec<i32> = by_column.keys().copied().collect();
    let &col = columns.choose(rng)?;
    by_column[&col].iter().max_by_key(|c| c.y).copied()
}

/// Reachable standable cells grouped by column, sorted for determinism.
pub fn coin_candidates(level: &Level, reach: &Reachability) -> std::collections::BTreeMap<i32, Vec<Cell>> {
    let mut by_column: std::collections::BTreeMap<i32, Vec<Cell>> = Default::default();
    let mut cells: Vec<Cell> = reach
        .positions
        .iter()
        .copied()
        .filter(|c| *c != level.spawn && level.is_standable(c.x, c.y))
        .collect();
    cells.sort();
    for c in cells {
        by_column.entry(c.x).or_default().push(c);
    }
    by_column
}

/// States visited by a breadth-first search over the movement graph.
#[derive(Clone, Debug)]
pub struct Reachability {
    /// Every cell the agent can occupy or sweep through without dying.
    pub positions: HashSet<Cell>,
    pub bodies: usize,
}

fn body_key(level: &Level, b: Body) -> usize {
    let vy = (b.vy + 3) as usize;
    (((b.x as usize * level.height + b.y as usize) * 6 + vy) << 1) | usize::from(b.grounded)
}

fn key_space(level: &Level) -> usize {
    level.width * level.height * 12
}

/// BFS over `(x, y, vy, grounded)` with all nine actions; lava is fatal,
/// monsters and the coin are ignored.
pub fn explore(level: &Level, start: Body) -> Reachability {
    let mut seen = vec![false; key_space(level)];
    let mut positions = HashSet::new();
    let mut queue = VecDeque::new();
    let mut path = Vec::with_capacity(8);
    seen[body_key(level, start)] = true;
    positions.insert(start.cell());
    queue.push_back(start);
    let mut bodies = 1;
    while let Some(b) = queue.pop_front() {
        for a in Action::ALL {
            let next = move_body(level, b, a, &mut path);
            if path.iter().any(|c| level.tile(c.x, c.y) == Tile::Lava) {
                continue;
            }
            let k = body_key(level, next);
            if !seen[k] {
                seen[k] = true;
                bodies += 1;
                positions.extend(path.iter().copied());
                queue.push_back(next);
            }
        }
    }
    Reachability { positions, bodies }
}

/// Shortest action sequence from `start` to the coin, ignoring monsters.
pub fn plan_to_coin(level: &Level, start: Body) -> Option<Vec<Action>> {
    let mut parent: HashMap<usize, (usize, Action)> = HashMap::new();
    let mut seen = vec![false; key_space(level)];
    let mut queue = VecDeque::new();
    let mut path = Vec::with_capacity(8);
    let start_key = body_key(level, start);
    seen[start_key] = true;
    queue.push_back(start);
    while let Some(b) = queue.pop_front() {
        let bk = body_key(level, b);
        for a in Action::ALL {
            let next = move_body(level, b, a, &mut path);
            let mut hit_coin = false;
            let mut dead = false;
            for c in &path {
                if level.tile(c.x, c.y) == Tile::Lava {
                    dead = true;
                    break;
                }
                if *c == level.coin {
                    hit_coin = true;
                    break;
                }
            }
            if dead {
                continue;
            }
            if hit_coin {
                let mut actions = vec![a];
                let mut k = bk;
                while k != start_key {
                    let (pk, pa) = parent[&k];
                    actions.push(pa);
                    k = pk;
                }
                actions.reverse();
                return Some(actions);
            }
            let nk = body_key(level, next);
            if !seen[nk] {
                seen[nk] = true;
                parent.insert(nk, (bk, a));
                queue.push_back(next);
            }
        }
    }
    None
}

/// Time-expanded BFS that plans around the (deterministic) monster patrols.
/// Returns `None` if the coin cannot be reached within `horizon` steps.
pub fn plan_to_coin_timed(level: &Level, state: &EnvState, horizon: u32) -> Option<Vec<Action>> {
    let mut monsters_at: Vec<Vec<MonsterState>> = vec![state.monsters.clone()];
    for _ in 0..horizon {
        let prev = monsters_at.last().unwrap();
        let next = prev
            .iter()
            .zip(&level.monsters)
            .map(|(m, spec)| advance_monster(*m, spec.min_x, spec.max_x))
            .collect();
        monsters_at.push(next);
    }
    let mut layers: Vec<Vec<(Body, usize, Action)>> = vec![vec![(state.body(), 0, Action::Noop)]];
    let mut path = Vec::with_capacity(8);
    for t in 0..horizon as usize {
        let mut seen = vec![false; key_space(level)];
        let mut next_layer = Vec::new();
        for (i, &(b, _, _)) in layers[t].iter().enumerate() {
            for a in Action::ALL {
                let nb = move_body(level, b, a, &mut path);
                match resolve_collisions(
                    level,
                    &path,
                    &monsters_at[t],
                    &monsters_at[t + 1],
                    state.coin_collected,
                ) {
                    TerminationCause::Obstacle => continue,
                    TerminationCause::Coin => {
                        let mut actions = vec![a];
                        let mut idx = i;
                        for layer in (1..=t).rev() {
                            let (_, pi, pa) = layers[layer][idx];
                            actions.push(pa);
                            idx = pi;
                        }
                        actions.reverse();
                        return Some(actions);
                    }
                    _ => {}
                }
                let k = body_key(level, nb);
                if !seen[k] {
                    seen[k] = true;
                    next_layer.push((nb, i, a));
                }
            }
        }
        if next_layer.is_empty() {
            return None;
        }
        layers.push(next_layer);
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub reachable: bool,
    pub reasons: Vec<String>,
}

impl ValidationVerdict {
    pub fn is_valid(&self) -> bool {
        self.reachable && self.reasons.is_empty()
    }
}

/// Structural checks plus a BFS proof that the coin can be reached.
pub fn validate_level(level: &Level) -> ValidationVerdict {
    let mut reasons = Vec::new();
    let (w, h) = (level.width as i32, level.height as i32);
    if level.tiles().len() != level.width * level.height {
        return ValidationVerdict {
            reachable: false,
            reasons: vec!["grid size does not match width x height".into()],
        };
    }
    let border_ok = (0..w).all(|x| level.tile(x, 0) == Tile::Wall && level.tile(x, h - 1) == Tile::Wall)
        && (0..h).all(|y| level.tile(0, y) == Tile::Wall && level.tile(w - 1, y) == Tile::Wall);
    if !border_ok {
        reasons.push("border cells must all be wall".into());
    }
    let leftmost = (0..w)
        .find(|&x| (0..h).any(|y| level.tile(x, y) != Tile::Wall))
        .unwrap_or(0);
    if level.spawn.x > leftmost + 2 {
        reasons.push(format!(
            "spawn {} not in the leftmost walkable region (column {leftmost})",
            level.spawn
        ));
    }
    if !level.is_standable(level.spawn.x, level.spawn.y) {
        reasons.push(format!("spawn {} is not standable", level.spawn));
    }
    if !level.is_standable(level.coin.x, level.coin.y) {
        reasons.push(format!(
            "coin {} must sit on an empty cell with wall below",
            level.coin
        ));
    }
    for (i, m) in level.monsters.iter().enumerate() {
        let contiguous = m.min_x <= m.max_x
            && (m.min_x..=m.max_x).all(|x| level.is_standable(x, m.y));
        if !contiguous || !(m.min_x..=m.max_x).contains(&m.x) || m.dir.abs() != 1 {
            reasons.push(format!("monster {i} patrol is not over contiguous floor"));
        }
    }
    let reachable = border_ok
        && level.tile(level.spawn.x, level.spawn.y) == Tile::Empty
        && plan_to_coin(level, EnvState::initial(level).body()).is_some();
    if !reachable {
        reasons.push("coin unreachable from spawn".into());
    }
    ValidationVerdict { reachable, reasons }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_level_is_reachable() {
        let level = Level::flat(20, 10, Cell::new(18, 1), Cell::new(1, 1), 0);
        let v = validate_level(&level);
        assert!(v.reachable, "{:?}", v.reasons);
        assert!(v.is_valid());
    }

    #[test]
    fn coin_above_jump_arc_is_unreachable() {
        let mut level = Level::flat(20, 16, Cell::new(10, 9), Cell::new(1, 1), 0);
        // a one-cell ledge whose top sits 8 above the floor: the arc peaks at +3
        level.set_tile(10, 8, Tile::Wall);
        let v = validate_level(&level);
        assert!(!v.reachable);
        assert!(v.reasons.iter().any(|r| r.contains("unreachable")));
    }

    #[test]
    fn coin_on_reachable_ledge_is_reachable() {
        let mut level = Level::flat(20, 16, Cell::new(10, 4), Cell::new(1, 1), 0);
        level.set_tile(10, 3, Tile::Wall);
        assert!(validate_level(&level).reachable);
    }

    #[test]
    fn enclosed_spawn_is_unreachable() {
        let mut level = Level::flat(20, 10, Cell::new(18, 1), Cell::new(2, 1), 0);
        for y in 1..9 {
            level.set_tile(3, y, Tile::Wall);
        }
        level.set_tile(1, 1, Tile::Wall);
        level.set_tile(1, 2, Tile::Wall);
        let v = validate_level(&level);
        assert!(!v.reachable);
    }

    #[test]
    fn train_coin_sits_at_right_end() {
        let dist = LevelDistribution::train();
        for seed in 0..200 {
            let level = generate_level(&dist, seed).unwrap();
            assert_eq!(level.coin.x, level.rightmost_walkable_column());
        }
    }

    #[test]
    fn generation_is_deterministic_and_terrain_shared() {
        let train = LevelDistribution::train();
        let test = LevelDistribution::test();
        for seed in [0u64, 1, 17, 123_456_789] {
            let a = generate_level(&test, seed).unwrap();
            assert_eq!(a, generate_level(&test, seed).unwrap());
            let b = generate_level(&train, seed).unwrap();
            assert_eq!(a.tiles(), b.tiles());
            assert_eq!(a.monsters, b.monsters);
            assert_eq!(a.spawn, b.spawn);
        }
    }

    #[test]
    fn seed_outside_space_is_refused() {
        let dist = LevelDistribution::train().with_seed_space(SeedSpace { start: 10, end: 20 });
        assert!(matches!(
            generate_level(&dist, 5),
            Err(GenerateError::SeedOutOfSpace { .. })
        ));
    }

    #[test]
    fn static_plan_reaches_coin_on_monster_free_levels() {
        let mut dist = LevelDistribution::test();
        dist.monster_count_range = (0, 0);
        for seed in 0..50 {
            let level = generate_level(&dist, seed).unwrap();
            let plan = plan_to_coin(&level, EnvState::initial(&level).body()).unwrap();
            let mut s = EnvState::initial(&level);
            for a in plan {
                s = crate::env::step(&s, a, &level).unwrap().0;
            }
            assert_eq!(s.termination_cause, TerminationCause::Coin, "seed {seed}");
        }
    }

    #[test]
    fn timed_plan_dodges_monsters() {
        let dist = LevelDistribution::test();
        let mut found = 0;
        for seed in 0..40 {
            let level = generate_level(&dist, seed).unwrap();
            let s0 = EnvState::initial(&level);
            if let Some(plan) = plan_to_coin_timed(&level, &s0, 300) {
                found += 1;
                let mut s = s0;
                for a in plan {
                    s = crate::env::step(&s, a, &level).unwrap().0;
                }
                assert_eq!(s.termination_cause, TerminationCause::Coin, "seed {seed}");
            }
        }
        assert!(found >= 35, "timed planner found only {found}/40 plans");
    }
}
