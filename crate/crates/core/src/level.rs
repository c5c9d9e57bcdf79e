//! Immutable level maps and the `MGL1` text format.
//!
//! ```text
//! MGL1 <width> <height> <seed>
//! <height rows, top row first: '.' empty, '#' wall, '~' lava>
//! coin <x> <y>
//! spawn <x> <y>
//! monster <x> <y> <min_x> <max_x> <dir>
//! ```
//!
//! Row `i` of the grid block is `y = height - 1 - i`. Every line ends with
//! `\n`; serialisation is canonical so `parse ∘ to_mgl` is the identity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Cell;

/// Static terrain. Codes coincide with the matching `CellClass` codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tile {
    Empty = 0,
    Wall = 1,
    Lava = 2,
}

impl Tile {
    fn to_char(self) -> char {
        match self {
            Tile::Empty => '.',
            Tile::Wall => '#',
            Tile::Lava => '~',
        }
    }

    fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(Tile::Empty),
            '#' => Some(Tile::Wall),
            '~' => Some(Tile::Lava),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonsterSpec {
    pub x: i32,
    pub y: i32,
    pub min_x: i32,
    pub max_x: i32,
    pub dir: i8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Level {
    pub width: usize,
    pub height: usize,
    tiles: Vec<Tile>,
    pub coin: Cell,
    pub spawn: Cell,
    pub monsters: Vec<MonsterSpec>,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LevelParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unexpected end of input: {0}")]
    Truncated(&'static str),
}

impl Level {
    /// An empty box with a one-cell wall border.
    pub fn bordered(width: usize, height: usize, seed: u64) -> Self {
        let mut tiles = vec![Tile::Empty; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                    tiles[y * width + x] = Tile::Wall;
                }
            }
        }
        Self {
            width,
            height,
            tiles,
            coin: Cell::new(1, 1),
            spawn: Cell::new(1, 1),
            monsters: Vec::new(),
            seed,
        }
    }

    /// A bordered box whose floor is the bottom border row.
    pub fn flat(width: usize, height: usize, coin: Cell, spawn: Cell, seed: u64) -> Self {
        let mut level = Self::bordered(width, height, seed);
        level.coin = coin;
        level.spawn = spawn;
        level
    }

    /// Terrain at `(x, y)`; anything outside the grid reads as wall.
    #[inline]
    pub fn tile(&self, x: i32, y: i32) -> Tile {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return Tile::Wall;
        }
        self.tiles[y as usize * self.width + x as usize]
    }

    pub fn set_tile(&mut self, x: i32, y: i32, tile: Tile) {
        assert!(
            x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height,
            "tile ({x}, {y}) outside {}x{} level",
            self.width,
            self.height
        );
        self.tiles[y as usize * self.width + x as usize] = tile;
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Largest column holding at least one non-wall cell.
    pub fn rightmost_walkable_column(&self) -> i32 {
        (0..self.width as i32)
            .rev()
            .find(|&x| (0..self.height as i32).any(|y| self.tile(x, y) != Tile::Wall))
            .unwrap_or(0)
    }

    /// A cell the agent can stand in: not wall, not lava, wall directly below.
    pub fn is_standable(&self, x: i32, y: i32) -> bool {
        self.tile(x, y) == Tile::Empty && self.tile(x, y - 1) == Tile::Wall
    }

    pub fn to_mgl(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height + 64);
        let _ = writeln!(out, "MGL1 {} {} {}", self.width, self.height, self.seed);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.push(self.tiles[y * self.width + x].to_char());
            }
            out.push('\n');
        }
        let _ = writeln!(out, "coin {} {}", self.coin.x, self.coin.y);
        let _ = writeln!(out, "spawn {} {}", self.spawn.x, self.spawn.y);
        for m in &self.monsters {
            let _ = writeln!(
                out,
                "monster {} {} {} {} {}",
                m.x, m.y, m.min_x, m.max_x, m.dir
            );
        }
        out
    }

    pub fn from_mgl(text: &str) -> Result<Self, LevelParseError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(LevelParseError::Truncated("header"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != "MGL1" {
            return Err(syntax(0, "expected `MGL1 <width> <height> <seed>`"));
        }
        let width: usize = parse_num(fields[1], 0)?;
        let height: usize = parse_num(fields[2], 0)?;
        let seed: u64 = parse_num(fields[3], 0)?;
        if width < 3 || height < 3 {
            return Err(syntax(0, "level must be at least 3x3"));
        }

        let mut tiles = vec![Tile::Empty; width * height];
        for row in 0..height {
            let (i, line) = lines.next().ok_or(LevelParseError::Truncated("grid"))?;
            if line.chars().count() != width {
                return Err(syntax(i, &format!("row has {} cells, expected {width}", line.len())));
            }
            let y = height - 1 - row;
            for (x, c) in line.chars().enumerate() {
                tiles[y * width + x] =
                    Tile::from_char(c).ok_or_else(|| syntax(i, &format!("bad tile {c:?}")))?;
            }
        }

        let mut coin = None;
        let mut spawn = None;
        let mut monsters = Vec::new();
        for (i, line) in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["coin", x, y] => coin = Some(Cell::new(parse_num(x, i)?, parse_num(y, i)?)),
                ["spawn", x, y] => spawn = Some(Cell::new(parse_num(x, i)?, parse_num(y, i)?)),
                ["monster", x, y, lo, hi, dir] => monsters.push(MonsterSpec {
                    x: parse_num(x, i)?,
                    y: parse_num(y, i)?,
                    min_x: parse_num(lo, i)?,
                    max_x: parse_num(hi, i)?,
                    dir: parse_num(dir, i)?,
                }),
                _ => return Err(syntax(i, &format!("unrecognised line {line:?}"))),
            }
        }
        Ok(Self {
            width,
            height,
            tiles,
            coin: coin.ok_or(LevelParseError::Truncated("coin line"))?,
            spawn: spawn.ok_or(LevelParseError::Truncated("spawn line"))?,
            monsters,
            seed,
        })
    }
}

fn syntax(line: usize, msg: &str) -> LevelParseError {
    LevelParseError::Syntax {
        line: line + 1,
        msg: msg.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, LevelParseError> {
    s.parse()
        .map_err(|_| syntax(line, &format!("not a number: {s:?}")))
}
