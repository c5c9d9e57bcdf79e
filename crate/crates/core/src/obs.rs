//! The learner's input: an egocentric frame pair plus an action bar.
//!
//! Frames are `W x W` grids of [`CellClass`] codes centred on the agent.
//! Row 0 is the top of the window (highest `y`), column 0 the left edge.
//! The encoded tensor is `13 x W x W`, channels in this order:
//!
//! | channels | content                                   |
//! |----------|-------------------------------------------|
//! | 0..6     | one-hot class of the previous frame       |
//! | 6..12    | one-hot class of the current frame        |
//! | 12       | action bar, `prev_action.code() / 8`      |
//!
//! and each channel is flattened row-major.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, CellClass, EnvState};
use crate::level::{Level, Tile};

pub const DEFAULT_WINDOW: usize = 15;
/// Input channels of the encoded observation.
pub const CHANNELS: usize = 2 * CellClass::COUNT + 1;

pub const fn input_len(window: usize) -> usize {
    CHANNELS * window * window
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    window: usize,
    cells: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObsError {
    #[error("frame sizes differ: previous {prev}, current {cur}")]
    WindowMismatch { prev: usize, cur: usize },
    #[error("window size {0} must be odd and non-zero")]
    EvenWindow(usize),
    #[error("frame holds {got} cells, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("invalid cell class code {0}")]
    BadCode(u8),
}

impl Frame {
    pub fn from_codes(window: usize, cells: Vec<u8>) -> Result<Self, ObsError> {
        if window == 0 || window % 2 == 0 {
            return Err(ObsError::EvenWindow(window));
        }
        if cells.len() != window * window {
            return Err(ObsError::BadLength {
                got: cells.len(),
                expected: window * window,
            });
        }
        if let Some(&bad) = cells.iter().find(|&&c| CellClass::from_code(c).is_none()) {
            return Err(ObsError::BadCode(bad));
        }
        Ok(Self { window, cells })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn codes(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> CellClass {
        CellClass::from_code(self.cells[row * self.window + col]).expect("frame holds valid codes")
    }

    pub fn center(&self) -> CellClass {
        let r = self.window / 2;
        self.get(r, r)
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.cells.iter().filter(|&&c| c == class.code()).count()
    }

    /// `(dx, dy)` offsets from the agent of every cell of `class`.
    pub fn offsets_of(&self, class: CellClass) -> Vec<(i32, i32)> {
        let r = (self.window / 2) as i32;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class.code())
            .map(|(i, _)| {
                let (row, col) = ((i / self.window) as i32, (i % self.window) as i32);
                (col - r, r - row)
            })
            .collect()
    }
}

/// Semantic rasterisation of the window around the agent.
pub fn render_frame(state: &EnvState, level: &Level) -> Frame {
    render_frame_sized(state, level, DEFAULT_WINDOW)
}

pub fn render_frame_sized(state: &EnvState, level: &Level, window: usize) -> Frame {
    assert!(window % 2 == 1, "window must be odd");
    let r = (window / 2) as i32;
    let mut cells = vec![0u8; window * window];
    for row in 0..window {
        let y = state.agent_y + r - row as i32;
        for col in 0..window {
            let x = state.agent_x - r + col as i32;
            let class = match level.tile(x, y) {
                Tile::Empty => CellClass::Empty,
                Tile::Wall => CellClass::Wall,
                Tile::Lava => CellClass::Lava,
            };
            cells[row * window + col] = class.code();
        }
    }
    let mut put = |x: i32, y: i32, class: CellClass| {
        let (col, row) = (x - state.agent_x + r, state.agent_y + r - y);
        if (0..window as i32).contains(&col) && (0..window as i32).contains(&row) {
            cells[row as usize * window + col as usize] = class.code();
        }
    };
    if !state.coin_collected {
        put(level.coin.x, level.coin.y, CellClass::Coin);
    }
    for (m, spec) in state.monsters.iter().zip(&level.monsters) {
        put(m.x, spec.y, CellClass::Monster);
    }
    cells[r as usize * window + r as usize] = CellClass::Agent.code();
    Frame { window, cells }
}

/// Two consecutive frames and the action taken between them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub prev: Frame,
    pub cur: Frame,
    pub action: Action,
}

impl Observation {
    pub fn window(&self) -> usize {
        self.cur.window
    }

    /// Grey level of the bar row, identical across its `W` cells.
    pub fn action_bar_value(&self) -> f32 {
        f32::from(self.action.code()) / 8.0
    }

    pub fn action_bar(&self) -> Vec<f32> {
        vec![self.action_bar_value(); self.window()]
    }

    /// Observation shown at `t = 0`: the spawn frame twice and a `NOOP` bar.
    pub fn initial(frame: Frame) -> Self {
        Self {
            prev: frame.clone(),
            cur: frame,
            action: Action::Noop,
        }
    }
}

pub fn make_observation(prev: Frame, cur: Frame, prev_action: Action) -> Result<Observation, ObsError> {
    if prev.window != cur.window {
        return Err(ObsError::WindowMismatch {
            prev: prev.window,
            cur: cur.window,
        });
    }
    Ok(Observation {
        prev,
        cur,
        action: prev_action,
    })
}

/// Dense `13 x W x W` encoding (see module docs for the layout).
pub fn encode_input(obs: &Observation) -> Vec<f32> {
    let mut out = vec![0.0; input_len(obs.window())];
    encode_into(obs, &mut out);
    out
}

pub fn encode_into(obs: &Observation, out: &mut [f32]) {
    let plane = obs.window() * obs.window();
    assert_eq!(out.len(), CHANNELS * plane, "encode buffer has wrong length");
    out.fill(0.0);
    for (frame_idx, frame) in [&obs.prev, &obs.cur].into_iter().enumerate() {
        let base = frame_idx * CellClass::COUNT * plane;
        for (i, &code) in frame.cells.iter().enumerate() {
            out[base + code as usize * plane + i] = 1.0;
        }
    }
    let bar = obs.action_bar_value();
    out[2 * CellClass::COUNT * plane..].fill(bar);
}

/// Inverse of the one-hot part of [`encode_input`]: per-cell argmax.
pub fn decode_frames(input: &[f32], window: usize) -> Result<(Frame, Frame), ObsError> {
    let plane = window * window;
    if input.len() != input_len(window) {
        return Err(ObsError::BadLength {
            got: input.len(),
            expected: input_len(window),
        });
    }
    let decode = |base: usize| {
        let cells = (0..plane)
            .map(|i| {
                (0..CellClass::COUNT)
                    .max_by(|&a, &b| {
                        input[base + a * plane + i].total_cmp(&input[base + b * plane + i])
                    })
                    .unwrap() as u8
            })
            .collect();
        Frame { window, cells }
    };
    Ok((decode(0), decode(CellClass::COUNT * plane)))
}

/// Grey level of a class in exported images.
pub fn class_intensity(code: u8) -> u8 {
    code * 42
}

/// Grey level of an action in the bar row.
pub fn action_intensity(action: Action) -> u8 {
    ((u32::from(action.code()) * 255 + 4) / 8) as u8
}

/// Binary PGM (P5) of one frame, one pixel per cell, with the action bar as
/// an extra top row: `W x (W + 1)` pixels.
pub fn frame_pgm(frame: &Frame, action: Action) -> Vec<u8> {
    let w = frame.window;
    let mut out = format!("P5\n{} {}\n255\n", w, w + 1).into_bytes();
    out.extend(std::iter::repeat(action_intensity(action)).take(w));
    out.extend(frame.cells.iter().map(|&c| class_intensity(c)));
    out
}

/// Binary PGM of an observation: previous and current frames side by side
/// (`2W x (W + 1)` pixels) under a full-width action bar.
pub fn observation_pgm(obs: &Observation) -> Vec<u8> {
    let w = obs.window();
    let mut out = format!("P5\n{} {}\n255\n", 2 * w, w + 1).into_bytes();
    out.extend(std::iter::repeat(action_intensity(obs.action)).take(2 * w));
    for row in 0..w {
        for frame in [&obs.prev, &obs.cur] {
            out.extend(
                frame.cells[row * w..(row + 1) * w]
                    .iter()
                    .map(|&c| class_intensity(c)),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{step, Cell};
    use proptest::prelude::*;

    fn flat_state() -> (Level, EnvState) {
        let level = Level::flat(30, 12, Cell::new(5, 1), Cell::new(1, 1), 0);
        let s = EnvState::initial(&level);
        (level, s)
    }

    #[test]
    fn spawn_frame_has_agent_centre_and_floor_below() {
        let (level, s) = flat_state();
        let f = render_frame(&s, &level);
        assert_eq!(f.center(), CellClass::Agent);
        assert_eq!(f.count(CellClass::Agent), 1);
        let r = DEFAULT_WINDOW / 2;
        for col in 0..DEFAULT_WINDOW {
            assert_eq!(f.get(r + 1, col), CellClass::Wall);
        }
    }

    #[test]
    fn coin_visible_until_collected() {
        let (level, s) = flat_state();
        assert_eq!(render_frame(&s, &level).count(CellClass::Coin), 1);
        let mut s = s;
        for _ in 0..4 {
            s = step(&s, Action::Right, &level).unwrap().0;
        }
        assert!(s.coin_collected);
        assert_eq!(render_frame(&s, &level).count(CellClass::Coin), 0);
    }

    #[test]
    fn action_bar_values() {
        let (level, s) = flat_state();
        let f = render_frame(&s, &level);
        let bar = |a| make_observation(f.clone(), f.clone(), a).unwrap().action_bar();
        assert!(bar(Action::Noop).iter().all(|&v| v == 0.0));
        assert!(bar(Action::Down).iter().all(|&v| v == 1.0));
        assert!(bar(Action::Right).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let (level, s) = flat_state();
        let a = render_frame_sized(&s, &level, 15);
        let b = render_frame_sized(&s, &level, 9);
        assert!(matches!(
            make_observation(a, b, Action::Noop),
            Err(ObsError::WindowMismatch { .. })
        ));
    }

    #[test]
    fn all_empty_frame_encodes_to_empty_channel() {
        let f = Frame::from_codes(3, vec![0; 9]).unwrap();
        let obs = Observation::initial(f);
        let x = encode_input(&obs);
        assert_eq!(x.len(), input_len(3));
        for (i, v) in x.iter().enumerate() {
            let channel = i / 9;
            let expected = if channel == 0 || channel == 6 { 1.0 } else { 0.0 };
            assert_eq!(*v, expected, "index {i}");
        }
    }

    #[test]
    fn default_input_length() {
        assert_eq!(input_len(DEFAULT_WINDOW), 2925);
    }

    #[test]
    fn pgm_layout() {
        let f = Frame::from_codes(3, vec![0, 1, 2, 3, 5, 4, 1, 1, 1]).unwrap();
        let bytes = frame_pgm(&f, Action::Down);
        let header = b"P5\n3 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 255, 255, 0, 42, 84, 126, 210, 168, 42, 42, 42]);
        let obs = make_observation(f.clone(), f, Action::Right).unwrap();
        let bytes = observation_pgm(&obs);
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n6 4\n255\n".len() + 24);
    }

    fn frame_strategy(window: usize) -> impl Strategy<Value = Frame> {
        prop::collection::vec(0u8..6, window * window)
            .prop_map(move |cells| Frame::from_codes(window, cells).unwrap())
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(prev in frame_strategy(5), cur in frame_strategy(5), a in 0u8..9) {
            let obs = make_observation(prev.clone(), cur.clone(), Action::from_code(a).unwrap()).unwrap();
            let x = encode_input(&obs);
            let (p, c) = decode_frames(&x, 5).unwrap();
            prop_assert_eq!(p, prev);
            prop_assert_eq!(c, cur);
        }

        #[test]
        fn encoding_is_injective_in_action(f in frame_strategy(3), a in 0u8..9, b in 0u8..9) {
            let ea = encode_input(&make_observation(f.clone(), f.clone(), Action::from_code(a).unwrap()).unwrap());
            let eb = encode_input(&make_observation(f.clone(), f, Action::from_code(b).unwrap()).unwrap());
            prop_assert_eq!(a == b, ea == eb);
        }
    }
}
