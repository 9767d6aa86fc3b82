//! A deterministic, seedable MinAtar-style Breakout on a 10×10 grid.
//!
//! Observations are binary multi-channel grids with channels ordered
//! (paddle, ball, trail, brick). The rules here are normative for this lab;
//! exact parity with any published MinAtar build is a non-goal.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const GRID: usize = 10;
pub const CHANNELS: usize = 4;
pub const OBS_BITS: usize = GRID * GRID * CHANNELS;
pub const OBS_BYTES: usize = OBS_BITS / 8;
/// Steps before an episode is truncated (done with `truncated` set).
pub const STEP_CAP: usize = 10_000;

const CH_PADDLE: usize = 0;
const CH_BALL: usize = 1;
const CH_TRAIL: usize = 2;
const CH_BRICK: usize = 3;
const PADDLE_ROW: usize = 9;
const BRICK_ROWS: std::ops::RangeInclusive<usize> = 1..=3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a terminal state")]
    SteppedTerminal,
    #[error("action {0} out of range")]
    BadAction(usize),
    #[error("trajectory does not end in a terminal step")]
    IncompleteTrajectory,
}

/// Fixed Breakout action ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left = 0,
    Noop = 1,
    Right = 2,
}

pub const NUM_ACTIONS: usize = 3;

/// Bit-packed binary observation; bit index = (y·W + x)·C + c, LSB first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedObs(pub [u8; OBS_BYTES]);

impl PackedObs {
    pub fn empty() -> Self {
        PackedObs([0u8; OBS_BYTES])
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize) {
        let bit = (y * GRID + x) * CHANNELS + c;
        self.0[bit / 8] |= 1 << (bit % 8);
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> bool {
        let bit = (y * GRID + x) * CHANNELS + c;
        self.0[bit / 8] & (1 << (bit % 8)) != 0
    }

    /// Unpacks into `out` as an (H, W, C) row-major f32 grid of 0/1.
    pub fn write_f32(&self, out: &mut [f32]) {
        debug_assert_eq!(out.len(), OBS_BITS);
        for (i, v) in out.iter_mut().enumerate() {
            *v = ((self.0[i / 8] >> (i % 8)) & 1) as f32;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        let mut v = vec![0.0; OBS_BITS];
        self.write_f32(&mut v);
        v
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().map(|b| b.count_ones() as usize).sum()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: PackedObs,
    pub reward: f32,
    pub done: bool,
    /// Set when `done` came from the step cap, not a lost ball. Stored as
    /// non-terminal in replay so bootstrapping continues.
    pub truncated: bool,
}

/// Environment interface used by the harness; Breakout is the one normative
/// implementation.
pub trait Environment {
    fn num_actions(&self) -> usize;
    fn obs_dims(&self) -> (usize, usize, usize);
    fn reset(&mut self) -> PackedObs;
    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError>;
}

#[derive(Debug, Clone)]
pub struct Breakout {
    paddle_x: usize,
    ball: (i32, i32),
    dir: (i32, i32),
    trail: Option<(i32, i32)>,
    bricks: [[bool; GRID]; 3],
    rng: ChaCha8Rng,
    terminal: bool,
    steps: usize,
    needs_respawn: bool,
}

impl Breakout {
    pub fn new(seed: u64) -> Self {
        let mut env = Breakout {
            paddle_x: 4,
            ball: (0, 3),
            dir: (1, 1),
            trail: None,
            bricks: [[true; GRID]; 3],
            rng: ChaCha8Rng::seed_from_u64(seed),
            terminal: true,
            steps: 0,
            needs_respawn: false,
        };
        env.reset();
        env
    }

    pub fn brick_count(&self) -> usize {
        self.bricks.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn observation(&self) -> PackedObs {
        let mut obs = PackedObs::empty();
        obs.set(PADDLE_ROW, self.paddle_x, CH_PADDLE);
        obs.set(self.ball.1 as usize, self.ball.0 as usize, CH_BALL);
        if let Some((tx, ty)) = self.trail {
            obs.set(ty as usize, tx as usize, CH_TRAIL);
        }
        for (r, row) in self.bricks.iter().enumerate() {
            for (x, &b) in row.iter().enumerate() {
                if b {
                    obs.set(r + 1, x, CH_BRICK);
                }
            }
        }
        obs
    }

    #[cfg(test)]
    fn place_ball(&mut self, x: i32, y: i32, dir: (i32, i32)) {
        self.ball = (x, y);
        self.dir = dir;
    }

    pub fn ball(&self) -> (i32, i32) {
        self.ball
    }

    pub fn dir(&self) -> (i32, i32) {
        self.dir
    }

    pub fn paddle_x(&self) -> usize {
        self.paddle_x
    }
}

impl Environment for Breakout {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn obs_dims(&self) -> (usize, usize, usize) {
        (GRID, GRID, CHANNELS)
    }

    fn reset(&mut self) -> PackedObs {
        self.paddle_x = 4;
        self.bricks = [[true; GRID]; 3];
        let left = self.rng.gen_range(0..2u8) == 0;
        let x = if left { 0 } else { GRID as i32 - 1 };
        self.ball = (x, 3);
        // Down-right from the left edge, down-left from the right edge.
        self.dir = (if left { 1 } else { -1 }, 1);
        self.trail = None;
        self.terminal = false;
        self.steps = 0;
        self.needs_respawn = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.terminal {
            return Err(EnvError::SteppedTerminal);
        }
        if action >= NUM_ACTIONS {
            return Err(EnvError::BadAction(action));
        }
        if self.needs_respawn {
            self.bricks = [[true; GRID]; 3];
            self.needs_respawn = false;
        }

        match action {
            0 => self.paddle_x = self.paddle_x.saturating_sub(1),
            2 => self.paddle_x = (self.paddle_x + 1).min(GRID - 1),
            _ => {}
        }

        let prev = self.ball;
        let (mut nx, mut ny) = (self.ball.0 + self.dir.0, self.ball.1 + self.dir.1);
        if nx < 0 || nx >= GRID as i32 {
            self.dir.0 = -self.dir.0;
            nx = if nx < 0 { -nx } else { 2 * (GRID as i32 - 1) - nx };
        }
        if ny < 0 {
            self.dir.1 = -self.dir.1;
            ny = -ny;
        }

        let mut reward = 0.0;
        let mut done = false;
        if BRICK_ROWS.contains(&(ny as usize)) && self.bricks[ny as usize - 1][nx as usize] {
            self.bricks[ny as usize - 1][nx as usize] = false;
            reward = 1.0;
            self.dir.1 = -self.dir.1;
            if self.brick_count() == 0 {
                self.needs_respawn = true;
            }
        } else if ny as usize == PADDLE_ROW {
            if nx as usize == self.paddle_x {
                self.dir.1 = -self.dir.1;
            } else {
                done = true;
            }
        }

        self.ball = (nx, ny);
        self.trail = Some(prev);
        self.steps += 1;

        let truncated = !done && self.steps >= STEP_CAP;
        self.terminal = done || truncated;
        Ok(StepOutcome { obs: self.observation(), reward, done: done || truncated, truncated })
    }
}

/// Sum of rewards over one completed episode; for Breakout this equals the
/// number of bricks destroyed.
pub fn episode_return(trajectory: &[StepOutcome]) -> Result<f32, EnvError> {
    match trajectory.last() {
        Some(last) if last.done => Ok(trajectory.iter().map(|s| s.reward).sum()),
        _ => Err(EnvError::IncompleteTrajectory),
    }
}
