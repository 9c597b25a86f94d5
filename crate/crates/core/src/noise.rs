//! Counter-based Brownian increments for the truncated cylindrical Wiener
//! process `w(t) = Σ_{k ≤ M} e_k β_k(t)`.
//!
//! Every mode owns its own ChaCha8 stream keyed by
//! `(master_seed, trajectory_id, sub_id, level)`, so the increments of mode `k`
//! do not depend on how many other modes are drawn, on the thread that draws
//! them, or on the order in which trajectories are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Identity of one trajectory's noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub trajectory_id: u64,
    /// Extra key component for auxiliary populations sharing a trajectory id.
    pub sub_id: u64,
    pub modes: usize,
    pub dt: f64,
    level: u32,
}

fn mode_rng(seed: u64, traj: u64, sub: u64, level: u32, mode: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&traj.to_le_bytes());
    key[16..24].copy_from_slice(&sub.to_le_bytes());
    key[24..].copy_from_slice(&u64::from(level).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(mode as u64);
    rng
}

impl NoiseStream {
    pub fn new(master_seed: u64, trajectory_id: u64, modes: usize, dt: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::domain("noise stream needs at least one mode"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("noise step must be positive, got {dt}")));
        }
        Ok(Self { master_seed, trajectory_id, sub_id: 0, modes, dt, level: 0 })
    }

    pub fn with_sub(mut self, sub_id: u64) -> Self {
        self.sub_id = sub_id;
        self
    }

    pub fn with_modes(mut self, modes: usize) -> Self {
        self.modes = modes.max(1);
        self
    }

    /// Number of Brownian-bridge halvings applied to the base stream.
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Same path at half the step: each coarse increment is split by a bridge
    /// midpoint drawn from a level-specific substream.
    pub fn refine(&self) -> NoiseStream {
        NoiseStream { dt: 0.5 * self.dt, level: self.level + 1, ..*self }
    }

    pub fn cursor(&self) -> NoiseCursor {
        NoiseCursor::build(self, self.level)
    }

    /// Increments at `step`; replays the stream from the start.
    pub fn increments(&self, step: usize) -> Vec<f64> {
        let mut c = self.cursor();
        let mut out = vec![0.0; self.modes];
        for _ in 0..=step {
            c.next_into(&mut out);
        }
        out
    }
}

/// Sequential reader of a [`NoiseStream`].
#[derive(Clone, Debug)]
pub struct NoiseCursor {
    rngs: Vec<ChaCha8Rng>,
    kind: CursorKind,
}

#[derive(Clone, Debug)]
enum CursorKind {
    Base { sd: f64 },
    Refined { parent: Box<NoiseCursor>, half_sd: f64, coarse: Vec<f64>, bridge: Vec<f64>, second: bool },
}

impl NoiseCursor {
    fn build(s: &NoiseStream, level: u32) -> Self {
        let rngs = (0..s.modes).map(|k| mode_rng(s.master_seed, s.trajectory_id, s.sub_id, level, k)).collect();
        let dt_level = s.dt * 2f64.powi((s.level - level) as i32);
        let kind = if level == 0 {
            CursorKind::Base { sd: dt_level.sqrt() }
        } else {
            let parent = Box::new(NoiseCursor::build(s, level - 1));
            // Bridge spread for splitting a step of length 2·dt_level.
            CursorKind::Refined {
                parent,
                half_sd: (0.5 * dt_level).sqrt(),
                coarse: vec![0.0; s.modes],
                bridge: vec![0.0; s.modes],
                second: false,
            }
        };
        Self { rngs, kind }
    }

    pub fn modes(&self) -> usize {
        self.rngs.len()
    }

    /// Writes the next step's increments for every mode into `out`.
    pub fn next_into(&mut self, out: &mut [f64]) {
        match &mut self.kind {
            CursorKind::Base { sd } => {
                for (o, rng) in out.iter_mut().zip(self.rngs.iter_mut()) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = *sd * z;
                }
            }
            CursorKind::Refined { parent, half_sd, coarse, bridge, second } => {
                if !*second {
                    parent.next_into(coarse);
                    for (b, rng) in bridge.iter_mut().zip(self.rngs.iter_mut()) {
                        let z: f64 = rng.sample(StandardNormal);
                        *b = *half_sd * z;
                    }
                    for ((o, c), b) in out.iter_mut().zip(coarse.iter()).zip(bridge.iter()) {
                        *o = 0.5 * c + b;
                    }
                } else {
                    for ((o, c), b) in out.iter_mut().zip(coarse.iter()).zip(bridge.iter()) {
                        *o = 0.5 * c - b;
                    }
                }
                *second = !*second;
            }
        }
    }

    pub fn next_vec(&mut self) -> Vec<f64> {
        let mut out = vec![0.0; self.modes()];
        self.next_into(&mut out);
        out
    }
}
