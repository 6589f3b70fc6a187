//! Synthetic moving-bar event streams for the toy classification task.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::{Event, EventError, EventStream, Polarity};

/// Compass direction of motion. Image rows grow downwards, so north is -y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    East,
    NorthEast,
    North,
    NorthWest,
    West,
    SouthWest,
    South,
    SouthEast,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::East,
        Direction::NorthEast,
        Direction::North,
        Direction::NorthWest,
        Direction::West,
        Direction::SouthWest,
        Direction::South,
        Direction::SouthEast,
    ];

    pub fn from_index(i: u8) -> Result<Self, EventError> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or(EventError::BadDirection(i))
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Unit motion vector in pixel coordinates.
    pub fn unit(self) -> (f64, f64) {
        let angle = self.index() as f64 * std::f64::consts::FRAC_PI_4;
        (angle.cos(), -angle.sin())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    /// Extent of the bar perpendicular to its motion, in pixels.
    pub bar_length: f64,
    /// Extent of the bar along its motion, in pixels.
    pub bar_thickness: f64,
    /// Pixels travelled per time step.
    pub speed: f64,
    pub steps: u32,
    pub step_us: u32,
    /// Probability that a pixel emits a noise event during one step.
    pub noise_rate: f64,
    /// Maximum random offset of the sweep centre from the sensor centre.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            bar_length: 12.0,
            bar_thickness: 2.0,
            speed: 1.0,
            steps: 10,
            step_us: 1000,
            noise_rate: 0.002,
            jitter: 5.0,
        }
    }
}

impl SynthConfig {
    /// Total span of generated timestamps in microseconds.
    pub fn duration_us(&self) -> u32 {
        self.steps * self.step_us
    }
}

fn unit_f64(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

struct Bar {
    cx: f64,
    cy: f64,
    dir: (f64, f64),
    half_len: f64,
    half_thick: f64,
}

impl Bar {
    fn covers(&self, x: usize, y: usize, offset: f64) -> bool {
        let rx = x as f64 + 0.5 - (self.cx + self.dir.0 * offset);
        let ry = y as f64 + 0.5 - (self.cy + self.dir.1 * offset);
        let along = rx * self.dir.0 + ry * self.dir.1;
        let across = -rx * self.dir.1 + ry * self.dir.0;
        along >= -self.half_thick && along < self.half_thick && across.abs() <= self.half_len
    }
}

/// Generates a bar sweeping across the sensor in `direction`.
///
/// Each step, pixels newly covered by the bar fire `+1` and pixels it leaves
/// fire `-1`. Noise events are added per pixel and step with probability
/// `cfg.noise_rate`. The output depends only on `(direction, seed, cfg)`.
pub fn gen_synthetic_bar(
    direction: u8,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(EventStream, u8), EventError> {
    let dir = Direction::from_index(direction)?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let unit = dir.unit();
    let travel = cfg.steps as f64 * cfg.speed;
    let jx = (unit_f64(&mut rng) * 2.0 - 1.0) * cfg.jitter;
    let jy = (unit_f64(&mut rng) * 2.0 - 1.0) * cfg.jitter;
    let bar = Bar {
        cx: w as f64 / 2.0 + jx - unit.0 * travel / 2.0,
        cy: h as f64 / 2.0 + jy - unit.1 * travel / 2.0,
        dir: unit,
        half_len: cfg.bar_length / 2.0,
        half_thick: cfg.bar_thickness / 2.0,
    };

    let mut events = Vec::new();
    let mut prev: Vec<bool> = (0..w * h).map(|i| bar.covers(i % w, i / w, 0.0)).collect();
    for step in 1..=cfg.steps {
        let t_step = (step - 1) * cfg.step_us;
        let offset = step as f64 * cfg.speed;
        let mut step_events = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let now = bar.covers(x, y, offset);
                if now != prev[idx] {
                    let p = if now { Polarity::Pos } else { Polarity::Neg };
                    step_events.push(Event::new(t_step, x as u16, y as u16, p));
                }
                prev[idx] = now;
            }
        }
        if cfg.noise_rate > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    if unit_f64(&mut rng) < cfg.noise_rate {
                        let dt = (rng.next_u64() % cfg.step_us as u64) as u32;
                        let p = if rng.next_u64() & 1 == 1 {
                            Polarity::Pos
                        } else {
                            Polarity::Neg
                        };
                        step_events.push(Event::new(t_step + dt, x as u16, y as u16, p));
                    }
                }
            }
        }
        step_events.sort_by_key(|e| e.t);
        events.extend(step_events);
    }
    Ok((EventStream::new(cfg.width, cfg.height, events)?, direction))
}
