//! Procedural 1D heightfields for the locomotion tasks.
//!
//! Terrain is a piecewise-linear height profile h(x) over x in [-5, 105] m at
//! 0.05 m spacing, annotated with segment kinds so tests and spawn logic can
//! reason about what was generated.

use crate::config::Task;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DOMAIN_LO: f64 = -5.0;
pub const DOMAIN_HI: f64 = 105.0;
pub const SPACING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Flat,
    Hills,
    Steps,
    Rubble,
    Bowl,
    Obstacle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub x_start: f64,
    pub x_end: f64,
}

/// Piecewise-linear ground profile with segment annotations.
#[derive(Debug, Clone)]
pub struct Heightfield {
    /// Height samples at DOMAIN_LO + i * SPACING.
    pub heights: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl Heightfield {
    fn flat() -> Heightfield {
        let n = ((DOMAIN_HI - DOMAIN_LO) / SPACING).round() as usize + 1;
        Heightfield {
            heights: vec![0.0; n],
            segments: vec![Segment {
                kind: SegmentKind::Flat,
                x_start: DOMAIN_LO,
                x_end: DOMAIN_HI,
            }],
        }
    }

    fn sample_x(&self, i: usize) -> f64 {
        DOMAIN_LO + i as f64 * SPACING
    }

    fn index_at(&self, x: f64) -> usize {
        (((x - DOMAIN_LO) / SPACING).floor() as isize)
            .clamp(0, self.heights.len() as isize - 1) as usize
    }

    /// Linear interpolation between samples; clamped to the boundary value
    /// outside the domain.
    pub fn height_at(&self, x: f64) -> f64 {
        if x <= DOMAIN_LO {
            return self.heights[0];
        }
        if x >= DOMAIN_HI {
            return *self.heights.last().unwrap();
        }
        let t = (x - DOMAIN_LO) / SPACING;
        let i = t.floor() as usize;
        let frac = t - i as f64;
        if i + 1 >= self.heights.len() {
            return *self.heights.last().unwrap();
        }
        self.heights[i] * (1.0 - frac) + self.heights[i + 1] * frac
    }

    /// Arc length along the profile from DOMAIN_LO to x.
    pub fn arc_length_to(&self, x: f64) -> f64 {
        let xe = x.clamp(DOMAIN_LO, DOMAIN_HI);
        let mut s = 0.0;
        let full = self.index_at(xe);
        for i in 0..full {
            let dh = self.heights[i + 1] - self.heights[i];
            s += (SPACING * SPACING + dh * dh).sqrt();
        }
        let x0 = self.sample_x(full);
        if xe > x0 {
            let dh = self.height_at(xe) - self.heights[full];
            let dx = xe - x0;
            s += (dx * dx + dh * dh).sqrt();
        }
        s
    }

    /// Spawn abscissa for a task: center of the bowl for escape, middle of
    /// the leading flat segment otherwise (x = 0 on fully flat terrain).
    pub fn spawn_x(&self, task: Task) -> f64 {
        match task {
            Task::Escape => self
                .segments
                .iter()
                .find(|s| s.kind == SegmentKind::Bowl)
                .map(|s| 0.5 * (s.x_start + s.x_end))
                .unwrap_or(0.0),
            Task::Variable => self
                .segments
                .iter()
                .find(|s| s.kind == SegmentKind::Flat)
                .map(|s| 0.5 * (s.x_start + s.x_end))
                .unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn segment_at(&self, x: f64) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| x >= s.x_start && x <= s.x_end)
    }

    fn set_range(&mut self, x0: f64, x1: f64, f: impl Fn(f64) -> f64) {
        let i0 = self.index_at(x0);
        let i1 = self.index_at(x1);
        for i in i0..=i1 {
            let x = self.sample_x(i);
            if x >= x0 && x <= x1 {
                self.heights[i] = f(x);
            }
        }
    }
}

/// Generate the heightfield for a task. Deterministic given the rng state.
pub fn generate_terrain(task: Task, rng: &mut impl Rng) -> Heightfield {
    match task {
        Task::Flat => Heightfield::flat(),
        Task::Variable => generate_variable(rng),
        Task::Obstacles => generate_obstacles(rng, false),
        Task::ObstaclesCylinders => generate_obstacles(rng, true),
        Task::Escape => generate_escape(rng),
    }
}

fn push_segment(hf: &mut Heightfield, kind: SegmentKind, x0: f64, x1: f64) {
    hf.segments.push(Segment {
        kind,
        x_start: x0,
        x_end: x1,
    });
}

fn generate_variable(rng: &mut impl Rng) -> Heightfield {
    let mut hf = Heightfield::flat();
    hf.segments.clear();

    // Leading flat stretch where the robot spawns.
    let mut x = 4.0 + rng.gen_range(0.0..2.0);
    push_segment(&mut hf, SegmentKind::Flat, DOMAIN_LO, x);

    while x < DOMAIN_HI - 10.0 {
        let kind = match rng.gen_range(0..3) {
            0 => SegmentKind::Hills,
            1 => SegmentKind::Steps,
            _ => SegmentKind::Rubble,
        };
        let len = rng.gen_range(4.0..8.0);
        let x1 = (x + len).min(DOMAIN_HI - 2.0);
        match kind {
            SegmentKind::Hills => {
                let amp = rng.gen_range(0.10..0.30);
                let bumps = rng.gen_range(2..=4) as f64;
                let span = x1 - x;
                hf.set_range(x, x1, |xx| {
                    let t = (xx - x) / span;
                    amp * (std::f64::consts::PI * bumps * t).sin().max(0.0)
                });
            }
            SegmentKind::Steps => {
                let step_h = rng.gen_range(0.05..0.15);
                let step_w = rng.gen_range(0.4..0.8);
                let span = x1 - x;
                let n_steps = ((span / 2.0) / step_w).floor().max(1.0);
                hf.set_range(x, x1, |xx| {
                    let t = xx - x;
                    // staircase up to the midpoint, back down after
                    let k = if t < span / 2.0 {
                        (t / step_w).floor()
                    } else {
                        (n_steps - ((t - span / 2.0) / step_w).floor() - 1.0).max(0.0)
                    };
                    step_h * k.min(n_steps)
                });
            }
            SegmentKind::Rubble => {
                let amp = rng.gen_range(0.04..0.10);
                // Random lumps at every fourth sample, linearly interpolated
                // by the field resolution itself.
                let i0 = hf.index_at(x);
                let i1 = hf.index_at(x1);
                let mut level = 0.0;
                for i in i0..=i1 {
                    if (i - i0) % 4 == 0 {
                        level = rng.gen_range(0.0..amp);
                    }
                    let xx = hf.sample_x(i);
                    let fade = ((xx - x).min(x1 - xx) / 0.5).clamp(0.0, 1.0);
                    hf.heights[i] = level * fade;
                }
            }
            _ => unreachable!(),
        }
        push_segment(&mut hf, kind, x, x1);
        x = x1;

        let flat_len = rng.gen_range(2.0..4.0);
        let x1 = (x + flat_len).min(DOMAIN_HI);
        push_segment(&mut hf, SegmentKind::Flat, x, x1);
        x = x1;
    }
    push_segment(&mut hf, SegmentKind::Flat, x, DOMAIN_HI);
    hf
}

fn generate_obstacles(rng: &mut impl Rng, cylinders: bool) -> Heightfield {
    let mut hf = Heightfield::flat();
    hf.segments.clear();
    push_segment(&mut hf, SegmentKind::Flat, DOMAIN_LO, DOMAIN_HI);

    let mut x = 2.0 + rng.gen_range(0.0..1.0);
    while x < DOMAIN_HI - 4.0 {
        if cylinders {
            // Semicircular bump.
            let r = rng.gen_range(0.15..0.5);
            let c = x + r;
            hf.set_range(x, x + 2.0 * r, |xx| {
                let d = xx - c;
                (r * r - d * d).max(0.0).sqrt()
            });
            push_segment(&mut hf, SegmentKind::Obstacle, x, x + 2.0 * r);
            x += 2.0 * r;
        } else {
            // Rectangular block.
            let w = rng.gen_range(0.4..1.2);
            let h = rng.gen_range(0.1..0.4);
            hf.set_range(x, x + w, |_| h);
            push_segment(&mut hf, SegmentKind::Obstacle, x, x + w);
            x += w;
        }
        x += rng.gen_range(2.0..5.0);
    }
    hf
}

fn generate_escape(rng: &mut impl Rng) -> Heightfield {
    let mut hf = Heightfield::flat();
    hf.segments.clear();
    let center = 50.0;
    let radius = 5.0;
    let depth = 1.0;
    // Parabolic bowl, depth 1 m at the center.
    hf.set_range(center - radius, center + radius, |x| {
        let d = (x - center).abs() / radius;
        -depth * (1.0 - d * d)
    });
    push_segment(&mut hf, SegmentKind::Bowl, center - radius, center + radius);

    // Rings of small hills on both sides of the bowl.
    for side in [-1.0, 1.0] {
        let mut x = center + side * radius;
        for _ in 0..6 {
            let w = rng.gen_range(1.0..2.0);
            let amp = rng.gen_range(0.1..0.25);
            let (x0, x1) = if side < 0.0 { (x - w, x) } else { (x, x + w) };
            hf.set_range(x0, x1, |xx| {
                let t = (xx - x0) / w;
                amp * (std::f64::consts::PI * t).sin().max(0.0)
            });
            push_segment(&mut hf, SegmentKind::Hills, x0, x1);
            x += side * (w + rng.gen_range(0.5..1.5));
        }
    }
    hf
}

/// Linear interpolation lookup, clamped at the domain boundary.
pub fn query_height(hf: &Heightfield, x: f64) -> f64 {
    hf.height_at(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn flat_is_zero_everywhere() {
        let hf = generate_terrain(Task::Flat, &mut stream(0, "t", 0));
        for x in [-5.0, -1.0, 0.0, 3.3, 50.0, 105.0] {
            assert_eq!(query_height(&hf, x), 0.0);
        }
    }

    #[test]
    fn interpolation_midpoint_and_clamping() {
        let mut hf = Heightfield::flat();
        // samples at x=0 and x=0.05 with heights 0 and 0.1
        let i = hf.index_at(0.0);
        hf.heights[i] = 0.0;
        hf.heights[i + 1] = 0.1;
        assert!((query_height(&hf, 0.025) - 0.05).abs() < 1e-12);
        // clamp below the domain
        let h0 = hf.heights[0];
        assert_eq!(query_height(&hf, -10.0), h0);
        assert_eq!(query_height(&hf, 1000.0), *hf.heights.last().unwrap());
    }

    #[test]
    fn variable_terrain_is_deterministic() {
        let a = generate_terrain(Task::Variable, &mut stream(3, "vt", 0));
        let b = generate_terrain(Task::Variable, &mut stream(3, "vt", 0));
        assert_eq!(a.heights, b.heights);
        assert_eq!(a.segments.len(), b.segments.len());
    }

    #[test]
    fn variable_population_covers_all_segment_kinds() {
        let mut seen_hills = false;
        let mut seen_steps = false;
        let mut seen_rubble = false;
        for seed in 0..100 {
            let hf = generate_terrain(Task::Variable, &mut stream(seed, "vtpop", 0));
            let mut non_flat = 0;
            for s in &hf.segments {
                match s.kind {
                    SegmentKind::Hills => {
                        seen_hills = true;
                        non_flat += 1;
                    }
                    SegmentKind::Steps => {
                        seen_steps = true;
                        non_flat += 1;
                    }
                    SegmentKind::Rubble => {
                        seen_rubble = true;
                        non_flat += 1;
                    }
                    _ => {}
                }
            }
            assert!(non_flat >= 1, "seed {seed} generated no rough segments");
        }
        assert!(seen_hills && seen_steps && seen_rubble);
    }

    #[test]
    fn variable_spawn_lands_on_leading_flat() {
        for seed in 0..20 {
            let hf = generate_terrain(Task::Variable, &mut stream(seed, "vtspawn", 0));
            let x = hf.spawn_x(Task::Variable);
            let seg = hf.segment_at(x).unwrap();
            assert_eq!(seg.kind, SegmentKind::Flat);
            assert_eq!(query_height(&hf, x), 0.0);
        }
    }

    #[test]
    fn escape_bowl_shape() {
        let hf = generate_terrain(Task::Escape, &mut stream(1, "esc", 0));
        let c = hf.spawn_x(Task::Escape);
        assert!((query_height(&hf, c) + 1.0).abs() < 0.02, "bowl depth at center");
        assert!(query_height(&hf, c + 5.0).abs() < 0.05, "bowl rim near zero");
    }

    #[test]
    fn arc_length_on_flat_equals_dx() {
        let hf = Heightfield::flat();
        let s1 = hf.arc_length_to(10.0);
        let s0 = hf.arc_length_to(0.0);
        assert!((s1 - s0 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn obstacles_have_blocks() {
        let hf = generate_terrain(Task::Obstacles, &mut stream(2, "obs", 0));
        let blocks = hf
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Obstacle)
            .count();
        assert!(blocks >= 5, "expected several obstacles, got {blocks}");
        let max_h = hf.heights.iter().cloned().fold(0.0, f64::max);
        assert!(max_h >= 0.1 && max_h <= 0.4 + 1e-12);
    }
}
