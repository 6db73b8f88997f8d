//! Planar world geometry: a rectangular arena, a goal disc, and circular
//! obstacles, exposed through two signed margins and a range sensor.
//!
//! Sign conventions, used everywhere downstream:
//!
//! * target margin `l`: `l <= 0` exactly when the position is inside the goal
//!   disc; positive values are the distance to the goal boundary.
//! * failure margin `zeta`: `zeta > 0` exactly when the position is inside an
//!   obstacle or outside the arena; negative values are (minus) the clearance
//!   to the nearest failure boundary.
//!
//! Both margins are signed Euclidean distances, so each is 1-Lipschitz in the
//! position — the property the value-function Lipschitz analysis relies on.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Axis-aligned rectangle bounding the drivable area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    /// Signed distance to the rectangle: negative inside, positive outside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let cx = 0.5 * (self.x_min + self.x_max);
        let cy = 0.5 * (self.y_min + self.y_max);
        let hx = 0.5 * (self.x_max - self.x_min);
        let hy = 0.5 * (self.y_max - self.y_min);
        let dx = (p[0] - cx).abs() - hx;
        let dy = (p[1] - cy).abs() - hy;
        let ox = dx.max(0.0);
        let oy = dy.max(0.0);
        let outside = (ox * ox + oy * oy).sqrt();
        let inside = dx.max(dy).min(0.0);
        outside + inside
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.signed_distance(p) <= 0.0
    }
}

/// Circular obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Target and failure margins at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Target margin: `<= 0` inside the goal disc.
    pub l: f64,
    /// Failure margin: `> 0` inside an obstacle or outside the arena.
    pub zeta: f64,
}

/// Static description of one environment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub arena: Rect,
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    #[serde(default)]
    pub obstacles: Vec<Disc>,
}

impl WorldSpec {
    /// Checks the layout is usable: a non-empty arena, a goal disc with
    /// positive radius that lies fully inside the arena, positive obstacle
    /// radii, and no obstacle overlapping the goal disc. Keeping the goal
    /// clear of every failure region guarantees no position is simultaneously
    /// "reached" and "failed", which the episode classifier depends on.
    pub fn validate(&self) -> Result<()> {
        ensure_finite("arena", &[self.arena.x_min, self.arena.x_max, self.arena.y_min, self.arena.y_max])?;
        ensure_finite("goal", &[self.goal_center[0], self.goal_center[1], self.goal_radius])?;
        if self.arena.x_min >= self.arena.x_max || self.arena.y_min >= self.arena.y_max {
            return Err(Error::Config(format!(
                "arena is empty: x [{}, {}], y [{}, {}]",
                self.arena.x_min, self.arena.x_max, self.arena.y_min, self.arena.y_max
            )));
        }
        if self.goal_radius <= 0.0 {
            return Err(Error::Config(format!("goal radius must be positive, got {}", self.goal_radius)));
        }
        let goal_sd = self.arena.signed_distance(self.goal_center);
        if goal_sd > -self.goal_radius {
            return Err(Error::Config(format!(
                "goal disc (radius {}) is not fully inside the arena (signed distance {goal_sd})",
                self.goal_radius
            )));
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            ensure_finite("obstacle", &[ob.center[0], ob.center[1], ob.radius])?;
            if ob.radius <= 0.0 {
                return Err(Error::Config(format!("obstacle {i} radius must be positive, got {}", ob.radius)));
            }
            let gap = dist(ob.center, self.goal_center) - ob.radius - self.goal_radius;
            if gap <= 0.0 {
                return Err(Error::Config(format!(
                    "obstacle {i} overlaps the goal disc (gap {gap})"
                )));
            }
        }
        Ok(())
    }

    /// Target margin at `p`: distance to the goal center minus the goal
    /// radius. Non-positive exactly inside the goal disc.
    pub fn target_margin(&self, p: [f64; 2]) -> Result<f64> {
        ensure_finite("position", &p)?;
        Ok(dist(p, self.goal_center) - self.goal_radius)
    }

    /// Failure margin at `p`: the largest of the per-obstacle penetration
    /// margins and the arena signed distance. Positive exactly when `p` is
    /// inside some obstacle or outside the arena.
    pub fn failure_margin(&self, p: [f64; 2]) -> Result<f64> {
        ensure_finite("position", &p)?;
        let mut zeta = self.arena.signed_distance(p);
        for ob in &self.obstacles {
            zeta = zeta.max(ob.radius - dist(p, ob.center));
        }
        Ok(zeta)
    }

    /// Both margins at `p`.
    pub fn margins(&self, p: [f64; 2]) -> Result<Margins> {
        Ok(Margins {
            l: self.target_margin(p)?,
            zeta: self.failure_margin(p)?,
        })
    }

    /// Distances from `p` along `n_rays` directions (evenly spaced in the
    /// body frame, ray 0 along `heading`) to the nearest failure boundary —
    /// an obstacle circle or the arena edge — clipped to `max_range`.
    ///
    /// A sensing origin already inside the failure region reads contact
    /// (zero) on every ray: a buried sensor has no line of sight, and the
    /// alternative — ranging the far side of the surface it is embedded in —
    /// would tell a range-triggered controller the way ahead is clear.
    pub fn ray_distances(&self, p: [f64; 2], heading: f64, n_rays: usize, max_range: f64) -> Result<Vec<f64>> {
        ensure_finite("position", &p)?;
        ensure_finite("heading", &[heading])?;
        if n_rays == 0 || max_range <= 0.0 {
            return Err(Error::Contract(format!(
                "ray cast needs n_rays > 0 and max_range > 0, got {n_rays} and {max_range}"
            )));
        }
        if self.failure_margin(p)? > 0.0 {
            return Ok(vec![0.0; n_rays]);
        }
        let mut out = Vec::with_capacity(n_rays);
        for k in 0..n_rays {
            let phi = heading + std::f64::consts::TAU * (k as f64) / (n_rays as f64);
            let dir = [phi.cos(), phi.sin()];
            let mut t = ray_rect(p, dir, &self.arena).unwrap_or(f64::INFINITY);
            for ob in &self.obstacles {
                if let Some(tc) = ray_circle(p, dir, ob.center, ob.radius) {
                    t = t.min(tc);
                }
            }
            out.push(t.min(max_range));
        }
        Ok(out)
    }
}

/// Box of initial poses episodes start from; speed and yaw rate start at
/// zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartRegion {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub theta: [f64; 2],
}

impl StartRegion {
    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        for (name, [lo, hi]) in [("x", self.x), ("y", self.y), ("theta", self.theta)] {
            ensure_finite(name, &[lo, hi])?;
            if lo > hi {
                return Err(Error::Config(format!("start range {name} is inverted: [{lo}, {hi}]")));
            }
        }
        for corner in [
            [self.x[0], self.y[0]],
            [self.x[0], self.y[1]],
            [self.x[1], self.y[0]],
            [self.x[1], self.y[1]],
        ] {
            if !world.arena.contains(corner) {
                return Err(Error::Config(format!(
                    "start region corner {corner:?} lies outside the arena"
                )));
            }
        }
        Ok(())
    }

    /// Uniform pose draw; components with zero-width ranges stay fixed.
    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> crate::dynamics::State {
        use rand::Rng;
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
        crate::dynamics::State::new(draw(self.x), draw(self.y), draw(self.theta), 0.0, 0.0)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Smallest `t >= 0` with `p + t*dir` on the circle, if any. From inside the
/// circle this is the exit distance.
fn ray_circle(p: [f64; 2], dir: [f64; 2], center: [f64; 2], radius: f64) -> Option<f64> {
    let ox = p[0] - center[0];
    let oy = p[1] - center[1];
    let b = ox * dir[0] + oy * dir[1];
    let c = ox * ox + oy * oy - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

/// Smallest `t >= 0` with `p + t*dir` on the rectangle boundary, if any.
/// From inside this is the exit distance through the walls.
fn ray_rect(p: [f64; 2], dir: [f64; 2], rect: &Rect) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (pos, d, lo, hi) in [
        (p[0], dir[0], rect.x_min, rect.x_max),
        (p[1], dir[1], rect.y_min, rect.y_max),
    ] {
        if d.abs() < 1e-12 {
            if pos < lo || pos > hi {
                return None;
            }
        } else {
            let mut t0 = (lo - pos) / d;
            let mut t1 = (hi - pos) / d;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
        }
    }
    if t_near > t_far || t_far < 0.0 {
        None
    } else if t_near >= 0.0 {
        Some(t_near)
    } else {
        Some(t_far)
    }
}
