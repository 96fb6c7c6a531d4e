//! First-person 3D variant: continuous position on the same grid maps,
//! discrete 90-degree turns, a pick action, and a column-raycast renderer
//! with flat-shaded walls and solid-color object billboards.

use crate::error::EnvError;
use crate::map::MapSpec;
use crate::obs::{apply_overlay, Observation, IMG_H, IMG_W};
use crate::{Env, StepResult, TrialStatus};

pub const THREED_ACTIONS: usize = 5; // forward, backward, turn_left, turn_right, pick

const MOVE_PER_REPEAT: f64 = 0.15;
const COLLISION_MARGIN: f64 = 0.25;
const PICK_RANGE: f64 = 1.5;
const SPRITE_SCALE: f64 = 0.55;

const WALL_RGB: [f64; 3] = [150.0, 150.0, 150.0];
const FLOOR_RGB: [u8; 3] = [52, 48, 44];
const CEIL_RGB: [u8; 3] = [78, 88, 108];

/// Facing index: 0 = north (-row), 1 = east (+col), 2 = south, 3 = west.
/// x runs along columns, y along rows.
fn dir_vec(facing: u8) -> (f64, f64) {
    match facing {
        0 => (0.0, -1.0),
        1 => (1.0, 0.0),
        2 => (0.0, 1.0),
        _ => (-1.0, 0.0),
    }
}

#[derive(Debug, Clone)]
pub struct ThreeDWorld {
    map: MapSpec,
    n_maps: usize,
    step_limit: usize,
    action_repeats: usize,
    target: usize,
    pos: (f64, f64), // (x, y)
    facing: u8,
    steps: usize,
    status: TrialStatus,
}

impl ThreeDWorld {
    pub fn new(map: MapSpec, n_maps: usize, step_limit: usize, action_repeats: usize) -> Self {
        let pos = (map.start.1 as f64 + 0.5, map.start.0 as f64 + 0.5);
        let facing = map.start_facing;
        ThreeDWorld {
            map,
            n_maps,
            step_limit,
            action_repeats: action_repeats.max(1),
            target: 0,
            pos,
            facing,
            steps: 0,
            status: TrialStatus::Failure,
        }
    }

    pub fn status(&self) -> TrialStatus {
        self.status
    }

    pub fn pose(&self) -> ((f64, f64), u8) {
        (self.pos, self.facing)
    }

    pub fn set_pose(&mut self, pos: (f64, f64), facing: u8) {
        self.pos = pos;
        self.facing = facing % 4;
    }

    /// Walls and object boxes are both solid for movement.
    fn solid(&self, x: f64, y: f64) -> bool {
        let (col, row) = (x.floor() as isize, y.floor() as isize);
        if self.map.is_wall(row, col) {
            return true;
        }
        if row < 0 || col < 0 {
            return false;
        }
        self.map.object_at((row as usize, col as usize)).is_some()
    }

    fn try_move(&mut self, sign: f64) {
        let (dx, dy) = dir_vec(self.facing);
        for _ in 0..self.action_repeats {
            let nx = self.pos.0 + dx * sign * MOVE_PER_REPEAT;
            let ny = self.pos.1 + dy * sign * MOVE_PER_REPEAT;
            let px = nx + dx * sign * COLLISION_MARGIN;
            let py = ny + dy * sign * COLLISION_MARGIN;
            if self.solid(px, py) {
                break;
            }
            self.pos = (nx, ny);
        }
    }

    /// Nearest object within pick range inside the forward 90-degree cone.
    fn pick_candidate(&self) -> Option<usize> {
        let (dx, dy) = dir_vec(self.facing);
        let cos_half = (45f64).to_radians().cos();
        let mut best: Option<(f64, usize)> = None;
        for o in &self.map.objects {
            let ox = o.cell.1 as f64 + 0.5;
            let oy = o.cell.0 as f64 + 0.5;
            let (rx, ry) = (ox - self.pos.0, oy - self.pos.1);
            let dist = (rx * rx + ry * ry).sqrt();
            if dist == 0.0 || dist > PICK_RANGE {
                continue;
            }
            if (rx * dx + ry * dy) / dist < cos_half {
                continue;
            }
            if best.map_or(true, |(d, _)| dist < d) {
                best = Some((dist, o.id));
            }
        }
        best.map(|(_, id)| id)
    }

    fn render(&self) -> Observation {
        let mut obs = Observation::blank();
        let (dx, dy) = dir_vec(self.facing);
        // Camera plane perpendicular to the view direction; FOV 90 degrees.
        let (px, py) = (-dy, dx);
        let mut zbuf = [f64::INFINITY; IMG_W];

        for col in 0..IMG_W {
            let cam = 2.0 * (col as f64 + 0.5) / IMG_W as f64 - 1.0;
            let (rx, ry) = (dx + px * cam, dy + py * cam);
            let (perp, side) = cast_wall_ray(&self.map, self.pos, rx, ry);
            zbuf[col] = perp;
            let height = (IMG_H as f64 / perp).min(IMG_H as f64 * 4.0);
            let top = (IMG_H as f64 / 2.0 - height / 2.0).max(0.0) as usize;
            let bot = ((IMG_H as f64 / 2.0 + height / 2.0) as usize).min(IMG_H);
            let shade = wall_shade(perp, side);
            let rgb = [
                (WALL_RGB[0] * shade) as u8,
                (WALL_RGB[1] * shade) as u8,
                (WALL_RGB[2] * shade) as u8,
            ];
            for row in 0..IMG_H {
                if row < top {
                    obs.put(row, col, CEIL_RGB);
                } else if row < bot {
                    obs.put(row, col, rgb);
                } else {
                    obs.put(row, col, FLOOR_RGB);
                }
            }
        }

        // Object billboards, farthest first so closer ones paint over.
        let inv_det = 1.0 / (px * dy - dx * py);
        let mut sprites: Vec<(f64, f64, [u8; 3])> = Vec::new();
        for o in &self.map.objects {
            let rx = o.cell.1 as f64 + 0.5 - self.pos.0;
            let ry = o.cell.0 as f64 + 0.5 - self.pos.1;
            let tx = inv_det * (dy * rx - dx * ry);
            let ty = inv_det * (-py * rx + px * ry);
            if ty > 0.05 {
                sprites.push((ty, tx, o.color));
            }
        }
        sprites.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (depth, tx, color) in sprites {
            let screen_x = IMG_W as f64 / 2.0 * (1.0 + tx / depth);
            let size = (IMG_H as f64 / depth * SPRITE_SCALE).min(IMG_H as f64 * 4.0);
            let c0 = (screen_x - size / 2.0).max(0.0) as usize;
            let c1 = ((screen_x + size / 2.0) as usize).min(IMG_W);
            let r0 = (IMG_H as f64 / 2.0 - size / 2.0).max(0.0) as usize;
            let r1 = ((IMG_H as f64 / 2.0 + size / 2.0) as usize).min(IMG_H);
            for col in c0..c1 {
                if depth >= zbuf[col] {
                    continue;
                }
                for row in r0..r1 {
                    obs.put(row, col, color);
                }
            }
        }

        let target_rgb = self.map.object(self.target).map(|o| o.color).unwrap_or([0; 3]);
        apply_overlay(&mut obs, self.map.map_id, self.n_maps, target_rgb);
        obs
    }
}

pub fn wall_shade(perp_dist: f64, side: u8) -> f64 {
    let d = 1.0 / (1.0 + 0.25 * perp_dist.max(0.0));
    if side == 0 {
        d * 0.8
    } else {
        d
    }
}

/// DDA over the wall grid. Returns (perpendicular distance, hit side);
/// side 0 is a vertical (x-boundary) face, side 1 a horizontal one.
fn cast_wall_ray(map: &MapSpec, pos: (f64, f64), rx: f64, ry: f64) -> (f64, u8) {
    let (mut mx, mut my) = (pos.0.floor() as isize, pos.1.floor() as isize);
    let delta_x = if rx == 0.0 { f64::INFINITY } else { (1.0 / rx).abs() };
    let delta_y = if ry == 0.0 { f64::INFINITY } else { (1.0 / ry).abs() };
    let (step_x, mut side_x) = if rx < 0.0 {
        (-1isize, (pos.0 - mx as f64) * delta_x)
    } else {
        (1, (mx as f64 + 1.0 - pos.0) * delta_x)
    };
    let (step_y, mut side_y) = if ry < 0.0 {
        (-1isize, (pos.1 - my as f64) * delta_y)
    } else {
        (1, (my as f64 + 1.0 - pos.1) * delta_y)
    };
    for _ in 0..4 * (map.width + map.height) {
        let side;
        if side_x < side_y {
            side_x += delta_x;
            mx += step_x;
            side = 0u8;
        } else {
            side_y += delta_y;
            my += step_y;
            side = 1;
        }
        if map.is_wall(my, mx) {
            let perp = if side == 0 {
                side_x - delta_x
            } else {
                side_y - delta_y
            };
            return (perp.max(1e-6), side);
        }
    }
    (f64::INFINITY, 0)
}

impl Env for ThreeDWorld {
    fn n_actions(&self) -> usize {
        THREED_ACTIONS
    }

    fn map(&self) -> &MapSpec {
        &self.map
    }

    fn reset(&mut self, target: usize) -> Result<Observation, EnvError> {
        if self.map.object(target).is_none() {
            return Err(EnvError::InvalidArgument(format!(
                "unknown target object {target} in map {}",
                self.map.map_id
            )));
        }
        self.target = target;
        self.pos = (self.map.start.1 as f64 + 0.5, self.map.start.0 as f64 + 0.5);
        self.facing = self.map.start_facing;
        self.steps = 0;
        self.status = TrialStatus::Running;
        Ok(self.render())
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.status != TrialStatus::Running {
            return Err(EnvError::Protocol("step called after trial ended".into()));
        }
        let mut reward = 0.0;
        match action {
            0 => self.try_move(1.0),
            1 => self.try_move(-1.0),
            2 => self.facing = (self.facing + 3) % 4,
            3 => self.facing = (self.facing + 1) % 4,
            4 => {
                // Pick with nothing in range is a defined no-op.
                if let Some(id) = self.pick_candidate() {
                    if id == self.target {
                        reward = 1.0;
                        self.status = TrialStatus::Success;
                    } else {
                        self.status = TrialStatus::Failure;
                    }
                }
            }
            _ => {
                return Err(EnvError::InvalidArgument(format!(
                    "3dworld action must be < {THREED_ACTIONS}, got {action}"
                )))
            }
        }
        self.steps += 1;
        if self.status == TrialStatus::Running && self.steps >= self.step_limit {
            self.status = TrialStatus::Failure;
        }
        Ok(StepResult {
            obs: self.render(),
            reward,
            done: self.status != TrialStatus::Running,
        })
    }
}
