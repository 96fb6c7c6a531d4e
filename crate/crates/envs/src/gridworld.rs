//! Partially observable gridworld: navigate to the target object under a
//! step limit. Stepping onto any object's cell selects it and ends the
//! trial; only the correct target pays reward.

use crate::error::EnvError;
use crate::map::MapSpec;
use crate::obs::{apply_overlay, Observation, IMG_H, IMG_W};
use crate::{Env, StepResult, TrialStatus};

pub const GRID_ACTIONS: usize = 4; // up, down, left, right
pub const VIEW_RADIUS: usize = 2; // 5x5 egocentric window

const FLOOR_RGB: [u8; 3] = [40, 40, 40];
const WALL_RGB: [u8; 3] = [96, 96, 96];

#[derive(Debug, Clone)]
pub struct Gridworld {
    map: MapSpec,
    n_maps: usize,
    step_limit: usize,
    target: usize,
    agent: (usize, usize),
    steps: usize,
    status: TrialStatus,
}

impl Gridworld {
    pub fn new(map: MapSpec, n_maps: usize, step_limit: usize) -> Self {
        let start = map.start;
        Gridworld {
            map,
            n_maps,
            step_limit,
            target: 0,
            agent: start,
            steps: 0,
            status: TrialStatus::Failure,
        }
    }

    pub fn status(&self) -> TrialStatus {
        self.status
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    fn render(&self) -> Observation {
        let mut obs = Observation::blank();
        let r0 = self.agent.0 as isize - VIEW_RADIUS as isize;
        let c0 = self.agent.1 as isize - VIEW_RADIUS as isize;
        let window = 2 * VIEW_RADIUS + 1;
        for py in 0..IMG_H {
            let wy = py * window / IMG_H;
            for px in 0..IMG_W {
                let wx = px * window / IMG_W;
                let (mr, mc) = (r0 + wy as isize, c0 + wx as isize);
                let rgb = if self.map.is_wall(mr, mc) {
                    WALL_RGB
                } else if let Some(o) = self.map.object_at((mr as usize, mc as usize)) {
                    o.color
                } else {
                    FLOOR_RGB
                };
                obs.put(py, px, rgb);
            }
        }
        let target_rgb = self.map.object(self.target).map(|o| o.color).unwrap_or([0; 3]);
        apply_overlay(&mut obs, self.map.map_id, self.n_maps, target_rgb);
        obs
    }
}

impl Env for Gridworld {
    fn n_actions(&self) -> usize {
        GRID_ACTIONS
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
        self.agent = self.map.start;
        self.steps = 0;
        self.status = TrialStatus::Running;
        Ok(self.render())
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.status != TrialStatus::Running {
            return Err(EnvError::Protocol("step called after trial ended".into()));
        }
        if action >= GRID_ACTIONS {
            return Err(EnvError::InvalidArgument(format!(
                "gridworld action must be < {GRID_ACTIONS}, got {action}"
            )));
        }
        let (dr, dc) = match action {
            0 => (-1isize, 0isize),
            1 => (1, 0),
            2 => (0, -1),
            _ => (0, 1),
        };
        let (nr, nc) = (self.agent.0 as isize + dr, self.agent.1 as isize + dc);
        // Bumping a wall is a no-op that still consumes the step.
        if !self.map.is_wall(nr, nc) {
            self.agent = (nr as usize, nc as usize);
        }
        self.steps += 1;

        let mut reward = 0.0;
        if let Some(obj) = self.map.object_at(self.agent) {
            if obj.id == self.target {
                reward = 1.0;
                self.status = TrialStatus::Success;
            } else {
                self.status = TrialStatus::Failure;
            }
        } else if self.steps >= self.step_limit {
            self.status = TrialStatus::Failure;
        }
        Ok(StepResult {
            obs: self.render(),
            reward,
            done: self.status != TrialStatus::Running,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::generate_maps;
    use crate::obs::map_id_gray;

    fn reachable_neighbor_of(map: &MapSpec, cell: (usize, usize)) -> (usize, usize) {
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (cell.0 as isize + dr, cell.1 as isize + dc);
            if !map.is_wall(nr, nc) && map.object_at((nr as usize, nc as usize)).is_none() {
                return (nr as usize, nc as usize);
            }
        }
        panic!("object fully enclosed");
    }

    fn step_toward(from: (usize, usize), to: (usize, usize)) -> usize {
        if to.0 + 1 == from.0 {
            0
        } else if to.0 == from.0 + 1 {
            1
        } else if to.1 + 1 == from.1 {
            2
        } else {
            3
        }
    }

    #[test]
    fn stepping_onto_target_pays_unit_reward() {
        let maps = generate_maps(21, 1, 3, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[0].clone(), 1, 100);
        env.reset(0).unwrap();
        // Teleport next to the target for the unit test.
        let goal = env.map.object(0).unwrap().cell;
        env.agent = reachable_neighbor_of(&env.map, goal);
        let r = env.step(step_toward(env.agent, goal)).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done);
        assert_eq!(env.status(), TrialStatus::Success);
    }

    #[test]
    fn stepping_onto_wrong_object_ends_with_no_reward() {
        let maps = generate_maps(21, 1, 3, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[0].clone(), 1, 100);
        env.reset(1).unwrap();
        let wrong = env.map.object(0).unwrap().cell;
        env.agent = reachable_neighbor_of(&env.map, wrong);
        let r = env.step(step_toward(env.agent, wrong)).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(r.done);
        assert_eq!(env.status(), TrialStatus::Failure);
    }

    #[test]
    fn hundred_wall_bumps_exhaust_the_step_limit() {
        let maps = generate_maps(21, 1, 3, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[0].clone(), 1, 100);
        env.reset(0).unwrap();
        // Walk into the nearest wall forever.
        let a = {
            let (r, c) = env.map.start;
            let mut pick = 0;
            for (i, (dr, dc)) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().enumerate() {
                if env.map.is_wall(r as isize + dr, c as isize + dc) {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let mut last = None;
        for _ in 0..100 {
            last = Some(env.step(a).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, 0.0);
        assert_eq!(env.steps(), 100);
        assert!(env.step(a).is_err(), "step after done is a protocol error");
    }

    #[test]
    fn unknown_target_is_invalid() {
        let maps = generate_maps(21, 1, 3, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[0].clone(), 1, 100);
        assert!(env.reset(99).is_err());
    }

    #[test]
    fn observation_embeds_target_color_and_map_id() {
        let maps = generate_maps(33, 4, 5, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[2].clone(), 4, 100);
        let obs = env.reset(3).unwrap();
        let target_rgb = maps[2].object(3).unwrap().color;
        let gray = map_id_gray(2, 4);
        assert_eq!(obs.get(3, 3), [gray, gray, gray]);
        assert_eq!(obs.get(3, 11), target_rgb);
        // Center of the view shows the agent's floor cell.
        assert_eq!(obs.get(42, 42), FLOOR_RGB);
    }

    #[test]
    fn rendering_is_deterministic() {
        let maps = generate_maps(33, 2, 4, (11, 11)).unwrap();
        let mut a = Gridworld::new(maps[1].clone(), 2, 100);
        let mut b = Gridworld::new(maps[1].clone(), 2, 100);
        let oa = a.reset(2).unwrap();
        let ob = b.reset(2).unwrap();
        assert_eq!(oa, ob);
    }
}
