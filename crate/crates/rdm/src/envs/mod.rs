//! Continuous point-mass maze: occupancy grid with scripted door toggles,
//! ε-random dynamics, analytic inverse dynamics, an A* expert, and dataset
//! generation for training.
//!
//! States are (x, y, vx, vy) in world units. Cell (r, c) spans
//! x ∈ [c, c+1)·cell_size, y ∈ [r, r+1)·cell_size.

mod astar;
mod dataset;
mod world;

pub use astar::{expert_path, waypoints};
pub use dataset::{generate_dataset, rollout_expert, Dataset, DatasetGenConfig, Episode};
pub use world::{Door, DynParams, MazeWorld};

use rand::Rng as _;

use crate::rng::Rng;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Margin (world units) kept between a clamped position and the wall it hit.
const CONTACT_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
    pub t: usize,
}

impl EnvState {
    pub fn at(pos: [f32; 2]) -> Self {
        EnvState {
            pos,
            vel: [0.0, 0.0],
            t: 0,
        }
    }

    pub fn as_array(&self) -> [f32; STATE_DIM] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub state: EnvState,
    /// 1 iff the post-step position is within the goal radius.
    pub reward: u8,
    pub done: bool,
    pub collision: bool,
    /// A door toggled its state at this env step.
    pub intervention_fired: bool,
    /// The action was replaced by a uniform random one (ε-randomness).
    pub randomized: bool,
}

/// Advance the point mass one step: doors toggle first, the action is
/// ε-randomized and clipped, velocity integrates with damping and a speed
/// clamp, and the swept segment is tested against walls and closed doors.
/// On a hit the position clamps to the contact point minus a margin and
/// velocity zeroes.
pub fn step(world: &MazeWorld, state: &EnvState, action: [f32; 2], rng: &mut Rng) -> StepResult {
    let d = &world.dynamics;
    let t = state.t;
    let intervention_fired = world.door_toggles_at(t);

    let mut randomized = false;
    let mut a = action;
    if world.epsilon > 0.0 && rng.gen::<f32>() < world.epsilon {
        a = [
            rng.gen_range(-d.max_accel..=d.max_accel),
            rng.gen_range(-d.max_accel..=d.max_accel),
        ];
        randomized = true;
    }
    a[0] = a[0].clamp(-d.max_accel, d.max_accel);
    a[1] = a[1].clamp(-d.max_accel, d.max_accel);

    let mut vel = [
        (state.vel[0] + a[0] * d.dt) * (1.0 - d.damping),
        (state.vel[1] + a[1] * d.dt) * (1.0 - d.damping),
    ];
    let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
    if speed > d.max_speed {
        let s = d.max_speed / speed;
        vel[0] *= s;
        vel[1] *= s;
    }

    let p0 = state.pos;
    let p1 = [p0[0] + vel[0] * d.dt, p0[1] + vel[1] * d.dt];

    let mut collision = false;
    let pos = match world.segment_hit(t, p0, p1) {
        Some((s_hit, _cell)) => {
            collision = true;
            vel = [0.0, 0.0];
            let dx = (p1[0] - p0[0]) as f64;
            let dy = (p1[1] - p0[1]) as f64;
            let len = (dx * dx + dy * dy).sqrt();
            let s_back = if len > 0.0 {
                (s_hit - CONTACT_MARGIN / len).max(0.0)
            } else {
                0.0
            };
            [
                (p0[0] as f64 + s_back * dx) as f32,
                (p0[1] as f64 + s_back * dy) as f32,
            ]
        }
        None => p1,
    };

    let next = EnvState {
        pos,
        vel,
        t: t + 1,
    };
    let gd = [pos[0] - world.goal[0], pos[1] - world.goal[1]];
    let reward = if (gd[0] * gd[0] + gd[1] * gd[1]).sqrt() <= world.goal_radius {
        1
    } else {
        0
    };
    StepResult {
        state: next,
        reward,
        done: reward == 1 || next.t >= world.max_steps,
        collision,
        intervention_fired,
        randomized,
    }
}

/// Exact inverse of the deterministic velocity update: the acceleration that
/// moves position from `s` to `s_next`'s position in one step, clipped to
/// the accel box. Unreachable targets land on the box boundary.
pub fn inverse_dynamics(world: &MazeWorld, s: &[f32], s_next: &[f32]) -> [f32; 2] {
    let d = &world.dynamics;
    let v_target = [
        (s_next[0] - s[0]) / d.dt,
        (s_next[1] - s[1]) / d.dt,
    ];
    let a = [
        (v_target[0] / (1.0 - d.damping) - s[2]) / d.dt,
        (v_target[1] / (1.0 - d.damping) - s[3]) / d.dt,
    ];
    [
        a[0].clamp(-d.max_accel, d.max_accel),
        a[1].clamp(-d.max_accel, d.max_accel),
    ]
}

/// True iff every consecutive-state segment avoids walls and doors closed at
/// env step `at_step`; otherwise the index of the first violating segment.
pub fn collision_free(
    world: &MazeWorld,
    states: &[Vec<f32>],
    at_step: usize,
) -> (bool, Option<usize>) {
    for (i, pair) in states.windows(2).enumerate() {
        let p0 = [pair[0][0], pair[0][1]];
        let p1 = [pair[1][0], pair[1][1]];
        if world.segment_hit(at_step, p0, p1).is_some() {
            return (false, Some(i));
        }
    }
    (true, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn open_room() -> MazeWorld {
        MazeWorld::parse(
            "# # # # # #\n\
             # . . . . #\n\
             # . . . . #\n\
             # . S . G #\n\
             # . . . . #\n\
             # # # # # #\n\
             epsilon = 0.0\n",
        )
        .unwrap()
    }

    #[test]
    fn rest_state_is_fixed_point() {
        let world = open_room();
        let s = EnvState::at([2.5, 2.5]);
        let mut rng = rng::from_seed(0);
        let r = step(&world, &s, [0.0, 0.0], &mut rng);
        assert_eq!(r.state.pos, [2.5, 2.5]);
        assert_eq!(r.state.vel, [0.0, 0.0]);
        assert_eq!(r.state.t, 1);
        assert!(!r.collision);
    }

    #[test]
    fn head_on_wall_zeroes_velocity() {
        let world = open_room();
        // moving left into the border wall at x = 1
        let mut s = EnvState {
            pos: [1.05, 2.5],
            vel: [-1.4, 0.0],
            t: 0,
        };
        let mut rng = rng::from_seed(1);
        let mut hit = false;
        for _ in 0..4 {
            let r = step(&world, &s, [-1.0, 0.0], &mut rng);
            s = r.state;
            if r.collision {
                hit = true;
                assert_eq!(s.vel, [0.0, 0.0]);
                assert!(s.pos[0] >= 1.0, "clamped outside the wall");
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn epsilon_randomization_rate() {
        let mut world = open_room();
        world.epsilon = 0.03;
        let s = EnvState::at([2.5, 2.5]);
        let mut rng = rng::from_seed(2);
        let mut count = 0;
        for _ in 0..10_000 {
            let r = step(&world, &s, [0.0, 0.0], &mut rng);
            if r.randomized {
                count += 1;
            }
        }
        let frac = count as f64 / 10_000.0;
        assert!((0.02..=0.04).contains(&frac), "fraction = {frac}");
    }

    #[test]
    fn speed_never_exceeds_max() {
        let world = open_room();
        let mut s = EnvState::at([2.5, 2.5]);
        let mut rng = rng::from_seed(3);
        for i in 0..200 {
            let a = [(i % 3) as f32 - 1.0, ((i / 3) % 3) as f32 - 1.0];
            let r = step(&world, &s, a, &mut rng);
            s = r.state;
            let speed = (s.vel[0].powi(2) + s.vel[1].powi(2)).sqrt();
            assert!(speed <= world.dynamics.max_speed + 1e-5);
        }
    }

    #[test]
    fn inverse_dynamics_roundtrip() {
        let world = open_room();
        let mut rng = rng::from_seed(4);
        use rand::Rng as _;
        for _ in 0..100 {
            let s = EnvState {
                pos: [
                    rng.gen_range(1.5..4.5),
                    rng.gen_range(1.5..4.5),
                ],
                vel: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                t: 0,
            };
            // small accel, clearly inside the box after damping
            let a = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
            let r = step(&world, &s, a, &mut rng);
            if r.collision {
                continue;
            }
            let rec = inverse_dynamics(&world, &s.as_array(), &r.state.as_array());
            assert!((rec[0] - a[0]).abs() < 1e-4, "{} vs {}", rec[0], a[0]);
            assert!((rec[1] - a[1]).abs() < 1e-4);

            // and stepping the recovered action reproduces the target
            let r2 = step(&world, &s, rec, &mut rng);
            for d in 0..2 {
                assert!((r2.state.pos[d] - r.state.pos[d]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn drift_only_successor_needs_no_action() {
        let world = open_room();
        let s = EnvState {
            pos: [2.5, 2.5],
            vel: [0.4, -0.2],
            t: 0,
        };
        let d = &world.dynamics;
        let drift = [
            s.pos[0] + s.vel[0] * (1.0 - d.damping) * d.dt,
            s.pos[1] + s.vel[1] * (1.0 - d.damping) * d.dt,
        ];
        let next = [drift[0], drift[1], 0.0, 0.0];
        let a = inverse_dynamics(&world, &s.as_array(), &next);
        assert!(a[0].abs() < 1e-4 && a[1].abs() < 1e-4, "{a:?}");
    }

    #[test]
    fn unreachable_target_clips_to_box() {
        let world = open_room();
        let s = [2.5, 2.5, 0.0, 0.0];
        let next = [4.4, 2.5, 0.0, 0.0];
        let a = inverse_dynamics(&world, &s, &next);
        assert_eq!(a[0], world.dynamics.max_accel);
    }

    #[test]
    fn collision_free_flags_wall_crossing() {
        let world = MazeWorld::parse(
            "# # # # #\n\
             # . # . #\n\
             # . # . #\n\
             # . . . #\n\
             # # # # #\n",
        )
        .unwrap();
        let free = vec![vec![1.5, 3.5, 0.0, 0.0], vec![3.5, 3.5, 0.0, 0.0]];
        assert_eq!(collision_free(&world, &free, 0), (true, None));
        let blocked = vec![vec![1.5, 1.5, 0.0, 0.0], vec![3.5, 1.5, 0.0, 0.0]];
        let (ok, seg) = collision_free(&world, &blocked, 0);
        assert!(!ok);
        assert_eq!(seg, Some(0));
    }
}
