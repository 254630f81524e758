use crate::rng::RngState;

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const EPISODE_LEN: usize = 200;
pub const POS_LIMIT: f64 = 2.0;

/// Point mass pushed toward a goal. State is `[p, v, goal]`.
#[derive(Debug, Clone)]
pub struct PointReach {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub t: usize,
    rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: [f64; STATE_DIM],
    pub reward: f64,
    pub done: bool,
}

impl PointReach {
    pub fn new(rng: RngState) -> Self {
        let mut env = PointReach {
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            rng,
        };
        env.reset();
        env
    }

    /// Fixed configuration, mostly for tests.
    pub fn with_state(pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) -> Self {
        PointReach {
            pos,
            vel,
            goal,
            t: 0,
            rng: RngState::new(0, 0),
        }
    }

    /// Starts a new episode at the origin with a fresh goal in `[-1, 1]^2`.
    pub fn reset(&mut self) -> [f64; STATE_DIM] {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.goal = [self.rng.uniform(-1.0, 1.0), self.rng.uniform(-1.0, 1.0)];
        self.t = 0;
        self.state()
    }

    pub fn state(&self) -> [f64; STATE_DIM] {
        [
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    pub fn step(&mut self, action: &[f64]) -> Step {
        for k in 0..2 {
            let a = action[k].clamp(-1.0, 1.0);
            self.vel[k] = 0.9 * self.vel[k] + 0.1 * a;
            self.pos[k] = (self.pos[k] + self.vel[k]).clamp(-POS_LIMIT, POS_LIMIT);
        }
        self.t += 1;
        let dx = self.pos[0] - self.goal[0];
        let dy = self.pos[1] - self.goal[1];
        Step {
            state: self.state(),
            reward: -dx.hypot(dy),
            done: self.t == EPISODE_LEN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point() {
        let mut e = PointReach::with_state([0.3, -0.2], [0.0, 0.0], [0.3, -0.2]);
        let s = e.step(&[0.0, 0.0]);
        assert_eq!(s.reward, 0.0);
        assert_eq!(s.state, [0.3, -0.2, 0.0, 0.0, 0.3, -0.2]);
    }

    #[test]
    fn distance_reward() {
        let mut e = PointReach::with_state([1.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
        assert_eq!(e.step(&[0.0, 0.0]).reward, -1.0);
    }

    #[test]
    fn dynamics_by_hand() {
        let mut e = PointReach::with_state([0.0, 0.0], [1.0, 0.0], [0.0, 0.0]);
        let s = e.step(&[0.0, 0.0]);
        assert_eq!(&s.state[..4], &[0.9, 0.0, 0.9, 0.0]);
    }

    #[test]
    fn episode_and_bounds() {
        let mut e = PointReach::new(RngState::new(3, 6));
        assert!(e.goal.iter().all(|g| (-1.0..1.0).contains(g)));
        for t in 1..=EPISODE_LEN {
            let s = e.step(&[5.0, -5.0]);
            assert!(s.reward <= 0.0);
            assert!(s.state[..2].iter().all(|p| p.abs() <= POS_LIMIT));
            assert_eq!(s.done, t == EPISODE_LEN);
        }
    }
}
