//! Didactic environments and offline dataset generators: landmark covering,
//! the pure coordination and payoff matrix games, and the continuous
//! anti-aligned coordination task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::dataset::{DatasetMeta, EnvDescriptor, JointTrajectory, OfflineDataset, DATASET_VERSION};
use crate::error::{Error, Result};
use crate::flow::ActionSpace;
use crate::rng::{self, SeedStreams};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const ARENA_HALF_WIDTH: f64 = 1.0;
pub const LANDMARK_HORIZON: usize = 25;
pub const LANDMARK_STEP_CAP: f64 = 0.2;
/// Std of the scripted policy's action noise, scaled down near landmarks.
pub const LANDMARK_ACTION_NOISE: f64 = 0.05;

/// Which matrix game a spec describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameTag {
    PureCoordination,
    PayoffZeta,
    Xor,
}

/// Two-agent matrix/continuous coordination game.
///
/// The discrete games share the team reward table
/// (0,0) -> 0, (0,1) -> 1, (1,0) -> 1, (1,1) -> 2; recorded per-agent
/// rewards split the team reward evenly.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameSpec {
    pub tag: GameTag,
    pub zeta: Option<f64>,
}

impl MatrixGameSpec {
    pub fn team_reward(&self, a1: usize, a2: usize) -> f64 {
        match (a1, a2) {
            (0, 0) => 0.0,
            (1, 1) => 2.0,
            _ => 1.0,
        }
    }

    pub fn xor_team_reward(a1: f64, a2: f64) -> f64 {
        -(a1 + a2) * (a1 + a2)
    }
}

/// Constant per-agent observation for the stateless games: a 1.0 feature
/// plus a one-hot agent id, so unshared per-agent nets can specialize.
pub fn matrix_game_obs(agent: usize, agents: usize) -> Vec<f64> {
    let mut o = vec![1.0];
    for i in 0..agents {
        o.push(if i == agent { 1.0 } else { 0.0 });
    }
    o
}

/// N agents covering N landmarks on the [-1, 1]^2 plane. Landmarks are
/// fixed per seed; agents respawn uniformly each episode.
#[derive(Clone, Debug)]
pub struct LandmarkEnv {
    pub n: usize,
    pub landmarks: Vec<[f64; 2]>,
    pub horizon: usize,
    pub step_cap: f64,
}

impl LandmarkEnv {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("landmark env needs n >= 1".into()));
        }
        let mut r = SeedStreams::new(seed).stream(stream_ids::LANDMARK_LAYOUT);
        let landmarks = (0..n)
            .map(|_| {
                [
                    (rng::uniform(&mut r) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                    (rng::uniform(&mut r) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                ]
            })
            .collect();
        Ok(LandmarkEnv {
            n,
            landmarks,
            horizon: LANDMARK_HORIZON,
            step_cap: LANDMARK_STEP_CAP,
        })
    }

    pub fn obs_dim(&self) -> usize {
        2 + 2 * self.n
    }

    fn observe(&self, positions: &[[f64; 2]], agent: usize) -> Vec<f64> {
        let mut o = Vec::with_capacity(self.obs_dim());
        o.push(positions[agent][0]);
        o.push(positions[agent][1]);
        for lm in &self.landmarks {
            o.push(lm[0]);
            o.push(lm[1]);
        }
        o
    }
}

/// Per-agent rewards: the negative distance of each agent to its landmark
/// under the minimum-total-distance assignment (recomputed per call).
pub fn landmark_reward(agents: &[[f64; 2]], landmarks: &[[f64; 2]]) -> Result<Vec<f64>> {
    if agents.len() != landmarks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} agents vs {} landmarks",
            agents.len(),
            landmarks.len()
        )));
    }
    let n = agents.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = dist(agents[i], landmarks[j]);
        }
    }
    let (assign, _) = min_cost_assignment(&cost, n)?;
    Ok((0..n).map(|i| -cost[i * n + assign[i]]).collect())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// A didactic environment that can be reset and stepped for evaluation.
#[derive(Clone, Debug)]
pub enum DidacticEnv {
    Landmark(LandmarkEnv),
    Matrix(MatrixGameSpec),
}

/// Mutable rollout state.
pub struct EnvState {
    positions: Vec<[f64; 2]>,
    t: usize,
    obs: Vec<Vec<f64>>,
}

impl EnvState {
    pub fn joint_obs(&self) -> Vec<f64> {
        self.obs.iter().flatten().copied().collect()
    }

    pub fn per_agent_obs(&self) -> &[Vec<f64>] {
        &self.obs
    }
}

pub struct StepResult {
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl DidacticEnv {
    pub fn agent_count(&self) -> usize {
        match self {
            DidacticEnv::Landmark(env) => env.n,
            DidacticEnv::Matrix(_) => 2,
        }
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        match self {
            DidacticEnv::Landmark(env) => vec![env.obs_dim(); env.n],
            DidacticEnv::Matrix(_) => vec![3; 2],
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            DidacticEnv::Landmark(env) => ActionSpace::Continuous { dims: vec![2; env.n] },
            DidacticEnv::Matrix(spec) => match spec.tag {
                GameTag::Xor => ActionSpace::Continuous { dims: vec![1, 1] },
                _ => ActionSpace::Discrete { cardinalities: vec![2, 2] },
            },
        }
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            obs_dims: self.obs_dims(),
            space: self.action_space(),
        }
    }

    /// Canonical joint observation for per-observation diagnostics. For the
    /// landmark task this is the fully symmetric state with every agent at
    /// the arena center, where the landmark assignment is maximally
    /// ambiguous and inter-agent coordination carries all the signal.
    pub fn canonical_obs(&self) -> Vec<f64> {
        match self {
            DidacticEnv::Landmark(env) => {
                let positions = vec![[0.0, 0.0]; env.n];
                (0..env.n).flat_map(|i| env.observe(&positions, i)).collect()
            }
            DidacticEnv::Matrix(_) => (0..2).flat_map(|i| matrix_game_obs(i, 2)).collect(),
        }
    }

    pub fn reset(&self, rng: &mut impl Rng) -> Result<EnvState> {
        match self {
            DidacticEnv::Landmark(env) => {
                let positions: Vec<[f64; 2]> = (0..env.n)
                    .map(|_| {
                        [
                            (rng::uniform(rng) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                            (rng::uniform(rng) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                        ]
                    })
                    .collect();
                let obs = (0..env.n).map(|i| env.observe(&positions, i)).collect();
                Ok(EnvState {
                    positions,
                    t: 0,
                    obs,
                })
            }
            DidacticEnv::Matrix(_) => Ok(EnvState {
                positions: vec![],
                t: 0,
                obs: (0..2).map(|i| matrix_game_obs(i, 2)).collect(),
            }),
        }
    }

    /// Step with per-agent continuous action blocks, concatenated.
    pub fn step_continuous(&self, state: &mut EnvState, joint_action: &[f64]) -> Result<StepResult> {
        match self {
            DidacticEnv::Landmark(env) => {
                if joint_action.len() != 2 * env.n {
                    return Err(Error::shape(
                        format!("joint action dim {}", 2 * env.n),
                        format!("joint action dim {}", joint_action.len()),
                    ));
                }
                for i in 0..env.n {
                    let mut dx = joint_action[2 * i];
                    let mut dy = joint_action[2 * i + 1];
                    let norm = (dx * dx + dy * dy).sqrt();
                    if norm > env.step_cap {
                        dx *= env.step_cap / norm;
                        dy *= env.step_cap / norm;
                    }
                    state.positions[i][0] =
                        (state.positions[i][0] + dx).clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH);
                    state.positions[i][1] =
                        (state.positions[i][1] + dy).clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH);
                }
                let rewards = landmark_reward(&state.positions, &env.landmarks)?;
                state.t += 1;
                state.obs = (0..env.n).map(|i| env.observe(&state.positions, i)).collect();
                Ok(StepResult {
                    rewards,
                    done: state.t >= env.horizon,
                })
            }
            DidacticEnv::Matrix(spec) => match spec.tag {
                GameTag::Xor => {
                    if joint_action.len() != 2 {
                        return Err(Error::shape(
                            "joint action dim 2",
                            format!("joint action dim {}", joint_action.len()),
                        ));
                    }
                    let team = MatrixGameSpec::xor_team_reward(joint_action[0], joint_action[1]);
                    Ok(StepResult {
                        rewards: vec![team / 2.0, team / 2.0],
                        done: true,
                    })
                }
                _ => Err(Error::InvalidArgument(
                    "discrete matrix game stepped with continuous actions".into(),
                )),
            },
        }
    }

    /// Step with per-agent discrete action indices.
    pub fn step_discrete(&self, state: &mut EnvState, indices: &[usize]) -> Result<StepResult> {
        match self {
            DidacticEnv::Matrix(spec) if spec.tag != GameTag::Xor => {
                if indices.len() != 2 {
                    return Err(Error::shape(
                        "2 agent actions",
                        format!("{}", indices.len()),
                    ));
                }
                let team = spec.team_reward(indices[0], indices[1]);
                state.t += 1;
                Ok(StepResult {
                    rewards: vec![team / 2.0, team / 2.0],
                    done: true,
                })
            }
            _ => Err(Error::InvalidArgument(
                "environment does not take discrete actions".into(),
            )),
        }
    }
}

/// Map a dataset's env tag plus its recorded shapes back to a descriptor.
pub fn descriptor_for(env: &str, episodes: &[JointTrajectory]) -> Result<EnvDescriptor> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Dataset("no episodes".into()))?;
    let agents = first.agent_count();
    let obs_dims: Vec<usize> = first.obs[0].iter().map(|o| o.len()).collect();
    let space = match env {
        "landmark" => ActionSpace::Continuous { dims: vec![2; agents] },
        "pure_coordination" | "payoff" => ActionSpace::Discrete { cardinalities: vec![2; agents] },
        "xor" => ActionSpace::Continuous { dims: vec![1; agents] },
        other => {
            return Err(Error::Dataset(format!("unknown env tag {:?}", other)));
        }
    };
    Ok(EnvDescriptor { obs_dims, space })
}

mod stream_ids {
    pub const LANDMARK_LAYOUT: u64 = 90_000;
    pub const EPISODE_BASE: u64 = 100_000;
}

fn episodes_in_parallel<F>(count: usize, f: F) -> Vec<JointTrajectory>
where
    F: Fn(usize) -> JointTrajectory + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !crate::exec::sequential() {
            return (0..count).into_par_iter().map(f).collect();
        }
    }
    (0..count).map(f).collect()
}

/// Scripted near-expert landmark data: every agent walks toward its
/// currently assigned landmark with capped step length and position noise
/// that fades out near the landmark.
pub fn gen_landmark_dataset(n: usize, episodes: usize, seed: u64) -> Result<OfflineDataset> {
    let env = LandmarkEnv::new(n, seed)?;
    let streams = SeedStreams::new(seed);
    let env_ref = &env;
    let eps = episodes_in_parallel(episodes, move |e| {
        let mut r = streams.stream(stream_ids::EPISODE_BASE + e as u64);
        let mut positions: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    (rng::uniform(&mut r) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                    (rng::uniform(&mut r) * 2.0 - 1.0) * ARENA_HALF_WIDTH,
                ]
            })
            .collect();
        let mut obs = Vec::with_capacity(env_ref.horizon);
        let mut act = Vec::with_capacity(env_ref.horizon);
        let mut rewards = Vec::with_capacity(env_ref.horizon);
        let mut terminals = Vec::with_capacity(env_ref.horizon);
        for h in 0..env_ref.horizon {
            obs.push(
                (0..n)
                    .map(|i| env_ref.observe(&positions, i))
                    .collect::<Vec<_>>(),
            );
            // assignment recomputed every step
            let mut cost = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    cost[i * n + j] = dist(positions[i], env_ref.landmarks[j]);
                }
            }
            let (assign, _) = min_cost_assignment(&cost, n).expect("square assignment");
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let target = env_ref.landmarks[assign[i]];
                let d = cost[i * n + assign[i]];
                let (mut ax, mut ay) = if d > 1e-12 {
                    let scale = d.min(env_ref.step_cap) / d;
                    (
                        (target[0] - positions[i][0]) * scale,
                        (target[1] - positions[i][1]) * scale,
                    )
                } else {
                    (0.0, 0.0)
                };
                // noise fades near the landmark so trajectories contract
                let fade = (d / (2.0 * LANDMARK_ACTION_NOISE)).min(1.0);
                ax += rng::normal(&mut r) * LANDMARK_ACTION_NOISE * fade;
                ay += rng::normal(&mut r) * LANDMARK_ACTION_NOISE * fade;
                let norm = (ax * ax + ay * ay).sqrt();
                if norm > env_ref.step_cap {
                    ax *= env_ref.step_cap / norm;
                    ay *= env_ref.step_cap / norm;
                }
                actions.push(vec![ax, ay]);
                positions[i][0] = (positions[i][0] + ax).clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH);
                positions[i][1] = (positions[i][1] + ay).clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH);
            }
            act.push(actions);
            rewards.push(landmark_reward(&positions, &env_ref.landmarks).expect("reward"));
            terminals.push(h + 1 == env_ref.horizon);
        }
        JointTrajectory {
            obs,
            act,
            rewards,
            terminals,
        }
    });
    OfflineDataset::new(
        DatasetMeta {
            env: "landmark".into(),
            seed,
            zeta: None,
            version: DATASET_VERSION,
        },
        DidacticEnv::Landmark(env).descriptor(),
        eps,
    )
}

fn one_step_discrete_episode(a1: usize, a2: usize, spec: &MatrixGameSpec) -> JointTrajectory {
    let team = spec.team_reward(a1, a2);
    JointTrajectory {
        obs: vec![vec![matrix_game_obs(0, 2), matrix_game_obs(1, 2)]],
        act: vec![vec![vec![a1 as f64], vec![a2 as f64]]],
        rewards: vec![vec![team / 2.0, team / 2.0]],
        terminals: vec![true],
    }
}

/// Mixture of diagonal and off-diagonal joint actions with weight `zeta` on
/// the diagonal pair.
pub fn gen_payoff_dataset(zeta: f64, samples: usize, seed: u64) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::InvalidArgument(format!("zeta must lie in [0, 1], got {}", zeta)));
    }
    let spec = MatrixGameSpec {
        tag: GameTag::PayoffZeta,
        zeta: Some(zeta),
    };
    let streams = SeedStreams::new(seed);
    let spec_ref = &spec;
    let eps = episodes_in_parallel(samples, move |e| {
        let mut r = streams.stream(stream_ids::EPISODE_BASE + e as u64);
        let diagonal = rng::uniform(&mut r) < zeta;
        let flip = rng::uniform(&mut r) < 0.5;
        let (a1, a2) = if diagonal {
            if flip {
                (0, 0)
            } else {
                (1, 1)
            }
        } else if flip {
            (0, 1)
        } else {
            (1, 0)
        };
        one_step_discrete_episode(a1, a2, spec_ref)
    });
    OfflineDataset::new(
        DatasetMeta {
            env: "payoff".into(),
            seed,
            zeta: Some(zeta),
            version: DATASET_VERSION,
        },
        DidacticEnv::Matrix(spec).descriptor(),
        eps,
    )
}

/// Mostly the two asymmetric modes (0,1) and (1,0); the coordinated (1,1)
/// and (0,0) each appear with probability epsilon_rare / 2.
pub fn gen_pure_coordination_dataset(
    samples: usize,
    epsilon_rare: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if !(0.0..0.5).contains(&epsilon_rare) || epsilon_rare == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon_rare must lie in (0, 0.5), got {}",
            epsilon_rare
        )));
    }
    let spec = MatrixGameSpec {
        tag: GameTag::PureCoordination,
        zeta: None,
    };
    let streams = SeedStreams::new(seed);
    let spec_ref = &spec;
    let eps = episodes_in_parallel(samples, move |e| {
        let mut r = streams.stream(stream_ids::EPISODE_BASE + e as u64);
        let rare = rng::uniform(&mut r) < epsilon_rare;
        let flip = rng::uniform(&mut r) < 0.5;
        let (a1, a2) = if rare {
            if flip {
                (1, 1)
            } else {
                (0, 0)
            }
        } else if flip {
            (0, 1)
        } else {
            (1, 0)
        };
        one_step_discrete_episode(a1, a2, spec_ref)
    });
    OfflineDataset::new(
        DatasetMeta {
            env: "pure_coordination".into(),
            seed,
            zeta: None,
            version: DATASET_VERSION,
        },
        DidacticEnv::Matrix(spec).descriptor(),
        eps,
    )
}

/// Two anti-aligned continuous modes at (-1, +1) and (+1, -1) with isotropic
/// scatter `mode_std`; the team reward -(a1 + a2)^2 is maximized exactly on
/// the anti-aligned set.
pub fn gen_xor_dataset(samples: usize, mode_std: f64, seed: u64) -> Result<OfflineDataset> {
    if mode_std <= 0.0 {
        return Err(Error::InvalidArgument(format!("mode_std must be > 0, got {}", mode_std)));
    }
    let spec = MatrixGameSpec {
        tag: GameTag::Xor,
        zeta: None,
    };
    let streams = SeedStreams::new(seed);
    let eps = episodes_in_parallel(samples, move |e| {
        let mut r = streams.stream(stream_ids::EPISODE_BASE + e as u64);
        let first_mode = rng::uniform(&mut r) < 0.5;
        let (c1, c2) = if first_mode { (-1.0, 1.0) } else { (1.0, -1.0) };
        let a1 = c1 + rng::normal(&mut r) * mode_std;
        let a2 = c2 + rng::normal(&mut r) * mode_std;
        let team = MatrixGameSpec::xor_team_reward(a1, a2);
        JointTrajectory {
            obs: vec![vec![matrix_game_obs(0, 2), matrix_game_obs(1, 2)]],
            act: vec![vec![vec![a1], vec![a2]]],
            rewards: vec![vec![team / 2.0, team / 2.0]],
            terminals: vec![true],
        }
    });
    OfflineDataset::new(
        DatasetMeta {
            env: "xor".into(),
            seed,
            zeta: None,
            version: DATASET_VERSION,
        },
        DidacticEnv::Matrix(spec).descriptor(),
        eps,
    )
}

/// Distance of each agent to its optimally assigned landmark.
pub fn assigned_distances(positions: &[[f64; 2]], landmarks: &[[f64; 2]]) -> Result<Vec<f64>> {
    Ok(landmark_reward(positions, landmarks)?
        .into_iter()
        .map(|r| -r)
        .collect())
}

/// Convenience: positions of all agents recorded in an episode's first/last
/// observations (own position is the leading pair of each agent's obs).
pub fn episode_positions(ep: &JointTrajectory, t: usize) -> Vec<[f64; 2]> {
    ep.obs[t]
        .iter()
        .map(|o| [o[0], o[1]])
        .collect()
}

/// Joint-action frequencies of a discrete two-agent dataset as a 2x2 table.
pub fn joint_action_table(dataset: &OfflineDataset) -> Result<[[f64; 2]; 2]> {
    let mut table = [[0.0; 2]; 2];
    let mut count = 0.0;
    for ep in dataset.episodes() {
        for h in 0..ep.len() {
            let a1 = ep.act[h][0][0] as usize;
            let a2 = ep.act[h][1][0] as usize;
            if a1 > 1 || a2 > 1 {
                return Err(Error::Dataset("joint_action_table expects binary actions".into()));
            }
            table[a1][a2] += 1.0;
            count += 1.0;
        }
    }
    for row in table.iter_mut() {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    Ok(table)
}

/// Sample mean of a tensor column.
pub fn column_mean(t: &Tensor, col: usize) -> f64 {
    (0..t.rows()).map(|r| t.row(r)[col]).sum::<f64>() / t.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_zero_when_agents_sit_on_landmarks() {
        let lms = vec![[0.0, 0.0], [0.5, 0.5], [-0.5, 0.3]];
        let r = landmark_reward(&lms, &lms).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn reward_is_negative_distance() {
        let r = landmark_reward(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap();
        assert!((r[0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_swaps_when_cheaper() {
        // agents at (0,0),(1,0); landmarks at (1,0),(0,0): the swap
        // assignment has cost 0; identity would cost 2.
        let r = landmark_reward(&[[0.0, 0.0], [1.0, 0.0]], &[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn reward_count_mismatch_is_error() {
        assert!(landmark_reward(&[[0.0, 0.0]], &[[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn landmark_total_matches_bruteforce_for_small_n() {
        let mut st = SeedStreams::new(44).stream(0);
        for n in 1..=6 {
            let agents: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng::uniform(&mut st) * 2.0 - 1.0, rng::uniform(&mut st) * 2.0 - 1.0])
                .collect();
            let lms: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng::uniform(&mut st) * 2.0 - 1.0, rng::uniform(&mut st) * 2.0 - 1.0])
                .collect();
            let total: f64 = landmark_reward(&agents, &lms).unwrap().iter().sum();
            // brute force over permutations
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute_all(&mut perm, 0, &mut |p: &[usize]| {
                let c: f64 = (0..n).map(|i| dist(agents[i], lms[p[i]])).sum();
                if c < best {
                    best = c;
                }
            });
            assert!((-total - best).abs() < 1e-12, "n={}", n);
        }
    }

    fn permute_all(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute_all(perm, k + 1, f);
            perm.swap(k, i);
        }
    }

    #[test]
    fn landmark_reward_permutation_invariance() {
        let agents = [[0.1, 0.2], [0.5, -0.5], [-0.8, 0.3]];
        let lms = [[0.0, 0.0], [1.0, 1.0], [-1.0, 0.0]];
        let base = landmark_reward(&agents, &lms).unwrap();
        // permuting landmarks leaves rewards unchanged
        let lms_perm = [lms[2], lms[0], lms[1]];
        let r2 = landmark_reward(&agents, &lms_perm).unwrap();
        for (a, b) in base.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-12);
        }
        // permuting agents permutes rewards with them
        let agents_perm = [agents[1], agents[2], agents[0]];
        let r3 = landmark_reward(&agents_perm, &lms).unwrap();
        assert!((r3[0] - base[1]).abs() < 1e-12);
        assert!((r3[1] - base[2]).abs() < 1e-12);
        assert!((r3[2] - base[0]).abs() < 1e-12);
    }

    #[test]
    fn landmark_dataset_shapes_and_contraction() {
        let d = gen_landmark_dataset(3, 50, 7).unwrap();
        assert_eq!(d.episodes().len(), 50);
        assert_eq!(d.descriptor.obs_dims, vec![8, 8, 8]);
        let env = LandmarkEnv::new(3, 7).unwrap();
        for ep in d.episodes() {
            let first = episode_positions(ep, 0);
            let mut last = episode_positions(ep, ep.len() - 1);
            // advance last obs positions by the final action to get the
            // true final position
            for i in 0..3 {
                last[i][0] += ep.act[ep.len() - 1][i][0];
                last[i][1] += ep.act[ep.len() - 1][i][1];
            }
            let d0 = assigned_distances(&first, &env.landmarks).unwrap();
            let d1 = assigned_distances(&last, &env.landmarks).unwrap();
            let s0: f64 = d0.iter().sum();
            let s1: f64 = d1.iter().sum();
            assert!(s1 <= s0 + 1e-9, "sum {} -> {}", s0, s1);
        }
    }

    #[test]
    fn landmark_generation_is_reproducible() {
        let a = gen_landmark_dataset(2, 5, 11).unwrap();
        let b = gen_landmark_dataset(2, 5, 11).unwrap();
        assert_eq!(a.episodes(), b.episodes());
    }

    #[test]
    fn payoff_extremes() {
        let d1 = gen_payoff_dataset(1.0, 500, 3).unwrap();
        for ep in d1.episodes() {
            let (a1, a2) = (ep.act[0][0][0] as usize, ep.act[0][1][0] as usize);
            assert_eq!(a1, a2);
        }
        let d0 = gen_payoff_dataset(0.0, 500, 3).unwrap();
        for ep in d0.episodes() {
            let (a1, a2) = (ep.act[0][0][0] as usize, ep.act[0][1][0] as usize);
            assert_ne!(a1, a2);
        }
    }

    #[test]
    fn payoff_mean_team_reward_is_one() {
        for zeta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let d = gen_payoff_dataset(zeta, 4000, 5).unwrap();
            let mean: f64 = d
                .episodes()
                .iter()
                .map(|ep| ep.rewards[0].iter().sum::<f64>())
                .sum::<f64>()
                / d.episodes().len() as f64;
            // binomial tolerance: sd of team reward <= 1, 3 sigma over 4000
            assert!((mean - 1.0).abs() < 3.0 / (4000f64).sqrt(), "zeta {} mean {}", zeta, mean);
        }
    }

    #[test]
    fn pure_coordination_mode_frequencies_and_rewards() {
        let d = gen_pure_coordination_dataset(10_000, 0.1, 9).unwrap();
        let table = joint_action_table(&d).unwrap();
        assert!((table[1][1] - 0.05).abs() < 0.01, "{}", table[1][1]);
        assert!((table[0][0] - 0.05).abs() < 0.01);
        assert!((table[0][1] - 0.45).abs() < 0.02);
        for ep in d.episodes() {
            let (a1, a2) = (ep.act[0][0][0] as usize, ep.act[0][1][0] as usize);
            let team: f64 = ep.rewards[0].iter().sum();
            match (a1, a2) {
                (1, 1) => assert_eq!(team, 2.0),
                (0, 0) => assert_eq!(team, 0.0),
                _ => assert_eq!(team, 1.0),
            }
        }
    }

    #[test]
    fn xor_dataset_reward_and_anticorrelation() {
        // exact mode centers give reward 0; (1,1) gives -4
        assert_eq!(MatrixGameSpec::xor_team_reward(-1.0, 1.0), 0.0);
        assert_eq!(MatrixGameSpec::xor_team_reward(1.0, 1.0), -4.0);

        let d = gen_xor_dataset(10_000, 0.1, 13).unwrap();
        let xs: Vec<f64> = d.episodes().iter().map(|e| e.act[0][0][0]).collect();
        let ys: Vec<f64> = d.episodes().iter().map(|e| e.act[0][1][0]).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr <= -0.9, "corr {}", corr);
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = gen_payoff_dataset(0.5, 20, 17).unwrap();
        crate::dataset::save_dataset(&d, &path).unwrap();
        let loaded = crate::dataset::load_dataset(&path).unwrap();
        assert_eq!(loaded.meta, d.meta);
        assert_eq!(loaded.episodes(), d.episodes());
        assert_eq!(loaded.descriptor, d.descriptor);
    }

    #[test]
    fn truncated_dataset_file_names_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = gen_payoff_dataset(0.5, 5, 17).unwrap();
        crate::dataset::save_dataset(&d, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let broken = &lines[3][..lines[3].len() / 2];
        lines[3] = broken;
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = crate::dataset::load_dataset(&path).unwrap_err();
        match err {
            Error::DatasetParse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn large_landmark_generation_contracts() {
        let d = gen_landmark_dataset(40, 5, 23).unwrap();
        let env = LandmarkEnv::new(40, 23).unwrap();
        for ep in d.episodes() {
            let first = episode_positions(ep, 0);
            let last = episode_positions(ep, ep.len() - 1);
            let d0 = assigned_distances(&first, &env.landmarks).unwrap();
            let d1 = assigned_distances(&last, &env.landmarks).unwrap();
            for (a, b) in d0.iter().zip(&d1) {
                assert!(b <= &(a + 0.15), "per-agent distance grew: {} -> {}", a, b);
            }
        }
    }
}
