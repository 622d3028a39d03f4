//! Offline joint-trajectory datasets and their JSONL serialization.
//!
//! File layout: a metadata header line `{"env", "seed", "zeta", "version"}`
//! followed by one JSON object per episode with keys `obs` [T][I][dim],
//! `act` [T][I][dim or 1], `rew` [T][I], `term` [T]. UTF-8, LF endings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ActionSpace;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

/// One episode: per-timestep, per-agent observations, actions, rewards,
/// plus a terminal flag per timestep.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointTrajectory {
    pub obs: Vec<Vec<Vec<f64>>>,
    pub act: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub terminals: Vec<bool>,
}

impl JointTrajectory {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn agent_count(&self) -> usize {
        self.obs.first().map(|o| o.len()).unwrap_or(0)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let t = self.obs.len();
        if t == 0 {
            return Err(Error::Dataset(format!("episode {}: empty trajectory", index)));
        }
        if self.act.len() != t || self.rewards.len() != t || self.terminals.len() != t {
            return Err(Error::Dataset(format!(
                "episode {}: inconsistent lengths obs={} act={} rew={} term={}",
                index,
                t,
                self.act.len(),
                self.rewards.len(),
                self.terminals.len()
            )));
        }
        let agents = self.agent_count();
        for h in 0..t {
            if self.obs[h].len() != agents
                || self.act[h].len() != agents
                || self.rewards[h].len() != agents
            {
                return Err(Error::Dataset(format!(
                    "episode {}: timestep {} does not have {} agents",
                    index, h, agents
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub env: String,
    pub seed: u64,
    pub zeta: Option<f64>,
    pub version: u32,
}

/// Shapes needed to build networks for a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvDescriptor {
    pub obs_dims: Vec<usize>,
    pub space: ActionSpace,
}

impl EnvDescriptor {
    pub fn agent_count(&self) -> usize {
        self.obs_dims.len()
    }

    pub fn obs_total(&self) -> usize {
        self.obs_dims.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub descriptor: EnvDescriptor,
    episodes: Vec<JointTrajectory>,
}

impl OfflineDataset {
    pub fn new(
        meta: DatasetMeta,
        descriptor: EnvDescriptor,
        episodes: Vec<JointTrajectory>,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Dataset("dataset has no episodes".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            ep.validate(i)?;
            if ep.agent_count() != descriptor.agent_count() {
                return Err(Error::Dataset(format!(
                    "episode {}: {} agents, descriptor says {}",
                    i,
                    ep.agent_count(),
                    descriptor.agent_count()
                )));
            }
            for h in 0..ep.len() {
                for (agent, o) in ep.obs[h].iter().enumerate() {
                    if o.len() != descriptor.obs_dims[agent] {
                        return Err(Error::Dataset(format!(
                            "episode {}: agent {} obs dim {} != {}",
                            i,
                            agent,
                            o.len(),
                            descriptor.obs_dims[agent]
                        )));
                    }
                }
            }
        }
        Ok(OfflineDataset {
            meta,
            descriptor,
            episodes,
        })
    }

    pub fn episodes(&self) -> &[JointTrajectory] {
        &self.episodes
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    /// (episode, timestep) pairs for every transition.
    pub fn transition_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.transition_count());
        for (e, ep) in self.episodes.iter().enumerate() {
            for h in 0..ep.len() {
                out.push((e, h));
            }
        }
        out
    }

    /// Assemble a training batch from transition indices. Discrete actions
    /// are one-hot encoded into the joint action layout; the next
    /// observation of a final timestep repeats the current one (its
    /// bootstrap is masked by the terminal flag).
    pub fn gather(&self, indices: &[(usize, usize)]) -> Result<TransitionBatch> {
        let b = indices.len();
        if b == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        let obs_total = self.descriptor.obs_total();
        let act_total = self.descriptor.space.total_dim();
        let agents = self.descriptor.agent_count();
        let mut obs = Tensor::zeros(vec![b, obs_total]);
        let mut act = Tensor::zeros(vec![b, act_total]);
        let mut next_obs = Tensor::zeros(vec![b, obs_total]);
        let mut rewards = vec![vec![0.0; b]; agents];
        let mut terminals = vec![false; b];
        for (r, &(e, h)) in indices.iter().enumerate() {
            let ep = &self.episodes[e];
            let next_h = if h + 1 < ep.len() { h + 1 } else { h };
            let mut col = 0;
            for agent in 0..agents {
                let o = &ep.obs[h][agent];
                obs.data_mut()[r * obs_total + col..r * obs_total + col + o.len()]
                    .copy_from_slice(o);
                let o2 = &ep.obs[next_h][agent];
                next_obs.data_mut()[r * obs_total + col..r * obs_total + col + o2.len()]
                    .copy_from_slice(o2);
                col += o.len();
                rewards[agent][r] = ep.rewards[h][agent];
            }
            terminals[r] = ep.terminals[h];
            match &self.descriptor.space {
                ActionSpace::Continuous { .. } => {
                    let mut acol = 0;
                    for agent in 0..agents {
                        let a = &ep.act[h][agent];
                        act.data_mut()[r * act_total + acol..r * act_total + acol + a.len()]
                            .copy_from_slice(a);
                        acol += a.len();
                    }
                }
                ActionSpace::Discrete { cardinalities } => {
                    let mut acol = 0;
                    for agent in 0..agents {
                        let idx = ep.act[h][agent][0] as usize;
                        if idx >= cardinalities[agent] {
                            return Err(Error::Dataset(format!(
                                "episode {}: action index {} out of range {}",
                                e, idx, cardinalities[agent]
                            )));
                        }
                        act.data_mut()[r * act_total + acol + idx] = 1.0;
                        acol += cardinalities[agent];
                    }
                }
            }
        }
        Ok(TransitionBatch {
            obs,
            act,
            next_obs,
            rewards,
            terminals,
        })
    }

    /// Uniform minibatch with replacement.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        index: &[(usize, usize)],
        rng: &mut impl Rng,
    ) -> Result<TransitionBatch> {
        let picks: Vec<(usize, usize)> = (0..batch_size)
            .map(|_| index[rng.gen_range(0..index.len())])
            .collect();
        self.gather(&picks)
    }
}

/// Dense training view of a set of transitions.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    pub obs: Tensor,            // [b, obs_total]
    pub act: Tensor,            // [b, act_total], one-hot for discrete
    pub next_obs: Tensor,       // [b, obs_total]
    pub rewards: Vec<Vec<f64>>, // [agents][b]
    pub terminals: Vec<bool>,   // [b]
}

pub fn save_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    if dataset.episodes.is_empty() {
        return Err(Error::Dataset("refusing to save a dataset with no episodes".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &dataset.meta)?;
    w.write_all(b"\n")?;
    for ep in &dataset.episodes {
        let line = EpisodeLine {
            obs: &ep.obs,
            act: &ep.act,
            rew: &ep.rewards,
            term: &ep.terminals,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    obs: &'a Vec<Vec<Vec<f64>>>,
    act: &'a Vec<Vec<Vec<f64>>>,
    rew: &'a Vec<Vec<f64>>,
    term: &'a Vec<bool>,
}

#[derive(Deserialize)]
struct EpisodeLineOwned {
    obs: Vec<Vec<Vec<f64>>>,
    act: Vec<Vec<Vec<f64>>>,
    rew: Vec<Vec<f64>>,
    term: Vec<bool>,
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::DatasetParse {
                line: 1,
                msg: "missing metadata header".into(),
            })
        }
    };
    let meta: DatasetMeta = serde_json::from_str(&header).map_err(|e| Error::DatasetParse {
        line: 1,
        msg: e.to_string(),
    })?;
    if meta.version != DATASET_VERSION {
        return Err(Error::DatasetParse {
            line: 1,
            msg: format!("unsupported version {} (supported: {})", meta.version, DATASET_VERSION),
        });
    }
    let mut episodes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EpisodeLineOwned =
            serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let ep = JointTrajectory {
            obs: parsed.obs,
            act: parsed.act,
            rewards: parsed.rew,
            terminals: parsed.term,
        };
        ep.validate(episodes.len()).map_err(|e| Error::DatasetParse {
            line: line_no,
            msg: e.to_string(),
        })?;
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(Error::DatasetParse {
            line: 2,
            msg: "dataset has no episodes".into(),
        });
    }
    let descriptor = crate::env::descriptor_for(&meta.env, &episodes)?;
    OfflineDataset::new(meta, descriptor, episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> OfflineDataset {
        let ep = JointTrajectory {
            obs: vec![vec![vec![1.0, 0.5], vec![0.0, -0.5]]],
            act: vec![vec![vec![0.0], vec![1.0]]],
            rewards: vec![vec![0.5, 0.5]],
            terminals: vec![true],
        };
        OfflineDataset::new(
            DatasetMeta {
                env: "payoff".into(),
                seed: 1,
                zeta: Some(0.5),
                version: DATASET_VERSION,
            },
            EnvDescriptor {
                obs_dims: vec![2, 2],
                space: ActionSpace::Discrete { cardinalities: vec![2, 2] },
            },
            vec![ep],
        )
        .unwrap()
    }

    #[test]
    fn gather_one_hot_encodes_discrete_actions() {
        let d = tiny_dataset();
        let batch = d.gather(&[(0, 0)]).unwrap();
        assert_eq!(batch.act.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(batch.terminals, vec![true]);
        assert_eq!(batch.rewards[0][0], 0.5);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let ep = JointTrajectory {
            obs: vec![],
            act: vec![],
            rewards: vec![],
            terminals: vec![],
        };
        let r = OfflineDataset::new(
            DatasetMeta {
                env: "payoff".into(),
                seed: 1,
                zeta: None,
                version: DATASET_VERSION,
            },
            EnvDescriptor {
                obs_dims: vec![2, 2],
                space: ActionSpace::Discrete { cardinalities: vec![2, 2] },
            },
            vec![ep],
        );
        assert!(r.is_err());
    }
}
