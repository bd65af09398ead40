//! Deep Q-network over tinted states, TD(0) targets, epsilon-greedy behaviour,
//! FIFO replay memory and the training / prediction loops.

use std::collections::VecDeque;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{reward, Action, EnvState, Environment};
use crate::nn::{mse_loss, LayerSpec, Matrix, Network, OptimizerKind, OptimizerState, Scalar, Tensor4};
use crate::{rng_from_seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    SgdMomentum,
}

/// What the scheduled epsilon is the probability of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMeaning {
    /// Probability of a random action.
    #[default]
    Explore,
    /// Probability of the greedy action.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_initial: f64,
    pub epsilon_decrement: f64,
    pub epsilon_min: f64,
    pub epsilon_meaning: EpsilonMeaning,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerChoice,
    /// Only used with `sgd_momentum`.
    pub momentum: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub replay_capacity: usize,
    pub conv_channels: [usize; 4],
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_initial: 0.7,
            epsilon_decrement: 1e-4,
            epsilon_min: 1e-4,
            epsilon_meaning: EpsilonMeaning::Explore,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            episodes: 300,
            horizon: 5,
            replay_capacity: 1800,
            conv_channels: [16, 32, 32, 32],
            hidden_units: 256,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0 <= self.epsilon_min && self.epsilon_min <= self.epsilon_initial && self.epsilon_initial <= 1.0) {
            return bad("need 0 <= epsilon_min <= epsilon_initial <= 1");
        }
        if self.epsilon_decrement < 0.0 {
            return bad("epsilon_decrement must be non-negative");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("batch_size must be positive and no larger than replay_capacity");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.conv_channels.contains(&0) || self.hidden_units == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(self.learning_rate),
            OptimizerChoice::SgdMomentum => OptimizerKind::sgd_momentum(self.learning_rate, self.momentum),
        }
    }
}

/// Layer list: four stride-2 3x3 convolutions with ELU, flatten, a hidden
/// fully connected layer with ELU and a two-node output.
pub fn dqn_specs(conv_channels: [usize; 4], hidden_units: usize, height: usize, width: usize) -> Result<Vec<LayerSpec>> {
    let mut specs = Vec::new();
    let mut shape = [1, 3, height, width];
    let mut in_channels = 3;
    for &out_channels in &conv_channels {
        let conv = LayerSpec::Conv2d { in_channels, out_channels, kernel: 3, stride: 2, padding: 1 };
        shape = conv.output_shape(shape)?;
        specs.push(conv);
        specs.push(LayerSpec::Elu);
        in_channels = out_channels;
    }
    specs.push(LayerSpec::Flatten);
    let features = shape[1] * shape[2] * shape[3];
    specs.push(LayerSpec::Linear { in_features: features, out_features: hidden_units });
    specs.push(LayerSpec::Elu);
    specs.push(LayerSpec::Linear { in_features: hidden_units, out_features: 2 });
    Ok(specs)
}

pub fn build_dqn<T: Scalar>(config: &AgentConfig, height: usize, width: usize) -> Result<Network<T>> {
    let specs = dqn_specs(config.conv_channels, config.hidden_units, height, width)?;
    Network::build(&specs, [1, 3, height, width], &mut rng_from_seed(config.seed))
}

/// TD(0) target `r + gamma * max(q_next)`.
pub fn bellman_target(r: f64, q_next: [f64; 2], gamma: f64) -> f64 {
    r + gamma * q_next[0].max(q_next[1])
}

/// Greedy action; ties go to `Inside`.
pub fn greedy_action(q: [f64; 2]) -> Action {
    if q[1] > q[0] {
        Action::Outside
    } else {
        Action::Inside
    }
}

/// With probability `epsilon` a uniformly random action, otherwise greedy.
pub fn select_action<R: Rng + ?Sized>(q: [f64; 2], epsilon: f64, rng: &mut R) -> Action {
    if rng.gen::<f64>() < epsilon {
        if rng.gen::<bool>() {
            Action::Inside
        } else {
            Action::Outside
        }
    } else {
        greedy_action(q)
    }
}

/// Exact selection probabilities of [`select_action`], indexed by action.
pub fn action_probabilities(q: [f64; 2], epsilon: f64) -> [f64; 2] {
    let mut p = [epsilon / 2.0; 2];
    p[greedy_action(q).index()] += 1.0 - epsilon;
    p
}

pub fn epsilon_at(episode: usize, config: &AgentConfig) -> f64 {
    (config.epsilon_initial - episode as f64 * config.epsilon_decrement).max(config.epsilon_min)
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Arc<Tensor4<f32>>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Arc<Tensor4<f32>>,
}

/// Bounded FIFO memory; the oldest row is evicted first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    rows: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { rows: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: T) {
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.rows.iter()
    }

    /// `n` distinct rows drawn uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.rows.len() < n {
            return Err(Error::NotReady { have: self.rows.len(), need: n });
        }
        Ok(index::sample(rng, self.rows.len(), n).into_iter().map(|i| &self.rows[i]).collect())
    }
}

/// Q values for a batch of states, one `[q1, q2]` per row.
pub fn q_values(net: &mut Network<f32>, states: &[&Tensor4<f32>]) -> Result<Vec<[f64; 2]>> {
    let out = Matrix::from_tensor(net.infer(&Tensor4::stack(states)?)?);
    Ok((0..out.rows).map(|r| [out.get(r, 0).as_f64(), out.get(r, 1).as_f64()]).collect())
}

/// Greedy action and raw Q values for one state.
pub fn predict(net: &mut Network<f32>, state: &Tensor4<f32>) -> Result<(Action, [f64; 2])> {
    let q = q_values(net, &[state])?[0];
    Ok((greedy_action(q), q))
}

/// Fraction of environments whose initial state gets a rewarded greedy action.
pub fn greedy_accuracy(net: &mut Network<f32>, envs: &[Environment]) -> Result<f64> {
    if envs.is_empty() {
        return Ok(0.0);
    }
    let starts: Vec<EnvState> = envs.iter().map(Environment::reset).collect();
    let mut correct = 0usize;
    for (chunk_envs, chunk) in envs.chunks(16).zip(starts.chunks(16)) {
        let tensors: Vec<&Tensor4<f32>> = chunk.iter().map(|s| s.tensor.as_ref()).collect();
        for (env, q) in chunk_envs.iter().zip(q_values(net, &tensors)?) {
            if reward(greedy_action(q), &env.pair) > 0.0 {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / envs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub train_greedy_accuracy: f64,
    pub test_greedy_accuracy: Option<f64>,
    /// Mean loss over the episode's gradient steps (none while the buffer fills).
    pub loss: Option<f64>,
    pub gradient_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.episodes {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// `(episode, accuracy)` points of the held-out curve.
    pub fn test_curve(&self) -> Vec<(usize, f64)> {
        self.episodes.iter().filter_map(|e| e.test_greedy_accuracy.map(|a| (e.episode, a))).collect()
    }
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub log: TrainLog,
    pub replay_rows: usize,
}

/// One gradient step on the masked MSE between `Q(s)[a]` and the TD target.
fn learn(net: &mut Network<f32>, opt: &mut OptimizerState<f32>, batch: &[&Transition], gamma: f64) -> Result<f64> {
    let next: Vec<&Tensor4<f32>> = batch.iter().map(|t| t.next_state.as_ref()).collect();
    let q_next = q_values(net, &next)?;
    let states: Vec<&Tensor4<f32>> = batch.iter().map(|t| t.state.as_ref()).collect();
    let pred = Matrix::from_tensor(net.forward(&Tensor4::stack(&states)?)?);
    let mut target = Matrix::zeros(batch.len(), 2);
    let mut selected = vec![false; batch.len() * 2];
    for (i, (t, qn)) in batch.iter().zip(&q_next).enumerate() {
        let col = t.action.index();
        target.data[i * 2 + col] = bellman_target(t.reward, *qn, gamma) as f32;
        selected[i * 2 + col] = true;
    }
    let (loss, grad) = mse_loss(&pred, &target, Some(&selected))?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("DQN loss {loss} with predictions {:?}", pred.data)));
    }
    net.zero_grad();
    net.backward(grad.into_tensor())?;
    opt.step(&mut net.params_mut())?;
    Ok(loss)
}

/// Train from the initial network of [`build_dqn`]. `test` environments only
/// feed the logged held-out accuracy.
pub fn train(train_envs: &[Environment], test_envs: &[Environment], config: &AgentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_envs.first().ok_or_else(|| Error::InvalidArgument("no training pairs".into()))?;
    let (h, w) = (first.pair.mask.height(), first.pair.mask.width());
    let mut net = build_dqn::<f32>(config, h, w)?;
    let mut opt = OptimizerState::new(config.optimizer_kind())?;
    let mut rng = rng_from_seed(config.seed ^ 0x5eed_d00d);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut log = TrainLog::default();

    for episode in 0..config.episodes {
        let epsilon = epsilon_at(episode, config);
        let explore = match config.epsilon_meaning {
            EpsilonMeaning::Explore => epsilon,
            EpsilonMeaning::Greedy => 1.0 - epsilon,
        };
        let env = &train_envs[rng.gen_range(0..train_envs.len())];
        let mut state = env.reset();
        let (mut reward_sum, mut loss_sum, mut steps) = (0.0, 0.0, 0usize);
        for _ in 0..config.horizon {
            let (_, q) = predict(&mut net, &state.tensor)?;
            let action = select_action(q, explore, &mut rng);
            let (next, r) = env.step(&state, action)?;
            reward_sum += r;
            buffer.push(Transition {
                state: Arc::clone(&state.tensor),
                action,
                reward: r,
                next_state: Arc::clone(&next.tensor),
            });
            if buffer.len() >= config.batch_size {
                let batch = buffer.sample(config.batch_size, &mut rng)?;
                loss_sum += learn(&mut net, &mut opt, &batch, config.gamma)?;
                steps += 1;
            }
            state = next;
        }
        let train_acc = greedy_accuracy(&mut net, train_envs)?;
        let test_acc = if test_envs.is_empty() { None } else { Some(greedy_accuracy(&mut net, test_envs)?) };
        let row = EpisodeLog {
            episode,
            epsilon,
            mean_reward: reward_sum / config.horizon as f64,
            train_greedy_accuracy: train_acc,
            test_greedy_accuracy: test_acc,
            loss: (steps > 0).then(|| loss_sum / steps as f64),
            gradient_steps: steps,
        };
        debug!("episode {episode}: {row:?}");
        log.episodes.push(row);
    }
    if let Some(last) = log.episodes.last() {
        info!(
            "DQN finished {} episodes: train accuracy {:.2}, test accuracy {:?}",
            config.episodes, last.train_greedy_accuracy, last.test_greedy_accuracy
        );
    }
    Ok(TrainOutcome { network: net, log, replay_rows: buffer.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::build_mask_pair;
    use crate::env::EnvConfig;
    use crate::imaging::{ImageRecord, LabelMap};
    use image::RgbImage;

    #[test]
    fn layer_arithmetic_at_working_size() {
        let specs = dqn_specs([16, 32, 32, 32], 256, 240, 240).unwrap();
        let mut shape = [1, 3, 240, 240];
        let mut spatial = vec![240];
        for s in &specs {
            shape = s.output_shape(shape).unwrap();
            if let LayerSpec::Conv2d { .. } = s {
                spatial.push(shape[2]);
            }
        }
        assert_eq!(spatial, vec![240, 120, 60, 30, 15]);
        assert_eq!(shape, [1, 2, 1, 1]);
        assert!(specs.contains(&LayerSpec::Linear { in_features: 32 * 15 * 15, out_features: 256 }));
    }

    #[test]
    fn zero_input_gives_equal_q() {
        let config = AgentConfig { conv_channels: [2, 2, 2, 2], hidden_units: 4, ..AgentConfig::default() };
        let mut net = build_dqn::<f32>(&config, 16, 16).unwrap();
        let (a, q) = predict(&mut net, &Tensor4::zeros([1, 3, 16, 16])).unwrap();
        assert_eq!(q[0], q[1]);
        assert_eq!(a, Action::Inside);
    }

    #[test]
    fn parameter_count_is_stable() {
        let config = AgentConfig::default();
        let a = build_dqn::<f32>(&config, 240, 240).unwrap();
        let b = build_dqn::<f32>(&config, 240, 240).unwrap();
        let convs = 16 * 27 + 16 + 32 * 144 + 32 + 2 * (32 * 288 + 32);
        let fcs = 7200 * 256 + 256 + 256 * 2 + 2;
        assert_eq!(a.param_count(), convs + fcs);
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn bellman_examples() {
        assert_eq!(bellman_target(1.0, [0.0, 0.0], 0.99), 1.0);
        assert!((bellman_target(-1.0, [2.0, 1.0], 0.99) - 0.98).abs() < 1e-12);
        assert_eq!(bellman_target(-1.0, [7.0, 3.0], 0.0), -1.0);
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(select_action([0.2, 0.7], 0.0, &mut rng), Action::Outside);
            assert_eq!(select_action([0.5, 0.5], 0.0, &mut rng), Action::Inside);
        }
        assert_eq!(predict_from([3.1, -0.2]), Action::Inside);
        assert_eq!(predict_from([-0.2, 3.1]), Action::Outside);
    }

    fn predict_from(q: [f64; 2]) -> Action {
        greedy_action(q)
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = rng_from_seed(7);
        let n = 100_000;
        let ones = (0..n).filter(|_| select_action([0.0, 9.0], 1.0, &mut rng) == Action::Inside).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig::default();
        assert_eq!(epsilon_at(0, &c), 0.7);
        assert!((epsilon_at(300, &c) - 0.67).abs() < 1e-12);
        assert_eq!(epsilon_at(10_000_000, &c), 1e-4);
    }

    #[test]
    fn epsilon_meaning_parses_and_defaults_to_explore() {
        assert_eq!(AgentConfig::default().epsilon_meaning, EpsilonMeaning::Explore);
        let c: AgentConfig = serde_json::from_str(r#"{"epsilon_meaning": "greedy"}"#).unwrap();
        assert_eq!(c.epsilon_meaning, EpsilonMeaning::Greedy);
        assert!(serde_json::from_str::<AgentConfig>(r#"{"epsilon_meaning": "both"}"#).is_err());
    }

    #[test]
    fn replay_is_fifo() {
        let mut b = ReplayBuffer::new(3);
        for i in 1..=4 {
            b.push(i);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        let mut rng = rng_from_seed(3);
        let mut all: Vec<i32> = b.sample(3, &mut rng).unwrap().into_iter().copied().collect();
        all.sort();
        assert_eq!(all, vec![2, 3, 4]);
        assert!(matches!(b.sample(4, &mut rng), Err(Error::NotReady { have: 3, need: 4 })));
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10);
        (0..10).for_each(|i| b.push(i));
        let mut rng = rng_from_seed(11);
        let mut counts = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            counts[*b.sample(1, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 0.01, "{counts:?}");
        }
    }

    fn tiny_env() -> Environment {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            let v = if (4..12).contains(&x) && (4..12).contains(&y) { 200 } else { 40 };
            image::Rgb([v, v, v])
        });
        let labels = LabelMap::new(16, 16, (0..256).map(|i| u32::from((4..12).contains(&(i % 16)) && (4..12).contains(&(i / 16)))).collect()).unwrap();
        let pair = build_mask_pair("t", &labels, 1, None).unwrap();
        Environment::new(&ImageRecord::new("t", img), pair, EnvConfig::default()).unwrap()
    }

    fn tiny_config(episodes: usize) -> AgentConfig {
        AgentConfig { episodes, conv_channels: [4, 4, 4, 4], hidden_units: 8, learning_rate: 1e-3, seed: 5, ..AgentConfig::default() }
    }

    #[test]
    fn buffer_rows_after_training() {
        let out = train(&[tiny_env()], &[], &tiny_config(50)).unwrap();
        assert_eq!(out.replay_rows, 250);
        assert_eq!(out.log.episodes.len(), 50);
        assert!(out.log.episodes.iter().all(|e| e.test_greedy_accuracy.is_none()));
        // one step per env step once 16 rows are stored
        let steps: usize = out.log.episodes.iter().map(|e| e.gradient_steps).sum();
        assert_eq!(steps, 250 - 15);
    }

    #[test]
    fn same_seed_same_log() {
        let a = train(&[tiny_env()], &[tiny_env()], &tiny_config(8)).unwrap();
        let b = train(&[tiny_env()], &[tiny_env()], &tiny_config(8)).unwrap();
        assert_eq!(a.log, b.log);
        let csv = a.log.to_csv().unwrap();
        assert!(csv.starts_with("episode,epsilon,mean_reward,train_greedy_accuracy,test_greedy_accuracy,loss,gradient_steps\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn learns_to_pick_the_region() {
        let out = train(&[tiny_env()], &[], &tiny_config(120)).unwrap();
        let tail = &out.log.episodes[100..];
        assert!(tail.iter().all(|e| e.train_greedy_accuracy == 1.0), "{tail:?}");
    }
}
