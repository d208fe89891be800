//! The LSTM controller: samples architectures token by token and learns by
//! REINFORCE with an exponential-moving-average reward baseline.
//!
//! Sampling feeds the embedding of the previously emitted token back as the
//! next input; the first step consumes a dedicated start-token embedding
//! (table row `n`). Policy updates teacher-force whole sampled token lists
//! in one batched pass and weight each record by its advantage `R_k - b`.

use std::path::Path;

use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{KforgeError, Result};
use crate::ops;
use crate::optim::{clip_grad_norm, Sgd};
use crate::rng::{categorical_sample, Rng};
use crate::space::Architecture;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Uniform init bounds and gate biases for the controller parameter groups.
///
/// The defaults set the recurrence up as a high-norm position code: the cell
/// candidate rows start saturated (large `lstm_cell` bound) while the gates
/// start near-open (small `lstm_gate` bound plus positive input/output gate
/// biases), so hidden states carry close to full norm from the first update.
/// That feature norm is what lets plain SGD at lr 0.01 move the policy in a
/// few hundred REINFORCE updates. Token embeddings start small so the codes
/// depend mostly on position, and the head starts at zero so the initial
/// policy is exactly uniform.
#[derive(Clone, Copy, Debug)]
pub struct InitScales {
    pub embed: f64,
    pub start: f64,
    /// Bound for the input/forget/output gate weight rows.
    pub lstm_gate: f64,
    /// Bound for the cell candidate (`g`) weight rows.
    pub lstm_cell: f64,
    pub head: f64,
    pub in_gate_bias: f64,
    pub forget_gate_bias: f64,
    pub out_gate_bias: f64,
}

impl Default for InitScales {
    fn default() -> InitScales {
        InitScales {
            embed: 0.05,
            start: 1.0,
            lstm_gate: 0.5,
            lstm_cell: 8.0,
            head: 0.0,
            in_gate_bias: 3.0,
            forget_gate_bias: 0.0,
            out_gate_bias: 3.0,
        }
    }
}

/// One sampled architecture with its per-step log-probabilities and, once
/// evaluated, its reward.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub architecture: Architecture,
    pub log_probs: Vec<f64>,
    pub reward: Option<f64>,
}

impl SampleRecord {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Exponential moving average of past rewards, initialized to the first
/// batch's mean instead of decaying up from zero.
#[derive(Clone, Copy, Debug)]
pub struct RewardBaseline {
    value: f64,
    decay: f64,
    initialized: bool,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> RewardBaseline {
        RewardBaseline {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn initialized_at(value: f64, decay: f64) -> RewardBaseline {
        RewardBaseline {
            value,
            decay,
            initialized: true,
        }
    }

    /// The baseline `b` subtracted from rewards; zero until the first update.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn update(&mut self, rewards: &[f64]) -> Result<()> {
        if rewards.is_empty() {
            return Err(KforgeError::Domain {
                op: "baseline_update",
                detail: "empty reward list".into(),
            });
        }
        for &r in rewards {
            if !(0.0..=1.0).contains(&r) {
                return Err(KforgeError::Domain {
                    op: "baseline_update",
                    detail: format!("reward {r} outside [0, 1]"),
                });
            }
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * mean;
        } else {
            self.value = mean;
            self.initialized = true;
        }
        Ok(())
    }
}

/// Policy parameters: token embeddings (plus the start row), one LSTM cell
/// and a linear head over the `n` kernel choices.
pub struct ControllerState {
    pub embedding: Tensor,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    num_choices: usize,
    input_size: usize,
    hidden_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl ControllerState {
    pub fn init(
        num_choices: usize,
        input_size: usize,
        hidden_size: usize,
        lr: f64,
        rng: &mut Rng,
    ) -> ControllerState {
        Self::init_with_scales(
            num_choices,
            input_size,
            hidden_size,
            lr,
            InitScales::default(),
            rng,
        )
    }

    /// Init with explicit uniform bounds per parameter group.
    pub fn init_with_scales(
        num_choices: usize,
        input_size: usize,
        hidden_size: usize,
        lr: f64,
        scales: InitScales,
        rng: &mut Rng,
    ) -> ControllerState {
        let embedding = uniform_tensor(&[num_choices + 1, input_size], scales.embed, rng);
        // The start row gets its own, typically larger, bound.
        embedding.with_data_mut(|d| {
            for v in &mut d[num_choices * input_size..] {
                *v = if scales.start > 0.0 {
                    rng.random_range(-scales.start..scales.start)
                } else {
                    0.0
                };
            }
        });
        // Gate row layout along the 4H axis is [i, f, g, o].
        let mut lstm_weights = |cols: usize, rng: &mut Rng| {
            let t = uniform_tensor(&[4 * hidden_size, cols], scales.lstm_gate, rng);
            if scales.lstm_cell > 0.0 {
                t.with_data_mut(|d| {
                    for v in &mut d[2 * hidden_size * cols..3 * hidden_size * cols] {
                        *v = rng.random_range(-scales.lstm_cell..scales.lstm_cell);
                    }
                });
            }
            t
        };
        let w_ih = lstm_weights(input_size, rng);
        let w_hh = lstm_weights(hidden_size, rng);
        let head_w = uniform_tensor(&[num_choices, hidden_size], scales.head, rng);
        let mut bias = vec![0.0; 4 * hidden_size];
        bias[..hidden_size].fill(scales.in_gate_bias);
        bias[hidden_size..2 * hidden_size].fill(scales.forget_gate_bias);
        bias[3 * hidden_size..].fill(scales.out_gate_bias);
        let b_ih = Tensor::param(&[4 * hidden_size], bias).unwrap();
        let b_hh = Tensor::param(&[4 * hidden_size], vec![0.0; 4 * hidden_size]).unwrap();
        let head_b = Tensor::param(&[num_choices], vec![0.0; num_choices]).unwrap();
        ControllerState {
            embedding,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            head_w,
            head_b,
            num_choices,
            input_size,
            hidden_size,
            lr,
            grad_clip: 5.0,
        }
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.embedding.clone(),
            self.w_ih.clone(),
            self.w_hh.clone(),
            self.b_ih.clone(),
            self.b_hh.clone(),
            self.head_w.clone(),
            self.head_b.clone(),
        ]
    }

    pub fn deep_clone(&self) -> ControllerState {
        ControllerState {
            embedding: self.embedding.detached_clone(),
            w_ih: self.w_ih.detached_clone(),
            w_hh: self.w_hh.detached_clone(),
            b_ih: self.b_ih.detached_clone(),
            b_hh: self.b_hh.detached_clone(),
            head_w: self.head_w.detached_clone(),
            head_b: self.head_b.detached_clone(),
            num_choices: self.num_choices,
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            lr: self.lr,
            grad_clip: self.grad_clip,
        }
    }

    /// One decode pass: sample freely (`forced` empty) or teacher-force the
    /// given tokens. Returns tokens and per-step log-probabilities.
    fn rollout(
        &self,
        len: usize,
        forced: Option<&[usize]>,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tape = Tape::inference();
        let mut h = Tensor::zeros(&[1, self.hidden_size]);
        let mut c = Tensor::zeros(&[1, self.hidden_size]);
        let mut prev = self.num_choices; // start token row
        let mut tokens = Vec::with_capacity(len);
        let mut log_probs = Vec::with_capacity(len);
        for step in 0..len {
            let x = ops::embedding_lookup(&mut tape, &self.embedding, &[prev])?;
            let (h2, c2) = ops::lstm_cell(
                &mut tape, &x, &h, &c, &self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh,
            )?;
            h = h2;
            c = c2;
            let logits = ops::linear(&mut tape, &h, &self.head_w, &self.head_b)?;
            let lp = log_softmax_row(&logits.to_vec());
            let token = match forced {
                Some(tokens) => {
                    let t = tokens[step];
                    if t >= self.num_choices {
                        return Err(KforgeError::IndexOutOfBounds {
                            what: "architecture token",
                            index: t,
                            size: self.num_choices,
                        });
                    }
                    t
                }
                None => {
                    let probs: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
                    let rng = rng.as_deref_mut().expect("sampling needs an rng");
                    categorical_sample(&probs, rng)?
                }
            };
            log_probs.push(lp[token]);
            tokens.push(token);
            prev = token;
        }
        Ok((tokens, log_probs))
    }

    /// Sample one architecture from the current policy (reward unset).
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Result<SampleRecord> {
        let (tokens, log_probs) = self.rollout(len, None, Some(rng))?;
        Ok(SampleRecord {
            architecture: Architecture::new(tokens)?,
            log_probs,
            reward: None,
        })
    }

    /// Log-probability of `arch` under teacher-forced decoding.
    pub fn log_prob_of(&self, arch: &Architecture) -> Result<f64> {
        let (_, log_probs) = self.rollout(arch.len(), Some(arch.tokens()), None)?;
        Ok(log_probs.iter().sum())
    }

    /// One policy-gradient step on `records`: surrogate loss
    /// `-(1/m) sum_k sum_l log P(a_l^k | .) (R_k - b)`, backprop, gradient
    /// clipping, one SGD update. Returns the surrogate loss.
    pub fn reinforce_update(
        &mut self,
        records: &[SampleRecord],
        baseline: &RewardBaseline,
    ) -> Result<f64> {
        let m = records.len();
        if m == 0 {
            return Err(KforgeError::Domain {
                op: "reinforce_update",
                detail: "no sample records".into(),
            });
        }
        let len = records[0].architecture.len();
        let mut weights = Vec::with_capacity(m);
        for r in records {
            if r.architecture.len() != len {
                return Err(KforgeError::InvalidArchitecture(format!(
                    "mixed architecture lengths {} and {len} in one update",
                    r.architecture.len()
                )));
            }
            let reward = r.reward.ok_or(KforgeError::MissingReward)?;
            weights.push((reward - baseline.value()) / m as f64);
        }

        let mut tape = Tape::recording();
        let mut h = Tensor::zeros(&[m, self.hidden_size]);
        let mut c = Tensor::zeros(&[m, self.hidden_size]);
        let mut prev: Vec<usize> = vec![self.num_choices; m];
        let mut surrogate: Option<Tensor> = None;
        for step in 0..len {
            let x = ops::embedding_lookup(&mut tape, &self.embedding, &prev)?;
            let (h2, c2) = ops::lstm_cell(
                &mut tape, &x, &h, &c, &self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh,
            )?;
            h = h2;
            c = c2;
            let logits = ops::linear(&mut tape, &h, &self.head_w, &self.head_b)?;
            let labels: Vec<usize> = records
                .iter()
                .map(|r| r.architecture.tokens()[step])
                .collect();
            let step_loss = ops::weighted_nll(&mut tape, &logits, &labels, &weights)?;
            surrogate = Some(match surrogate {
                Some(acc) => ops::add(&mut tape, &acc, &step_loss)?,
                None => step_loss,
            });
            prev = labels;
        }
        let surrogate = surrogate.expect("len >= 1");
        tape.backward(&surrogate)?;
        let params = self.params();
        clip_grad_norm(&params, self.grad_clip);
        Sgd::new(self.lr).step(&params);
        Ok(surrogate.item())
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("ctrl/embed".into(), self.embedding.clone()),
            ("ctrl/lstm/w_ih".into(), self.w_ih.clone()),
            ("ctrl/lstm/w_hh".into(), self.w_hh.clone()),
            ("ctrl/lstm/b_ih".into(), self.b_ih.clone()),
            ("ctrl/lstm/b_hh".into(), self.b_hh.clone()),
            ("ctrl/head/w".into(), self.head_w.clone()),
            ("ctrl/head/b".into(), self.head_b.clone()),
        ]
    }

    pub fn save(&self, path: &Path, baseline: &RewardBaseline) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ck.insert_tensor(name, &t);
        }
        ck.insert("ctrl/baseline", &[1], vec![baseline.value()]);
        ck.save(path)
    }

    /// Load parameters saved by [`save`] into this state; returns the
    /// stored baseline (marked initialized).
    pub fn load_into(&self, path: &Path, decay: f64) -> Result<RewardBaseline> {
        let ck = Checkpoint::load(path)?;
        for (name, t) in self.named_tensors() {
            ck.load_into(path, &name, &t)?;
        }
        let (_, b) = ck.get("ctrl/baseline").ok_or_else(|| KforgeError::Checkpoint {
            path: path.display().to_string(),
            detail: "missing entry ctrl/baseline".into(),
        })?;
        Ok(RewardBaseline::initialized_at(b[0], decay))
    }
}

fn uniform_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = if scale > 0.0 {
        (0..numel).map(|_| rng.random_range(-scale..scale)).collect()
    } else {
        vec![0.0; numel]
    };
    Tensor::param(shape, data).expect("controller init")
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - max - log_denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn fresh(n: usize, seed: u64) -> ControllerState {
        ControllerState::init(n, 64, 64, 0.01, &mut stream(seed, "controller-init"))
    }

    /// Head forced to huge logit on token 0: the policy is deterministic.
    fn saturate_on_token_zero(state: &ControllerState) {
        state.head_w.with_data_mut(|d| d.fill(0.0));
        state.head_b.with_data_mut(|d| {
            d.fill(0.0);
            d[0] = 1e3;
        });
    }

    #[test]
    fn saturated_policy_always_emits_token_zero() {
        let state = fresh(6, 1);
        saturate_on_token_zero(&state);
        let mut rng = stream(2, "sample");
        for _ in 0..20 {
            let rec = state.sample(8, &mut rng).unwrap();
            assert_eq!(rec.architecture.tokens(), &[0; 8]);
            assert!(rec.total_log_prob().abs() < 1e-9);
        }
    }

    #[test]
    fn fresh_policy_samples_near_uniformly() {
        let state = fresh(6, 3);
        let mut rng = stream(4, "sample-uniform");
        let len = 4;
        let trials = 10_000;
        let mut counts = vec![[0usize; 6]; len];
        for _ in 0..trials {
            let rec = state.sample(len, &mut rng).unwrap();
            for (pos, &t) in rec.architecture.tokens().iter().enumerate() {
                counts[pos][t] += 1;
            }
        }
        for (pos, row) in counts.iter().enumerate() {
            for (tok, &cnt) in row.iter().enumerate() {
                let freq = cnt as f64 / trials as f64;
                assert!(
                    (freq - 1.0 / 6.0).abs() < 0.02,
                    "position {pos}, token {tok}: freq {freq}"
                );
            }
        }
    }

    #[test]
    fn recorded_log_probs_match_teacher_forcing() {
        let state = fresh(6, 5);
        let mut rng = stream(6, "consistency");
        for _ in 0..10 {
            let rec = state.sample(8, &mut rng).unwrap();
            let lp = state.log_prob_of(&rec.architecture).unwrap();
            assert!((lp - rec.total_log_prob()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_single_step_policy_has_log_prob_ln_sixth() {
        let state = fresh(6, 7);
        state.head_w.with_data_mut(|d| d.fill(0.0));
        state.head_b.with_data_mut(|d| d.fill(0.0));
        let lp = state
            .log_prob_of(&Architecture::new(vec![3]).unwrap())
            .unwrap();
        assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn policy_is_a_normalized_distribution_over_the_space() {
        for seed in [8, 9, 10] {
            let state = fresh(6, seed);
            let mut total = 0.0;
            for t0 in 0..6 {
                for t1 in 0..6 {
                    let arch = Architecture::new(vec![t0, t1]).unwrap();
                    total += state.log_prob_of(&arch).unwrap().exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "seed {seed}: sum {total}");
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let state = fresh(6, 11);
        let arch = Architecture::new(vec![0, 5]).unwrap();
        assert!(state.log_prob_of(&arch).is_ok());
        // Token 5 is valid for the table but not for a 3-choice policy.
        let small = fresh(3, 11);
        assert!(small.log_prob_of(&arch).is_err());
    }

    fn record(state: &ControllerState, tokens: Vec<usize>, reward: f64) -> SampleRecord {
        let arch = Architecture::new(tokens).unwrap();
        let lp = state.log_prob_of(&arch).unwrap();
        SampleRecord {
            architecture: arch,
            log_probs: vec![lp],
            reward: Some(reward),
        }
    }

    #[test]
    fn zero_advantage_update_is_a_bit_exact_noop() {
        let mut state = fresh(6, 12);
        let before: Vec<Vec<f64>> = state.params().iter().map(|p| p.to_vec()).collect();
        let baseline = RewardBaseline::initialized_at(0.6, 0.95);
        let records: Vec<SampleRecord> = (0..4)
            .map(|t| record(&state, vec![t, (t + 1) % 6, 2, 3], 0.6))
            .collect();
        let loss = state.reinforce_update(&records, &baseline).unwrap();
        assert_eq!(loss, 0.0);
        for (p, b) in state.params().iter().zip(&before) {
            assert_eq!(&p.to_vec(), b);
        }
    }

    #[test]
    fn positive_advantage_raises_the_sampled_architectures_probability() {
        let mut state = fresh(6, 13);
        let arch = Architecture::new(vec![2, 4, 0, 5]).unwrap();
        let before = state.log_prob_of(&arch).unwrap();
        let baseline = RewardBaseline::initialized_at(0.3, 0.95);
        let rec = SampleRecord {
            architecture: arch.clone(),
            log_probs: vec![],
            reward: Some(0.9),
        };
        state.reinforce_update(&[rec], &baseline).unwrap();
        let after = state.log_prob_of(&arch).unwrap();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn opposite_advantages_shift_mass_between_tokens() {
        let mut state = fresh(6, 14);
        let up = record(&state, vec![1], 0.8);
        let down = record(&state, vec![4], 0.2);
        let p_up_before = state.log_prob_of(&up.architecture).unwrap().exp();
        let p_down_before = state.log_prob_of(&down.architecture).unwrap().exp();
        let baseline = RewardBaseline::initialized_at(0.5, 0.95);
        for _ in 0..20 {
            state
                .reinforce_update(&[up.clone(), down.clone()], &baseline)
                .unwrap();
        }
        let p_up = state.log_prob_of(&up.architecture).unwrap().exp();
        let p_down = state.log_prob_of(&down.architecture).unwrap().exp();
        assert!(p_up > p_up_before);
        assert!(p_down < p_down_before);
    }

    #[test]
    fn advantage_is_shift_invariant_between_rewards_and_baseline() {
        // Shifting all rewards by c equals lowering b by c.
        let base = fresh(6, 15);
        let mut s1 = base.deep_clone();
        let mut s2 = base.deep_clone();
        let tokens = [vec![0, 2], vec![5, 1], vec![3, 3]];
        let rewards = [0.2, 0.5, 0.7];
        let c = 0.25;
        let recs = |state: &ControllerState, shift: f64| -> Vec<SampleRecord> {
            tokens
                .iter()
                .zip(&rewards)
                .map(|(t, &r)| record(state, t.clone(), r + shift))
                .collect()
        };
        s1.reinforce_update(&recs(&s1, c), &RewardBaseline::initialized_at(0.5, 0.95))
            .unwrap();
        s2.reinforce_update(&recs(&s2, 0.0), &RewardBaseline::initialized_at(0.5 - c, 0.95))
            .unwrap();
        for (a, b) in s1.params().iter().zip(s2.params().iter()) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec().iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn missing_reward_is_an_error() {
        let mut state = fresh(6, 16);
        let rec = SampleRecord {
            architecture: Architecture::new(vec![0]).unwrap(),
            log_probs: vec![],
            reward: None,
        };
        assert!(matches!(
            state.reinforce_update(&[rec], &RewardBaseline::new(0.95)),
            Err(KforgeError::MissingReward)
        ));
    }

    #[test]
    fn baseline_arithmetic_and_initialization() {
        let mut b = RewardBaseline::new(0.95);
        assert_eq!(b.value(), 0.0);
        b.update(&[0.6]).unwrap();
        assert_eq!(b.value(), 0.6);
        let mut b = RewardBaseline::initialized_at(0.5, 0.95);
        b.update(&[0.7]).unwrap();
        assert!((b.value() - 0.51).abs() < 1e-12);
        assert!(b.update(&[]).is_err());
        assert!(b.update(&[1.5]).is_err());
    }

    #[test]
    fn baseline_converges_monotonically_to_constant_rewards() {
        let mut b = RewardBaseline::initialized_at(0.1, 0.95);
        let r = 0.8;
        let mut gap = (b.value() - r).abs();
        for _ in 0..100 {
            b.update(&[r]).unwrap();
            let next = (b.value() - r).abs();
            assert!(next < gap);
            gap = next;
        }
        assert!(gap < 0.01);
    }

    #[test]
    fn rigged_bandit_concentrates_on_the_good_token() {
        // Reward 1 for token 2, else 0; the policy should focus quickly.
        let mut state = fresh(6, 17);
        let mut rng = stream(18, "bandit");
        let mut baseline = RewardBaseline::new(0.95);
        for _ in 0..60 {
            let records: Vec<SampleRecord> = (0..10)
                .map(|_| {
                    let mut rec = state.sample(1, &mut rng).unwrap();
                    rec.reward = Some(if rec.architecture.tokens()[0] == 2 { 1.0 } else { 0.0 });
                    rec
                })
                .collect();
            state.reinforce_update(&records, &baseline).unwrap();
            let rewards: Vec<f64> = records.iter().map(|r| r.reward.unwrap()).collect();
            baseline.update(&rewards).unwrap();
        }
        let p = state
            .log_prob_of(&Architecture::new(vec![2]).unwrap())
            .unwrap()
            .exp();
        assert!(p > 0.5, "p(token 2) = {p}");
    }

    #[test]
    fn controller_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl.kfc");
        let state = fresh(6, 19);
        let baseline = RewardBaseline::initialized_at(0.42, 0.95);
        state.save(&path, &baseline).unwrap();
        let other = fresh(6, 20);
        let restored = other.load_into(&path, 0.95).unwrap();
        assert_eq!(restored.value(), 0.42);
        assert!(restored.is_initialized());
        for (a, b) in state.params().iter().zip(other.params().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }
}
