//! Scratch harness for measuring controller convergence on the synthetic
//! token-matching reward. Run: cargo run --example bandit_tune -p kforge

use kforge::controller::{ControllerState, RewardBaseline, SampleRecord};
use kforge::rng::stream;
use kforge::space::Architecture;

fn scales_from_env() -> kforge::controller::InitScales {
    let d = kforge::controller::InitScales::default();
    let get = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    kforge::controller::InitScales {
        embed: get("S_EMBED", d.embed),
        start: get("S_START", d.start),
        lstm_gate: get("S_LGATE", d.lstm_gate),
        lstm_cell: get("S_LCELL", d.lstm_cell),
        head: get("S_HEAD", d.head),
        in_gate_bias: get("S_IBIAS", d.in_gate_bias),
        forget_gate_bias: get("S_FBIAS", d.forget_gate_bias),
        out_gate_bias: get("S_OBIAS", d.out_gate_bias),
    }
}

fn run_seed(seed: u64, updates: usize, m: usize) -> (f64, Vec<f64>) {
    let len = 4;
    let target = [2usize, 5, 0, 3];
    let mut state = ControllerState::init_with_scales(
        6,
        64,
        64,
        0.01,
        scales_from_env(),
        &mut stream(seed, "ctrl-init"),
    );
    let mut rng = stream(seed, "bandit-sample");
    let mut baseline = RewardBaseline::new(0.95);
    for _u in 0..updates {
        let records: Vec<SampleRecord> = (0..m)
            .map(|_| {
                let mut rec = state.sample(len, &mut rng).unwrap();
                let hits = rec
                    .architecture
                    .tokens()
                    .iter()
                    .zip(&target)
                    .filter(|(a, b)| a == b)
                    .count();
                rec.reward = Some(hits as f64 / len as f64);
                rec
            })
            .collect();
        state.reinforce_update(&records, &baseline).unwrap();
        let rewards: Vec<f64> = records.iter().map(|r| r.reward.unwrap()).collect();
        baseline.update(&rewards).unwrap();
    }
    // Per-position probability of the target token.
    let mut probs = Vec::new();
    for pos in 0..len {
        // marginal prob: teacher-force the target prefix, read step prob.
        let arch = Architecture::new(target.to_vec()).unwrap();
        let full = state.log_prob_of(&arch).unwrap();
        let _ = full;
        probs.push(pos_prob(&state, &target, pos));
    }
    let min_p = probs.iter().cloned().fold(1.0, f64::min);
    (min_p, probs)
}

fn pos_prob(state: &ControllerState, target: &[usize], pos: usize) -> f64 {
    // P(a_pos = target[pos] | target prefix) via log-prob differences.
    let prefix_full = Architecture::new(target[..=pos].to_vec()).unwrap();
    let lp_full = state.log_prob_of(&prefix_full).unwrap();
    if pos == 0 {
        lp_full.exp()
    } else {
        let prefix = Architecture::new(target[..pos].to_vec()).unwrap();
        (lp_full - state.log_prob_of(&prefix).unwrap()).exp()
    }
}

/// Mean squared hidden-state norm per step and mean cosine similarity of the
/// hidden codes between consecutive positions, over a few random prefixes.
fn reservoir_stats(seed: u64) {
    use kforge::ops;
    use kforge::tape::Tape;
    use kforge::tensor::Tensor;
    let state = ControllerState::init_with_scales(
        6,
        64,
        64,
        0.01,
        scales_from_env(),
        &mut stream(seed, "ctrl-init"),
    );
    let mut rng = stream(seed + 100, "probe");
    let len = 4;
    let mut norms = vec![0.0f64; len];
    let mut coss = vec![0.0f64; len - 1];
    let trials = 50;
    for _ in 0..trials {
        let mut tape = Tape::inference();
        let mut h = Tensor::zeros(&[1, 64]);
        let mut c = Tensor::zeros(&[1, 64]);
        let mut prev = 6usize;
        let mut hs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..len {
            let x = ops::embedding_lookup(&mut tape, &state.embedding, &[prev]).unwrap();
            let (h2, c2) = ops::lstm_cell(
                &mut tape, &x, &h, &c, &state.w_ih, &state.w_hh, &state.b_ih, &state.b_hh,
            )
            .unwrap();
            h = h2;
            c = c2;
            hs.push(h.to_vec());
            prev = rand::Rng::random_range(&mut rng, 0..6);
        }
        for (l, hv) in hs.iter().enumerate() {
            norms[l] += hv.iter().map(|v| v * v).sum::<f64>() / trials as f64;
        }
        for l in 0..len - 1 {
            let (a, b) = (&hs[l], &hs[l + 1]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            coss[l] += dot / (na * nb) / trials as f64;
        }
    }
    println!(
        "reservoir: |h|^2 per pos {:?}, adjacent cos {:?}",
        norms.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
        coss.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}

fn main() {
    if std::env::var("STATS").is_ok() {
        reservoir_stats(0);
        return;
    }
    let updates: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let t0 = std::time::Instant::now();
    let mut ok = 0;
    for seed in 0..5 {
        let (min_p, probs) = run_seed(seed, updates, 20);
        let pass = min_p > 0.9;
        ok += pass as usize;
        println!(
            "seed {seed}: min target-token prob {min_p:.3} {:?} {}",
            probs.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            if pass { "PASS" } else { "fail" }
        );
    }
    println!("{ok}/5 seeds pass in {:.1?}", t0.elapsed());
}
