use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opc_core::optim::{AdamConfig, Learner, LrSchedule, PpoConfig, TrajectoryBuffer, Transition};
use opc_core::policy::{NetConfig, PolicyParams};
use opc_core::world::{OBS_LEN, VECTOR_LEN};

const N: usize = 12;
const LR: f64 = 1e-3;

fn net() -> NetConfig {
    NetConfig {
        conv1_filters: 2,
        conv2_filters: 2,
        hidden_units: 8,
        num_layers: 2,
    }
}

/// Vanilla policy gradient plus value regression: −mean(A·log π) + ½·mean((V − R)²).
fn vanilla_loss(p: &PolicyParams<f64>, batch: &[Transition]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|t| {
            let obs: Vec<f64> = t.obs.iter().map(|&x| f64::from(x)).collect();
            let out = p.forward(&obs).unwrap();
            let lp = out.distribution().log_prob(t.raw_action, t.signal);
            (-t.advantage * lp + 0.5 * (out.value_f64() - t.ret).powi(2)) / n
        })
        .sum()
}

#[test]
fn unclipped_single_batch_update_is_a_vanilla_gradient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: PolicyParams<f32> = PolicyParams::init(net(), &mut rng);
    let exact = params.cast::<f64>();
    let batch: Vec<Transition> = (0..N)
        .map(|_| {
            let obs: Vec<f32> = (0..OBS_LEN)
                .map(|i| if i < VECTOR_LEN { rng.random_range(-1.0..1.0) } else { f32::from(u8::from(rng.random_bool(0.3))) })
                .collect();
            let raw = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let signal = rng.random_bool(0.5);
            let o64: Vec<f64> = obs.iter().map(|&x| f64::from(x)).collect();
            let lp = exact.forward(&o64).unwrap().distribution().log_prob(raw, signal);
            Transition {
                obs,
                raw_action: raw,
                signal,
                log_prob: lp,
                value: 0.0,
                advantage: rng.random_range(-2.0..2.0),
                ret: rng.random_range(-1.0..1.0),
            }
        })
        .collect();

    let cfg = PpoConfig {
        beta: 0.0,
        epsilon: 1e9,
        num_epoch: 1,
        batch_size: N,
        buffer_size: N,
        learning_rate: LR,
        lr_schedule: LrSchedule::Constant,
        normalize_advantages: false,
        ..PpoConfig::default()
    };
    let mut buffer = TrajectoryBuffer::new(N);
    buffer.extend(batch.clone());
    let mut learner = Learner::new(params.clone(), AdamConfig::default());
    let stats = learner.update(&mut buffer, &cfg, 0.0, &mut rng).unwrap();
    assert_eq!(stats.minibatches, 1);
    assert!((stats.first_minibatch_ratio - 1.0).abs() < 1e-6);

    // First Adam step from zero moments: m̂ = g and v̂ = g², so Δ = −lr·g / (|g| + ε).
    let h = 1e-5;
    let mut probe = exact.clone();
    let mut checked = 0;
    for k in 0..exact.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = vanilla_loss(&probe, &batch);
        probe.data[k] = orig - h;
        let down = vanilla_loss(&probe, &batch);
        probe.data[k] = orig;
        let g = (up - down) / (2.0 * h);
        if g.abs() < 1e-5 {
            // Too small to pin the sign by finite differences.
            continue;
        }
        let want = -LR * g / (g.abs() + 1e-8);
        let got = f64::from(learner.params.data[k]) - f64::from(params.data[k]);
        let ulp = f64::from(params.data[k].abs().max(1e-3)) * 2f64.powi(-22);
        assert!((got - want).abs() <= 1e-3 * LR + ulp, "param {k}: step {got} vs {want} (g = {g})");
        checked += 1;
    }
    assert!(checked > exact.len() / 2, "only {checked} of {} parameters checked", exact.len());
}
