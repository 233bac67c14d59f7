use candle_core::Device;

use idas::chariot::SamplingMode;
use idas::degradation::{CleanSource, Severity};
use idas::nn::AdamWConfig;
use idas::pipeline::ModelConfig;
use idas::rng::Rng;
use idas::training::{eval_pairs, PriorTrainer, TrainConfig, TrainState};

fn tiny_model() -> ModelConfig {
    ModelConfig { depth: 1, unet_channels: 16, ..Default::default() }
}

fn state(cfg: TrainConfig) -> TrainState {
    let dev = Device::Cpu;
    let model = tiny_model();
    let prior = PriorTrainer::new(&model, 11, AdamWConfig::default(), &dev).unwrap();
    TrainState::new(model, cfg, prior.store, CleanSource::Procedural { size: 32 }, &dev).unwrap()
}

#[test]
fn reconstruction_only_overfits_four_images() {
    let cfg = TrainConfig {
        lambda_lpips: 0.0,
        lambda_vsd: 0.0,
        lambda_adv: 0.0,
        lr_rest: 1e-3,
        batch_size: 4,
        steer_mode: SamplingMode::Fixed,
        steer_s: 0.0,
        severity: Severity::Fixed(0.5),
        ..Default::default()
    };
    let mut st = state(cfg);
    let pairs = eval_pairs(&CleanSource::Procedural { size: 32 }, cfg.severity, 5, 4).unwrap();
    let mut first = None;
    let mut last = f64::NAN;
    for _ in 0..100 {
        let r = st.step_on(&pairs, &mut Rng::new(9)).unwrap();
        first.get_or_insert(r.losses.l2);
        last = r.losses.l2;
    }
    let first = first.unwrap();
    assert!(last < 0.01, "final loss {last}");
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn prior_is_untouched_over_a_hundred_steps() {
    let mut st = state(TrainConfig { batch_size: 1, ..Default::default() });
    let before = st.groups.prior.fingerprint().unwrap();
    for _ in 0..100 {
        st.step().unwrap();
        assert_eq!(st.groups.prior.fingerprint().unwrap(), before);
    }
}

#[test]
fn fifty_steps_replay_bit_for_bit() {
    let cfg = TrainConfig { batch_size: 1, ..Default::default() };
    let mut a = state(cfg);
    let mut b = state(cfg);
    for _ in 0..50 {
        let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(ra.t_hat, rb.t_hat);
    }
    assert_eq!(a.groups.generator.fingerprint().unwrap(), b.groups.generator.fingerprint().unwrap());
    assert_eq!(a.groups.mine.fingerprint().unwrap(), b.groups.mine.fingerprint().unwrap());
}
