//! Training loss stays finite over many random batches, including hostile ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ral_core::gradcheck::randn;
use ral_core::model::{RalConfig, RalModel};

#[test]
fn loss_is_finite_over_a_thousand_random_batches() {
    let cfg = RalConfig {
        frontend_channels: 4,
        stage_channels: vec![4],
        acvi_after_stage: vec![true],
        tcn_branch_channels: 4,
        tcn_layers: 1,
        ..RalConfig::desk(4)
    };
    let mut model = RalModel::<f32>::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for step in 0..1000u64 {
        // Mostly unit-scale noise, with occasional near-constant and huge clips.
        let scale = match step % 10 {
            0 => 1e-6,
            1 => 1e3,
            _ => 1.0,
        };
        let x = randn(&[2, 1, 4, 16, 16], &mut rng).map(|v| v * scale).cast::<f32>();
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
        let (mut sess, logits) = model.forward(&x, true, step).unwrap();
        let loss = sess.tape.cross_entropy_logits(logits, &labels).unwrap();
        let v = sess.tape.data(loss)[0];
        assert!(v.is_finite(), "step {step}: loss {v}");
    }
}
