use bamboo_core::data::SyntheticSpec;
use bamboo_core::experiment::*;
use bamboo_core::matrix::ActivationKind;
use bamboo_core::model::*;
use bamboo_core::train::TrainConfig;
use std::time::Instant;

fn main() {
    let spec = ExperimentSpec {
        name: "sweep-probe".into(),
        model: ModelConfig {
            depth: 2, width: 128, heads: 8, seq_len: 16, patch_dim: 32,
            num_classes: 16, ffn_mult: 4,
            norm_placement: NormPlacement::Pre,
            residual_enabled: true,
            activation: ActivationKind::Gelu,
            head_mode: HeadMode::MeanPool,
            use_cls_token: false,
        },
        data: DataSpec {
            synthetic: SyntheticSpec {
                seq_len: 16, patch_dim: 32, num_classes: 16,
                components: 4, max_freq: 3, noise_sigma: 0.75, seed: 31,
            },
            num_sequences: 160,
            train_fraction: 0.8,
        },
        train: TrainConfig {
            objective: Objective::Classifier,
            epochs: 15, batch_size: 8, learning_rate: 1e-3,
            beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0,
            mask_ratio: 0.5, per_patch_norm: true, seed: 0,
        },
        pretrain: Some(TrainConfig {
            objective: Objective::Mae,
            epochs: 25, batch_size: 8, learning_rate: 1e-3,
            beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0,
            mask_ratio: 0.5, per_patch_norm: true, seed: 0,
        }),
        experiment: ExperimentKind::DepthSweep {
            depths: vec![2, 4, 8, 16],
            widths: vec![128, 96, 64, 48],
            head_dim: 16,
        },
        diagnostics: Default::default(),
        outputs: "/tmp/sweep-probe".into(),
        repeat_seeds: vec![1],
        svg: false,
    };
    let t0 = Instant::now();
    let rows = run_depth_sweep::<f32>(&spec).unwrap();
    println!("sweep in {:.0?}", t0.elapsed());
    for depth in [2usize, 4, 8, 16] {
        for regime in ["scratch", "pretrained"] {
            let accs: Vec<f64> = rows.iter()
                .filter(|r| r.depth == depth && r.regime == regime)
                .map(|r| r.heldout_accuracy).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("L={depth:>2} {regime:>10}: {:?} mean {:.3}", accs, mean);
        }
    }
}
