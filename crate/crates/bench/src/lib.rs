//! Shared fixtures for the criterion benches: a mid-sized model and random
//! inputs, all seeded so successive runs measure the same work.

use xtrd_core::{
    EncoderConfig, FrontEndConfig, JoinerConfig, Model, ModelConfig, PredictorConfig, Streams,
    Tensor, Vocab,
};

pub fn bench_model() -> Model<f64> {
    let vocab = Vocab::from_units((1..16).map(|k| format!("t{k}"))).unwrap();
    let cfg = ModelConfig {
        frontend: FrontEndConfig {
            sample_rate: 16000,
            frame_window: 400,
            frame_hop: 320,
            d_model: 32,
        },
        encoder: EncoderConfig { n_layers: 2, n_heads: 4, d_model: 32, d_ffn: 64, dropout: 0.0 },
        predictor: PredictorConfig { embed_dim: 16, kernel: 2 },
        joiner: JoinerConfig { joint_dim: 32 },
        feature_dim: 16,
        vocab,
        exact_loss: true,
    };
    let mut rng = Streams::from_root(1234).stream("bench-init");
    Model::init(cfg, &mut rng).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, stream: &str) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = Streams::from_root(1234).stream(stream);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random joint lattice [t, u+1, v] for the loss benches.
pub fn random_lattice(t: usize, u: usize, v: usize) -> (Tensor<f64>, Vec<usize>) {
    use rand::Rng;
    let mut rng = Streams::from_root(1234).stream("bench-lattice");
    let data = (0..t * (u + 1) * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let logits = Tensor::new(vec![t, u + 1, v], data).unwrap();
    let target = (0..u).map(|_| rng.gen_range(1..v)).collect();
    (logits, target)
}
