use memaud_core::diffusion::*;
use memaud_core::numerics::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(15);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let config = DiffusionConfig {
        latent_shape: [2, 2, 2, 2],
        hidden_channels: 4,
        time_embed_dim: 8,
        t_steps: 20,
        beta_1: 1e-3,
        beta_t: 0.1,
        epochs,
        batch_size: 4,
        learning_rate: lr,
        seed: 3,
    };
    let schedule = config.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let latents: Vec<Tensor> = (0..12)
        .map(|_| {
            Tensor::new(
                vec![2, 2, 2, 2],
                (0..16).map(|_| rng.sample(StandardNormal)).collect(),
            )
            .unwrap()
        })
        .collect();
    let out = train_denoiser(&config, &latents, &schedule).unwrap();
    println!("{:?}", out.loss_curve);
}
