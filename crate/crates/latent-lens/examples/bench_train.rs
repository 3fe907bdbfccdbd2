use latent_lens::dataset::generate_shapes_dataset;
use latent_lens::tinyvae::{train, TrainingConfig, Variant};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let data = generate_shapes_dataset(512, 64, 0);
    eprintln!("dataset: {:?}", t0.elapsed());
    for (variant, epochs) in [(Variant::Vae, 2usize), (Variant::BetaTcvae, 2)] {
        let config = TrainingConfig {
            variant,
            beta: 4.0,
            epochs,
            batch_size: 64,
            seed: 1,
            ..TrainingConfig::default()
        };
        let t = Instant::now();
        let (_, history) = train(&data, &config);
        eprintln!(
            "{variant}: {epochs} epochs in {:?} ({:?}/epoch), first loss {:.3}",
            t.elapsed(),
            t.elapsed() / epochs as u32,
            history[0].reconstruction + history[0].kl_analytic
        );
    }
}
