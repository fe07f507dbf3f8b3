//! Criterion benches for the pipeline hot spots: the 3D convolution that
//! dominates training, the embedding forward pass, and the exact
//! nearest-neighbor candidate scan.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use memaud_core::contrastive::{self, EmbedderConfig, EmbeddingTable};
use memaud_core::numerics::conv::conv3d;
use memaud_core::numerics::Tensor;
use memaud_core::volumes::{generate_phantoms, PhantomConfig};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[8, 16, 16, 16]);
    let k = random_tensor(&mut rng, &[16, 8, 3, 3, 3]);
    c.bench_function("conv3d 8x16^3 -> 16 channels stride 2", |b| {
        b.iter(|| conv3d(&x, &k, 2, 1).unwrap())
    });
}

fn bench_embed(c: &mut Criterion) {
    let config = EmbedderConfig::default();
    let params = contrastive::init_embedder(&config).unwrap();
    let vols = generate_phantoms(3, 1, [16, 16, 16], &PhantomConfig::default()).unwrap();
    c.bench_function("embed one 16^3 volume", |b| {
        b.iter(|| contrastive::embed(&params, &config, &vols[0]).unwrap())
    });
}

fn bench_candidate_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 32;
    let mut table = |n: usize, tag: &str| {
        let mut t = EmbeddingTable::new("bench", dim);
        for i in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            t.push(format!("{tag}_{i:04}"), &row).unwrap();
        }
        t
    };
    let train = table(64, "train");
    let synth = table(1024, "synth");
    c.bench_function("copy_candidates 64 train x 1024 synth", |b| {
        b.iter_batched(
            || (),
            |_| memaud_core::audit::copy_candidates(&train, &synth).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_conv3d, bench_embed, bench_candidate_scan);
criterion_main!(benches);
