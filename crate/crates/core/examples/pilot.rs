//! Pilot runs for threshold calibration on the desk corpus.

use memaud_core::autoencoder::{self, AutoencoderConfig};
use memaud_core::contrastive::{self, EmbedderConfig};
use memaud_core::volumes::{enumerate_orientations, generate_phantoms, PhantomConfig};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "ae".into());
    let arg_usize = |n: usize, default: usize| -> usize {
        std::env::args()
            .nth(n)
            .map(|s| s.parse().unwrap())
            .unwrap_or(default)
    };
    let d = PhantomConfig::default();
    let arg_f64 = |n: usize, default: f64| -> f64 {
        std::env::args()
            .nth(n)
            .map(|s| s.parse().unwrap())
            .unwrap_or(default)
    };
    let phantom_cfg = PhantomConfig {
        min_shapes: arg_usize(11, d.min_shapes),
        max_shapes: arg_usize(12, d.max_shapes),
        gradient_amplitude: arg_f64(13, d.gradient_amplitude),
        texture_amplitude: arg_f64(14, d.texture_amplitude),
        ..d
    };
    let vols = generate_phantoms(7, 80, [16, 16, 16], &phantom_cfg).unwrap();
    let (train, val) = vols.split_at(64);
    match which.as_str() {
        "ae" => {
            let epochs: usize = std::env::args()
                .nth(2)
                .map(|s| s.parse().unwrap())
                .unwrap_or(60);
            let lr: f64 = std::env::args()
                .nth(3)
                .map(|s| s.parse().unwrap())
                .unwrap_or(3e-3);
            let cfg = AutoencoderConfig {
                epochs,
                learning_rate: lr,
                seed: 1,
                ..AutoencoderConfig::default()
            };
            let t0 = std::time::Instant::now();
            let out = autoencoder::train_autoencoder(&cfg, train).unwrap();
            let train_l1 = autoencoder::reconstruction_loss(&out.params, &cfg, train).unwrap();
            let val_l1 = autoencoder::reconstruction_loss(&out.params, &cfg, val).unwrap();
            println!(
                "epochs={epochs} lr={lr} time={:?} first={:.4} last={:.4} train_l1={train_l1:.4} val_l1={val_l1:.4}",
                t0.elapsed(),
                out.loss_curve[0],
                out.loss_curve.last().unwrap()
            );
        }
        "ae1" => {
            // single-volume overfit
            let cfg = AutoencoderConfig {
                epochs: std::env::args()
                    .nth(2)
                    .map(|s| s.parse().unwrap())
                    .unwrap_or(200),
                learning_rate: 3e-3,
                seed: 1,
                batch_size: 1,
                ..AutoencoderConfig::default()
            };
            let one = &train[..1];
            let out = autoencoder::train_autoencoder(&cfg, one).unwrap();
            let l1 = autoencoder::reconstruction_loss(&out.params, &cfg, one).unwrap();
            println!("single-volume l1={l1:.5}");
        }
        "con" => {
            let epochs: usize = std::env::args()
                .nth(2)
                .map(|s| s.parse().unwrap())
                .unwrap_or(40);
            let lr: f64 = std::env::args()
                .nth(3)
                .map(|s| s.parse().unwrap())
                .unwrap_or(1e-3);
            let margin: f64 = std::env::args()
                .nth(4)
                .map(|s| s.parse().unwrap())
                .unwrap_or(0.0);
            let batch: usize = std::env::args()
                .nth(5)
                .map(|s| s.parse().unwrap())
                .unwrap_or(8);
            let fine: usize = std::env::args()
                .nth(6)
                .map(|s| s.parse().unwrap())
                .unwrap_or(0);
            let width: usize = std::env::args()
                .nth(7)
                .map(|s| s.parse().unwrap())
                .unwrap_or(16);
            let dense: usize = std::env::args()
                .nth(8)
                .map(|s| s.parse().unwrap())
                .unwrap_or(64);
            let seed: u64 = std::env::args()
                .nth(9)
                .map(|s| s.parse().unwrap())
                .unwrap_or(2);
            let downsample: usize = std::env::args()
                .nth(10)
                .map(|s| s.parse().unwrap())
                .unwrap_or(4);
            let latent: usize = std::env::args()
                .nth(15)
                .map(|s| s.parse().unwrap())
                .unwrap_or(8);
            let wd = arg_f64(16, 0.0);
            let aug_neg = std::env::args()
                .nth(17)
                .map(|s| s.parse::<u8>().unwrap() != 0)
                .unwrap_or(false);
            let stages = downsample.trailing_zeros() as usize;
            let cfg = EmbedderConfig {
                latent_channels: latent,
                weight_decay: wd,
                augment_negatives: aug_neg,
                epochs,
                learning_rate: lr,
                margin,
                batch_size: batch,
                fine_tune_epochs: fine,
                trunk_channels: vec![width; stages - 1],
                dense_hidden: dense,
                downsample,
                seed,
                ..EmbedderConfig::default()
            };
            let t0 = std::time::Instant::now();
            let out = contrastive::train_embedder(&cfg, train, val).unwrap();
            println!(
                "epochs={epochs} lr={lr} margin={margin} time={:?} best_epoch={} val_acc_curve_tail={:?}",
                t0.elapsed(),
                out.best_epoch,
                &out.val_accuracy_curve[out.val_accuracy_curve.len().saturating_sub(5)..]
            );
            // invariance: for every (train volume, orientation), nearest
            // training embedding of the augmented copy is the source
            let table = contrastive::embed_all(&out.params, &cfg, train, "pilot").unwrap();
            let orientations = enumerate_orientations([16, 16, 16]);
            let mut hits = 0usize;
            let mut total = 0usize;
            let mut misses: std::collections::BTreeMap<String, Vec<String>> =
                std::collections::BTreeMap::new();
            for v in train {
                for o in &orientations {
                    let aug = memaud_core::volumes::apply_orientation(v, o).unwrap();
                    let e = contrastive::embed(&out.params, &cfg, &aug).unwrap();
                    let (id, _) = memaud_core::audit::nearest(&e, &table).unwrap();
                    if id == v.id {
                        hits += 1;
                    } else {
                        misses.entry(v.id.clone()).or_default().push(id);
                    }
                    total += 1;
                }
            }
            println!(
                "invariance: {hits}/{total} = {:.4}",
                hits as f64 / total as f64
            );
            for (src, wrong) in &misses {
                let mut counts: std::collections::BTreeMap<&str, usize> =
                    std::collections::BTreeMap::new();
                for w in wrong {
                    *counts.entry(w).or_default() += 1;
                }
                println!("  miss {src}: {} orientations -> {counts:?}", wrong.len());
            }
            // distance structure: intra (source vs its augmentations) vs
            // inter (source vs nearest other source)
            let emb: Vec<Vec<f64>> = train
                .iter()
                .map(|v| contrastive::embed(&out.params, &cfg, v).unwrap())
                .collect();
            let d2 = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut intra = Vec::new();
            for (i, v) in train.iter().enumerate() {
                for o in &orientations[1..] {
                    let aug = memaud_core::volumes::apply_orientation(v, o).unwrap();
                    let e = contrastive::embed(&out.params, &cfg, &aug).unwrap();
                    intra.push(d2(&emb[i], &e));
                }
            }
            let mut inter = Vec::new();
            for i in 0..emb.len() {
                let m = (0..emb.len())
                    .filter(|&j| j != i)
                    .map(|j| d2(&emb[i], &emb[j]))
                    .fold(f64::INFINITY, f64::min);
                inter.push(m);
            }
            // effective dimensionality: per-coordinate variance of the 64
            // source embeddings, sorted; collapse to a few axes would make
            // nearest-neighbor confusions geometric rather than a training
            // shortfall
            let dim = emb[0].len();
            let mut var: Vec<f64> = (0..dim)
                .map(|k| {
                    let mean = emb.iter().map(|e| e[k]).sum::<f64>() / emb.len() as f64;
                    emb.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / emb.len() as f64
                })
                .collect();
            var.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = var.iter().sum();
            let top4: f64 = var[..4].iter().sum();
            let top8: f64 = var[..8].iter().sum();
            println!(
                "embedding variance: top4 {:.1}% top8 {:.1}% of total {:.3}",
                100.0 * top4 / total,
                100.0 * top8 / total,
                total
            );
            intra.sort_by(f64::total_cmp);
            inter.sort_by(f64::total_cmp);
            let q = |v: &[f64], p: f64| v[((v.len() - 1) as f64 * p) as usize];
            println!(
                "intra d: p50={:.3} p90={:.3} p99={:.3}  inter-NN d: p10={:.3} p50={:.3}",
                q(&intra, 0.5),
                q(&intra, 0.9),
                q(&intra, 0.99),
                q(&inter, 0.1),
                q(&inter, 0.5)
            );
        }
        "corpus" => {
            // intrinsic ambiguity of the corpus: for each ordered pair of
            // training volumes, the minimum voxel L2 distance over all
            // relative orientations, normalized by the median volume norm
            let orientations = enumerate_orientations([16, 16, 16]);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut norms: Vec<f64> = train.iter().map(|v| norm(v.voxels())).collect();
            norms.sort_by(f64::total_cmp);
            let med_norm = norms[norms.len() / 2];
            let mut ratios = Vec::new();
            for (i, vi) in train.iter().enumerate() {
                let augs: Vec<Vec<f64>> = orientations
                    .iter()
                    .map(|o| {
                        memaud_core::volumes::apply_orientation(vi, o)
                            .unwrap()
                            .voxels()
                            .to_vec()
                    })
                    .collect();
                let mut best = f64::INFINITY;
                for (j, vj) in train.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    for a in &augs {
                        let d = a
                            .iter()
                            .zip(vj.voxels())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        best = best.min(d);
                    }
                }
                ratios.push(best / med_norm);
            }
            ratios.sort_by(f64::total_cmp);
            let q = |p: f64| ratios[((ratios.len() - 1) as f64 * p) as usize];
            println!(
                "nearest-other-orbit / median-norm: min={:.3} p10={:.3} p50={:.3} p90={:.3}",
                ratios[0],
                q(0.1),
                q(0.5),
                q(0.9)
            );
            let low = ratios.iter().filter(|&&r| r < 0.5).count();
            println!("volumes with ratio < 0.5: {low}/64");
        }
        other => panic!("unknown pilot {other}"),
    }
}
