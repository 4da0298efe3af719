mod common;

use common::*;
use gablab_core::erf::{central_patch_index, channel_mean_gradient, erf_dataset, erf_single, noise_images};
use gablab_core::rpe::{RpeKind, RpeProvider};
use gablab_core::vit::{ViTConfig, ViTModel};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ViTConfig {
    ViTConfig {
        image_height: 12,
        image_width: 12,
        channels: 2,
        embed_dim: 16,
        rpe_mlp_hidden: 16,
        ..Default::default()
    }
}

#[test]
fn input_gradient_matches_reference_differences() {
    let cfg = tiny();
    let model = ViTModel::new(cfg.clone(), 6).unwrap();
    let target = central_patch_index(cfg.grid_h(), cfg.grid_w());
    let reference = Reference::new(&model);
    let d = cfg.embed_dim;
    let y = |img: &[f64]| reference.forward(img).0[target * d..(target + 1) * d].iter().sum::<f64>() / d as f64;

    let image = noise_images(3, 1, cfg.image_shape()).next().unwrap();
    let g = channel_mean_gradient(&model, &image, target).unwrap();
    let base = to_f64(image.data());
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pixel in sample(&mut rng, cfg.image_height * cfg.image_width, 20) {
        let h = 1e-4;
        let mut fd = 0.0;
        for ch in 0..c {
            let mut plus = base.clone();
            plus[pixel * c + ch] += h;
            let mut minus = base.clone();
            minus[pixel * c + ch] -= h;
            fd += (y(&plus) - y(&minus)) / (2.0 * h);
        }
        fd /= c as f64;
        let got = g.data()[pixel] as f64;
        let rel = (got - fd).abs() / fd.abs();
        assert!(rel <= 1e-3, "pixel {pixel}: {got} vs {fd} (rel {rel})");
    }
}

#[test]
fn dataset_average_matches_f64_accumulation() {
    let cfg = tiny();
    let model = ViTModel::new(cfg.clone(), 2).unwrap();
    let target = central_patch_index(cfg.grid_h(), cfg.grid_w());
    let images: Vec<_> = noise_images(17, 64, cfg.image_shape()).collect();
    let map = erf_dataset(&model, images.clone(), target).unwrap();
    assert_eq!(map.sample_count, 64);

    let singles: Vec<Vec<f64>> =
        images.iter().map(|im| to_f64(erf_single(&model, im, target).unwrap().data())).collect();
    // two-pass: mean, then a correction from the residuals
    let n = singles.len() as f64;
    let expected: Vec<f64> = (0..map.values.len())
        .map(|p| {
            let mean = singles.iter().map(|s| s[p]).sum::<f64>() / n;
            mean + singles.iter().map(|s| s[p] - mean).sum::<f64>() / n
        })
        .collect();
    assert!(max_abs_diff(&map.values, &expected) <= 1e-5);
    assert!(map.values.iter().all(|&v| v >= 0.0));

    let reversed = erf_dataset(&model, images.into_iter().rev(), target).unwrap();
    assert!(max_abs_diff32(&reversed.values, &map.values) <= 1e-6);
}

/// Pearson correlation of a relative bias with `−distance²`, pooled over
/// heads and all query/key pairs.
fn distance_correlation(bias: &[f32], heads: usize, gh: usize, gw: usize) -> f64 {
    let n = gh * gw;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for h in 0..heads {
        for q in 0..n {
            for k in 0..n {
                let dr = (q / gw) as f64 - (k / gw) as f64;
                let dc = (q % gw) as f64 - (k % gw) as f64;
                xs.push(-(dr * dr + dc * dc));
                ys.push(bias[(h * n + q) * n + k] as f64);
            }
        }
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn reinitialized_mlp_bias_has_no_distance_trend() {
    let (gh, gw, heads) = (5, 5, 2);
    let provider = RpeProvider::new(RpeKind::RelPosMlp, gh, gw, 1, heads, 64, 0).unwrap().unwrap();
    let rhos: Vec<f64> = (0..20)
        .map(|seed| {
            let fresh = provider.reinitialize(seed);
            distance_correlation(fresh.materialize_tensor(0).unwrap().data(), heads, gh, gw)
        })
        .collect();
    let mean_abs = rhos.iter().map(|r| r.abs()).sum::<f64>() / rhos.len() as f64;
    assert!(mean_abs < 0.3, "mean |rho| = {mean_abs}, {rhos:?}");
}
