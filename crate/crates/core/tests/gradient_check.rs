use candling::nn::{Network, Tensor};
use candling::zoo::build_reference_cnn;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};

fn batch(n: usize, side: u32) -> Vec<(Tensor, usize)> {
    let model = build_reference_cnn((side, side), 0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    (0..n)
        .map(|i| {
            let img = RgbImage::from_fn(side, side, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
            (model.input_tensor(&img).unwrap(), i % 2)
        })
        .collect()
}

fn batch_loss(net: &Network, samples: &[(Tensor, usize)]) -> f64 {
    samples.iter().map(|(x, t)| net.loss(x, *t)).sum::<f64>() / samples.len() as f64
}

#[test]
fn head_gradients_match_central_differences() {
    let side = 32;
    let model = build_reference_cnn((side, side), 4);
    let samples = batch(4, side);
    let net = model.network();
    let mut grads = net.zero_gradients();
    for (x, t) in &samples {
        net.accumulate(x, *t, &mut grads);
    }
    grads.scale(1.0 / samples.len() as f64);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in model.head_param_ids() {
        let analytic = grads.slot(id).unwrap().to_vec();
        for (k, &g) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            plus.value_mut(id)[k] += h;
            let mut minus = net.clone();
            minus.value_mut(id)[k] -= h;
            let numeric = (batch_loss(&plus, &samples) - batch_loss(&minus, &samples)) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst:e}");
}
