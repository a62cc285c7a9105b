use muralera_core::dunnet::{image_to_input, predict, train, NetConfig, NetParams, TrainSchedule};
use muralera_core::raster::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Colored squares (label 0) and circles (label 1) at random positions and sizes.
fn toy_set(n: usize, seed: u64) -> (Vec<RgbImage>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let r = rng.random_range(6.0..11.0);
        let (cx, cy) = (rng.random_range(12.0..20.0), rng.random_range(12.0..20.0));
        let color = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
        let bg = [0.1, 0.1, 0.1];
        images.push(RgbImage::from_fn(32, 32, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = if label == 0 { dx.abs() <= r && dy.abs() <= r } else { dx * dx + dy * dy <= r * r };
            if inside { color } else { bg }
        }));
        labels.push(label);
    }
    (images, labels)
}

#[test]
fn squares_versus_circles() {
    let config = NetConfig::desk();
    let (images, labels) = toy_set(200, 1);
    let inputs: Vec<Vec<f32>> = images.iter().map(|i| image_to_input(i, config.input_side)).collect();
    let schedule = TrainSchedule {
        lr0: 0.01,
        decay_step: 1000,
        total_iters: 2000,
        batch: 16,
        ..TrainSchedule::default()
    };
    let start = std::time::Instant::now();
    let out = train(NetParams::init(&config).unwrap(), &config, &schedule, &inputs, &labels, 7).unwrap();
    eprintln!("trained in {:?}", start.elapsed());
    let pred = predict(&out.params, &config, &inputs).unwrap();
    let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    eprintln!("training accuracy {acc}");
    assert!(acc >= 0.95, "training accuracy {acc}");
}
