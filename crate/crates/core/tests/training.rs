use rand::Rng;
use vitprobe::data::ImageBatch;
use vitprobe::grad::{finetune, loss_and_grads, TrainConfig};
use vitprobe::io::init_toy;
use vitprobe::rng::keyed_rng;
use vitprobe::tensor::{clip_global_norm, global_norm};
use vitprobe::{ModelConfig, Tensor};

/// Class 0 is reddish, class 1 bluish, with uniform pixel noise. Color
/// survives flips and crops; a spatial cue would interact with the crop's
/// zero padding.
fn two_colors(n: usize, seed: u64) -> ImageBatch {
    let s = 32;
    let mut rng = keyed_rng(seed, "two-colors", 0);
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let tint = if y == 0 { [0.7, 0.4, 0.3] } else { [0.3, 0.4, 0.7] };
        for base in tint {
            for _ in 0..s * s {
                data.push(base + rng.gen_range(-0.25f32..0.25));
            }
        }
    }
    ImageBatch::new(Tensor::new(vec![n, 3, s, s], data).unwrap(), labels, 2).unwrap()
}

/// Runs the perceptron rule until an epoch without mistakes.
fn perceptron_separates(batch: &ImageBatch) -> bool {
    let d = batch.image_len();
    let mut w = vec![0.0f64; d + 1];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for i in 0..batch.len() {
            let x = batch.image(i);
            let y = if batch.labels[i] == 1 { 1.0 } else { -1.0 };
            let score: f64 = w[d] + x.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>();
            if y * score <= 0.0 {
                mistakes += 1;
                for (wk, &a) in w.iter_mut().zip(x) {
                    *wk += y * a as f64;
                }
                w[d] += y;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

fn two_class_toy() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        ..ModelConfig::toy()
    }
}

#[test]
fn separable_two_class_set_is_learned() {
    let data = two_colors(160, 1);
    assert!(perceptron_separates(&data));
    let cfg = two_class_toy();
    let tc = TrainConfig {
        total_steps: 200,
        lr_grid: vec![1e-2, 3e-2],
        ..TrainConfig::default()
    };
    let res = finetune(&data, &init_toy(&cfg, 0), &cfg, &tc).unwrap();
    assert_eq!(res.best.val_accuracy, 1.0, "{:?}", res.runs.iter().map(|r| &r.evaluations).collect::<Vec<_>>());
}

#[test]
fn single_rate_log_shape_and_determinism() {
    let data = two_colors(40, 2);
    let cfg = two_class_toy();
    let tc = TrainConfig {
        total_steps: 30,
        eval_interval: 20,
        batch_size: 8,
        lr_grid: vec![1e-2],
        ..TrainConfig::default()
    };
    let a = finetune(&data, &init_toy(&cfg, 0), &cfg, &tc).unwrap();
    assert_eq!(a.runs.len(), 1);
    assert_eq!(a.runs[0].log.len(), 30);
    assert_eq!(a.runs[0].evaluations.len(), 2);
    assert_eq!(
        a.runs[0].evaluations.iter().map(|e| e.0).collect::<Vec<_>>(),
        vec![20, 30]
    );
    let b = finetune(&data, &init_toy(&cfg, 0), &cfg, &tc).unwrap();
    assert_eq!(a.best.weights, b.best.weights);
    assert_eq!(a.runs[0].log, b.runs[0].log);

    let grid = TrainConfig {
        lr_grid: vec![1e-3, 1e-2],
        ..tc
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| finetune(&data, &init_toy(&cfg, 0), &cfg, &grid).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.best.weights, four.best.weights);
    assert_eq!(one.log().collect::<Vec<_>>(), four.log().collect::<Vec<_>>());
}

#[test]
fn duplicated_batch_keeps_loss_and_gradients() {
    let cfg = ModelConfig::toy();
    let w = init_toy(&cfg, 3).cast::<f64>();
    let mut rng = keyed_rng(3, "dup", 0);
    let n = 4;
    let len = cfg.image_len();
    let px: Vec<f64> = (0..n * len).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = vec![1, 7, 3, 3];
    let x = Tensor::new(vec![n, 3, 32, 32], px.clone()).unwrap();
    let mut twice = px.clone();
    twice.extend(&px);
    let x2 = Tensor::new(vec![2 * n, 3, 32, 32], twice).unwrap();
    let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let (l1, g1) = loss_and_grads(&x, &labels, &w, &cfg).unwrap();
    let (l2, mut g2) = loss_and_grads(&x2, &labels2, &w, &cfg).unwrap();
    assert!((l1 - l2).abs() < 1e-7, "{l1} vs {l2}");
    for (a, b) in g1.tensors().into_iter().zip(g2.tensors()) {
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-7, "{p} vs {q}");
        }
    }
    let pre = clip_global_norm(g2.tensors_mut(), 1.0).unwrap();
    assert!(pre > 0.0);
    assert!(global_norm(&g2.tensors().into_iter().cloned().collect::<Vec<_>>()) <= 1.0 + 1e-6);
}
