mod common;

use common::{micro_config, micro_plan, single_sample_dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgnet::dataset::{generate_dataset, DatasetConfig};
use cgnet::model::{image_tensor, load_checkpoint, ModelConfig, Weights};
use cgnet::scene::{generate_scene, SceneConfig};
use cgnet::train::{checkpoint_path, gradient_check, step_loss, train, TrainConfig};

fn jittered_micro(seed: u64) -> Weights<f64> {
    let mut w = Weights::<f64>::new(&micro_config(), 11).unwrap();
    // Move off zero biases so no activation sits exactly on a ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in w.params_mut() {
        p.value.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    w
}

fn micro_image() -> Vec<f64> {
    image_tensor::<f64>(&generate_scene(&SceneConfig::default(), 5).unwrap().image)
}

#[test]
fn gradients_match_finite_differences() {
    let errs = gradient_check(&jittered_micro(2), &micro_image(), &micro_plan(), 4, 1e-6);
    for (n, e) in &errs {
        assert!(*e < 1e-4, "{n}: {e:e}");
    }
}

#[test]
fn loss_ignores_roi_order() {
    let w = jittered_micro(3);
    let x = micro_image();
    let plan = micro_plan();
    let mut shuffled = plan.clone();
    shuffled.rois.reverse();
    shuffled.rois.swap(0, 2);
    let mut ga = w.zeros_like();
    let mut gb = w.zeros_like();
    let a = step_loss(&w, &x, &plan, 4, Some(&mut ga));
    let b = step_loss(&w, &x, &shuffled, 4, Some(&mut gb));
    assert!((a.total() - b.total()).abs() < 1e-12);
    for (p, q) in ga.params().iter().zip(gb.params()) {
        for (u, v) in p.value.data.iter().zip(&q.value.data) {
            assert!((u - v).abs() < 1e-10, "{}", p.name);
        }
    }
}

#[test]
fn memorizes_one_sample() {
    let ds = single_sample_dataset(1);
    let tc = TrainConfig { iterations: 200, log_every: 0, word_dropout: 0.0, ..Default::default() };
    let out = train(&ds, &ModelConfig::toy(), &tc, None, None).unwrap();
    let first = out.history[0].parts.total();
    let last = out.history[199].parts.total();
    assert!(last < 0.05 * first, "{first} -> {last}");
}

fn small_run() -> (cgnet::dataset::Dataset, TrainConfig) {
    let (ds, _) = generate_dataset(&DatasetConfig { scenes: 6, seed: 3, ..Default::default() }).unwrap();
    let tc = TrainConfig { iterations: 8, log_every: 0, seed: 5, ..Default::default() };
    (ds, tc)
}

#[test]
fn training_is_deterministic_and_learns_embeddings() {
    let (ds, tc) = small_run();
    let a = train(&ds, &ModelConfig::toy(), &tc, None, None).unwrap();
    let b = train(&ds, &ModelConfig::toy(), &tc, None, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.weights, b.checkpoint.weights);
    assert!(a.history.iter().all(|r| r.parts.total() >= 0.0));

    let init = Weights::<f32>::new(&ModelConfig::toy().with_vocab(ds.vocab.len()), cgnet::manifest::derive_seed(tc.seed, 0x1417)).unwrap();
    let name = "command.embed";
    assert_ne!(init.get(name).unwrap().data, a.checkpoint.weights.get(name).unwrap().data);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (ds, tc) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig { checkpoint_every: 3, ..tc };
    let full = train(&ds, &ModelConfig::toy(), &tc, Some(dir.path()), None).unwrap();
    let mid = load_checkpoint(&checkpoint_path(dir.path(), 3)).unwrap();
    assert_eq!(mid.iteration, 3);
    let resumed = train(&ds, &ModelConfig::toy(), &tc, None, Some(mid)).unwrap();
    assert_eq!(resumed.checkpoint.weights, full.checkpoint.weights);
    assert_eq!(resumed.checkpoint.optimizer, full.checkpoint.optimizer);
    assert_eq!(resumed.history, full.history[3..]);
}
