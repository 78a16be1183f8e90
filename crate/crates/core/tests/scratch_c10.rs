//! Scratch hyperparameter sweep (deleted later).
use evspike_core::bench::*;
use evspike_core::events::*;
use evspike_core::models::*;
use evspike_core::train::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

const WINDOW: u64 = 40_000;

fn accumulate_set(set: &[LabeledStream], mode: AccumMode) -> Vec<TrainSample> {
    set.iter().map(|s| {
        let cfg = AccumulationConfig { window_us: WINDOW, mode, width: 32, height: 32, group: 1 };
        TrainSample { frames: accumulate(&s.stream, &cfg).unwrap().frames, label: s.label }
    }).collect()
}

fn reduced_with(neuron: NeuronMode, theta: f64, beta: f64) -> ModelGraph {
    let _ = ();
    build_from_config(&ModelConfig {
        arch: ArchKind::CnnMlp, neuron, input_hw: 32,
        conv_channels: Some(vec![8, 16]), fc_dims: Some(vec![32]),
        blocks: 1, patch: None, model_dim: 4, d_state: 2,
        sigma_theta: 1.0, lif_alpha: 0.5, lif_beta: beta, lif_theta: theta,
        timestep_us: Some(WINDOW), decision_group: Some(3), seed: 42,
    }).unwrap()
}

fn run(neuron: NeuronMode, lr: f64, theta: f64, beta: f64, temp: f64, qat: bool, epochs: u64,
       train: &[LabeledStream], test: &[LabeledStream]) {
    let graph = reduced_with(neuron, theta, beta);
    let mode = if graph.meta.binary_input { AccumMode::Binary } else { AccumMode::Graded };
    let samples = accumulate_set(train, mode);
    let falls: Vec<usize> = (0..samples.len()).filter(|i| samples[*i].label).collect();
    let nofalls: Vec<usize> = (0..samples.len()).filter(|i| !samples[*i].label).collect();
    let cfg = TrainConfig {
        batch_size: 16, lr, qat, seed: 7, margin_temp: temp,
        focal: FocalLossParams { alpha: 0.5, gamma: 2.0 },
        ..Default::default()
    };
    let mut trainer = Trainer::new(graph, cfg).unwrap();
    let mut cursor = 0usize;
    for e in 0..epochs {
        let mut order = nofalls.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + e);
        order.shuffle(&mut rng);
        let mut losses = vec![];
        for chunk in order.chunks(12) {
            let mut batch: Vec<TrainSample> = chunk.iter().map(|i| samples[*i].clone()).collect();
            for _ in 0..4 {
                batch.push(samples[falls[cursor % falls.len()]].clone());
                cursor += 1;
            }
            losses.push(trainer.train_step(&batch).unwrap());
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if e >= 9 && (e + 1) % 5 == 0 {
            let trained = trainer.export();
            let r = run_benchmark(&trained, test, &BenchConfig::for_model(&trained)).unwrap();
            println!("  {neuron:?} lr {lr:.0e} th {theta} be {beta} T {temp} qat {qat} epoch {}: loss {loss:.4} f1 {:.3} (p/r {:.2}/{:.2}) synops {}",
                e + 1, r.metrics.f1, r.metrics.precision, r.metrics.recall, r.total_synops);
        }
    }
}

#[test]
fn sweep() {
    let params = SyntheticParams {
        width: 32, height: 32, n_samples: 800, fall_fraction: 0.07,
        noise_rate: 1000.0, track_rate: 15_000.0, duration_us: 800_000,
    };
    let train = gen_synthetic(42, &params).unwrap();
    let test = gen_synthetic(43, &SyntheticParams { n_samples: 200, ..params }).unwrap();
    run(NeuronMode::LifGraded, 1e-4, 1.0, 0.9, 0.5, false, 20, &train, &test);
    run(NeuronMode::LifGraded, 1e-4, 1.0, 0.8, 2.0, false, 20, &train, &test);
    run(NeuronMode::LifGraded, 3e-4, 1.0, 0.9, 2.0, false, 20, &train, &test);
}
