// Scratch probe for desk-scale training dynamics (temporary).

use evroi::event::{generate_synthetic_sample, SynthConfig};
use evroi::grad::{train, TrainConfig};
use evroi::net::{parse_network_file, Model};
use evroi::pipeline::PipelineConfig;
use rand::SeedableRng;

const DESK: &str = "
attention n=12 sigma=4.0 theta=10 s=3
net roi 128x128
layer maxpool k=8
layer conv in=2 out=8 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer conv in=8 out=16 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer relu_rnn units=40
layer output units=3
net classifier 12x12
layer conv in=2 out=12 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer conv in=12 out=24 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer output units=10
";

#[test]
#[ignore]
fn probe_desk_training() {
    let file = parse_network_file(DESK).unwrap();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
    let roi = Model::init_random(file.roi().unwrap(), &mut rng).unwrap();
    let cls = Model::init_random(file.classifier().unwrap(), &mut rng).unwrap();
    let pcfg = PipelineConfig::resolve(&file.attention, 128, 128);

    let synth = SynthConfig {
        timebins: 8,
        noise_fragments: 8,
        ..SynthConfig::default()
    };
    let mut samples = Vec::new();
    let mut bboxes = Vec::new();
    for i in 0..64u64 {
        let (s, _, bbox) = generate_synthetic_sample(1000 + i, &synth).unwrap();
        samples.push(s);
        bboxes.push(bbox);
    }
    let test: Vec<_> = (0..48u64)
        .map(|i| generate_synthetic_sample(9000 + i, &synth).unwrap().0)
        .collect();

    let cfg = TrainConfig {
        lr: 2e-3,
        lambda: 1e-4,
        epochs: 200,
        batch_size: 8,
        seed: 42,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&roi, &cls, &samples, Some(&test), &pcfg, &cfg).unwrap();
    println!("train time: {:?}", t0.elapsed());
    for row in out.log.rows.iter().step_by(20) {
        println!(
            "epoch {:3} loss {:.4} train_acc {:.3} test_acc {:?} sparsity {:?}",
            row.epoch, row.loss, row.train_acc, row.test_acc, row.sparsity
        );
    }
    let last = out.log.rows.last().unwrap();
    println!("final: {:?}", last);

    let mut dist_sum = 0.0;
    for (i, bbox) in bboxes.iter().enumerate() {
        let (cx, cy) = out.roi_centers[i];
        let (bx, by) = bbox.center();
        dist_sum += ((cx - bx).powi(2) + (cy - by).powi(2)).sqrt();
    }
    println!("mean roi-center distance: {:.2} px", dist_sum / 64.0);

    // Inspect per-sample ROI on a few test samples.
    use evroi::pipeline::{run_pair_dense, RoiMode};
    let mut test_dist = 0.0;
    let mut delta_sum = 0.0;
    for i in 0..48u64 {
        let (s, _, bbox) = generate_synthetic_sample(9000 + i, &synth).unwrap();
        let run = run_pair_dense(&out.roi, &out.cls, &s, &pcfg, RoiMode::Tgk).unwrap();
        let t = run.bins.len() as f64;
        let cx = run.bins.iter().map(|b| b.roi.g_x).sum::<f64>() / t;
        let cy = run.bins.iter().map(|b| b.roi.g_y).sum::<f64>() / t;
        delta_sum += run.bins.iter().map(|b| b.roi.delta).sum::<f64>() / t;
        let (bx, by) = bbox.center();
        test_dist += ((cx - bx).powi(2) + (cy - by).powi(2)).sqrt();
    }
    println!("test mean roi-center distance: {:.2} px, mean delta {:.2}", test_dist / 48.0, delta_sum / 48.0);
}
