use jointdiff::schedule::NoiseSchedule;
use jointdiff::synthworld::{render_scene, sample_scene_params, sample_seed};
use jointdiff::trainer::{fit_modality_stats, Batch, Stage1Trainer};
use jointdiff::unet::{build_model, BranchConfig, UNetConfig};
use std::time::Instant;

fn main() {
    for (res, width, batch_n) in [(24usize, 16usize, 4usize), (48, 32, 4)] {
        let bundles: Vec<_> = (0..16)
            .map(|i| render_scene(&sample_scene_params(sample_seed(1, i)), res).unwrap())
            .collect();
        let stats = fit_modality_stats(bundles.iter()).unwrap();
        let refs: Vec<_> = bundles.iter().take(batch_n).collect();
        let batch = Batch::from_bundles(&refs, &stats).unwrap();
        let cfg = UNetConfig::toy(BranchConfig::rgbdn(), width, vec![1, 2, 4]);
        let (net, vs) = build_model(&cfg, 0).unwrap();
        let schedule = NoiseSchedule::linear(1000, 8.5e-4, 0.012)
            .unwrap()
            .rescale_terminal_snr()
            .unwrap();
        let mut tr = Stage1Trainer::new(net, vs, schedule, stats, 1e-4, 0.01, 0.15, 0.999, 2);
        tr.step(&batch).unwrap(); // warmup
        let t0 = Instant::now();
        let n_steps = 10;
        for _ in 0..n_steps {
            tr.step(&batch).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n_steps as f64;
        println!("res {} width {} batch {}: {:.3} s/step -> {:.1} s / 1000 steps", res, width, batch_n, dt, dt * 1000.0);
    }
}
