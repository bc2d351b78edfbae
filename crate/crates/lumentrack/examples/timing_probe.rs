use lumentrack::airway::TreeGenConfig;
use lumentrack::perception::NoiseModel;
use lumentrack::scenario::{run_scenario, ScenarioConfig, TreeSource};
use std::time::Instant;

fn main() {
    let variants: Vec<(&str, TreeGenConfig, f64)> = vec![
        (
            "wide-angle",
            TreeGenConfig {
                generations: 4,
                branch_length: 26.0,
                branching_angle: 0.55,
                ring_amplitude: 0.12,
                bend_angle: 0.35,
                radius_decay: 0.75,
                taper: 0.8,
                ..TreeGenConfig::default()
            },
            0.45,
        ),
        (
            "narrow-angle2",
            TreeGenConfig {
                generations: 4,
                branch_length: 24.0,
                branching_angle: 0.4,
                ring_amplitude: 0.15,
                bend_angle: 0.35,
                radius_decay: 0.8,
                taper: 0.85,
                ..TreeGenConfig::default()
            },
            0.4,
        ),
    ];
    for (name, gen, speed) in variants {
        for seed in [7u64, 13, 21, 33] {
            let mut cfg = ScenarioConfig::default();
            cfg.tree = TreeSource::Generate(gen.clone());
            cfg.noise = NoiseModel::zero();
            cfg.render.width = 16;
            cfg.render.height = 16;
            cfg.path.speed_mm_per_frame = speed;
            cfg.path.n_frames = 200;
            let cfg = cfg.resolved(Some(seed));
            let start = Instant::now();
            match run_scenario(&cfg) {
                Ok(run) => {
                    let secs = start.elapsed().as_secs_f64();
                    let max_err = run.records.iter().filter_map(|r| r.position_error_mm()).fold(0.0f64, f64::max);
                    let branch_ok = run.records.iter().filter(|r| Some(r.branch_est) == r.branch_gt).count();
                    println!(
                        "{name:14} s{seed}: {secs:5.1}s ate {:6.3} maxerr {:6.2} sr5 {:.3} lost {:.3} br_acc {:.3}",
                        run.summary.ate_mean.unwrap(),
                        max_err,
                        run.summary.sr5.unwrap(),
                        run.summary.lost_fraction,
                        branch_ok as f64 / 200.0,
                    );
                }
                Err(e) => println!("{name:14} s{seed}: ERROR {e}"),
            }
        }
    }
}
