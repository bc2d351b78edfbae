use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use lumentrack::airway::AirwayError;
use lumentrack::camera::CameraError;
use lumentrack::metrics::{
    read_trajectory_csv, summarize, write_trajectory_csv, MetricsSummary,
};
use lumentrack::perception::{ObservationWriter, RecordedProvider, SimulatedProvider};
use lumentrack::pose::Pose;
use lumentrack::scenario::{
    join_gt, make_blackout_transit, read_gt_csv, run_scenario, synthesize_gt_path,
    track_recorded, write_gt_csv, ScenarioConfig, ScenarioError,
};

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(s) = cause.downcast_ref::<ScenarioError>() {
            return match s {
                ScenarioError::Invalid(_)
                | ScenarioError::Json(_)
                | ScenarioError::PathOutsideLumen { .. } => 1,
                ScenarioError::Airway(
                    AirwayError::InvalidConfig(_)
                    | AirwayError::InvalidTree(_)
                    | AirwayError::GenerationCollision { .. }
                    | AirwayError::BranchOutOfRange(_),
                ) => 1,
                ScenarioError::Camera(CameraError::InvalidIntrinsics(_)) => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 1;
            }
        }
    }
    2
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let cfg = ScenarioConfig::load(path)
        .with_context(|| format!("loading scenario config {}", path.display()))?;
    let cfg = cfg.resolved(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn write_materialized(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scenario.json"), cfg.to_json_string()?)?;
    Ok(())
}

pub fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let tree = cfg.tree()?;
    write_materialized(&cfg, out)?;
    let tree_path = out.join("tree.json");
    tree.save(&tree_path)?;
    println!(
        "wrote {} ({} branches, {} landmarks)",
        tree_path.display(),
        tree.len(),
        tree.n_landmarks()
    );
    Ok(())
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let tree = cfg.tree()?;
    let gt = synthesize_gt_path(&tree, &cfg)?;
    write_materialized(&cfg, out)?;
    tree.save(&out.join("tree.json"))?;
    write_gt_csv(&out.join("gt.csv"), &gt)?;

    let gt_poses: Vec<Pose> = gt.iter().map(|f| f.pose).collect();
    let mut provider = SimulatedProvider::new(
        &tree,
        &gt_poses,
        cfg.intrinsics,
        cfg.render_intrinsics(),
        cfg.render.options(),
        cfg.noise.clone(),
        cfg.degradation.clone(),
        cfg.labeling,
    );
    let mut writer = ObservationWriter::create(out)?;
    use lumentrack::perception::FrameProvider;
    for t in 0..gt.len() {
        let obs = provider.provide_frame(t)?;
        writer.append(&obs)?;
    }
    writer.finish()?;
    println!("wrote {} frames to {}", gt.len(), out.display());
    Ok(())
}

pub fn track(config: &Path, observations: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let tree = lumentrack::AirwayTree::load(&observations.join("tree.json"))?;
    let gt = read_gt_csv(&observations.join("gt.csv"))?;
    let mut provider = RecordedProvider::open(observations)?;
    if provider.n_landmarks() != tree.n_landmarks() {
        return Err(ScenarioError::Invalid(format!(
            "observation stream has {} landmarks per frame, tree has {}",
            provider.n_landmarks(),
            tree.n_landmarks()
        ))
        .into());
    }
    let (records, summary, _) = track_recorded(&cfg, &tree, &gt, &mut provider)?;
    std::fs::create_dir_all(out)?;
    write_materialized(&cfg, out)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &records)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    print_summary("track", &summary);
    Ok(())
}

pub fn eval(trajectory: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let mut records = read_trajectory_csv(trajectory)?;
    let gt = read_gt_csv(gt)?;
    let gt_ts: std::collections::BTreeSet<usize> = gt.iter().map(|f| f.t).collect();
    let overlap = records.iter().filter(|r| gt_ts.contains(&r.t)).count();
    if overlap == 0 {
        bail!(ScenarioError::Invalid(
            "trajectory and ground truth share no frame indices".into()
        ));
    }
    join_gt(&mut records, &gt);
    let summary = summarize(&records, None);
    let json = serde_json::to_string_pretty(&summary)?;
    match out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    print_summary("eval", &summary);
    Ok(())
}

fn print_summary(tag: &str, s: &MetricsSummary) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "[{tag}] ate_mean={} mm ate_std={} sr5={} sr10={} labeled={} reinits={} lost={:.3}",
        f(s.ate_mean),
        f(s.ate_std),
        f(s.sr5),
        f(s.sr10),
        s.n_frames_labeled,
        s.n_reinits,
        s.lost_fraction
    );
}

/// The benchmark matrix: clean and noisy tracking, the blackout-transit
/// re-initialization pair, and the three per-term ablations.
pub fn bench_cases(base_seed: u64, seeds_per_case: usize) -> Result<Vec<(String, ScenarioConfig)>> {
    let mut cases = Vec::new();
    for k in 0..seeds_per_case {
        let seed = base_seed + k as u64;

        let mut clean = ScenarioConfig::default();
        clean.noise = lumentrack::NoiseModel::zero();
        cases.push((format!("clean/seed_{seed}"), clean.resolved(Some(seed))));

        let noisy = ScenarioConfig::default();
        cases.push((format!("noisy/seed_{seed}"), noisy.resolved(Some(seed))));

        let blackout = make_blackout_transit(ScenarioConfig::default().resolved(Some(seed)), 10, 20)?;
        cases.push((format!("blackout_reinit/seed_{seed}"), blackout.clone()));
        let mut no_reinit = blackout;
        no_reinit.ablation.disable_reinit = true;
        cases.push((format!("blackout_noreinit/seed_{seed}"), no_reinit));

        for (name, set) in [
            ("wo_depth", 0usize),
            ("wo_landmark", 1),
            ("wo_centerline", 2),
        ] {
            let mut cfg = ScenarioConfig::default().resolved(Some(seed));
            match set {
                0 => cfg.ablation.disable_depth = true,
                1 => cfg.ablation.disable_landmark = true,
                _ => cfg.ablation.disable_centerline = true,
            }
            cases.push((format!("{name}/seed_{seed}"), cfg));
        }
    }
    Ok(cases)
}

pub fn bench(out: &Path, seed: u64, seeds_per_case: usize, jobs: usize) -> Result<()> {
    let cases = bench_cases(seed, seeds_per_case)?;
    std::fs::create_dir_all(out)?;
    let queue = Mutex::new(cases.into_iter().collect::<Vec<_>>());
    let results: Mutex<Vec<(String, MetricsSummary)>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let case = { queue.lock().unwrap().pop() };
                let Some((name, cfg)) = case else { break };
                match run_case(out, &name, &cfg) {
                    Ok(summary) => results.lock().unwrap().push((name, summary)),
                    Err(e) => failures.lock().unwrap().push(format!("{name}: {e:#}")),
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    println!("case                                ate_mean  sr5     sr10    lost   reinits");
    for (name, s) in &results {
        let f = |v: Option<f64>| v.map(|x| format!("{x:6.3}")).unwrap_or_else(|| "     -".into());
        println!(
            "{name:<36}{}  {}  {}  {:5.3}  {}",
            f(s.ate_mean),
            f(s.sr5),
            f(s.sr10),
            s.lost_fraction,
            s.n_reinits
        );
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        bail!("{} bench case(s) failed", failures.len());
    }
    Ok(())
}

fn run_case(out: &Path, name: &str, cfg: &ScenarioConfig) -> Result<MetricsSummary> {
    let dir = out.join(name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("scenario.json"), cfg.to_json_string()?)?;
    let run = run_scenario(cfg)?;
    write_trajectory_csv(&dir.join("trajectory.csv"), &run.records)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&run.summary)?,
    )?;
    Ok(run.summary)
}
