use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Duration;

use guidedpose::gradcheck::{self, GradcheckOptions, Kernel, TOLERANCE};
use guidedpose::inference_pipeline::{
    infer_poses, parse_pose_records, write_pose_records, InferenceResult, PipelineConfig, PoseRecord, PoseStatus,
    RegressionMode, VotingParams,
};
use guidedpose::pose_geometry::{add_metric, projection_metric, recall_report, Outcome, RansacParams};
use guidedpose::synthgen::{random_scene, NoiseSpec};
use guidedpose::tensor_io::write_scene;

use crate::files::{self, load_inputs, load_models, load_scene, read_text, write_bytes, write_map, Inputs};
use crate::{BenchArgs, CliError, CliResult, EvalArgs, GenArgs, GradcheckArgs, InferArgs, Mode, PipelineArgs, Status};

/// Noise draws use their own stream so scene layout and noise stay
/// independent for one seed.
const NOISE_SALT: u64 = 0x6e_6f69_7365;

pub fn gen(a: &GenArgs) -> CliResult {
    let noise = NoiseSpec {
        angular_sigma: a.noise_sigma,
        outlier_fraction: a.outliers,
        seed: a.seed ^ NOISE_SALT,
    };
    noise.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| files::io_error(&a.out, e))?;
    let scene = random_scene(a.objects, a.seed);
    let rendered = scene.render(&noise)?;
    let dir = &a.out;
    write_bytes(&dir.join(files::SCENE_FILE), write_scene(&scene.description()).as_bytes())?;
    write_map(&dir.join(files::SEG_FILE), rendered.seg.probs())?;
    write_map(&dir.join(files::FIELD_FILE), &rendered.field)?;
    write_map(&dir.join(files::CONF_FILE), &rendered.raw_conf)?;
    let gt: Vec<PoseRecord> = scene
        .objects
        .iter()
        .map(|o| PoseRecord {
            class_id: o.class_id,
            pose: o.pose,
            keypoints: rendered.keypoints[&o.class_id].iter().flat_map(|p| [p.x, p.y]).collect(),
            status: PoseStatus::Ok,
        })
        .collect();
    write_bytes(&dir.join(files::GT_FILE), write_pose_records(&gt).as_bytes())?;
    println!("wrote {} objects to {}", a.objects, dir.display());
    Ok(())
}

fn pipeline_config(p: &PipelineArgs) -> PipelineConfig {
    PipelineConfig {
        mode: match p.mode {
            Mode::Dkr => RegressionMode::Dkr,
            Mode::Rv => RegressionMode::RansacVoting,
        },
        min_component_pixels: p.min_component_pixels,
        voting: VotingParams {
            hypotheses: p.hypotheses,
            inlier_cosine: p.inlier_cosine,
            seed: 0,
        },
        pnp: RansacParams {
            iterations: p.pnp_iterations,
            threshold: p.pnp_threshold,
            ..RansacParams::default()
        },
        seed: p.seed,
    }
}

fn run_pipeline(inputs: &Inputs, cfg: &PipelineConfig) -> CliResult<InferenceResult> {
    Ok(infer_poses(
        &inputs.seg,
        &inputs.field,
        &inputs.raw_conf,
        &inputs.models,
        &inputs.scene.intrinsics,
        cfg,
    )?)
}

fn records_of(result: &InferenceResult) -> Vec<PoseRecord> {
    result
        .classes
        .iter()
        .map(|(&c, r)| PoseRecord::from_result(c, r))
        .collect()
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn infer(a: &InferArgs) -> CliResult {
    let inputs = load_inputs(&a.input)?;
    let cfg = pipeline_config(&a.pipeline);
    let result = run_pipeline(&inputs, &cfg)?;
    let records = write_pose_records(&records_of(&result));
    match &a.out {
        Some(path) => write_bytes(path, records.as_bytes())?,
        None => print!("{records}"),
    }
    let t = &result.timing;
    println!("# timing.cc_ms={:.4}", ms(t.components));
    println!("# timing.keypoints_ms={:.4}", ms(t.keypoints));
    println!("# timing.pnp_ms={:.4}", ms(t.pnp));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let models = load_models(&scene, &a.scene)?;
    let est = parse_pose_records(&read_text(&a.est)?)?;
    let gt = parse_pose_records(&read_text(&a.gt)?)?;
    let gt_by_class: BTreeMap<u32, &PoseRecord> = gt.iter().map(|r| (r.class_id, r)).collect();
    let est_by_class: BTreeMap<u32, &PoseRecord> = est.iter().map(|r| (r.class_id, r)).collect();
    if let Some(c) = est_by_class.keys().find(|c| !gt_by_class.contains_key(c)) {
        return Err(CliError::new(
            Status::Mismatch,
            format!("class {c} is estimated but has no ground truth"),
        ));
    }
    if let Some(c) = gt_by_class.keys().find(|c| !models.contains_key(c)) {
        return Err(CliError::new(Status::Mismatch, format!("class {c} has no model in the scene")));
    }
    let k = scene.intrinsics;
    let mut adds = Vec::new();
    let mut proj = Vec::new();
    let mut rows = String::new();
    for (&c, g) in &gt_by_class {
        let model = &models[&c];
        let detected = est_by_class.get(&c).filter(|e| e.status == PoseStatus::Ok);
        let (a_ok, p_ok, a_val, p_val) = match detected {
            Some(e) => {
                let am = add_metric(&e.pose, &g.pose, model);
                let pm = projection_metric(&e.pose, &g.pose, model, &k);
                (
                    Some(am.correct),
                    Some(pm.is_some_and(|m| m.correct)),
                    format!("{:.6}", am.value),
                    pm.map_or("behind".into(), |m| format!("{:.4}", m.value)),
                )
            }
            None => (None, None, "-".into(), "-".into()),
        };
        adds.push(Outcome {
            class_id: c,
            correct: a_ok,
        });
        proj.push(Outcome {
            class_id: c,
            correct: p_ok,
        });
        writeln!(rows, "{c:>5}  {a_val:>12}  {:>10.6}  {p_val:>10}", 0.1 * model.diameter).unwrap();
    }
    let ra = recall_report(&adds);
    let rp = recall_report(&proj);
    println!("class  add(s)_m      thresh_m    2dp_px");
    print!("{rows}");
    for (c, v) in &ra.per_class {
        println!("class.{c}.adds_recall={v:.1}");
        println!("class.{c}.proj2d_recall={:.1}", rp.per_class[c]);
    }
    println!("mean.adds_recall={:.1}", ra.mean);
    println!("mean.proj2d_recall={:.1}", rp.mean);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let parse = |s: &str| s.trim().parse::<Kernel>().map_err(|e| CliError::new(Status::Failure, e.to_string()));
    let kernels: Vec<Kernel> = if a.kernels.is_empty() {
        Kernel::ALL.to_vec()
    } else {
        a.kernels.iter().map(|s| parse(s)).collect::<CliResult<_>>()?
    };
    let opts = GradcheckOptions {
        instances: a.instances,
        seed: a.seed,
        corrupt: a.corrupt.as_deref().map(parse).transpose()?,
    };
    let reports = gradcheck::run(&kernels, &opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<14} max_rel_err={:.3e} instances={} coords={} {verdict}",
            r.kernel.name(),
            r.max_relative_error,
            r.instances,
            r.coordinates
        );
        if !r.passed() {
            failed.push(r.kernel.name());
        }
    }
    if failed.is_empty() {
        println!("all kernels below {TOLERANCE:e}");
        Ok(())
    } else {
        Err(CliError::new(Status::Gradcheck, format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Below this many repetitions the statistics are marked low-confidence.
const CONFIDENT_REPS: usize = 100;

pub fn bench(a: &BenchArgs) -> CliResult {
    if a.reps == 0 {
        return Err(CliError::new(Status::Failure, "--reps must be at least 1"));
    }
    let inputs = load_inputs(&a.input)?;
    let cfg = pipeline_config(&a.pipeline);
    for _ in 0..a.warmup {
        run_pipeline(&inputs, &cfg)?;
    }
    let mut stages: [Vec<f64>; 4] = Default::default();
    let mut reference = None;
    let mut deterministic = true;
    for _ in 0..a.reps {
        let r = run_pipeline(&inputs, &cfg)?;
        let t = r.timing;
        let times = [ms(t.components), ms(t.keypoints), ms(t.pnp)];
        for (s, v) in stages.iter_mut().zip(times) {
            s.push(v);
        }
        stages[3].push(times.iter().sum());
        let out = write_pose_records(&records_of(&r));
        match &reference {
            None => reference = Some(out),
            Some(first) => deterministic &= *first == out,
        }
    }
    let names = ["cc", "keypoints", "pnp", "total"];
    println!("stage        median_ms     p95_ms");
    let mut kv = String::new();
    for (name, samples) in names.iter().zip(stages.iter_mut()) {
        samples.sort_by(f64::total_cmp);
        let (med, p95) = (percentile(samples, 0.5), percentile(samples, 0.95));
        println!("{name:<10} {med:>11.4} {p95:>10.4}");
        writeln!(kv, "bench.{name}.median_ms={med:.4}").unwrap();
        writeln!(kv, "bench.{name}.p95_ms={p95:.4}").unwrap();
    }
    print!("{kv}");
    println!("bench.reps={}", a.reps);
    println!("bench.deterministic={deterministic}");
    println!("bench.low_confidence={}", a.reps < CONFIDENT_REPS);
    if !deterministic {
        return Err(CliError::new(Status::Mismatch, "pipeline outputs differed between repetitions"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::percentile;

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.5), 10.0);
        assert_eq!(percentile(&s, 0.95), 19.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }
}
