//! Command-line pipeline: refine, metrics, synth and calibrate.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use motion_refine::body::{Frame, Skeleton};
use motion_refine::contact::{contact_targets, ik_refine, ContactConfig};
use motion_refine::dynamics::DynamicsPredictions;
use motion_refine::geom::Camera;
use motion_refine::metrics::{evaluate_motion, MetricReport};
use motion_refine::motion::{camera_to_world, joints_world, MotionSequence};
use motion_refine::optim::{
    apply_scale, calibrate_scale, calibrate_translation_fit, refine, trace_csv, Calibration, OptimConfig,
};
use motion_refine::synth::{synthesize, Scenario, SynthConfig, FILES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const THREADS_ENV: &str = "MOTION_REFINE_THREADS";

pub const REFINED_FILE: &str = "refined.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONTACT_FILE: &str = "contact.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

fn default_true() -> bool {
    true
}

/// One refinement job. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub skeleton: PathBuf,
    pub camera: PathBuf,
    pub init: PathBuf,
    pub predictions: PathBuf,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub contact: ContactConfig,
    #[serde(default)]
    pub enable_postproc: bool,
    #[serde(default = "default_true")]
    pub emit_trace: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.skeleton);
        fix(&mut self.camera);
        fix(&mut self.init);
        fix(&mut self.predictions);
        if let Some(g) = self.gt.as_mut() {
            fix(g);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let mut inputs = vec![&self.skeleton, &self.camera, &self.init, &self.predictions];
        inputs.extend(self.gt.as_ref());
        for p in inputs {
            if !p.is_file() {
                return Err(anyhow!("{}: file not found", p.display()));
            }
        }
        self.optim.validate()?;
        self.contact.validate()?;
        Ok(())
    }
}

/// Loaded inputs of a pipeline run, init and gt already in world frame.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub skeleton: Skeleton,
    pub camera: Camera,
    pub init: MotionSequence,
    pub predictions: DynamicsPredictions,
    pub gt: Option<MotionSequence>,
}

fn to_world(seq: MotionSequence, cam: &Camera, skel: &Skeleton) -> motion_refine::Result<MotionSequence> {
    match seq.frame_tag {
        Frame::World => Ok(seq),
        Frame::Camera => camera_to_world(&seq, cam, skel),
    }
}

pub fn load_inputs(cfg: &PipelineConfig) -> anyhow::Result<Inputs> {
    cfg.validate()?;
    let skeleton = Skeleton::load(&cfg.skeleton)?;
    let camera = Camera::load(&cfg.camera)?;
    let init = MotionSequence::load(&cfg.init)?;
    let predictions = DynamicsPredictions::load(&cfg.predictions)?;
    let init = to_world(init, &camera, &skeleton)?;
    let gt = match &cfg.gt {
        Some(p) => Some(to_world(MotionSequence::load(p)?, &camera, &skeleton)?),
        None => None,
    };
    Ok(Inputs {
        skeleton,
        camera,
        init,
        predictions,
        gt,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineSummary {
    pub frames: usize,
    pub scale: f64,
    pub seed: u64,
    pub final_energy: motion_refine::energy::EnergyBreakdown,
    pub final_grad_norm: f64,
    pub postproc: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportPair {
    pub init: MetricReport,
    pub refined: MetricReport,
}

/// Everything a refine run produces, before anything touches disk.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub refined: MotionSequence,
    pub trace: Option<String>,
    pub contact: Option<String>,
    pub report: Option<ReportPair>,
    pub summary: RefineSummary,
    pub wall_time: f64,
}

pub fn run_pipeline(cfg: &PipelineConfig, inputs: &Inputs) -> anyhow::Result<RefineOutput> {
    let res = refine(&inputs.init, &inputs.skeleton, &inputs.camera, &inputs.predictions, &cfg.optim)?;
    let mut refined = res.refined;
    let mut contact = None;
    if cfg.enable_postproc {
        let joints = joints_world(&refined, &inputs.skeleton)?;
        let targets = contact_targets(&joints, &inputs.predictions, &inputs.skeleton, &cfg.contact)?;
        let out = ik_refine(&refined, &inputs.skeleton, &targets, &cfg.contact)?;
        contact = Some(out.report_csv());
        refined = out.motion;
    }
    let report = match &inputs.gt {
        Some(gt) => Some(ReportPair {
            init: evaluate_motion(&inputs.init, gt, &inputs.skeleton, &inputs.camera, None)?,
            refined: evaluate_motion(&refined, gt, &inputs.skeleton, &inputs.camera, None)?,
        }),
        None => None,
    };
    let trace = match (cfg.emit_trace, &res.trace) {
        (true, Some(t)) => Some(trace_csv(t)),
        _ => None,
    };
    Ok(RefineOutput {
        summary: RefineSummary {
            frames: refined.len(),
            scale: res.scale,
            seed: cfg.seed,
            final_energy: res.final_energy,
            final_grad_norm: res.final_grad_norm,
            postproc: cfg.enable_postproc,
        },
        refined,
        trace,
        contact,
        report,
        wall_time: res.wall_time,
    })
}

/// Writes files in order and deletes all of them if any write fails.
struct OutputSet {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn open(dir: &Path) -> anyhow::Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("{}: cannot create output directory", dir.display()))?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, contents).with_context(|| format!("{}: cannot write", path.display()))
    }

    fn discard(self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn write_outputs(dir: &Path, out: &RefineOutput) -> anyhow::Result<()> {
    let mut set = OutputSet::open(dir)?;
    let result = (|| {
        set.write(REFINED_FILE, &out.refined.to_json())?;
        if let Some(t) = &out.trace {
            set.write(TRACE_FILE, t)?;
        }
        if let Some(c) = &out.contact {
            set.write(CONTACT_FILE, c)?;
        }
        if let Some(r) = &out.report {
            set.write(REPORT_FILE, &serde_json::to_string_pretty(r)?)?;
        }
        set.write(SUMMARY_FILE, &serde_json::to_string_pretty(&out.summary)?)
    })();
    if result.is_err() {
        set.discard();
    }
    result
}

/// Loads, refines and writes one config. Returns the in-memory output.
pub fn refine_config(path: &Path) -> anyhow::Result<RefineOutput> {
    let cfg = PipelineConfig::load(path)?;
    let inputs = load_inputs(&cfg)?;
    let out = run_pipeline(&cfg, &inputs)?;
    write_outputs(&cfg.output_dir, &out)?;
    Ok(out)
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<motion_refine::Error>() {
        Some(motion_refine::Error::Diverged { .. }) => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

pub fn report_error(err: &anyhow::Error) -> i32 {
    eprintln!("error: {err:#}");
    exit_code(err)
}

pub fn cmd_refine(config: &Path) -> i32 {
    match refine_config(config) {
        Ok(out) => {
            print_refine_summary(config, &out);
            EXIT_OK
        }
        Err(e) => report_error(&e),
    }
}

fn print_refine_summary(config: &Path, out: &RefineOutput) {
    println!(
        "{}: {} frames, scale {:.6}, energy {:.6e}, {:.2} s",
        config.display(),
        out.summary.frames,
        out.summary.scale,
        out.summary.final_energy.total,
        out.wall_time
    );
    if let Some(r) = &out.report {
        println!("{:<12} {:>14} {:>14}", "metric", "init", "refined");
        for ((name, unit, a), (_, _, b)) in r.init.rows().into_iter().zip(r.refined.rows()) {
            println!("{name:<12} {a:>14.6} {b:>14.6} {unit}");
        }
    }
}

/// Manifest: a JSON array of config paths, relative to the manifest.
pub fn load_manifest(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read manifest", path.display()))?;
    let list: Vec<PathBuf> =
        serde_json::from_str(&text).with_context(|| format!("{}: invalid manifest", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(list.into_iter().map(|p| if p.is_relative() { base.join(p) } else { p }).collect())
}

/// Worker count: the request, capped by the environment variable.
pub fn effective_jobs(requested: usize, env: Option<&str>) -> usize {
    let cap = env.and_then(|v| v.trim().parse::<usize>().ok()).filter(|&c| c > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

/// Refines every config of a manifest; the exit code is the worst one.
pub fn cmd_refine_manifest(manifest: &Path, jobs: usize) -> i32 {
    let configs = match load_manifest(manifest) {
        Ok(c) => c,
        Err(e) => return report_error(&e),
    };
    let env = std::env::var(THREADS_ENV).ok();
    let workers = effective_jobs(jobs, env.as_deref()).min(configs.len().max(1));
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![EXIT_OK; configs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = configs.get(i) else { break };
                let code = match refine_config(path) {
                    Ok(out) => {
                        print_refine_summary(path, &out);
                        EXIT_OK
                    }
                    Err(e) => {
                        eprintln!("error: {}: {e:#}", path.display());
                        exit_code(&e)
                    }
                };
                codes.lock().expect("exit codes")[i] = code;
            });
        }
    });
    let codes = codes.into_inner().expect("exit codes");
    codes.into_iter().max().unwrap_or(EXIT_OK)
}

pub fn metrics_report(pred: &Path, gt: &Path, camera: &Path, skeleton: &Path) -> anyhow::Result<MetricReport> {
    for p in [pred, gt, camera, skeleton] {
        if !p.is_file() {
            return Err(anyhow!("{}: file not found", p.display()));
        }
    }
    let skel = Skeleton::load(skeleton)?;
    let cam = Camera::load(camera)?;
    let pred = to_world(MotionSequence::load(pred)?, &cam, &skel)?;
    let gt = to_world(MotionSequence::load(gt)?, &cam, &skel)?;
    Ok(evaluate_motion(&pred, &gt, &skel, &cam, None)?)
}

pub fn cmd_metrics(pred: &Path, gt: &Path, camera: &Path, skeleton: &Path, json_out: &Path) -> i32 {
    let run = || -> anyhow::Result<MetricReport> {
        let report = metrics_report(pred, gt, camera, skeleton)?;
        fs::write(json_out, report.to_json()).with_context(|| format!("{}: cannot write", json_out.display()))?;
        Ok(report)
    };
    match run() {
        Ok(report) => {
            print!("{}", report.table());
            EXIT_OK
        }
        Err(e) => report_error(&e),
    }
}

/// Synthesizes a scenario and writes its files plus a ready-to-run config.
pub fn synth_to_dir(scenario: Scenario, cfg: &SynthConfig, dir: &Path) -> anyhow::Result<PipelineConfig> {
    let out = synthesize(scenario, cfg)?;
    let pipeline = PipelineConfig {
        skeleton: FILES[0].into(),
        camera: FILES[3].into(),
        init: FILES[2].into(),
        predictions: FILES[4].into(),
        gt: Some(FILES[1].into()),
        output_dir: "out".into(),
        optim: OptimConfig::default(),
        contact: ContactConfig::default(),
        enable_postproc: false,
        emit_trace: true,
        seed: cfg.seed,
    };
    let result = (|| -> anyhow::Result<()> {
        out.save(dir)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&pipeline)?)
            .with_context(|| format!("{}: cannot write", path.display()))?;
        let path = dir.join("synth.json");
        fs::write(&path, serde_json::to_string_pretty(cfg)?)
            .with_context(|| format!("{}: cannot write", path.display()))?;
        Ok(())
    })();
    if let Err(e) = result {
        for f in FILES.iter().chain(&[CONFIG_FILE, "synth.json"]) {
            let _ = fs::remove_file(dir.join(f));
        }
        return Err(e);
    }
    Ok(pipeline)
}

pub fn cmd_synth(scenario: &str, cfg: &SynthConfig, dir: &Path) -> i32 {
    let run = || -> anyhow::Result<()> {
        let scenario: Scenario = scenario.parse()?;
        synth_to_dir(scenario, cfg, dir)?;
        println!("wrote {scenario} to {}", dir.display());
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(&e),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub mode: Calibration,
    pub scale: f64,
    pub speed_ratio: f64,
    pub translation_fit: f64,
}

pub fn calibration_report(cfg: &PipelineConfig, inputs: &Inputs) -> anyhow::Result<CalibrationReport> {
    let (skel, cam, preds) = (&inputs.skeleton, &inputs.camera, &inputs.predictions);
    let speed_ratio = calibrate_scale(&inputs.init, skel, cam, preds);
    let window = match cfg.optim.calibration {
        Calibration::TranslationFit { window } => window,
        _ => 10,
    };
    let translation_fit = calibrate_translation_fit(&inputs.init, skel, cam, preds, window)?;
    let scale = match cfg.optim.calibration {
        Calibration::Off => 1.0,
        Calibration::SpeedRatio => speed_ratio,
        Calibration::TranslationFit { .. } => translation_fit,
    };
    Ok(CalibrationReport {
        mode: cfg.optim.calibration,
        scale,
        speed_ratio,
        translation_fit,
    })
}

/// Prints the calibrated scale; with `write`, saves the scaled init.
pub fn cmd_calibrate(config: &Path, write: Option<&Path>) -> i32 {
    let run = || -> anyhow::Result<CalibrationReport> {
        let cfg = PipelineConfig::load(config)?;
        let inputs = load_inputs(&cfg)?;
        let report = calibration_report(&cfg, &inputs)?;
        if let Some(out) = write {
            apply_scale(&inputs.init, report.scale).save(out)?;
        }
        Ok(report)
    };
    match run() {
        Ok(r) => {
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            EXIT_OK
        }
        Err(e) => report_error(&e),
    }
}
