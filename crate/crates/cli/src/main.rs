use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use restage::io::{self, OutDir, PairTruth, RunConfig};
use restage::metrics::{evaluate, tracking_l1_queried};
use restage::optim::{fit, gradient_check};
use restage::restage::{lemma_variance_experiment, restage, Ablation};
use restage::scene::build_knn_graph;
use restage::synth::{gen_pair, gradient_fixture};
use restage::visibility::render_depth;
use restage::{Error, Result, SceneModel};

#[derive(Parser)]
#[command(name = "restage", version, about = "Fit, restage and evaluate 4D point-track scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Preset name (`desk`, `full`, `default`) or path of a TOML config.
    #[arg(long, default_value = "default")]
    config: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a base/driving pair with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a scene model to one bundle.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Also dump the canonical-frame depth buffer as PGM.
        #[arg(long)]
        pgm: bool,
    },
    /// Rewind, fit jointly and restage onto the driving motion.
    Restage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        /// Comma-separated components to disable: rigidity, backtracing, joint.
        #[arg(long, default_value = "")]
        ablate: String,
        /// `truth.json` from `synth`, for tracking error.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Metrics of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// `truth.json` from `synth`; needs `--driving` for the query protocol.
        #[arg(long, requires = "driving")]
        truth: Option<PathBuf>,
        #[arg(long)]
        driving: Option<PathBuf>,
    },
    /// Analytic versus finite-difference gradients on a random instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 12)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        bases: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Joint versus solo pair-distance variance over the driving segment.
    Lemma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        driving: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Fit { common, .. }
            | Command::Restage { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Lemma { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, OutDir)> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    config.validate()?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = OutDir(common.out.clone());
    out.write_resolved(&config)?;
    Ok((config, out))
}

fn load_model(path: &Path) -> Result<SceneModel> {
    io::read_json(path)
}

fn run(command: &Command) -> Result<String> {
    let (config, out) = resolve(command.common())?;
    match command {
        Command::Synth { .. } => {
            let s = &config.synth;
            let driving = s.driving.clone().unwrap_or_else(|| s.scene.motion.clone());
            let pair = gen_pair(&s.scene, &driving, &s.artifacts)?;
            io::write_bundle(&pair.base, &out.file("base"))?;
            io::write_bundle(&pair.driving, &out.file("driving"))?;
            io::write_json(
                &out.file("truth.json"),
                &PairTruth {
                    base: pair.base_truth,
                    driving: pair.driving_truth,
                },
            )?;
            Ok(format!(
                "synth: {} tracks, {} + {} frames",
                pair.base.track_count(),
                pair.base.frame_count(),
                pair.driving.frame_count()
            ))
        }
        Command::Fit { bundle, pgm, .. } => {
            let bundle = io::read_bundle(bundle)?;
            let (model, _graph, report) = fit(&bundle, &config.weights, &config.optim)?;
            io::write_json(&out.file("model.json"), &model)?;
            io::write_json(&out.file("fit-report.json"), &report)?;
            if *pgm {
                let t = model.t_cano();
                let depth = render_depth(&model, bundle.camera(t), t)?;
                let (near, far) = depth.depth_bounds().unwrap_or((0.0, 1.0));
                io::write_atomic(&out.file("depth-canonical.pgm"), depth.to_pgm(near, far).as_bytes())?;
            }
            let track = report.final_values().map_or(f64::NAN, |v| v.track);
            Ok(format!("fit: {} splats, final track loss {track:.6e}", report.splats))
        }
        Command::Restage {
            base,
            driving,
            ablate,
            truth,
            ..
        } => {
            let ablation: Ablation = ablate.parse()?;
            let base = io::read_bundle(base)?;
            let driving = io::read_bundle(driving)?;
            let r = restage(&base, &driving, &config.weights, &config.optim, ablation)?;
            let mut metrics = evaluate(&r.model, &r.graph, 0..r.model.frame_count(), &config.metrics)?;
            if let Some(truth) = truth {
                let truth: PairTruth = io::read_json(truth)?;
                metrics.tracking_l1 = Some(tracking_l1_queried(&r.model, &truth.driving, &driving, None)?);
            }
            io::write_json(&out.file("model.json"), &r.model)?;
            io::write_json(&out.file("restage-report.json"), &r.report)?;
            io::write_json(&out.file("metrics.json"), &metrics)?;
            Ok(format!(
                "restage: {} splats ({} inserted), tracking_l1 {}",
                r.report.splats,
                r.report.inserted,
                metrics.tracking_l1.map_or("n/a".into(), |v| format!("{v:.6}"))
            ))
        }
        Command::Eval {
            model,
            truth,
            driving,
            ..
        } => {
            let model = load_model(model)?;
            let graph = build_knn_graph(&model, config.weights.knn_k)?;
            let mut metrics = evaluate(&model, &graph, 0..model.frame_count(), &config.metrics)?;
            if let (Some(truth), Some(driving)) = (truth, driving) {
                let truth: PairTruth = io::read_json(truth)?;
                let driving = io::read_bundle(driving)?;
                metrics.tracking_l1 = Some(tracking_l1_queried(&model, &truth.driving, &driving, None)?);
            }
            io::write_json(&out.file("metrics.json"), &metrics)?;
            Ok(format!(
                "eval: volume_consistency {:.6}, edge_consistency {:.6}",
                metrics.volume_consistency, metrics.edge_consistency
            ))
        }
        Command::Gradcheck {
            points,
            frames,
            bases,
            eps,
            ..
        } => {
            let f = gradient_fixture(config.seed, *points, *frames, *bases)?;
            let report = gradient_check(&f.model, &f.bundle, &f.graph, &config.weights, Some(&f.zeta), *eps)?;
            io::write_json(&out.file("gradcheck.json"), &report)?;
            Ok(format!("gradcheck: worst relative error {:.3e}", report.worst()))
        }
        Command::Lemma { base, driving, .. } => {
            let base = io::read_bundle(base)?;
            let driving = io::read_bundle(driving)?;
            let report =
                lemma_variance_experiment(&base, &driving, &config.weights, &config.optim, &config.lemma, config.seed)?;
            io::write_json(&out.file("lemma.json"), &report)?;
            Ok(format!(
                "lemma: joint {:.6e}, solo {:.6e}, ratio {:.6}",
                report.sigma2, report.sigma0, report.ratio
            ))
        }
    }
}
