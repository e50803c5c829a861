mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use posemap::error::Error as CoreError;
use posemap::eval::{
    datasize_sweep, evaluate, outlier_analysis, posemap_pca_viz, trajectory_plot, write_sweep,
    AprEstimator, Estimator, EvalReport, OraclePassthrough,
};
use posemap::field::FieldStage;
use posemap::scene::{
    desk_scene, load_manifest, make_desk_dataset, save_manifest, split_unlabelled, DatasetManifest,
    SceneDescription, Split,
};
use posemap::trainer::{Pipeline, RunDir, Stage3Data};

use config::{RunConfig, CONFIG_FILE};

#[derive(Parser, Debug)]
#[command(
    name = "posemap",
    version,
    about = "PoseMap camera localization on a synthetic desk scene",
    after_help = "Any configuration key can be overridden with a dotted flag, e.g. --trainer.stage3.iters=2000"
)]
struct Cli {
    /// TOML configuration; defaults to <run-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to $POSEMAP_RUN_ROOT/<name> (or runs/<name>).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "default")]
    name: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the desk dataset and write its manifest.
    MakeScene {
        /// Number of training views.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        test_views: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
    },
    /// Score a regressor and write reports and plots.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value = "test", value_parser = ["train", "test", "unlabelled"])]
    split: String,
    /// Regressor checkpoint to score; the latest of stages 4 and 3 by default.
    #[arg(long, value_parser = clap::value_parser!(u8).range(3..=4))]
    stage: Option<u8>,
    /// Score ground-truth passthrough instead of a trained regressor.
    #[arg(long)]
    oracle: bool,
    /// Cluster count and number of farthest test images.
    #[arg(long, num_args = 2, value_names = ["K", "N"])]
    outliers: Option<Vec<usize>>,
    /// Comma-separated training fractions, each retraining stage 3.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Also write a false-color PoseMap of the first training view.
    #[arg(long)]
    posemap_pca: bool,
}

enum Failure {
    Clap(clap::Error),
    Usage(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::MissingPrerequisite(_)) => 2,
        Some(CoreError::InvalidArgument(_)) => 1,
        _ => 3,
    }
}

struct RunContext {
    run: RunDir,
    config: RunConfig,
    echo: String,
}

impl RunContext {
    fn scene_dir(&self) -> PathBuf {
        self.run.root().join("scene")
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = self.scene_dir().join("manifest.txt");
        if !path.is_file() {
            return Err(CoreError::MissingPrerequisite(format!(
                "scene required ({} not found; run make-scene first)",
                path.display()
            ))
            .into());
        }
        Ok(load_manifest(&path)?)
    }

    fn scene(&self) -> Result<SceneDescription> {
        Ok(SceneDescription::load(
            &self.scene_dir().join("scene.json"),
        )?)
    }

    fn eval_dir(&self) -> PathBuf {
        self.run.root().join("eval")
    }
}

fn make_scene(ctx: &RunContext) -> Result<()> {
    let dir = ctx.scene_dir();
    let cfg = &ctx.config.scene;
    let full = make_desk_dataset(&desk_scene(), &cfg.dataset, &dir)
        .with_context(|| format!("writing dataset into {}", dir.display()))?;
    let m = split_unlabelled(&full, cfg.unlabelled_fraction, cfg.unlabelled_seed)?;
    save_manifest(&dir.join("manifest.txt"), &m)?;
    std::fs::write(ctx.run.root().join(CONFIG_FILE), &ctx.echo)?;
    let unlabelled = m.count(Split::Unlabelled);
    println!(
        "scene: {} train / {} test images ({unlabelled} test images held out as unlabelled) in {}",
        m.count(Split::Train),
        m.count(Split::Test) + unlabelled,
        dir.display()
    );
    Ok(())
}

fn train(ctx: &RunContext, stage: u8) -> Result<()> {
    let manifest = ctx.manifest()?;
    let pipeline = Pipeline {
        run: ctx.run.clone(),
        manifest: &manifest,
        bounds: ctx.scene()?.bounds,
        field: ctx.config.field.clone(),
        apr: ctx.config.apr.clone(),
        schedule: ctx.config.trainer.clone(),
    };
    let log = pipeline.run_stage(stage, &ctx.echo)?;
    if let Some(last) = log.last() {
        println!(
            "stage {stage}: {} iterations, final loss {:.6e}",
            log.len(),
            last.total
        );
    }
    println!("checkpoint: {}", ctx.run.checkpoint(stage).display());
    Ok(())
}

fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    let (csv, _) = report.write(dir, stem)?;
    let gt: Vec<_> = report.entries.iter().map(|e| e.truth).collect();
    let est: Vec<_> = report.entries.iter().map(|e| e.estimate).collect();
    let rot: Vec<_> = report.entries.iter().map(|e| e.r_err_deg).collect();
    trajectory_plot(&gt, &est, &rot, &dir.join(format!("{stem}_trajectory.png")))?;
    log::info!("wrote {}", csv.display());
    Ok(())
}

fn eval(ctx: &RunContext, args: &EvalArgs) -> Result<()> {
    let manifest = ctx.manifest()?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "unlabelled" => Split::Unlabelled,
        _ => Split::Test,
    };
    let out = ctx.eval_dir();
    let apr = if args.oracle {
        None
    } else {
        let stage = args.stage.unwrap_or(if ctx.run.checkpoint(4).is_file() {
            4
        } else {
            3
        });
        Some(ctx.run.load_apr(stage)?)
    };
    let oracle = OraclePassthrough(&manifest);
    let learned = apr.as_ref().map(AprEstimator);
    let estimator: &dyn Estimator = match &learned {
        Some(a) => a,
        None => &oracle,
    };

    let report = evaluate(estimator, &manifest, split)?;
    write_report(&report, &out, split.as_str())?;
    println!("{}", report.median_line());

    if let Some(kn) = &args.outliers {
        let train: Vec<_> = manifest
            .labelled(Split::Train)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let a = outlier_analysis(
            &train,
            &manifest,
            kn[0],
            kn[1],
            estimator,
            ctx.config.trainer.stage3.seed,
        )?;
        write_report(&a.report, &out, "outliers")?;
        println!(
            "outliers: {} images, mean {:.3} m / {:.3} deg",
            a.report.count(),
            a.report.mean_t,
            a.report.mean_r
        );
    }

    if args.sweep.is_some() || args.posemap_pca {
        let field = ctx.run.load_field(2, FieldStage::PoseTrained)?;
        if let Some(fractions) = &args.sweep {
            let sched = &ctx.config.trainer;
            let data = Stage3Data::prepare(
                &field,
                &manifest,
                &sched.rvs_bounds,
                sched.stage3.rvs_pool,
                sched.stage3.seed,
            )?;
            let rows = datasize_sweep(
                fractions,
                &field,
                &data,
                &ctx.config.apr,
                &sched.stage3,
                &manifest,
                split,
                sched.stage3.seed,
            )?;
            let (txt, _) = write_sweep(&rows, &out.join("sweep"))?;
            for r in &rows {
                println!("sweep {}: {}", r.fraction, r.report.median_line());
            }
            log::info!("wrote {}", txt.display());
        }
        if args.posemap_pca {
            let (_, pose) = manifest
                .labelled(Split::Train)
                .into_iter()
                .next()
                .ok_or_else(|| anyhow!("no training view to visualize"))?;
            let map = field.render_posemap(&manifest.camera, &pose)?;
            posemap_pca_viz(&map, &out.join("posemap_pca.png"))?;
        }
    }
    Ok(())
}

fn run(raw: Vec<String>) -> std::result::Result<(), Failure> {
    let (rest, overrides) = config::extract_overrides(raw);
    let cli = Cli::try_parse_from(rest).map_err(Failure::Clap)?;
    let run_dir = config::run_dir(cli.run_dir, &cli.name);
    let file = cli.config.clone().or_else(|| {
        let p = run_dir.join(CONFIG_FILE);
        p.is_file().then_some(p)
    });
    let mut config = config::load(file.as_deref(), &overrides).map_err(Failure::Usage)?;
    if let Command::MakeScene { views, test_views } = &cli.command {
        if let Some(v) = views {
            config.scene.dataset.train_views = *v;
        }
        if let Some(v) = test_views {
            config.scene.dataset.test_views = *v;
        }
    }
    let echo = config.to_toml()?;
    let ctx = RunContext {
        run: RunDir::new(run_dir),
        config: config.resolved(),
        echo,
    };
    match &cli.command {
        Command::MakeScene { .. } => make_scene(&ctx)?,
        Command::Train { stage } => train(&ctx, *stage)?,
        Command::Eval(args) => eval(&ctx, args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Clap(e)) => {
            let _ = e.print();
            ExitCode::from(u8::from(e.use_stderr()))
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
