//! Multi-stage training: rendering branch, pose branch and decoder,
//! pose regressor with random view synthesis, and self-supervised
//! alignment on unlabelled images.

mod stages;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use stages::{
    train_stage1_render, train_stage2_pose_branch, train_stage3_apr, train_stage4_align,
    Stage2Output, Stage3Data, Stage4Output, StageOutput,
};

use crate::apr::{AprConfig, AprNet};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldStage, NerfP, PoseMapImage};
use crate::imaging::RgbImage;
use crate::scene::{Aabb, Camera, DatasetManifest};
use crate::se3::{perturb, PerturbationBounds, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSchedule {
    pub iters: usize,
    pub lr: f64,
    pub rays_per_batch: usize,
    /// Jitter sample depths inside their bins (the loss curve then depends
    /// on the jitter stream as well as the seed).
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderSchedule {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 5e-4,
            rays_per_batch: 512,
            stratified: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseBranchSchedule {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PoseBranchSchedule {
    fn default() -> Self {
        Self {
            iters: 800,
            lr: 5e-4,
            batch: 32,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AprSchedule {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    /// Synthetic views pre-rendered per training view.
    pub rvs_pool: usize,
    pub seed: u64,
}

impl Default for AprSchedule {
    fn default() -> Self {
        Self {
            iters: 600,
            lr: 1e-4,
            batch: 8,
            rvs_pool: 4,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSchedule {
    /// Passes over the unlabelled set.
    pub passes: usize,
    pub lr: f64,
    /// Keep the PoseMap term of the alignment objective.
    pub posemap: bool,
    pub seed: u64,
}

impl Default for AlignSchedule {
    fn default() -> Self {
        Self {
            passes: 10,
            lr: 1e-5,
            posemap: true,
            seed: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub stage1: RenderSchedule,
    pub stage2: PoseBranchSchedule,
    pub stage3: AprSchedule,
    pub stage4: AlignSchedule,
    pub rvs_bounds: PerturbationBounds,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1: RenderSchedule::default(),
            stage2: PoseBranchSchedule::default(),
            stage3: AprSchedule::default(),
            stage4: AlignSchedule::default(),
            rvs_bounds: PerturbationBounds::indoor(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        self.rvs_bounds.validate()?;
        let positive = [
            self.stage1.lr,
            self.stage2.lr,
            self.stage3.lr,
            self.stage4.lr,
        ];
        if positive.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.stage1.rays_per_batch == 0 || self.stage2.batch == 0 || self.stage3.batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.stage3.rvs_pool == 0 {
            return Err(Error::invalid("the RVS pool needs at least one view"));
        }
        Ok(())
    }
}

/// One line of a loss log. Terms that a stage does not compute are `None`
/// and print as `nan`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub pose: Option<f64>,
    pub image: Option<f64>,
    pub posemap: Option<f64>,
    pub rvs: Option<f64>,
}

pub const LOSS_LOG_HEADER: &str = "iter loss_total loss_pose loss_image loss_posemap loss_rvs";

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let col = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.8e}"));
        write!(
            f,
            "{} {:.8e} {} {} {} {}",
            self.iter,
            self.total,
            col(self.pose),
            col(self.image),
            col(self.posemap),
            col(self.rvs)
        )
    }
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_LOG_HEADER}")?;
    for r in records {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

/// Run directory layout: `stage<N>/` holds that stage's config echo, loss
/// log and checkpoint.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }

    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        let name = if stage <= 2 { "field.ckpt" } else { "apr.ckpt" };
        self.stage_dir(stage).join(name)
    }

    pub fn loss_log(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("loss.log")
    }

    pub fn config_echo(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("config.toml")
    }

    /// Creates the stage directory and writes the config echo.
    pub fn begin_stage(&self, stage: u8, config_echo: &str) -> Result<()> {
        std::fs::create_dir_all(self.stage_dir(stage))?;
        std::fs::write(self.config_echo(stage), config_echo)?;
        Ok(())
    }

    fn require(&self, stage: u8) -> Result<PathBuf> {
        let path = self.checkpoint(stage);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingPrerequisite(format!(
                "stage {stage} checkpoint required ({} not found)",
                path.display()
            )))
        }
    }

    pub fn load_field(&self, stage: u8, expect: FieldStage) -> Result<NerfP> {
        let field = NerfP::load(&self.require(stage)?)?;
        if field.stage() != expect {
            return Err(Error::Checkpoint(format!(
                "stage {stage} field checkpoint is tagged {:?}, expected {expect:?}",
                field.stage()
            )));
        }
        Ok(field)
    }

    pub fn load_apr(&self, stage: u8) -> Result<AprNet> {
        AprNet::load(&self.require(stage)?)
    }
}

/// Synthetic training sample at a perturbed pose.
#[derive(Clone, Debug, PartialEq)]
pub struct RvsSample {
    pub pose: Pose,
    pub image: RgbImage,
    pub posemap: PoseMapImage,
}

/// Perturbs `pose` within `bounds` and renders the image and PoseMap there.
pub fn rvs_synthesize(
    field: &NerfP,
    camera: &Camera,
    pose: &Pose,
    bounds: &PerturbationBounds,
    seed: u64,
) -> Result<RvsSample> {
    let p = perturb(pose, bounds, seed);
    Ok(RvsSample {
        pose: p,
        image: field.render_image(camera, &p)?,
        posemap: field.render_posemap(camera, &p)?,
    })
}

/// Stage-by-stage driver over a run directory; each call loads its
/// prerequisite checkpoint, trains, and writes checkpoint and loss log.
pub struct Pipeline<'a> {
    pub run: RunDir,
    pub manifest: &'a DatasetManifest,
    pub bounds: Aabb,
    pub field: FieldConfig,
    pub apr: AprConfig,
    pub schedule: TrainSchedule,
}

impl Pipeline<'_> {
    pub fn run_stage(&self, stage: u8, config_echo: &str) -> Result<Vec<LossRecord>> {
        self.schedule.validate()?;
        let records = match stage {
            1 => {
                self.run.begin_stage(1, config_echo)?;
                let out = train_stage1_render(
                    self.manifest,
                    &self.field,
                    self.bounds,
                    &self.schedule.stage1,
                )?;
                out.model.save(&self.run.checkpoint(1))?;
                out.log
            }
            2 => {
                let field = self.run.load_field(1, FieldStage::RenderTrained)?;
                self.run.begin_stage(2, config_echo)?;
                let out = train_stage2_pose_branch(&field, self.manifest, &self.schedule.stage2)?;
                out.model.save(&self.run.checkpoint(2))?;
                out.log
            }
            3 => {
                let field = self.run.load_field(2, FieldStage::PoseTrained)?;
                self.run.begin_stage(3, config_echo)?;
                let data = Stage3Data::prepare(
                    &field,
                    self.manifest,
                    &self.schedule.rvs_bounds,
                    self.schedule.stage3.rvs_pool,
                    self.schedule.stage3.seed,
                )?;
                let out = train_stage3_apr(&field, &data, &self.apr, &self.schedule.stage3)?;
                out.model.save(&self.run.checkpoint(3))?;
                out.log
            }
            4 => {
                let field = self.run.load_field(2, FieldStage::PoseTrained)?;
                let apr = self.run.load_apr(3)?;
                self.run.begin_stage(4, config_echo)?;
                let out = train_stage4_align(&apr, &field, self.manifest, &self.schedule.stage4)?;
                out.model.save(&self.run.checkpoint(4))?;
                out.log
            }
            other => return Err(Error::invalid(format!("no training stage {other}"))),
        };
        write_loss_log(&self.run.loss_log(stage), &records)?;
        Ok(records)
    }
}
