use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scene::Camera;
use crate::se3::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Unlabelled,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabelled => "unlabelled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unlabelled" => Ok(Split::Unlabelled),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Counts every read of a held-out pose.
#[derive(Clone, Debug, Default)]
pub struct LabelAudit(Arc<AtomicUsize>);

impl LabelAudit {
    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

/// Ground truth of an unlabelled record. Only evaluation may reveal it and
/// every reveal is counted by the manifest's [`LabelAudit`].
#[derive(Clone)]
pub struct SealedPose {
    pose: Pose,
    audit: LabelAudit,
}

impl SealedPose {
    pub fn reveal(&self) -> Pose {
        self.audit.0.fetch_add(1, Ordering::SeqCst);
        self.pose
    }
}

impl fmt::Debug for SealedPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealedPose(..)")
    }
}

impl PartialEq for SealedPose {
    fn eq(&self, other: &Self) -> bool {
        self.pose == other.pose
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pose: Option<Pose>,
    heldout: Option<SealedPose>,
}

impl Record {
    pub fn labelled(split: Split, image_path: impl Into<String>, pose: Pose) -> Self {
        Self {
            split,
            image_path: image_path.into(),
            pose: Some(pose),
            heldout: None,
        }
    }

    /// Training-visible pose; `None` for unlabelled records.
    pub fn pose(&self) -> Option<&Pose> {
        self.pose.as_ref()
    }

    pub fn heldout(&self) -> Option<&SealedPose> {
        self.heldout.as_ref()
    }
}

/// Image path of an unlabelled record, without any access to its pose.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledImage {
    pub index: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub spacing_window: usize,
    pub camera: Camera,
    /// Directory image paths are relative to.
    pub root: PathBuf,
    audit: LabelAudit,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.spacing_window == other.spacing_window
            && self.camera == other.camera
    }
}

impl DatasetManifest {
    pub fn new(camera: Camera, root: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            spacing_window: 1,
            camera,
            root: root.into(),
            audit: LabelAudit::default(),
        }
    }

    pub fn audit(&self) -> &LabelAudit {
        &self.audit
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(index, pose)` for every labelled record of `split`.
    pub fn labelled(&self, split: Split) -> Vec<(usize, Pose)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .filter_map(|(i, r)| r.pose.map(|p| (i, p)))
            .collect()
    }

    pub fn unlabelled_images(&self) -> Vec<UnlabelledImage> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Unlabelled)
            .map(|(index, r)| UnlabelledImage {
                index,
                path: self.resolve(r),
            })
            .collect()
    }

    /// Ground-truth pose of any record, revealing sealed poses. Evaluation only.
    pub fn ground_truth(&self, index: usize) -> Option<Pose> {
        let r = self.records.get(index)?;
        r.pose
            .or_else(|| r.heldout.as_ref().map(SealedPose::reveal))
    }

    pub(crate) fn seal(&mut self, index: usize) {
        let audit = self.audit.clone();
        let r = &mut self.records[index];
        if let Some(pose) = r.pose.take() {
            r.heldout = Some(SealedPose { pose, audit });
        }
        r.split = Split::Unlabelled;
    }
}

fn heldout_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".heldout");
    PathBuf::from(s)
}

/// Writes the manifest text file and, when unlabelled records carry
/// held-out ground truth, a `<path>.heldout` sidecar for evaluation.
pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut out = Vec::new();
    write!(
        out,
        "spacing_window={} width={} height={} focal={}",
        m.spacing_window, m.camera.width, m.camera.height, m.camera.focal
    )?;
    let [cx, cy] = m.camera.principal_point;
    if cx != m.camera.width as f64 / 2.0 || cy != m.camera.height as f64 / 2.0 {
        write!(out, " cx={cx} cy={cy}")?;
    }
    writeln!(out)?;
    let mut sidecar = Vec::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.image_path.is_empty() || r.image_path.contains(char::is_whitespace) {
            return Err(Error::invalid(format!(
                "image path {:?} must be non-empty and free of whitespace",
                r.image_path
            )));
        }
        match (&r.pose, r.split) {
            (Some(p), Split::Train | Split::Test) => {
                writeln!(out, "{} {} {}", r.split, r.image_path, p.to_line())?
            }
            (_, Split::Unlabelled) => writeln!(out, "{} {} -", r.split, r.image_path)?,
            (None, _) => {
                return Err(Error::invalid(format!(
                    "{} record {i} has no pose",
                    r.split
                )))
            }
        }
        if let Some(h) = &r.heldout {
            writeln!(sidecar, "{i} {}", h.pose.to_line())?;
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    let side = heldout_path(path);
    if sidecar.is_empty() {
        if side.exists() {
            std::fs::remove_file(side)?;
        }
    } else {
        std::fs::write(side, sidecar)?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))??;
    let mut spacing = None;
    let (mut w, mut h, mut f, mut cx, mut cy) = (None, None, None, None, None);
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("bad header token {tok:?}")))?;
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| parse_err(1, format!("bad value for {k}: {e}")))
        };
        match k {
            "spacing_window" => {
                spacing = Some(
                    v.parse::<usize>()
                        .map_err(|e| parse_err(1, format!("bad spacing_window: {e}")))?,
                )
            }
            "width" => w = Some(num(v)? as usize),
            "height" => h = Some(num(v)? as usize),
            "focal" => f = Some(num(v)?),
            "cx" => cx = Some(num(v)?),
            "cy" => cy = Some(num(v)?),
            other => return Err(parse_err(1, format!("unknown header key {other:?}"))),
        }
    }
    let (Some(spacing), Some(w), Some(h), Some(f)) = (spacing, w, h, f) else {
        return Err(parse_err(
            1,
            "header needs spacing_window, width, height, focal".into(),
        ));
    };
    let pp = [cx.unwrap_or(w as f64 / 2.0), cy.unwrap_or(h as f64 / 2.0)];
    let camera = Camera::new(f, pp, w, h).map_err(|e| parse_err(1, e.to_string()))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut m = DatasetManifest::new(camera, root);
    m.spacing_window = spacing;

    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let split: Split = toks
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| parse_err(lineno, e.to_string()))?;
        let image_path = toks
            .next()
            .ok_or_else(|| parse_err(lineno, "missing image path".into()))?
            .to_string();
        let rest: Vec<&str> = toks.collect();
        let pose = match (split, rest.as_slice()) {
            (Split::Unlabelled, ["-"]) => None,
            (Split::Unlabelled, _) => {
                return Err(parse_err(
                    lineno,
                    "unlabelled records must carry \"-\"".into(),
                ))
            }
            (_, vals) => Some(
                Pose::parse_line(&vals.join(" ")).map_err(|e| parse_err(lineno, e.to_string()))?,
            ),
        };
        m.records.push(Record {
            split,
            image_path,
            pose,
            heldout: None,
        });
    }

    let side = heldout_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let side_err = |message: String| Error::Parse {
                path: side.clone(),
                line: i + 1,
                message,
            };
            let (idx, rest) = line
                .split_once(' ')
                .ok_or_else(|| side_err("expected `<index> <pose>`".into()))?;
            let idx: usize = idx
                .parse()
                .map_err(|e| side_err(format!("bad index: {e}")))?;
            let pose = Pose::parse_line(rest).map_err(|e| side_err(e.to_string()))?;
            let audit = m.audit.clone();
            let r = m
                .records
                .get_mut(idx)
                .filter(|r| r.split == Split::Unlabelled)
                .ok_or_else(|| side_err(format!("record {idx} is not unlabelled")))?;
            r.heldout = Some(SealedPose { pose, audit });
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn manifest(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(Camera::centered(64, 48, 55.5).unwrap(), "");
        for i in 0..n {
            let split = if i % 3 == 0 {
                Split::Test
            } else {
                Split::Train
            };
            let pose = Pose::from_axis_angle(
                &Vector3::new(1.0, 2.0, 0.5 + i as f64),
                0.1 * i as f64,
                Vector3::new(i as f64 * 0.1, -0.3, 1.0 / 3.0),
            );
            m.records
                .push(Record::labelled(split, format!("images/{i:04}.png"), pose));
        }
        m
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let m = manifest(0);
        save_manifest(&path, &m).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn hundred_records_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        let mut m = manifest(100);
        m.spacing_window = 5;
        m.seal(3);
        m.seal(6);
        save_manifest(&a, &m).unwrap();
        let loaded = load_manifest(&a).unwrap();
        assert_eq!(loaded, m);
        save_manifest(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(
            std::fs::read(heldout_path(&a)).unwrap(),
            std::fs::read(heldout_path(&b)).unwrap()
        );
        assert_eq!(
            loaded.ground_truth(3),
            m.records[3].heldout().map(|h| h.pose)
        );
    }

    #[test]
    fn short_pose_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        save_manifest(&path, &manifest(3)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let toks: Vec<&str> = lines[2].split_whitespace().collect();
        lines[2] = toks[..toks.len() - 1].join(" ");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let mut m = manifest(1);
        m.spacing_window = 2;
        save_manifest(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text
            .starts_with("spacing_window=2 width=64 height=48 focal=55.5\ntest images/0000.png "));
    }

    #[test]
    fn sealed_reads_are_counted() {
        let mut m = manifest(4);
        m.seal(0);
        assert_eq!(m.audit().reads(), 0);
        assert!(m.records[0].pose().is_none());
        assert_eq!(m.unlabelled_images().len(), 1);
        assert_eq!(m.audit().reads(), 0);
        m.ground_truth(0).unwrap();
        assert_eq!(m.audit().reads(), 1);
    }
}
