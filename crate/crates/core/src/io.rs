//! Dataset and result file formats, run configuration and the
//! `simulate` / `run` / `eval` commands.
//!
//! Every JSON-lines file starts with a header line
//! `{"format_version": 1, "stream": "<name>"}`; JSON documents carry the
//! same two keys at top level. Rotations are written as row-major 3x3
//! matrices.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::imu::ImuState;
use crate::lie::{Pose, Rotation};
use crate::msckf::{EstimatorConfig, MeasurementFrame};
use crate::pipeline::{self, InitialUncertainty, RunInputs, TrajectoryPoint};
use crate::residuals::{ObjectClass, ObjectInstance};
use crate::sim::{self, Dataset, ImuRecord, NoiseSpec, OrientedBox, Scene, SceneObject, SimSpec, TruthRecord};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stream: String,
}

fn check_header(value: &serde_json::Value, stream: &str, what: &str) -> Result<()> {
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => bail!("{what}: unsupported format_version {v} (expected {FORMAT_VERSION})"),
        None => bail!("{what}: missing format_version"),
    }
    let got = value.get("stream").and_then(|s| s.as_str()).unwrap_or("");
    if got != stream {
        bail!("{what}: stream is {got:?}, expected {stream:?}");
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, stream: &str, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer(&mut w, &Header { format_version: FORMAT_VERSION, stream: stream.into() })?;
    writeln!(w)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a JSON-lines file, reporting the line number of the first error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, stream: &str) -> Result<Vec<T>> {
    let what = path.display().to_string();
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {what}"))?);
    let mut lines = reader.lines().enumerate();
    let Some((_, header)) = lines.next() else { bail!("{what}: empty file") };
    let header: serde_json::Value = serde_json::from_str(&header?).with_context(|| format!("{what}:1: bad header"))?;
    check_header(&header, stream, &what)?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{what}:{}", i + 1))?);
    }
    Ok(out)
}

/// Writes a JSON document with the version keys merged in at top level.
pub fn write_json<T: Serialize>(path: &Path, stream: &str, doc: &T) -> Result<()> {
    let mut value = serde_json::to_value(doc)?;
    let Some(map) = value.as_object_mut() else { bail!("{stream} document is not an object") };
    map.insert("format_version".into(), FORMAT_VERSION.into());
    map.insert("stream".into(), stream.into());
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, &value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stream: &str) -> Result<T> {
    let what = path.display().to_string();
    let text = fs::read_to_string(path).with_context(|| format!("reading {what}"))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{what}: invalid JSON"))?;
    check_header(&value, stream, &what)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("format_version");
        map.remove("stream");
    }
    serde_json::from_value(value).with_context(|| format!("{what}: schema error"))
}

fn rotation_rows(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

fn rotation_from_rows(rows: &[f64; 9]) -> Rotation {
    Rotation::from_matrix(Matrix3::from_row_slice(rows))
}

/// A pose with its rotation stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        PoseRecord { rotation: rotation_rows(&p.rotation), translation: p.translation.into() }
    }
}

impl PoseRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(rotation_from_rows(&self.rotation), Vector3::from(self.translation))
    }
}

/// One line of `gt.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub frame: u64,
    pub t: f64,
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub bias_gyro: [f64; 3],
    pub bias_accel: [f64; 3],
}

impl StateRecord {
    pub fn new(frame: u64, t: f64, s: &ImuState) -> Self {
        StateRecord {
            frame,
            t,
            rotation: rotation_rows(&s.rotation),
            position: s.position.into(),
            velocity: s.velocity.into(),
            bias_gyro: s.bias_gyro.into(),
            bias_accel: s.bias_accel.into(),
        }
    }

    pub fn state(&self) -> ImuState {
        ImuState {
            rotation: rotation_from_rows(&self.rotation),
            velocity: self.velocity.into(),
            position: self.position.into(),
            bias_gyro: self.bias_gyro.into(),
            bias_accel: self.bias_accel.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub track: u64,
    pub class: u32,
    #[serde(flatten)]
    pub pose: PoseRecord,
    pub delta_semiaxes: [f64; 3],
    pub delta_landmarks: Vec<[f64; 3]>,
}

impl ObjectRecord {
    fn new(o: &SceneObject) -> Self {
        ObjectRecord {
            track: o.track,
            class: o.class,
            pose: PoseRecord::from(&o.instance.pose),
            delta_semiaxes: o.instance.delta_semiaxes.into(),
            delta_landmarks: o.instance.delta_landmarks.iter().map(|d| (*d).into()).collect(),
        }
    }

    fn scene_object(&self) -> SceneObject {
        SceneObject {
            track: self.track,
            class: self.class,
            instance: ObjectInstance {
                pose: self.pose.pose(),
                delta_landmarks: self.delta_landmarks.iter().map(|d| Vector3::from(*d)).collect(),
                delta_semiaxes: self.delta_semiaxes.into(),
            },
        }
    }
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub classes: Vec<ObjectClass>,
    pub landmarks: Vec<[f64; 3]>,
    pub objects: Vec<ObjectRecord>,
    /// Camera pose in the IMU frame.
    pub extrinsics: PoseRecord,
    /// IMU pose and velocity at the first frame.
    pub initial_pose: PoseRecord,
    pub initial_velocity: [f64; 3],
    pub noise: NoiseSpec,
}

impl SceneFile {
    pub fn scene(&self) -> Scene {
        Scene {
            classes: self.classes.clone(),
            landmarks: self.landmarks.iter().map(|l| Vector3::from(*l)).collect(),
            objects: self.objects.iter().map(ObjectRecord::scene_object).collect(),
            extrinsics: self.extrinsics.pose(),
        }
    }
}

/// A dataset as stored on disk.
pub struct DatasetFiles {
    pub scene: SceneFile,
    pub imu: Vec<ImuRecord>,
    pub frames: Vec<MeasurementFrame>,
    pub truth: Vec<StateRecord>,
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let first = data.truth.first().map(|t| t.state).unwrap_or_default();
    let scene = SceneFile {
        classes: data.scene.classes.clone(),
        landmarks: data.scene.landmarks.iter().map(|l| (*l).into()).collect(),
        objects: data.scene.objects.iter().map(ObjectRecord::new).collect(),
        extrinsics: PoseRecord::from(&data.scene.extrinsics),
        initial_pose: PoseRecord::from(&first.pose()),
        initial_velocity: first.velocity.into(),
        noise: data.noise,
    };
    write_json(&dir.join("scene.json"), "scene", &scene)?;
    write_jsonl(&dir.join("imu.jsonl"), "imu", &data.imu)?;
    write_jsonl(&dir.join("frames.jsonl"), "frames", &data.frames)?;
    let gt: Vec<StateRecord> = data.truth.iter().map(|t| StateRecord::new(t.frame, t.t, &t.state)).collect();
    write_jsonl(&dir.join("gt.jsonl"), "gt", &gt)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetFiles> {
    Ok(DatasetFiles {
        scene: read_json(&dir.join("scene.json"), "scene")?,
        imu: read_jsonl(&dir.join("imu.jsonl"), "imu")?,
        frames: read_jsonl(&dir.join("frames.jsonl"), "frames")?,
        truth: read_jsonl(&dir.join("gt.jsonl"), "gt")?,
    })
}

impl DatasetFiles {
    pub fn truth_records(&self) -> Vec<TruthRecord> {
        self.truth.iter().map(|r| TruthRecord { frame: r.frame, t: r.t, state: r.state() }).collect()
    }
}

/// Options of the `run` command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Recorded for provenance; the estimator itself is deterministic.
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub initial_uncertainty: InitialUncertainty,
}

/// One row of `trajectory.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub r00: f64,
    pub r01: f64,
    pub r02: f64,
    pub r10: f64,
    pub r11: f64,
    pub r12: f64,
    pub r20: f64,
    pub r21: f64,
    pub r22: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub bgx: f64,
    pub bgy: f64,
    pub bgz: f64,
    pub bax: f64,
    pub bay: f64,
    pub baz: f64,
}

impl TrajectoryRow {
    pub fn new(t: f64, s: &ImuState) -> Self {
        let r = rotation_rows(&s.rotation);
        TrajectoryRow {
            t,
            px: s.position.x,
            py: s.position.y,
            pz: s.position.z,
            r00: r[0],
            r01: r[1],
            r02: r[2],
            r10: r[3],
            r11: r[4],
            r12: r[5],
            r20: r[6],
            r21: r[7],
            r22: r[8],
            vx: s.velocity.x,
            vy: s.velocity.y,
            vz: s.velocity.z,
            bgx: s.bias_gyro.x,
            bgy: s.bias_gyro.y,
            bgz: s.bias_gyro.z,
            bax: s.bias_accel.x,
            bay: s.bias_accel.y,
            baz: s.bias_accel.z,
        }
    }

    pub fn state(&self) -> ImuState {
        let rows = [self.r00, self.r01, self.r02, self.r10, self.r11, self.r12, self.r20, self.r21, self.r22];
        ImuState {
            rotation: rotation_from_rows(&rows),
            velocity: Vector3::new(self.vx, self.vy, self.vz),
            position: Vector3::new(self.px, self.py, self.pz),
            bias_gyro: Vector3::new(self.bgx, self.bgy, self.bgz),
            bias_accel: Vector3::new(self.bax, self.bay, self.baz),
        }
    }
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().enumerate().map(|(i, row)| row.with_context(|| format!("{}:{}", path.display(), i + 2))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub position_std: [f64; 3],
    pub rotation_std_deg: [f64; 3],
    pub semiaxes_std: [f64; 3],
}

/// One entry of `objects.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatedObject {
    pub track: u64,
    pub class: u32,
    pub class_name: String,
    #[serde(flatten)]
    pub pose: PoseRecord,
    /// Class mean semi-axes plus the estimated deformation.
    pub semiaxes: [f64; 3],
    pub delta_landmarks: Vec<[f64; 3]>,
    pub updates: usize,
    pub observations: usize,
    pub covariance: Option<CovarianceSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectsFile {
    pub objects: Vec<EstimatedObject>,
}

/// `simulate`: writes a dataset generated from a spec file (or defaults).
pub fn cmd_simulate(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SimSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: schema error", p.display()))?
        }
        None => SimSpec::default(),
    };
    let data = sim::simulate(&spec)?;
    write_dataset(out, &data)?;
    fs::write(out.join("sim_spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    log::info!("wrote {} frames and {} inertial samples to {}", data.frames.len(), data.imu.len(), out.display());
    Ok(())
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: config error", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

/// `run`: estimates the trajectory and object map of a dataset.
pub fn cmd_run(data_dir: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = read_dataset(data_dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let initial = pipeline::initial_state(&data.scene.initial_pose.pose(), data.scene.initial_velocity.into());
    let inputs = RunInputs {
        classes: &data.scene.classes,
        extrinsics: data.scene.extrinsics.pose(),
        imu: &data.imu,
        frames: &data.frames,
        initial,
        initial_uncertainty: cfg.initial_uncertainty,
    };
    let result = pipeline::run(&inputs, &cfg.estimator, |_, _| {})?;
    let rows: Vec<TrajectoryRow> =
        result.trajectory.iter().map(|p: &TrajectoryPoint| TrajectoryRow::new(p.t, &p.state)).collect();
    write_trajectory(&out.join("trajectory.csv"), &rows)?;
    let est = &result.estimator;
    let objects = est
        .objects()
        .filter_map(|o| {
            let cls = est.classes().iter().find(|c| c.semantic_id == o.class)?;
            let covariance = o.covariance(cls, &cfg.estimator.residuals).ok().map(|c| {
                let sd = |i: usize| c[(i, i)].max(0.0).sqrt();
                CovarianceSummary {
                    position_std: [sd(0), sd(1), sd(2)],
                    rotation_std_deg: [sd(3).to_degrees(), sd(4).to_degrees(), sd(5).to_degrees()],
                    semiaxes_std: [sd(6), sd(7), sd(8)],
                }
            });
            Some(EstimatedObject {
                track: o.track,
                class: o.class,
                class_name: cls.name.clone(),
                pose: PoseRecord::from(&o.instance.pose),
                semiaxes: o.instance.semiaxes(cls).into(),
                delta_landmarks: o.instance.delta_landmarks.iter().map(|d| (*d).into()).collect(),
                updates: o.updates,
                observations: o.observation_count(),
                covariance,
            })
        })
        .collect();
    write_json(&out.join("objects.json"), "objects", &ObjectsFile { objects })?;
    write_jsonl(&out.join("events.jsonl"), "events", &result.events)?;
    write_json(&out.join("stats.json"), "stats", &est.stats)?;
    log::info!(
        "{} frames, {} updates, {} ZUPTs, {} mapped objects",
        rows.len(),
        est.stats.updates,
        est.stats.zupts,
        est.objects().count()
    );
    Ok(())
}

/// Precision and recall on the grid of translation thresholds (columns) and
/// rotation thresholds (rows; `None` ignores rotation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallTable {
    pub translation_thresholds: Vec<f64>,
    pub rotation_thresholds_deg: Vec<Option<f64>>,
    pub precision: Vec<Vec<f64>>,
    pub recall: Vec<Vec<f64>>,
}

pub fn precision_recall_table(
    est: &[sim::ObjectPose],
    gt: &[sim::ObjectPose],
    translation: &[f64],
    rotation: &[Option<f64>],
) -> PrecisionRecallTable {
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for r in rotation {
        let cells: Vec<(f64, f64)> = translation.iter().map(|t| sim::precision_recall(est, gt, *t, *r)).collect();
        precision.push(cells.iter().map(|c| c.0).collect());
        recall.push(cells.iter().map(|c| c.1).collect());
    }
    PrecisionRecallTable {
        translation_thresholds: translation.to_vec(),
        rotation_thresholds_deg: rotation.to_vec(),
        precision,
        recall,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectIou {
    pub track: u64,
    pub iou: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames_evaluated: usize,
    /// Set when the two trajectories did not cover the same timestamps.
    pub length_mismatch: Option<String>,
    pub rmse: f64,
    pub te_lengths: Vec<f64>,
    pub te_percent: Option<f64>,
    pub objects_gt: usize,
    pub objects_estimated: usize,
    /// IoU per ground-truth object (0 when unmapped).
    pub ious: Vec<ObjectIou>,
    pub mean_iou: f64,
    pub precision_recall: PrecisionRecallTable,
}

/// Path lengths of the relative translation error, in meters.
pub const TE_LENGTHS: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
/// Start frames of TE segments are taken every this many frames.
pub const TE_STEP: usize = 10;
pub const PR_TRANSLATION: [f64; 3] = [0.5, 1.0, 1.5];
pub const PR_ROTATION: [Option<f64>; 3] = [Some(30.0), Some(45.0), None];

fn time_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Computes every metric from ground-truth and estimated states and objects.
pub fn evaluate(
    truth: &[(f64, ImuState)],
    est: &[(f64, ImuState)],
    gt_objects: &[(u64, sim::ObjectPose, OrientedBox)],
    est_objects: &[(u64, sim::ObjectPose, OrientedBox)],
) -> Result<Metrics> {
    let est_by_time: BTreeMap<i64, &ImuState> = est.iter().map(|(t, s)| (time_key(*t), s)).collect();
    let pairs: Vec<(Pose, Pose)> =
        truth.iter().filter_map(|(t, g)| est_by_time.get(&time_key(*t)).map(|e| (g.pose(), e.pose()))).collect();
    if pairs.is_empty() {
        bail!("ground truth and estimate share no timestamps");
    }
    let length_mismatch = (pairs.len() != truth.len() || pairs.len() != est.len()).then(|| {
        format!("{} ground-truth and {} estimated poses, {} matched by time", truth.len(), est.len(), pairs.len())
    });
    if let Some(m) = &length_mismatch {
        log::warn!("{m}");
    }
    let gt_poses: Vec<Pose> = pairs.iter().map(|p| p.0).collect();
    let est_poses: Vec<Pose> = pairs.iter().map(|p| p.1).collect();
    let rmse = sim::rmse(&gt_poses, &est_poses)?;
    let te = sim::translation_error(&gt_poses, &est_poses, &TE_LENGTHS, TE_STEP)?;
    let ious: Vec<ObjectIou> = gt_objects
        .iter()
        .map(|(track, _, gbox)| {
            let iou = est_objects.iter().find(|e| e.0 == *track).map_or(0.0, |e| sim::iou3d(gbox, &e.2));
            ObjectIou { track: *track, iou }
        })
        .collect();
    let mean_iou = if ious.is_empty() { 0.0 } else { ious.iter().map(|i| i.iou).sum::<f64>() / ious.len() as f64 };
    let gt_poses: Vec<sim::ObjectPose> = gt_objects.iter().map(|o| o.1).collect();
    let est_poses: Vec<sim::ObjectPose> = est_objects.iter().map(|o| o.1).collect();
    Ok(Metrics {
        frames_evaluated: pairs.len(),
        length_mismatch,
        rmse,
        te_lengths: TE_LENGTHS.to_vec(),
        te_percent: te,
        objects_gt: gt_objects.len(),
        objects_estimated: est_objects.len(),
        ious,
        mean_iou,
        precision_recall: precision_recall_table(&est_poses, &gt_poses, &PR_TRANSLATION, &PR_ROTATION),
    })
}

/// `eval`: compares a run directory against a dataset directory.
pub fn cmd_eval(gt_dir: &Path, run_dir: &Path, out: &Path) -> Result<()> {
    let scene: SceneFile = read_json(&gt_dir.join("scene.json"), "scene")?;
    let gt: Vec<StateRecord> = read_jsonl(&gt_dir.join("gt.jsonl"), "gt")?;
    let traj = read_trajectory(&run_dir.join("trajectory.csv"))?;
    let objects: ObjectsFile = read_json(&run_dir.join("objects.json"), "objects")?;
    let truth: Vec<(f64, ImuState)> = gt.iter().map(|r| (r.t, r.state())).collect();
    let est: Vec<(f64, ImuState)> = traj.iter().map(|r| (r.t, r.state())).collect();
    let gt_objects: Vec<_> = scene
        .objects
        .iter()
        .filter_map(|o| {
            let cls = scene.classes.iter().find(|c| c.semantic_id == o.class)?;
            let so = o.scene_object();
            let pose = sim::ObjectPose { class: o.class, pose: so.instance.pose };
            Some((o.track, pose, OrientedBox::from_instance(&so.instance, cls)))
        })
        .collect();
    let est_objects: Vec<_> = objects
        .objects
        .iter()
        .map(|o| {
            let pose = o.pose.pose();
            let b = OrientedBox { pose, half_extents: Vector3::from(o.semiaxes) };
            (o.track, sim::ObjectPose { class: o.class, pose }, b)
        })
        .collect();
    let metrics = evaluate(&truth, &est, &gt_objects, &est_objects)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("metrics.json"), "metrics", &metrics)?;

    // Error against time after first-pose alignment, for plotting.
    let est_by_time: BTreeMap<i64, &ImuState> = est.iter().map(|(t, s)| (time_key(*t), s)).collect();
    let matched: Vec<(f64, &ImuState, &ImuState)> =
        truth.iter().filter_map(|(t, g)| est_by_time.get(&time_key(*t)).map(|e| (*t, g, *e))).collect();
    let gt_poses: Vec<Pose> = matched.iter().map(|m| m.1.pose()).collect();
    let est_poses: Vec<Pose> = matched.iter().map(|m| m.2.pose()).collect();
    let aligned = sim::align_to_first(&gt_poses, &est_poses)?;
    let mut w = csv::Writer::from_path(out.join("error_vs_time.csv"))?;
    w.write_record(["t", "position_error", "rotation_error_deg", "speed_error"])?;
    for ((t, g, e), a) in matched.iter().zip(&aligned) {
        let pe = (g.position - a.translation).norm();
        let re = g.rotation.angle_to(&a.rotation).to_degrees();
        let ve = (g.velocity.norm() - e.velocity.norm()).abs();
        w.write_record([t.to_string(), pe.to_string(), re.to_string(), ve.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("precision_recall.csv"))?;
    w.write_record(["rotation_threshold_deg", "translation_threshold", "precision", "recall"])?;
    let pr = &metrics.precision_recall;
    for (i, r) in pr.rotation_thresholds_deg.iter().enumerate() {
        for (j, t) in pr.translation_thresholds.iter().enumerate() {
            let r = r.map_or("none".to_string(), |r| r.to_string());
            w.write_record([r, t.to_string(), pr.precision[i][j].to_string(), pr.recall[i][j].to_string()])?;
        }
    }
    w.flush()?;
    log::info!("rmse {:.4} m, TE {:?} %, mean IoU {:.3}", metrics.rmse, metrics.te_percent, metrics.mean_iou);
    Ok(())
}
