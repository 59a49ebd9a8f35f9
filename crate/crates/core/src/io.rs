//! On-disk formats: datasets and predictions, checkpoints, logs, reports and
//! graymap dumps. Binary files are little-endian and start with an 8-byte
//! magic; each has a JSON sidecar at `<path>.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField2};
use crate::grid::{GridSpec, ObstacleMap};
use crate::scalar::Scalar;
use crate::sim::{FlowScenario, SequenceRecord};
use crate::train::{AblationOutcome, AblationRow, Checkpoint, EpochLog, MetricReport};

pub const DATASET_MAGIC: &[u8; 8] = b"PINPDS1\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PINPCK1\0";

/// Bytes before the first record: magic, four `u32` counts, `dx` and `dt` as `f64`.
pub const DATASET_HEADER_BYTES: u64 = 8 + 4 * 4 + 2 * 8;

/// Size of a dataset file: each record stores its seed and inverse Péclet
/// number, then `c`, `u_x`, `u_y` and `p` for every frame as `f32`.
/// Saturates at `u64::MAX` for headers no file could satisfy.
pub fn dataset_file_size(count: usize, frames: usize, height: usize, width: usize) -> u64 {
    let plane = frames as u128 * height as u128 * width as u128;
    let total = DATASET_HEADER_BYTES as u128 + count as u128 * (16 + 16 * plane);
    u64::try_from(total).unwrap_or(u64::MAX)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Dataset,
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub seed: u64,
    pub scenario: Option<FlowScenario>,
    /// Obstacle layout in the text format of [`ObstacleMap::parse`].
    pub obstacles: String,
}

/// Extra fields of a prediction container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    /// Index, in the source sequences, of the first predicted frame.
    pub start_frame: usize,
    /// Learned inverse Péclet number.
    pub inv_pe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub kind: ContainerKind,
    pub grid: GridSpec,
    pub frames: usize,
    pub records: Vec<RecordMeta>,
    pub prediction: Option<PredictionMeta>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read sidecar {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn put_f32s<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Writes records in the container layout plus the sidecar. All records
/// must share `grid` and have `frames` frames.
pub fn write_container<T: Scalar>(
    path: impl AsRef<Path>,
    records: &[SequenceRecord<T>],
    grid: &GridSpec,
    frames: usize,
    kind: ContainerKind,
    prediction: Option<PredictionMeta>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for n in [records.len(), frames, grid.height, grid.width] {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    w.write_all(&grid.dx.to_le_bytes())?;
    w.write_all(&grid.dt.to_le_bytes())?;
    let mut buf = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.grid != *grid
            || rec.frames.len() != frames
            || rec.u_true.len() != frames
            || rec.p_true.len() != frames
        {
            return Err(Error::shape(
                "write_container",
                format!("record {r} does not match the header"),
            ));
        }
        buf.clear();
        buf.extend_from_slice(&rec.seed.to_le_bytes());
        buf.extend_from_slice(&rec.inv_pe.to_le_bytes());
        rec.frames
            .iter()
            .for_each(|f| put_f32s(&mut buf, f.values()));
        rec.u_true
            .iter()
            .for_each(|u| put_f32s(&mut buf, u.x.values()));
        rec.u_true
            .iter()
            .for_each(|u| put_f32s(&mut buf, u.y.values()));
        rec.p_true
            .iter()
            .for_each(|p| put_f32s(&mut buf, p.values()));
        w.write_all(&buf)?;
    }
    w.flush()?;
    let meta = ContainerMeta {
        kind,
        grid: *grid,
        frames,
        records: records
            .iter()
            .map(|r| RecordMeta {
                seed: r.seed,
                scenario: r.scenario,
                obstacles: r.obstacles.to_text(),
            })
            .collect(),
        prediction,
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn write_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    records: &[SequenceRecord<T>],
    grid: &GridSpec,
    frames: usize,
) -> Result<()> {
    write_container(path, records, grid, frames, ContainerKind::Dataset, None)
}

fn read_exact_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_fields<T: Scalar>(
    bytes: &[u8],
    count: usize,
    h: usize,
    w: usize,
) -> Result<Vec<ScalarField<T>>> {
    bytes
        .chunks_exact(4 * h * w)
        .take(count)
        .map(|chunk| {
            let v = chunk
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect();
            ScalarField::from_vec(h, w, v)
        })
        .collect()
}

/// Reads a dataset or prediction container with its sidecar. The magic and
/// the file size implied by the header are checked before any record is read.
pub fn read_container<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Vec<SequenceRecord<T>>, ContainerMeta)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let magic: [u8; 8] = read_exact_array(&mut r)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a dataset file",
            path.display()
        )));
    }
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = u32::from_le_bytes(read_exact_array(&mut r)?) as usize;
    }
    let [count, frames, h, w] = counts;
    let dx = f64::from_le_bytes(read_exact_array(&mut r)?);
    let dt = f64::from_le_bytes(read_exact_array(&mut r)?);
    let expected = dataset_file_size(count, frames, h, w);
    if actual != expected {
        return Err(Error::Format(format!(
            "{}: header promises {expected} bytes, file has {actual}",
            path.display()
        )));
    }
    let grid = GridSpec::new(h, w, dx, dt)?;
    let meta: ContainerMeta = read_json(&sidecar_path(path))?;
    if meta.grid != grid || meta.frames != frames || meta.records.len() != count {
        return Err(Error::Format(format!(
            "{}: sidecar does not match the header",
            path.display()
        )));
    }
    let plane = 4 * frames * h * w;
    let mut buf = vec![0u8; 16 + 4 * plane];
    let mut records = Vec::with_capacity(count);
    for rm in &meta.records {
        r.read_exact(&mut buf)?;
        let seed = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
        let inv_pe = f64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        let body = &buf[16..];
        let c = read_fields(&body[..plane], frames, h, w)?;
        let ux = read_fields::<T>(&body[plane..2 * plane], frames, h, w)?;
        let uy = read_fields::<T>(&body[2 * plane..3 * plane], frames, h, w)?;
        let p = read_fields(&body[3 * plane..], frames, h, w)?;
        let obstacles = ObstacleMap::parse(&rm.obstacles)?;
        if !obstacles.matches(&grid) {
            return Err(Error::Format(format!(
                "{}: obstacle map does not match the grid",
                path.display()
            )));
        }
        records.push(SequenceRecord {
            frames: c,
            u_true: ux
                .into_iter()
                .zip(uy)
                .map(|(x, y)| VectorField2::new(x, y))
                .collect::<Result<_>>()?,
            p_true: p,
            inv_pe,
            seed,
            scenario: rm.scenario,
            obstacles,
            grid,
        });
    }
    Ok((records, meta))
}

/// Sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Writes parameter values at the native width of `T`. Optimizer state is not saved.
pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let width = std::mem::size_of::<T>() as u32;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, p) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            match width {
                4 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    fs::write(path, out)?;
    let meta = CheckpointMeta {
        config: ck.config.clone(),
        epoch: ck.epoch,
        best_val_mse: ck.best_val_mse,
        log: ck.log.clone(),
    };
    write_json(&sidecar_path(path), &meta)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: truncated at byte {}",
                    self.path.display(),
                    self.at
                ))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Reads a checkpoint written at either width into `T`.
pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let mut head = [0u8; 8];
    File::open(path)?
        .read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &head != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let bytes = fs::read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        at: 8,
        path,
    };
    let width = c.u32()?;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!(
            "{}: unsupported value width {width}",
            path.display()
        )));
    }
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format(format!("{}: parameter name is not UTF-8", path.display())))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * width)?;
        let data = raw
            .chunks_exact(width)
            .map(|b| match width {
                4 => T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
                _ => T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))),
            })
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    Ok(Checkpoint {
        config: meta.config,
        params,
        epoch: meta.epoch,
        best_val_mse: meta.best_val_mse,
        log: meta.log,
    })
}

#[derive(Debug, Serialize)]
struct LossRow {
    epoch: usize,
    data: f64,
    physical: f64,
    temporal: f64,
    total: f64,
    lr: f64,
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if log.is_empty() {
        w.write_record(["epoch", "data", "physical", "temporal", "total", "lr"])
            .map_err(csv_error)?;
    }
    for e in log {
        w.serialize(LossRow {
            epoch: e.epoch,
            data: e.loss.data,
            physical: e.loss.physical,
            temporal: e.loss.temporal,
            total: e.loss.total,
            lr: e.lr,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes `summary.csv` (metric, model, persistence) and `per_frame.csv`
/// (lead, mse, persistence_mse) into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_error)?;
    w.write_record(["metric", "model", "persistence"])
        .map_err(csv_error)?;
    let mut row = |name: &str, model: String, base: String| {
        w.write_record([name, &model, &base]).map_err(csv_error)
    };
    row("sequences", report.sequences.to_string(), String::new())?;
    row("horizon", report.horizon.to_string(), String::new())?;
    row(
        "mse",
        report.model.mse.to_string(),
        report.persistence.mse.to_string(),
    )?;
    row(
        "mae",
        report.model.mae.to_string(),
        report.persistence.mae.to_string(),
    )?;
    for (tau, c) in &report.csi {
        row(&format!("csi_{tau}"), c.to_string(), String::new())?;
    }
    row(
        "csi_m",
        report.csi_m.to_string(),
        report.persistence_csi_m.to_string(),
    )?;
    if let Some(l) = &report.latent {
        row("corr_ux", fmt_opt(l.corr_ux), String::new())?;
        row("corr_uy", fmt_opt(l.corr_uy), String::new())?;
        row("corr_p", fmt_opt(l.corr_p), String::new())?;
        row(
            "alpha_initial_field",
            fmt_opt(l.alpha_initial),
            String::new(),
        )?;
        row("alpha_single_point", fmt_opt(l.alpha_point), String::new())?;
        row("calibrated_mse", fmt_opt(l.calibrated_mse), String::new())?;
        row("alpha_pooled", fmt_opt(l.alpha_pooled), String::new())?;
        row("sign_agreement", fmt_opt(l.sign_agreement), String::new())?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("per_frame.csv")).map_err(csv_error)?;
    w.write_record(["lead", "mse", "persistence_mse"])
        .map_err(csv_error)?;
    for (n, (m, p)) in report
        .model
        .per_frame_mse
        .iter()
        .zip(&report.persistence.per_frame_mse)
        .enumerate()
    {
        w.write_record([(n + 1).to_string(), m.to_string(), p.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `setting,MAE,MSE`; diverged rows read `inf`.
pub fn write_ablation_table(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["setting", "MAE", "MSE"])
        .map_err(csv_error)?;
    for r in rows {
        let (mae, mse) = match &r.outcome {
            AblationOutcome::Finished { mae, mse } => (mae.to_string(), mse.to_string()),
            AblationOutcome::Diverged { .. } => ("inf".into(), "inf".into()),
        };
        w.write_record([r.ablation.label(), &mae, &mse])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a table written by [`write_ablation_table`] back into `(label, mae, mse)`.
pub fn read_ablation_table(path: impl AsRef<Path>) -> Result<Vec<(String, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let num = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad ablation row {rec:?}")))
            };
            Ok((rec.get(0).unwrap_or_default().to_string(), num(1)?, num(2)?))
        })
        .collect()
}

pub fn ablation_labels() -> Vec<&'static str> {
    Ablation::ALL.iter().map(|a| a.label()).collect()
}

/// Range mapped onto the 0–255 gray levels of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRange {
    pub file: String,
    pub min: f64,
    pub max: f64,
}

/// Encodes `f` as a binary graymap, `min` as 0 and `max` as 255. A constant
/// field maps to 0.
pub fn encode_pgm<T: Scalar>(f: &ScalarField<T>) -> (Vec<u8>, f64, f64) {
    let (lo, hi) = f
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", f.width(), f.height()).into_bytes();
    out.extend(f.values().iter().map(|v| {
        if span > 0.0 {
            ((v.as_f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    (out, lo, hi)
}

/// Writes one graymap per frame as `<name>_<n>.pgm` and returns their ranges.
pub fn dump_frames<T: Scalar>(
    dir: impl AsRef<Path>,
    name: &str,
    frames: &[ScalarField<T>],
) -> Result<Vec<ImageRange>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(n, f)| {
            let file = format!("{name}_{n:03}.pgm");
            let (bytes, min, max) = encode_pgm(f);
            fs::write(dir.join(&file), bytes)?;
            Ok(ImageRange { file, min, max })
        })
        .collect()
}

pub fn write_image_index(dir: impl AsRef<Path>, ranges: &[ImageRange]) -> Result<()> {
    write_json(&dir.as_ref().join("images.json"), &ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::sim::generate_dataset;

    fn records(count: usize) -> (Vec<SequenceRecord<f32>>, GridSpec) {
        let grid = GridSpec::new(8, 10, 1.0, 1.0).unwrap();
        let sc = [FlowScenario::uniform(0.4, 0.3, 0.02, 9)];
        (generate_dataset(&sc, &grid, 3, count).unwrap(), grid)
    }

    #[test]
    fn dataset_round_trip_is_exact_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pinpds");
        let (recs, grid) = records(3);
        write_dataset(&path, &recs, &grid, 3).unwrap();
        assert_eq!(
            fs::metadata(&path).unwrap().len(),
            dataset_file_size(3, 3, 8, 10)
        );
        let (back, meta) = read_container::<f32>(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(meta.kind, ContainerKind::Dataset);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pinpds");
        let (_, grid) = records(0);
        write_dataset::<f32>(&path, &[], &grid, 3).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), DATASET_HEADER_BYTES);
        assert!(read_container::<f32>(&path).unwrap().0.is_empty());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pinpds");
        let (recs, grid) = records(2);
        write_dataset(&path, &recs, &grid, 3).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(
            matches!(read_container::<f32>(&path), Err(Error::Format(m)) if m.contains("magic"))
        );
        bytes[0] = b'P';
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        assert!(
            matches!(read_container::<f32>(&path), Err(Error::Format(m)) if m.contains("promises"))
        );
        // A huge count in the header fails the size check instead of allocating.
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(read_container::<f32>(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            model: ModelConfig {
                window: 2,
                inference_widths: vec![4, 8],
                correction_widths: vec![4],
                spatiotemporal: true,
            },
            ..RunConfig::default()
        };
        let model = crate::nn::Model::new(cfg.model.clone()).unwrap();
        for path in [dir.path().join("a.ck"), dir.path().join("b.ck")] {
            let ck = Checkpoint {
                config: cfg.clone(),
                params: model.init_params::<f32>(3),
                epoch: Some(4),
                best_val_mse: Some(0.25),
                log: vec![],
            };
            write_checkpoint(&path, &ck).unwrap();
            let back = read_checkpoint::<f32>(&path).unwrap();
            assert_eq!(back.config, cfg);
            assert_eq!(back.epoch, Some(4));
            for ((a, p), (b, q)) in back.params.iter().zip(ck.params.iter()) {
                assert_eq!(a, b);
                assert_eq!(p.value, q.value);
            }
        }
        let mut bytes = fs::read(dir.path().join("a.ck")).unwrap();
        bytes[3] ^= 1;
        fs::write(dir.path().join("a.ck"), bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(dir.path().join("a.ck")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn graymap_maps_extremes_to_black_and_white() {
        let f = ScalarField::<f64>::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 1.0);
        let (bytes, lo, hi) = encode_pgm(&f);
        assert_eq!((lo, hi), (-1.0, 4.0));
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 6);
        assert_eq!((px[0], px[5]), (0, 255));
        let (flat, _, _) = encode_pgm(&ScalarField::<f64>::filled(1, 2, 3.0));
        assert!(flat.ends_with(&[0, 0]));
    }

    #[test]
    fn loss_log_has_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_loss_log(&path, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "epoch,data,physical,temporal,total,lr\n"
        );
    }
}
