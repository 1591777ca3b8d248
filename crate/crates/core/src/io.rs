//! File formats: measurement CSV, scene and offsets TOML.
//!
//! A measurement file starts with a `M,N,c,kind` line followed by `M` rows of
//! `N` comma-separated times in seconds.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{MeasurementKind, MeasurementMatrix, Scene, TimingOffsets};

pub fn write_measurement<W: Write>(meas: &MeasurementMatrix, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let werr = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record([
        meas.num_mics().to_string(),
        meas.num_sources().to_string(),
        meas.c.to_string(),
        meas.kind.as_str().to_string(),
    ])
    .map_err(werr)?;
    for row in meas.values.row_iter() {
        // `{}` on f64 prints the shortest round-tripping decimal
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn read_measurement<R: Read>(input: R, origin: &Path) -> Result<MeasurementMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let perr = |msg: String| Error::parse(origin, msg);
    let mut rows = r.records();
    let head = rows
        .next()
        .ok_or_else(|| perr("empty measurement file".into()))?
        .map_err(|e| perr(e.to_string()))?;
    if head.len() != 4 {
        return Err(perr(format!(
            "first line must be `M,N,c,kind`, got {} fields",
            head.len()
        )));
    }
    let m: usize = head[0]
        .parse()
        .map_err(|_| perr(format!("bad M `{}`", &head[0])))?;
    let n: usize = head[1]
        .parse()
        .map_err(|_| perr(format!("bad N `{}`", &head[1])))?;
    let c: f64 = head[2]
        .parse()
        .map_err(|_| perr(format!("bad c `{}`", &head[2])))?;
    let kind: MeasurementKind = head[3].parse()?;
    let mut values = DMatrix::zeros(m, n);
    let mut count = 0;
    for (i, rec) in rows.enumerate() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if i >= m {
            return Err(Error::DimensionMismatch(format!(
                "{}: more than {m} data rows",
                origin.display()
            )));
        }
        if rec.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{}: row {} has {} entries, expected {n}",
                origin.display(),
                i + 1,
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            values[(i, j)] = field.parse().map_err(|_| {
                perr(format!(
                    "row {} column {}: bad number `{field}`",
                    i + 1,
                    j + 1
                ))
            })?;
        }
        count += 1;
    }
    if count != m {
        return Err(Error::DimensionMismatch(format!(
            "{}: {count} data rows, expected {m}",
            origin.display()
        )));
    }
    MeasurementMatrix::new(values, kind, c)
}

pub fn save_measurement(meas: &MeasurementMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_measurement(meas, BufWriter::new(file))
}

pub fn load_measurement(path: &Path) -> Result<MeasurementMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_measurement(file, path)
}

// TOML integers are signed 64-bit, so the seed travels as a string.
#[derive(Serialize, Deserialize)]
struct SceneFile {
    c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<String>,
    delta: Vec<f64>,
    eta: Vec<f64>,
    mic_positions: Vec<[f64; 3]>,
    src_positions: Vec<[f64; 3]>,
}

pub fn scene_to_toml(scene: &Scene) -> Result<String> {
    let file = SceneFile {
        c: scene.c,
        seed: scene.seed.map(|s| s.to_string()),
        delta: scene.delta.clone(),
        eta: scene.eta.clone(),
        mic_positions: scene.mic_positions.clone(),
        src_positions: scene.src_positions.clone(),
    };
    toml::to_string(&file).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn scene_from_toml(text: &str, origin: &Path) -> Result<Scene> {
    let file: SceneFile = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
    let seed = file
        .seed
        .map(|s| s.parse::<u64>())
        .transpose()
        .map_err(|e| Error::parse(origin, format!("bad seed: {e}")))?;
    let scene = Scene {
        mic_positions: file.mic_positions,
        src_positions: file.src_positions,
        delta: file.delta,
        eta: file.eta,
        c: file.c,
        seed,
    };
    if scene.delta.len() != scene.num_mics() || scene.eta.len() != scene.num_sources() {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} mics with {} start times, {} sources with {} emission times",
            origin.display(),
            scene.num_mics(),
            scene.delta.len(),
            scene.num_sources(),
            scene.eta.len()
        )));
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_toml(scene)?).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_toml(&text, path)
}

pub fn save_offsets(offsets: &TimingOffsets, path: &Path) -> Result<()> {
    let text = toml::to_string(offsets).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `delta`/`eta` arrays; `eta[0]` must be 0.
pub fn load_offsets(path: &Path) -> Result<TimingOffsets> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: TimingOffsets = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    TimingOffsets::new(raw.delta, raw.eta)
}
