//! Dataset generation and ingestion.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::norm2;
use crate::net::{self, Architecture, Dataset, Params};
use crate::rng;

/// Synthetic data labelled by a fixed reference ReLU network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherSpec {
    pub arch: Architecture,
    /// Standard deviation of the teacher's weights.
    pub weight_scale: f64,
    /// Standard deviation of Gaussian label noise.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
    /// Inputs are rescaled so the largest norm equals this radius.
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct TeacherData {
    pub dataset: Dataset,
    pub teacher: Params,
}

/// Standard Gaussian inputs rescaled to `max ‖a_i‖ = r`, labelled by a Gaussian
/// teacher network plus noise. Deterministic in the seed.
pub fn gen_teacher(spec: &TeacherSpec) -> Result<TeacherData> {
    if !(spec.weight_scale > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::invalid("teacher needs weight scale > 0 and noise >= 0"));
    }
    if spec.samples == 0 || !(spec.radius > 0.0) {
        return Err(Error::invalid("teacher needs at least one sample and a positive radius"));
    }
    let n0 = spec.arch.input_dim();
    let teacher = Params::gaussian(&spec.arch, spec.weight_scale, &mut rng::stream(spec.seed, 0));
    let mut input_rng = rng::stream(spec.seed, 1);
    let mut inputs: Vec<Vec<f64>> = (0..spec.samples)
        .map(|_| (0..n0).map(|_| StandardNormal.sample(&mut input_rng)).collect())
        .collect();
    let max_norm = inputs.iter().map(|a| norm2(a)).fold(0.0, f64::max);
    let s = spec.radius / max_norm;
    for a in inputs.iter_mut() {
        a.iter_mut().for_each(|v| *v *= s);
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut noise_rng = rng::stream(spec.seed, 2);
    let labels = inputs
        .iter()
        .map(|a| {
            let clean = net::forward(a, &teacher)?;
            Ok(if spec.noise > 0.0 {
                clean + noise.sample(&mut noise_rng)
            } else {
                clean
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let dataset = Dataset::new(inputs, labels)?.with_radius(spec.radius)?;
    Ok(TeacherData { dataset, teacher })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CsvOptions {
    /// Skip the first line.
    pub header: bool,
    /// Declared radius; defaults to the largest row norm.
    pub radius: Option<f64>,
}

/// Reads rows of `n₀` features followed by the label.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: "need at least one feature and a label".into(),
            });
        }
        let values = record
            .iter()
            .map(|field| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("non-numeric field {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let (label, features) = values.split_last().unwrap();
        inputs.push(features.to_vec());
        labels.push(*label);
    }
    if inputs.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "no data rows".into(),
        });
    }
    let data = Dataset::new(inputs, labels)?;
    match opts.radius {
        Some(r) => data.with_radius(r),
        None => Ok(data),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        csv::ErrorKind::UnequalLengths { expected_len, len, pos } => Error::Parse {
            path: path.into(),
            line: pos.map_or(line, |p| p.line()),
            message: format!("ragged row: {len} fields, expected {expected_len}"),
        },
        other => Error::Parse {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes rows `features…,label` with 17 significant digits.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (a, f) in data.inputs().iter().zip(data.labels()) {
        let row: Vec<String> = a.iter().chain(std::iter::once(f)).map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Clone, Copy, Debug)]
pub struct IdxOptions {
    pub limit: Option<usize>,
    /// Labels become 1 for this digit and 0 otherwise.
    pub target_digit: u8,
}

struct IdxFile<'a> {
    dims: Vec<usize>,
    payload: &'a [u8],
    payload_offset: u64,
}

fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<IdxFile<'a>> {
    let fmt = |offset: u64, message: String| Error::Format {
        path: path.into(),
        offset,
        message,
    };
    let word = |k: usize| -> Result<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fmt(bytes.len() as u64, "truncated header".into()))
    };
    let found = word(0)?;
    if found != magic {
        return Err(fmt(0, format!("magic number {found}, expected {magic}")));
    }
    let dims = (1..=ndims).map(|k| word(k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 * (ndims + 1);
    let expected = dims.iter().product::<usize>();
    let available = bytes.len() - header;
    if available < expected {
        return Err(fmt(
            bytes.len() as u64,
            format!("truncated payload: {available} bytes, expected {expected}"),
        ));
    }
    Ok(IdxFile {
        dims,
        payload: &bytes[header..header + expected],
        payload_offset: header as u64,
    })
}

/// Reads an IDX image tensor (`N × rows × cols`, unsigned bytes) and its label
/// vector. Pixels are scaled to `[0, 1]` and flattened; labels are binarized
/// against `target_digit`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, opts: IdxOptions) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibytes = fs::read(ipath).map_err(|e| Error::io(ipath, e))?;
    let lbytes = fs::read(lpath).map_err(|e| Error::io(lpath, e))?;
    let img = parse_idx(ipath, &ibytes, IDX_IMAGES_MAGIC, 3)?;
    let lab = parse_idx(lpath, &lbytes, IDX_LABELS_MAGIC, 1)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Format {
            path: lpath.into(),
            offset: 4,
            message: format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        });
    }
    let pixels = img.dims[1] * img.dims[2];
    if pixels == 0 {
        return Err(Error::Format {
            path: ipath.into(),
            offset: img.payload_offset,
            message: "empty images".into(),
        });
    }
    let n = opts.limit.map_or(img.dims[0], |l| l.min(img.dims[0]));
    let inputs: Vec<Vec<f64>> = img
        .payload
        .chunks_exact(pixels)
        .take(n)
        .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels: Vec<f64> = lab.payload[..n]
        .iter()
        .map(|&d| if d == opts.target_digit { 1.0 } else { 0.0 })
        .collect();
    Dataset::new(inputs, labels)
}

/// Rescales every input by `r_target / max‖a_i‖`; labels are unchanged.
pub fn normalize_radius(data: &Dataset, r_target: f64) -> Result<Dataset> {
    if !(r_target > 0.0 && r_target.is_finite()) {
        return Err(Error::invalid(format!("target radius must be positive, got {r_target}")));
    }
    let max_norm = data.max_input_norm();
    if max_norm == 0.0 {
        return Err(Error::invalid("cannot normalize: every input is zero"));
    }
    if max_norm == r_target {
        return data.clone().with_radius(r_target);
    }
    let s = r_target / max_norm;
    let inputs = data
        .inputs()
        .iter()
        .map(|a| a.iter().map(|v| v * s).collect())
        .collect();
    Dataset::new(inputs, data.labels().to_vec())?.with_radius(r_target)
}
