use std::collections::BTreeMap;
use std::path::PathBuf;

use convexity_lab::data::{self, CsvOptions, IdxOptions, TeacherSpec};
use convexity_lab::rng;
use convexity_lab::{Architecture, Dataset, Params};
use serde::Serialize;

use crate::args::{DataArgs, ModelArgs};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize>, digit: u8 },
    Teacher(TeacherSpec),
}

fn options(parts: &[&str], allowed: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected key=value in data spec, got {part:?}")))?;
        if !allowed.contains(&k) {
            return Err(CliError::usage(format!("unknown data option {k:?}; expected one of {allowed:?}")));
        }
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| CliError::usage(format!("bad value {v:?} for data option {key}"))),
    }
}

impl std::str::FromStr for DataSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if let Some(rest) = s.strip_prefix("idx:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() < 2 {
                return Err(CliError::usage("idx data needs `idx:IMAGES,LABELS`"));
            }
            let opts = options(&parts[2..], &["limit", "digit"])?;
            return Ok(DataSource::Idx {
                images: parts[0].into(),
                labels: parts[1].into(),
                limit: opts.get("limit").map(|v| v.parse()).transpose().map_err(|_| CliError::usage("bad idx limit"))?,
                digit: num(&opts, "digit", 0u8)?,
            });
        }
        if let Some(rest) = s.strip_prefix("teacher:") {
            let parts: Vec<&str> = rest.split(',').filter(|p| !p.is_empty()).collect();
            let opts = options(&parts, &["arch", "n", "noise", "scale", "seed", "radius"])?;
            let arch: Architecture = opts
                .get("arch")
                .ok_or_else(|| CliError::usage("teacher data needs arch=AxBx...x1"))?
                .parse()
                .map_err(CliError::from)?;
            return Ok(DataSource::Teacher(TeacherSpec {
                arch,
                weight_scale: num(&opts, "scale", 1.0)?,
                noise: num(&opts, "noise", 0.0)?,
                samples: num(&opts, "n", 100usize)?,
                seed: num(&opts, "seed", 0u64)?,
                radius: num(&opts, "radius", 1.0)?,
            }));
        }
        let path = s.strip_prefix("csv:").unwrap_or(s);
        if path.is_empty() {
            return Err(CliError::usage("empty data path"));
        }
        Ok(DataSource::Csv(path.into()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub source: String,
    pub samples: usize,
    pub input_dim: usize,
    #[serde(with = "convexity_lab::serde_f17")]
    pub radius: f64,
}

pub struct LoadedData {
    pub dataset: Dataset,
    pub teacher: Option<Params>,
    pub summary: DataSummary,
}

pub fn load(args: &DataArgs) -> Result<LoadedData, CliError> {
    let source: DataSource = args.data.parse()?;
    let (mut dataset, teacher) = match &source {
        DataSource::Csv(path) => {
            let d = data::load_csv(path, CsvOptions { header: args.header, radius: None })?;
            (d, None)
        }
        DataSource::Idx { images, labels, limit, digit } => {
            let d = data::load_idx(images, labels, IdxOptions { limit: *limit, target_digit: *digit })?;
            (d, None)
        }
        DataSource::Teacher(spec) => {
            let t = data::gen_teacher(spec)?;
            (t.dataset, Some(t.teacher))
        }
    };
    if let Some(r) = args.normalize {
        dataset = data::normalize_radius(&dataset, r)?;
    }
    if let Some(r) = args.radius {
        dataset = dataset.with_radius(r)?;
    }
    let summary = DataSummary {
        source: args.data.clone(),
        samples: dataset.len(),
        input_dim: dataset.input_dim(),
        radius: dataset.radius(),
    };
    Ok(LoadedData { dataset, teacher, summary })
}

fn parse_arch(s: &str) -> Result<Architecture, CliError> {
    s.parse().map_err(CliError::from)
}

/// Starting weights for `model`. Random weights use He initialization from
/// stream `(seed, 0)`.
pub fn weights(model: &ModelArgs, data: &LoadedData) -> Result<Params, CliError> {
    let arch = model.arch.as_deref().map(parse_arch).transpose()?;
    let need_arch = || arch.clone().ok_or_else(|| CliError::usage(format!("--weights {} needs --arch", model.weights)));
    let params = match model.weights.as_str() {
        "zero" => Params::zeros(&need_arch()?),
        "random" => Params::he_init(&need_arch()?, 1.0, &mut rng::stream(model.seed, 0)),
        "teacher" => data
            .teacher
            .clone()
            .ok_or_else(|| CliError::usage("--weights teacher needs teacher: data"))?,
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
            serde_json::from_str::<Params>(&text).map_err(|e| CliError::usage(format!("{path}: {e}")))?
        }
    };
    if let Some(a) = &arch {
        if a != params.arch() {
            return Err(CliError::usage(format!("--arch {a} does not match weights with widths {}", params.arch())));
        }
    }
    if params.arch().input_dim() != data.dataset.input_dim() {
        return Err(CliError::usage(format!(
            "network input width {} does not match data dimension {}",
            params.arch().input_dim(),
            data.dataset.input_dim()
        )));
    }
    Ok(params)
}
