//! Pipeline configuration and the `key=value` text convention shared by
//! session manifests, config files and synthetic scene files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` entries. Blank lines and lines starting with `#` are
/// skipped; repeated keys are kept in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvText {
    pub entries: Vec<(String, String)>,
}

impl KvText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing key {key:?}")))?;
        parse_value(key, raw)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|raw| parse_value(key, raw)).transpose()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value for {key}: {raw:?}")))
}

/// Parses whitespace- or comma-separated numbers.
pub(crate) fn parse_numbers(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Every tunable of the engine. Lengths in meters, angles in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub block_size: usize,
    pub anchor_count: usize,
    pub conf_threshold: f64,
    pub conf_quantile: f64,
    pub sensor_range: (f64, f64),
    pub merge_threshold: f64,
    pub decay_rate: f64,
    pub visibility_fraction: f64,
    pub occlusion_margin: f64,
    pub erosion_radius: usize,
    pub sample_stride: usize,
    pub max_points_per_instance: usize,
    pub max_medians: usize,
    pub plane_angle_tol: f64,
    pub plane_offset_tol: f64,
    pub plane_history: usize,
    pub plane_every: usize,
    pub plane_prior_deg: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_tol: f64,
    pub ransac_max_points: usize,
    pub grid_cell: f64,
    pub density_threshold: f64,
    pub floor_eps: f64,
    pub agent_height: f64,
    pub dilation_radius: f64,
    pub min_component_area: usize,
    pub snap_radius: f64,
    pub goal_hysteresis: f64,
    pub goal_class: Option<u32>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            block_size: 10,
            anchor_count: 10,
            conf_threshold: 1.1,
            conf_quantile: 0.10,
            sensor_range: (0.15, 5.0),
            merge_threshold: 0.30,
            decay_rate: 0.25,
            visibility_fraction: 0.5,
            occlusion_margin: 0.10,
            erosion_radius: 1,
            sample_stride: 4,
            max_points_per_instance: 64,
            max_medians: 50,
            plane_angle_tol: 5.0,
            plane_offset_tol: 0.1,
            plane_history: 5,
            plane_every: 2,
            plane_prior_deg: 30.0,
            ransac_iterations: 256,
            ransac_inlier_tol: 0.02,
            ransac_max_points: 20_000,
            grid_cell: 0.05,
            density_threshold: 3.0,
            floor_eps: 0.08,
            agent_height: 2.0,
            dilation_radius: 0.30,
            min_component_area: 4,
            snap_radius: 0.5,
            goal_hysteresis: 0.2,
            goal_class: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.block_size == 0 || self.anchor_count == 0 || self.anchor_count > self.block_size {
            return bad("require 0 < anchor_count <= block_size");
        }
        if !(self.conf_quantile > 0.0 && self.conf_quantile < 1.0) {
            return bad("conf_quantile must lie in (0, 1)");
        }
        let (lo, hi) = self.sensor_range;
        if !(lo >= 0.0 && hi > lo) {
            return bad("sensor_range must satisfy 0 <= min < max");
        }
        let lengths = [
            self.merge_threshold,
            self.plane_offset_tol,
            self.grid_cell,
            self.dilation_radius,
            self.ransac_inlier_tol,
            self.floor_eps,
            self.agent_height,
            self.snap_radius,
        ];
        if lengths.iter().any(|&x| !(x > 0.0)) {
            return bad("all lengths must be > 0");
        }
        if self.sample_stride == 0 || self.plane_history == 0 || self.plane_every == 0 {
            return bad("sample_stride, plane_history and plane_every must be >= 1");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        Ok(())
    }

    /// Applies every recognized key of `kv`; unknown keys are ignored so that
    /// manifests can carry them alongside other data.
    pub fn apply(&mut self, kv: &KvText) -> Result<()> {
        for (key, raw) in &kv.entries {
            let key = key.as_str();
            match key {
                "block_size" => self.block_size = parse_value(key, raw)?,
                "anchor_count" => self.anchor_count = parse_value(key, raw)?,
                "conf_threshold" => self.conf_threshold = parse_value(key, raw)?,
                "conf_quantile" => self.conf_quantile = parse_value(key, raw)?,
                "sensor_range" => {
                    let v = parse_numbers(key, raw)?;
                    if v.len() != 2 {
                        return Err(Error::Config("sensor_range needs two values".into()));
                    }
                    self.sensor_range = (v[0], v[1]);
                }
                "merge_threshold" => self.merge_threshold = parse_value(key, raw)?,
                "decay_rate" => self.decay_rate = parse_value(key, raw)?,
                "visibility_fraction" => self.visibility_fraction = parse_value(key, raw)?,
                "occlusion_margin" => self.occlusion_margin = parse_value(key, raw)?,
                "erosion_radius" => self.erosion_radius = parse_value(key, raw)?,
                "sample_stride" => self.sample_stride = parse_value(key, raw)?,
                "max_points_per_instance" => self.max_points_per_instance = parse_value(key, raw)?,
                "max_medians" => self.max_medians = parse_value(key, raw)?,
                "plane_angle_tol" => self.plane_angle_tol = parse_value(key, raw)?,
                "plane_offset_tol" => self.plane_offset_tol = parse_value(key, raw)?,
                "plane_history" => self.plane_history = parse_value(key, raw)?,
                "plane_every" => self.plane_every = parse_value(key, raw)?,
                "plane_prior_deg" => self.plane_prior_deg = parse_value(key, raw)?,
                "ransac_iterations" => self.ransac_iterations = parse_value(key, raw)?,
                "ransac_inlier_tol" => self.ransac_inlier_tol = parse_value(key, raw)?,
                "ransac_max_points" => self.ransac_max_points = parse_value(key, raw)?,
                "grid_cell" => self.grid_cell = parse_value(key, raw)?,
                "density_threshold" => self.density_threshold = parse_value(key, raw)?,
                "floor_eps" => self.floor_eps = parse_value(key, raw)?,
                "agent_height" => self.agent_height = parse_value(key, raw)?,
                "dilation_radius" => self.dilation_radius = parse_value(key, raw)?,
                "min_component_area" => self.min_component_area = parse_value(key, raw)?,
                "snap_radius" => self.snap_radius = parse_value(key, raw)?,
                "goal_hysteresis" => self.goal_hysteresis = parse_value(key, raw)?,
                "goal_class" => {
                    self.goal_class = match raw.as_str() {
                        "" | "none" => None,
                        other => Some(parse_value(key, other)?),
                    }
                }
                "seed" => self.seed = parse_value(key, raw)?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&KvText::read(path)?)?;
        Ok(cfg)
    }

    /// Voxel edge used for per-block cloud downsampling.
    pub fn voxel_size(&self) -> f64 {
        self.grid_cell / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_constants() {
        let c = PipelineConfig::default();
        assert_eq!((c.block_size, c.anchor_count), (10, 10));
        assert_eq!(c.conf_threshold, 1.1);
        assert_eq!(c.conf_quantile, 0.10);
        assert_eq!(c.merge_threshold, 0.30);
        assert_eq!((c.plane_angle_tol, c.plane_offset_tol, c.plane_history), (5.0, 0.1, 5));
        c.validate().unwrap();
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = PipelineConfig::default();
        let kv = KvText::parse("# comment\nblock_size=4\nanchor_count=2\nsensor_range=0.1, 3\nunknown=1\n").unwrap();
        c.apply(&kv).unwrap();
        assert_eq!((c.block_size, c.anchor_count, c.sensor_range), (4, 2, (0.1, 3.0)));

        let kv = KvText::parse("anchor_count=11\n").unwrap();
        assert!(PipelineConfig::default().apply(&kv).is_err());
        assert!(KvText::parse("novalue\n").is_err());
    }
}
