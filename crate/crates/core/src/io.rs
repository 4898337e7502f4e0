//! Configuration, run manifests and on-disk formats.
//!
//! Configs and reports are JSON, trial tables CSV, trajectory dumps a small
//! binary format. Every format carries a version field.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentReport, Verdict};
use crate::late::{gamma0, LnPolicy, SurgeryConfig};
use crate::torus::{TorusGeometry, MAX_DIM};
use crate::walk::Trajectory;

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const TRAJECTORY_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const TRAJECTORY_MAGIC: &[u8; 4] = b"CLTR";

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_d() -> usize {
    3
}
fn default_n() -> u32 {
    16
}
fn default_trials() -> usize {
    100
}
fn default_budget() -> u64 {
    1 << 32
}
fn default_policy() -> String {
    "clamped".into()
}

/// A run configuration. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(rename = "N", default = "default_n")]
    pub n: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_budget")]
    pub budget_steps: u64,
    #[serde(default)]
    pub surgery: SurgeryConfig,
    #[serde(rename = "lN_policy", default = "default_policy")]
    pub ln_policy: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub u: Option<f64>,
    /// Requires `γ ∈ (γ_0, 1)` instead of `(0, 1)`.
    #[serde(default)]
    pub sharp: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

fn bad(field: &str, message: String) -> Error {
    Error::Config { field: field.into(), message }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version)));
        }
        if !(3..=MAX_DIM).contains(&self.d) {
            return Err(bad("d", format!("{} outside 3..={MAX_DIM}", self.d)));
        }
        TorusGeometry::new(self.d, self.n).map_err(|e| bad("N", e.to_string()))?;
        if self.trials == 0 {
            return Err(bad("trials", "must be positive".into()));
        }
        let s = &self.surgery;
        if !(s.eps > 0.0) {
            return Err(bad("surgery.eps", format!("{} must be positive", s.eps)));
        }
        if !(s.k > 6.0 * s.eps) {
            return Err(bad("surgery.K", format!("K={} must exceed 6 eps = {}", s.k, 6.0 * s.eps)));
        }
        if !(s.m0 > 0.0) {
            return Err(bad("surgery.M0", format!("{} must be positive", s.m0)));
        }
        if !(0.0..=1.0).contains(&s.delta) {
            return Err(bad("surgery.delta", format!("{} outside [0,1]", s.delta)));
        }
        let lo = if self.sharp { gamma0(self.d) } else { 0.0 };
        if !(s.gamma > lo && s.gamma < 1.0) {
            return Err(bad("surgery.gamma", format!("{} outside ({lo}, 1)", s.gamma)));
        }
        self.policy()?;
        if let Some(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(bad("alpha", format!("{a} must be nonnegative")));
            }
        }
        if let Some(u) = self.u {
            if !(u >= 0.0) {
                return Err(bad("u", format!("{u} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<LnPolicy> {
        self.ln_policy.parse().map_err(|e: Error| bad("lN_policy", e.to_string()))
    }

    pub fn geometry(&self) -> Result<TorusGeometry> {
        TorusGeometry::new(self.d, self.n)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn parse_config(json: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(json).map_err(|e| bad("<document>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// What is needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub green_digest: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub wall_clock_secs: f64,
    pub budget_steps: Option<u64>,
    pub passed: bool,
}

impl RunManifest {
    pub fn for_report(command: &str, report: &ExperimentReport, wall_clock_secs: f64, budget_steps: Option<u64>) -> Self {
        let json = serde_json::to_string(&report.config).expect("config serializes");
        RunManifest {
            version: MANIFEST_VERSION,
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config: report.config.clone(),
            config_hash: hex::encode(Sha256::digest(json.as_bytes())),
            seed: report.seed,
            green_digest: report.green_digest.clone(),
            verdicts: report.verdicts.clone(),
            wall_clock_secs,
            budget_steps,
            passed: report.passed(),
        }
    }
}

/// The single writer for a run's artifacts under one output directory.
pub struct ArtifactWriter {
    dir: PathBuf,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ArtifactWriter { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `<id>.json`, `<id>.csv` (when the report has rows) and
    /// `<id>.manifest.json`, returning the paths written.
    pub fn write_report(&self, report: &ExperimentReport, manifest: &RunManifest) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let json = self.dir.join(format!("{}.json", report.id));
        std::fs::write(&json, report.to_json()?)?;
        out.push(json);
        if !report.rows.is_empty() {
            let csv = self.dir.join(format!("{}.csv", report.id));
            report.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
            out.push(csv);
        }
        let m = self.dir.join(format!("{}.manifest.json", report.id));
        std::fs::write(&m, serde_json::to_string_pretty(manifest)?)?;
        out.push(m);
        Ok(out)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?)?;
        Ok(p)
    }
}

/// Binary dump: magic, version, d, N, start, step count, one byte per step.
pub fn write_trajectory<W: Write>(mut w: W, t: &Trajectory) -> Result<()> {
    let geo = t.geometry();
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
    w.write_all(&[geo.d() as u8])?;
    w.write_all(&geo.N().to_le_bytes())?;
    w.write_all(&t.start().to_le_bytes())?;
    w.write_all(&(t.len() as u64).to_le_bytes())?;
    w.write_all(&t.steps())?;
    Ok(())
}

pub fn read_trajectory<R: Read>(mut r: R) -> Result<Trajectory> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a trajectory dump".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TRAJECTORY_VERSION {
        return Err(Error::Format(format!("trajectory dump version {version}, expected {TRAJECTORY_VERSION}")));
    }
    let mut d = [0u8; 1];
    r.read_exact(&mut d)?;
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4);
    let geo = TorusGeometry::new(d[0] as usize, n)?;
    r.read_exact(&mut b4)?;
    let start = u32::from_le_bytes(b4);
    if start >= geo.volume() {
        return Err(Error::Format(format!("start label {start} outside the torus")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("length overflow".into()))?;
    let mut steps = Vec::new();
    r.take(len as u64).read_to_end(&mut steps)?;
    if steps.len() != len {
        return Err(Error::Format(format!("truncated dump: {} of {len} steps", steps.len())));
    }
    if let Some(bad) = steps.iter().find(|&&s| s as usize >= 2 * geo.d()) {
        return Err(Error::Format(format!("direction code {bad} out of range")));
    }
    Ok(Trajectory::from_steps(geo, start, &steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{simulate_from, RngStream};

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.d, c.n, c.version), (3, 16, CONFIG_VERSION));
        assert_eq!(c.surgery, SurgeryConfig::default());
    }

    #[test]
    fn k_at_six_eps_rejected() {
        let e = parse_config(r#"{"surgery": {"gamma": 0.9, "delta": 0.25, "eps": 0.5, "K": 3.0, "M0": 1.0}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "surgery.K"), "{e}");
    }

    #[test]
    fn sharp_regime_gamma_range() {
        let cfg = |g: f64| format!(r#"{{"sharp": true, "surgery": {{"gamma": {g}, "delta": 0.25, "eps": 0.5, "K": 4.0, "M0": 1.0}}}}"#);
        assert!(parse_config(&cfg(0.9)).is_ok());
        let e = parse_config(&cfg(0.8)).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "surgery.gamma"));
        assert!(parse_config(&cfg(1.0)).is_err());
    }

    #[test]
    fn unknown_fields_and_bad_policy_rejected() {
        assert!(parse_config(r#"{"bogus": 1}"#).is_err());
        let e = parse_config(r#"{"lN_policy": "clamped:0"}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "lN_policy"));
        assert_eq!(parse_config(r#"{"lN_policy": "clamped:3"}"#).unwrap().policy().unwrap(), LnPolicy::Clamped(Some(3)));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn trajectory_dump_round_trip() {
        let geo = TorusGeometry::new(3, 5).unwrap();
        let (t, _) = simulate_from(&geo, 7, 500, &mut RngStream::new(1, "dump", 0)).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 4 + 4 + 8 + 500);
        assert_eq!(read_trajectory(&buf[..]).unwrap(), t);
        assert!(read_trajectory(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_trajectory(&bad[..]).is_err());
    }
}
