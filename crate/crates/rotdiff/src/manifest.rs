//! Dataset directories: PGM image pairs plus a line-oriented manifest.
//!
//! The manifest starts with `#` header lines holding the generation plan and
//! its hash, followed by one record per image pair:
//!
//! ```text
//! role angle seed clean_path noisy_path
//! ```
//!
//! Paths are relative to the dataset directory. Clean images are 8-bit PGM;
//! noisy images are 16-bit PGM in the extended encoding, since noise is not
//! clipped to the grey range.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rotdiff_core::dataset::{DatasetPlan, ImageRecord, Pair, Role, TestScenes};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::pgm::{self, Depth, Encoding16};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "# rotdiff dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub role: Role,
    pub angle_deg: f64,
    pub seed: u64,
    pub clean: PathBuf,
    pub noisy: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub plan: DatasetPlan,
    pub entries: Vec<Entry>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical text form of a plan; equal plans give equal strings.
pub fn plan_canonical(plan: &DatasetPlan) -> String {
    format!(
        "size={} train_angle={} train_count={} test_count={} sigma={} test_scenes={} seed={} test_angles={}",
        plan.size,
        plan.train_angle,
        plan.train_count,
        plan.test_count,
        plan.noise_sigma,
        plan.test_scenes.as_str(),
        plan.seed,
        join(&plan.test_angles)
    )
}

pub fn plan_hash(plan: &DatasetPlan) -> String {
    hex(&Sha256::digest(plan_canonical(plan).as_bytes()))
}

fn angle_dir(angle_deg: f64) -> String {
    format!("test/{angle_deg}")
}

fn entry_for(record: &ImageRecord) -> Entry {
    let dir = match record.role {
        Role::Train => String::from("train"),
        Role::Test => angle_dir(record.angle_deg),
    };
    Entry {
        role: record.role,
        angle_deg: record.angle_deg,
        seed: record.seed,
        clean: PathBuf::from(format!("{dir}/clean_{:04}.pgm", record.index)),
        noisy: PathBuf::from(format!("{dir}/noisy_{:04}.pgm", record.index)),
    }
}

impl Manifest {
    pub fn for_plan(plan: &DatasetPlan) -> Self {
        Self {
            plan: plan.clone(),
            entries: plan.all_records().iter().map(entry_for).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.plan;
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(
            out,
            "# size={} train_angle={} train_count={} test_count={} sigma={} test_scenes={} seed={}",
            p.size,
            p.train_angle,
            p.train_count,
            p.test_count,
            p.noise_sigma,
            p.test_scenes.as_str(),
            p.seed
        );
        let _ = writeln!(out, "# test_angles={}", join(&p.test_angles));
        let _ = writeln!(out, "# plan_hash={}", plan_hash(p));
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.role.as_str(),
                e.angle_deg,
                e.seed,
                e.clean.display(),
                e.noisy.display()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err("missing manifest header".into()),
        }
        let mut plan = DatasetPlan::desk(0);
        let mut stated_hash = None;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| format!("line {}: bad header field `{field}`", i + 1))?;
                    apply_header(&mut plan, k, v).map_err(|m| format!("line {}: {m}", i + 1))?;
                    if k == "plan_hash" {
                        stated_hash = Some(v.to_string());
                    }
                }
                continue;
            }
            entries.push(parse_entry(line).map_err(|m| format!("line {}: {m}", i + 1))?);
        }
        if stated_hash.as_deref() != Some(plan_hash(&plan).as_str()) {
            return Err("plan hash does not match the header".into());
        }
        Ok(Self { plan, entries })
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Self::parse(&text).map_err(|m| CliError::format(&path, m))
    }

    pub fn entries_for(&self, role: Role, angle_deg: Option<f64>) -> impl Iterator<Item = &Entry> {
        self.entries
            .iter()
            .filter(move |e| e.role == role && angle_deg.is_none_or(|a| (e.angle_deg - a).abs() < 1e-9))
    }
}

fn apply_header(plan: &mut DatasetPlan, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("bad number `{v}`"))
    }
    match key {
        "size" => plan.size = num(value)?,
        "train_angle" => plan.train_angle = num(value)?,
        "train_count" => plan.train_count = num(value)?,
        "test_count" => plan.test_count = num(value)?,
        "sigma" => plan.noise_sigma = num(value)?,
        "seed" => plan.seed = num(value)?,
        "test_scenes" => {
            plan.test_scenes = TestScenes::from_name(value).ok_or_else(|| format!("unknown test scenes `{value}`"))?
        }
        "test_angles" => {
            plan.test_angles = if value.is_empty() {
                Vec::new()
            } else {
                value.split(',').map(num).collect::<Result<_, _>>()?
            }
        }
        "plan_hash" => {}
        _ => return Err(format!("unknown header key `{key}`")),
    }
    Ok(())
}

fn parse_entry(line: &str) -> Result<Entry, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 5 {
        return Err(format!("expected 5 fields, found {}", f.len()));
    }
    let role = match f[0] {
        "train" => Role::Train,
        "test" => Role::Test,
        other => return Err(format!("unknown role `{other}`")),
    };
    Ok(Entry {
        role,
        angle_deg: f[1].parse().map_err(|_| format!("bad angle `{}`", f[1]))?,
        seed: f[2].parse().map_err(|_| format!("bad seed `{}`", f[2]))?,
        clean: PathBuf::from(f[3]),
        noisy: PathBuf::from(f[4]),
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Renders every pair of the plan into `dir` and writes the manifest.
pub fn generate(plan: &DatasetPlan, dir: &Path) -> CliResult<Manifest> {
    plan.validate()?;
    let manifest = Manifest::for_plan(plan);
    create_dir(&dir.join("train"))?;
    for &a in &plan.test_angles {
        create_dir(&dir.join(angle_dir(a)))?;
    }
    for (record, entry) in plan.all_records().iter().zip(&manifest.entries) {
        let pair = plan.realize(record)?;
        pgm::write(&dir.join(&entry.clean), &pair.clean, Depth::Eight)?;
        pgm::write(&dir.join(&entry.noisy), &pair.noisy, Depth::Sixteen(Encoding16::EXTENDED))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {} image pairs to {}", manifest.entries.len(), dir.display());
    Ok(manifest)
}

pub fn load_pair(dir: &Path, entry: &Entry) -> CliResult<Pair> {
    let (clean, _) = pgm::read(&dir.join(&entry.clean))?;
    let (noisy, _) = pgm::read(&dir.join(&entry.noisy))?;
    if !clean.same_shape(&noisy) {
        return Err(CliError::format(&dir.join(&entry.noisy), "clean and noisy images differ in size"));
    }
    Ok(Pair { clean, noisy })
}

/// A dataset directory with its manifest loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> CliResult<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(dir)?,
        })
    }

    pub fn train_pairs(&self) -> CliResult<Vec<Pair>> {
        self.manifest
            .entries_for(Role::Train, None)
            .map(|e| load_pair(&self.dir, e))
            .collect()
    }

    pub fn test_pairs(&self, angle_deg: f64) -> CliResult<Vec<Pair>> {
        self.manifest
            .entries_for(Role::Test, Some(angle_deg))
            .map(|e| load_pair(&self.dir, e))
            .collect()
    }

    pub fn test_angles(&self) -> &[f64] {
        &self.manifest.plan.test_angles
    }
}
