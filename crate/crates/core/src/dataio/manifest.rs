//! Dataset manifest: a line-oriented text file.
//!
//! ```text
//! # comment
//! version=1
//! feature_dim=16
//! values=log1p            # or `counts`, normalized on load
//! genes=G1,G2,G3
//! slide=sample_a          # starts a slide block
//! spots=128
//! cancer_type=BRCA
//! expression=sample_a.expr.molf
//! features=sample_a.feat.molf
//! coords=sample_a.coord.molf
//! ```
//!
//! Header keys come before the first `slide=` line. Relative paths are
//! resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{MolfError, Result};

use super::matrix::{read_matrix, read_matrix_shape};
use super::{log1p_normalize, write_atomic, LIBRARY_SIZE};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Log1p,
    Counts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideEntry {
    pub name: String,
    pub spots: usize,
    pub cancer_type: String,
    pub expression: PathBuf,
    pub features: PathBuf,
    pub coords: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dim: usize,
    pub values: ValueKind,
    pub genes: Vec<String>,
    pub slides: Vec<SlideEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn invalid(msg: impl Into<String>) -> MolfError {
    MolfError::Validation(msg.into())
}

impl DatasetManifest {
    /// Sorted distinct cancer-type labels; a label's one-hot index is its position.
    pub fn vocabulary(&self) -> Vec<String> {
        self.slides
            .iter()
            .map(|s| s.cancer_type.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn total_spots(&self) -> usize {
        self.slides.iter().map(|s| s.spots).sum()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut version = None;
        let mut feature_dim = None;
        let mut values = ValueKind::Log1p;
        let mut genes: Option<Vec<String>> = None;
        let mut slides: Vec<SlideEntry> = Vec::new();
        let mut block: Option<(String, Vec<(String, String)>)> = None;

        fn finish(block: (String, Vec<(String, String)>), slides: &mut Vec<SlideEntry>) -> Result<()> {
            let (name, fields) = block;
            let get = |k: &str| -> Result<String> {
                let hits: Vec<&String> = fields.iter().filter(|(fk, _)| fk == k).map(|(_, v)| v).collect();
                match hits.as_slice() {
                    [v] => Ok((*v).clone()),
                    [] => Err(invalid(format!("slide `{name}`: missing `{k}`"))),
                    _ => Err(invalid(format!("slide `{name}`: duplicate `{k}`"))),
                }
            };
            for (k, _) in &fields {
                if !["spots", "cancer_type", "expression", "features", "coords"].contains(&k.as_str()) {
                    return Err(invalid(format!("slide `{name}`: unknown key `{k}`")));
                }
            }
            let spots = get("spots")?
                .parse()
                .map_err(|_| invalid(format!("slide `{name}`: `spots` is not a count")))?;
            slides.push(SlideEntry {
                spots,
                cancer_type: get("cancer_type")?,
                expression: PathBuf::from(get("expression")?),
                features: PathBuf::from(get("features")?),
                coords: PathBuf::from(get("coords")?),
                name,
            });
            Ok(())
        }

        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("manifest line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "slide" {
                if let Some(b) = block.take() {
                    finish(b, &mut slides)?;
                }
                block = Some((v.to_string(), Vec::new()));
                continue;
            }
            if let Some((_, fields)) = block.as_mut() {
                fields.push((k.to_string(), v.to_string()));
                continue;
            }
            match k {
                "version" => {
                    version = Some(v.parse().map_err(|_| invalid(format!("bad version `{v}`")))?);
                }
                "feature_dim" => {
                    feature_dim = Some(v.parse().map_err(|_| invalid(format!("bad feature_dim `{v}`")))?);
                }
                "values" => {
                    values = match v {
                        "log1p" => ValueKind::Log1p,
                        "counts" => ValueKind::Counts,
                        _ => return Err(invalid(format!("unknown value kind `{v}`"))),
                    }
                }
                "genes" => genes = Some(v.split(',').map(|g| g.trim().to_string()).collect()),
                _ => return Err(invalid(format!("manifest line {}: unknown key `{k}`", i + 1))),
            }
        }
        if let Some(b) = block.take() {
            finish(b, &mut slides)?;
        }
        let version = version.ok_or_else(|| invalid("manifest has no `version`"))?;
        if version != MANIFEST_VERSION {
            return Err(invalid(format!("unsupported manifest version {version}")));
        }
        let m = DatasetManifest {
            version,
            feature_dim: feature_dim.ok_or_else(|| invalid("manifest has no `feature_dim`"))?,
            values,
            genes: genes.ok_or_else(|| invalid("manifest has no `genes`"))?,
            slides,
            base_dir: base_dir.to_path_buf(),
        };
        if m.slides.is_empty() {
            return Err(invalid("manifest lists no slides"));
        }
        let names: BTreeSet<&str> = m.slides.iter().map(|s| s.name.as_str()).collect();
        if names.len() != m.slides.len() {
            return Err(invalid("slide names must be unique"));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "version={}", self.version).unwrap();
        writeln!(s, "feature_dim={}", self.feature_dim).unwrap();
        let kind = match self.values {
            ValueKind::Log1p => "log1p",
            ValueKind::Counts => "counts",
        };
        writeln!(s, "values={kind}").unwrap();
        writeln!(s, "genes={}", self.genes.join(",")).unwrap();
        for sl in &self.slides {
            writeln!(s, "slide={}", sl.name).unwrap();
            writeln!(s, "spots={}", sl.spots).unwrap();
            writeln!(s, "cancer_type={}", sl.cancer_type).unwrap();
            writeln!(s, "expression={}", sl.expression.display()).unwrap();
            writeln!(s, "features={}", sl.features.display()).unwrap();
            writeln!(s, "coords={}", sl.coords.display()).unwrap();
        }
        s
    }

    /// Check that every file exists and agrees with the declared shapes.
    pub fn validate(&self) -> Result<()> {
        let mut missing = Vec::new();
        for sl in &self.slides {
            for p in [&sl.expression, &sl.features, &sl.coords] {
                let full = self.resolve(p);
                if !full.is_file() {
                    missing.push(full.display().to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(invalid(format!("missing files: {}", missing.join(", "))));
        }
        for sl in &self.slides {
            let checks = [
                ("expression", &sl.expression, self.genes.len()),
                ("features", &sl.features, self.feature_dim),
                ("coords", &sl.coords, 2),
            ];
            for (what, p, cols) in checks {
                let (r, c) = read_matrix_shape(self.resolve(p))?;
                if r != sl.spots || c != cols {
                    return Err(invalid(format!(
                        "slide `{}`: {what} file is {r}x{c}, expected {}x{cols}",
                        sl.name, sl.spots
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => invalid(format!("manifest {} does not exist", path.display())),
        _ => MolfError::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = DatasetManifest::parse(&text, base)?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    write_atomic(path.as_ref(), m.to_text().as_bytes())
}

/// All slides of a manifest stacked row-wise.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// log1p expression, `[spots, genes]`.
    pub expression: Tensor<f32>,
    pub features: Tensor<f32>,
    pub coords: Vec<[f64; 2]>,
    pub type_ids: Vec<usize>,
    pub vocabulary: Vec<String>,
    pub slides: Vec<Range<usize>>,
    pub slide_names: Vec<String>,
    pub genes: Vec<String>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.expression.rows()
    }
}

pub fn load_dataset(m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let vocab = m.vocabulary();
    let mut expr = Vec::new();
    let mut feat = Vec::new();
    let mut coords = Vec::new();
    let mut type_ids = Vec::new();
    let mut slides = Vec::new();
    let mut start = 0;
    for sl in &m.slides {
        let mut e = read_matrix(m.resolve(&sl.expression))?;
        if m.values == ValueKind::Counts {
            e = log1p_normalize(&e, LIBRARY_SIZE)?;
        }
        expr.extend_from_slice(e.data());
        feat.extend_from_slice(read_matrix(m.resolve(&sl.features))?.data());
        let c = read_matrix(m.resolve(&sl.coords))?;
        coords.extend((0..c.rows()).map(|r| [c.get(r, 0) as f64, c.get(r, 1) as f64]));
        let id = vocab.binary_search(&sl.cancer_type).expect("label comes from the vocabulary");
        type_ids.extend(std::iter::repeat_n(id, sl.spots));
        slides.push(start..start + sl.spots);
        start += sl.spots;
    }
    Ok(Dataset {
        expression: Tensor::matrix(start, m.genes.len(), expr)?,
        features: Tensor::matrix(start, m.feature_dim, feat)?,
        coords,
        type_ids,
        vocabulary: vocab,
        slides,
        slide_names: m.slides.iter().map(|s| s.name.clone()).collect(),
        genes: m.genes.clone(),
    })
}
