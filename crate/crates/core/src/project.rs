//! Project directories: images, scribbles, ground truth and configuration.
//!
//! ```text
//! project.json          name, heuristic, postproc
//! images/<id>.png
//! markers/<id>.json     MarkerSet
//! gt/<id>.json          GroundTruth
//! model/                exported model
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result, ValidationIssue};
use crate::imageio::{load_png, png_dimensions};
use crate::markers::{GroundTruth, MarkerSet};
use crate::model::{Heuristic, PostProc};
use crate::tensor::ImageTensor;

pub const PROJECT_FILE: &str = "project.json";
pub const IMAGES_DIR: &str = "images";
pub const MARKERS_DIR: &str = "markers";
pub const GT_DIR: &str = "gt";
pub const MODEL_DIR: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub name: String,
    pub heuristic: Heuristic,
    pub postproc: PostProc,
}

impl ProjectConfig {
    pub fn new(name: impl Into<String>, heuristic: Heuristic) -> Self {
        ProjectConfig {
            name: name.into(),
            heuristic,
            postproc: PostProc::for_heuristic(heuristic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProjectImage {
    pub id: String,
    pub height: u32,
    pub width: u32,
    #[serde(skip)]
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Project {
    pub root: PathBuf,
    pub config: ProjectConfig,
    /// Sorted by id.
    pub images: Vec<ProjectImage>,
    pub markers: BTreeMap<String, MarkerSet>,
    pub ground_truth: BTreeMap<String, GroundTruth>,
}

impl Project {
    pub fn image(&self, id: &str) -> Option<&ProjectImage> {
        self.images
            .binary_search_by(|i| i.id.as_str().cmp(id))
            .ok()
            .map(|k| &self.images[k])
    }

    pub fn load_image(&self, id: &str) -> Result<ImageTensor> {
        let img = self
            .image(id)
            .ok_or_else(|| FlimError::domain(format!("unknown image '{id}'")))?;
        load_png(&img.path)
    }

    /// Images carrying at least one marker pixel, sorted by id.
    pub fn training_images(&self) -> Vec<&str> {
        self.markers
            .values()
            .filter(|m| !m.is_empty())
            .map(|m| m.image_id.as_str())
            .collect()
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join(MODEL_DIR)
    }

    /// Validates and stores a marker set in memory (canonicalized). An empty
    /// set removes the entry.
    pub fn set_markers(&mut self, mut markers: MarkerSet) -> Result<()> {
        let img = self.image(&markers.image_id).ok_or_else(|| {
            FlimError::Validation(vec![ValidationIssue::DanglingImage {
                file: format!("{MARKERS_DIR}/{}.json", markers.image_id),
                image_id: markers.image_id.clone(),
            }])
        })?;
        let issues = markers.validate(img.height, img.width);
        if !issues.is_empty() {
            return Err(FlimError::Validation(issues));
        }
        markers.canonicalize();
        if markers.markers.is_empty() {
            self.markers.remove(&markers.image_id);
        } else {
            self.markers.insert(markers.image_id.clone(), markers);
        }
        Ok(())
    }

    /// Writes (or removes) the marker file of one image.
    pub fn write_markers(&self, image_id: &str) -> Result<()> {
        let path = self.root.join(MARKERS_DIR).join(format!("{image_id}.json"));
        match self.markers.get(image_id) {
            Some(m) => write_json(&path, m),
            None if path.exists() => fs::remove_file(&path).map_err(|e| FlimError::io(&path, e)),
            None => Ok(()),
        }
    }
}

fn read_dir_sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FlimError::io(dir, e))? {
        let path = entry.map_err(|e| FlimError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn parse_json<T: DeserializeOwned>(
    root: &Path,
    path: &Path,
    issues: &mut Vec<ValidationIssue>,
) -> Result<Option<T>> {
    let text = fs::read_to_string(path).map_err(|e| FlimError::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(v) => Ok(Some(v)),
        Err(e) => {
            issues.push(ValidationIssue::MalformedJson {
                file: relative(root, path),
                message: e.to_string(),
            });
            Ok(None)
        }
    }
}

/// Loads and validates a project directory. Every problem found is reported
/// in a single [`FlimError::Validation`].
pub fn load_project(root: &Path) -> Result<Project> {
    if !root.is_dir() {
        return Err(FlimError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "project directory not found"),
        ));
    }
    let mut issues = Vec::new();

    let config_path = root.join(PROJECT_FILE);
    let default_name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "project".into());
    let config = if config_path.is_file() {
        parse_json(root, &config_path, &mut issues)?
    } else {
        None
    }
    .unwrap_or_else(|| ProjectConfig::new(default_name, Heuristic::Parasite));

    let mut images = Vec::new();
    for path in read_dir_sorted(&root.join(IMAGES_DIR), "png")? {
        match png_dimensions(&path) {
            Ok((width, height)) => images.push(ProjectImage {
                id: stem(&path),
                height,
                width,
                path,
            }),
            Err(e) => issues.push(ValidationIssue::UnreadableImage {
                file: relative(root, &path),
                message: e.to_string(),
            }),
        }
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let dims: BTreeMap<&str, (u32, u32)> = images
        .iter()
        .map(|i| (i.id.as_str(), (i.height, i.width)))
        .collect();

    // Checks the declared id against the file name and the image list.
    let resolve = |path: &Path, declared: &str, issues: &mut Vec<ValidationIssue>| {
        let file = relative(root, path);
        if declared != stem(path) {
            issues.push(ValidationIssue::ImageIdMismatch {
                file,
                image_id: declared.to_string(),
            });
            None
        } else if let Some(&d) = dims.get(declared) {
            Some(d)
        } else {
            issues.push(ValidationIssue::DanglingImage {
                file,
                image_id: declared.to_string(),
            });
            None
        }
    };

    let mut markers = BTreeMap::new();
    for path in read_dir_sorted(&root.join(MARKERS_DIR), "json")? {
        let Some(mut m) = parse_json::<MarkerSet>(root, &path, &mut issues)? else {
            continue;
        };
        if let Some((h, w)) = resolve(&path, &m.image_id, &mut issues) {
            let found = m.validate(h, w);
            if found.is_empty() {
                m.canonicalize();
                if !m.markers.is_empty() {
                    markers.insert(m.image_id.clone(), m);
                }
            } else {
                issues.extend(found);
            }
        }
    }

    let mut ground_truth = BTreeMap::new();
    for path in read_dir_sorted(&root.join(GT_DIR), "json")? {
        let Some(g) = parse_json::<GroundTruth>(root, &path, &mut issues)? else {
            continue;
        };
        if let Some((h, w)) = resolve(&path, &g.image_id, &mut issues) {
            let found = g.validate(h, w);
            if found.is_empty() {
                ground_truth.insert(g.image_id.clone(), g);
            } else {
                issues.extend(found);
            }
        }
    }

    if !issues.is_empty() {
        return Err(FlimError::Validation(issues));
    }
    Ok(Project {
        root: root.to_path_buf(),
        config,
        images,
        markers,
        ground_truth,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| FlimError::io(parent, e))?;
    }
    let mut text = serde_json::to_string(value).map_err(|source| FlimError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FlimError::io(path, e))
}

/// Writes the project in canonical form under `root`, copying images that
/// live elsewhere.
pub fn save_project(project: &Project, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join(IMAGES_DIR)).map_err(|e| FlimError::io(root, e))?;
    let config = serde_json::to_string_pretty(&project.config).map_err(|source| FlimError::Json {
        path: root.join(PROJECT_FILE),
        source,
    })?;
    let config_path = root.join(PROJECT_FILE);
    fs::write(&config_path, config + "\n").map_err(|e| FlimError::io(&config_path, e))?;

    for img in &project.images {
        let dst = root.join(IMAGES_DIR).join(format!("{}.png", img.id));
        if fs::canonicalize(&img.path).ok() != fs::canonicalize(&dst).ok() || !dst.exists() {
            fs::copy(&img.path, &dst).map_err(|e| FlimError::io(&dst, e))?;
        }
    }
    for m in project.markers.values() {
        let mut m = m.clone();
        m.canonicalize();
        write_json(&root.join(MARKERS_DIR).join(format!("{}.json", m.image_id)), &m)?;
    }
    for g in project.ground_truth.values() {
        write_json(&root.join(GT_DIR).join(format!("{}.json", g.image_id)), g)?;
    }
    Ok(())
}

pub fn read_ground_truth_dir(dir: &Path) -> Result<Vec<GroundTruth>> {
    let mut issues = Vec::new();
    let mut out = Vec::new();
    for path in read_dir_sorted(dir, "json")? {
        if let Some(g) = parse_json::<GroundTruth>(dir, &path, &mut issues)? {
            out.push(g);
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(FlimError::Validation(issues))
    }
}
