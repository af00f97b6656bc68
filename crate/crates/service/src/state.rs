use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use flim_core::builder::{load_training_images, BuildSession};
use flim_core::model::META_FILE;
use flim_core::{load_model, load_project, FlimModel, LayerSpec, Project};
use serde::Serialize;
use tokio::sync::Mutex;

use crate::error::{ApiError, ApiResult};

/// Everything a reader can see of one project. Replaced wholesale by
/// mutations, never edited in place.
#[derive(Debug, Clone)]
pub struct ProjectState {
    pub project: Project,
    pub session: BuildSession,
    /// First layer that must be rebuilt after a marker edit.
    pub dirty_from: Option<usize>,
    /// Specs of layers dropped by the last marker edit.
    pub stale_specs: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done { result: serde_json::Value },
    Failed { status: u16, error: String },
}

#[derive(Debug)]
pub struct ProjectHandle {
    pub id: String,
    pub path: PathBuf,
    /// Serializes mutations; tokio's mutex is fair, so waiting writers form
    /// a queue.
    pub writer: Mutex<()>,
    snapshot: RwLock<Arc<ProjectState>>,
    jobs: RwLock<BTreeMap<String, JobStatus>>,
}

impl ProjectHandle {
    pub fn snapshot(&self) -> Arc<ProjectState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Publishes a new state. Callers must hold `writer`.
    pub fn publish(&self, state: ProjectState) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(state);
    }

    pub fn new_job(&self) -> String {
        let mut jobs = self.jobs.write().expect("jobs lock");
        let id = format!("job-{}", jobs.len() + 1);
        jobs.insert(id.clone(), JobStatus::Queued);
        id
    }

    pub fn set_job(&self, id: &str, status: JobStatus) {
        self.jobs
            .write()
            .expect("jobs lock")
            .insert(id.to_string(), status);
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.read().expect("jobs lock").get(id).cloned()
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    projects: RwLock<HashMap<String, Arc<ProjectHandle>>>,
    models: RwLock<HashMap<String, Arc<FlimModel>>>,
}

#[derive(Debug, Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    /// Seed for kernel estimation in every session.
    pub seed: u64,
}

fn slug(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c.to_ascii_lowercase() } else { '-' })
        .collect();
    if s.is_empty() {
        "project".into()
    } else {
        s
    }
}

pub fn open_state(project: Project, seed: u64) -> flim_core::Result<ProjectState> {
    let training = load_training_images(&project)?;
    let session = BuildSession::new(
        training,
        project.config.heuristic,
        project.config.postproc,
        seed,
    );
    Ok(ProjectState {
        project,
        session,
        dirty_from: None,
        stale_specs: Vec::new(),
    })
}

impl AppState {
    pub fn new(seed: u64) -> Self {
        AppState {
            registry: Arc::new(Registry::default()),
            seed,
        }
    }

    pub fn project(&self, id: &str) -> ApiResult<Arc<ProjectHandle>> {
        self.registry
            .projects
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown project '{id}'")))
    }

    /// (id, path) of every open project, sorted by id.
    pub fn project_ids(&self) -> Vec<(String, PathBuf)> {
        let mut v: Vec<_> = self
            .registry
            .projects
            .read()
            .expect("registry lock")
            .values()
            .map(|h| (h.id.clone(), h.path.clone()))
            .collect();
        v.sort();
        v
    }

    pub fn model(&self, id: &str) -> ApiResult<Arc<FlimModel>> {
        self.registry
            .models
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown model '{id}'")))
    }

    pub fn register_model(&self, id: &str, model: FlimModel) {
        self.registry
            .models
            .write()
            .expect("registry lock")
            .insert(id.to_string(), Arc::new(model));
    }

    /// Loads a project directory (blocking I/O) and registers it. Opening
    /// the same directory twice returns the existing handle. An exported
    /// model found in the directory is registered under the project id.
    pub fn open_project(&self, path: &Path) -> flim_core::Result<Arc<ProjectHandle>> {
        let canonical = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        if let Some(h) = self
            .registry
            .projects
            .read()
            .expect("registry lock")
            .values()
            .find(|h| h.path == canonical)
        {
            return Ok(h.clone());
        }
        let project = load_project(&canonical)?;
        let model_dir = project.model_dir();
        let state = open_state(project, self.seed)?;

        let mut projects = self.registry.projects.write().expect("registry lock");
        let base = slug(&canonical);
        let mut id = base.clone();
        let mut n = 2;
        while projects.contains_key(&id) {
            id = format!("{base}-{n}");
            n += 1;
        }
        let handle = Arc::new(ProjectHandle {
            id: id.clone(),
            path: canonical,
            writer: Mutex::new(()),
            snapshot: RwLock::new(Arc::new(state)),
            jobs: RwLock::new(BTreeMap::new()),
        });
        projects.insert(id.clone(), handle.clone());
        drop(projects);

        if model_dir.join(META_FILE).is_file() {
            match load_model(&model_dir) {
                Ok(m) => self.register_model(&id, m),
                Err(e) => log::warn!("ignoring model in {}: {e}", model_dir.display()),
            }
        }
        Ok(handle)
    }
}
