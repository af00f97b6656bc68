use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use flim_core::builder::load_training_images;
use flim_core::decoder::{adapt_weights, channel_stats, decode_image};
use flim_core::detection::{detect_from_saliency, otsu_threshold};
use flim_core::encoder::run_layers;
use flim_core::imageio::{decode_png, is_png, thumbnail_png};
use flim_core::tensor::minmax_normalize_channels;
use flim_core::{
    count_parameters, detect, save_model, BoundingBox, FlimModel, Heuristic, LayerSpec, MarkerRef,
    MarkerSet, PostProc,
};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, JobStatus, ProjectHandle, ProjectState};

pub const THUMBNAIL_MAX_SIDE: usize = 128;
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/images/{img}", get(get_image))
        .route("/projects/{id}/images/{img}/markers", get(get_markers).put(put_markers))
        .route("/projects/{id}/layers", get(list_layers).post(add_layer))
        .route("/projects/{id}/layers/{layer}", get(get_layer).delete(delete_layer))
        .route("/projects/{id}/layers/{layer}/kernels", get(kernels))
        .route("/projects/{id}/layers/{layer}/kernels/{k}/thumbnail", get(thumbnail))
        .route("/projects/{id}/layers/{layer}/selection", put(put_selection))
        .route("/projects/{id}/layers/{layer}/saliency/{img}", get(saliency_png))
        .route("/projects/{id}/layers/{layer}/saliency/{img}/boxes", get(saliency_boxes))
        .route("/projects/{id}/jobs/{job}", get(get_job))
        .route("/projects/{id}/export", post(export))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/detect", post(detect_handler))
        .with_state(state);
    Router::new()
        .nest("/api/v1", api)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(CorsLayer::permissive())
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Runs `f` on a private copy of the project state and publishes the copy
/// only if `f` succeeds. Mutations of one project run one at a time.
async fn mutate<T, F>(handle: Arc<ProjectHandle>, f: F) -> ApiResult<T>
where
    F: FnOnce(&mut ProjectState) -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    let _writer = handle.writer.lock().await;
    let mut state = (*handle.snapshot()).clone();
    let (state, out) = tokio::task::spawn_blocking(move || {
        let out = f(&mut state);
        (state, out)
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?;
    if out.is_ok() {
        handle.publish(state);
    }
    out
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn encode_component(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

// ------------------------------------------------------------------ views

#[derive(Serialize)]
struct ImageMeta {
    id: String,
    height: u32,
    width: u32,
    markers: usize,
    marker_pixels: usize,
    ground_truth_boxes: usize,
}

#[derive(Serialize)]
struct LayerMeta {
    index: usize,
    spec: LayerSpec,
    input_channels: usize,
    candidates: usize,
    selected: Vec<usize>,
}

#[derive(Serialize)]
struct ProjectMeta {
    id: String,
    name: String,
    path: PathBuf,
    heuristic: Heuristic,
    postproc: PostProc,
    images: Vec<ImageMeta>,
    training_images: Vec<String>,
    layers: Vec<LayerMeta>,
    dirty_from: Option<usize>,
    stale_layers: Vec<LayerSpec>,
}

fn layer_meta(state: &ProjectState) -> Vec<LayerMeta> {
    state
        .session
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerMeta {
            index: i + 1,
            spec: l.spec,
            input_channels: l.input_channels(),
            candidates: l.bank.len(),
            selected: l.selected.clone(),
        })
        .collect()
}

fn project_meta(handle: &ProjectHandle, state: &ProjectState) -> ProjectMeta {
    let p = &state.project;
    ProjectMeta {
        id: handle.id.clone(),
        name: p.config.name.clone(),
        path: handle.path.clone(),
        heuristic: p.config.heuristic,
        postproc: p.config.postproc,
        images: p
            .images
            .iter()
            .map(|i| ImageMeta {
                id: i.id.clone(),
                height: i.height,
                width: i.width,
                markers: p.markers.get(&i.id).map_or(0, |m| m.markers.len()),
                marker_pixels: p.markers.get(&i.id).map_or(0, |m| m.pixel_count()),
                ground_truth_boxes: p.ground_truth.get(&i.id).map_or(0, |g| g.boxes.len()),
            })
            .collect(),
        training_images: p.training_images().into_iter().map(String::from).collect(),
        layers: layer_meta(state),
        dirty_from: state.dirty_from,
        stale_layers: state.stale_specs.clone(),
    }
}

fn require_image(state: &ProjectState, img: &str) -> ApiResult<()> {
    state
        .project
        .image(img)
        .map(|_| ())
        .ok_or_else(|| ApiError::not_found(format!("unknown image '{img}'")))
}

fn require_layer(state: &ProjectState, layer: usize) -> ApiResult<()> {
    state
        .session
        .layer(layer)
        .map(|_| ())
        .map_err(|_| ApiError::not_found(format!("layer {layer} is not built")))
}

// --------------------------------------------------------------- handlers

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

#[derive(Deserialize)]
struct CreateProject {
    path: PathBuf,
}

async fn create_project(
    State(app): State<AppState>,
    Json(body): Json<CreateProject>,
) -> ApiResult<(StatusCode, Json<ProjectMeta>)> {
    let handle = blocking({
        let app = app.clone();
        move || app.open_project(&body.path).map_err(ApiError::from)
    })
    .await?;
    let state = handle.snapshot();
    Ok((StatusCode::CREATED, Json(project_meta(&handle, &state))))
}

async fn list_projects(State(app): State<AppState>) -> Json<Vec<serde_json::Value>> {
    Json(
        app.project_ids()
            .into_iter()
            .map(|(id, path)| json!({"id": id, "path": path}))
            .collect(),
    )
}

async fn get_project(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ProjectMeta>> {
    let handle = app.project(&id)?;
    let state = handle.snapshot();
    Ok(Json(project_meta(&handle, &state)))
}

async fn get_image(
    State(app): State<AppState>,
    Path((id, img)): Path<(String, String)>,
) -> ApiResult<Response> {
    let state = app.project(&id)?.snapshot();
    let path = state
        .project
        .image(&img)
        .ok_or_else(|| ApiError::not_found(format!("unknown image '{img}'")))?
        .path
        .clone();
    let bytes = blocking(move || {
        std::fs::read(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
    })
    .await?;
    Ok(png(bytes))
}

async fn get_markers(
    State(app): State<AppState>,
    Path((id, img)): Path<(String, String)>,
) -> ApiResult<Json<MarkerSet>> {
    let state = app.project(&id)?.snapshot();
    require_image(&state, &img)?;
    Ok(Json(
        state
            .project
            .markers
            .get(&img)
            .cloned()
            .unwrap_or_else(|| MarkerSet::new(img)),
    ))
}

async fn put_markers(
    State(app): State<AppState>,
    Path((id, img)): Path<(String, String)>,
    Json(markers): Json<MarkerSet>,
) -> ApiResult<Json<serde_json::Value>> {
    let handle = app.project(&id)?;
    if markers.image_id != img {
        return Err(ApiError::unprocessable(format!(
            "marker set is for image '{}' but was sent to '{img}'",
            markers.image_id
        )));
    }
    require_image(&handle.snapshot(), &img)?;
    mutate(handle, move |state| {
        state.project.set_markers(markers)?;
        state.project.write_markers(&img)?;
        let training = load_training_images(&state.project)?;
        let built: Vec<LayerSpec> = state.session.layers().iter().map(|l| l.spec).collect();
        if !built.is_empty() {
            state.stale_specs = built;
        }
        state.session.replace_training(training);
        state.dirty_from = Some(1);
        let saved = state.project.markers.get(&img);
        Ok(Json(json!({
            "image_id": img,
            "markers": saved.map_or(0, |m| m.markers.len()),
            "marker_pixels": saved.map_or(0, |m| m.pixel_count()),
            "dirty_from": state.dirty_from,
        })))
    })
    .await
}

async fn list_layers(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<LayerMeta>>> {
    Ok(Json(layer_meta(&app.project(&id)?.snapshot())))
}

async fn get_layer(
    State(app): State<AppState>,
    Path((id, layer)): Path<(String, usize)>,
) -> ApiResult<Json<LayerMeta>> {
    let state = app.project(&id)?.snapshot();
    require_layer(&state, layer)?;
    Ok(Json(layer_meta(&state).swap_remove(layer - 1)))
}

#[derive(Deserialize, Default)]
struct AddLayerQuery {
    #[serde(default, rename = "async")]
    run_async: bool,
}

fn add_layer_now(state: &mut ProjectState, spec: LayerSpec) -> ApiResult<serde_json::Value> {
    spec.validate()?;
    let index = state.session.add_layer(spec)?;
    match state.dirty_from {
        Some(_) if state.stale_specs.len() > index => state.dirty_from = Some(index + 1),
        Some(_) => {
            state.dirty_from = None;
            state.stale_specs.clear();
        }
        None => {}
    }
    let candidates = state.session.layer(index)?.bank.len();
    Ok(json!({"index": index, "candidates": candidates}))
}

async fn add_layer(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AddLayerQuery>,
    Json(spec): Json<LayerSpec>,
) -> ApiResult<Response> {
    let handle = app.project(&id)?;
    spec.validate()?;
    if !q.run_async {
        let v = mutate(handle, move |state| add_layer_now(state, spec)).await?;
        return Ok((StatusCode::CREATED, Json(v)).into_response());
    }
    let job = handle.new_job();
    let status_url = format!("/api/v1/projects/{}/jobs/{job}", encode_component(&id));
    let (h, j) = (handle.clone(), job.clone());
    tokio::spawn(async move {
        let inner = h.clone();
        let jj = j.clone();
        let out = mutate(h.clone(), move |state| {
            inner.set_job(&jj, JobStatus::Running);
            add_layer_now(state, spec)
        })
        .await;
        h.set_job(
            &j,
            match out {
                Ok(result) => JobStatus::Done { result },
                Err(e) => JobStatus::Failed {
                    status: e.status.as_u16(),
                    error: e.message,
                },
            },
        );
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"job": job, "status_url": status_url})),
    )
        .into_response())
}

async fn get_job(
    State(app): State<AppState>,
    Path((id, job)): Path<(String, String)>,
) -> ApiResult<Json<JobStatus>> {
    app.project(&id)?
        .job(&job)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job '{job}'")))
}

async fn delete_layer(
    State(app): State<AppState>,
    Path((id, layer)): Path<(String, usize)>,
) -> ApiResult<Json<Vec<LayerMeta>>> {
    let handle = app.project(&id)?;
    require_layer(&handle.snapshot(), layer)?;
    mutate(handle, move |state| {
        require_layer(state, layer)?;
        state.session.remove_layer(layer)?;
        Ok(Json(layer_meta(state)))
    })
    .await
}

async fn put_selection(
    State(app): State<AppState>,
    Path((id, layer)): Path<(String, usize)>,
    Json(selection): Json<Vec<usize>>,
) -> ApiResult<Json<LayerMeta>> {
    let handle = app.project(&id)?;
    require_layer(&handle.snapshot(), layer)?;
    mutate(handle, move |state| {
        require_layer(state, layer)?;
        state.session.set_selection(layer, &selection)?;
        Ok(Json(layer_meta(state).swap_remove(layer - 1)))
    })
    .await
}

#[derive(Deserialize)]
struct ImageQuery {
    img: String,
}

#[derive(Serialize)]
struct KernelInfo {
    index: usize,
    selected: bool,
    provenance: Vec<MarkerRef>,
    mean: f64,
    std: f64,
    /// Decoder sign for this image; null for unselected kernels.
    sign: Option<i8>,
    thumbnail: String,
}

// Normalized activations of every candidate kernel of `layer` on `img`,
// with earlier layers applying their selections.
fn candidate_activations(state: &ProjectState, layer: usize, img: &str) -> ApiResult<flim_core::ImageTensor> {
    let image = state.project.load_image(img)?;
    let mut prefix = state.session.layers()[..layer].to_vec();
    let last = &mut prefix[layer - 1];
    last.selected = (0..last.bank.len()).collect();
    let acts = run_layers(&image, &prefix, layer)?;
    Ok(minmax_normalize_channels(&acts))
}

async fn kernels(
    State(app): State<AppState>,
    Path((id, layer)): Path<(String, usize)>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let state = app.project(&id)?.snapshot();
    require_layer(&state, layer)?;
    require_image(&state, &q.img)?;
    blocking(move || {
        let norm = candidate_activations(&state, layer, &q.img)?;
        let stats = channel_stats(&norm);
        let l = state.session.layer(layer)?;
        let sel_stats = channel_stats(&norm.select_channels(&l.selected)?);
        let alpha = adapt_weights(&sel_stats, state.session.heuristic());
        let kernels: Vec<KernelInfo> = (0..l.bank.len())
            .map(|k| {
                let pos = l.selected.iter().position(|&s| s == k);
                KernelInfo {
                    index: k,
                    selected: pos.is_some(),
                    provenance: l.bank.provenance[k].markers.clone(),
                    mean: stats.means[k],
                    std: stats.stds[k],
                    sign: pos.map(|p| alpha.0[p]),
                    thumbnail: format!(
                        "/api/v1/projects/{}/layers/{layer}/kernels/{k}/thumbnail?img={}",
                        encode_component(&id),
                        encode_component(&q.img)
                    ),
                }
            })
            .collect();
        Ok(Json(json!({
            "layer": layer,
            "image": q.img,
            "heuristic": state.session.heuristic(),
            "kernels": kernels,
        })))
    })
    .await
}

async fn thumbnail(
    State(app): State<AppState>,
    Path((id, layer, k)): Path<(String, usize, usize)>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let state = app.project(&id)?.snapshot();
    require_layer(&state, layer)?;
    require_image(&state, &q.img)?;
    let candidates = state.session.layer(layer)?.bank.len();
    if k >= candidates {
        return Err(ApiError::not_found(format!("layer {layer} has {candidates} kernels")));
    }
    blocking(move || {
        let norm = candidate_activations(&state, layer, &q.img)?;
        Ok(png(thumbnail_png(
            norm.height(),
            norm.width(),
            &norm.channel(k),
            THUMBNAIL_MAX_SIDE,
        )))
    })
    .await
}

fn prefix_model(state: &ProjectState, layer: usize) -> ApiResult<FlimModel> {
    Ok(FlimModel::new(
        state.session.layers()[..layer].to_vec(),
        state.session.heuristic(),
        state.session.postproc(),
    )?)
}

async fn saliency_png(
    State(app): State<AppState>,
    Path((id, layer, img)): Path<(String, usize, String)>,
) -> ApiResult<Response> {
    let state = app.project(&id)?.snapshot();
    require_layer(&state, layer)?;
    require_image(&state, &img)?;
    blocking(move || {
        let model = prefix_model(&state, layer)?;
        let image = state.project.load_image(&img)?;
        Ok(png(decode_image(&image, &model, layer)?.to_png()))
    })
    .await
}

#[derive(Serialize)]
struct BoxesView {
    image_id: String,
    layer: usize,
    threshold: f32,
    boxes: Vec<BoundingBox>,
    ground_truth: Vec<BoundingBox>,
}

async fn saliency_boxes(
    State(app): State<AppState>,
    Path((id, layer, img)): Path<(String, usize, String)>,
) -> ApiResult<Json<BoxesView>> {
    let state = app.project(&id)?.snapshot();
    require_layer(&state, layer)?;
    require_image(&state, &img)?;
    blocking(move || {
        let model = prefix_model(&state, layer)?;
        let image = state.project.load_image(&img)?;
        let map = decode_image(&image, &model, layer)?;
        let dets = detect_from_saliency(&map, &model.postproc(), &img);
        Ok(Json(BoxesView {
            threshold: otsu_threshold(&map).value(),
            layer,
            boxes: dets.boxes,
            ground_truth: state
                .project
                .ground_truth
                .get(&img)
                .map(|g| g.boxes.clone())
                .unwrap_or_default(),
            image_id: img,
        }))
    })
    .await
}

async fn export(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let handle = app.project(&id)?;
    let state = handle.snapshot();
    if state.session.num_layers() == 0 {
        return Err(ApiError::conflict("nothing to export: no layers built"));
    }
    let _writer = handle.writer.lock().await;
    let state = handle.snapshot();
    let (model, dir) = blocking(move || {
        let model = state.session.export()?;
        let dir = state.project.model_dir();
        save_model(&model, &dir)?;
        Ok((model, dir))
    })
    .await?;
    let body = model_view(&id, &model, Some(dir));
    app.register_model(&id, model);
    Ok((StatusCode::CREATED, Json(body)))
}

fn model_view(id: &str, model: &FlimModel, path: Option<PathBuf>) -> serde_json::Value {
    json!({
        "model_id": id,
        "path": path,
        "heuristic": model.heuristic(),
        "postproc": model.postproc(),
        "layers": model.layers().iter().map(|l| json!({
            "spec": l.spec,
            "candidates": l.bank.len(),
            "selected": l.selected,
        })).collect::<Vec<_>>(),
        "parameters": {
            "all": count_parameters(model, false),
            "selected": count_parameters(model, true),
        },
    })
}

async fn get_model(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let model = app.model(&id)?;
    Ok(Json(model_view(&id, &model, None)))
}

#[derive(Deserialize, Default)]
struct DetectQuery {
    image_id: Option<String>,
}

fn stem(name: &str) -> String {
    std::path::Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Accepts either `multipart/form-data` (first file field) or a raw PNG
/// body.
async fn detect_handler(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<DetectQuery>,
    req: Request,
) -> ApiResult<Json<flim_core::DetectionSet>> {
    let model = app.model(&id)?;
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (bytes, file_name) = if is_multipart {
        let mut mp = Multipart::from_request(req, &app)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        let field = mp
            .next_field()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart body has no parts"))?;
        let name = field.file_name().map(stem);
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        (data, name)
    } else {
        let data = Bytes::from_request(req, &app)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        (data, None)
    };
    if !is_png(&bytes) {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "only PNG images are accepted",
        ));
    }
    let image_id = q.image_id.or(file_name).unwrap_or_else(|| "image".into());
    blocking(move || {
        let image = decode_png(&bytes).map_err(ApiError::unprocessable)?;
        Ok(Json(detect(&image, &model, &image_id)?))
    })
    .await
}
