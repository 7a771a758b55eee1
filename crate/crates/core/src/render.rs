//! Fixed ray sampling, density-to-weight conversion, per-pixel colour and
//! 3D-point rendering, and the long-term correspondence pipeline.
//!
//! A query pixel at frame `t1` becomes a ray, the ray is sampled inside the
//! workspace box, the field renders a colour and a single 3D point, the
//! point is contracted and mapped through the canonical space to frame
//! `t2`, expanded, and projected into the `t2` camera. Ray near/far come
//! from the workspace-box intersection. Transparent rays and points behind
//! the target camera fold into the validity flag rather than panicking.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::fields::evaluate_field_batch;
use crate::geometry::{
    pixel_to_ray, CameraIntrinsics, CameraPose, Pixel, Ray, UnitCubePoint, WorkspaceBox,
    WorldPoint,
};
use crate::model::SceneModel;

/// Rays whose weight sum falls below this are transparent and carry no
/// trustworthy 3D point.
pub const EPS_OPACITY: f64 = 1e-3;

/// Keeps the weight-normalised position finite on fully transparent rays.
const EPS_DIV: f64 = 1e-12;

/// Ordered samples along one ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
    /// Distance along the ray per sample (mm), strictly increasing.
    pub s_values: Vec<f64>,
    pub positions: Vec<WorldPoint>,
    pub unit: Vec<UnitCubePoint>,
    /// Per-interval lengths (mm); uniform strata.
    pub delta: Vec<f64>,
}

/// `n` evenly spaced strata over `[near, far]`: midpoints when `jitter` is
/// `None` (inference), one uniform draw per stratum during optimisation.
pub fn sample_ray_between(
    ray: &Ray,
    near: f64,
    far: f64,
    n: usize,
    workspace: &WorkspaceBox,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> RaySamples {
    assert!(n >= 2, "need at least two samples per ray");
    assert!(near > 0.0 && far > near, "need 0 < near < far");
    let width = (far - near) / n as f64;
    let mut s_values = Vec::with_capacity(n);
    for i in 0..n {
        let offset = match jitter.as_deref_mut() {
            Some(rng) => rng.gen::<f64>(),
            None => 0.5,
        };
        s_values.push(near + (i as f64 + offset) * width);
    }
    let positions: Vec<WorldPoint> = s_values.iter().map(|&s| ray.at(s)).collect();
    let unit = positions.iter().map(|p| workspace.contract(p)).collect();
    RaySamples {
        ray: *ray,
        near,
        far,
        s_values,
        positions,
        unit,
        delta: vec![width; n],
    }
}

/// Samples between the ray's workspace-box entry and exit; `None` when the
/// ray misses the box entirely.
pub fn sample_ray(
    ray: &Ray,
    workspace: &WorkspaceBox,
    n: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> Option<RaySamples> {
    let (near, far) = workspace.intersect_ray(ray)?;
    // Entry at the origin itself would break the positive-depth contract.
    let near = near.max(1e-9 * workspace.diagonal());
    if far <= near {
        return None;
    }
    Some(sample_ray_between(ray, near, far, n, workspace, jitter))
}

/// `w_i = T_i (1 - exp(-sigma_i delta_i))` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn render_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    assert_eq!(sigma.len(), delta.len());
    let mut weights = Vec::with_capacity(sigma.len());
    let mut accumulated = 0.0;
    for (&s, &d) in sigma.iter().zip(delta) {
        debug_assert!(s >= 0.0 && d > 0.0);
        let transmittance = (-accumulated).exp();
        weights.push(transmittance * (1.0 - (-s * d).exp()));
        accumulated += s * d;
    }
    weights
}

/// Taped twin of [`render_weights`] over a `[R,S]` density matrix.
pub fn render_weights_node(tape: &mut Tape, sigma: NodeId, delta: &Tensor) -> NodeId {
    let delta_node = tape.constant(delta.clone());
    let optical = tape.mul(sigma, delta_node);
    let accumulated = tape.cumsum_exclusive_rows(optical);
    let neg_acc = tape.neg(accumulated);
    let transmittance = tape.exp(neg_acc);
    let neg_opt = tape.neg(optical);
    let decay = tape.exp(neg_opt);
    let neg_decay = tape.neg(decay);
    let alpha = tape.add_scalar(neg_decay, 1.0);
    tape.mul(transmittance, alpha)
}

/// Per-ray render products on the tape, plus the constant geometry the
/// losses need alongside them.
pub struct BatchRender {
    /// `[R,S]` rendering weights.
    pub weights: NodeId,
    /// `[R,1]` weight sums.
    pub opacity: NodeId,
    /// `[R,3]` rendered colour.
    pub colour: NodeId,
    /// `[R,3]` weight-normalised 3D point (workspace mm).
    pub point: NodeId,
    /// `[R,S]` distance of each sample along its ray.
    pub s_values: Tensor,
    /// `[R,S]` interval lengths.
    pub delta: Tensor,
    /// `[R,3]` ray origins.
    pub origins: Tensor,
}

/// Renders a batch of sampled rays at their frames.
pub fn render_rays(
    model: &SceneModel,
    tape: &mut Tape,
    rays: &[RaySamples],
    frames: &[usize],
) -> BatchRender {
    assert!(!rays.is_empty());
    assert_eq!(rays.len(), frames.len());
    let n_rays = rays.len();
    let s = rays[0].s_values.len();
    let mut queries = Vec::with_capacity(n_rays * s);
    for (ray, &frame) in rays.iter().zip(frames) {
        assert_eq!(ray.s_values.len(), s, "mixed sample counts in one batch");
        let t = model.t_norm(frame);
        for u in &ray.unit {
            queries.push([u.0.x, u.0.y, u.0.z, t]);
        }
    }

    let (colour_flat, sigma_flat) = evaluate_field_batch(model, tape, &queries);
    let sigma = tape.reshape(sigma_flat, n_rays, s);

    let delta = Tensor::from_shape_fn((n_rays, s), |(r, i)| rays[r].delta[i]);
    let weights = render_weights_node(tape, sigma, &delta);
    let opacity = tape.sum_rows(weights);

    let mut colour_parts = Vec::with_capacity(3);
    for ch in 0..3 {
        let c = tape.slice_cols(colour_flat, ch, 1);
        let c = tape.reshape(c, n_rays, s);
        let weighted = tape.mul(weights, c);
        colour_parts.push(tape.sum_rows(weighted));
    }
    let colour = tape.concat_cols(&colour_parts);

    let denominator = tape.add_scalar(opacity, EPS_DIV);
    let mut point_parts = Vec::with_capacity(3);
    for axis in 0..3 {
        let coords = Tensor::from_shape_fn((n_rays, s), |(r, i)| rays[r].positions[i].0[axis]);
        let coords = tape.constant(coords);
        let weighted = tape.mul(weights, coords);
        point_parts.push(tape.sum_rows(weighted));
    }
    let point_sum = tape.concat_cols(&point_parts);
    let point = tape.div(point_sum, denominator);

    let s_values = Tensor::from_shape_fn((n_rays, s), |(r, i)| rays[r].s_values[i]);
    let origins = Tensor::from_shape_fn((n_rays, 3), |(r, a)| rays[r].ray.origin[a]);

    BatchRender {
        weights,
        opacity,
        colour,
        point,
        s_values,
        delta,
        origins,
    }
}

/// Contract `[R,3]` workspace points onto the unit cube, on the tape.
pub fn contract_node(tape: &mut Tape, points: NodeId, workspace: &WorkspaceBox) -> NodeId {
    let min = workspace.aabb_min();
    let ext = workspace.extent();
    let min_row = tape.constant(Tensor::from_shape_fn((1, 3), |(_, a)| min[a]));
    let inv_ext = tape.constant(Tensor::from_shape_fn((1, 3), |(_, a)| 1.0 / ext[a]));
    let centred = tape.sub(points, min_row);
    tape.mul(centred, inv_ext)
}

/// Exact inverse of [`contract_node`].
pub fn expand_node(tape: &mut Tape, unit: NodeId, workspace: &WorkspaceBox) -> NodeId {
    let min = workspace.aabb_min();
    let ext = workspace.extent();
    let ext_row = tape.constant(Tensor::from_shape_fn((1, 3), |(_, a)| ext[a]));
    let min_row = tape.constant(Tensor::from_shape_fn((1, 3), |(_, a)| min[a]));
    let scaled = tape.mul(unit, ext_row);
    tape.add(scaled, min_row)
}

/// Perspective projection of `[R,3]` workspace points, on the tape. The
/// returned mask records which rows had positive camera-frame depth; rows
/// failing it produce meaningless pixels that callers must gate out.
pub fn project_node(
    tape: &mut Tape,
    points: NodeId,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> (NodeId, Vec<bool>) {
    let rot_t = pose.rotation.transpose();
    let w = tape.constant(Tensor::from_shape_fn((3, 3), |(i, j)| rot_t[(i, j)]));
    let b = tape.constant(Tensor::from_shape_fn((1, 3), |(_, j)| pose.translation[j]));
    let cam = tape.affine(points, w, b);
    let depth_positive: Vec<bool> = tape
        .value(cam)
        .rows()
        .into_iter()
        .map(|row| row[2] > 0.0)
        .collect();
    let x = tape.slice_cols(cam, 0, 1);
    let y = tape.slice_cols(cam, 1, 1);
    let z = tape.slice_cols(cam, 2, 1);
    let u_norm = tape.div(x, z);
    let v_norm = tape.div(y, z);
    let u_scaled = tape.scale(u_norm, k.fx);
    let u = tape.add_scalar(u_scaled, k.cx);
    let v_scaled = tape.scale(v_norm, k.fy);
    let v = tape.add_scalar(v_scaled, k.cy);
    let pixel = tape.concat_cols(&[u, v]);
    (pixel, depth_positive)
}

/// The taped long-term correspondence pipeline for one directed frame pair.
pub struct TrackBatch {
    /// Indices into the caller's pixel list that produced each row (rays
    /// missing the workspace box are dropped).
    pub rows: Vec<usize>,
    pub render: BatchRender,
    /// `[R,3]` rendered point in unit-cube coordinates at `t1`.
    pub unit_t1: NodeId,
    /// `[R,3]` canonical-space points.
    pub canonical: NodeId,
    /// `[R,3]` workspace points deformed to `t2` (mm).
    pub point_t2: NodeId,
    /// `[R,2]` projection into the `t2` camera.
    pub pixel_t2: NodeId,
    /// Positive-depth mask for the `t2` projection.
    pub proj_valid: Vec<bool>,
}

/// Cameras for one directed pair.
#[derive(Clone, Copy)]
pub struct PairCameras<'a> {
    pub k: &'a CameraIntrinsics,
    pub pose_t1: &'a CameraPose,
    pub pose_t2: &'a CameraPose,
}

#[allow(clippy::too_many_arguments)]
pub fn track_batch(
    model: &SceneModel,
    tape: &mut Tape,
    pixels: &[Pixel],
    t1: usize,
    t2: usize,
    cams: PairCameras,
    samples_per_ray: usize,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Option<TrackBatch> {
    let mut rows = Vec::with_capacity(pixels.len());
    let mut rays = Vec::with_capacity(pixels.len());
    for (i, p) in pixels.iter().enumerate() {
        let Ok(ray) = pixel_to_ray(p, cams.k, cams.pose_t1) else {
            continue;
        };
        if let Some(samples) = sample_ray(
            &ray,
            &model.workspace,
            samples_per_ray,
            jitter.as_deref_mut(),
        ) {
            rows.push(i);
            rays.push(samples);
        }
    }
    if rays.is_empty() {
        return None;
    }

    let frames_t1 = vec![t1; rays.len()];
    let frames_t2 = vec![t2; rays.len()];
    let render = render_rays(model, tape, &rays, &frames_t1);
    let unit_t1 = contract_node(tape, render.point, &model.workspace);
    let canonical = model
        .deform
        .forward_batch(tape, &model.store, unit_t1, &frames_t1);
    let unit_t2 = model
        .deform
        .inverse_batch(tape, &model.store, canonical, &frames_t2);
    let point_t2 = expand_node(tape, unit_t2, &model.workspace);
    let (pixel_t2, proj_valid) = project_node(tape, point_t2, cams.k, cams.pose_t2);

    Some(TrackBatch {
        rows,
        render,
        unit_t1,
        canonical,
        point_t2,
        pixel_t2,
        proj_valid,
    })
}

/// Eager per-pixel colour/point render.
#[derive(Debug, Clone, Copy)]
pub struct RenderOutput {
    pub colour: Vector3<f64>,
    pub point: WorldPoint,
    pub opacity: f64,
    /// False when the ray is transparent (`opacity < EPS_OPACITY`).
    pub valid: bool,
}

pub fn render_pixel(model: &SceneModel, samples: &RaySamples, frame: usize) -> RenderOutput {
    let mut tape = Tape::new();
    let batch = render_rays(model, &mut tape, std::slice::from_ref(samples), &[frame]);
    let colour = tape.value(batch.colour);
    let point = tape.value(batch.point);
    let opacity = tape.value(batch.opacity)[[0, 0]];
    RenderOutput {
        colour: Vector3::new(colour[[0, 0]], colour[[0, 1]], colour[[0, 2]]),
        point: WorldPoint::new(point[[0, 0]], point[[0, 1]], point[[0, 2]]),
        opacity,
        valid: opacity >= EPS_OPACITY,
    }
}

/// One long-term correspondence query's outputs.
#[derive(Debug, Clone, Copy)]
pub struct TrackEstimate {
    /// Predicted pixel in frame `t2`; `None` when projection failed.
    pub pixel: Option<Pixel>,
    /// Rendered 3D point at `t1` (mm).
    pub point_t1: WorldPoint,
    /// The same material point deformed to `t2` (mm).
    pub point_t1_t2: WorldPoint,
    /// Canonical-space location.
    pub canonical: UnitCubePoint,
    pub opacity: f64,
    pub valid: bool,
}

impl TrackEstimate {
    fn invalid() -> Self {
        TrackEstimate {
            pixel: None,
            point_t1: WorldPoint::new(0.0, 0.0, 0.0),
            point_t1_t2: WorldPoint::new(0.0, 0.0, 0.0),
            canonical: UnitCubePoint::new(0.0, 0.0, 0.0),
            opacity: 0.0,
            valid: false,
        }
    }
}

/// The long-term correspondence function: where does the material point
/// seen at `p` in frame `t1` end up in frame `t2`?
pub fn f_lt(
    model: &SceneModel,
    p: &Pixel,
    t1: usize,
    t2: usize,
    cams: PairCameras,
    samples_per_ray: usize,
) -> TrackEstimate {
    let mut tape = Tape::new();
    let Some(batch) = track_batch(
        model,
        &mut tape,
        std::slice::from_ref(p),
        t1,
        t2,
        cams,
        samples_per_ray,
        None,
    ) else {
        return TrackEstimate::invalid();
    };
    let opacity = tape.value(batch.render.opacity)[[0, 0]];
    let point_t1 = tape.value(batch.render.point);
    let point_t2 = tape.value(batch.point_t2);
    let canonical = tape.value(batch.canonical);
    let pixel = tape.value(batch.pixel_t2);
    let proj_ok = batch.proj_valid[0];
    TrackEstimate {
        pixel: proj_ok.then(|| Pixel(Vector2::new(pixel[[0, 0]], pixel[[0, 1]]))),
        point_t1: WorldPoint::new(point_t1[[0, 0]], point_t1[[0, 1]], point_t1[[0, 2]]),
        point_t1_t2: WorldPoint::new(point_t2[[0, 0]], point_t2[[0, 1]], point_t2[[0, 2]]),
        canonical: UnitCubePoint::new(canonical[[0, 0]], canonical[[0, 1]], canonical[[0, 2]]),
        opacity,
        valid: proj_ok && opacity >= EPS_OPACITY,
    }
}

/// A full-frame render: colour, per-pixel metric depth, validity.
pub struct ViewRender {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0,1]`.
    pub colour: Vec<[f64; 3]>,
    /// Distance from the camera centre (mm); meaningless where invalid.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn render_view(
    model: &SceneModel,
    frame: usize,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    samples_per_ray: usize,
) -> ViewRender {
    let (width, height) = (k.width, k.height);
    let n_pixels = width * height;
    let mut colour = vec![[0.0; 3]; n_pixels];
    let mut depth = vec![f64::NAN; n_pixels];
    let mut valid = vec![false; n_pixels];
    let centre = pose.centre();

    // Chunked so one tape never holds the whole frame.
    let chunk = 256;
    let mut index = 0;
    while index < n_pixels {
        let end = (index + chunk).min(n_pixels);
        let mut rays = Vec::with_capacity(end - index);
        let mut slots = Vec::with_capacity(end - index);
        for flat in index..end {
            let (row, col) = (flat / width, flat % width);
            let p = Pixel::new(col as f64 + 0.5, row as f64 + 0.5);
            let Ok(ray) = pixel_to_ray(&p, k, pose) else {
                continue;
            };
            if let Some(samples) = sample_ray(&ray, &model.workspace, samples_per_ray, None) {
                rays.push(samples);
                slots.push(flat);
            }
        }
        if !rays.is_empty() {
            let mut tape = Tape::new();
            let frames = vec![frame; rays.len()];
            let batch = render_rays(model, &mut tape, &rays, &frames);
            let c = tape.value(batch.colour);
            let p = tape.value(batch.point);
            let o = tape.value(batch.opacity);
            for (r, &flat) in slots.iter().enumerate() {
                colour[flat] = [c[[r, 0]], c[[r, 1]], c[[r, 2]]];
                let point = Vector3::new(p[[r, 0]], p[[r, 1]], p[[r, 2]]);
                depth[flat] = (point - centre.0).norm();
                valid[flat] = o[[r, 0]] >= EPS_OPACITY;
            }
        }
        index = end;
    }

    ViewRender {
        width,
        height,
        colour,
        depth,
        valid,
    }
}
