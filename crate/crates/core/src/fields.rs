//! Multi-scale feature-plane encoders and the density/colour heads.
//!
//! A 4-D query `(x, y, z, t)` samples six 2-D feature planes per level —
//! one per coordinate pair `(xy, xz, yz, xt, yt, zt)` — by bilinear
//! interpolation. Plane features are concatenated across planes and levels
//! (coarse first), then fused by a small MLP per encoder. Two independent
//! encoders feed the density and colour heads. Out-of-range coordinates
//! clamp to the boundary so rays near the box edges never fault.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::autodiff::Tensor;
use crate::geometry::UnitCubePoint;
use crate::model::{DenseParams, SceneModel};

/// Magnitude of the uniform init for plane features.
const PLANE_INIT: f64 = 0.05;

/// Resolution/width of one plane level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlaneLevelSpec {
    /// Side length of the three spatial planes.
    pub spatial: usize,
    /// Time-axis length of the three time-bearing planes (0 = derive from
    /// the frame count, see `ModelConfig::resolved_levels`).
    pub temporal: usize,
    /// Feature channels per plane.
    pub channels: usize,
}

/// Coordinate-pair layout shared by sampling and tests: 0..3 = x,y,z and
/// 3 = normalised time.
pub const PLANE_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// The six planes of one resolution level.
///
/// A plane over the pair `(a, b)` is stored row-major as
/// `[res_b * res_a, channels]` and queried with `(a, b)` mapping to
/// `(column, row)`.
pub struct HexPlaneLevel {
    pub spec: PlaneLevelSpec,
    pub planes: [ParamId; 6],
}

impl HexPlaneLevel {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: PlaneLevelSpec,
    ) -> Self {
        assert!(spec.spatial >= 2 && spec.temporal >= 2 && spec.channels >= 1);
        let mut planes = Vec::with_capacity(6);
        for (idx, &(a, b)) in PLANE_PAIRS.iter().enumerate() {
            let res_a = if a == 3 { spec.temporal } else { spec.spatial };
            let res_b = if b == 3 { spec.temporal } else { spec.spatial };
            let value = Tensor::from_shape_fn((res_b * res_a, spec.channels), |_| {
                rng.gen_range(-PLANE_INIT..PLANE_INIT)
            });
            planes.push(store.add_param(format!("{name}.plane{idx}"), value));
        }
        HexPlaneLevel {
            spec,
            planes: planes.try_into().unwrap_or_else(|_| unreachable!()),
        }
    }

    /// Grid extents `(width, height)` for plane `idx`.
    pub fn plane_dims(&self, idx: usize) -> (usize, usize) {
        let (a, b) = PLANE_PAIRS[idx];
        (
            if a == 3 { self.spec.temporal } else { self.spec.spatial },
            if b == 3 { self.spec.temporal } else { self.spec.spatial },
        )
    }
}

/// Ordered coarse-to-fine levels plus the fusion MLP of one encoder.
pub struct MultiScaleHexPlane {
    pub levels: Vec<HexPlaneLevel>,
    pub fusion: DenseParams,
}

impl MultiScaleHexPlane {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        levels: &[PlaneLevelSpec],
        fusion_hidden: usize,
    ) -> Self {
        assert!(levels.len() >= 2, "need at least two resolution levels");
        let levels: Vec<HexPlaneLevel> = levels
            .iter()
            .enumerate()
            .map(|(i, spec)| HexPlaneLevel::init(store, rng, &format!("{name}.level{i}"), *spec))
            .collect();
        let width: usize = levels.iter().map(|l| 6 * l.spec.channels).sum();
        let fusion = DenseParams::init(store, rng, &format!("{name}.fusion"), width, fusion_hidden);
        MultiScaleHexPlane { levels, fusion }
    }

    /// Concatenated feature width across all planes and levels.
    pub fn feature_width(&self) -> usize {
        self.levels.iter().map(|l| 6 * l.spec.channels).sum()
    }

    /// Bilinear plane features for a batch of `(x,y,z,t)` queries,
    /// concatenated across the six planes of every level.
    pub fn sample_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: &[[f64; 4]],
    ) -> NodeId {
        let mut parts = Vec::with_capacity(self.levels.len() * 6);
        for level in &self.levels {
            for (idx, &(a, b)) in PLANE_PAIRS.iter().enumerate() {
                let (gw, gh) = level.plane_dims(idx);
                let coords: Vec<(f64, f64)> = queries.iter().map(|q| (q[a], q[b])).collect();
                let grid = tape.param(store, level.planes[idx]);
                parts.push(tape.bilinear_lookup(grid, gh, gw, &coords));
            }
        }
        tape.concat_cols(&parts)
    }

    /// Features fused through the encoder's MLP (`tanh` activation).
    pub fn fused_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: &[[f64; 4]],
    ) -> NodeId {
        let feats = self.sample_features(tape, store, queries);
        let pre = self.fusion.apply(tape, store, feats);
        tape.tanh(pre)
    }
}

/// Final density (softplus, 1 output) and colour (sigmoid, 3 outputs) layers.
pub struct FieldHeads {
    pub density: DenseParams,
    pub colour: DenseParams,
}

impl FieldHeads {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, fusion_hidden: usize) -> Self {
        FieldHeads {
            density: DenseParams::init(store, rng, "head.density", fusion_hidden, 1),
            colour: DenseParams::init(store, rng, "head.colour", fusion_hidden, 3),
        }
    }
}

/// Density (`[B,1]`, nonnegative) and colour (`[B,3]`, in `[0,1]`) for a
/// batch of 4-D queries.
pub fn evaluate_field_batch(
    model: &SceneModel,
    tape: &mut Tape,
    queries: &[[f64; 4]],
) -> (NodeId, NodeId) {
    let fused_d = model
        .density_planes
        .fused_features(tape, &model.store, queries);
    let sigma_pre = model.heads.density.apply(tape, &model.store, fused_d);
    let sigma = tape.softplus(sigma_pre);

    let fused_c = model
        .colour_planes
        .fused_features(tape, &model.store, queries);
    let colour_pre = model.heads.colour.apply(tape, &model.store, fused_c);
    let colour = tape.sigmoid(colour_pre);
    (colour, sigma)
}

/// Single-point convenience wrapper over [`evaluate_field_batch`].
pub fn evaluate_field(model: &SceneModel, u: &UnitCubePoint, t_norm: f64) -> (Vector3<f64>, f64) {
    let mut tape = Tape::new();
    let q = [[u.0.x, u.0.y, u.0.z, t_norm]];
    let (colour, sigma) = evaluate_field_batch(model, &mut tape, &q);
    let c = tape.value(colour);
    (
        Vector3::new(c[[0, 0]], c[[0, 1]], c[[0, 2]]),
        tape.value(sigma)[[0, 0]],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WorkspaceBox;
    use crate::model::ModelConfig;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_model() -> SceneModel {
        let config = ModelConfig {
            levels: vec![
                PlaneLevelSpec {
                    spatial: 5,
                    temporal: 3,
                    channels: 2,
                },
                PlaneLevelSpec {
                    spatial: 9,
                    temporal: 4,
                    channels: 2,
                },
            ],
            fusion_hidden: 8,
            coupling_blocks: 2,
            coupling_hidden: 8,
            coupling_layers: 1,
            time_embed_dim: 4,
            init_seed: 3,
        };
        let ws =
            WorkspaceBox::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        SceneModel::new(&config, ws, 4)
    }

    /// Naive per-plane bilinear interpolation straight from the definition.
    fn oracle_features(model: &SceneModel, q: [f64; 4]) -> Vec<f64> {
        let mut out = Vec::new();
        for level in &model.density_planes.levels {
            for (idx, &(a, b)) in PLANE_PAIRS.iter().enumerate() {
                let (gw, gh) = level.plane_dims(idx);
                let grid = model.store.value(level.planes[idx]);
                let fx = q[a].clamp(0.0, 1.0) * (gw - 1) as f64;
                let fy = q[b].clamp(0.0, 1.0) * (gh - 1) as f64;
                let x0 = (fx.floor() as usize).min(gw - 1);
                let y0 = (fy.floor() as usize).min(gh - 1);
                let x1 = (x0 + 1).min(gw - 1);
                let y1 = (y0 + 1).min(gh - 1);
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                for c in 0..level.spec.channels {
                    let v = (1.0 - ty)
                        * ((1.0 - tx) * grid[[y0 * gw + x0, c]] + tx * grid[[y0 * gw + x1, c]])
                        + ty * ((1.0 - tx) * grid[[y1 * gw + x0, c]]
                            + tx * grid[[y1 * gw + x1, c]]);
                    out.push(v);
                }
            }
        }
        out
    }

    #[test]
    fn query_at_grid_node_returns_stored_feature() {
        let model = tiny_model();
        // (0.25, 0.5, 0.75) hits integer indices on the 5-grid; t=0.5 hits
        // index 1 on the 3-grid.
        let q = [0.25, 0.5, 0.75, 0.5];
        let mut tape = Tape::new();
        let node = model
            .density_planes
            .sample_features(&mut tape, &model.store, &[q]);
        let got = tape.value(node);

        let level = &model.density_planes.levels[0];
        for (idx, &(a, b)) in PLANE_PAIRS.iter().enumerate() {
            let (gw, gh) = level.plane_dims(idx);
            let col = (q[a] * (gw - 1) as f64).round() as usize;
            let row = (q[b] * (gh - 1) as f64).round() as usize;
            assert!((q[a] * (gw - 1) as f64 - col as f64).abs() < 1e-12);
            assert!((q[b] * (gh - 1) as f64 - row as f64).abs() < 1e-12);
            let grid = model.store.value(level.planes[idx]);
            for c in 0..level.spec.channels {
                let expect = grid[[row * gw + col, c]];
                let got_v = got[[0, idx * level.spec.channels + c]];
                assert!((got_v - expect).abs() <= 1e-15, "plane {idx} ch {c}");
            }
        }
    }

    #[test]
    fn query_at_cell_midpoint_is_corner_mean() {
        let mut model = tiny_model();
        // Zero every plane except level-0 xy so the value is readable.
        for lvl in 0..2 {
            for idx in 0..6 {
                if lvl == 0 && idx == 0 {
                    continue;
                }
                let pid = model.density_planes.levels[lvl].planes[idx];
                model.store.value_mut(pid).fill(0.0);
            }
        }
        let level = &model.density_planes.levels[0];
        let grid = model.store.value(level.planes[0]).clone();
        // midpoint of cell (0,0)-(1,1) on the 5-grid: coords 0.5/4 = 0.125
        let q = [0.125, 0.125, 0.0, 0.0];
        let mut tape = Tape::new();
        let node = model
            .density_planes
            .sample_features(&mut tape, &model.store, &[q]);
        let got = tape.value(node);
        for c in 0..level.spec.channels {
            let mean = 0.25 * (grid[[0, c]] + grid[[1, c]] + grid[[5, c]] + grid[[6, c]]);
            assert!((got[[0, c]] - mean).abs() <= 1e-15);
        }
    }

    #[test]
    fn random_queries_match_oracle() {
        let model = tiny_model();
        let mut rng = StdRng::seed_from_u64(4);
        let queries: Vec<[f64; 4]> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(-0.2..1.2), // exercises boundary clamping
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let mut tape = Tape::new();
        let node = model
            .density_planes
            .sample_features(&mut tape, &model.store, &queries);
        let got = tape.value(node);
        for (r, q) in queries.iter().enumerate() {
            let expect = oracle_features(&model, *q);
            for (c, e) in expect.iter().enumerate() {
                assert!((got[[r, c]] - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn field_outputs_respect_ranges() {
        let model = tiny_model();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let u = UnitCubePoint::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            );
            let (colour, sigma) = evaluate_field(&model, &u, rng.gen_range(0.0..1.0));
            assert!(sigma >= 0.0);
            for c in colour.iter() {
                assert!((0.0..=1.0).contains(c));
            }
        }
    }

    #[test]
    fn density_preactivation_limits() {
        let mut model = tiny_model();
        // Density head pushed far negative: softplus tends to 0.
        model.store.value_mut(model.heads.density.bias)[[0, 0]] = -60.0;
        model.store.value_mut(model.heads.density.weight).fill(0.0);
        let (_, sigma) = evaluate_field(&model, &UnitCubePoint::new(0.5, 0.5, 0.5), 0.5);
        assert!(sigma >= 0.0 && sigma < 1e-20);
        // Zero colour head: sigmoid(0) = 0.5 on every channel.
        model.store.value_mut(model.heads.colour.weight).fill(0.0);
        model.store.value_mut(model.heads.colour.bias).fill(0.0);
        let (colour, _) = evaluate_field(&model, &UnitCubePoint::new(0.5, 0.5, 0.5), 0.5);
        for c in colour.iter() {
            assert!((c - 0.5).abs() <= 1e-15);
        }
    }

    #[test]
    fn density_gradient_wrt_plane_entries_matches_finite_differences() {
        let mut model = tiny_model();
        let q = [[0.31, 0.62, 0.47, 0.55]];
        let pid = model.density_planes.levels[0].planes[0];

        let eval = |model: &SceneModel| -> f64 {
            let mut tape = Tape::new();
            let (_, sigma) = evaluate_field_batch(model, &mut tape, &q);
            tape.value(sigma)[[0, 0]]
        };

        let mut tape = Tape::new();
        let (_, sigma) = evaluate_field_batch(&model, &mut tape, &q);
        model.store.zero_grads();
        tape.backward(sigma, Tensor::from_elem((1, 1), 1.0), &mut model.store)
            .unwrap();
        let analytic = model.store.grad(pid).clone();

        let h = 1e-5;
        let mut checked = 0;
        for flat in 0..analytic.len() {
            let (r, c) = (flat / analytic.ncols(), flat % analytic.ncols());
            if analytic[[r, c]] == 0.0 {
                continue;
            }
            let orig = model.store.value(pid)[[r, c]];
            model.store.value_mut(pid)[[r, c]] = orig + h;
            let fp = eval(&model);
            model.store.value_mut(pid)[[r, c]] = orig - h;
            let fm = eval(&model);
            model.store.value_mut(pid)[[r, c]] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) <= 1e-4,
                "({r},{c}): {a} vs {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 4, "query should touch a full interpolation cell");
    }

    #[test]
    fn field_is_locally_lipschitz() {
        let model = tiny_model();
        let base = UnitCubePoint::new(0.4, 0.4, 0.4);
        let (c0, s0) = evaluate_field(&model, &base, 0.5);
        let nudged = UnitCubePoint::new(0.4 + 1e-9, 0.4 - 1e-9, 0.4 + 1e-9);
        let (c1, s1) = evaluate_field(&model, &nudged, 0.5 + 1e-9);
        assert!((s0 - s1).abs() <= 1e-6);
        assert!((c0 - c1).norm() <= 1e-6);
    }

    #[test]
    fn coarse_only_features_are_bilinear_at_coarse_scale() {
        let mut model = tiny_model();
        for idx in 0..6 {
            let pid = model.density_planes.levels[1].planes[idx];
            model.store.value_mut(pid).fill(0.0);
        }
        // With z and t fixed, coarse-only features are bilinear in (x,y)
        // inside one coarse cell: any interior value equals the bilinear
        // blend of the cell-corner values.
        let (zq, tq) = (0.37, 0.61);
        let cell = 1.0 / 4.0; // 5-grid cell width
        let corners = [
            [cell, cell, zq, tq],
            [2.0 * cell, cell, zq, tq],
            [cell, 2.0 * cell, zq, tq],
            [2.0 * cell, 2.0 * cell, zq, tq],
        ];
        let (tx, ty) = (0.3, 0.8);
        let inner = [cell + tx * cell, cell + ty * cell, zq, tq];
        let mut tape = Tape::new();
        let all: Vec<[f64; 4]> = corners.iter().copied().chain([inner]).collect();
        let node = model
            .density_planes
            .sample_features(&mut tape, &model.store, &all);
        let v = tape.value(node);
        for c in 0..v.ncols() {
            let blend = (1.0 - ty) * ((1.0 - tx) * v[[0, c]] + tx * v[[1, c]])
                + ty * ((1.0 - tx) * v[[2, c]] + tx * v[[3, c]]);
            assert!(
                (v[[4, c]] - blend).abs() <= 1e-12,
                "feature {c}: {} vs {}",
                v[[4, c]],
                blend
            );
        }
    }
}
