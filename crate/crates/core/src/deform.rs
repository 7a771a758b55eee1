//! Invertible, time-conditioned mapping between the contracted workspace
//! and the static canonical space.
//!
//! The map is a stack of coupling blocks cycling through the three
//! coordinates. Each block rewrites one coordinate with an affine scalar
//! map whose scale is `exp(tanh(s))` — strictly positive, so the map is
//! monotonic and has an analytic inverse — conditioned on the two frozen
//! coordinates and a learned per-frame time code. The final conditioner
//! layer initialises to zero, so the whole map starts as the identity and
//! the density field never fights a spurious deformation at step one.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::geometry::UnitCubePoint;
use crate::model::DenseParams;

/// Learned per-frame latent codes; row `t` conditions the map at frame `t`.
pub struct TimeEmbedding {
    pub table: ParamId,
    pub dim: usize,
}

impl TimeEmbedding {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, n_frames: usize, dim: usize) -> Self {
        use rand::Rng;
        let table = Tensor::from_shape_fn((n_frames.max(1), dim), |_| rng.gen_range(-0.1..0.1));
        TimeEmbedding {
            table: store.add_param("time_embed", table),
            dim,
        }
    }

    /// Codes for a batch of frame indices, `[B, dim]`.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, frames: &[usize]) -> NodeId {
        let table = tape.param(store, self.table);
        tape.gather_rows(table, frames)
    }
}

/// One coupling step: rewrites coordinate `coord` conditioned on the other
/// two coordinates and the time code.
pub struct CouplingBlock {
    pub coord: usize,
    hidden: Vec<DenseParams>,
    out: DenseParams,
}

impl CouplingBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        coord: usize,
        time_dim: usize,
        width: usize,
        layers: usize,
    ) -> Self {
        let mut hidden = Vec::with_capacity(layers);
        let mut fan_in = 2 + time_dim;
        for l in 0..layers {
            hidden.push(DenseParams::init(
                store,
                rng,
                &format!("{name}.h{l}"),
                fan_in,
                width,
            ));
            fan_in = width;
        }
        // Zero final layer: scale = exp(tanh(0)) = 1, shift = 0 at init.
        let out = DenseParams::init_zero(store, &format!("{name}.out"), fan_in, 2);
        CouplingBlock { coord, hidden, out }
    }

    /// Conditioner outputs `(log-scale pre-activation, shift)`, each `[B,1]`.
    fn conditioner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frozen: NodeId,
        code: NodeId,
    ) -> (NodeId, NodeId) {
        let mut h = tape.concat_cols(&[frozen, code]);
        for layer in &self.hidden {
            let pre = layer.apply(tape, store, h);
            h = tape.tanh(pre);
        }
        let params = self.out.apply(tape, store, h);
        let s_pre = tape.slice_cols(params, 0, 1);
        let shift = tape.slice_cols(params, 1, 1);
        (s_pre, shift)
    }

    /// Splits `points` into the transformed coordinate and the two frozen
    /// ones, preserving column order for reassembly.
    fn split(&self, tape: &mut Tape, points: NodeId) -> (NodeId, NodeId) {
        let active = tape.slice_cols(points, self.coord, 1);
        let frozen = match self.coord {
            0 => {
                let b = tape.slice_cols(points, 1, 2);
                b
            }
            1 => {
                let a = tape.slice_cols(points, 0, 1);
                let c = tape.slice_cols(points, 2, 1);
                tape.concat_cols(&[a, c])
            }
            _ => tape.slice_cols(points, 0, 2),
        };
        (active, frozen)
    }

    fn reassemble(&self, tape: &mut Tape, new_active: NodeId, points: NodeId) -> NodeId {
        match self.coord {
            0 => {
                let rest = tape.slice_cols(points, 1, 2);
                tape.concat_cols(&[new_active, rest])
            }
            1 => {
                let a = tape.slice_cols(points, 0, 1);
                let c = tape.slice_cols(points, 2, 1);
                tape.concat_cols(&[a, new_active, c])
            }
            _ => {
                let rest = tape.slice_cols(points, 0, 2);
                tape.concat_cols(&[rest, new_active])
            }
        }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        points: NodeId,
        code: NodeId,
        inverse: bool,
    ) -> NodeId {
        let (active, frozen) = self.split(tape, points);
        let (s_pre, shift) = self.conditioner(tape, store, frozen, code);
        let bounded = tape.tanh(s_pre);
        let new_active = if inverse {
            // x = (y - shift) * exp(-tanh(s))
            let neg = tape.neg(bounded);
            let inv_scale = tape.exp(neg);
            let centred = tape.sub(active, shift);
            tape.mul(centred, inv_scale)
        } else {
            // y = x * exp(tanh(s)) + shift
            let scale = tape.exp(bounded);
            let scaled = tape.mul(active, scale);
            tape.add(scaled, shift)
        };
        self.reassemble(tape, new_active, points)
    }
}

/// The full bidirectional map: coupling blocks cycling `x, y, z`, plus the
/// time embedding that conditions them.
pub struct InvertibleMap {
    pub blocks: Vec<CouplingBlock>,
    pub time: TimeEmbedding,
}

impl InvertibleMap {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_frames: usize,
        time_dim: usize,
        n_blocks: usize,
        width: usize,
        layers: usize,
    ) -> Self {
        let time = TimeEmbedding::init(store, rng, n_frames, time_dim);
        let blocks = (0..n_blocks)
            .map(|i| {
                CouplingBlock::init(store, rng, &format!("deform.block{i}"), i % 3, time_dim, width, layers)
            })
            .collect();
        InvertibleMap { blocks, time }
    }

    /// Workspace (contracted) to canonical, per-row frame conditioning.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        points: NodeId,
        frames: &[usize],
    ) -> NodeId {
        let code = self.time.lookup(tape, store, frames);
        let mut current = points;
        for block in &self.blocks {
            current = block.apply(tape, store, current, code, false);
        }
        current
    }

    /// Canonical back to the workspace deformed at the given frames;
    /// reversed block order with per-block analytic inverses.
    pub fn inverse_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        points: NodeId,
        frames: &[usize],
    ) -> NodeId {
        let code = self.time.lookup(tape, store, frames);
        let mut current = points;
        for block in self.blocks.iter().rev() {
            current = block.apply(tape, store, current, code, true);
        }
        current
    }
}

/// Eager single-point forward map.
pub fn map_forward(
    map: &InvertibleMap,
    store: &ParamStore,
    u: &UnitCubePoint,
    frame: usize,
) -> UnitCubePoint {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_shape_vec((1, 3), vec![u.0.x, u.0.y, u.0.z]).unwrap());
    let out = map.forward_batch(&mut tape, store, p, &[frame]);
    let v = tape.value(out);
    UnitCubePoint(Vector3::new(v[[0, 0]], v[[0, 1]], v[[0, 2]]))
}

/// Eager single-point inverse map.
pub fn map_inverse(
    map: &InvertibleMap,
    store: &ParamStore,
    canonical: &UnitCubePoint,
    frame: usize,
) -> UnitCubePoint {
    let mut tape = Tape::new();
    let p = tape.constant(
        Tensor::from_shape_vec((1, 3), vec![canonical.0.x, canonical.0.y, canonical.0.z]).unwrap(),
    );
    let out = map.inverse_batch(&mut tape, store, p, &[frame]);
    let v = tape.value(out);
    UnitCubePoint(Vector3::new(v[[0, 0]], v[[0, 1]], v[[0, 2]]))
}
