//! WebAssembly bindings for the static page in `www/`.

use crossutt::context::AttentionPool;
use crossutt::encoder::mask::build_streaming_mask;
use crossutt::numerics::{Ctx, ParamStore, Rng, Tensor};
use crossutt::transducer::Lattice;
use wasm_bindgen::prelude::*;

fn js_err(e: crossutt::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Pooling weights `[slots×frames]`, row-major, of a freshly initialised
/// pool over a random history. Frames in `[cue_start, cue_end)` are shifted
/// along one direction by `cue_strength`; `sharpness` scales the score
/// normalisation gain.
#[wasm_bindgen]
pub fn pool_weights(
    slots: usize,
    frames: usize,
    dim: usize,
    cue_start: usize,
    cue_end: usize,
    cue_strength: f64,
    sharpness: f64,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    if slots == 0 || frames == 0 || dim == 0 {
        return Err(JsError::new("slots, frames and dim must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let pool = AttentionPool::new(&mut store, &mut rng, "pool", slots, dim).map_err(js_err)?;
    store
        .set_value("pool.bn.gain", Tensor::row_vector(vec![sharpness; slots]))
        .map_err(js_err)?;
    let direction: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let mut h = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let cue = (cue_start..cue_end).contains(&t);
        for &d in &direction {
            h.push(rng.normal() + if cue { cue_strength * d } else { 0.0 });
        }
    }
    let mut ctx = Ctx::eval(&store);
    let v = ctx.graph.constant(Tensor::matrix(frames, dim, h));
    let out = pool.forward(&mut ctx, v).map_err(js_err)?;
    Ok(ctx.graph.value(out.weights).data().to_vec())
}

/// Streaming attention visibility `[frames×(context+frames)]`, 1 where a
/// query may attend, after `blocks` stacked layers with per-layer
/// lookahead `lookahead`.
#[wasm_bindgen]
pub fn streaming_mask(frames: usize, context: usize, lookahead: usize, blocks: usize) -> Result<Vec<u8>, JsError> {
    if frames == 0 {
        return Err(JsError::new("frames must be positive"));
    }
    let m = build_streaming_mask(frames, context, lookahead * blocks.max(1));
    Ok(m.allowed.iter().map(|&a| u8::from(a)).collect())
}

/// Posterior occupancy `[frames×(labels+1)]` of the transducer lattice for
/// random joint outputs over `vocab` symbols; `peak` biases each frame
/// toward the diagonal alignment.
#[wasm_bindgen]
pub fn alignment_occupancy(frames: usize, labels: usize, vocab: usize, peak: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if frames == 0 || vocab < 2 {
        return Err(JsError::new("need at least one frame and two symbols"));
    }
    let mut rng = Rng::new(seed);
    let ys: Vec<usize> = (0..labels).map(|_| 1 + rng.below(vocab - 1)).collect();
    let rows = frames * (labels + 1);
    let mut logits = Vec::with_capacity(rows * vocab);
    for t in 0..frames {
        // Label index a straight-line alignment would have reached by frame t.
        let diag = (t * (labels + 1)) / frames;
        for u in 0..=labels {
            for k in 0..vocab {
                let mut z = rng.normal();
                if u < labels && k == ys[u] && u >= diag {
                    z += peak;
                }
                if k == 0 && u > diag {
                    z += peak;
                }
                logits.push(z);
            }
        }
    }
    let lattice = Lattice::from_logits(&Tensor::matrix(rows, vocab, logits), frames, &ys).map_err(js_err)?;
    let mut occ = Vec::with_capacity(rows);
    for t in 0..frames {
        for u in 0..=labels {
            occ.push(lattice.occupancy(t, u));
        }
    }
    Ok(occ)
}
