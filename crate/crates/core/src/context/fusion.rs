use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Key/value source for frame-level context: `[oldest; …; newest; current]`.
pub fn fuse_frame_concat(g: &mut Graph, current: Var, cached: &[Var]) -> Result<Var> {
    let d = g.value(current).cols();
    for &c in cached {
        if g.value(c).cols() != d {
            return Err(Error::shape("fuse_frame_concat", g.shape(current), g.shape(c)));
        }
    }
    concat(g, current, cached)
}

/// Same layout as [`fuse_frame_concat`] but every cached entry must be a
/// pooled `[slots×D]` block.
pub fn fuse_pooled(g: &mut Graph, current: Var, cached: &[Var], slots: usize) -> Result<Var> {
    let d = g.value(current).cols();
    for &c in cached {
        if g.shape(c) != [slots, d] {
            return Err(Error::shape("fuse_pooled", &[slots, d], g.shape(c)));
        }
    }
    concat(g, current, cached)
}

/// Joins cached entries into the context rows passed to a block.
pub fn context_rows(g: &mut Graph, cached: &[Var]) -> Result<Option<Var>> {
    match cached {
        [] => Ok(None),
        [one] => Ok(Some(*one)),
        many => Ok(Some(g.concat_rows(many)?)),
    }
}

fn concat(g: &mut Graph, current: Var, cached: &[Var]) -> Result<Var> {
    if cached.is_empty() {
        return Ok(current);
    }
    let mut parts = cached.to_vec();
    parts.push(current);
    g.concat_rows(&parts)
}
