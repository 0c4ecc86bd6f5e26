use crate::error::Result;
use crate::numerics::layers::Linear;
use crate::numerics::{Ctx, ParamStore, Rng, Var};

/// `out(relu(enc(h_t) + pred(f_u)))` for every `(t, u)` pair.
#[derive(Clone, Debug)]
pub struct Joint {
    pub enc: Linear,
    pub pred: Linear,
    pub out: Linear,
    pub vocab_size: usize,
}

impl Joint {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        enc_dim: usize,
        pred_dim: usize,
        joint_dim: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(Self {
            enc: Linear::new(store, rng, "joint.enc", enc_dim, joint_dim, true)?,
            pred: Linear::new(store, rng, "joint.pred", pred_dim, joint_dim, false)?,
            out: Linear::new(store, rng, "joint.out", joint_dim, vocab_size, true)?,
            vocab_size,
        })
    }

    /// `h: [T×D]`, `f: [(U+1)×P]` → logits `[T·(U+1) × V]`, row `t·(U+1)+u`.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, f: Var) -> Result<Var> {
        let a = self.enc.forward(ctx, h)?;
        let b = self.pred.forward(ctx, f)?;
        self.combine(ctx, a, b)
    }

    /// Joint on already projected encoder rows `a` and predictor rows `b`.
    pub fn combine(&self, ctx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
        let s = ctx.graph.outer_sum(a, b)?;
        let g = ctx.graph.relu(s);
        self.out.forward(ctx, g)
    }
}
