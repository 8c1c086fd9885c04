use crate::attention::layers::Linear;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamStore, Rng, Tape, Var};

/// Multi-head scaled dot-product self-attention over `[T, d]` or `[G, T, d]`
/// (independent groups, e.g. attention windows).
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionOutput {
    pub output: Var,
    /// `[G, heads, T, T]`
    pub weights: Var,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_full(tape, store, x)?.output)
    }

    pub fn forward_full(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<SelfAttentionOutput> {
        let s = tape.shape(x).to_vec();
        let (g, t) = match s.as_slice() {
            [t, d] if *d == self.dim && *t >= 1 => (1, *t),
            [g, t, d] if *d == self.dim && *t >= 1 => (*g, *t),
            _ => return shape_err(format!("self-attention input {s:?} for dim {}", self.dim)),
        };
        let (n, dh) = (self.heads, self.dim / self.heads);
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[g, t, n, dh])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(tape, store, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, store, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, store, x)?;
        let v = split(tape, v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, -1)?;
        let o = tape.matmul(weights, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &s)?;
        let output = self.output.forward(tape, store, o)?;
        Ok(SelfAttentionOutput { output, weights })
    }
}
