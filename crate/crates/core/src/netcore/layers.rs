//! Parameterized building blocks. Each layer owns the ids of its parameters
//! in a shared [`ParamStore`] and records its forward pass onto a [`Tape`].

use rand::Rng;

use super::{ParamId, ParamStore, Real, Result, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.init_uniform(&format!("{name}.w"), &[output, input], input, rng)?;
        let b = store.init_uniform(&format!("{name}.b"), &[output], input, rng)?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    /// Same as [`Linear::new`] but with all weights zero, so the layer starts as a constant 0.
    pub fn zeroed<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let w = store.init_const(&format!("{name}.w"), &[output, input], 0.0)?;
        let b = store.init_const(&format!("{name}.b"), &[output], 0.0)?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv1d {
    /// Kernel `k`; padding defaults to `k / 2`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan = input * k;
        let w = store.init_uniform(&format!("{name}.w"), &[output, input, k], fan, rng)?;
        let b = store.init_uniform(&format!("{name}.b"), &[output], fan, rng)?;
        Ok(Conv1d {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan = input * k * k;
        let w = store.init_uniform(&format!("{name}.w"), &[output, input, k, k], fan, rng)?;
        let b = store.init_uniform(&format!("{name}.b"), &[output], fan, rng)?;
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan = input * k * k / (stride * stride).max(1);
        let w = store.init_uniform(&format!("{name}.w"), &[input, output, k, k], fan, rng)?;
        let b = store.init_uniform(&format!("{name}.b"), &[output], fan, rng)?;
        Ok(ConvTranspose2d { w, b, stride, pad })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let gamma = store.init_const(&format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.init_const(&format!("{name}.beta"), &[channels], 0.0)?;
        Ok(GroupNorm {
            gamma,
            beta,
            groups,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Normalization over the feature axis of `[n, d]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm(GroupNorm);

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm(GroupNorm::new(store, name, dim, 1)?))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        self.0.forward(tape, store, x)
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    input_proj: Linear,
    hidden_proj: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input_proj = Linear::new(store, &format!("{name}.ih"), input, 3 * hidden, rng)?;
        let hidden_proj = Linear::new(store, &format!("{name}.hh"), hidden, 3 * hidden, rng)?;
        Ok(GruCell {
            input_proj,
            hidden_proj,
            hidden,
        })
    }

    /// One step: `x[n, input]`, `h[n, hidden]` → new hidden state.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gi = self.input_proj.forward(tape, store, x)?;
        let gh = self.hidden_proj.forward(tape, store, h)?;
        let ir = tape.slice(gi, 0, hd)?;
        let iz = tape.slice(gi, hd, hd)?;
        let inn = tape.slice(gi, 2 * hd, hd)?;
        let hr = tape.slice(gh, 0, hd)?;
        let hz = tape.slice(gh, hd, hd)?;
        let hn = tape.slice(gh, 2 * hd, hd)?;
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn)?;
        let n = tape.add(inn, rh)?;
        let n = tape.tanh(n);
        // (1 − z)·n + z·h = n + z·(h − n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }
}
