use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{GroupKind, ParamTag, ParameterGroup, Scalar, Tape, Tensor, Var};

pub(crate) fn normal<S: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub(crate) fn constant<S: Scalar>(shape: Vec<usize>, value: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![S::lit(value); n]).expect("shape and data agree")
}

pub(crate) fn locate<S: Scalar>(group: &ParameterGroup<S>, name: &str) -> Result<usize> {
    group
        .index_of(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}/{name}", group.name())))
}

pub(crate) fn expect_shape<S: Scalar>(
    group: &ParameterGroup<S>,
    idx: usize,
    shape: &[usize],
) -> Result<()> {
    let got = group.get(idx).shape();
    if got != shape {
        return Err(Error::dim("parameter", got, shape));
    }
    Ok(())
}

/// Binds every parameter of a group to leaves, in group order.
pub(crate) fn bind<S: Scalar>(tape: &mut Tape<S>, group: &ParameterGroup<S>) -> Vec<Var> {
    let kind: GroupKind = group.kind();
    group
        .iter()
        .enumerate()
        .map(|(index, (_, t))| tape.param(t, ParamTag { group: kind, index }))
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        group: &mut ParameterGroup<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let w = group.push(format!("{name}.w"), normal(rng, vec![fan_in, fan_out], std))?;
        let b = group.push(format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn locate<S: Scalar>(
        group: &ParameterGroup<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = locate(group, &format!("{name}.w"))?;
        let b = locate(group, &format!("{name}.b"))?;
        expect_shape(group, w, &[fan_in, fan_out])?;
        expect_shape(group, b, &[fan_out])?;
        Ok(Linear { w, b })
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_bias(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    g: usize,
    b: usize,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn init<S: Scalar>(group: &mut ParameterGroup<S>, name: &str, dim: usize) -> Result<Self> {
        let g = group.push(format!("{name}.g"), constant(vec![dim], 1.0))?;
        let b = group.push(format!("{name}.b"), Tensor::zeros(vec![dim]))?;
        Ok(Norm { g, b })
    }

    pub fn locate<S: Scalar>(group: &ParameterGroup<S>, name: &str, dim: usize) -> Result<Self> {
        let g = locate(group, &format!("{name}.g"))?;
        let b = locate(group, &format!("{name}.b"))?;
        expect_shape(group, g, &[dim])?;
        expect_shape(group, b, &[dim])?;
        Ok(Norm { g, b })
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.g], p[self.b], LN_EPS)
    }
}

/// Pre-norm transformer block: attention then GELU MLP, both residual.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn init<S: Scalar>(
        group: &mut ParameterGroup<S>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Residual branches are damped by depth so the stream stays O(1).
        let res_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        Ok(Block {
            ln1: Norm::init(group, &format!("{prefix}.ln1"), dim)?,
            q: Linear::init(group, &format!("{prefix}.attn.q"), dim, dim, 1.0, rng)?,
            k: Linear::init(group, &format!("{prefix}.attn.k"), dim, dim, 1.0, rng)?,
            v: Linear::init(group, &format!("{prefix}.attn.v"), dim, dim, 1.0, rng)?,
            o: Linear::init(group, &format!("{prefix}.attn.o"), dim, dim, res_gain, rng)?,
            ln2: Norm::init(group, &format!("{prefix}.ln2"), dim)?,
            fc1: Linear::init(group, &format!("{prefix}.mlp.fc1"), dim, hidden, 1.0, rng)?,
            fc2: Linear::init(
                group,
                &format!("{prefix}.mlp.fc2"),
                hidden,
                dim,
                res_gain,
                rng,
            )?,
            heads,
        })
    }

    pub fn locate<S: Scalar>(
        group: &ParameterGroup<S>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: Norm::locate(group, &format!("{prefix}.ln1"), dim)?,
            q: Linear::locate(group, &format!("{prefix}.attn.q"), dim, dim)?,
            k: Linear::locate(group, &format!("{prefix}.attn.k"), dim, dim)?,
            v: Linear::locate(group, &format!("{prefix}.attn.v"), dim, dim)?,
            o: Linear::locate(group, &format!("{prefix}.attn.o"), dim, dim)?,
            ln2: Norm::locate(group, &format!("{prefix}.ln2"), dim)?,
            fc1: Linear::locate(group, &format!("{prefix}.mlp.fc1"), dim, hidden)?,
            fc2: Linear::locate(group, &format!("{prefix}.mlp.fc2"), hidden, dim)?,
            heads,
        })
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        x: Var,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.apply(tape, p, x)?;
        let q = self.q.apply(tape, p, h)?;
        let k = self.k.apply(tape, p, h)?;
        let v = self.v.apply(tape, p, h)?;
        let a = tape.attention(q, k, v, batch, seq, self.heads, causal)?;
        let o = self.o.apply(tape, p, a)?;
        let x = tape.add(x, o)?;
        let h = self.ln2.apply(tape, p, x)?;
        let h = self.fc1.apply(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.apply(tape, p, h)?;
        tape.add(x, h)
    }
}
