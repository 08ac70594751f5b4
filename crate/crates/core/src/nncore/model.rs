use std::sync::Arc;

use serde::Serialize;

use super::conv::ConvGeom;
use super::init::{fan_in, init_gaussian};
use super::tape::{Tape, Var};
use crate::arch::{ArchSpec, Branch, Family, NormPlacement};
use crate::error::{Error, Result};
use crate::graphdepth::{KernelOffsets, SpatialGrid};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Dense = 0,
    Conv = 1,
    Branch = 2,
    Head = 3,
    Embed = 4,
    Query = 5,
    Key = 6,
    Value = 7,
    Out = 8,
    FfnIn = 9,
    FfnOut = 10,
    LnGamma = 11,
    LnBeta = 12,
}

/// Weight identity: depth unit (the readout is unit `L + 1`) and role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ParamKey {
    pub unit: usize,
    pub role: Role,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub key: ParamKey,
    pub value: Tensor<F>,
    /// Initialization variance per entry (0 for LayerNorm parameters).
    pub variance: f64,
}

impl<F: Scalar> Param<F> {
    pub fn fan_in(&self) -> usize {
        fan_in(&self.value.shape)
    }
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub spec: ArchSpec,
    pub params: Vec<Param<F>>,
    pub seed: u64,
    pub q: f64,
    geom: Option<Arc<ConvGeom>>,
}

/// Per-unit pre-activations `z^(1..L)` and the readout `z^(L+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<F> {
    pub units: Vec<Tensor<F>>,
    pub output: Tensor<F>,
}

/// A recorded forward pass.
pub struct Forward<F> {
    pub tape: Tape<F>,
    pub input: Var,
    pub units: Vec<Var>,
    pub output: Var,
    pub batch: usize,
}

impl<F: Scalar> Forward<F> {
    pub fn trace(&self, spec: &ArchSpec) -> ActivationTrace<F> {
        let mut shape = vec![self.batch];
        shape.extend(spec.unit_shape());
        ActivationTrace {
            units: self
                .units
                .iter()
                .map(|&u| {
                    self.tape
                        .value(u)
                        .clone()
                        .reshape(&shape)
                        .expect("unit shape")
                })
                .collect(),
            output: self.tape.value(self.output).clone(),
        }
    }
}

struct Builder<'a, F> {
    seed: u64,
    q: f64,
    params: Vec<Param<F>>,
    spec: &'a ArchSpec,
}

impl<F: Scalar> Builder<'_, F> {
    fn weight(&mut self, unit: usize, role: Role, shape: &[usize], gain: f64) -> Result<()> {
        let var = gain / fan_in(shape) as f64;
        let mut r = rng::tensor_stream(self.seed, unit, role as u32);
        let value = init_gaussian(shape, var, &mut r)?;
        self.params.push(Param {
            key: ParamKey { unit, role },
            value,
            variance: var,
        });
        Ok(())
    }

    fn layer_norm(&mut self, unit: usize) {
        let d = self.spec.width;
        self.params.push(Param {
            key: ParamKey {
                unit,
                role: Role::LnGamma,
            },
            value: Tensor::full(&[d], F::one()),
            variance: 0.0,
        });
        self.params.push(Param {
            key: ParamKey {
                unit,
                role: Role::LnBeta,
            },
            value: Tensor::zeros(&[d]),
            variance: 0.0,
        });
    }

    /// Plain unit acting on `sigma(prev)` with fan-in `1/(q fan_in)`.
    fn plain(&mut self, unit: usize, first: bool) -> Result<()> {
        let s = self.spec;
        let g = 1.0 / self.q;
        if s.is_conv() {
            let ci = if first { s.input_dim } else { s.channels };
            let k = s.kernel.iter().product();
            self.weight(unit, Role::Conv, &[s.channels, k, ci], g)
        } else {
            let ci = if first { s.input_dim } else { s.width };
            self.weight(unit, Role::Dense, &[s.width, ci], g)
        }
    }
}

impl<F: Scalar> Model<F> {
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let q = spec.activation.gating_constant();
        let mut b = Builder {
            seed,
            q,
            params: Vec::new(),
            spec,
        };
        let l = spec.effective_depth();
        match spec.family {
            Family::Mlp | Family::Cnn1d | Family::Cnn2d => {
                for u in 1..=l {
                    b.plain(u, u == 1)?;
                }
            }
            Family::ResNet => {
                for u in 1..=spec.plain_units {
                    b.plain(u, u == 1)?;
                }
                let gain = spec.residual_c / (q * spec.blocks as f64);
                for u in spec.plain_units + 1..=l {
                    match spec.branch {
                        Branch::Dense => {
                            b.weight(u, Role::Branch, &[spec.width, spec.width], gain)?
                        }
                        Branch::Conv => {
                            let k = spec.kernel.iter().product();
                            b.weight(u, Role::Branch, &[spec.channels, k, spec.channels], gain)?
                        }
                    }
                }
            }
            Family::Transformer => {
                let d = spec.width;
                let dff = d * spec.ffn_mult;
                b.weight(spec.plain_units, Role::Embed, &[d, spec.input_dim], 1.0)?;
                for u in spec.plain_units + 1..=l {
                    if spec.norm_placement != NormPlacement::None {
                        b.layer_norm(u);
                    }
                    if (u - spec.plain_units) % 2 == 1 {
                        for r in [Role::Query, Role::Key, Role::Value, Role::Out] {
                            b.weight(u, r, &[d, d], 1.0)?;
                        }
                    } else {
                        b.weight(u, Role::FfnIn, &[dff, d], 1.0)?;
                        b.weight(u, Role::FfnOut, &[d, dff], 1.0 / q)?;
                    }
                }
            }
        }
        let head_in = if spec.is_conv() {
            spec.channels
        } else {
            spec.width
        };
        b.weight(l + 1, Role::Head, &[spec.outputs, head_in], 1.0)?;
        let geom = if spec.is_conv() {
            let grid = SpatialGrid::new(&spec.grid)?;
            let kernel = KernelOffsets::centered(&spec.kernel)?;
            Some(Arc::new(ConvGeom::new(&grid, &kernel, spec.padding)?))
        } else {
            None
        };
        Ok(Model {
            spec: spec.clone(),
            params: b.params,
            seed,
            q,
            geom,
        })
    }

    pub fn depth(&self) -> usize {
        self.spec.effective_depth()
    }

    pub fn geom(&self) -> Option<&Arc<ConvGeom>> {
        self.geom.as_ref()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn index_of(&self, unit: usize, role: Role) -> Option<usize> {
        self.params
            .iter()
            .position(|p| p.key == ParamKey { unit, role })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    key: p.key,
                    value: p.value.cast(),
                    variance: p.variance,
                })
                .collect(),
            seed: self.seed,
            q: self.q,
            geom: self.geom.clone(),
        }
    }

    pub fn check_input(&self, x: &Tensor<F>) -> Result<usize> {
        let want = self.spec.input_shape();
        if x.shape.len() != want.len() + 1 || x.shape[1..] != want[..] || x.shape[0] == 0 {
            return Err(Error::Shape(format!(
                "input shape {:?}, expected [B, {want:?}]",
                x.shape
            )));
        }
        Ok(x.shape[0])
    }

    /// Records the forward pass of a batch `x` of shape `[B, input_shape..]`.
    pub fn record(&self, x: &Tensor<F>) -> Result<Forward<F>> {
        let batch = self.check_input(x)?;
        let s = &self.spec;
        let mut t = Tape::new();
        let pv: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| t.param(i, p.value.clone()))
            .collect();
        let w = |u: usize, r: Role| pv[self.index_of(u, r).expect("parameter present")];
        let input = t.input(x.clone());
        let act = s.activation;
        let l = s.effective_depth();
        let mut units = Vec::with_capacity(l);
        let layer = |t: &mut Tape<F>, h: Var, wv: Var| -> Var {
            let a = t.act(h, act);
            match &self.geom {
                Some(g) => t.conv(a, wv, g.clone()),
                None => t.linear(a, wv),
            }
        };
        let mut h = input;
        match s.family {
            Family::Mlp | Family::Cnn1d | Family::Cnn2d | Family::ResNet => {
                let plain = if s.family == Family::ResNet {
                    s.plain_units
                } else {
                    l
                };
                let role = if s.is_conv() { Role::Conv } else { Role::Dense };
                for u in 1..=plain {
                    h = layer(&mut t, h, w(u, role));
                    units.push(h);
                }
                for u in plain + 1..=l {
                    let f = layer(&mut t, h, w(u, Role::Branch));
                    h = t.add(h, f);
                    units.push(h);
                }
            }
            Family::Transformer => {
                let (n, d) = (s.tokens, s.width);
                let x2 = t.reshape(input, &[batch * n, s.input_dim]);
                h = t.linear(x2, w(s.plain_units, Role::Embed));
                if s.plain_units == 1 {
                    units.push(h);
                }
                let eps = F::c(s.ln_eps);
                for u in s.plain_units + 1..=l {
                    let branch = |t: &mut Tape<F>, y: Var| self.branch_var(t, &pv, u, y, batch);
                    h = match s.norm_placement {
                        NormPlacement::Pre => {
                            let y = t.layer_norm(h, w(u, Role::LnGamma), w(u, Role::LnBeta), eps);
                            let f = branch(&mut t, y);
                            t.add(h, f)
                        }
                        NormPlacement::Post => {
                            let f = branch(&mut t, h);
                            let sum = t.add(h, f);
                            t.layer_norm(sum, w(u, Role::LnGamma), w(u, Role::LnBeta), eps)
                        }
                        NormPlacement::None => {
                            let f = branch(&mut t, h);
                            t.add(h, f)
                        }
                    };
                    units.push(h);
                }
                let pooled = t.mean_mid(h, [batch, n, d]);
                let output = t.linear(pooled, w(l + 1, Role::Head));
                return self.finish(t, input, units, output, batch);
            }
        }
        let a = t.act(h, act);
        let feat = if s.is_conv() {
            t.mean_mid(a, [batch, s.spatial_size(), s.channels])
        } else {
            a
        };
        let output = t.linear(feat, w(l + 1, Role::Head));
        self.finish(t, input, units, output, batch)
    }

    /// Residual branch of transformer sub-unit `u` applied to `y` (`[B*N, d]`).
    fn branch_var(&self, t: &mut Tape<F>, pv: &[Var], u: usize, y: Var, batch: usize) -> Var {
        let s = &self.spec;
        let w = |r: Role| pv[self.index_of(u, r).expect("parameter present")];
        if (u - s.plain_units) % 2 == 1 {
            let q = t.linear(y, w(Role::Query));
            let k = t.linear(y, w(Role::Key));
            let v = t.linear(y, w(Role::Value));
            let o = t.attention(q, k, v, batch, s.tokens, s.heads);
            t.linear(o, w(Role::Out))
        } else {
            let a = t.linear(y, w(Role::FfnIn));
            let a = t.act(a, s.activation);
            t.linear(a, w(Role::FfnOut))
        }
    }

    /// Value of the residual branch of transformer unit `u` at stream state `h`
    /// (`[B*N, d]`) and its input-space directional derivatives; the branch
    /// includes the LayerNorm under pre-norm placement.
    pub fn branch_jvp(
        &self,
        u: usize,
        h: &Tensor<F>,
        dirs: &[&Tensor<F>],
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let s = &self.spec;
        if s.family != Family::Transformer || u <= s.plain_units || u > s.effective_depth() {
            return Err(Error::Precondition(format!(
                "unit {u} is not a transformer branch"
            )));
        }
        if h.shape.len() != 2 || h.shape[1] != s.width || h.shape[0] % s.tokens != 0 {
            return Err(Error::Shape(format!(
                "stream state {:?} is not [B*N, {}]",
                h.shape, s.width
            )));
        }
        let batch = h.shape[0] / s.tokens;
        let mut t = Tape::new();
        let pv: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| t.param(i, p.value.clone()))
            .collect();
        let x = t.input(h.clone());
        let y = if s.norm_placement == NormPlacement::Pre {
            let w = |r: Role| pv[self.index_of(u, r).expect("parameter present")];
            t.layer_norm(x, w(Role::LnGamma), w(Role::LnBeta), F::c(s.ln_eps))
        } else {
            x
        };
        let f = self.branch_var(&mut t, &pv, u, y, batch);
        let out = t.value(f).clone();
        let tans = dirs
            .iter()
            .map(|d| {
                if d.shape != h.shape {
                    return Err(Error::Shape("direction does not match stream state".into()));
                }
                let j = t.jvp(None, &[(x, d)]);
                Ok(j[f.0].clone().unwrap_or_else(|| out.zeros_like()))
            })
            .collect::<Result<_>>()?;
        Ok((out, tans))
    }

    fn finish(
        &self,
        tape: Tape<F>,
        input: Var,
        units: Vec<Var>,
        output: Var,
        batch: usize,
    ) -> Result<Forward<F>> {
        for (i, &u) in units.iter().chain(std::iter::once(&output)).enumerate() {
            if !tape.value(u).all_finite() {
                return Err(Error::Numeric {
                    depth: i + 1,
                    seed: Some(self.seed),
                });
            }
        }
        Ok(Forward {
            tape,
            input,
            units,
            output,
            batch,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<ActivationTrace<F>> {
        Ok(self.record(x)?.trace(&self.spec))
    }
}

pub fn build_model<F: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Model<F>> {
    Model::build(spec, seed)
}

pub fn forward<F: Scalar>(model: &Model<F>, x: &Tensor<F>) -> Result<ActivationTrace<F>> {
    model.forward(x)
}
