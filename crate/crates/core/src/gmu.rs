//! Gated memory unit: per-position interpolation between the token state and a
//! knowledge-conditioned candidate.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::{init, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const PREFIX: &str = "gmu";

/// Gate weights. `w_r` produces `d_enc` outputs so that `r ⊙ k_fused` is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct GmuParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub b_z: Option<Tensor>,
    pub b_r: Option<Tensor>,
    pub b_h: Option<Tensor>,
}

/// Gate activations of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    /// `[T × d]`
    pub z: Tensor,
    /// `[T × d_enc]`
    pub r: Tensor,
    /// Mean of `z` at each position.
    pub step_mean: Vec<Real>,
}

impl GateTrace {
    fn new(z: Tensor, r: Tensor) -> Self {
        let step_mean = (0..z.rows()).map(|t| z.row(t).iter().sum::<Real>() / z.cols() as Real).collect();
        Self { z, r, step_mean }
    }

    pub fn mean_activation(&self) -> Real {
        self.z.data().iter().sum::<Real>() / self.z.len() as Real
    }
}

impl GmuParams {
    pub fn init(d: usize, d_enc: usize, bias: bool, seed: u64) -> Self {
        let fan = d + d_enc;
        let mk = |name: &str, shape: &[usize]| init::linear(shape, fan, seed, &format!("{PREFIX}.{name}"));
        Self {
            w_z: mk("w_z", &[d, fan]),
            w_r: mk("w_r", &[d_enc, fan]),
            w_h: mk("w_h", &[d, fan]),
            b_z: bias.then(|| mk("b_z", &[d])),
            b_r: bias.then(|| mk("b_r", &[d_enc])),
            b_h: bias.then(|| mk("b_h", &[d])),
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{PREFIX}.{n}")).cloned();
        let opt = |n: &str| store.get(&format!("{PREFIX}.{n}")).ok().cloned();
        Ok(Self { w_z: get("w_z")?, w_r: get("w_r")?, w_h: get("w_h")?, b_z: opt("b_z"), b_r: opt("b_r"), b_h: opt("b_h") })
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        let mut put = |n: &str, t: &Tensor| store.insert(format!("{PREFIX}.{n}"), t.clone());
        put("w_z", &self.w_z);
        put("w_r", &self.w_r);
        put("w_h", &self.w_h);
        for (n, b) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_h", &self.b_h)] {
            if let Some(b) = b {
                put(n, b);
            }
        }
    }

    pub fn width(&self) -> usize {
        self.w_z.rows()
    }

    pub fn knowledge_width(&self) -> usize {
        self.w_r.rows()
    }

    fn check(&self) -> Result<()> {
        let (d, e) = (self.width(), self.knowledge_width());
        let ok = self.w_z.shape() == [d, d + e]
            && self.w_r.shape() == [e, d + e]
            && self.w_h.shape() == [d, d + e]
            && self.b_z.as_ref().map_or(true, |b| b.shape() == [d])
            && self.b_r.as_ref().map_or(true, |b| b.shape() == [e])
            && self.b_h.as_ref().map_or(true, |b| b.shape() == [d]);
        if ok {
            Ok(())
        } else {
            Err(dim_err("inconsistent gate weight shapes"))
        }
    }
}

/// Tape handles of the gate weights.
pub(crate) struct GmuVars {
    w_z: Var,
    w_r: Var,
    w_h: Var,
    b_z: Option<Var>,
    b_r: Option<Var>,
    b_h: Option<Var>,
}

impl GmuVars {
    pub(crate) fn from_bound(p: &Bound) -> Result<Self> {
        let get = |n: &str| p.get(&format!("{PREFIX}.{n}"));
        let opt = |n: &str| p.opt(&format!("{PREFIX}.{n}"));
        Ok(Self { w_z: get("w_z")?, w_r: get("w_r")?, w_h: get("w_h")?, b_z: opt("b_z"), b_r: opt("b_r"), b_h: opt("b_h") })
    }

    fn constants(tape: &mut Tape, params: &GmuParams) -> Self {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        Self {
            w_z: c(&params.w_z),
            w_r: c(&params.w_r),
            w_h: c(&params.w_h),
            b_z: params.b_z.as_ref().map(&mut c),
            b_r: params.b_r.as_ref().map(&mut c),
            b_h: params.b_h.as_ref().map(&mut c),
        }
    }
}

/// Applies the unit to every row of `x[T × d]`. Returns `(h, z, r)`.
pub(crate) fn gmu_var(tape: &mut Tape, g: &GmuVars, x: Var, k_fused: Var) -> Result<(Var, Var, Var)> {
    let t = tape.value(x).rows();
    if tape.value(x).shape().len() != 2 {
        return Err(dim_err(format!("gate input must be a matrix, got {:?}", tape.value(x).shape())));
    }
    let k = tape.broadcast_rows(k_fused, t)?;
    let xk = tape.concat_cols(x, k)?;
    let z = crate::nn::dense(tape, xk, g.w_z, g.b_z)?;
    let z = tape.sigmoid(z);
    let r = crate::nn::dense(tape, xk, g.w_r, g.b_r)?;
    let r = tape.sigmoid(r);
    let rk = tape.mul(r, k)?;
    let xrk = tape.concat_cols(x, rk)?;
    let cand = crate::nn::dense(tape, xrk, g.w_h, g.b_h)?;
    let cand = tape.tanh(cand);
    // (1 − z) ⊙ x + z ⊙ h̃, written as x + z ⊙ (h̃ − x)
    let diff = tape.sub(cand, x)?;
    let step = tape.mul(z, diff)?;
    let h = tape.add(x, step)?;
    Ok((h, z, r))
}

/// `h = (1 − z) ⊙ x + z ⊙ h̃` for every row of `x[T × d]`.
pub fn gmu_sequence(x: &Tensor, k_fused: &Tensor, params: &GmuParams) -> Result<(Tensor, GateTrace)> {
    params.check()?;
    if x.shape().len() != 2 || x.cols() != params.width() {
        return Err(dim_err(format!("input {:?} does not match gate width {}", x.shape(), params.width())));
    }
    if k_fused.shape() != [params.knowledge_width()] {
        return Err(dim_err(format!(
            "knowledge {:?} does not match width {}",
            k_fused.shape(),
            params.knowledge_width()
        )));
    }
    let mut tape = Tape::new();
    let g = GmuVars::constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k_fused.clone());
    let (h, z, r) = gmu_var(&mut tape, &g, xv, kv)?;
    Ok((tape.value(h).clone(), GateTrace::new(tape.value(z).clone(), tape.value(r).clone())))
}

/// Single-position form. Returns `(h_t, z_t, r_t)`.
pub fn gmu_step(x_t: &Tensor, k_fused: &Tensor, params: &GmuParams) -> Result<(Tensor, Tensor, Tensor)> {
    let x = x_t.clone().reshape(vec![1, x_t.len()])?;
    let (h, trace) = gmu_sequence(&x, k_fused, params)?;
    let d = h.len();
    let e = trace.r.len();
    Ok((h.reshape(vec![d])?, trace.z.reshape(vec![d])?, trace.r.reshape(vec![e])?))
}
