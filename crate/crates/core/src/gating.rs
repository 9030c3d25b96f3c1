//! Token-aware routing over the experts with frequency-aware balancing.
//!
//! Each expert owns a query vector. Tokens pass through a shared MLP; the
//! cosine between every token and every query is softmaxed over tokens into an
//! attention map, and the attention-weighted cosines give one score per
//! expert. The routing softmax is damped by a softmax over negated usage
//! frequencies and renormalized.

use moediff_tensor::{Binder, ParamId, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::nn::{Init, Linear};

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_USAGE_DECAY: f64 = 0.99;

/// Shared token MLP plus one query per expert.
pub struct GateNetwork {
    pub experts: usize,
    fc1: Linear,
    fc2: Linear,
    pub queries: ParamId,
}

/// Routing result for a batch.
#[derive(Clone, Debug)]
pub struct GateOutput<'t> {
    /// `[B, K]` routing probabilities.
    pub g: Var<'t>,
    /// `[B, N, K]` attention of each expert over the tokens.
    pub attention: Var<'t>,
    /// `[B, K]` attention-weighted scores.
    pub scores: Var<'t>,
}

/// Exponentially smoothed expert usage frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageState {
    pub c: Vec<f64>,
    pub decay: f64,
    pub gamma: f64,
}

impl UsageState {
    /// Uniform start.
    pub fn new(experts: usize) -> Self {
        Self { c: vec![1.0 / experts as f64; experts], decay: DEFAULT_USAGE_DECAY, gamma: DEFAULT_GAMMA }
    }

    /// `c ← decay·c + (1 − decay)·mean_b G[b]`.
    pub fn update(&mut self, g_batch: &Tensor) -> Result<()> {
        let k = self.c.len();
        if g_batch.ndim() != 2 || g_batch.shape()[1] != k || g_batch.shape()[0] == 0 {
            return Err(MoeError::Contract(format!("usage update with G of shape {:?}", g_batch.shape())));
        }
        let b = g_batch.shape()[0] as f64;
        for (i, c) in self.c.iter_mut().enumerate() {
            let mean = (0..g_batch.shape()[0]).map(|r| g_batch.data()[r * k + i]).sum::<f64>() / b;
            *c = self.decay * *c + (1.0 - self.decay) * mean;
        }
        Ok(())
    }

    /// `softmax(−γ·c)`.
    pub fn balance_factor(&self) -> Tensor {
        let neg = Tensor::new([self.c.len()], self.c.iter().map(|c| -self.gamma * c).collect())
            .expect("1-D usage");
        moediff_tensor::softmax_last(&neg).expect("non-empty usage")
    }
}

/// `[.., N, K]` cosines → attention softmaxed over the token axis.
pub fn attention_var<'t>(cos: Var<'t>) -> Result<Var<'t>> {
    let nd = cos.shape().len();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 2, nd - 1);
    Ok(cos.permute(&perm)?.softmax()?.permute(&perm)?)
}

/// `Score_i = Σ_n Att[n, i]·cos[n, i]` over `[.., N, K]` inputs.
pub fn scores_var<'t>(att: Var<'t>, cos: Var<'t>) -> Result<Var<'t>> {
    let nd = cos.shape().len();
    Ok(att.mul(&cos)?.sum_axis(nd - 2)?)
}

/// `G = softmax(Score) ⊙ softmax(−γc)`, renormalized to sum to one, over `[.., K]`.
pub fn route_var<'t>(scores: Var<'t>, usage: &UsageState) -> Result<Var<'t>> {
    let shape = scores.shape();
    let k = *shape.last().expect("scores have an expert axis");
    if k != usage.c.len() || k < 2 {
        return Err(MoeError::Contract(format!("{k} scores for {} usage entries", usage.c.len())));
    }
    let balance = scores.tape().constant(usage.balance_factor());
    let raw = scores.softmax()?.mul(&balance)?;
    let mut total_shape = shape.clone();
    *total_shape.last_mut().expect("k") = 1;
    let total = raw.sum_axis(shape.len() - 1)?.reshape(total_shape)?;
    debug_assert!(total.value().data().iter().all(|&t| t > 0.0));
    Ok(raw.div(&total)?)
}

fn eval(f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>) -> Result<Tensor> {
    let tape = Tape::inference();
    Ok((*f(&tape)?.value()).clone())
}

/// Attention over tokens for a `[N, K]` cosine matrix; each column sums to one.
pub fn token_attention(cos: &Tensor) -> Result<Tensor> {
    eval(|t| attention_var(t.constant(cos.clone())))
}

/// Scores `[K]` from attention and cosines, both `[N, K]`.
pub fn expert_scores(att: &Tensor, cos: &Tensor) -> Result<Tensor> {
    eval(|t| scores_var(t.constant(att.clone()), t.constant(cos.clone())))
}

/// Routing probabilities `[K]` from scores `[K]`.
pub fn route(scores: &Tensor, usage: &UsageState) -> Result<Tensor> {
    eval(|t| route_var(t.constant(scores.clone()), usage))
}

/// Uniform gates during the first `warmup_epochs` epochs (half-open), otherwise unchanged.
pub fn warmup_gate(epoch: usize, warmup_epochs: usize, g: &Tensor) -> Tensor {
    if epoch < warmup_epochs {
        let k = *g.shape().last().expect("gate has an expert axis");
        Tensor::full(g.shape().to_vec(), 1.0 / k as f64)
    } else {
        g.clone()
    }
}

impl GateNetwork {
    pub fn new(init: &mut Init, dim: usize, experts: usize) -> Self {
        let mut p = init.sub("gate");
        Self {
            experts,
            fc1: Linear::new(&mut p, "fc1", dim, 2 * dim),
            fc2: Linear::new(&mut p, "fc2", 2 * dim, dim),
            queries: p.uniform("queries", &[experts, dim], 1.0),
        }
    }

    /// Tokens `[B, N, d]` → cosine matrix `[B, N, K]` between transformed tokens and queries.
    pub fn cosines<'t>(&self, bd: &Binder<'t, '_>, z_c: Var<'t>) -> Result<Var<'t>> {
        let shape = z_c.shape();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let h = self.fc2.forward(bd, self.fc1.forward(bd, z_c)?.silu()?)?;
        let cos = h.reshape([b * n, d])?.cosine_rows(&bd.var(self.queries))?;
        Ok(cos.reshape([b, n, self.experts])?)
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, z_c: Var<'t>, usage: &UsageState) -> Result<GateOutput<'t>> {
        let cos = self.cosines(bd, z_c)?;
        let attention = attention_var(cos)?;
        let scores = scores_var(attention, cos)?;
        let g = route_var(scores, usage)?;
        Ok(GateOutput { g, attention, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn two_token_attention_closed_form() {
        let cos = Tensor::new([2, 1], vec![0.0, 2f64.ln()]).unwrap();
        let att = token_attention(&cos).unwrap();
        assert!((att.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((att.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scores_of_opposite_cosines_is_tanh_one() {
        let cos = Tensor::new([2, 1], vec![1.0, -1.0]).unwrap();
        let att = token_attention(&cos).unwrap();
        let s = expert_scores(&att, &cos).unwrap();
        assert!((s.data()[0] - 1f64.tanh()).abs() < 1e-12);
        assert!((s.data()[0] - 0.76159).abs() < 1e-5);
    }

    #[test]
    fn equal_scores_with_skewed_usage() {
        let usage = UsageState { c: vec![1.0, 0.0, 0.0], ..UsageState::new(3) };
        let g = route(&t(&[0.3, 0.3, 0.3]), &usage).unwrap();
        let z = (-0.1f64).exp() + 2.0;
        assert!((g.data()[0] - (-0.1f64).exp() / z).abs() < 1e-12);
        assert!((g.data()[1] - 1.0 / z).abs() < 1e-12);
        assert!((g.data()[2] - 1.0 / z).abs() < 1e-12);
    }

    #[test]
    fn balanced_usage_reduces_to_softmax() {
        let s = t(&[0.1, -0.4, 0.7]);
        let g = route(&s, &UsageState::new(3)).unwrap();
        let sm = moediff_tensor::softmax_last(&s).unwrap();
        assert!(g.max_abs_diff(&sm).unwrap() < 1e-15);
    }

    #[test]
    fn usage_fixed_point_and_convergence() {
        let mut u = UsageState::new(3);
        let uniform = Tensor::full([4, 3], 1.0 / 3.0);
        u.update(&uniform).unwrap();
        assert!(u.c.iter().all(|c| (c - 1.0 / 3.0).abs() < 1e-15));

        let mut u = UsageState { c: vec![0.0, 0.0, 1.0], ..UsageState::new(3) };
        let onehot = Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        for n in 1..=50 {
            u.update(&onehot).unwrap();
            assert!((u.c[2] - 0.99f64.powi(n)).abs() < 1e-12);
            assert!((u.c[0] - (1.0 - 0.99f64.powi(n))).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_is_half_open() {
        let g = Tensor::new([1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(warmup_gate(0, 100, &g).data(), &[1.0 / 3.0; 3]);
        assert_eq!(warmup_gate(99, 100, &g).data(), &[1.0 / 3.0; 3]);
        assert_eq!(warmup_gate(100, 100, &g), g);
    }
}
