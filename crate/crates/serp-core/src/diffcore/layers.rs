//! Layer building blocks: each layer owns parameter slots in a [`ParamSet`]
//! and binds them into a fresh graph per forward call.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::params::ParamSet;
use crate::diffcore::real::Real;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, sqrt(2 / fan_in)) — ReLU chains.
    He,
    /// N(0, std) — transformer weights.
    Normal(f64),
    Zero,
}

/// Normal samples are drawn in f64 and cast, so f32 and f64 models
/// initialized from the same seed agree.
pub fn sample_normal<R: Real>(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data)
}

fn init_tensor<R: Real>(rng: &mut Rng, shape: Vec<usize>, init: Init, fan_in: usize) -> Tensor<R> {
    match init {
        Init::He => sample_normal(rng, shape, (2.0 / fan_in as f64).sqrt()),
        Init::Normal(std) => sample_normal(rng, shape, std),
        Init::Zero => Tensor::zeros(shape),
    }
}

// ── Linear ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            init_tensor(rng, vec![in_dim, out_dim], init, in_dim),
        );
        let b = ps.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::shape(format!(
                "linear: input width {} vs expected {}",
                g.value(x).cols(),
                self.in_dim
            )));
        }
        let w = g.param(self.w, &ps.get(self.w).value);
        let b = g.param(self.b, &ps.get(self.b).value);
        g.linear(x, w, b)
    }
}

// ── LayerNorm ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Real>(ps: &mut ParamSet<R>, name: &str, dim: usize) -> Self {
        let gamma = ps.register(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![R::ONE; dim]),
        );
        let beta = ps.register(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma, &ps.get(self.gamma).value);
        let beta = g.param(self.beta, &ps.get(self.beta).value);
        g.layer_norm_rows(x, gamma, beta, R::from_f64(LN_EPS))
    }
}

// ── Two-layer MLP with GELU ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, init, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

// ── Shared per-point MLP with max pooling ────────────────────────────

/// A stack of per-row Linear → LayerNorm → ReLU blocks. Applied pointwise,
/// so it commutes with row permutations; pooled through `max_segments` it
/// yields a permutation-invariant set feature.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub blocks: Vec<(Linear, LayerNorm)>,
}

impl SharedMlp {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut Rng,
    ) -> Self {
        assert!(!widths.is_empty(), "shared MLP needs at least one width");
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let lin = Linear::new(ps, &format!("{name}.fc{i}"), prev, w, Init::He, rng);
            let ln = LayerNorm::new(ps, &format!("{name}.ln{i}"), w);
            blocks.push((lin, ln));
            prev = w;
        }
        SharedMlp { blocks }
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().unwrap().0.out_dim
    }

    /// Per-row features after every block, in order. The caller picks the
    /// intermediate it needs (e.g. PointNet local features) plus the last.
    pub fn forward_all<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamSet<R>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (lin, ln) in &self.blocks {
            h = lin.forward(g, ps, h)?;
            h = ln.forward(g, ps, h)?;
            h = g.relu(h);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Max-pooled set feature per segment of `seg_len` rows:
    /// [segments·seg_len, in] → [segments, out].
    pub fn pooled<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamSet<R>,
        x: Var,
        seg_len: usize,
    ) -> Result<Var> {
        if g.value(x).rows() == 0 {
            return Err(Error::invalid_argument("shared MLP on empty point set"));
        }
        let feats = self.forward_all(g, ps, x)?;
        g.max_segments(*feats.last().unwrap(), seg_len)
    }
}

// ── Pre-norm transformer block ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub dim: usize,
    pub heads: usize,
    ln1: LayerNorm,
    ln2: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
}

impl AttentionBlock {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let init = Init::Normal(0.02);
        Ok(AttentionBlock {
            dim,
            heads,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            wq: Linear::new(ps, &format!("{name}.attn.q"), dim, dim, init, rng),
            wk: Linear::new(ps, &format!("{name}.attn.k"), dim, dim, init, rng),
            wv: Linear::new(ps, &format!("{name}.attn.v"), dim, dim, init, rng),
            wo: Linear::new(ps, &format!("{name}.attn.o"), dim, dim, init, rng),
            mlp_fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), dim, 4 * dim, init, rng),
            mlp_fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), 4 * dim, dim, init, rng),
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        Ok(self.forward_probed(g, ps, x)?.0)
    }

    /// Forward pass that also returns the per-head attention matrices,
    /// so tests can verify every token attends to every token.
    pub fn forward_probed<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamSet<R>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(x).cols() != self.dim {
            return Err(Error::shape(format!(
                "attention block: token width {} vs dim {}",
                g.value(x).cols(),
                self.dim
            )));
        }
        let dh = self.dim / self.heads;
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());

        // pre-norm self-attention with residual
        let h = self.ln1.forward(g, ps, x)?;
        let q = self.wq.forward(g, ps, h)?;
        let k = self.wk.forward(g, ps, h)?;
        let v = self.wv.forward(g, ps, h)?;
        let mut attn_maps = Vec::with_capacity(self.heads);
        let mut head_outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            attn_maps.push(attn);
            head_outs.push(g.matmul(attn, vh)?);
        }
        let mut concat = head_outs[0];
        for h_out in &head_outs[1..] {
            concat = g.concat_cols(concat, *h_out)?;
        }
        let proj = self.wo.forward(g, ps, concat)?;
        let x1 = g.add(x, proj)?;

        // pre-norm MLP with residual
        let m = self.ln2.forward(g, ps, x1)?;
        let m = self.mlp_fc1.forward(g, ps, m)?;
        let m = g.gelu(m);
        let m = self.mlp_fc2.forward(g, ps, m)?;
        let x2 = g.add(x1, m)?;
        Ok((x2, attn_maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, tags};

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f32> {
        sample_normal(rng, shape, 1.0)
    }

    #[test]
    fn shared_mlp_is_permutation_invariant_bitwise() {
        let mut rng = rng_for(11, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        let mlp = SharedMlp::new(&mut ps, "smlp", 3, &[8, 16], &mut rng);

        let pts = rand_tensor(&mut rng, vec![10, 3]);
        let mut g = Graph::new();
        let x = g.input(pts.clone());
        let pooled = mlp.pooled(&mut g, &ps, x, 10).unwrap();
        let base = g.value(pooled).data().to_vec();

        // reverse the rows
        let mut rev_rows: Vec<Vec<f32>> = (0..10).rev().map(|r| pts.row(r).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rev_rows);
        rev_rows.clear();
        let mut g2 = Graph::new();
        let x2 = g2.input(shuffled);
        let pooled2 = mlp.pooled(&mut g2, &ps, x2, 10).unwrap();
        assert_eq!(base, g2.value(pooled2).data());
    }

    #[test]
    fn shared_mlp_single_row_max_is_identity() {
        let mut rng = rng_for(12, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        let mlp = SharedMlp::new(&mut ps, "smlp", 3, &[8], &mut rng);
        let pts = rand_tensor(&mut rng, vec![1, 3]);
        let mut g = Graph::new();
        let x = g.input(pts);
        let rows = mlp.forward_all(&mut g, &ps, x).unwrap();
        let pooled = g.max_segments(*rows.last().unwrap(), 1).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(*rows.last().unwrap()).data());
    }

    #[test]
    fn attention_permutation_equivariance() {
        let mut rng = rng_for(13, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        let block = AttentionBlock::new(&mut ps, "blk", 8, 2, &mut rng).unwrap();

        let tokens = rand_tensor(&mut rng, vec![4, 8]);
        let mut g = Graph::new();
        let x = g.input(tokens.clone());
        let y = block.forward(&mut g, &ps, x).unwrap();
        let base = g.value(y).clone();

        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&r| tokens.row(r).to_vec()).collect::<Vec<_>>());
        let mut g2 = Graph::new();
        let x2 = g2.input(permuted);
        let y2 = block.forward(&mut g2, &ps, x2).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let d = (g2.value(y2)[(i, j)] - base[(src, j)]).abs();
                assert!(d < 1e-5, "row {i} col {j}: diff {d}");
            }
        }
    }

    #[test]
    fn attention_single_token_weight_is_one() {
        let mut rng = rng_for(14, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        let block = AttentionBlock::new(&mut ps, "blk", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, vec![1, 8]));
        let (y, maps) = block.forward_probed(&mut g, &ps, x).unwrap();
        assert!(g.value(y).all_finite());
        for m in maps {
            assert_eq!(g.value(m).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = rng_for(15, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        assert!(matches!(
            AttentionBlock::new(&mut ps, "blk", 10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_block_keeps_grads_finite_at_large_inputs() {
        let mut rng = rng_for(16, tags::INIT, 0);
        let mut ps = ParamSet::<f32>::new();
        let block = AttentionBlock::new(&mut ps, "blk", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut t = rand_tensor(&mut rng, vec![4, 8]);
        for v in t.data_mut() {
            *v = v.clamp(-10.0, 10.0) * 10.0 / 3.0; // magnitudes up to ~10
        }
        let x = g.input(t);
        let y = block.forward(&mut g, &ps, x).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss);
        let store = &mut ps.zero_grads();
        g.accumulate_param_grads(store);
        for (slot, buf) in store.iter().enumerate() {
            assert!(
                buf.iter().all(|v| v.is_finite()),
                "non-finite grad in {}",
                ps.get(slot).name
            );
        }
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
