//! Randomized finite-difference checks of every tape primitive.
//!
//! Each case draws random shapes and inputs, reduces the primitive's output to
//! a scalar with a fixed random projection, and compares the tape gradient to
//! a central difference. The error of one case is
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over all inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{finite_difference_gradient, Gradients, Graph, ParamId, Tensor, Var};
use crate::math;
use crate::rng::SeededRng;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Matmul,
    MatmulNt,
    Add,
    AddRow,
    Mul,
    Scale,
    Sum,
    Gelu,
    Tanh,
    RowSoftmax,
    LayerNorm,
    EmbeddingGather,
    CausalAttentionScores,
    HeadMix,
    CrossEntropy,
    MeanRowEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 16] = [
        Primitive::Matmul,
        Primitive::MatmulNt,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::Gelu,
        Primitive::Tanh,
        Primitive::RowSoftmax,
        Primitive::LayerNorm,
        Primitive::EmbeddingGather,
        Primitive::CausalAttentionScores,
        Primitive::HeadMix,
        Primitive::CrossEntropy,
        Primitive::MeanRowEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::MatmulNt => "matmul_nt",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::EmbeddingGather => "embedding_gather",
            Primitive::CausalAttentionScores => "causal_attention_scores",
            Primitive::HeadMix => "head_mix",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::MeanRowEntropy => "mean_row_entropy",
        }
    }
}

/// Everything random about one case apart from the differentiated inputs.
struct Case {
    inputs: Vec<(ParamId, Tensor)>,
    /// Output projection; unused when the primitive is already scalar.
    projection: Option<Tensor>,
    ids: Vec<usize>,
    targets: Vec<Option<usize>>,
    heads: usize,
    factor: f64,
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn dims(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn make_case(p: Primitive, rng: &mut SeededRng) -> Case {
    let (r, c, k) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 4));
    let mut case = Case { inputs: Vec::new(), projection: None, ids: Vec::new(), targets: Vec::new(), heads: 1, factor: 1.0 };
    let add = |case: &mut Case, shape: &[usize], rng: &mut SeededRng| {
        let id = ParamId(case.inputs.len());
        case.inputs.push((id, random(shape, rng)));
    };
    match p {
        Primitive::Matmul => {
            add(&mut case, &[r, k], rng);
            add(&mut case, &[k, c], rng);
        }
        Primitive::MatmulNt => {
            add(&mut case, &[r, k], rng);
            add(&mut case, &[c, k], rng);
        }
        Primitive::Add | Primitive::Mul => {
            add(&mut case, &[r, c], rng);
            add(&mut case, &[r, c], rng);
        }
        Primitive::AddRow => {
            add(&mut case, &[r, c], rng);
            add(&mut case, &[c], rng);
        }
        Primitive::Scale => {
            add(&mut case, &[r, c], rng);
            case.factor = 3.0 * rng.normal();
        }
        Primitive::Sum | Primitive::Gelu | Primitive::Tanh | Primitive::RowSoftmax => add(&mut case, &[r, c], rng),
        Primitive::LayerNorm => {
            let c = c.max(2);
            add(&mut case, &[r, c], rng);
            add(&mut case, &[c], rng);
            add(&mut case, &[c], rng);
        }
        Primitive::EmbeddingGather => {
            let vocab = dims(rng, 2, 6);
            add(&mut case, &[vocab, c], rng);
            // repeats exercise gradient accumulation into one row
            case.ids = (0..dims(rng, 1, 6)).map(|_| rng.below(vocab)).collect();
        }
        Primitive::CausalAttentionScores | Primitive::HeadMix => {
            let heads = dims(rng, 1, 3);
            let d = heads * dims(rng, 1, 3);
            let t = dims(rng, 1, 4);
            case.heads = heads;
            if p == Primitive::CausalAttentionScores {
                add(&mut case, &[t, d], rng);
                add(&mut case, &[t, d], rng);
            } else {
                add(&mut case, &[heads * t, t], rng);
                add(&mut case, &[t, d], rng);
            }
        }
        Primitive::CrossEntropy => {
            let vocab = dims(rng, 2, 6);
            add(&mut case, &[r, vocab], rng);
            case.targets = (0..r).map(|i| if i == 0 || rng.uniform() < 0.7 { Some(rng.below(vocab)) } else { None }).collect();
        }
        Primitive::MeanRowEntropy => {
            add(&mut case, &[r, dims(rng, 2, 6)], rng);
            case.ids = (0..r).filter(|&i| i == 0 || rng.uniform() < 0.7).collect();
        }
    }
    case
}

/// Returns the graph, the scalar loss and the primitive's own output.
fn forward(p: Primitive, case: &Case, inputs: &[(ParamId, Tensor)]) -> Result<(Graph, Var, Var)> {
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|(id, t)| g.param(*id, t.clone())).collect();
    let out = match p {
        Primitive::Matmul => g.matmul(v[0], v[1])?,
        Primitive::MatmulNt => g.matmul_nt(v[0], v[1])?,
        Primitive::Add => g.add(v[0], v[1])?,
        Primitive::AddRow => g.add_row(v[0], v[1])?,
        Primitive::Mul => g.mul(v[0], v[1])?,
        Primitive::Scale => g.scale(v[0], case.factor),
        Primitive::Sum => g.sum(v[0]),
        Primitive::Gelu => g.gelu(v[0]),
        Primitive::Tanh => g.tanh(v[0]),
        Primitive::RowSoftmax => g.row_softmax(v[0]),
        Primitive::LayerNorm => g.layer_norm(v[0], v[1], v[2])?,
        Primitive::EmbeddingGather => g.embedding_gather(v[0], &case.ids)?,
        Primitive::CausalAttentionScores => {
            // softmax keeps the masked slots' huge constants out of the projection
            let s = g.causal_attention_scores(v[0], v[1], case.heads)?;
            g.row_softmax(s)
        }
        Primitive::HeadMix => g.head_mix(v[0], v[1], case.heads)?,
        Primitive::CrossEntropy => {
            let l = g.cross_entropy(v[0], &case.targets)?;
            return Ok((g, l, l));
        }
        Primitive::MeanRowEntropy => {
            let l = g.mean_row_entropy(v[0], &case.ids)?;
            return Ok((g, l, l));
        }
    };
    let loss = match &case.projection {
        Some(r) if r.shape() == g.value(out).shape() => {
            let rv = g.constant(r.clone());
            let m = g.mul(out, rv)?;
            g.sum(m)
        }
        _ => g.sum(out),
    };
    Ok((g, loss, out))
}

fn flat_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (id, n) in numeric.iter() {
        let a = analytic.get(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n.len()]);
        for (x, y) in a.iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    math::sqrt(diff) / math::sqrt(na).max(math::sqrt(nn)).max(1e-8)
}

/// Relative gradient error of one random case of `p`.
pub fn check_case(p: Primitive, seed: u64, epsilon: f64) -> Result<f64> {
    let mut rng = SeededRng::derived(seed, p as u64);
    let mut case = make_case(p, &mut rng);
    let (g, _, out) = forward(p, &case, &case.inputs)?;
    case.projection = Some(random(g.value(out).shape(), &mut rng));
    let (g, loss, _) = forward(p, &case, &case.inputs)?;
    let analytic = g.backward(loss)?;
    let numeric = finite_difference_gradient(
        |inputs| {
            let (g, l, _) = forward(p, &case, inputs)?;
            Ok(g.scalar(l))
        },
        &case.inputs,
        epsilon,
    )?;
    Ok(flat_error(&analytic, &numeric))
}
