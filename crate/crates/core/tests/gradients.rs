mod common;

use clower_core::gradcheck::gradcheck;
use clower_core::graph::{Graph, Var};
use clower_core::losses::{mlm_loss, nt_xent_symmetric, sop_loss, MlmTerm, Similarity};
use clower_core::model::{encode_graph, init_params, mlm_logits_graph, Bound, Granularity, Mode, ModelConfig};
use clower_core::{seeded_rng, Result, Tensor};
use common::{toy_vocab, uniform};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Contracts `y` with a fixed random weight so every output element
/// carries a distinct upstream gradient.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let (r, c) = match shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (1, 1),
    };
    let w = uniform(&mut seeded_rng(seed), r, c);
    let w = g.constant(Tensor::new(shape, w.data().to_vec())?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn check<F>(name: &str, params: &mut [Tensor], mut f: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = gradcheck(|g, v| f(g, v), params, EPS).unwrap();
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
}

fn inputs(seed: u64, shapes: &[(usize, usize)]) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    shapes.iter().map(|&(r, c)| uniform(&mut rng, r, c)).collect()
}

#[test]
fn matrix_primitives() {
    check("matmul", &mut inputs(1, &[(3, 4), (4, 2)]), |g, v| {
        let y = g.matmul(v[0], v[1])?;
        reduce(g, y, 9)
    });
    check("matmul_nt", &mut inputs(2, &[(3, 4), (5, 4)]), |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        reduce(g, y, 9)
    });
    check("transpose", &mut inputs(3, &[(3, 4)]), |g, v| {
        let y = g.transpose(v[0])?;
        reduce(g, y, 9)
    });
    check("add_row", &mut inputs(4, &[(3, 4), (1, 4)]), |g, v| {
        let y = g.add_row(v[0], v[1])?;
        reduce(g, y, 9)
    });
    check("add", &mut inputs(5, &[(2, 3), (2, 3)]), |g, v| {
        let y = g.add(v[0], v[1])?;
        reduce(g, y, 9)
    });
    check("mul", &mut inputs(6, &[(2, 3), (2, 3)]), |g, v| {
        let y = g.mul(v[0], v[1])?;
        reduce(g, y, 9)
    });
}

#[test]
fn elementwise_and_normalizing_primitives() {
    check("gelu", &mut inputs(7, &[(3, 5)]), |g, v| {
        let y = g.gelu(v[0]);
        reduce(g, y, 9)
    });
    check("layer_norm", &mut inputs(8, &[(3, 5), (1, 5), (1, 5)]), |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
        reduce(g, y, 9)
    });
    check("softmax_rows", &mut inputs(9, &[(3, 5)]), |g, v| {
        let y = g.softmax_rows(v[0], None)?;
        reduce(g, y, 10)
    });
    check("masked softmax_rows", &mut inputs(10, &[(3, 5)]), |g, v| {
        let y = g.softmax_rows(v[0], Some(&[true, false, true, true, false]))?;
        reduce(g, y, 10)
    });
    check("normalize_rows", &mut inputs(11, &[(3, 4)]), |g, v| {
        let y = g.normalize_rows(v[0])?;
        reduce(g, y, 9)
    });
    check("cosine", &mut inputs(12, &[(1, 4), (1, 4)]), |g, v| g.cosine(v[0], v[1]));
    check("cross_entropy", &mut inputs(13, &[(4, 6)]), |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]));
    check("scale/mean_all", &mut inputs(14, &[(2, 3)]), |g, v| {
        let y = g.scale(v[0], -2.5);
        let y = g.mul(y, v[0])?;
        Ok(g.mean_all(y))
    });
}

#[test]
fn indexing_primitives() {
    check("gather", &mut inputs(15, &[(5, 3)]), |g, v| {
        let y = g.gather(v[0], &[4, 0, 4, 2])?;
        reduce(g, y, 9)
    });
    check("select_rows", &mut inputs(16, &[(5, 3)]), |g, v| {
        let y = g.select_rows(v[0], &[1, 1, 3])?;
        reduce(g, y, 9)
    });
    check("mean_rows", &mut inputs(17, &[(5, 3)]), |g, v| {
        let y = g.mean_rows(v[0], 1, 4)?;
        reduce(g, y, 9)
    });
    check("concat_rows", &mut inputs(18, &[(2, 3), (1, 3)]), |g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]])?;
        reduce(g, y, 9)
    });
    check("slice/concat_cols", &mut inputs(19, &[(3, 6)]), |g, v| {
        let a = g.slice_cols(v[0], 0, 2)?;
        let b = g.slice_cols(v[0], 3, 3)?;
        let y = g.concat_cols(&[b, a])?;
        reduce(g, y, 9)
    });
    check("lin_comb", &mut inputs(20, &[(2, 2), (3, 1)]), |g, v| {
        let a = reduce(g, v[0], 5)?;
        let b = reduce(g, v[1], 6)?;
        g.lin_comb(&[(a, 0.7), (b, -1.3)])
    });
}

#[test]
fn loss_functions() {
    for sim in [Similarity::Cosine, Similarity::Dot] {
        check("nt_xent", &mut inputs(21, &[(4, 3), (4, 3)]), |g, v| {
            nt_xent_symmetric(g, v[0], v[1], 0.5, sim)
        });
    }
    check("mlm", &mut inputs(22, &[(3, 7), (2, 7)]), |g, v| {
        mlm_loss(
            g,
            Some(MlmTerm { logits: v[0], targets: &[1, 6, 0] }),
            Some(MlmTerm { logits: v[1], targets: &[3, 3] }),
        )
    });
    check("sop", &mut inputs(23, &[(3, 2), (3, 2)]), |g, v| sop_loss(g, Some(v[0]), Some(v[1]), &[0, 1, 1]));
}

/// Same shape, entries uniform in [-0.5, 0.5].
fn scatter(rng: &mut clower_core::Rng, t: &Tensor) -> Tensor {
    let n = t.len();
    let u = uniform(rng, 1, n);
    Tensor::new(t.shape().to_vec(), u.data().iter().map(|x| 0.5 * x).collect()).unwrap()
}

#[test]
fn encoder_and_tied_projection() {
    let v = toy_vocab("abcdef", &["ab", "cde"]);
    let cfg = ModelConfig {
        max_seq_len: 8,
        ..ModelConfig::tiny(v.len())
    };
    let params = init_params(cfg, &v, &mut seeded_rng(3)).unwrap();
    let mut rng = seeded_rng(4);
    let mut tensors: Vec<Tensor> = params.tensors().iter().map(|t| scatter(&mut rng, t)).collect();
    let ids = [2, 5, 6, 7, 3, 8, 0];
    let segs = [0, 0, 0, 0, 0, 1, 1];
    for gran in [Granularity::Fine, Granularity::Coarse] {
        check(gran.as_str(), &mut tensors, |g, vars| {
            let mut p = Bound::from_vars(&params, vars);
            let h = encode_graph(g, &mut p, &ids, &segs, gran, &mut Mode::Eval)?;
            let rows = g.select_rows(h, &[1, 3])?;
            let logits = mlm_logits_graph(g, &mut p, rows)?;
            g.cross_entropy(logits, &[5, 9])
        });
    }
}
