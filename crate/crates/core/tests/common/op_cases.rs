//! Gradient-check cases for every differentiable graph primitive.

use bandfuse_core::tensor::{Graph, Tensor, Var};
use bandfuse_core::Result;

use super::{project, randn, rng};

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let s = seed;
    vec![
        case(
            "linear",
            vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[4, 5], 0.5), randn(&mut r, &[5], 0.5)],
            move |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, s)
            },
        ),
        case(
            "matmul_t",
            vec![randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[6, 4], 1.0)],
            move |g, v| {
                let y = g.matmul_t(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "bmm",
            vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[2, 4, 5], 1.0)],
            move |g, v| {
                let y = g.bmm(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "bmm_t",
            vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[2, 5, 4], 1.0)],
            move |g, v| {
                let y = g.bmm_t(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "large_matmul",
            vec![randn(&mut r, &[20, 17], 1.0), randn(&mut r, &[17, 13], 1.0)],
            move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "mul_add_scale",
            vec![randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
            move |g, v| {
                let m = g.mul(v[0], v[1])?;
                let a = g.add(m, v[0])?;
                let y = g.scale(a, -1.7)?;
                project(g, y, s)
            },
        ),
        case(
            "mul_bcast",
            vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
            move |g, v| {
                let y = g.mul_bcast(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "permute_reshape",
            vec![randn(&mut r, &[2, 3, 4], 1.0)],
            move |g, v| {
                let p = g.permute(v[0], &[2, 0, 1])?;
                let q = g.reshape(p, &[4, 6])?;
                let sq = g.mul(q, q)?;
                project(g, sq, s)
            },
        ),
        case(
            "sum_last_mean_axis",
            vec![randn(&mut r, &[3, 4, 5], 1.0)],
            move |g, v| {
                let a = g.sum_last(v[0])?;
                let b = g.mean_axis(v[0], 1)?;
                let sa = g.mul(a, a)?;
                let pa = project(g, sa, s)?;
                let sb = g.mul(b, b)?;
                let pb = project(g, sb, s + 1)?;
                g.add(pa, pb)
            },
        ),
        case(
            "softmax",
            vec![randn(&mut r, &[3, 6], 2.0)],
            move |g, v| {
                let y = g.softmax(v[0], 0.7)?;
                project(g, y, s)
            },
        ),
        case(
            "log_softmax",
            vec![randn(&mut r, &[3, 6], 2.0)],
            move |g, v| {
                let y = g.log_softmax(v[0], 0.3)?;
                project(g, y, s)
            },
        ),
        case(
            "layer_norm",
            vec![randn(&mut r, &[4, 7], 2.0), randn(&mut r, &[7], 1.0), randn(&mut r, &[7], 1.0)],
            move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s)
            },
        ),
        case("gelu", vec![randn(&mut r, &[3, 5], 2.0)], move |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, s)
        }),
        case("sigmoid", vec![randn(&mut r, &[3, 5], 2.0)], move |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, s)
        }),
        case("l2_normalize", vec![randn(&mut r, &[3, 5], 1.0)], move |g, v| {
            let y = g.l2_normalize(v[0])?;
            project(g, y, s)
        }),
        case(
            "concat_stack",
            vec![randn(&mut r, &[2, 3, 2], 1.0), randn(&mut r, &[2, 3, 4], 1.0)],
            move |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                let sq = g.mul(c, c)?;
                let st = g.stack(&[sq, c], 1)?;
                project(g, st, s)
            },
        ),
        case(
            "fill_rows",
            vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[4], 1.0)],
            move |g, v| {
                let y = g.fill_rows(Some(v[0]), &[1, 3], v[1], 5, &[3, 4])?;
                let sq = g.mul(y, y)?;
                project(g, sq, s)
            },
        ),
        case(
            "im2col_upsample",
            vec![randn(&mut r, &[2, 6, 3], 1.0)],
            move |g, v| {
                let c = g.im2col3x3(v[0], 2, 3)?;
                let u = g.upsample2x(c, 2, 3)?;
                let sq = g.mul(u, u)?;
                project(g, sq, s)
            },
        ),
        case(
            "bce_with_logits",
            vec![randn(&mut r, &[4, 5], 2.0)],
            move |g, v| {
                let t = Tensor::from_fn([4, 5], |i| if (i * 7 + s as usize) % 3 == 0 { 1.0 } else { 0.0 });
                g.bce_with_logits(v[0], t)
            },
        ),
        case(
            "cross_entropy_soft",
            vec![randn(&mut r, &[3, 6], 1.0)],
            move |g, v| {
                // −Σ q log softmax(x/τ) against a fixed distribution q.
                let q = bandfuse_core::tensor::softmax(
                    &Tensor::from_fn([3, 6], |i| ((i * 13 + s as usize) % 7) as f64 * 0.4),
                    1,
                    1.0,
                )?;
                let lp = g.log_softmax(v[0], 0.1)?;
                let loss = g.dot_const(lp, q.map(|x| -x))?;
                g.scale(loss, 1.0 / 3.0)
            },
        ),
        case("mean_all", vec![randn(&mut r, &[3, 4], 1.0)], move |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean_all(sq)?;
            let t = g.sum_all(v[0])?;
            g.add(m, t)
        }),
    ]
}
