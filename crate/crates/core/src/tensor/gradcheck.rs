//! Central finite-difference gradient checks.

use super::dense::Tensor;
use super::graph::{Graph, Precision, Var};
use super::params::ParamStore;
use crate::error::{contract_err, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return contract_err("grad_check", format!("eps {eps} outside [1e-7, 1e-3]"));
    }
    Ok(())
}

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return contract_err("grad_check", format!("function must be scalar, got {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

/// Max relative error between the tape gradient of a scalar function at
/// `point` and its central finite difference. Always runs at 64-bit.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::with_precision(Precision::F64);
    let x = g.input(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.numel());

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.input(p);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-space gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Gradient check over every scalar of every parameter in `store`.
///
/// `stride` > 1 checks every stride-th coordinate of each parameter (always
/// including the first).
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, eps: f64, stride: usize) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_owner(store, |s| s, |s| s, f, eps, stride)
}

/// Like [`grad_check_params`] for a value that owns its parameters, such
/// as a model. `get`/`get_mut` expose the owned store.
pub fn grad_check_owner<T, F>(
    owner: &mut T,
    get: impl Fn(&T) -> &ParamStore,
    get_mut: impl Fn(&mut T) -> &mut ParamStore,
    f: F,
    eps: f64,
    stride: usize,
) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &T) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::with_precision(Precision::F64);
    let y = f(&mut g, owner)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = get(owner).grads(&g, &grads);

    let eval = |o: &T| -> Result<f64> {
        let mut g = Graph::with_precision(Precision::F64);
        let y = f(&mut g, o)?;
        scalar_of(&g, y)
    };
    let mut out = ParamCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let ids: Vec<_> = get(owner).ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = get(owner).get(id).numel();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = get(owner).get(id).data()[i];
            get_mut(owner).get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(owner)?;
            get_mut(owner).get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(owner)?;
            get_mut(owner).get_mut(id).data_mut()[i] = orig;
            let e = rel_err(analytic[k][i], (fp - fm) / (2.0 * eps));
            out.coords_checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = format!("{}[{i}]", get(owner).name(id));
            }
        }
    }
    Ok(out)
}

type ScalarFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One entry of the registered-op suite: a scalar probe through the op and
/// the shape of the point it is evaluated at.
pub struct OpProbe {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Points are drawn as `N(0,1)`; positive-domain ops shift them.
    pub positive: bool,
    pub f: ScalarFn,
}

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights, making every output
/// coordinate matter.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let w = fixed(g.shape(y), 991);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Every registered tape op, each wrapped as a scalar function of one input.
pub fn op_suite() -> Vec<OpProbe> {
    fn p(name: &'static str, shape: &[usize], positive: bool, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> OpProbe {
        OpProbe {
            name,
            shape: shape.to_vec(),
            positive,
            f: Box::new(move |g, x| {
                let y = f(g, x)?;
                probe(g, y)
            }),
        }
    }
    let c = |g: &mut Graph, shape: &[usize], seed: u64| g.constant(fixed(shape, seed));
    let segments = [(0usize, 2usize), (2, 3)];
    vec![
        p("matmul.lhs", &[5, 7], false, move |g, x| {
            let b = c(g, &[7, 3], 1);
            g.matmul(x, b)
        }),
        p("matmul.rhs", &[7, 3], false, move |g, x| {
            let a = c(g, &[5, 7], 2);
            g.matmul(a, x)
        }),
        p("add", &[4, 3], false, move |g, x| {
            let b = c(g, &[3], 3);
            g.add(x, b)
        }),
        p("add.broadcast_rhs", &[3], false, move |g, x| {
            let a = c(g, &[4, 3], 4);
            g.add(a, x)
        }),
        p("sub", &[4, 3], false, move |g, x| {
            let b = c(g, &[4, 3], 5);
            let l = g.sub(x, b)?;
            let r = g.sub(b, x)?;
            g.mul(l, r)
        }),
        p("mul", &[4, 3], false, move |g, x| {
            let b = c(g, &[3], 6);
            let y = g.mul(x, b)?;
            g.mul(y, x)
        }),
        p("scale", &[6], false, |g, x| g.scale(x, -1.7)),
        p("add_scalar", &[6], false, |g, x| {
            let y = g.add_scalar(x, 0.3)?;
            g.square(y)
        }),
        p("silu", &[8], false, |g, x| g.silu(x)),
        p("sigmoid", &[8], false, |g, x| g.sigmoid(x)),
        p("exp", &[8], false, |g, x| g.exp(x)),
        p("log", &[8], true, |g, x| g.log(x)),
        p("tanh", &[8], false, |g, x| g.tanh(x)),
        p("abs", &[8], true, |g, x| g.abs(x)),
        p("sqrt", &[8], true, |g, x| g.sqrt(x)),
        p("softmax.axis0", &[3, 4], false, |g, x| g.softmax(x, 0)),
        p("softmax.axis1", &[3, 4], false, |g, x| g.softmax(x, 1)),
        p("layer_norm", &[3, 5], false, |g, x| g.layer_norm(x, 1)),
        p("layer_norm.axis0", &[4, 3], false, |g, x| g.layer_norm(x, 0)),
        p("rms_norm", &[3, 5], false, move |g, x| {
            let gain = c(g, &[5], 7);
            g.rms_norm(x, 1, Some(gain))
        }),
        p("rms_norm.gain", &[5], false, move |g, x| {
            let a = c(g, &[3, 5], 8);
            g.rms_norm(a, 1, Some(x))
        }),
        p("cosine_similarity", &[3, 4], false, move |g, x| {
            let b = c(g, &[3, 4], 9);
            g.cosine_similarity(x, b, 1)
        }),
        p("conv2d.input", &[2, 2, 5, 5], false, move |g, x| {
            let w = c(g, &[3, 2, 3, 3], 10);
            let b = c(g, &[3], 11);
            g.conv2d(x, w, Some(b), 1, 1)
        }),
        p("conv2d.kernel", &[3, 2, 3, 3], false, move |g, x| {
            let inp = c(g, &[2, 2, 6, 6], 12);
            g.conv2d(inp, x, None, 2, 1)
        }),
        p("conv2d.bias", &[3], false, move |g, x| {
            let inp = c(g, &[1, 2, 4, 4], 13);
            let w = c(g, &[3, 2, 3, 3], 14);
            g.conv2d(inp, w, Some(x), 1, 1)
        }),
        p("avg_pool2d", &[1, 2, 4, 4], false, |g, x| g.avg_pool2d(x, 2)),
        p("sum", &[5], false, |g, x| {
            let s = g.sum(x)?;
            g.square(s)
        }),
        p("mean", &[5], false, |g, x| {
            let s = g.mean(x)?;
            g.square(s)
        }),
        p("sum_axis", &[3, 4, 2], false, |g, x| g.sum_axis(x, 1)),
        p("reshape", &[2, 6], false, |g, x| g.reshape(x, &[3, 4])),
        p("permute", &[2, 3, 4], false, |g, x| g.permute(x, &[2, 0, 1])),
        p("concat", &[2, 3], false, move |g, x| {
            let b = c(g, &[2, 2], 15);
            g.concat(&[x, b, x], 1)
        }),
        p("slice", &[4, 3], false, |g, x| g.slice(x, 0, 1, 2)),
        p("repeat_interleave", &[2, 3], false, |g, x| g.repeat_interleave(x, 1, 2)),
        p("gather_rows", &[4, 3], false, |g, x| g.gather_rows(x, &[2, 0, 2, 3])),
        p("attention.q", &[5, 2, 4], false, move |g, x| {
            let k = c(g, &[5, 2, 4], 16);
            let v = c(g, &[5, 2, 4], 17);
            g.attention(x, k, v, &segments)
        }),
        p("attention.k", &[5, 2, 4], false, move |g, x| {
            let q = c(g, &[5, 2, 4], 18);
            let v = c(g, &[5, 2, 4], 19);
            g.attention(q, x, v, &segments)
        }),
        p("attention.v", &[5, 2, 4], false, move |g, x| {
            let q = c(g, &[5, 2, 4], 20);
            let k = c(g, &[5, 2, 4], 21);
            g.attention(q, k, x, &segments)
        }),
        p("rotary", &[3, 2, 4], false, |g, x| {
            let angles: Vec<f64> = (0..6).map(|i| 0.37 * i as f64 - 0.5).collect();
            g.rotary(x, &angles)
        }),
    ]
}

/// Runs every probe of [`op_suite`] at `points` random points; returns the
/// worst relative error per op.
pub fn check_op_suite(points: usize, seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (k, probe) in op_suite().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..points {
            let mut x = fixed(&probe.shape, seed.wrapping_mul(1000).wrapping_add((k * 100 + i) as u64));
            if probe.positive {
                x = x.map(|v| v.abs() + 0.5);
            }
            worst = worst.max(grad_check(&probe.f, &x, eps)?);
        }
        out.push((probe.name.to_string(), worst));
    }
    Ok(out)
}
