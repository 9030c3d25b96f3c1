use crate::error::{dim_err, Result};
use crate::tape::Var;
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; n];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let sa = broadcast_strides(shape, g.shape());
    let mut acc = vec![0.0; numel(shape)];
    let gd = g.data();
    for_each_broadcast(g.shape(), &sa, &sa, |o, a, _| acc[a] += gd[o]);
    Tensor::new(shape.to_vec(), acc).expect("reduce_to shape")
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<'t>(op: Bin, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let name = match op {
        Bin::Add => "add",
        Bin::Sub => "sub",
        Bin::Mul => "mul",
        Bin::Div => "div",
    };
    let (av, bv) = (a.value(), b.value());
    let Some(out_shape) = broadcast_shape(av.shape(), bv.shape()) else {
        return dim_err(name, format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()));
    };
    let f = |x: f64, y: f64| match op {
        Bin::Add => x + y,
        Bin::Sub => x - y,
        Bin::Mul => x * y,
        Bin::Div => x / y,
    };
    let value = if av.shape() == bv.shape() {
        av.zip_map(&bv, f)?
    } else {
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        Tensor::new(out_shape.clone(), out)?
    };
    let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
    a.tape.push_op(
        name,
        value,
        &[a, b],
        Box::new(move |g, needs| {
            let same = a_shape == b_shape;
            let expand = |t: &Tensor| -> Tensor {
                // value of an operand laid out on the output grid
                if t.shape() == g.shape() {
                    return t.clone();
                }
                let s = broadcast_strides(t.shape(), g.shape());
                let mut out = vec![0.0; g.numel()];
                let td = t.data();
                for_each_broadcast(g.shape(), &s, &s, |o, i, _| out[o] = td[i]);
                Tensor::new(g.shape().to_vec(), out).expect("expand")
            };
            let ga = needs[0].then(|| {
                let full = match op {
                    Bin::Add | Bin::Sub => g.clone(),
                    Bin::Mul => g.mul(&expand(&bv)).expect("mul grad"),
                    Bin::Div => g.zip_map(&expand(&bv), |gg, y| gg / y).expect("div grad"),
                };
                if same { full } else { reduce_to(&full, &a_shape) }
            });
            let gb = needs[1].then(|| {
                let full = match op {
                    Bin::Add => g.clone(),
                    Bin::Sub => g.scale(-1.0),
                    Bin::Mul => g.mul(&expand(&av)).expect("mul grad"),
                    Bin::Div => {
                        let (xe, ye) = (expand(&av), expand(&bv));
                        let mut t = g.mul(&xe).expect("div grad");
                        for (v, y) in t.data_mut().iter_mut().zip(ye.data()) {
                            *v = -*v / (y * y);
                        }
                        t
                    }
                };
                if same { full } else { reduce_to(&full, &b_shape) }
            });
            Ok(vec![ga, gb])
        }),
    )
}

fn unary<'t>(
    x: Var<'t>,
    name: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative expressed through (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'t>> {
    let xv = x.value();
    let y = xv.map(f);
    let yv = y.clone();
    x.tape.push_op(
        name,
        y,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gg, (&xi, &yi))| gg * df(xi, yi))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        }),
    )
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(Bin::Add, *self, *other)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(Bin::Sub, *self, *other)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(Bin::Mul, *self, *other)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(Bin::Div, *self, *other)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        unary(*self, "scale", move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        unary(*self, "add_scalar", move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        unary(*self, "square", |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        unary(*self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        unary(*self, "exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        unary(*self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        unary(*self, "relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        unary(
            *self,
            "leaky_relu",
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        unary(*self, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        unary(*self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Result<Var<'t>> {
        unary(
            *self,
            "silu",
            |v| v / (1.0 + (-v).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }
}
