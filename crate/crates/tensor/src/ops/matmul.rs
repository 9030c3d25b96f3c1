use crate::error::{dim_err, Result};
use crate::linalg::gemm;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `[m,k] x [k,n] -> [m,n]`, or batched `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (batched, bs) = match (a.ndim(), b.ndim()) {
            (2, 2) => (false, 1),
            (3, 3) if a.shape()[0] == b.shape()[0] => (true, a.shape()[0]),
            _ => return dim_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())),
        };
        let off = usize::from(batched);
        let (m, k, k2, n) = (a.shape()[off], a.shape()[off + 1], b.shape()[off], b.shape()[off + 1]);
        if k != k2 {
            return dim_err("matmul", format!("inner dims {:?} x {:?}", a.shape(), b.shape()));
        }
        self.tape.count_macs(bs * m * k * n);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                k as isize,
                1,
                &b.data()[i * k * n..],
                n as isize,
                1,
                0.0,
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let shape = if batched { vec![bs, m, n] } else { vec![m, n] };
        self.tape.push_op(
            "matmul",
            Tensor::new(shape, out)?,
            &[*self, *other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = if needs[0] {
                    // dA = G B^T
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m, n, k, 1.0, &gd[i * m * n..], n as isize, 1, &b.data()[i * k * n..], 1,
                            n as isize, 0.0, &mut da[i * m * k..], k as isize, 1,
                        );
                    }
                    Some(Tensor::new(a.shape().to_vec(), da)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    // dB = A^T G
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k, m, n, 1.0, &a.data()[i * m * k..], 1, k as isize, &gd[i * m * n..],
                            n as isize, 1, 0.0, &mut db[i * k * n..], n as isize, 1,
                        );
                    }
                    Some(Tensor::new(b.shape().to_vec(), db)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }
}
