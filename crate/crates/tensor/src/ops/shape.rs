use crate::error::{dim_err, Result, TensorError};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let xv = self.value();
        let value = xv.reshape(shape)?;
        let in_shape = xv.shape().to_vec();
        self.tape.push_op(
            "reshape",
            value,
            &[*self],
            Box::new(move |g, _| Ok(vec![Some(g.reshape(in_shape.clone())?)])),
        )
    }

    pub fn flatten(&self) -> Result<Var<'t>> {
        self.reshape([self.numel()])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.push_op(
            "permute",
            value,
            &[*self],
            Box::new(move |g, _| Ok(vec![Some(g.permute(&inverse)?)])),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let value = xv.narrow(axis, start, len)?;
        let in_shape = xv.shape().to_vec();
        self.tape.push_op(
            "narrow",
            value,
            &[*self],
            Box::new(move |g, _| {
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[axis];
                let mut out = vec![0.0; numel(&in_shape)];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                Ok(vec![Some(Tensor::new(in_shape.clone(), out)?)])
            }),
        )
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        first.tape.push_op(
            "concat",
            value,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for (&len, &need) in sizes.iter().zip(needs) {
                    out.push(if need { Some(g.narrow(axis, start, len)?) } else { None });
                    start += len;
                }
                Ok(out)
            }),
        )
    }

    /// Rows of a `[k, d]` table selected by `indices`, giving `[n, d]`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.ndim() != 2 {
            return dim_err("index_select", format!("table must be 2-D, got {:?}", table.shape()));
        }
        let (k, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return dim_err("index_select", format!("index {bad} out of range for {k} rows"));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([indices.len(), d], out)?;
        let indices = indices.to_vec();
        self.tape.push_op(
            "index_select",
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut acc = vec![0.0; k * d];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        acc[i * d + j] += g.data()[r * d + j];
                    }
                }
                Ok(vec![Some(Tensor::new([k, d], acc)?)])
            }),
        )
    }

    /// Single element at flat offset `index`, as a scalar.
    pub fn pick(&self, index: usize) -> Result<Var<'t>> {
        let xv = self.value();
        if index >= xv.numel() {
            return dim_err("pick", format!("offset {index} in tensor of {} values", xv.numel()));
        }
        let shape = xv.shape().to_vec();
        self.tape.push_op(
            "pick",
            Tensor::scalar(xv.data()[index]),
            &[*self],
            Box::new(move |g, _| {
                let mut t = Tensor::zeros(shape.clone());
                t.data_mut()[index] = g.data()[0];
                Ok(vec![Some(t)])
            }),
        )
    }

    /// Forward value `value`, backward identity onto `self` (straight-through estimator).
    pub fn straight_through(&self, value: Tensor) -> Result<Var<'t>> {
        if value.shape() != self.shape().as_slice() {
            return dim_err(
                "straight_through",
                format!("replacement {:?} for {:?}", value.shape(), self.shape()),
            );
        }
        self.tape
            .push_op("straight_through", value, &[*self], Box::new(|g, _| Ok(vec![Some(g.clone())])))
    }
}
