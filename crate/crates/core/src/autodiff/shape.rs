use super::graph::{
    channel_shape, concat_shape, conv2d_shape, deconv2d_shape, matmul_shape, reshape_shape,
    space_to_batch_shape, BatchNormParams, Mode, Ops, Var,
};
use super::kernels::Padding;
use super::{AutodiffError, ParamId, ParamStore, Result, Tensor};

/// Runs network code for shapes only: no activations are allocated, so
/// full-scale topologies can be checked on a desk machine.
pub struct ShapeTracer<'s> {
    store: &'s ParamStore,
    shapes: Vec<Vec<usize>>,
    mode: Mode,
}

impl<'s> ShapeTracer<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            shapes: Vec::new(),
            mode,
        }
    }

    /// Placeholder input of the given shape.
    pub fn placeholder(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec())
    }

    pub fn nodes(&self) -> usize {
        self.shapes.len()
    }

    fn push(&mut self, s: Vec<usize>) -> Var {
        self.shapes.push(s);
        Var(self.shapes.len() - 1)
    }

    fn same(&mut self, x: Var) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        Ok(self.push(s))
    }
}

impl Ops for ShapeTracer<'_> {
    fn mode(&self) -> Mode {
        self.mode
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t.shape().to_vec())
    }

    fn param(&mut self, id: ParamId) -> Var {
        let s = self.store.value(id).shape().to_vec();
        self.push(s)
    }

    fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (_, s) = conv2d_shape(&self.shapes[x.0], &self.shapes[w.0], stride, padding)?;
        Ok(self.push(s))
    }

    fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (_, s) = deconv2d_shape(&self.shapes[x.0], &self.shapes[w.0], stride)?;
        Ok(self.push(s))
    }

    fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        channel_shape(&self.shapes[x.0], &self.shapes[b.0], "add_bias")?;
        self.same(x)
    }

    fn batch_norm(&mut self, x: Var, bn: &BatchNormParams) -> Result<Var> {
        channel_shape(
            &self.shapes[x.0],
            self.store.value(bn.gamma).shape(),
            "batch_norm",
        )?;
        self.same(x)
    }

    fn leaky_relu(&mut self, x: Var, _slope: f64) -> Result<Var> {
        self.same(x)
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.same(x)
    }

    fn softmax(&mut self, x: Var) -> Result<Var> {
        self.same(x)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(x)
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|v| self.shapes[v.0].as_slice()).collect();
        let s = concat_shape(&shapes)?;
        Ok(self.push(s))
    }

    fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let s = matmul_shape(&self.shapes[x.0], &self.shapes[w.0])?;
        Ok(self.push(s))
    }

    fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = reshape_shape(&self.shapes[x.0], shape)?;
        Ok(self.push(s))
    }

    fn space_to_batch(&mut self, x: Var, grid: usize) -> Result<Var> {
        let s = space_to_batch_shape(&self.shapes[x.0], grid)?;
        Ok(self.push(s))
    }

    fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = &self.shapes[x.0];
        let k = *s.last().unwrap_or(&1);
        let rows = s.iter().product::<usize>() / k.max(1);
        Ok(self.push(vec![rows]))
    }

    fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = &self.shapes[x.0];
        let c = *s.last().unwrap_or(&0);
        if index >= c {
            return Err(AutodiffError::Shape(format!(
                "select index {index} out of {c} columns"
            )));
        }
        let rows = s.iter().product::<usize>() / c;
        Ok(self.push(vec![rows]))
    }
}
