use rand::Rng;

use super::init::he_normal;
use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Dense classifier weights `[C,D]` and bias `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match *weight.shape() {
            [c, _] if bias.shape() == [c] => Ok(DenseParams { weight, bias }),
            _ => Err(Error::shape(
                "dense_params",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            )),
        }
    }

    pub fn he_init<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        DenseParams {
            weight: he_normal([outputs, inputs], inputs, rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `W·x + b` for `[D]` or `[B,D]` input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let (xv, w, b) = self.bind(&mut t, x);
        let y = dense(&mut t, xv, w, b)?;
        Ok(t.value(y).clone())
    }

    /// 1×1 convolution of a `[N,M,D]` or `[B,N,M,D]` map.
    pub fn apply_grid(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let (xv, w, b) = self.bind(&mut t, x);
        let y = conv1x1_head(&mut t, xv, w, b)?;
        Ok(t.value(y).clone())
    }

    fn bind(&self, t: &mut Tape, x: &Tensor) -> (Var, Var, Var) {
        (
            t.constant(x.clone()),
            t.constant(self.weight.clone()),
            t.constant(self.bias.clone()),
        )
    }
}

/// `W·x + b` over the trailing axis of a `[D]` or `[B,D]` input.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    match *tape.shape(x) {
        [d] => {
            let x2 = tape.reshape(x, &[1, d])?;
            let y = tape.matmul_bt(x2, w)?;
            let c = tape.shape(y)[1];
            let y = tape.reshape(y, &[c])?;
            tape.add_bias(y, b)
        }
        [_, _] => {
            let y = tape.matmul_bt(x, w)?;
            tape.add_bias(y, b)
        }
        ref s => Err(Error::shape("dense", format!("input must be [D] or [B,D], got {s:?}"))),
    }
}

/// Applies the same `W·x + b` independently at every grid cell.
pub fn conv1x1_head(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (lead, d) = match shape.as_slice() {
        [b, n, m, d] => (vec![*b, *n, *m], *d),
        [n, m, d] => (vec![*n, *m], *d),
        _ => return Err(Error::shape("conv1x1_head", format!("expected a feature map, got {shape:?}"))),
    };
    let cells: usize = lead.iter().product();
    let flat = tape.reshape(x, &[cells, d])?;
    let y = tape.matmul_bt(flat, w)?;
    let y = tape.add_bias(y, b)?;
    let c = tape.shape(y)[1];
    let mut out = lead;
    out.push(c);
    tape.reshape(y, &out)
}

pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadForm {
    /// Global average pooling followed by a dense classifier.
    GapFc,
    /// Per-cell 1×1 convolution followed by global average pooling.
    #[default]
    Conv1x1Gap,
}

/// Classifier in pooled form: `FC(GAP(X))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GapFcHead {
    pub params: DenseParams,
}

impl GapFcHead {
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let (xv, w, b) = self.params.bind(&mut t, x);
        let pooled = t.global_avg_pool(xv)?;
        let y = dense(&mut t, pooled, w, b)?;
        Ok(t.value(y).clone())
    }
}

/// Classifier in fully convolutional form: `GAP(Conv1×1(X))`, exposing per-cell scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1GapHead {
    pub params: DenseParams,
}

impl Conv1x1GapHead {
    /// Returns `(grid scores, pooled scores)`.
    pub fn classify(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut t = Tape::new();
        let (xv, w, b) = self.params.bind(&mut t, x);
        let grid = conv1x1_head(&mut t, xv, w, b)?;
        let pooled = t.global_avg_pool(grid)?;
        Ok((t.value(grid).clone(), t.value(pooled).clone()))
    }
}

/// Reinterprets a GAP→FC classifier as 1×1 conv→GAP with the same parameters.
pub fn convert_head(head: GapFcHead) -> Conv1x1GapHead {
    Conv1x1GapHead { params: head.params }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        outputs: usize,
        inputs: usize,
        rng: &mut R,
    ) -> Self {
        let p = DenseParams::he_init(outputs, inputs, rng);
        DenseLayer {
            weight: store.weight(format!("{name}.weight"), p.weight),
            bias: store.weight(format!("{name}.bias"), p.bias),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        dense(&mut ctx.tape, x, w, b)
    }

    pub fn forward_grid(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        conv1x1_head(&mut ctx.tape, x, w, b)
    }

    pub fn params(&self, store: &ParamStore) -> DenseParams {
        DenseParams {
            weight: store.get(self.weight).clone(),
            bias: store.get(self.bias).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loop_mean(x: &Tensor) -> Vec<f64> {
        let [n, m, d] = <[usize; 3]>::try_from(x.shape()).unwrap();
        let mut out = vec![0.0; d];
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..m {
                    s += x.at(&[i, j, k]);
                }
            }
            *o = s / (n * m) as f64;
        }
        out
    }

    fn gap(x: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.global_avg_pool(v).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn gap_of_constant_and_small_maps() {
        assert_eq!(gap(&Tensor::full([3, 2, 2], 1.5)).data(), &[1.5, 1.5]);
        let x = Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(gap(&x).data(), &[2.5]);
    }

    #[test]
    fn gap_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([5, 3, 7], 1.0, &mut rng);
        let fast = gap(&x);
        for (a, b) in fast.data().iter().zip(loop_mean(&x)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_head_is_identity() {
        let p = DenseParams::new(Tensor::eye(3), Tensor::zeros([3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([2, 2, 3], 1.0, &mut rng);
        assert_eq!(p.apply_grid(&x).unwrap(), x);
    }

    #[test]
    fn constant_map_gives_identical_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DenseParams::he_init(4, 3, &mut rng);
        let x = Tensor::new([3, 3, 3], [0.3, -1.0, 2.0].repeat(9)).unwrap();
        let y = p.apply_grid(&x).unwrap();
        let first = y.data()[..4].to_vec();
        for cell in y.data().chunks(4) {
            assert_eq!(cell, first.as_slice());
        }
    }

    #[test]
    fn pooled_grid_equals_dense_of_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn([4, 3, 5], 1.0, &mut rng);
        let mut p = DenseParams::he_init(6, 5, &mut rng);
        p.bias = Tensor::randn([6], 1.0, &mut rng);
        let a = gap(&p.apply_grid(&x).unwrap());
        let b = p.apply(&gap(&x)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn converted_head_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = DenseParams::he_init(5, 8, &mut rng);
        let fc = GapFcHead { params: p.clone() };
        let x = Tensor::randn([4, 4, 8], 1.0, &mut rng);
        let before = fc.classify(&x).unwrap();
        let conv = convert_head(fc);
        let (grid, after) = conv.classify(&x).unwrap();
        assert_eq!(grid.shape(), &[4, 4, 5]);
        assert!(before.max_abs_diff(&after) < 1e-10);
    }

    #[test]
    fn zero_weights_output_bias() {
        let bias = Tensor::vector(vec![0.5, -0.25, 1.0]);
        let p = DenseParams::new(Tensor::zeros([3, 4]), bias.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn([2, 2, 4], 1.0, &mut rng);
        let before = GapFcHead { params: p.clone() }.classify(&x).unwrap();
        let (_, after) = convert_head(GapFcHead { params: p }).classify(&x).unwrap();
        assert_eq!(before, bias);
        assert_eq!(after, bias);
    }

    #[test]
    fn head_shape_mismatch() {
        let p = DenseParams::new(Tensor::zeros([3, 4]), Tensor::zeros([3])).unwrap();
        assert!(p.apply_grid(&Tensor::zeros([2, 2, 5])).is_err());
        assert!(DenseParams::new(Tensor::zeros([3, 4]), Tensor::zeros([4])).is_err());
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn([2, 3, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn([5, 4], 1.0, &mut rng);
        let b = Tensor::randn([5], 1.0, &mut rng);
        let r = Tensor::randn([2, 5], 1.0, &mut rng);
        let err = finite_diff_check_many(
            |t, v| {
                let g = conv1x1_head(t, v[0], v[1], v[2])?;
                let p = t.global_avg_pool(g)?;
                let rr = t.constant(r.clone());
                let y = t.mul(p, rr)?;
                t.sum(y)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
