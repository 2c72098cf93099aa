//! Scene coherence loss, grid-pooled cross-entropy and their weighted total.
//!
//! All losses consume raw (pre-softmax) per-cell scores. The coherence term
//! penalizes squared differences between vertically and horizontally adjacent
//! cells; the classification term pools the grid first and applies softmax
//! cross-entropy to the pooled scores.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-cell raw class scores, `[N,M,C]` for one image or `[B,N,M,C]` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GridScores(Tensor);

impl GridScores {
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, m, c) = match *values.shape() {
            [_, n, m, c] | [n, m, c] => (n, m, c),
            ref s => return Err(Error::shape("grid_scores", format!("expected [N,M,C] or [B,N,M,C], got {s:?}"))),
        };
        if n == 0 || m == 0 || c < 2 {
            return Err(Error::Invalid(format!("grid needs N,M ≥ 1 and C ≥ 2, got {n}×{m}×{c}")));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("grid_scores".into()));
        }
        Ok(GridScores(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        let k = s.len();
        (s[k - 3], s[k - 2], s[k - 1])
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn classes(&self) -> usize {
        self.dims().2
    }

    pub fn is_batched(&self) -> bool {
        self.0.rank() == 4
    }

    /// The `[N,M]` score plane of one class (unbatched grids only).
    pub fn plane(&self, class: usize) -> Result<Tensor> {
        if self.is_batched() {
            return Err(Error::Invalid("plane() needs an unbatched grid".into()));
        }
        let (n, m, c) = self.dims();
        if class >= c {
            return Err(Error::Invalid(format!("class {class} out of range for {c} classes")));
        }
        Tensor::new([n, m], self.0.data().iter().skip(class).step_by(c).copied().collect())
    }
}

/// One-hot scene label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    class: usize,
    num_classes: usize,
}

impl Label {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Invalid(format!("label {class} out of range for {num_classes} classes")));
        }
        Ok(Label { class, num_classes })
    }

    pub fn from_onehot(v: &[f64]) -> Result<Self> {
        let hot: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        if hot.len() != 1 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Invalid(format!("not a one-hot vector: {v:?}")));
        }
        Label::new(hot[0], v.len())
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.class] = 1.0;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub coherence: f64,
    pub total: f64,
    pub gamma: f64,
}

/// Handles to the loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub classification: Var,
    pub coherence: Option<Var>,
    pub total: Var,
    pub gamma: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            classification: tape.value(self.classification).item(),
            coherence: self.coherence.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(self.total).item(),
            gamma: self.gamma,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("coherence weight must be finite and ≥ 0, got {gamma}")))
    }
}

/// Scene coherence loss of a `[N,M,C]` or `[B,N,M,C]` grid (batch-averaged).
pub fn scene_coherence(tape: &mut Tape, grid: Var) -> Result<Var> {
    tape.scene_coherence(grid)
}

/// Softmax cross-entropy of the spatially pooled grid, averaged over the batch.
pub fn grid_cross_entropy(tape: &mut Tape, grid: Var, targets: &[usize]) -> Result<Var> {
    let pooled = tape.global_avg_pool(grid)?;
    let pooled = match *tape.shape(pooled) {
        [c] => tape.reshape(pooled, &[1, c])?,
        _ => pooled,
    };
    tape.softmax_cross_entropy(pooled, targets)
}

/// `classification + gamma · coherence`.
///
/// With `gamma == 0` the coherence term is still recorded for monitoring but
/// does not enter the total, so nothing flows back through it.
pub fn combine(tape: &mut Tape, classification: Var, coherence: Option<Var>, gamma: f64) -> Result<LossVars> {
    check_gamma(gamma)?;
    let total = match coherence {
        Some(scl) if gamma > 0.0 => {
            let weighted = tape.scale(scl, gamma)?;
            tape.add(classification, weighted)?
        }
        _ => classification,
    };
    Ok(LossVars {
        classification,
        coherence,
        total,
        gamma,
    })
}

/// Grid cross-entropy plus weighted scene coherence on the same grid.
pub fn total_loss(tape: &mut Tape, grid: Var, targets: &[usize], gamma: f64) -> Result<LossVars> {
    check_gamma(gamma)?;
    let ce = grid_cross_entropy(tape, grid, targets)?;
    let scl = scene_coherence(tape, grid)?;
    combine(tape, ce, Some(scl), gamma)
}

/// Eager scene coherence loss.
pub fn scene_coherence_loss(o: &GridScores) -> Result<f64> {
    let mut t = Tape::new();
    let g = t.constant(o.tensor().clone());
    let v = scene_coherence(&mut t, g)?;
    Ok(t.value(v).item())
}

/// Eager grid cross-entropy for one image.
pub fn grid_cross_entropy_loss(o: &GridScores, y: &Label) -> Result<f64> {
    if o.is_batched() || y.num_classes() != o.classes() {
        return Err(Error::shape(
            "grid_cross_entropy",
            format!("grid {:?} with a {}-class label", o.tensor().shape(), y.num_classes()),
        ));
    }
    let mut t = Tape::new();
    let g = t.constant(o.tensor().clone());
    let v = grid_cross_entropy(&mut t, g, &[y.class()])?;
    Ok(t.value(v).item())
}

/// Eager loss breakdown for one image.
pub fn total_loss_breakdown(o: &GridScores, y: &Label, gamma: f64) -> Result<LossBreakdown> {
    check_gamma(gamma)?;
    let classification = grid_cross_entropy_loss(o, y)?;
    let coherence = scene_coherence_loss(o)?;
    Ok(LossBreakdown {
        classification,
        coherence,
        total: classification + gamma * coherence,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, softmax};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the per-class neighbour sums.
    fn scl_oracle(o: &Tensor) -> f64 {
        let [n, m, c] = <[usize; 3]>::try_from(o.shape()).unwrap();
        let norm = ((n - 1) * m + n * (m - 1)) as f64;
        let mut total = 0.0;
        for k in 0..c {
            let mut vertical = 0.0;
            for i in 0..n - 1 {
                for j in 0..m {
                    vertical += (o.at(&[i + 1, j, k]) - o.at(&[i, j, k])).powi(2);
                }
            }
            let mut horizontal = 0.0;
            for i in 0..n {
                for j in 0..m - 1 {
                    horizontal += (o.at(&[i, j + 1, k]) - o.at(&[i, j, k])).powi(2);
                }
            }
            total += (vertical + horizontal) / norm;
        }
        total / c as f64
    }

    fn ce_oracle(o: &Tensor, class: usize) -> f64 {
        let [n, m, c] = <[usize; 3]>::try_from(o.shape()).unwrap();
        let mut pooled = vec![0.0; c];
        for i in 0..n {
            for j in 0..m {
                for k in 0..c {
                    pooled[k] += o.at(&[i, j, k]) / (n * m) as f64;
                }
            }
        }
        -softmax(&pooled)[class].ln()
    }

    fn grid(t: Tensor) -> GridScores {
        GridScores(t)
    }

    #[test]
    fn constant_grid_is_coherent() {
        for c in [1, 3, 8] {
            let o = grid(Tensor::full([4, 3, c], 2.7));
            assert_eq!(scene_coherence_loss(&o).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::new([1, 2, 2, 1], vec![1., 0., 0., 0.]).unwrap());
        let l = t.scene_coherence(g).unwrap();
        assert_eq!(t.value(l).item(), 0.5);
        // A duplicated class column leaves the class average unchanged.
        let o = GridScores::new(Tensor::new([2, 2, 2], vec![1., 1., 0., 0., 0., 0., 0., 0.]).unwrap()).unwrap();
        assert_eq!(scene_coherence_loss(&o).unwrap(), 0.5);
        assert!(GridScores::new(Tensor::zeros([2, 2, 1])).is_err());
    }

    #[test]
    fn single_cell_has_no_adjacency() {
        let o = grid(Tensor::zeros([1, 1, 4]));
        assert!(matches!(scene_coherence_loss(&o), Err(Error::Geometry(_))));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (n, m, c) in [(1, 5, 3), (4, 1, 2), (3, 7, 5), (8, 8, 16)] {
            let t = Tensor::randn([n, m, c], 2.0, &mut rng);
            let fast = scene_coherence_loss(&grid(t.clone())).unwrap();
            assert!((fast - scl_oracle(&t)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let o = grid(Tensor::zeros([3, 3, 8]));
        let y = Label::new(5, 8).unwrap();
        assert!((grid_cross_entropy_loss(&o, &y).unwrap() - 8f64.ln()).abs() < 1e-12);

        let mut hot = Tensor::zeros([2, 2, 4]);
        for i in 0..2 {
            for j in 0..2 {
                hot.set(&[i, j, 1], 1000.0);
            }
        }
        assert!(grid_cross_entropy_loss(&grid(hot), &Label::new(1, 4).unwrap()).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn([4, 4, 6], 1.5, &mut rng);
        let v = grid_cross_entropy_loss(&grid(t.clone()), &Label::new(2, 6).unwrap()).unwrap();
        assert!((v - ce_oracle(&t, 2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let y = Label::new(0, 1).unwrap();
        let o = grid(Tensor::new([2, 2, 1], vec![1., 0., 0., 0.]).unwrap());
        let b = total_loss_breakdown(&o, &y, 0.0).unwrap();
        assert_eq!(b.total, b.classification);
        assert_eq!(b.coherence, 0.5);
        let b1 = total_loss_breakdown(&o, &y, 1.0).unwrap();
        assert!((b1.total - (ce_oracle(o.tensor(), 0) + 0.5)).abs() < 1e-12);

        let flat = grid(Tensor::full([3, 3, 4], 0.2));
        let y4 = Label::new(3, 4).unwrap();
        let b = total_loss_breakdown(&flat, &y4, 1.0).unwrap();
        assert_eq!(b.total, b.classification);

        assert!(total_loss_breakdown(&flat, &y4, -0.1).is_err());
    }

    #[test]
    fn gamma_zero_does_not_propagate_coherence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn([1, 3, 3, 4], 1.0, &mut rng);
        let grad = |gamma: f64, with_scl: bool| {
            let mut tape = Tape::new();
            let g = tape.param(t.clone());
            let l = if with_scl {
                total_loss(&mut tape, g, &[1], gamma).unwrap().total
            } else {
                grid_cross_entropy(&mut tape, g, &[1]).unwrap()
            };
            tape.backward(l).unwrap();
            tape.grad(g).unwrap().to_vec()
        };
        assert_eq!(grad(0.0, true), grad(0.0, false));
    }

    #[test]
    fn label_validation() {
        assert!(Label::new(3, 3).is_err());
        assert_eq!(Label::from_onehot(&[0., 1., 0.]).unwrap().class(), 1);
        assert!(Label::from_onehot(&[1., 1., 0.]).is_err());
        assert!(Label::from_onehot(&[0., 0.5, 0.]).is_err());
        assert_eq!(Label::new(2, 4).unwrap().onehot(), vec![0., 0., 1., 0.]);
    }

    #[test]
    fn grid_scores_validation() {
        assert!(GridScores::new(Tensor::zeros([2, 2, 1])).is_err());
        assert!(GridScores::new(Tensor::zeros([2, 2])).is_err());
        assert!(GridScores::new(Tensor::full([2, 2, 2], f64::NAN)).is_err());
        let g = GridScores::new(Tensor::zeros([3, 4, 5, 6])).unwrap();
        assert_eq!((g.rows(), g.cols(), g.classes()), (4, 5, 6));
    }

    #[test]
    fn coherence_gradient_through_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn([4, 4, 5], 1.0, &mut rng);
        let w = Tensor::randn([3, 5], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, wv| {
                let xv = t.constant(x.clone());
                let b = t.constant(Tensor::zeros([3]));
                let g = crate::layers::conv1x1_head(t, xv, wv, b)?;
                scene_coherence(t, g)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn arb_grid() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6, 2usize..6, any::<u64>())
            .prop_filter("needs adjacency", |(n, m, _, _)| n * m >= 2)
            .prop_map(|(n, m, c, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::randn([n, m, c], 1.0, &mut rng)
            })
    }

    proptest! {
        #[test]
        fn coherence_is_non_negative(t in arb_grid()) {
            prop_assert!(scene_coherence_loss(&grid(t)).unwrap() >= 0.0);
        }

        #[test]
        fn coherence_ignores_class_order(t in arb_grid(), shift in 1usize..5) {
            let [n, m, c] = <[usize; 3]>::try_from(t.shape()).unwrap();
            let mut p = Tensor::zeros([n, m, c]);
            for i in 0..n { for j in 0..m { for k in 0..c {
                p.set(&[i, j, (k + shift) % c], t.at(&[i, j, k]));
            }}}
            let a = scene_coherence_loss(&grid(t)).unwrap();
            let b = scene_coherence_loss(&grid(p)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn coherence_is_transpose_symmetric(side in 2usize..6, c in 2usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn([side, side, c], 1.0, &mut rng);
            let mut tr = Tensor::zeros([side, side, c]);
            for i in 0..side { for j in 0..side { for k in 0..c {
                tr.set(&[j, i, k], t.at(&[i, j, k]));
            }}}
            let a = scene_coherence_loss(&grid(t)).unwrap();
            let b = scene_coherence_loss(&grid(tr)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn constant_grid_has_zero_gradient(n in 1usize..5, m in 2usize..5, c in 2usize..5, v in -5.0f64..5.0) {
            let mut tape = Tape::new();
            let g = tape.param(Tensor::full([n, m, c], v));
            let l = scene_coherence(&mut tape, g).unwrap();
            tape.backward(l).unwrap();
            prop_assert!(tape.grad(g).unwrap().iter().all(|&d| d == 0.0));
        }

        #[test]
        fn cross_entropy_is_shift_invariant(t in arb_grid(), shift in -50.0f64..50.0) {
            let c = t.shape()[2];
            let y = Label::new(c - 1, c).unwrap();
            let a = grid_cross_entropy_loss(&grid(t.clone()), &y).unwrap();
            let b = grid_cross_entropy_loss(&grid(t.map(|v| v + shift)), &y).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn total_gradient_is_linear(t in arb_grid(), gamma in 0.0f64..10.0) {
            let c = t.shape()[2];
            let grad_of = |which: u8| {
                let mut tape = Tape::new();
                let g = tape.param(t.clone());
                let out = match which {
                    0 => grid_cross_entropy(&mut tape, g, &[0]).unwrap(),
                    1 => scene_coherence(&mut tape, g).unwrap(),
                    _ => total_loss(&mut tape, g, &[0], gamma).unwrap().total,
                };
                tape.backward(out).unwrap();
                tape.grad(g).unwrap().to_vec()
            };
            let (ce, scl, total) = (grad_of(0), grad_of(1), grad_of(2));
            for k in 0..ce.len() {
                prop_assert!((total[k] - (ce[k] + gamma * scl[k])).abs() < 1e-10);
            }
            prop_assert!(c >= 2);
        }
    }
}
