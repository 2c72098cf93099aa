use rand::Rng;

use super::init::he_normal;
use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    #[default]
    Vanilla,
    Partial,
}

/// Weights `[KH,KW,Din,Dout]`, bias `[Dout]` and the sliding geometry of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [kh, kw, _, cout] = <[usize; 4]>::try_from(weight.shape()).map_err(|_| {
            Error::shape("conv_params", format!("weights must be [KH,KW,Din,Dout], got {:?}", weight.shape()))
        })?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid(format!("kernel extents must be odd, got {kh}×{kw}")));
        }
        if cout == 0 || bias.shape() != [cout] {
            return Err(Error::shape("conv_params", format!("bias {:?} for {cout} output channels", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::Invalid("stride must be positive".into()));
        }
        Ok(ConvParams { weight, bias, stride, pad })
    }

    pub fn he_init<R: Rng + ?Sized>(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        ConvParams {
            weight: he_normal([kernel, kernel, cin, cout], kernel * kernel * cin, rng),
            bias: Tensor::zeros([cout]),
            stride,
            pad,
        }
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn output_hw(&self, input_hw: (usize, usize)) -> Result<(usize, usize)> {
        output_hw(input_hw, self.kernel_hw(), self.stride, self.pad)
    }

    pub fn partial_plan(&self, input_hw: (usize, usize)) -> Result<PartialConvPlan> {
        build_partial_plan(input_hw, self.kernel_hw(), self.stride, self.pad)
    }

    /// Zero-padded convolution of a `[N,M,Din]` or `[B,N,M,Din]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let (xv, w, b) = (t.constant(x.clone()), t.constant(self.weight.clone()), t.constant(self.bias.clone()));
        let y = conv2d_zero_pad(&mut t, xv, w, b, self.stride, self.pad)?;
        Ok(t.value(y).clone())
    }

    pub fn apply_partial(&self, x: &Tensor, plan: &PartialConvPlan) -> Result<Tensor> {
        let mut t = Tape::new();
        let (xv, w, b) = (t.constant(x.clone()), t.constant(self.weight.clone()), t.constant(self.bias.clone()));
        let y = partial_conv2d(&mut t, xv, w, b, plan)?;
        Ok(t.value(y).clone())
    }
}

fn output_hw(input_hw: (usize, usize), kernel_hw: (usize, usize), stride: usize, pad: usize) -> Result<(usize, usize)> {
    let (h, w) = input_hw;
    let (kh, kw) = kernel_hw;
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Geometry(format!(
            "{kh}×{kw} kernel, stride {stride}, pad {pad} does not fit a {h}×{w} input"
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Zero-padded convolution plus bias.
pub fn conv2d_zero_pad(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.add_bias(y, b)
}

/// Partial convolution: the bias-free response at each output position is
/// multiplied by the plan's scale, then the bias is added.
pub fn partial_conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, plan: &PartialConvPlan) -> Result<Var> {
    let shape = tape.shape(x);
    let hw = match *shape {
        [_, h, w, _] | [h, w, _] => (h, w),
        _ => return Err(Error::shape("partial_conv2d", format!("expected a feature map, got {shape:?}"))),
    };
    let kernel = (tape.shape(w)[0], tape.shape(w).get(1).copied().unwrap_or(0));
    if hw != plan.input_hw || kernel != plan.kernel_hw {
        return Err(Error::shape(
            "partial_conv2d",
            format!(
                "plan built for {:?} input / {:?} kernel, got {:?} / {:?}",
                plan.input_hw, plan.kernel_hw, hw, kernel
            ),
        ));
    }
    let y = tape.conv2d(x, w, plan.stride, plan.pad)?;
    let y = tape.spatial_scale(y, &plan.scale)?;
    tape.add_bias(y, b)
}

/// Precomputed boundary scaling for a partial convolution of fixed geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialConvPlan {
    pub input_hw: (usize, usize),
    pub kernel_hw: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub output_hw: (usize, usize),
    /// `[Ho,Wo]` scale factors `KH·KW / (KH·KW − padded cells in window)`.
    pub scale: Tensor,
    /// The same factors as reduced fractions `(numerator, denominator)`.
    pub ratios: Vec<(u32, u32)>,
    /// `[H+2·pad, W+2·pad]`, 1 where the padded input is padding.
    pub pad_indicator: Tensor,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds the scaling mask by counting padded cells under every (strided) window.
///
/// A window made entirely of padding has no valid input and is rejected.
pub fn build_partial_plan(
    input_hw: (usize, usize),
    kernel_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<PartialConvPlan> {
    let (ho, wo) = output_hw(input_hw, kernel_hw, stride, pad)?;
    let (h, w) = input_hw;
    let (kh, kw) = kernel_hw;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut indicator = Tensor::zeros([ph, pw]);
    for i in 0..ph {
        for j in 0..pw {
            if i < pad || i >= pad + h || j < pad || j >= pad + w {
                indicator.set(&[i, j], 1.0);
            }
        }
    }
    let area = (kh * kw) as u32;
    let mut ratios = Vec::with_capacity(ho * wo);
    for n in 0..ho {
        for m in 0..wo {
            let mut padded = 0u32;
            for i in 0..kh {
                for j in 0..kw {
                    padded += indicator.at(&[n * stride + i, m * stride + j]) as u32;
                }
            }
            if padded == area {
                return Err(Error::Geometry(format!(
                    "output position ({n},{m}) sees only padding ({kh}×{kw} kernel, pad {pad}, stride {stride})"
                )));
            }
            let valid = area - padded;
            let g = gcd(area, valid);
            ratios.push((area / g, valid / g));
        }
    }
    let scale = Tensor::new(
        [ho, wo],
        ratios.iter().map(|&(a, b)| a as f64 / b as f64).collect(),
    )?;
    Ok(PartialConvPlan {
        input_hw,
        kernel_hw,
        stride,
        pad,
        output_hw: (ho, wo),
        scale,
        ratios,
        pad_indicator: indicator,
    })
}

/// A convolution whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    /// Present for partial convolutions; fixes the input geometry.
    pub plan: Option<PartialConvPlan>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        kind: ConvKind,
        input_hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let pad = kernel / 2;
        let p = ConvParams::he_init(kernel, cin, cout, stride, pad, rng);
        let plan = match kind {
            ConvKind::Vanilla => {
                p.output_hw(input_hw)?;
                None
            }
            ConvKind::Partial => Some(p.partial_plan(input_hw)?),
        };
        Ok(ConvLayer {
            weight: store.weight(format!("{name}.weight"), p.weight),
            bias: store.weight(format!("{name}.bias"), p.bias),
            stride,
            pad,
            plan,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        match &self.plan {
            Some(plan) => partial_conv2d(&mut ctx.tape, x, w, b, plan),
            None => conv2d_zero_pad(&mut ctx.tape, x, w, b, self.stride, self.pad),
        }
    }

    pub fn params(&self, store: &ParamStore) -> ConvParams {
        ConvParams {
            weight: store.get(self.weight).clone(),
            bias: store.get(self.bias).clone(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the padded sum over the window, one output at a time.
    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let [h, w, cin] = <[usize; 3]>::try_from(x.shape()).unwrap();
        let (kh, kw) = p.kernel_hw();
        let cout = p.out_channels();
        let (ho, wo) = p.output_hw((h, w)).unwrap();
        let mut out = Tensor::zeros([ho, wo, cout]);
        for n in 0..ho {
            for m in 0..wo {
                for d in 0..cout {
                    let mut acc = p.bias.data()[d];
                    for i in 0..kh {
                        for j in 0..kw {
                            let r = (n * p.stride + i) as isize - p.pad as isize;
                            let c = (m * p.stride + j) as isize - p.pad as isize;
                            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                continue;
                            }
                            for k in 0..cin {
                                acc += p.weight.at(&[i, j, k, d]) * x.at(&[r as usize, c as usize, k]);
                            }
                        }
                    }
                    out.set(&[n, m, d], acc);
                }
            }
        }
        out
    }

    /// Counts padded cells by enumerating each window's padded-input coordinates.
    fn count_padded(hw: (usize, usize), k: (usize, usize), stride: usize, pad: usize, n: usize, m: usize) -> usize {
        let mut count = 0;
        for i in 0..k.0 {
            for j in 0..k.1 {
                let r = (n * stride + i) as isize - pad as isize;
                let c = (m * stride + j) as isize - pad as isize;
                if r < 0 || c < 0 || r >= hw.0 as isize || c >= hw.1 as isize {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn single_pixel_with_ones_kernel() {
        let x = Tensor::new([1, 1, 1], vec![5.0]).unwrap();
        let p = ConvParams::new(Tensor::ones([3, 3, 1, 1]), Tensor::zeros([1]), 1, 1).unwrap();
        assert_eq!(p.apply(&x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ConvParams::he_init(3, 2, 4, 1, 1, &mut rng);
        p.bias = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let y = p.apply(&Tensor::zeros([5, 5, 2])).unwrap();
        for cell in y.data().chunks(4) {
            assert_eq!(cell, p.bias.data());
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn([5, 5, 2], 1.0, &mut rng);
        for stride in [1, 2] {
            let mut p = ConvParams::he_init(3, 2, 3, stride, 1, &mut rng);
            p.bias = Tensor::randn([3], 1.0, &mut rng);
            let fast = p.apply(&x).unwrap();
            let slow = naive_conv(&x, &p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ConvParams::he_init(3, 2, 3, 1, 1, &mut rng);
        assert!(p.apply(&Tensor::zeros([4, 4, 3])).is_err());
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(ConvParams::new(Tensor::zeros([2, 2, 1, 1]), Tensor::zeros([1]), 1, 1).is_err());
    }

    #[test]
    fn plan_for_3x3_pad1_on_4x4() {
        let plan = build_partial_plan((4, 4), (3, 3), 1, 1).unwrap();
        assert_eq!(plan.output_hw, (4, 4));
        let s = |n: usize, m: usize| plan.ratios[n * 4 + m];
        assert_eq!(s(0, 0), (9, 4));
        assert_eq!(s(3, 3), (9, 4));
        assert_eq!(s(0, 1), (3, 2)); // 9/6
        assert_eq!(s(2, 0), (3, 2));
        assert_eq!(s(1, 1), (1, 1));
        assert_eq!(plan.scale.at(&[0, 0]), 2.25);
        assert_eq!(plan.scale.at(&[0, 2]), 1.5);
        assert_eq!(plan.pad_indicator.sum() as usize, 6 * 6 - 16);
    }

    #[test]
    fn plan_matches_window_count_oracle() {
        for (hw, k, stride, pad) in [
            ((32, 32), (3, 3), 2, 1),
            ((16, 16), (3, 3), 2, 1),
            ((8, 8), (3, 3), 2, 1),
            ((7, 5), (5, 3), 1, 2),
            ((9, 9), (3, 3), 3, 1),
        ] {
            let plan = build_partial_plan(hw, k, stride, pad).unwrap();
            let (ho, wo) = plan.output_hw;
            for n in 0..ho {
                for m in 0..wo {
                    let padded = count_padded(hw, k, stride, pad, n, m);
                    let (num, den) = plan.ratios[n * wo + m];
                    // num/den == area/(area - padded), compared by cross-multiplication
                    let area = k.0 * k.1;
                    assert_eq!(num as usize * (area - padded), den as usize * area);
                    assert!(plan.scale.at(&[n, m]) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn unpadded_plans_are_all_ones() {
        let plan = build_partial_plan((6, 6), (3, 3), 1, 0).unwrap();
        assert!(plan.scale.data().iter().all(|&s| s == 1.0));
        let plan = build_partial_plan((6, 6), (1, 1), 1, 0).unwrap();
        assert!(plan.scale.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn all_padding_window_is_degenerate() {
        // pad 3 with a 3x3 kernel leaves the corner window entirely in padding
        assert!(matches!(build_partial_plan((4, 4), (3, 3), 1, 3), Err(Error::Geometry(_))));
    }

    #[test]
    fn ones_input_is_flat_after_rescaling() {
        let x = Tensor::ones([4, 4, 1]);
        let p = ConvParams::new(Tensor::ones([3, 3, 1, 1]), Tensor::zeros([1]), 1, 1).unwrap();
        let plan = p.partial_plan((4, 4)).unwrap();
        let vanilla = p.apply(&x).unwrap();
        assert_eq!(vanilla.at(&[0, 0, 0]), 4.0);
        let partial = p.apply_partial(&x, &plan).unwrap();
        assert!(partial.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn partial_composes_from_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([6, 6, 3], 1.0, &mut rng);
        for stride in [1, 2] {
            let mut p = ConvParams::he_init(3, 3, 2, stride, 1, &mut rng);
            p.bias = Tensor::randn([2], 1.0, &mut rng);
            let plan = p.partial_plan((6, 6)).unwrap();
            let vanilla = p.apply(&x).unwrap();
            let partial = p.apply_partial(&x, &plan).unwrap();
            let (ho, wo) = plan.output_hw;
            for n in 0..ho {
                for m in 0..wo {
                    for d in 0..2 {
                        let b = p.bias.data()[d];
                        let expect = plan.scale.at(&[n, m]) * (vanilla.at(&[n, m, d]) - b) + b;
                        assert!((partial.at(&[n, m, d]) - expect).abs() < 1e-12);
                        if plan.scale.at(&[n, m]) == 1.0 {
                            assert_eq!(partial.at(&[n, m, d]), vanilla.at(&[n, m, d]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn plan_geometry_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConvParams::he_init(3, 1, 1, 1, 1, &mut rng);
        let plan = p.partial_plan((4, 4)).unwrap();
        assert!(p.apply_partial(&Tensor::zeros([5, 5, 1]), &plan).is_err());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 5, 5, 2], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, 2, 3], 0.5, &mut rng);
        let b = Tensor::randn([3], 0.5, &mut rng);
        let plan = build_partial_plan((5, 5), (3, 3), 2, 1).unwrap();
        let r = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
        for partial in [false, true] {
            let err = finite_diff_check_many(
                |t, v| {
                    let y = if partial {
                        partial_conv2d(t, v[0], v[1], v[2], &plan)?
                    } else {
                        conv2d_zero_pad(t, v[0], v[1], v[2], 2, 1)?
                    };
                    let rr = t.constant(r.clone());
                    let y = t.mul(y, rr)?;
                    t.sum(y)
                },
                &[x.clone(), w.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "partial={partial}: {err}");
        }
    }
}
