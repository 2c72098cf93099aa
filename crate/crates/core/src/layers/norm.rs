use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics of a batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BNParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the newest batch in the running averages, in (0,1).
    pub momentum: f64,
    pub eps: f64,
}

impl BNParams {
    /// γ=1, β=0, running statistics (0, 1).
    pub fn identity(channels: usize) -> Self {
        BNParams {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape("batch_norm", format!("{name} {:?} for {c} channels", t.shape())));
            }
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Invalid(format!(
                "batch norm needs eps > 0 and momentum in (0,1), got {} / {}",
                self.eps, self.momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("negative running variance".into()));
        }
        Ok(())
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let (mean, var) = blend(self, stats);
        self.running_mean = mean;
        self.running_var = var;
    }
}

fn blend(p: &BNParams, stats: &BatchStats) -> (Tensor, Tensor) {
    let m = p.momentum;
    let mean = p
        .running_mean
        .data()
        .iter()
        .zip(&stats.mean)
        .map(|(r, b)| (1.0 - m) * r + m * b)
        .collect();
    let var = p
        .running_var
        .data()
        .iter()
        .zip(stats.unbiased_var())
        .map(|(r, b)| (1.0 - m) * r + m * b)
        .collect();
    (Tensor::vector(mean), Tensor::vector(var))
}

/// Eager batch norm over the trailing channel axis.
///
/// In training mode the batch (leading axis) must hold at least two samples
/// and the running statistics are updated.
pub fn batch_norm(x: &Tensor, p: &mut BNParams, training: bool) -> Result<Tensor> {
    p.validate()?;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(p.gamma.clone());
    let b = t.constant(p.beta.clone());
    let y = if training {
        let (y, stats) = t.batch_norm(xv, g, b, p.eps)?;
        p.update_running(&stats);
        y
    } else {
        t.batch_norm_fixed(xv, g, b, p.running_mean.data(), p.running_var.data(), p.eps)?
    };
    Ok(t.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let init = BNParams::identity(channels);
        BatchNormLayer {
            gamma: store.weight(format!("{name}.gamma"), init.gamma),
            beta: store.weight(format!("{name}.beta"), init.beta),
            running_mean: store.buffer(format!("{name}.running_mean"), init.running_mean),
            running_var: store.buffer(format!("{name}.running_var"), init.running_var),
            momentum: init.momentum,
            eps: init.eps,
        }
    }

    pub fn params(&self, store: &ParamStore) -> BNParams {
        BNParams {
            gamma: store.get(self.gamma).clone(),
            beta: store.get(self.beta).clone(),
            running_mean: store.get(self.running_mean).clone(),
            running_var: store.get(self.running_var).clone(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    /// Batch statistics in training mode (queued as buffer updates on the
    /// context), running statistics otherwise.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.training() {
            let (y, stats) = ctx.tape.batch_norm(x, g, b, self.eps)?;
            let (mean, var) = blend(&self.params(ctx.store()), &stats);
            ctx.push_update(self.running_mean, mean);
            ctx.push_update(self.running_var, var);
            Ok(y)
        } else {
            let store = ctx.store();
            let (mean, var) = (
                store.get(self.running_mean).data().to_vec(),
                store.get(self.running_var).data().to_vec(),
            );
            ctx.tape.batch_norm_fixed(x, g, b, &mean, &var, self.eps)
        }
    }
}
