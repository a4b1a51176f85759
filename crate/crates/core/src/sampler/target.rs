use nalgebra::{DMatrix, DVector};

use crate::ecm::{EcmDesign, MarginalKernel, PriorSpec, ThinBeta};
use crate::error::{Error, Result};
use crate::matrix_stats::SpdMatrix;
use crate::scalar::Real;

/// Unnormalised log density over a flat parameter vector.
pub trait LogTarget<F: Real> {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &DVector<F>) -> Result<F>;
}

/// Collapsed posterior `log p(β̃ | Y)` with `(B, Σ)` integrated out.
#[derive(Debug, Clone)]
pub struct CollapsedTarget<'a, F: Real> {
    kernel: MarginalKernel<'a, F>,
}

impl<'a, F: Real> CollapsedTarget<'a, F> {
    pub fn new(design: &'a EcmDesign<F>, prior: &'a PriorSpec<F>) -> Result<Self> {
        Ok(Self {
            kernel: MarginalKernel::new(design, prior)?,
        })
    }

    pub fn kernel(&self) -> &MarginalKernel<'a, F> {
        &self.kernel
    }

    pub fn to_beta(&self, theta: &DVector<F>) -> Result<ThinBeta<F>> {
        let d = self.kernel.design();
        ThinBeta::from_vec(d.n(), d.r(), theta)
    }
}

impl<F: Real> LogTarget<F> for CollapsedTarget<'_, F> {
    fn dim(&self) -> usize {
        self.kernel.design().free_dim()
    }

    fn log_density(&self, theta: &DVector<F>) -> Result<F> {
        self.kernel.log_density(&self.to_beta(theta)?)
    }
}

/// β-conditional of the joint posterior at fixed `(B, Σ)`.
#[derive(Debug, Clone)]
pub struct JointTarget<'k, 'a, F: Real> {
    kernel: &'k MarginalKernel<'a, F>,
    b: &'k DMatrix<F>,
    sigma: &'k SpdMatrix<F>,
}

impl<'k, 'a, F: Real> JointTarget<'k, 'a, F> {
    pub fn new(kernel: &'k MarginalKernel<'a, F>, b: &'k DMatrix<F>, sigma: &'k SpdMatrix<F>) -> Result<Self> {
        let d = kernel.design();
        if b.shape() != (d.k(), d.n()) || sigma.dim() != d.n() {
            return Err(Error::dim(
                "joint target",
                format!("B {}x{}, Sigma {}", d.k(), d.n(), d.n()),
                format!("B {}x{}, Sigma {}", b.nrows(), b.ncols(), sigma.dim()),
            ));
        }
        Ok(Self { kernel, b, sigma })
    }
}

impl<F: Real> LogTarget<F> for JointTarget<'_, '_, F> {
    fn dim(&self) -> usize {
        self.kernel.design().free_dim()
    }

    fn log_density(&self, theta: &DVector<F>) -> Result<F> {
        let d = self.kernel.design();
        let beta = ThinBeta::from_vec(d.n(), d.r(), theta)?;
        self.kernel.log_joint(&beta, self.b, self.sigma)
    }
}

/// Closure-backed target, mainly for calibration runs on toy densities.
pub struct FnTarget<G> {
    dim: usize,
    f: G,
}

impl<G> FnTarget<G> {
    pub fn new(dim: usize, f: G) -> Self {
        Self { dim, f }
    }
}

impl<F: Real, G: Fn(&DVector<F>) -> F> LogTarget<F> for FnTarget<G> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, theta: &DVector<F>) -> Result<F> {
        if theta.len() != self.dim {
            return Err(Error::dim("target argument", self.dim, theta.len()));
        }
        Ok((self.f)(theta))
    }
}
