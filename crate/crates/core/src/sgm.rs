//! Semantic guidance: fuses the prior map with backbone features and keeps
//! a multiplicative prior stream that is refined at every injection.

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{Init, Scope};
use crate::tensor::Float;

const ONE: ConvSpec = ConvSpec {
    stride: 1,
    padding: 0,
    groups: 1,
};

pub fn init_fab<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    if !cfg.fab_enabled {
        return Ok(());
    }
    let (c, r) = (cfg.channels, cfg.fab_hidden());
    init.conv("conv1", c, c, 3, 1)?;
    init.conv("conv2", c, c, 3, 1)?;
    init.conv("se_reduce", c, r, 1, 1)?;
    init.conv("se_expand", r, c, 1, 1)
}

/// Feature attention block: conv-ReLU-conv body, squeeze-excitation gate,
/// residual skip. Identity when FABs are disabled.
pub fn fab<'g, T: Float>(s: &Scope<'_, 'g, T>, cfg: &ModelConfig, x: Var<'g, T>) -> Result<Var<'g, T>> {
    if !cfg.fab_enabled {
        return Ok(x);
    }
    if x.dims()[1] != cfg.channels {
        return Err(Error::shape(
            "fab",
            format!("{} channels, expected {}", x.dims()[1], cfg.channels),
        ));
    }
    let body = s.conv("conv2", s.conv("conv1", x, ConvSpec::same(3))?.relu()?, ConvSpec::same(3))?;
    let squeeze = s.conv("se_reduce", body.spatial_mean()?, ONE)?.relu()?;
    let gate = s.conv("se_expand", squeeze, ONE)?.sigmoid()?;
    body.mul(gate)?.add(x)
}

/// Parameters for the initial fusion and one set per injection site.
pub fn init_sgm<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    if !cfg.uses_prior() {
        return Ok(());
    }
    let cin = cfg.channels + cfg.prior_channels;
    init.conv("fuse0", cin, cfg.channels, 1, 1)?;
    init_fab(&mut init.child("fab0"), cfg)?;
    for &i in &cfg.prior_injection_indices {
        let mut site = init.child(&format!("inject{i}"));
        site.conv("fuse", cin, cfg.channels, 1, 1)?;
        init_fab(&mut site.child("fab"), cfg)?;
        init_fab(&mut site.child("prior_fab"), cfg)?;
    }
    Ok(())
}

/// State carried between injections within one forward pass.
#[derive(Clone, Copy)]
pub struct SgmState<'g, T: Float> {
    /// The prior stream `P_i`.
    pub prior_stream: Var<'g, T>,
    /// `Conv1x1(Concat[F_0, T])`.
    pub fused_shallow: Var<'g, T>,
    /// Number of stream updates applied so far.
    pub updates: usize,
}

fn fuse<'g, T: Float>(s: &Scope<'_, 'g, T>, layer: &str, f: Var<'g, T>, prior: Var<'g, T>) -> Result<Var<'g, T>> {
    let (fd, pd) = (f.dims(), prior.dims());
    if fd[0] != pd[0] || fd[2] != pd[2] || fd[3] != pd[3] {
        return Err(Error::shape(
            "sgm",
            format!("prior {pd:?} is not aligned with features {fd:?}"),
        ));
    }
    s.conv(layer, Var::concat(&[f, prior])?, ONE)
}

/// `F_v0 = Conv1x1(Concat[F_0, T])`, `P_1 = FAB(F_v0)`.
pub fn sgm_init<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    f0: Var<'g, T>,
    prior: Var<'g, T>,
) -> Result<SgmState<'g, T>> {
    let fused_shallow = fuse(s, "fuse0", f0, prior)?;
    let prior_stream = fab(&s.child("fab0"), cfg, fused_shallow)?;
    Ok(SgmState {
        prior_stream,
        fused_shallow,
        updates: 0,
    })
}

/// One injection before GLCM `site`:
/// `F' = FAB(Conv1x1(Concat[F_i, T]))`, output `F' + F' * P`, and the
/// stream update `P <- P + FAB(P)`.
pub fn sgm_inject<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    site: usize,
    f: Var<'g, T>,
    prior: Var<'g, T>,
    state: SgmState<'g, T>,
) -> Result<(Var<'g, T>, SgmState<'g, T>)> {
    if f.dims() != state.prior_stream.dims() {
        return Err(Error::shape(
            "sgm_inject",
            format!("features {:?} vs prior stream {:?}", f.dims(), state.prior_stream.dims()),
        ));
    }
    let s = s.child(&format!("inject{site}"));
    let refined = fab(&s.child("fab"), cfg, fuse(&s, "fuse", f, prior)?)?;
    let out = refined.add(refined.mul(state.prior_stream)?)?;
    let p = state.prior_stream;
    let next = SgmState {
        prior_stream: p.add(fab(&s.child("prior_fab"), cfg, p)?)?,
        updates: state.updates + 1,
        ..state
    };
    Ok((out, next))
}
