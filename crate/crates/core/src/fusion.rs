//! Dual fusion of RGB and depth feature maps.
//!
//! The cross-modal integration module (CMIM) reduces both maps to `C_i`
//! channels with a shared 1x1 convolution, flattens them, runs a stack of CMA
//! layers with depth as the query and RGB as key/value, then expands back to
//! `C` channels. The specificity preserving module (SPM) re-injects the
//! modality-specific maps:
//!
//! ```text
//! F1      = D0 + V (.) F0          V in R^C, broadcast over H x W
//! F_final = alpha * I0 + beta * F1
//! ```

use rand::Rng;

use crate::attention::{cma_block, pos_encoding_2d, AttentionConfig, CmaParams};
use crate::error::{Error, Result};
use crate::numcore::{uniform_init, ParamId, ParamStore, Session, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CmimConfig {
    /// Backbone channel count `C`.
    pub channels: usize,
    /// CMA stack depth (1..=3).
    pub layers: usize,
    /// Attention widths; `d_model` is the reduced channel count `C_i`.
    pub attention: AttentionConfig,
    /// Add positional encodings again at every layer of the stack.
    pub pos_encoding_every_layer: bool,
}

impl CmimConfig {
    pub fn new(channels: usize, attention: AttentionConfig) -> Self {
        Self {
            channels,
            layers: 2,
            attention,
            pos_encoding_every_layer: true,
        }
    }

    pub fn inner_channels(&self) -> usize {
        self.attention.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.layers) {
            return Err(Error::InvalidArgument(format!(
                "CMA layer count {} outside 1..=3",
                self.layers
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("zero fusion channels".into()));
        }
        self.attention.validate()
    }
}

#[derive(Debug, Clone)]
pub struct CmimParams {
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub cma_layers: Vec<CmaParams>,
    pub config: CmimConfig,
}

impl CmimParams {
    pub fn new(store: &mut ParamStore, prefix: &str, config: CmimConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, ci) = (config.channels, config.inner_channels());
        let reduce_w = store.add(format!("{prefix}.reduce.weight"), uniform_init(rng, &[ci, c, 1, 1], c))?;
        let reduce_b = store.add(format!("{prefix}.reduce.bias"), uniform_init(rng, &[ci], c))?;
        let cma_layers = (0..config.layers)
            .map(|l| CmaParams::new(store, &format!("{prefix}.cma{l}"), &config.attention, rng))
            .collect::<Result<Vec<_>>>()?;
        let expand_w = store.add(format!("{prefix}.expand.weight"), uniform_init(rng, &[c, ci, 1, 1], ci))?;
        let expand_b = store.add(format!("{prefix}.expand.bias"), uniform_init(rng, &[c], ci))?;
        Ok(Self {
            reduce_w,
            reduce_b,
            expand_w,
            expand_b,
            cma_layers,
            config,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.reduce_w, self.reduce_b];
        for l in &self.cma_layers {
            v.extend(l.ids());
        }
        v.extend([self.expand_w, self.expand_b]);
        v
    }
}

#[derive(Debug, Clone)]
pub struct SpmParams {
    pub filter: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl SpmParams {
    /// `V = 0.01`, `alpha = beta = 0.5`.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            filter: store.add(format!("{prefix}.V"), Tensor::full(&[channels], 0.01))?,
            alpha: store.add(format!("{prefix}.alpha"), Tensor::scalar(0.5))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::scalar(0.5))?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.filter, self.alpha, self.beta]
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn map_to_seq(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Cross-modal integration: depth queries attend over RGB keys/values.
pub fn cmim(sess: &mut Session, i0: Var, d0: Var, params: &CmimParams) -> Result<Var> {
    same_shape(&sess.tape, "cmim", i0, d0)?;
    let shape = sess.tape.shape(i0).to_vec();
    let cfg = &params.config;
    if shape.len() != 3 || shape[0] != cfg.channels {
        return Err(Error::shape("cmim", &shape, &[cfg.channels, 0, 0]));
    }
    let (h, w) = (shape[1], shape[2]);
    let ci = cfg.inner_channels();
    let (rw, rb) = (sess.param(params.reduce_w), sess.param(params.reduce_b));
    let i1 = sess.tape.conv2d(i0, rw, Some(rb), 1, 0)?;
    let d1 = sess.tape.conv2d(d0, rw, Some(rb), 1, 0)?;
    let i2 = map_to_seq(&mut sess.tape, i1)?;
    let mut q = map_to_seq(&mut sess.tape, d1)?;

    let (pe, zero) = if cfg.attention.use_pos_encoding {
        let pe = sess.constant(pos_encoding_2d(h, w, ci)?);
        let zero = sess.constant(Tensor::zeros(&[h * w, ci]));
        (Some(pe), Some(zero))
    } else {
        (None, None)
    };
    for (l, layer) in params.cma_layers.iter().enumerate() {
        let enc = if l == 0 || cfg.pos_encoding_every_layer { pe } else { zero };
        q = cma_block(sess, q, i2, layer, &cfg.attention, enc, enc)?;
    }
    let back = sess.tape.transpose(q)?;
    let back = sess.tape.reshape(back, &[ci, h, w])?;
    let (ew, eb) = (sess.param(params.expand_w), sess.param(params.expand_b));
    sess.tape.conv2d(back, ew, Some(eb), 1, 0)
}

/// `F1 = base + V (.) F0`, `F_final = alpha * other + beta * F1`.
fn specificity_blend(
    tape: &mut Tape,
    f0: Var,
    other: Var,
    base: Var,
    filter: Var,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    same_shape(tape, "spm", f0, other)?;
    same_shape(tape, "spm", f0, base)?;
    let shape = tape.shape(f0).to_vec();
    let c = tape.value(filter).numel();
    if shape.len() != 3 || shape[0] != c {
        return Err(Error::shape("spm filter", &shape, &[c]));
    }
    let v3 = tape.reshape(filter, &[c, 1, 1])?;
    let vb = tape.broadcast_to(v3, &shape)?;
    let scaled = tape.mul(vb, f0)?;
    let f1 = tape.add(base, scaled)?;
    let ab = tape.broadcast_to(alpha, &shape)?;
    let bb = tape.broadcast_to(beta, &shape)?;
    let left = tape.mul(ab, other)?;
    let right = tape.mul(bb, f1)?;
    tape.add(left, right)
}

/// Specificity preserving module with depth inside the residual and RGB outside.
pub fn spm(sess: &mut Session, f0: Var, i0: Var, d0: Var, params: &SpmParams) -> Result<Var> {
    let (v, a, b) = bind_spm(sess, params);
    specificity_blend(&mut sess.tape, f0, i0, d0, v, a, b)
}

/// Ablation variant with the modality roles exchanged:
/// `F1 = I0 + V (.) F0`, `F_final = alpha * D0 + beta * F1`.
pub fn spm_swapped(sess: &mut Session, f0: Var, i0: Var, d0: Var, params: &SpmParams) -> Result<Var> {
    let (v, a, b) = bind_spm(sess, params);
    specificity_blend(&mut sess.tape, f0, d0, i0, v, a, b)
}

fn bind_spm(sess: &mut Session, p: &SpmParams) -> (Var, Var, Var) {
    (sess.param(p.filter), sess.param(p.alpha), sess.param(p.beta))
}

/// Element-wise addition baseline.
pub fn base_fuse(tape: &mut Tape, i0: Var, d0: Var) -> Result<Var> {
    same_shape(tape, "base_fuse", i0, d0)?;
    tape.add(i0, d0)
}

/// Which fusion the network applies; everything except `Full` is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// CMIM followed by SPM.
    Full,
    /// `I0 + D0`.
    Base,
    /// CMIM output alone.
    CmimOnly,
    /// SPM over the element-wise sum in place of the CMIM output.
    SpmOnly,
    /// CMIM followed by the role-swapped SPM.
    SwappedSpm,
}

impl FusionMode {
    pub fn uses_cmim(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::CmimOnly | FusionMode::SwappedSpm)
    }

    pub fn uses_spm(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::SpmOnly | FusionMode::SwappedSpm)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::Base => "base",
            FusionMode::CmimOnly => "cmim-only",
            FusionMode::SpmOnly => "spm-only",
            FusionMode::SwappedSpm => "swapped-spm",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => FusionMode::Full,
            "base" => FusionMode::Base,
            "cmim-only" => FusionMode::CmimOnly,
            "spm-only" => FusionMode::SpmOnly,
            "swapped-spm" => FusionMode::SwappedSpm,
            other => return Err(Error::InvalidArgument(format!("unknown fusion mode `{other}`"))),
        })
    }
}

/// The fusion network. One instance serves both the template and the search branch.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub mode: FusionMode,
    pub cmim: Option<CmimParams>,
    pub spm: Option<SpmParams>,
}

impl FusionNet {
    pub fn new(store: &mut ParamStore, mode: FusionMode, config: CmimConfig, rng: &mut impl Rng) -> Result<Self> {
        let channels = config.channels;
        let cmim = if mode.uses_cmim() {
            Some(CmimParams::new(store, "fusion.cmim", config, rng)?)
        } else {
            None
        };
        let spm = if mode.uses_spm() {
            Some(SpmParams::new(store, "fusion.spm", channels)?)
        } else {
            None
        };
        Ok(Self { mode, cmim, spm })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.cmim.as_ref().map(CmimParams::ids).unwrap_or_default();
        v.extend(self.spm.as_ref().map(SpmParams::ids).unwrap_or_default());
        v
    }

    pub fn forward(&self, sess: &mut Session, i0: Var, d0: Var) -> Result<Var> {
        let cmim_p = || self.cmim.as_ref().expect("mode uses cmim");
        let spm_p = || self.spm.as_ref().expect("mode uses spm");
        match self.mode {
            FusionMode::Base => base_fuse(&mut sess.tape, i0, d0),
            FusionMode::CmimOnly => cmim(sess, i0, d0, cmim_p()),
            FusionMode::Full => {
                let f0 = cmim(sess, i0, d0, cmim_p())?;
                spm(sess, f0, i0, d0, spm_p())
            }
            FusionMode::SwappedSpm => {
                let f0 = cmim(sess, i0, d0, cmim_p())?;
                spm_swapped(sess, f0, i0, d0, spm_p())
            }
            FusionMode::SpmOnly => {
                let f0 = base_fuse(&mut sess.tape, i0, d0)?;
                spm(sess, f0, i0, d0, spm_p())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spm_case(v: f64, alpha: f64, beta: f64) -> (ParamStore, SpmParams) {
        let mut store = ParamStore::new();
        let p = SpmParams::new(&mut store, "spm", 2).unwrap();
        store.set(p.filter, Tensor::full(&[2], v)).unwrap();
        store.set(p.alpha, Tensor::scalar(alpha)).unwrap();
        store.set(p.beta, Tensor::scalar(beta)).unwrap();
        (store, p)
    }

    fn map(vals: &[f64]) -> Tensor {
        Tensor::new(&[2, 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn spm_initial_values() {
        let mut store = ParamStore::new();
        let p = SpmParams::new(&mut store, "fusion.spm", 3).unwrap();
        assert_eq!(store.value(p.filter).data(), &[0.01; 3]);
        assert_eq!(store.value(p.alpha).item(), 0.5);
        assert_eq!(store.value(p.beta).item(), 0.5);
        assert_eq!(store.name(p.filter), "fusion.spm.V");
    }

    #[test]
    fn spm_worked_example() {
        let (store, p) = spm_case(0.01, 0.5, 0.5);
        let mut s = Session::new(&store, false);
        let (f0, i0, d0) = (s.constant(map(&[3.0, 4.0])), s.constant(map(&[5.0, 6.0])), s.constant(map(&[1.0, 2.0])));
        let out = spm(&mut s, f0, i0, d0, &p).unwrap();
        let d = s.value(out).data();
        assert!((d[0] - 3.015).abs() < 1e-12 && (d[1] - 4.02).abs() < 1e-12, "{d:?}");
        let sw = spm_swapped(&mut s, f0, i0, d0, &p).unwrap();
        let d = s.value(sw).data();
        assert!((d[0] - 3.015).abs() < 1e-12 && (d[1] - 4.02).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn spm_degenerate_weights() {
        let (store, p) = spm_case(0.0, 1.0, 0.0);
        let mut s = Session::new(&store, false);
        let (f0, i0, d0) = (s.constant(map(&[3.0, 4.0])), s.constant(map(&[5.0, 6.0])), s.constant(map(&[1.0, 2.0])));
        let out = spm(&mut s, f0, i0, d0, &p).unwrap();
        assert_eq!(s.value(out).data(), &[5.0, 6.0]);
        let out = spm_swapped(&mut s, f0, i0, d0, &p).unwrap();
        assert_eq!(s.value(out).data(), &[1.0, 2.0]);

        let (store, p) = spm_case(0.0, 0.0, 1.0);
        let mut s = Session::new(&store, false);
        let (f0, i0, d0) = (s.constant(map(&[3.0, 4.0])), s.constant(map(&[5.0, 6.0])), s.constant(map(&[1.0, 2.0])));
        let out = spm(&mut s, f0, i0, d0, &p).unwrap();
        assert_eq!(s.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn spm_channel_mismatch() {
        let (store, p) = spm_case(0.01, 0.5, 0.5);
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(spm(&mut s, x, x, x, &p).is_err());
    }

    #[test]
    fn base_fuse_examples() {
        let mut t = Tape::new();
        let a = t.constant(map(&[1.5, -2.0]));
        let b = t.constant(map(&[-1.5, 2.0]));
        let z = t.constant(map(&[0.0, 0.0]));
        let s = base_fuse(&mut t, a, b).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.0]);
        let s = base_fuse(&mut t, a, z).unwrap();
        assert_eq!(t.value(s).data(), &[1.5, -2.0]);
        let ab = base_fuse(&mut t, a, b).unwrap();
        let ba = base_fuse(&mut t, b, a).unwrap();
        assert_eq!(t.value(ab), t.value(ba));
        let bad = t.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(base_fuse(&mut t, a, bad).is_err());
    }

    #[test]
    fn cma_layer_count_is_bounded() {
        let mut cfg = CmimConfig::new(8, AttentionConfig::with_widths(2, 8, 4));
        cfg.layers = 4;
        assert!(cfg.validate().is_err());
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
    }
}
