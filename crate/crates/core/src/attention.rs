//! Attention stack: scaled dot-product attention, multi-head attention, the
//! position-wise FFN, 2D sine positional encodings and the cross-modal
//! attention (CMA) block.
//!
//! Sequences are `N x d_model` row-major matrices, one row per spatial position
//! (positions flattened row-major). A CMA block is a transformer layer with the
//! self-attention removed:
//!
//! ```text
//! f = LayerNorm(D + MHA(D + pe_D, I + pe_I, I))
//! F = LayerNorm(f + FFN(f))
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{uniform_init, ParamId, ParamStore, Session, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ffn_hidden: usize,
    pub layer_norm_epsilon: f64,
    /// Add positional encodings to queries and keys.
    pub use_pos_encoding: bool,
    /// Also add the key-side encoding to the values.
    pub pos_encoding_on_values: bool,
}

impl AttentionConfig {
    /// h = 8, d_model = 256, d_k = d_v = 32.
    pub fn paper() -> Self {
        Self::with_widths(8, 256, 32)
    }

    /// h = 4, d_model = 64, d_k = d_v = 16.
    pub fn desk() -> Self {
        Self::with_widths(4, 64, 16)
    }

    pub fn with_widths(heads: usize, d_model: usize, d_head: usize) -> Self {
        Self {
            heads,
            d_model,
            d_k: d_head,
            d_v: d_head,
            ffn_hidden: 4 * d_model,
            layer_norm_epsilon: 1e-5,
            use_pos_encoding: true,
            pos_encoding_on_values: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument(format!("attention widths must be positive: {self:?}")));
        }
        if self.use_pos_encoding && self.d_model % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be divisible by 4 for 2D positional encoding",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// Per-head projections plus the output projection `W^O: (h*d_v) x d_model`.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        let dm = cfg.d_model;
        let mut proj = |tag: &str, width: usize, rng: &mut _| -> Result<Vec<ParamId>> {
            (0..cfg.heads)
                .map(|i| store.add(format!("{prefix}.{tag}{i}"), uniform_init(rng, &[dm, width], dm)))
                .collect()
        };
        let w_q = proj("w_q", cfg.d_k, rng)?;
        let w_k = proj("w_k", cfg.d_k, rng)?;
        let w_v = proj("w_v", cfg.d_v, rng)?;
        let hv = cfg.heads * cfg.d_v;
        let w_o = store.add(format!("{prefix}.w_o"), uniform_init(rng, &[hv, dm], hv))?;
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(&self.w_q);
        v.extend(&self.w_k);
        v.extend(&self.w_v);
        v.push(self.w_o);
        v
    }
}

/// Two position-wise linear maps with a relu between them.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        let (dm, hid) = (cfg.d_model, cfg.ffn_hidden);
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), uniform_init(rng, &[dm, hid], dm))?,
            b1: store.add(format!("{prefix}.b1"), uniform_init(rng, &[hid], dm))?,
            w2: store.add(format!("{prefix}.w2"), uniform_init(rng, &[hid, dm], hid))?,
            b2: store.add(format!("{prefix}.b2"), uniform_init(rng, &[dm], hid))?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone)]
pub struct CmaParams {
    pub mha: MhaParams,
    pub ffn: FfnParams,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
}

impl CmaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model;
        Ok(Self {
            mha: MhaParams::new(store, &format!("{prefix}.mha"), cfg, rng)?,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), cfg, rng)?,
            norm1_gamma: store.add(format!("{prefix}.norm1.gamma"), Tensor::ones(&[dm]))?,
            norm1_beta: store.add(format!("{prefix}.norm1.beta"), Tensor::zeros(&[dm]))?,
            norm2_gamma: store.add(format!("{prefix}.norm2.gamma"), Tensor::ones(&[dm]))?,
            norm2_beta: store.add(format!("{prefix}.norm2.beta"), Tensor::zeros(&[dm]))?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.mha.ids();
        v.extend(self.ffn.ids());
        v.extend([self.norm1_gamma, self.norm1_beta, self.norm2_gamma, self.norm2_beta]);
        v
    }
}

/// `softmax(scale * Q K^T) V` with row-wise softmax.
pub fn scaled_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("attention q/k", sq, sk));
    }
    if sk[0] != sv[0] {
        return Err(Error::shape("attention k/v", sk, sv));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, scale);
    let weights = tape.softmax(logits, 1)?;
    tape.matmul(weights, v)
}

/// Scaled dot-product attention with temperature `1/sqrt(d_k)`.
pub fn sdpa(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d_k = *tape.shape(q).last().unwrap_or(&1);
    scaled_attention(tape, q, k, v, 1.0 / (d_k as f64).sqrt())
}

fn check_width(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::shape(op, s, &[s.first().copied().unwrap_or(0), width]));
    }
    Ok(())
}

/// Multi-head attention: heads concatenated in index order, then `W^O`.
pub fn mha(sess: &mut Session, q: Var, k: Var, v: Var, params: &MhaParams, cfg: &AttentionConfig) -> Result<Var> {
    for x in [q, k, v] {
        check_width(&sess.tape, x, cfg.d_model, "mha input")?;
    }
    if [params.w_q.len(), params.w_k.len(), params.w_v.len()] != [cfg.heads; 3] {
        return Err(Error::InvalidArgument(format!(
            "mha params hold {} heads, config expects {}",
            params.w_q.len(),
            cfg.heads
        )));
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (wq, wk, wv) = (
            sess.param(params.w_q[i]),
            sess.param(params.w_k[i]),
            sess.param(params.w_v[i]),
        );
        let t = &mut sess.tape;
        let qi = t.matmul(q, wq)?;
        let ki = t.matmul(k, wk)?;
        let vi = t.matmul(v, wv)?;
        heads.push(sdpa(t, qi, ki, vi)?);
    }
    let wo = sess.param(params.w_o);
    let cat = sess.tape.concat(&heads, 1)?;
    sess.tape.matmul(cat, wo)
}

/// `x W + b` for row vectors.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y).to_vec();
    let bb = tape.broadcast_to(b, &shape)?;
    tape.add(y, bb)
}

pub fn ffn(sess: &mut Session, x: Var, params: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        sess.param(params.w1),
        sess.param(params.b1),
        sess.param(params.w2),
        sess.param(params.b2),
    );
    let d_model = sess.tape.shape(w1)[0];
    check_width(&sess.tape, x, d_model, "ffn input")?;
    let t = &mut sess.tape;
    let h = linear(t, x, w1, b1)?;
    let h = t.relu(h);
    linear(t, h, w2, b2)
}

/// Fixed 2D sine/cosine table of shape `(H*W) x d_model`.
///
/// The first `d_model/2` channels encode the row index and the last `d_model/2`
/// the column index. Within each half, channel `2i` is `sin(p / 10000^(2i/half))`
/// and channel `2i+1` the matching cosine.
pub fn pos_encoding_2d(height: usize, width: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_model {d_model} must be a positive multiple of 4"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("empty positional grid".into()));
    }
    let half = d_model / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(height * width * d_model);
    for r in 0..height {
        for c in 0..width {
            for pos in [r as f64, c as f64] {
                for f in &freqs {
                    data.push((pos * f).sin());
                    data.push((pos * f).cos());
                }
            }
        }
    }
    Tensor::new(&[height * width, d_model], data)
}

/// One CMA layer; `d_seq` is the query side, `i_seq` the key/value side.
pub fn cma_block(
    sess: &mut Session,
    d_seq: Var,
    i_seq: Var,
    params: &CmaParams,
    cfg: &AttentionConfig,
    pe_d: Option<Var>,
    pe_i: Option<Var>,
) -> Result<Var> {
    check_width(&sess.tape, d_seq, cfg.d_model, "cma query")?;
    check_width(&sess.tape, i_seq, cfg.d_model, "cma key/value")?;
    let (q, k, v) = if cfg.use_pos_encoding {
        let (pd, pi) = match (pe_d, pe_i) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(
                    "cma block configured with positional encoding but none supplied".into(),
                ))
            }
        };
        let t = &mut sess.tape;
        let q = t.add(d_seq, pd)?;
        let k = t.add(i_seq, pi)?;
        let v = if cfg.pos_encoding_on_values { k } else { i_seq };
        (q, k, v)
    } else {
        (d_seq, i_seq, i_seq)
    };
    let attn = mha(sess, q, k, v, &params.mha, cfg)?;
    let (g1, b1) = (sess.param(params.norm1_gamma), sess.param(params.norm1_beta));
    let res = sess.tape.add(d_seq, attn)?;
    let f = sess.tape.layer_norm(res, g1, b1, cfg.layer_norm_epsilon)?;
    let ff = ffn(sess, f, &params.ffn)?;
    let (g2, b2) = (sess.param(params.norm2_gamma), sess.param(params.norm2_beta));
    let res = sess.tape.add(f, ff)?;
    sess.tape.layer_norm(res, g2, b2, cfg.layer_norm_epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let mut t = Tape::new();
        let q = t.constant(mat(3, 2, |i, j| (i * 7 + j) as f64 - 4.0));
        let k = t.constant(mat(1, 2, |_, j| j as f64 + 0.5));
        let v = t.constant(mat(1, 3, |_, j| [2.0, -1.0, 0.25][j]));
        let out = sdpa(&mut t, q, k, v).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(out).row(i), &[2.0, -1.0, 0.25]);
        }
    }

    #[test]
    fn zero_logits_give_column_mean() {
        let mut t = Tape::new();
        let q = t.constant(mat(2, 2, |_, j| if j == 0 { 1.0 } else { 0.0 }));
        let k = t.constant(mat(4, 2, |i, j| if j == 1 { i as f64 } else { 0.0 }));
        let v = t.constant(mat(4, 2, |i, j| (i * 2 + j) as f64));
        let out = sdpa(&mut t, q, k, v).unwrap();
        for i in 0..2 {
            let r = t.value(out).row(i);
            assert!((r[0] - 3.0).abs() < 1e-12 && (r[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[2, 3]));
        let k = t.constant(Tensor::zeros(&[4, 2]));
        let v = t.constant(Tensor::zeros(&[4, 2]));
        assert!(sdpa(&mut t, q, k, v).is_err());
        let k = t.constant(Tensor::zeros(&[4, 3]));
        let v = t.constant(Tensor::zeros(&[5, 2]));
        assert!(sdpa(&mut t, q, k, v).is_err());
    }

    #[test]
    fn pos_encoding_rejects_bad_width() {
        assert!(pos_encoding_2d(2, 2, 6).is_err());
        assert!(pos_encoding_2d(2, 2, 8).is_ok());
    }

    #[test]
    fn cma_requires_encodings_when_configured() {
        let cfg = AttentionConfig::with_widths(1, 4, 2);
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let p = CmaParams::new(&mut store, "cma", &cfg, &mut rng).unwrap();
        let mut sess = Session::new(&store, false);
        let d = sess.constant(Tensor::zeros(&[3, 4]));
        let i = sess.constant(Tensor::zeros(&[2, 4]));
        assert!(cma_block(&mut sess, d, i, &p, &cfg, None, None).is_err());
        let wrong = sess.constant(Tensor::zeros(&[2, 3]));
        assert!(cma_block(&mut sess, d, wrong, &p, &cfg, None, None).is_err());
    }
}
