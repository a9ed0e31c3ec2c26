//! Classification and box-regression heads plus the training losses.
//!
//! The classifier filter is not a network parameter: it is fitted to the
//! template by a few plain gradient steps on the hinge objective
//!
//! ```text
//! r(s, z) = s - z        if z > T
//!         = max(0, s)    otherwise
//! J(f)    = (1/N) * sum_cells r(f * x, z)^2
//! ```
//!
//! and the steps are unrolled on the tape so training can backpropagate
//! through them into the fusion and backbone.

use rand::Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numcore::{uniform_init, ParamId, ParamStore, Session, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    /// Target/background threshold `T`.
    pub threshold: f64,
    /// Gaussian std as a fraction of `sqrt(w * h)`.
    pub sigma_cells: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            sigma_cells: 0.25,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || !(self.sigma_cells > 0.0) {
            return Err(Error::InvalidArgument(format!("bad label config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub n_iter: usize,
    pub step: f64,
    /// Odd spatial extent of the filter.
    pub kernel: usize,
    /// Added to the feature energy before normalising.
    pub epsilon: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_iter: 5,
            step: 0.5,
            kernel: 3,
            epsilon: 1e-8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || !(self.step > 0.0) || self.kernel % 2 == 0 || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("bad filter config {self:?}")));
        }
        Ok(())
    }
}

/// Gaussian bump on an `h x w` grid of cell centres; `center` in cell units.
pub fn gaussian_map(h: usize, w: usize, center: (f64, f64), sigma: f64) -> Tensor {
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let d2 = (r - center.0).powi(2) + (c - center.1).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Tensor::new(&[h, w], data).expect("positive map extents")
}

/// `(row, col)` of the cell containing the box centre.
pub fn center_cell(b: &BBox, stride: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let (cx, cy) = b.center();
    let (col, row) = (cx / stride as f64, cy / stride as f64);
    if !(col >= 0.0 && row >= 0.0 && col < w as f64 && row < h as f64) {
        return Err(Error::InvalidArgument(format!("box centre ({cx}, {cy}) outside the {h}x{w} map")));
    }
    Ok((row as usize, col as usize))
}

/// Labels for a target at `gt` (patch pixels): peak 1 at the centre of the
/// cell containing the target centre, std `sigma_cells * sqrt(w h) / stride`.
pub fn gaussian_labels(gt: &BBox, h: usize, w: usize, stride: usize, sigma_cells: f64) -> Result<Tensor> {
    if !(gt.w > 0.0 && gt.h > 0.0) || !gt.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate label box {gt:?}")));
    }
    let (r, c) = center_cell(gt, stride, h, w)?;
    let sigma = sigma_cells * (gt.w * gt.h).sqrt() / stride as f64;
    Ok(gaussian_map(h, w, (r as f64 + 0.5, c as f64 + 0.5), sigma))
}

pub fn hinge_residual(s: f64, z: f64, threshold: f64) -> f64 {
    if z > threshold {
        s - z
    } else {
        s.max(0.0)
    }
}

/// Elementwise hinge residual on the tape; `z` has the shape of `s`.
pub fn hinge_residual_var(tape: &mut Tape, s: Var, z: &Tensor, threshold: f64) -> Result<Var> {
    let fg = z.map(|v| if v > threshold { 1.0 } else { 0.0 });
    let bg = fg.map(|v| 1.0 - v);
    let zc = tape.constant(z.clone());
    let diff = tape.sub(s, zc)?;
    let fg = tape.constant(fg);
    let fg_part = tape.mul(fg, diff)?;
    let pos = tape.relu(s);
    let bg = tape.constant(bg);
    let bg_part = tape.mul(bg, pos)?;
    tape.add(fg_part, bg_part)
}

/// im2col columns of `x` (C x h x w), scaled so the mean squared column norm is 1.
pub fn feature_columns(tape: &mut Tape, x: Var, cfg: &FilterConfig) -> Result<Var> {
    let cols = tape.im2col(x, cfg.kernel, 1, cfg.kernel / 2)?;
    let k = tape.shape(cols)[0] as f64;
    let sq = tape.mul(cols, cols)?;
    let energy = tape.mean(sq);
    let energy = tape.scale(energy, k);
    let energy = tape.shift(energy, cfg.epsilon);
    let inv = tape.powf(energy, -0.5);
    let shape = tape.shape(cols).to_vec();
    let inv = tape.broadcast_to(inv, &shape)?;
    tape.mul(cols, inv)
}

/// One training sample for the filter: normalised columns and its label map.
#[derive(Debug, Clone)]
pub struct FilterSample {
    pub cols: Var,
    pub labels: Tensor,
}

fn stacked(tape: &mut Tape, samples: &[FilterSample]) -> Result<(Var, Tensor)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("filter learning needs at least one sample".into()));
    }
    let mut labels = Vec::new();
    for s in samples {
        if tape.shape(s.cols)[1] != s.labels.numel() {
            return Err(Error::shape("filter sample", tape.shape(s.cols), s.labels.shape()));
        }
        labels.extend_from_slice(s.labels.data());
    }
    let cols = if samples.len() == 1 {
        samples[0].cols
    } else {
        let v: Vec<Var> = samples.iter().map(|s| s.cols).collect();
        tape.concat(&v, 1)?
    };
    let n = labels.len();
    Ok((cols, Tensor::new(&[1, n], labels)?))
}

/// `J(f)` over all cells of all samples.
pub fn filter_objective(tape: &mut Tape, f: Var, samples: &[FilterSample], threshold: f64) -> Result<Var> {
    let (cols, z) = stacked(tape, samples)?;
    let s = tape.matmul(f, cols)?;
    let r = hinge_residual_var(tape, s, &z, threshold)?;
    let sq = tape.mul(r, r)?;
    Ok(tape.mean(sq))
}

/// Runs `n_iter` gradient steps on `J` starting from `init` (zeros when
/// `None`). Returns every iterate, `f_0` first, so the result has
/// `n_iter + 1` entries. Each filter is a `1 x C k^2` row.
pub fn learn_filter(
    tape: &mut Tape,
    samples: &[FilterSample],
    init: Option<Var>,
    n_iter: usize,
    threshold: f64,
    cfg: &FilterConfig,
) -> Result<Vec<Var>> {
    let (cols, z) = stacked(tape, samples)?;
    if tape.value(cols).data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter features".into()));
    }
    let k = tape.shape(cols)[0];
    let n = z.numel() as f64;
    let f0 = match init {
        Some(f) => {
            if tape.shape(f) != [1, k] {
                return Err(Error::shape("learn_filter init", tape.shape(f), &[1, k]));
            }
            f
        }
        None => tape.constant(Tensor::zeros(&[1, k])),
    };
    let cols_t = tape.transpose(cols)?;
    let mut iterates = vec![f0];
    let mut f = f0;
    for _ in 0..n_iter {
        let s = tape.matmul(f, cols)?;
        let r = hinge_residual_var(tape, s, &z, threshold)?;
        // dJ/df = (2/N) r cols^T; the hinge's derivative is already folded into r.
        let g = tape.matmul(r, cols_t)?;
        let g = tape.scale(g, 2.0 * cfg.step / n);
        f = tape.sub(f, g)?;
        iterates.push(f);
    }
    Ok(iterates)
}

/// Correlation score map `h x w` of filter `f` over normalised columns.
pub fn classify(tape: &mut Tape, f: Var, cols: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.matmul(f, cols)?;
    tape.reshape(s, &[h, w])
}

/// Row-major index of the maximum; the lowest index wins ties.
pub fn argmax(s: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in s.data().iter().enumerate() {
        if v > s.data()[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub reg_w: ParamId,
    pub reg_b: ParamId,
    /// Scalar multiplying the normalised classifier columns. The descent
    /// step acts on `gain^2`, so this lets training tune how far the fixed
    /// number of filter steps gets.
    pub feature_gain: ParamId,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &FilterConfig, rng: &mut impl Rng) -> Result<Self> {
        let k = channels * cfg.kernel * cfg.kernel;
        let w = uniform_init(rng, &[4, k], k).map(|v| 0.1 * v);
        Ok(Self {
            reg_w: store.add("model.head.reg.weight", w)?,
            reg_b: store.add("model.head.reg.bias", Tensor::zeros(&[4]))?,
            feature_gain: store.add("model.head.feature_gain", Tensor::scalar(1.0))?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.reg_w, self.reg_b, self.feature_gain]
    }
}

/// `(dx, dy, dw, dh)` as a `4 x 1` column, read from the features around `peak`.
pub fn regression_deltas(sess: &mut Session, cols: Var, peak: usize, head: &HeadParams) -> Result<Var> {
    let n = sess.tape.shape(cols)[1];
    if peak >= n {
        return Err(Error::InvalidArgument(format!("peak cell {peak} outside a map of {n} cells")));
    }
    let mut onehot = Tensor::zeros(&[n, 1]);
    onehot.data_mut()[peak] = 1.0;
    let sel = sess.constant(onehot);
    let col = sess.tape.matmul(cols, sel)?;
    let (w, b) = (sess.param(head.reg_w), sess.param(head.reg_b));
    let d = sess.tape.matmul(w, col)?;
    let b = sess.tape.reshape(b, &[4, 1])?;
    sess.tape.add(d, b)
}

fn cell_center(peak: (usize, usize), stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((peak.1 as f64 + 0.5) * s, (peak.0 as f64 + 0.5) * s)
}

/// Box `(x, y, w, h)` as a `4 x 1` column on the tape:
/// centre = cell centre + d_xy * stride, size = prev size * exp(d_wh).
pub fn decode_box_var(tape: &mut Tape, deltas: Var, peak: (usize, usize), stride: usize, prev: &BBox) -> Result<Var> {
    let s = stride as f64;
    let (cx, cy) = cell_center(peak, stride);
    let pick_xy = tape.constant(Tensor::from_rows(&[&[s, 0.0, 0.0, 0.0], &[0.0, s, 0.0, 0.0]])?);
    let pick_wh = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]])?);
    let xy = tape.matmul(pick_xy, deltas)?;
    let origin = tape.constant(Tensor::new(&[2, 1], vec![cx, cy])?);
    let center = tape.add(xy, origin)?;
    let log_wh = tape.matmul(pick_wh, deltas)?;
    let ratio = tape.exp(log_wh);
    let prev_wh = tape.constant(Tensor::new(&[2, 1], vec![prev.w, prev.h])?);
    let wh = tape.mul(ratio, prev_wh)?;
    let cwh = tape.concat(&[center, wh], 0)?;
    let to_corner = tape.constant(Tensor::from_rows(&[
        &[1.0, 0.0, -0.5, 0.0],
        &[0.0, 1.0, 0.0, -0.5],
        &[0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 1.0],
    ])?);
    tape.matmul(to_corner, cwh)
}

/// Inference-side decoding; the result is clamped to `[0, bounds]`.
pub fn regress_bbox(deltas: [f64; 4], peak: (usize, usize), stride: usize, prev: &BBox, bounds: (f64, f64)) -> BBox {
    let (cx, cy) = cell_center(peak, stride);
    let s = stride as f64;
    let b = BBox::from_center(
        cx + deltas[0] * s,
        cy + deltas[1] * s,
        prev.w * deltas[2].exp(),
        prev.h * deltas[3].exp(),
    );
    b.clamp_to(bounds.0, bounds.1, 1.0)
}

/// Mean over iterations of the summed squared hinge residuals.
/// `scores[i][j]` is the score map of test sample `j` under iterate `i`.
pub fn loss_cls(tape: &mut Tape, scores: &[Vec<Var>], labels: &[Tensor], threshold: f64) -> Result<Var> {
    if scores.is_empty() || labels.is_empty() {
        return Err(Error::InvalidArgument("classification loss needs at least one sample".into()));
    }
    let mut terms = Vec::new();
    for iter in scores {
        if iter.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} score maps for {} label maps",
                iter.len(),
                labels.len()
            )));
        }
        for (&s, z) in iter.iter().zip(labels) {
            let r = hinge_residual_var(tape, s, z, threshold)?;
            let sq = tape.mul(r, r)?;
            terms.push(tape.sum(sq));
        }
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / scores.len() as f64))
}

/// Mean over samples of the mean squared coordinate error. Boxes are
/// `4 x 1` columns already divided by the patch side.
pub fn loss_bbox(tape: &mut Tape, pred: &[Var], gt: &[Tensor]) -> Result<Var> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, g) in pred.iter().zip(gt) {
        let g = tape.constant(g.clone());
        let d = tape.sub(p, g)?;
        let sq = tape.mul(d, d)?;
        terms.push(tape.mean(sq));
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / pred.len() as f64))
}

pub fn loss_total(tape: &mut Tape, l_cls: Var, l_bbox: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(l_cls, lambda);
    tape.add(weighted, l_bbox)
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Patch box as a normalised `4 x 1` column.
pub fn box_column(b: &BBox, patch: f64) -> Tensor {
    Tensor::new(&[4, 1], vec![b.x / patch, b.y / patch, b.w / patch, b.h / patch]).expect("4 x 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_branches() {
        assert!((hinge_residual(0.5, 0.8, 0.05) + 0.3).abs() < 1e-12);
        assert_eq!(hinge_residual(0.3, 0.02, 0.05), 0.3);
        assert_eq!(hinge_residual(-0.2, 0.02, 0.05), 0.0);
    }

    #[test]
    fn gaussian_example() {
        let z = gaussian_map(5, 5, (2.5, 2.5), 1.0);
        assert_eq!(z.at2(2, 2), 1.0);
        assert!((z.at2(2, 3) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax(&Tensor::full(&[3, 3], 0.7)), 0);
        assert_eq!(argmax(&Tensor::from_rows(&[&[0.0, 2.0], &[2.0, 1.0]]).unwrap()), 1);
    }

    #[test]
    fn zero_deltas_center_on_peak() {
        let prev = BBox::new(0.0, 0.0, 10.0, 6.0);
        let b = regress_bbox([0.0; 4], (2, 3), 8, &prev, (96.0, 96.0));
        assert_eq!(b.center(), (28.0, 20.0));
        assert_eq!((b.w, b.h), (10.0, 6.0));
    }

    #[test]
    fn decode_matches_inference_path() {
        let mut tape = Tape::new();
        let d = [0.3, -0.2, 0.1, -0.4];
        let dv = tape.constant(Tensor::new(&[4, 1], d.to_vec()).unwrap());
        let prev = BBox::new(5.0, 5.0, 12.0, 20.0);
        let v = decode_box_var(&mut tape, dv, (4, 5), 8, &prev).unwrap();
        let b = regress_bbox(d, (4, 5), 8, &prev, (1e6, 1e6));
        let got = tape.value(v).data().to_vec();
        for (g, e) in got.iter().zip([b.x, b.y, b.w, b.h]) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
