//! Self-contained verification suites: published table arithmetic, metric
//! oracles and gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{parse_ini, Reader};
use crate::attention::{cma_block, pos_encoding_2d, AttentionConfig, CmaParams};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::evalkit::{f_score, iou, pr_re_f, success_auc, Prediction, SWEEP_POINTS};
use crate::fusion::{cmim, spm, CmimConfig, CmimParams, SpmParams};
use crate::model::{
    box_column, classify, decode_box_var, feature_columns, gaussian_labels, learn_filter, loss_bbox, loss_cls,
    loss_total, regression_deltas, Backbone, BackboneConfig, FilterConfig, FilterSample, HeadParams, LabelConfig,
    Model, ModelConfig,
};
use crate::numcore::{
    finite_diff_check, finite_diff_check_params, GradCheckConfig, ParamId, ParamStore, Session, Tape, Tensor, Var,
};
use crate::pipeline::{make_training_pair, TrainConfig};
use crate::synthdata::{generate, Preset, SceneSpec};

/// The bundled table fixture.
pub const REFERENCE_TABLES: &str = include_str!("../../fixtures/reference_tables.txt");

/// Tolerance between a recomputed and a printed three-decimal F-score.
pub const TABLE_TOLERANCE: f64 = 1e-3;
/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Gradcheck,
    Metrics,
    Tables,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gradcheck" => Scope::Gradcheck,
            "metrics" => Scope::Metrics,
            "tables" => Scope::Tables,
            "all" => Scope::All,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown verify scope `{other}` (gradcheck, metrics, tables, all)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

pub fn run(scope: Scope) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Tables | Scope::All) {
        out.extend(table_checks(&parse_table_rows(REFERENCE_TABLES, "reference_tables.txt")?));
    }
    if matches!(scope, Scope::Metrics | Scope::All) {
        out.extend(metric_checks(20, 0));
    }
    if matches!(scope, Scope::Gradcheck | Scope::All) {
        out.extend(gradcheck_checks()?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tables

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub benchmark: String,
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub printed_f: f64,
}

impl TableRow {
    pub fn computed_f(&self) -> f64 {
        f_score(self.precision, self.recall)
    }
}

/// `[benchmark]` sections of `method = pr, re, f` rows.
pub fn parse_table_rows(text: &str, path: &str) -> Result<Vec<TableRow>> {
    let r = Reader { path };
    let mut rows = Vec::new();
    for s in parse_ini(text, path)? {
        for e in &s.entries {
            if s.name.is_empty() {
                return Err(r.error(e, "row outside a [benchmark] section"));
            }
            let v = e
                .value
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|err| r.error(e, format!("bad number: {err}")))?;
            let [precision, recall, printed_f] = v[..] else {
                return Err(r.error(e, format!("expected `pr, re, f`, got {} values", v.len())));
            };
            rows.push(TableRow {
                benchmark: s.name.clone(),
                method: e.key.clone(),
                precision,
                recall,
                printed_f,
            });
        }
    }
    Ok(rows)
}

pub fn table_checks(rows: &[TableRow]) -> Vec<Check> {
    rows.iter()
        .map(|row| {
            let f = row.computed_f();
            let diff = (f - row.printed_f).abs();
            Check {
                suite: "tables",
                name: format!("{}/{}", row.benchmark, row.method),
                // the small slack absorbs binary representation of the decimals
                passed: diff <= TABLE_TOLERANCE + 1e-12,
                detail: format!(
                    "F({:.3}, {:.3}) = {f:.4}, printed {:.3}, |diff| = {diff:.4}",
                    row.precision, row.recall, row.printed_f
                ),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// metrics

/// A random 10-frame instance with absent frames, misses and tied confidences.
pub fn random_instance(rng: &mut impl Rng, frames: usize) -> (Vec<Prediction>, Vec<Option<BBox>>) {
    let mut gt = Vec::with_capacity(frames);
    let mut trace = Vec::with_capacity(frames);
    for _ in 0..frames {
        let g = if rng.gen_bool(0.8) {
            Some(BBox::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(2.0..20.0),
                rng.gen_range(2.0..20.0),
            ))
        } else {
            None
        };
        let p = if rng.gen_bool(0.85) {
            let base = g.unwrap_or(BBox::new(20.0, 20.0, 10.0, 10.0));
            let j = rng.gen_range(0.0..8.0);
            let b = BBox::new(
                base.x + rng.gen_range(-j..=j),
                base.y + rng.gen_range(-j..=j),
                base.w * rng.gen_range(0.7..1.3),
                base.h * rng.gen_range(0.7..1.3),
            );
            // every other confidence lands exactly on a sweep threshold
            let conf = if rng.gen_bool(0.5) {
                rng.gen_range(0..SWEEP_POINTS) as f64 / (SWEEP_POINTS - 1) as f64
            } else {
                rng.gen_range(0.0..1.0)
            };
            Prediction::present(b, conf)
        } else {
            Prediction::absent()
        };
        gt.push(g);
        trace.push(p);
    }
    (trace, gt)
}

/// Straight double loop over thresholds and frames.
fn brute_force_pr_re(trace: &[Prediction], gt: &[Option<BBox>]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for k in 0..SWEEP_POINTS {
        let tau = k as f64 / (SWEEP_POINTS - 1) as f64;
        let mut reported = 0usize;
        let mut visible = 0usize;
        let mut pr_sum = 0.0;
        let mut re_sum = 0.0;
        for t in 0..gt.len() {
            let shown = match trace[t].bbox {
                Some(b) if trace[t].confidence >= tau => Some(b),
                _ => None,
            };
            if gt[t].is_some() {
                visible += 1;
            }
            if let Some(b) = shown {
                reported += 1;
                let omega = match gt[t] {
                    Some(g) => iou(&b, &g),
                    None => 0.0,
                };
                pr_sum += omega;
                if gt[t].is_some() {
                    re_sum += omega;
                }
            }
        }
        let pr = if reported == 0 { 0.0 } else { pr_sum / reported as f64 };
        let re = if visible == 0 { 0.0 } else { re_sum / visible as f64 };
        let f = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
        out.push((pr, re, f));
    }
    out
}

fn brute_force_success(overlaps: &[f64]) -> Vec<f64> {
    (0..SWEEP_POINTS)
        .map(|k| {
            let theta = k as f64 / (SWEEP_POINTS - 1) as f64;
            let mut hits = 0;
            for &s in overlaps {
                if s > theta {
                    hits += 1;
                }
            }
            hits as f64 / overlaps.len() as f64
        })
        .collect()
}

pub fn metric_checks(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for i in 0..instances {
        let (trace, gt) = random_instance(&mut rng, 10);
        let expected = brute_force_pr_re(&trace, &gt);
        let (passed, detail) = match pr_re_f(&trace, &gt) {
            Ok(m) => {
                let mismatches = expected
                    .iter()
                    .enumerate()
                    .filter(|(k, e)| {
                        (m.precision.values[*k], m.recall.values[*k], m.f.values[*k]) != **e
                    })
                    .count();
                (mismatches == 0, format!("{mismatches} of {SWEEP_POINTS} thresholds differ"))
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check {
            suite: "metrics",
            name: format!("pr_re_f#{i}"),
            passed,
            detail,
        });

        let overlaps: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
        let (passed, detail) = match success_auc(&overlaps) {
            Ok((curve, auc)) => {
                let exact = curve.values == brute_force_success(&overlaps);
                let gap = (auc - mean).abs();
                (
                    exact && gap <= 1.0 / SWEEP_POINTS as f64,
                    format!("curve exact = {exact}, |AUC - mean overlap| = {gap:.5}"),
                )
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check {
            suite: "metrics",
            name: format!("success_auc#{i}"),
            passed,
            detail,
        });
    }
    checks
}

// ---------------------------------------------------------------------------
// gradients

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

/// `sum(x * w)` for a fixed random `w`, so no output direction is privileged.
fn probe(sess: &mut Session, x: Var, w: &Tensor) -> Result<Var> {
    let w = sess.constant(w.clone());
    let p = sess.tape.mul(x, w)?;
    Ok(sess.tape.sum(p))
}

fn grad_check(
    module: &str,
    store: &ParamStore,
    ids: &[ParamId],
    max_coords: Option<usize>,
    f: impl Fn(&mut Session) -> Result<Var>,
) -> Result<Check> {
    let cfg = GradCheckConfig {
        epsilon: 1e-5,
        max_coords_per_tensor: max_coords,
        seed: 7,
    };
    let r = finite_diff_check_params(store, Some(ids), f, &cfg)?;
    Ok(Check {
        suite: "gradcheck",
        name: module.to_string(),
        passed: r.max_rel_error < GRADCHECK_TOLERANCE,
        detail: format!(
            "max relative error {:.3e} over {} coordinates (analytic {:.6e}, numeric {:.6e} at worst)",
            r.max_rel_error, r.coords_checked, r.worst_analytic, r.worst_numeric
        ),
    })
}

/// Finite-difference checks of every parameterised module at desk widths,
/// plus the composed training loss of the full desk model.
pub fn gradcheck_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checks = Vec::new();
    let att = AttentionConfig::desk();
    let coords = Some(24);

    // attention: one CMA block with positional encodings on both sides
    {
        let mut store = ParamStore::new();
        let params = CmaParams::new(&mut store, "cma", &att, &mut rng)?;
        let (nq, nk) = (9, 12);
        let d = random_tensor(&mut rng, &[nq, att.d_model], 1.0);
        let i = random_tensor(&mut rng, &[nk, att.d_model], 1.0);
        let w = random_tensor(&mut rng, &[nq, att.d_model], 1.0);
        let pe_d = pos_encoding_2d(3, 3, att.d_model)?;
        let pe_i = pos_encoding_2d(3, 4, att.d_model)?;
        let cfg = AttentionConfig {
            use_pos_encoding: true,
            ..att.clone()
        };
        checks.push(grad_check("attention", &store, &params.ids(), coords, |sess| {
            let (dv, iv) = (sess.constant(d.clone()), sess.constant(i.clone()));
            let (pd, pi) = (sess.constant(pe_d.clone()), sess.constant(pe_i.clone()));
            let y = cma_block(sess, dv, iv, &params, &cfg, Some(pd), Some(pi))?;
            probe(sess, y, &w)
        })?);
    }

    let c = BackboneConfig::desk().out_channels();
    // cmim on a 4 x 4 map
    {
        let mut store = ParamStore::new();
        let params = CmimParams::new(&mut store, "cmim", CmimConfig::new(c, att.clone()), &mut rng)?;
        let i0 = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        let d0 = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        let w = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        checks.push(grad_check("cmim", &store, &params.ids(), coords, |sess| {
            let (a, b) = (sess.constant(i0.clone()), sess.constant(d0.clone()));
            let y = cmim(sess, a, b, &params)?;
            probe(sess, y, &w)
        })?);
    }

    // spm
    {
        let mut store = ParamStore::new();
        let params = SpmParams::new(&mut store, "spm", c)?;
        let f0 = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        let i0 = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        let d0 = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        let w = random_tensor(&mut rng, &[c, 4, 4], 1.0);
        checks.push(grad_check("spm", &store, &params.ids(), None, |sess| {
            let (f, i, d) = (
                sess.constant(f0.clone()),
                sess.constant(i0.clone()),
                sess.constant(d0.clone()),
            );
            let y = spm(sess, f, i, d, &params)?;
            probe(sess, y, &w)
        })?);
    }

    // backbone: both streams on 16 x 16 patches
    {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneConfig::desk(), &mut rng)?;
        let rgb = random_tensor(&mut rng, &[3, 16, 16], 1.0).map(|v| 0.5 + 0.5 * v);
        let depth = random_tensor(&mut rng, &[3, 16, 16], 1.0).map(|v| 0.5 + 0.5 * v);
        let w = random_tensor(&mut rng, &[c, 2, 2], 1.0);
        checks.push(grad_check("backbone", &store, &bb.ids(), coords, |sess| {
            let (r, d) = (sess.constant(rgb.clone()), sess.constant(depth.clone()));
            let (i0, d0) = bb.extract(sess, r, d)?;
            let a = probe(sess, i0, &w)?;
            let b = probe(sess, d0, &w)?;
            sess.tape.add(a, b)
        })?);
    }

    // heads: filter learning, classification and box regression on fixed features
    {
        let mut store = ParamStore::new();
        let fcfg = FilterConfig::default();
        let head = HeadParams::new(&mut store, c, &fcfg, &mut rng)?;
        let (m, stride, patch) = (6, 8, 48.0);
        let tf = random_tensor(&mut rng, &[c, m, m], 1.0);
        let sf = random_tensor(&mut rng, &[c, m, m], 1.0);
        let t_box = BBox::new(17.0, 15.0, 12.0, 14.0);
        let s_box = BBox::new(21.0, 19.0, 11.0, 13.0);
        let prior = BBox::new(18.0, 18.0, 12.0, 12.0);
        let labels = LabelConfig::default();
        let t_labels = gaussian_labels(&t_box, m, m, stride, labels.sigma_cells)?;
        let s_labels = gaussian_labels(&s_box, m, m, stride, labels.sigma_cells)?;
        let peak = crate::model::center_cell(&s_box, stride, m, m)?;
        checks.push(grad_check("heads", &store, &head.ids(), None, |sess| {
            let gain = sess.param(head.feature_gain);
            let mut cols = Vec::new();
            for x in [&tf, &sf] {
                let x = sess.constant(x.clone());
                let raw = feature_columns(&mut sess.tape, x, &fcfg)?;
                let shape = sess.tape.shape(raw).to_vec();
                let g = sess.tape.broadcast_to(gain, &shape)?;
                cols.push(sess.tape.mul(raw, g)?);
            }
            let sample = FilterSample {
                cols: cols[0],
                labels: t_labels.clone(),
            };
            let iterates = learn_filter(&mut sess.tape, &[sample], None, fcfg.n_iter, labels.threshold, &fcfg)?;
            let scores = classify(&mut sess.tape, *iterates.last().expect("iterates"), cols[1], m, m)?;
            let lc = loss_cls(&mut sess.tape, &[vec![scores]], &[s_labels.clone()], labels.threshold)?;
            let d = regression_deltas(sess, cols[1], peak.0 * m + peak.1, &head)?;
            let pred = decode_box_var(&mut sess.tape, d, peak, stride, &prior)?;
            let pred = sess.tape.scale(pred, 1.0 / patch);
            let lb = loss_bbox(&mut sess.tape, &[pred], &[box_column(&s_box, patch)])?;
            loss_total(&mut sess.tape, lc, lb, 0.01)
        })?);
    }

    checks.push(composed_loss_check(&mut rng)?);
    Ok(checks)
}

/// The composed training loss of the desk model on a synthetic pair.
///
/// Single coordinates deep inside the attention stack move the loss by about
/// 1e-9 of its value at initialisation, which is below what 64-bit central
/// differences resolve. Instead every parameter group (`model.backbone.rgb`,
/// `fusion.cmim.cma0`, ...) is moved along one random direction, `theta + t v`,
/// and the derivative in `t` is checked. The small step keeps ReLU kinks from
/// being crossed when whole weight tensors move at once.
fn composed_loss_check(rng: &mut impl Rng) -> Result<Check> {
    let model = Model::new(ModelConfig::desk(), 5)?;
    let seq = generate(&SceneSpec::preset(Preset::Easy, 3), 3)?;
    let cfg = TrainConfig::desk(0);
    let pair = make_training_pair(&seq, (0, 4), &cfg, 9)?;

    let ids = model.ids();
    let mut groups: Vec<String> = Vec::new();
    let group_of: Vec<usize> = ids
        .iter()
        .map(|&id| {
            let g = model.store.name(id).split('.').take(3).collect::<Vec<_>>().join(".");
            groups.iter().position(|x| *x == g).unwrap_or_else(|| {
                groups.push(g);
                groups.len() - 1
            })
        })
        .collect();
    let dirs: Vec<Tensor> = ids
        .iter()
        .map(|&id| random_tensor(rng, model.store.value(id).shape(), 1.0))
        .collect();
    let t0 = vec![Tensor::zeros(&[1]); groups.len()];
    let gc = GradCheckConfig {
        epsilon: 1e-7,
        max_coords_per_tensor: None,
        seed: 0,
    };
    let r = finite_diff_check(
        |tape: &mut Tape, t: &[Var]| {
            let mut sess = Session::from_tape(&model.store, std::mem::take(tape), false);
            for (k, &id) in ids.iter().enumerate() {
                let base = sess.constant(model.store.value(id).clone());
                let dir = sess.constant(dirs[k].clone());
                let tb = sess.tape.broadcast_to(t[group_of[k]], dirs[k].shape())?;
                let step = sess.tape.mul(tb, dir)?;
                let p = sess.tape.add(base, step)?;
                sess.bind(id, p)?;
            }
            let loss = model.pair_losses(&mut sess, &pair, cfg.lambda)?.total;
            *tape = sess.into_tape();
            Ok(loss)
        },
        &t0,
        &gc,
    )?;
    Ok(Check {
        suite: "gradcheck",
        name: "loss_total".into(),
        passed: r.max_rel_error < GRADCHECK_TOLERANCE,
        detail: format!(
            "max relative error {:.3e} over {} parameter-group directions (worst: {})",
            r.max_rel_error, r.coords_checked, groups[r.worst_tensor]
        ),
    })
}
