//! Segmentation of multi-primitive demonstrations into primitives.
//!
//! The first demonstration is cut by hand (or by ZVC) into reference
//! segments. For every other demonstration a rough ZVC guess is refined by
//! aligning it to the reference with DTW and estimating a time scale and a
//! delay from the resulting correspondence pairs with weighted least squares.

mod dtw;

pub use dtw::{
    dtw, dtw_correspondences, dtw_with, one_to_one_pairs, range_normalize, standardize,
    DtwAlignment, Normalization,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window for ZVC end detection, in seconds.
pub const DWELL_SECONDS: f64 = 0.1;
/// Correspondence pairs slower than this fraction of the peak speed are dropped.
pub const NEAR_ZERO_FRACTION: f64 = 0.05;

/// A scalar demonstration signal and its velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Demo1D {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    /// Samples per second.
    pub rate: f64,
}

impl Demo1D {
    pub fn new(z: Vec<f64>, v: Vec<f64>, rate: f64) -> Result<Self> {
        if z.len() != v.len() {
            return Err(Error::shape(format!(
                "signal has {} samples but velocity has {}",
                z.len(),
                v.len()
            )));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::validation(format!("sample rate must be positive, got {rate}")));
        }
        Ok(Demo1D { z, v, rate })
    }

    /// Smooths the positions with a `2k+1` moving average and takes the
    /// velocity as the central difference over `±k` samples of the smoothed
    /// signal (`k = 0` keeps the raw signal and a plain gradient).
    pub fn from_positions(z: Vec<f64>, rate: f64, k: usize) -> Result<Self> {
        let n = z.len();
        if n < 2 {
            return Err(Error::validation("signal needs at least 2 samples"));
        }
        let smooth: Vec<f64> = if k == 0 {
            z.clone()
        } else {
            (0..n)
                .map(|i| {
                    let (a, b) = (i.saturating_sub(k), (i + k).min(n - 1));
                    z[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
                })
                .collect()
        };
        let span = k.max(1);
        let v = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(span), (i + span).min(n - 1));
                (smooth[b] - smooth[a]) * rate / (b - a) as f64
            })
            .collect();
        Demo1D::new(smooth, v, rate)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Samples `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Demo1D {
        Demo1D {
            z: self.z[start..end].to_vec(),
            v: self.v[start..end].to_vec(),
            rate: self.rate,
        }
    }

    /// Every `g`-th sample.
    pub fn downsample(&self, g: usize) -> Demo1D {
        let g = g.max(1);
        Demo1D {
            z: self.z.iter().step_by(g).copied().collect(),
            v: self.v.iter().step_by(g).copied().collect(),
            rate: self.rate / g as f64,
        }
    }
}

/// Matched `(reference, guess)` index pairs (0-based within their segments)
/// with compatibility weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

/// `t_guess = a * t_ref + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub a: f64,
    pub b: f64,
}

/// First motion of a demonstration: `s` is the first sample with
/// `|v| > h`, `e` the next sample after which `|v|` stays at or below `h`
/// for the dwell window (or until the end of the signal).
pub fn zvc_segment(demo: &Demo1D, h: f64) -> Result<(usize, usize)> {
    zvc_segment_from(demo, h, 0)
}

/// [`zvc_segment`] ignoring samples before `from`.
pub fn zvc_segment_from(demo: &Demo1D, h: f64, from: usize) -> Result<(usize, usize)> {
    if !(h > 0.0) {
        return Err(Error::validation(format!("ZVC threshold must be positive, got {h}")));
    }
    let n = demo.len();
    let dwell = ((DWELL_SECONDS * demo.rate).round() as usize).max(1);
    let s = (from..n)
        .find(|&i| demo.v[i].abs() > h)
        .ok_or_else(|| Error::Segmentation {
            demo: String::new(),
            reason: format!("no velocity crossing above {h}"),
        })?;
    let mut i = s + 1;
    while i < n {
        if demo.v[i].abs() <= h {
            let stop = (i + dwell).min(n);
            match (i..stop).find(|&j| demo.v[j].abs() > h) {
                None => return Ok((s, i)),
                Some(j) => i = j + 1,
            }
        } else {
            i += 1;
        }
    }
    Err(Error::Segmentation {
        demo: String::new(),
        reason: format!("motion starting at sample {s} never comes to rest"),
    })
}

/// Rows `[t_ref, 1]` and right-hand side `t_guess`.
pub fn construct_ls(c: &CorrespondenceSet) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = c.pairs.len();
    if k < 2 {
        return Err(Error::Segmentation {
            demo: String::new(),
            reason: format!("{k} correspondence pairs cannot determine scale and delay"),
        });
    }
    let a = DMatrix::from_fn(k, 2, |i, j| if j == 0 { c.pairs[i].0 as f64 } else { 1.0 });
    let b = DVector::from_fn(k, |i, _| c.pairs[i].1 as f64);
    Ok((a, b))
}

fn unit_scaled(v: &[f64]) -> Vec<f64> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        v.iter().map(|x| x / peak).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Velocity-compatibility weights, one per pair.
///
/// Velocities are compared after scaling each segment by its peak speed,
/// which removes the effect of time scaling on speed. A pair where either
/// side is below [`NEAR_ZERO_FRACTION`] of the peak gets weight zero;
/// otherwise `w = exp(-|v_ref - v_guess| / sigma)` with `sigma` the
/// standard deviation of the scaled reference velocity.
pub fn compute_ls_weights(c: &CorrespondenceSet, reference: &Demo1D, guess: &Demo1D) -> Vec<f64> {
    let vr = unit_scaled(&reference.v);
    let vg = unit_scaled(&guess.v);
    let mean = vr.iter().sum::<f64>() / vr.len().max(1) as f64;
    let sigma = (vr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vr.len().max(1) as f64).sqrt();
    c.pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (vr[i], vg[j]);
            if a.abs().min(b.abs()) < NEAR_ZERO_FRACTION || !(sigma > 0.0) {
                0.0
            } else {
                (-(a - b).abs() / sigma).exp()
            }
        })
        .collect()
}

/// Closed-form weighted least squares for `(a, b)`. Falls back to ordinary
/// least squares when fewer than two distinct reference indices carry
/// weight; the second return value is false in that case.
pub fn solve_wls(a: &DMatrix<f64>, b: &DVector<f64>, w: &[f64]) -> Result<(AlignmentParams, bool)> {
    if a.nrows() != b.len() || a.nrows() != w.len() || a.ncols() != 2 {
        return Err(Error::shape("WLS inputs have inconsistent sizes"));
    }
    match weighted_line_fit(a, b, w) {
        Some(x) => Ok((x, true)),
        None => {
            log::warn!("weighted alignment is rank deficient; falling back to unweighted least squares");
            let ones = vec![1.0; w.len()];
            weighted_line_fit(a, b, &ones)
                .map(|x| (x, false))
                .ok_or_else(|| Error::Segmentation {
                    demo: String::new(),
                    reason: "correspondences do not determine scale and delay".into(),
                })
        }
    }
}

fn weighted_line_fit(a: &DMatrix<f64>, b: &DVector<f64>, w: &[f64]) -> Option<AlignmentParams> {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..w.len() {
        let (x, y, wk) = (a[(k, 0)], b[k], w[k]);
        sw += wk;
        sx += wk * x;
        sy += wk * y;
        sxx += wk * x * x;
        sxy += wk * x * y;
    }
    if !(sw > 0.0) {
        return None;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let vxx = sxx / sw - mx * mx;
    if !(vxx > 1e-9 * (1.0 + mx * mx)) {
        return None;
    }
    let slope = (sxy / sw - mx * my) / vxx;
    Some(AlignmentParams {
        a: slope,
        b: my - slope * mx,
    })
}

/// Refined segment bounds from the rough start `s_guess`, the reference
/// span, the extension `eps` and the alignment:
/// `i_s = s_guess + b + (a - 1) eps`, `i_e = i_s + a (e1 - s1)`, rounded and
/// clamped to `[0, len - 1]`.
pub fn refine_indices(
    s_guess: usize,
    span: (usize, usize),
    eps: usize,
    align: AlignmentParams,
    len: usize,
) -> Result<(usize, usize)> {
    refine_window(s_guess as f64 - eps as f64, eps as f64, span, align, len)
}

/// General form used when the extension windows are clipped: the guess
/// window starts at `window_start` and the reference primitive starts
/// `ref_offset` samples into its window.
fn refine_window(
    window_start: f64,
    ref_offset: f64,
    span: (usize, usize),
    align: AlignmentParams,
    len: usize,
) -> Result<(usize, usize)> {
    if !(align.a > 0.0) || !align.a.is_finite() || !align.b.is_finite() {
        return Err(Error::Segmentation {
            demo: String::new(),
            reason: format!("invalid alignment a={}, b={}", align.a, align.b),
        });
    }
    let last = len.saturating_sub(1) as f64;
    let start = window_start + align.a * ref_offset + align.b;
    let end = start + align.a * (span.1 as f64 - span.0 as f64);
    let (s, e) = (start.round().clamp(0.0, last), end.round().clamp(0.0, last));
    if e <= s {
        return Err(Error::Segmentation {
            demo: String::new(),
            reason: format!("degenerate refined segment [{s}, {e}]"),
        });
    }
    Ok((s as usize, e as usize))
}

/// Knobs of the segmentation algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// ZVC velocity threshold.
    pub h: f64,
    /// Extension of reference and guess windows, in samples.
    pub eps: usize,
    /// Down-sampling factor applied before DTW.
    pub g: usize,
    /// Half-width of the velocity smoothing window, in samples.
    pub smoothing: usize,
    /// Alignment passes per primitive; passes after the first re-cut the
    /// guess window to the image of the reference window.
    pub passes: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            h: 0.02,
            eps: 50,
            g: 1,
            smoothing: 15,
            passes: 2,
            normalization: Normalization::Range,
        }
    }
}

/// How one primitive is located in a demonstration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveRule {
    /// Aligned on the given signal axis.
    Axis(usize),
    /// Whatever lies between the neighboring aligned primitives.
    Gap,
}

/// Alignment outcome for one aligned primitive of one demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub primitive: usize,
    /// Time scale relative to the reference.
    pub a: f64,
    /// Delay in window-local samples (full resolution).
    pub b: f64,
    /// Delay in whole-demo samples: `t_guess = a t_ref + delay`.
    pub delay: f64,
    /// Delay about the reference primitive start `s1`:
    /// `t_guess - s1 = a (t_ref - s1) + offset`.
    pub offset: f64,
    pub start: usize,
    pub end: usize,
    /// Weighted RMS residual of the line fit, in samples.
    pub residual: f64,
    pub weighted: bool,
    /// DTW cost-matrix cells evaluated.
    pub cells: u64,
}

/// Aligns one guessed window against the reference window.
///
/// `ref_window` and `guess_window` are `[start, end)` ranges in their
/// demos. Returns the alignment in full-resolution local samples, whether
/// the weighted solution was used, the weighted RMS residual and the DTW
/// cell count.
pub fn align_windows(
    reference: &Demo1D,
    ref_window: (usize, usize),
    guess: &Demo1D,
    guess_window: (usize, usize),
    g: usize,
    norm: Normalization,
) -> Result<(AlignmentParams, bool, f64, u64)> {
    let r = reference.window(ref_window.0, ref_window.1);
    let q = guess.window(guess_window.0, guess_window.1);
    align_segments(&r, &q, g, norm, true)
}

/// Aligns two segments after down-sampling both by `g`. With `weighting`
/// off every correspondence pair counts equally (ordinary least squares).
pub fn align_segments(
    reference: &Demo1D,
    guess: &Demo1D,
    g: usize,
    norm: Normalization,
    weighting: bool,
) -> Result<(AlignmentParams, bool, f64, u64)> {
    let g = g.max(1);
    let r = reference.downsample(g);
    let q = guess.downsample(g);
    let (mut c, dtw) = dtw_correspondences(&r.z, &q.z, norm)?;
    if weighting {
        c.weights = compute_ls_weights(&c, &r, &q);
    }
    let (a_mat, b_vec) = construct_ls(&c)?;
    let (x, weighted) = solve_wls(&a_mat, &b_vec, &c.weights)?;
    let w: Vec<f64> = if weighted { c.weights.clone() } else { vec![1.0; c.weights.len()] };
    let sw: f64 = w.iter().sum();
    let sq: f64 = (0..w.len())
        .map(|k| w[k] * (x.a * a_mat[(k, 0)] + x.b - b_vec[k]).powi(2))
        .sum();
    let residual = (sq / sw).sqrt() * g as f64;
    Ok((
        AlignmentParams {
            a: x.a,
            b: x.b * g as f64,
        },
        weighted,
        residual,
        dtw.cells,
    ))
}

fn extend(span: (usize, usize), eps: usize, len: usize) -> (usize, usize) {
    (span.0.saturating_sub(eps), (span.1 + eps + 1).min(len))
}

/// Refines one aligned primitive of one demonstration, searching for the
/// rough ZVC guess from sample `from` on.
///
/// The guess window is extended by `eps` times the ratio of the ZVC span
/// lengths. After the first alignment the guess window is re-cut to the image of the
/// reference window and aligned again (`config.passes` times in total).
/// Windows holding different shares of flat signal standardize differently,
/// which biases the DTW path toward `a = 1`; matching windows remove that.
pub fn refine_primitive(
    reference: &Demo1D,
    ref_span: (usize, usize),
    guess: &Demo1D,
    from: usize,
    config: &SegmentationConfig,
) -> Result<(AlignmentParams, AlignmentReport)> {
    let (s_g, e_g) = zvc_segment_from(guess, config.h, from)?;
    let rw = extend(ref_span, config.eps, reference.len());
    // The guess is extended by eps scaled with the ZVC span ratio so both
    // windows hold about the same share of motion.
    let ratio = ((e_g - s_g) as f64 / (ref_span.1 - ref_span.0).max(1) as f64).clamp(0.5, 2.0);
    let eps_g = (ratio * config.eps as f64).round() as usize;
    let mut gw = extend((s_g, e_g), eps_g, guess.len());
    let mut cells = 0;
    let mut pass = 0;
    loop {
        let (align, weighted, residual, c) = align_windows(reference, rw, guess, gw, config.g, config.normalization)?;
        cells += c;
        pass += 1;
        let delay = align.b + gw.0 as f64 - align.a * rw.0 as f64;
        let next = (
            (delay + align.a * rw.0 as f64).round().max(0.0) as usize,
            ((delay + align.a * (rw.1 - 1) as f64).round() as usize + 1).min(guess.len()),
        );
        let usable = align.a > 0.0 && next.1 > next.0 + 2 * config.g.max(1);
        if pass >= config.passes.max(1) || !usable || next == gw {
            let ref_offset = (ref_span.0 - rw.0) as f64;
            let (start, end) = refine_window(gw.0 as f64, ref_offset, ref_span, align, guess.len())?;
            return Ok((
                align,
                AlignmentReport {
                    primitive: 0,
                    a: align.a,
                    b: align.b,
                    delay,
                    offset: delay + (align.a - 1.0) * ref_span.0 as f64,
                    start,
                    end,
                    residual,
                    weighted,
                    cells,
                },
            ));
        }
        gw = next;
    }
}

/// Segmentation of one demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSegmentation {
    pub demo: usize,
    /// `[start, end]` sample range of every primitive, in order.
    pub spans: Vec<(usize, usize)>,
    pub alignments: Vec<AlignmentReport>,
}

/// Outcome of a batch segmentation: one entry per non-reference demo.
#[derive(Debug)]
pub struct SegmentationBatch {
    pub reference_spans: Vec<(usize, usize)>,
    pub results: Vec<std::result::Result<DemoSegmentation, Error>>,
}

impl SegmentationBatch {
    pub fn failures(&self) -> impl Iterator<Item = &Error> {
        self.results.iter().filter_map(|r| r.as_ref().err())
    }
}

/// Reference spans of the aligned primitives, cut from demo 0 by ZVC in
/// order.
pub fn reference_spans(
    demo: &[Demo1D],
    rules: &[PrimitiveRule],
    h: f64,
) -> Result<Vec<Option<(usize, usize)>>> {
    let mut from = 0;
    let mut out = Vec::with_capacity(rules.len());
    for rule in rules {
        match *rule {
            PrimitiveRule::Axis(axis) => {
                let sig = demo.get(axis).ok_or_else(|| Error::shape(format!("no signal axis {axis}")))?;
                let span = zvc_segment_from(sig, h, from)?;
                from = span.1;
                out.push(Some(span));
            }
            PrimitiveRule::Gap => out.push(None),
        }
    }
    Ok(out)
}

fn fill_gaps(aligned: &[Option<(usize, usize)>], len: usize) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::with_capacity(aligned.len());
    for (k, s) in aligned.iter().enumerate() {
        match s {
            Some(s) => spans.push(*s),
            None => {
                let start = if k == 0 { 0 } else { aligned[k - 1].map_or(0, |p| p.1) };
                let end = aligned
                    .get(k + 1)
                    .and_then(|n| n.map(|n| n.0))
                    .unwrap_or(len.saturating_sub(1));
                if end <= start {
                    return Err(Error::Segmentation {
                        demo: String::new(),
                        reason: format!("primitive {k} between its neighbors is empty"),
                    });
                }
                spans.push((start, end));
            }
        }
    }
    Ok(spans)
}

fn name_error(e: Error, demo: usize) -> Error {
    match e {
        Error::Segmentation { reason, .. } => Error::Segmentation {
            demo: format!("demo {demo}"),
            reason,
        },
        other => Error::Segmentation {
            demo: format!("demo {demo}"),
            reason: other.to_string(),
        },
    }
}

/// Segments every demonstration against demo 0.
///
/// `demos[l][axis]` is the signal of demo `l` on one axis. `refs` holds the
/// reference span of every aligned primitive in demo 0 (`None` for gaps);
/// pass the output of [`reference_spans`] to cut them automatically. A
/// failing demo is reported in place and never aborts the batch.
pub fn segment_demos(
    demos: &[Vec<Demo1D>],
    rules: &[PrimitiveRule],
    refs: &[Option<(usize, usize)>],
    config: &SegmentationConfig,
) -> Result<SegmentationBatch> {
    let reference = demos
        .first()
        .ok_or_else(|| Error::validation("no demonstrations to segment"))?;
    if refs.len() != rules.len() {
        return Err(Error::shape("one reference entry per primitive rule"));
    }
    let ref_len = reference.first().map_or(0, Demo1D::len);
    let reference_spans = fill_gaps(refs, ref_len)?;

    let results = demos[1..]
        .par_iter()
        .enumerate()
        .map(|(idx, demo)| {
            let l = idx + 1;
            let len = demo.first().map_or(0, Demo1D::len);
            let mut aligned = Vec::with_capacity(rules.len());
            let mut reports = Vec::new();
            let mut from = 0;
            for (k, rule) in rules.iter().enumerate() {
                match (*rule, refs[k]) {
                    (PrimitiveRule::Axis(axis), Some(span)) => {
                        let (r, q) = match (reference.get(axis), demo.get(axis)) {
                            (Some(r), Some(q)) => (r, q),
                            _ => return Err(name_error(Error::shape(format!("no signal axis {axis}")), l)),
                        };
                        let (_, mut report) =
                            refine_primitive(r, span, q, from, config).map_err(|e| name_error(e, l))?;
                        report.primitive = k;
                        from = report.end;
                        aligned.push(Some((report.start, report.end)));
                        reports.push(report);
                    }
                    (PrimitiveRule::Gap, _) => aligned.push(None),
                    (PrimitiveRule::Axis(_), None) => {
                        return Err(Error::validation(format!("primitive {k} has no reference span")))
                    }
                }
            }
            let spans = fill_gaps(&aligned, len).map_err(|e| name_error(e, l))?;
            Ok(DemoSegmentation {
                demo: l,
                spans,
                alignments: reports,
            })
        })
        .collect();
    Ok(SegmentationBatch {
        reference_spans,
        results,
    })
}
