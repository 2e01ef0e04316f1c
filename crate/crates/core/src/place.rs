//! Error maps, difficulty-sorted grouping and group-wise LIFT.
//!
//! For a `C x H x W` pair of noise predictions the absolute error
//! `|teacher - student|` is sorted within each channel (ascending, ties by
//! flat index) and cut into `N = H*W / K` runs of `K` positions. Each run
//! gets its own least-squares coefficients and LIFT loss; the PLACE loss is
//! the unweighted mean over all `C * N` groups.
//!
//! The partition is rebuilt from the current pair on every call and is a
//! constant of the step for differentiation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kd_losses::{coarse_loss, lift_with_coeffs, scheduled_weight, LiftOptions, WeightScheduler};
use crate::numerics::Tensor;
use crate::regression::{ols_fit_slices, FitStats, RegressionCoeffs};

/// Elementwise `|eps_t - eps_s|` over a `C x H x W` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    values: Tensor,
}

impl ErrorMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// `H * W`.
    pub fn positions(&self) -> usize {
        self.values.len() / self.channels()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.positions();
        &self.values.data()[c * n..(c + 1) * n]
    }

    /// Per-channel `(min, max)`.
    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        (0..self.channels())
            .map(|c| {
                let ch = self.channel(c);
                ChannelStats {
                    min: ch.iter().copied().fold(f64::INFINITY, f64::min),
                    max: ch.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    /// Wraps an existing map. Values must be nonnegative and the shape 3-D.
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        check_chw(&values)?;
        if values.data().iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Format("error map values must be nonnegative".into()));
        }
        Ok(Self { values })
    }
}

fn check_chw(t: &Tensor) -> Result<()> {
    if t.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn error_map(eps_t: &Tensor, eps_s: &Tensor) -> Result<ErrorMap> {
    check_chw(eps_t)?;
    Ok(ErrorMap {
        values: eps_t.zip_map(eps_s, |a, b| (a - b).abs())?,
    })
}

/// Positions of each channel ordered by error and chunked into groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub channel_count: usize,
    pub groups_per_channel: usize,
    pub group_size: usize,
    /// Per channel, a permutation of `0..H*W`; group `g` is the slice
    /// `[g*K, (g+1)*K)`.
    pub index_map: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn group_count(&self) -> usize {
        self.channel_count * self.groups_per_channel
    }

    /// Within-channel positions of group `g` of channel `c`.
    pub fn group(&self, c: usize, g: usize) -> &[usize] {
        let k = self.group_size;
        &self.index_map[c][g * k..(g + 1) * k]
    }

    pub fn positions(&self) -> usize {
        self.groups_per_channel * self.group_size
    }
}

fn partition_channels(errors: &[f64], channels: usize, k: usize) -> Result<GroupPartition> {
    if k < 2 {
        return Err(Error::GroupSizeTooSmall(k));
    }
    let positions = errors.len() / channels;
    if !positions.is_multiple_of(k) {
        return Err(Error::IndivisibleGroupSize { k, positions });
    }
    let index_map = (0..channels)
        .map(|c| {
            let ch = &errors[c * positions..(c + 1) * positions];
            let mut idx: Vec<usize> = (0..positions).collect();
            // Stable, so equal errors keep flat-index order.
            idx.sort_by(|&a, &b| ch[a].total_cmp(&ch[b]));
            idx
        })
        .collect();
    Ok(GroupPartition {
        channel_count: channels,
        groups_per_channel: positions / k,
        group_size: k,
        index_map,
    })
}

/// Sorts each channel of `emap` by error and splits it into runs of `k`.
pub fn partition(emap: &ErrorMap, k: usize) -> Result<GroupPartition> {
    partition_channels(emap.values.data(), emap.channels(), k)
}

/// How the fine-term weight is derived for each group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScope {
    /// Each group's weight comes from its own coarse loss.
    #[default]
    PerGroup,
    /// One weight for all groups, from the mean coarse loss.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlaceOptions {
    pub lift: LiftOptions,
    pub weight_scope: WeightScope,
}

/// Diagnostics of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupBreakdown {
    pub channel: usize,
    pub group: usize,
    pub coeffs: RegressionCoeffs,
    pub l_coarse: f64,
    pub l_fine: f64,
    pub w: f64,
    pub l_lift: f64,
    /// The student variance in this group was degenerate and the fallback
    /// coefficients `(mean(teacher), 1)` were used.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceEval {
    pub loss: f64,
    pub groups: Vec<GroupBreakdown>,
}

impl PlaceEval {
    pub fn degenerate_count(&self) -> usize {
        self.groups.iter().filter(|g| g.degenerate).count()
    }

    fn mean_of(&self, f: impl Fn(&GroupBreakdown) -> f64) -> f64 {
        self.groups.iter().map(f).sum::<f64>() / self.groups.len() as f64
    }

    pub fn mean_coarse(&self) -> f64 {
        self.mean_of(|g| g.l_coarse)
    }

    pub fn mean_fine(&self) -> f64 {
        self.mean_of(|g| g.l_fine)
    }

    pub fn mean_w(&self) -> f64 {
        self.mean_of(|g| g.w)
    }
}

/// Group-wise LIFT over one `C x (H*W)` pair held as flat slices.
/// When `grad` is given, `scale * dL/ds` is added into it.
pub(crate) fn place_slices(
    t: &[f64],
    s: &[f64],
    part: &GroupPartition,
    sched: &WeightScheduler,
    iter: usize,
    opts: PlaceOptions,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<PlaceEval> {
    let hw = part.positions();
    if t.len() != s.len() || t.len() != part.channel_count * hw {
        return Err(Error::ShapeMismatch {
            expected: vec![part.channel_count, hw],
            actual: vec![s.len()],
        });
    }
    let k = part.group_size;
    let n_groups = part.group_count();

    struct Gathered {
        channel: usize,
        group: usize,
        t: Vec<f64>,
        s: Vec<f64>,
        fit: Option<FitStats>,
        coeffs: RegressionCoeffs,
        coarse: f64,
    }

    let mut gathered = Vec::with_capacity(n_groups);
    for c in 0..part.channel_count {
        for g in 0..part.groups_per_channel {
            let idx = part.group(c, g);
            let tg: Vec<f64> = idx.iter().map(|&i| t[c * hw + i]).collect();
            let sg: Vec<f64> = idx.iter().map(|&i| s[c * hw + i]).collect();
            let (fit, coeffs) = match ols_fit_slices(&tg, &sg) {
                Ok(fit) => (Some(fit), fit.coeffs),
                Err(Error::DegenerateVariance { fallback, .. }) => (None, fallback),
                Err(e) => return Err(e),
            };
            gathered.push(Gathered {
                channel: c,
                group: g,
                t: tg,
                s: sg,
                fit,
                coeffs,
                coarse: coarse_loss(coeffs, opts.lift.relaxed_l2),
            });
        }
    }

    let pooled_w = match opts.weight_scope {
        WeightScope::Pooled => {
            let mean = gathered.iter().map(|g| g.coarse).sum::<f64>() / n_groups as f64;
            Some(scheduled_weight(sched, iter, mean)?)
        }
        WeightScope::PerGroup => None,
    };

    let inv = 1.0 / n_groups as f64;
    let mut local = vec![0.0; k];
    let mut total = 0.0;
    let mut groups = Vec::with_capacity(n_groups);
    for g in &gathered {
        let w = match pooled_w {
            Some(w) => w,
            None => scheduled_weight(sched, iter, g.coarse)?,
        };
        let local_grad = match &grad {
            Some((_, scale)) => {
                local.fill(0.0);
                Some((&mut local[..], scale * inv))
            }
            None => None,
        };
        let e = lift_with_coeffs(&g.t, &g.s, g.fit.as_ref(), g.coeffs, w, opts.lift, local_grad);
        if let Some((out, _)) = grad.as_mut() {
            let base = g.channel * hw;
            for (&i, &v) in part.group(g.channel, g.group).iter().zip(&local) {
                out[base + i] += v;
            }
        }
        total += e.loss;
        groups.push(GroupBreakdown {
            channel: g.channel,
            group: g.group,
            coeffs: g.coeffs,
            l_coarse: e.coarse,
            l_fine: e.fine,
            w,
            l_lift: e.loss,
            degenerate: g.fit.is_none(),
        });
    }
    Ok(PlaceEval {
        loss: total * inv,
        groups,
    })
}

/// Partitions `(eps_t, eps_s)` (both `C x H x W`) by current error and
/// returns the mean group-wise LIFT loss with per-group diagnostics.
pub fn place_loss(
    eps_t: &Tensor,
    eps_s: &Tensor,
    k: usize,
    sched: &WeightScheduler,
    iter: usize,
    opts: PlaceOptions,
) -> Result<PlaceEval> {
    let part = partition(&error_map(eps_t, eps_s)?, k)?;
    place_slices(eps_t.data(), eps_s.data(), &part, sched, iter, opts, None)
}

/// [`place_loss`] and its gradient with respect to `eps_s`, with the
/// partition held fixed.
pub fn place_loss_grad(
    eps_t: &Tensor,
    eps_s: &Tensor,
    k: usize,
    sched: &WeightScheduler,
    iter: usize,
    opts: PlaceOptions,
) -> Result<(PlaceEval, Tensor)> {
    let part = partition(&error_map(eps_t, eps_s)?, k)?;
    place_loss_with_partition(eps_t, eps_s, &part, sched, iter, opts)
}

/// Group-wise LIFT under a caller-supplied partition, with gradient.
pub fn place_loss_with_partition(
    eps_t: &Tensor,
    eps_s: &Tensor,
    part: &GroupPartition,
    sched: &WeightScheduler,
    iter: usize,
    opts: PlaceOptions,
) -> Result<(PlaceEval, Tensor)> {
    check_chw(eps_t)?;
    eps_t.ensure_same_shape(eps_s)?;
    let mut grad = Tensor::zeros(eps_s.shape())?;
    let eval = place_slices(
        eps_t.data(),
        eps_s.data(),
        part,
        sched,
        iter,
        opts,
        Some((grad.data_mut(), 1.0)),
    )?;
    Ok((eval, grad))
}

/// Builds the partition for flat slices laid out as `channels` contiguous
/// runs. Used by the training loop, which stores samples as rows.
pub(crate) fn partition_slices(t: &[f64], s: &[f64], channels: usize, k: usize) -> Result<GroupPartition> {
    let errors: Vec<f64> = t.iter().zip(s).map(|(a, b)| (a - b).abs()).collect();
    partition_channels(&errors, channels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
}

/// JSON layout of an exported error map.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorMapFile {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub channel_stats: Vec<ChannelStats>,
}

impl From<&ErrorMap> for ErrorMapFile {
    fn from(m: &ErrorMap) -> Self {
        Self {
            shape: m.values.shape().to_vec(),
            data: m.values.data().to_vec(),
            channel_stats: m.channel_stats(),
        }
    }
}

impl ErrorMapFile {
    /// Checks shape, data length, nonnegativity and that the per-channel
    /// stats agree with the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.shape.len() != 3 || self.shape.contains(&0) {
            return bad(format!("shape {:?} is not C x H x W", self.shape));
        }
        if self.data.len() != self.shape.iter().product::<usize>() {
            return bad(format!("{} values for shape {:?}", self.data.len(), self.shape));
        }
        if self.channel_stats.len() != self.shape[0] {
            return bad(format!("{} channel stats for {} channels", self.channel_stats.len(), self.shape[0]));
        }
        let map = ErrorMap::from_tensor(Tensor::new(self.shape.clone(), self.data.clone())?)?;
        if map.channel_stats() != self.channel_stats {
            return bad("channel stats do not match data".into());
        }
        Ok(())
    }

    pub fn into_map(self) -> Result<ErrorMap> {
        self.validate()?;
        ErrorMap::from_tensor(Tensor::new(self.shape, self.data)?)
    }
}

/// Writes `emap` as JSON: `{"shape": [C,H,W], "data": [...],
/// "channel_stats": [{"min": .., "max": ..}, ...]}`.
pub fn export_error_map(emap: &ErrorMap, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &ErrorMapFile::from(emap))?;
    Ok(())
}

pub fn read_error_map(path: &Path) -> Result<ErrorMap> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let parsed: ErrorMapFile = serde_json::from_reader(file)?;
    parsed.into_map()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kd_losses::lift_loss;
    use crate::numerics::Rng;

    fn chw(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[c, h, w], f).unwrap()
    }

    #[test]
    fn error_map_cases() {
        let a = Rng::new(0).randn(&[2, 3, 3]).unwrap();
        assert!(error_map(&a, &a).unwrap().values().data().iter().all(|&v| v == 0.0));
        let signs = chw(2, 3, 3, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let shifted = a.add(&signs).unwrap();
        let m = error_map(&shifted, &a).unwrap();
        assert!(m.values().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(error_map(&a, &Tensor::zeros(&[2, 3, 4]).unwrap()).is_err());
        let flat = Tensor::zeros(&[4]).unwrap();
        assert!(error_map(&flat, &flat).is_err());
    }

    #[test]
    fn partition_cases() {
        let zero = Tensor::zeros(&[1, 4, 4]).unwrap();
        let inc = chw(1, 4, 4, |i| i as f64);
        let p = partition(&error_map(&inc, &zero).unwrap(), 16).unwrap();
        assert_eq!(p.groups_per_channel, 1);

        let p = partition(&error_map(&inc, &zero).unwrap(), 4).unwrap();
        for g in 0..4 {
            assert_eq!(p.group(0, g), &[4 * g, 4 * g + 1, 4 * g + 2, 4 * g + 3]);
        }

        let flat = partition(&error_map(&zero, &zero).unwrap(), 4).unwrap();
        assert_eq!(flat.index_map[0], (0..16).collect::<Vec<_>>());

        let dec = chw(1, 4, 4, |i| 15.0 - i as f64);
        let p = partition(&error_map(&dec, &zero).unwrap(), 8).unwrap();
        assert_eq!(p.group(0, 0), &[15, 14, 13, 12, 11, 10, 9, 8]);

        let m = error_map(&inc, &zero).unwrap();
        assert!(matches!(partition(&m, 3), Err(Error::IndivisibleGroupSize { .. })));
        assert!(matches!(partition(&m, 1), Err(Error::GroupSizeTooSmall(1))));
    }

    #[test]
    fn single_group_reduces_to_channel_lift() {
        let mut rng = Rng::new(7);
        let s = rng.randn(&[3, 4, 4]).unwrap();
        let t = s.scale(0.8).add(&rng.randn(&[3, 4, 4]).unwrap().scale(0.5)).unwrap();
        let sched = WeightScheduler::adaptive();
        let e = place_loss(&t, &s, 16, &sched, 0, PlaceOptions::default()).unwrap();
        let mut acc = 0.0;
        for c in 0..3 {
            let tc = Tensor::vector(t.data()[c * 16..(c + 1) * 16].to_vec()).unwrap();
            let sc = Tensor::vector(s.data()[c * 16..(c + 1) * 16].to_vec()).unwrap();
            let fit = crate::regression::ols_fit(&tc, &sc).unwrap();
            let w = crate::kd_losses::adaptive_weight(coarse_loss(fit, false)).unwrap();
            acc += lift_loss(&tc, &sc, w, LiftOptions::default()).unwrap().loss;
        }
        assert!((e.loss - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_inputs_hit_fallback_with_zero_loss() {
        let s = Rng::new(1).randn(&[1, 4, 4]).unwrap();
        let e = place_loss(&s, &s, 4, &WeightScheduler::adaptive(), 0, PlaceOptions::default()).unwrap();
        assert!(e.loss.abs() < 1e-12);
        for g in &e.groups {
            assert!(g.degenerate || (g.coeffs.beta0.abs() < 1e-9 && (g.coeffs.beta1 - 1.0).abs() < 1e-9));
        }
        let zeros = Tensor::zeros(&[1, 4, 4]).unwrap();
        let e = place_loss(&zeros, &zeros, 4, &WeightScheduler::adaptive(), 0, PlaceOptions::default()).unwrap();
        assert_eq!(e.degenerate_count(), 4);
        assert_eq!(e.loss, 0.0);
    }

    #[test]
    fn pooled_weight_is_shared() {
        let mut rng = Rng::new(3);
        let s = rng.randn(&[2, 4, 4]).unwrap();
        let t = s.scale(1.05).add(&rng.randn(&[2, 4, 4]).unwrap().scale(0.1)).unwrap();
        let opts = PlaceOptions {
            weight_scope: WeightScope::Pooled,
            ..Default::default()
        };
        let e = place_loss(&t, &s, 4, &WeightScheduler::adaptive(), 0, opts).unwrap();
        let w0 = e.groups[0].w;
        assert!(e.groups.iter().all(|g| g.w == w0));
        let expect = crate::kd_losses::adaptive_weight(e.mean_coarse()).unwrap();
        assert_eq!(w0, expect);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let zero = Tensor::zeros(&[2, 2, 2]).unwrap();
        let m = error_map(&zero, &zero).unwrap();
        export_error_map(&m, &path).unwrap();
        let f: ErrorMapFile = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(f.channel_stats.iter().all(|c| c.min == 0.0 && c.max == 0.0));

        let mut rng = Rng::new(4);
        let m = error_map(&rng.randn(&[3, 8, 8]).unwrap(), &rng.randn(&[3, 8, 8]).unwrap()).unwrap();
        export_error_map(&m, &path).unwrap();
        let back = read_error_map(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn schema_rejects_inconsistent_stats() {
        let f = ErrorMapFile {
            shape: vec![1, 1, 2],
            data: vec![0.5, 1.0],
            channel_stats: vec![ChannelStats { min: 0.0, max: 1.0 }],
        };
        assert!(f.validate().is_err());
        let f = ErrorMapFile {
            shape: vec![1, 2],
            data: vec![0.5, 1.0],
            channel_stats: vec![ChannelStats { min: 0.5, max: 1.0 }],
        };
        assert!(f.validate().is_err());
    }
}
