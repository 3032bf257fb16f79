use crate::error::{Error, Result};
use crate::nn::{Model, TapPosition};
use crate::tensor::{BnMode, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;

/// Above this ratio μ/σ the negative tail is evaluated by continued fraction.
pub const MILLS_THRESHOLD: f64 = 8.0;

/// Parameters of `N(mu, sigma²)`; for a BN output these are (β, |γ|).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedGaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl TruncatedGaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Parameter(format!(
                "need finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(TruncatedGaussianParams { mu, sigma })
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `E[X | X < 0]` for `X ~ N(mu, sigma²)`.
pub fn margin_closed_form(params: TruncatedGaussianParams) -> Result<f64> {
    let TruncatedGaussianParams { mu, sigma } = params;
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let t = mu / sigma;
    if t > MILLS_THRESHOLD {
        // μ − σ·φ(t)/Φ(−t) = −σ / (t + 2/(t + 3/(t + …)))
        let mut tail = t;
        for k in (2..=60).rev() {
            tail = t + k as f64 / tail;
        }
        return Ok(-sigma / tail);
    }
    Ok(mu - sigma * normal_pdf(t) / normal_cdf(-t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSource {
    Empirical,
    ClosedForm,
}

impl MarginSource {
    fn as_str(self) -> &'static str {
        match self {
            MarginSource::Empirical => "empirical",
            MarginSource::ClosedForm => "closed_form",
        }
    }
}

/// Per-channel margins for each tap, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSpec {
    pub source: MarginSource,
    pub taps: Vec<(String, Vec<f64>)>,
}

impl MarginSpec {
    pub fn new(source: MarginSource, taps: Vec<(String, Vec<f64>)>) -> Result<Self> {
        for (name, margins) in &taps {
            if let Some((c, m)) = margins
                .iter()
                .enumerate()
                .find(|(_, m)| !m.is_finite() || **m > 0.0)
            {
                return Err(Error::Parameter(format!(
                    "margin {m} of {name} channel {c} is not a finite value ≤ 0"
                )));
            }
        }
        Ok(MarginSpec { source, taps })
    }

    pub fn get(&self, tap: &str) -> Option<&[f64]> {
        self.taps
            .iter()
            .find(|(n, _)| n == tap)
            .map(|(_, m)| m.as_slice())
    }

    /// Text table: a `# source` line, then `tap channel margin` per line.
    pub fn to_table(&self) -> String {
        let mut s = format!("# source {}\n# tap channel margin\n", self.source.as_str());
        for (name, margins) in &self.taps {
            for (c, m) in margins.iter().enumerate() {
                writeln!(s, "{name} {c} {m:e}").expect("writing to a String");
            }
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut source = None;
        let mut taps: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Config(format!("margin table line {}: {msg}", i + 1));
            if let Some(rest) = line.strip_prefix("# source ") {
                source = Some(match rest.trim() {
                    "empirical" => MarginSource::Empirical,
                    "closed_form" => MarginSource::ClosedForm,
                    other => return Err(bad(&format!("unknown source '{other}'"))),
                });
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, channel, margin] = fields[..] else {
                return Err(bad("expected 'tap channel margin'"));
            };
            let channel: usize = channel
                .parse()
                .map_err(|_| bad("channel is not an integer"))?;
            let margin: f64 = margin.parse().map_err(|_| bad("margin is not a number"))?;
            if taps.last().map(|(n, _)| n.as_str()) != Some(name) {
                taps.push((name.to_string(), Vec::new()));
            }
            let entry = &mut taps.last_mut().expect("just pushed").1;
            if channel != entry.len() {
                return Err(bad(&format!("channel {channel} out of order")));
            }
            entry.push(margin);
        }
        let source =
            source.ok_or_else(|| Error::Config("margin table lacks a '# source' line".into()))?;
        MarginSpec::new(source, taps)
    }
}

/// Streaming sums of the negative responses of each channel.
#[derive(Clone, Debug, Default)]
pub struct MarginAccumulator {
    taps: Vec<(String, ChannelSums)>,
}

#[derive(Clone, Debug, Default)]
struct ChannelSums {
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MarginAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the negative entries of an `[N, C, H, W]` tap.
    pub fn observe(&mut self, tap: &str, values: &Tensor) -> Result<()> {
        let [n, c, h, w] = values.dims()[..] else {
            return Err(Error::dim(
                "margin_empirical",
                format!("tap {tap} is {}", values.shape()),
            ));
        };
        let idx = match self.taps.iter().position(|(name, _)| name == tap) {
            Some(i) => i,
            None => {
                self.taps.push((
                    tap.to_string(),
                    ChannelSums {
                        count: vec![0; c],
                        sum: vec![0.0; c],
                        sum_sq: vec![0.0; c],
                    },
                ));
                self.taps.len() - 1
            }
        };
        let sums = &mut self.taps[idx].1;
        if sums.count.len() != c {
            return Err(Error::dim(
                "margin_empirical",
                format!(
                    "tap {tap} changed from {} to {c} channels",
                    sums.count.len()
                ),
            ));
        }
        let hw = h * w;
        for (plane_idx, plane) in values.data().chunks_exact(hw).take(n * c).enumerate() {
            let ch = plane_idx % c;
            for &v in plane.iter().filter(|&&v| v < 0.0) {
                sums.count[ch] += 1;
                sums.sum[ch] += v;
                sums.sum_sq[ch] += v * v;
            }
        }
        Ok(())
    }

    /// Number of negative observations per channel of `tap`.
    pub fn counts(&self, tap: &str) -> Option<&[u64]> {
        self.taps
            .iter()
            .find(|(n, _)| n == tap)
            .map(|(_, s)| s.count.as_slice())
    }

    /// Standard error of each channel's conditional mean.
    pub fn standard_errors(&self, tap: &str) -> Option<Vec<f64>> {
        let (_, s) = self.taps.iter().find(|(n, _)| n == tap)?;
        Some(
            (0..s.count.len())
                .map(|c| {
                    let k = s.count[c] as f64;
                    if s.count[c] < 2 {
                        return f64::INFINITY;
                    }
                    let mean = s.sum[c] / k;
                    let var = ((s.sum_sq[c] - k * mean * mean) / (k - 1.0)).max(0.0);
                    (var / k).sqrt()
                })
                .collect(),
        )
    }

    /// Conditional means; channels without negative responses get 0.
    pub fn finish(&self) -> Result<MarginSpec> {
        let taps = self
            .taps
            .iter()
            .map(|(name, s)| {
                let margins = s
                    .count
                    .iter()
                    .zip(&s.sum)
                    .enumerate()
                    .map(|(c, (&k, &sum))| {
                        if k == 0 {
                            log::warn!(
                                "{name} channel {c} had no negative responses; margin set to 0"
                            );
                            0.0
                        } else {
                            sum / k as f64
                        }
                    })
                    .collect();
                (name.clone(), margins)
            })
            .collect();
        MarginSpec::new(MarginSource::Empirical, taps)
    }
}

/// Per-channel mean of the teacher's negative pre-ReLU responses over every
/// batch of the stream.
pub fn margin_empirical<I>(teacher: &Model, batches: I, bn_mode: BnMode) -> Result<MarginSpec>
where
    I: IntoIterator<Item = Tensor>,
{
    accumulate_margins(teacher, batches, bn_mode)?.finish()
}

/// The sums behind [`margin_empirical`], for callers that also want counts
/// and standard errors.
pub fn accumulate_margins<I>(
    teacher: &Model,
    batches: I,
    bn_mode: BnMode,
) -> Result<MarginAccumulator>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut acc = MarginAccumulator::new();
    let mut seen = false;
    for x in batches {
        let (_, taps) = teacher.forward_with_taps(&x, bn_mode, TapPosition::PreRelu)?;
        for (name, t) in &taps {
            acc.observe(name, t)?;
        }
        seen = true;
    }
    if !seen {
        return Err(Error::Parameter(
            "margin_empirical needs at least one batch".into(),
        ));
    }
    Ok(acc)
}

/// Margins from the (β, γ) of the BN layer behind each pre-ReLU tap.
pub fn margins_from_bn(teacher: &Model) -> Result<MarginSpec> {
    let taps = teacher
        .taps(TapPosition::PreRelu)
        .into_iter()
        .map(|tap| {
            let (beta, gamma) = teacher.tap_bn_affine(tap.group_index).ok_or_else(|| {
                Error::Config(format!(
                    "margin_source: closed_form needs a plain BN output at tap {}; use empirical",
                    tap.name
                ))
            })?;
            let margins = beta
                .iter()
                .zip(&gamma)
                .map(|(&b, &g)| margin_closed_form(TruncatedGaussianParams::new(b, g.abs())?))
                .collect::<Result<Vec<_>>>()?;
            Ok((tap.name, margins))
        })
        .collect::<Result<Vec<_>>>()?;
    MarginSpec::new(MarginSource::ClosedForm, taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn m(mu: f64, sigma: f64) -> f64 {
        margin_closed_form(TruncatedGaussianParams { mu, sigma }).unwrap()
    }

    #[test]
    fn standard_half_normal() {
        assert!((m(0.0, 1.0) + (2.0 / PI).sqrt()).abs() < 1e-12);
        assert_eq!(m(0.0, 2.0), 2.0 * m(0.0, 1.0));
    }

    #[test]
    fn deep_negative_mean_and_bad_sigma() {
        assert!((m(-10.0, 1.0) + 10.0).abs() < 1e-9);
        assert!(margin_closed_form(TruncatedGaussianParams {
            mu: 0.0,
            sigma: 0.0
        })
        .is_err());
        assert!(TruncatedGaussianParams::new(0.0, -1.0).is_err());
    }

    #[test]
    fn continued_fraction_joins_direct_formula() {
        // both branches agree just around the switch
        let direct = |t: f64| t - normal_pdf(t) / normal_cdf(-t);
        for t in [6.0, 7.0, 8.0] {
            let mut tail = t;
            for k in (2..=60).rev() {
                tail = t + k as f64 / tail;
            }
            let cf = -1.0 / tail;
            assert!(
                (cf - direct(t)).abs() < 1e-8 * cf.abs(),
                "{t}: {cf} vs {}",
                direct(t)
            );
        }
        // far tail: m ≈ −σ/t
        let v = m(40.0, 1.0);
        assert!(v < 0.0 && (v * 40.0 + 1.0).abs() < 2e-3, "{v}");
    }

    #[test]
    fn accumulator_matches_monte_carlo() {
        let mut rng = crate::seeded_rng(11);
        let data: Vec<f64> = (0..2 * 2 * 100 * 100)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let t = Tensor::new(&[2, 2, 100, 100], data).unwrap();
        let mut acc = MarginAccumulator::new();
        acc.observe("group0", &t).unwrap();
        let spec = acc.finish().unwrap();
        for &v in spec.get("group0").unwrap() {
            assert!((v + 0.7979).abs() < 0.02, "{v}");
        }
        assert_eq!(
            acc.counts("group0").unwrap().iter().sum::<u64>(),
            (t.data().iter().filter(|v| **v < 0.0).count()) as u64
        );
    }

    #[test]
    fn positive_channel_gets_zero() {
        let t = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, -1.0, -3.0]).unwrap();
        let mut acc = MarginAccumulator::new();
        acc.observe("g", &t).unwrap();
        assert_eq!(acc.finish().unwrap().get("g").unwrap(), &[0.0, -2.0]);
    }

    #[test]
    fn table_round_trip() {
        let spec = MarginSpec::new(
            MarginSource::ClosedForm,
            vec![
                ("group0".into(), vec![-0.1, -1.0 / 3.0]),
                ("group1".into(), vec![0.0]),
            ],
        )
        .unwrap();
        let text = spec.to_table();
        assert!(text.contains("group0 1 "));
        assert_eq!(MarginSpec::from_table(&text).unwrap(), spec);
        assert!(MarginSpec::new(MarginSource::Empirical, vec![("g".into(), vec![0.5])]).is_err());
    }
}
