//! Offline EMG and joint-angle preprocessing.
//!
//! EMG: band-pass (10-450 Hz) -> full-wave rectification -> 7 Hz low-pass
//! envelope -> MVC normalization -> decimation by 32 (4000 Hz -> 125 Hz).
//! Angles: truncated Gaussian smoothing -> central differences.
//!
//! Filters are 4th-order Butterworth sections applied forward and backward,
//! so the envelope has zero phase lag relative to the kinematics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel signal stored channel-major: `channels[c][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmg {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

/// MVC-normalized envelope, values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgEnvelope {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

/// Joint angles in radians, one series per degree of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSeries {
    pub dofs: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

impl RawEmg {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        check_rate(sample_rate)?;
        check_rectangular(&channels)?;
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite EMG sample".into()));
        }
        Ok(RawEmg {
            channels,
            sample_rate,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }
}

impl EmgEnvelope {
    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// The value of every channel at step `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[i]).collect()
    }
}

impl AngleSeries {
    pub fn new(dofs: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        check_rate(sample_rate)?;
        check_rectangular(&dofs)?;
        if dofs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite joint angle".into()));
        }
        Ok(AngleSeries { dofs, sample_rate })
    }

    pub fn n_samples(&self) -> usize {
        self.dofs.first().map_or(0, Vec::len)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sample rate must be > 0, got {rate}")))
    }
}

fn check_rectangular(channels: &[Vec<f64>]) -> Result<()> {
    let Some(first) = channels.first() else {
        return Err(Error::InvalidParameter("at least one channel is required".into()));
    };
    if channels.iter().any(|c| c.len() != first.len()) {
        return Err(Error::ShapeMismatch("channels have different lengths".into()));
    }
    Ok(())
}

/// Direct-form II transposed biquad coefficients, normalized so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn lowpass(cutoff: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos) / a0;
        Biquad {
            b: [0.5 * b1, b1, 0.5 * b1],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn highpass(cutoff: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = -(1.0 + cos) / a0;
        Biquad {
            b: [-0.5 * b1, b1, -0.5 * b1],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }
}

/// Q factors of the second-order sections of an even-order Butterworth filter.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (1..=order / 2)
        .map(|k| {
            let theta = (2 * k - 1) as f64 * PI / (2 * order) as f64;
            1.0 / (2.0 * theta.cos())
        })
        .collect()
}

pub const BUTTERWORTH_ORDER: usize = 4;

/// A cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn butter_lowpass(order: usize, cutoff: f64, rate: f64) -> Self {
        SosFilter {
            sections: butterworth_qs(order)
                .into_iter()
                .map(|q| Biquad::lowpass(cutoff, rate, q))
                .collect(),
        }
    }

    pub fn butter_highpass(order: usize, cutoff: f64, rate: f64) -> Self {
        SosFilter {
            sections: butterworth_qs(order)
                .into_iter()
                .map(|q| Biquad::highpass(cutoff, rate, q))
                .collect(),
        }
    }

    /// High-pass at `lo` cascaded with low-pass at `hi`.
    pub fn butter_bandpass(order: usize, lo: f64, hi: f64, rate: f64) -> Self {
        let mut sections = Self::butter_highpass(order, lo, rate).sections;
        sections.extend(Self::butter_lowpass(order, hi, rate).sections);
        SosFilter { sections }
    }

    /// Steady-state section states for a constant input of 1.
    fn steady_state(&self) -> Vec<[f64; 2]> {
        let mut u = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let y = s.dc_gain() * u;
                let z = [y - s.b[0] * u, s.b[2] * u - s.a[1] * y];
                u = y;
                z
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], init_scale: f64) {
        let mut states: Vec<[f64; 2]> = self
            .steady_state()
            .into_iter()
            .map(|[a, b]| [a * init_scale, b * init_scale])
            .collect();
        for v in x.iter_mut() {
            let mut u = *v;
            for (s, z) in self.sections.iter().zip(states.iter_mut()) {
                let y = s.b[0] * u + z[0];
                z[0] = s.b[1] * u - s.a[0] * y + z[1];
                z[1] = s.b[2] * u - s.a[1] * y;
                u = y;
            }
            *v = u;
        }
    }

    /// Causal single pass, starting from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, 0.0);
        y
    }

    /// Zero-phase forward-backward filtering with odd-reflection padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn map_channels(x: &RawEmg, f: impl Fn(&[f64]) -> Vec<f64>) -> RawEmg {
    RawEmg {
        channels: x.channels.iter().map(|c| f(c)).collect(),
        sample_rate: x.sample_rate,
    }
}

pub fn bandpass(raw: &RawEmg, lo: f64, hi: f64) -> Result<RawEmg> {
    let rate = raw.sample_rate;
    if !(lo > 0.0 && lo < hi && hi < rate / 2.0) {
        return Err(Error::InvalidBand { lo, hi, rate });
    }
    let filter = SosFilter::butter_bandpass(BUTTERWORTH_ORDER, lo, hi, rate);
    Ok(map_channels(raw, |c| filter.filtfilt(c)))
}

pub fn rectify(x: &RawEmg) -> RawEmg {
    map_channels(x, |c| c.iter().map(|v| v.abs()).collect())
}

pub fn lowpass_envelope(x: &RawEmg, cutoff: f64) -> Result<RawEmg> {
    let rate = x.sample_rate;
    if !(cutoff > 0.0 && cutoff < rate / 2.0) {
        return Err(Error::InvalidCutoff { cutoff, rate });
    }
    let filter = SosFilter::butter_lowpass(BUTTERWORTH_ORDER, cutoff, rate);
    Ok(map_channels(x, |c| filter.filtfilt(c)))
}

/// Divides each channel by its MVC value and clips to `[0, 1]`. Also returns
/// how many samples exceeded the MVC.
pub fn mvc_normalize(x: &RawEmg, mvc: &[f64]) -> Result<(EmgEnvelope, usize)> {
    if mvc.len() != x.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} MVC values for {} channels",
            mvc.len(),
            x.n_channels()
        )));
    }
    if let Some((channel, &value)) = mvc.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidMvc { channel, value });
    }
    let mut clipped = 0;
    let channels = x
        .channels
        .iter()
        .zip(mvc)
        .map(|(c, &m)| {
            c.iter()
                .map(|v| {
                    let r = v / m;
                    if r > 1.0 {
                        clipped += 1;
                    }
                    r.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok((
        EmgEnvelope {
            channels,
            sample_rate: x.sample_rate,
        },
        clipped,
    ))
}

/// Keeps every `factor`-th sample starting at index 0; output length is
/// `n / factor` rounded down.
pub fn downsample(x: &EmgEnvelope, factor: usize) -> Result<EmgEnvelope> {
    let n = x.n_samples();
    if factor == 0 || n < factor {
        return Err(Error::InvalidFactor { factor, len: n });
    }
    let keep = n / factor;
    Ok(EmgEnvelope {
        channels: x
            .channels
            .iter()
            .map(|c| c.iter().step_by(factor).take(keep).copied().collect())
            .collect(),
        sample_rate: x.sample_rate / factor as f64,
    })
}

/// Unit-sum Gaussian kernel of `window` taps centered at `(window - 1) / 2`.
pub fn gaussian_kernel(sigma: f64, window: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) || window == 0 {
        return Err(Error::InvalidParameter(format!(
            "gaussian smoothing needs sigma > 0 and window >= 1, got sigma={sigma}, window={window}"
        )));
    }
    let center = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|j| {
            let d = j as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

pub fn gaussian_smooth(a: &AngleSeries, sigma: f64, window: usize) -> Result<AngleSeries> {
    let kernel = gaussian_kernel(sigma, window)?;
    let start = (window as isize - 1) / 2;
    let n = a.n_samples();
    let dofs = a
        .dofs
        .iter()
        .map(|series| {
            (0..n)
                .map(|i| {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(j, w)| w * series[reflect_index(i as isize + j as isize - start, n)])
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(AngleSeries {
        dofs,
        sample_rate: a.sample_rate,
    })
}

/// Differentiated kinematics, one series per degree of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub velocities: Vec<Vec<f64>>,
    pub accelerations: Vec<Vec<f64>>,
}

/// Second-order central differences in the interior and second-order
/// one-sided differences at both ends.
pub fn central_difference(a: &AngleSeries) -> Result<Derivatives> {
    let n = a.n_samples();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let dt = 1.0 / a.sample_rate;
    let mut velocities = Vec::with_capacity(a.dofs.len());
    let mut accelerations = Vec::with_capacity(a.dofs.len());
    for q in &a.dofs {
        let mut qd = vec![0.0; n];
        let mut qdd = vec![0.0; n];
        for i in 1..n - 1 {
            qd[i] = (q[i + 1] - q[i - 1]) / (2.0 * dt);
            qdd[i] = (q[i + 1] - 2.0 * q[i] + q[i - 1]) / (dt * dt);
        }
        qd[0] = (-3.0 * q[0] + 4.0 * q[1] - q[2]) / (2.0 * dt);
        qd[n - 1] = (3.0 * q[n - 1] - 4.0 * q[n - 2] + q[n - 3]) / (2.0 * dt);
        if n >= 4 {
            qdd[0] = (2.0 * q[0] - 5.0 * q[1] + 4.0 * q[2] - q[3]) / (dt * dt);
            qdd[n - 1] = (2.0 * q[n - 1] - 5.0 * q[n - 2] + 4.0 * q[n - 3] - q[n - 4]) / (dt * dt);
        } else {
            qdd[0] = qdd[1];
            qdd[n - 1] = qdd[1];
        }
        velocities.push(qd);
        accelerations.push(qdd);
    }
    Ok(Derivatives {
        velocities,
        accelerations,
    })
}

/// Parameters of the EMG envelope pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmgPipeline {
    pub band_lo: f64,
    pub band_hi: f64,
    pub envelope_cutoff: f64,
    pub downsample_factor: usize,
}

impl Default for EmgPipeline {
    fn default() -> Self {
        EmgPipeline {
            band_lo: 10.0,
            band_hi: 450.0,
            envelope_cutoff: 7.0,
            downsample_factor: 32,
        }
    }
}

impl EmgPipeline {
    /// Band-pass, rectify, envelope, normalize and decimate. Returns the
    /// envelope and the number of samples clipped at MVC.
    pub fn run(&self, raw: &RawEmg, mvc: &[f64]) -> Result<(EmgEnvelope, usize)> {
        let filtered = bandpass(raw, self.band_lo, self.band_hi)?;
        let envelope = lowpass_envelope(&rectify(&filtered), self.envelope_cutoff)?;
        let (normalized, clipped) = mvc_normalize(&envelope, mvc)?;
        Ok((downsample(&normalized, self.downsample_factor)?, clipped))
    }
}

/// Parameters of the joint-angle smoothing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnglePipeline {
    pub gaussian_sigma: f64,
    pub gaussian_window: usize,
}

impl Default for AnglePipeline {
    fn default() -> Self {
        AnglePipeline {
            gaussian_sigma: 10.0,
            gaussian_window: 6,
        }
    }
}

impl AnglePipeline {
    pub fn run(&self, angles: &AngleSeries) -> Result<(AngleSeries, Derivatives)> {
        let smooth = gaussian_smooth(angles, self.gaussian_sigma, self.gaussian_window)?;
        let derivs = central_difference(&smooth)?;
        Ok((smooth, derivs))
    }
}
