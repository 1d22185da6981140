//! Radially binned Fourier amplitude of feature maps, relative to the lowest bin.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Amplitudes at or below this are treated as zero.
pub const AMP_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumCurve {
    /// Lower edge of each bin as a fraction of the half-diagonal Nyquist radius.
    pub freqs: Vec<f64>,
    /// `log(mean amplitude in bin) - log(mean amplitude in bin 0)`.
    pub delta_log_amp: Vec<f64>,
    /// Bins whose mean amplitude hit [`AMP_FLOOR`].
    pub floored: Vec<bool>,
    /// DFT coefficients per bin; sums to `H * W`.
    pub populations: Vec<usize>,
}

/// Bin of every DFT coefficient of an `h x w` map, row-major.
pub fn radial_bins(h: usize, w: usize, n_bins: usize) -> Vec<usize> {
    let signed = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    let nyquist = (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
    (0..h * w)
        .map(|i| {
            let (fu, fv) = (signed(i / w, h), signed(i % w, w));
            let r = (fu * fu + fv * fv).sqrt() / nyquist;
            ((r * n_bins as f64).floor() as usize).min(n_bins - 1)
        })
        .collect()
}

pub fn default_bins(h: usize, w: usize) -> usize {
    (h.min(w) / 2).max(2)
}

/// Accumulates per-bin amplitude sums over any number of `h x w` maps.
struct Accumulator {
    h: usize,
    w: usize,
    n_bins: usize,
    bins: Vec<usize>,
    sums: Vec<f64>,
    maps: usize,
    row_fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex<f64>>,
    col: Vec<Complex<f64>>,
}

impl Accumulator {
    fn new(h: usize, w: usize, n_bins: usize) -> Result<Self> {
        if h < 4 || w < 4 {
            return Err(Error::shape(format!("spectrum needs H, W >= 4, got {h}x{w}")));
        }
        if n_bins < 2 {
            return Err(Error::invalid("n_bins must be >= 2"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            h,
            w,
            n_bins,
            bins: radial_bins(h, w, n_bins),
            sums: vec![0.0; n_bins],
            maps: 0,
            row_fft: planner.plan_fft_forward(w),
            col_fft: planner.plan_fft_forward(h),
            buf: vec![Complex::default(); h * w],
            col: vec![Complex::default(); h],
        })
    }

    fn add_map(&mut self, map: &[f64]) {
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        for (b, &v) in self.buf.iter_mut().zip(map) {
            *b = Complex::new(v - mean, 0.0);
        }
        for row in self.buf.chunks_exact_mut(self.w) {
            self.row_fft.process(row);
        }
        for x in 0..self.w {
            for y in 0..self.h {
                self.col[y] = self.buf[y * self.w + x];
            }
            self.col_fft.process(&mut self.col);
            for y in 0..self.h {
                self.buf[y * self.w + x] = self.col[y];
            }
        }
        for (i, c) in self.buf.iter().enumerate() {
            self.sums[self.bins[i]] += c.norm();
        }
        self.maps += 1;
    }

    fn finish(self) -> SpectrumCurve {
        let mut populations = vec![0usize; self.n_bins];
        for &b in &self.bins {
            populations[b] += 1;
        }
        let logs: Vec<(f64, bool)> = (0..self.n_bins)
            .map(|b| {
                let m = self.sums[b] / (populations[b].max(1) * self.maps.max(1)) as f64;
                if m > AMP_FLOOR {
                    (m.ln(), false)
                } else {
                    (AMP_FLOOR.ln(), true)
                }
            })
            .collect();
        SpectrumCurve {
            freqs: (0..self.n_bins).map(|b| b as f64 / self.n_bins as f64).collect(),
            delta_log_amp: logs.iter().map(|(l, _)| l - logs[0].0).collect(),
            floored: logs.iter().map(|&(_, f)| f).collect(),
            populations,
        }
    }
}

fn maps_of<T: Scalar>(feature: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let sh = feature.shape();
    match sh.len() {
        3 => Ok((sh[0], sh[1], sh[2])),
        4 => Ok((sh[0] * sh[1], sh[2], sh[3])),
        _ => Err(Error::shape(format!("expected [C,H,W] or [B,C,H,W], got {sh:?}"))),
    }
}

/// Mean-centred 2-D DFT amplitude of every channel (and sample, for 4-D input),
/// averaged, binned by radius, logged and referenced to bin 0.
pub fn radial_log_amplitude<T: Scalar>(feature: &Tensor<T>, n_bins: Option<usize>) -> Result<SpectrumCurve> {
    let (maps, h, w) = maps_of(feature)?;
    if !feature.all_finite() {
        return Err(Error::NonFinite("feature contains NaN or infinity".into()));
    }
    let mut acc = Accumulator::new(h, w, n_bins.unwrap_or_else(|| default_bins(h, w)))?;
    let data = feature.to_f64_vec();
    for m in 0..maps {
        acc.add_map(&data[m * h * w..(m + 1) * h * w]);
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchComparison {
    pub vit: SpectrumCurve,
    pub cnn: SpectrumCurve,
    /// Mean CNN minus mean ViT `delta_log_amp` over the top-third bins.
    pub high_freq_gap: f64,
    pub top_bins: usize,
    /// Top-third bins where the CNN curve lies strictly above the ViT curve.
    pub cnn_higher_bins: usize,
}

/// Number of bins counted as the top third (rounded up).
pub fn top_third(n_bins: usize) -> usize {
    n_bins.div_ceil(3)
}

pub fn compare_branches<T: Scalar>(
    vit_embedding: &Tensor<T>,
    cnn_final: &Tensor<T>,
    n_bins: Option<usize>,
) -> Result<BranchComparison> {
    let (_, h, w) = maps_of(vit_embedding)?;
    let (_, hc, wc) = maps_of(cnn_final)?;
    let bins = n_bins.unwrap_or_else(|| default_bins(h.min(hc), w.min(wc)));
    let vit = radial_log_amplitude(vit_embedding, Some(bins))?;
    let cnn = radial_log_amplitude(cnn_final, Some(bins))?;
    let k = top_third(bins);
    let top = bins - k..bins;
    let mean = |c: &SpectrumCurve| c.delta_log_amp[top.clone()].iter().sum::<f64>() / k as f64;
    let high_freq_gap = mean(&cnn) - mean(&vit);
    let cnn_higher_bins = top.clone().filter(|&b| cnn.delta_log_amp[b] > vit.delta_log_amp[b]).count();
    Ok(BranchComparison {
        vit,
        cnn,
        high_freq_gap,
        top_bins: k,
        cnn_higher_bins,
    })
}

impl BranchComparison {
    /// `branch,freq,delta_log_amp` rows followed by `high_freq_gap,<value>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("branch,freq,delta_log_amp\n");
        for (name, c) in [("vit", &self.vit), ("cnn", &self.cnn)] {
            for (f, d) in c.freqs.iter().zip(&c.delta_log_amp) {
                let _ = writeln!(s, "{name},{f},{d}");
            }
        }
        let _ = writeln!(s, "high_freq_gap,{}", self.high_freq_gap);
        s
    }
}
