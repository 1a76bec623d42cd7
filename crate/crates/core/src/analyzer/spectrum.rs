use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::tensor::{Eager, Scalar, TapKind, Tensor};

/// Number of linear radius bins over `r ∈ [0, √2]`, where `r` is the spatial
/// frequency as a fraction of Nyquist along each axis.
pub const RADIAL_BINS: usize = 16;
/// Energy below this fraction of Nyquist counts as low frequency.
pub const LOW_FREQ_CUTOFF: f64 = 0.25;

/// Radially binned power spectrum of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    /// `f1`..`f5` inside a multi-frequency block, or a free label.
    pub branch: String,
    /// Block the feature came from; empty for a standalone profile.
    pub block: String,
    /// Fraction of energy per bin; sums to 1.
    pub radial_bins: Vec<f64>,
    pub low_freq_ratio: f64,
    /// `Σ x²` over the map, channel-averaged.
    pub spatial_energy: f64,
    /// `Σ |X|² / (H·W)`, channel-averaged. Equals `spatial_energy` up to
    /// rounding.
    pub spectral_energy: f64,
}

impl SpectrumProfile {
    /// Upper edge of each radial bin as a fraction of Nyquist.
    pub fn bin_edges() -> Vec<f64> {
        let top = std::f64::consts::SQRT_2;
        (1..=RADIAL_BINS).map(|i| top * i as f64 / RADIAL_BINS as f64).collect()
    }
}

fn fft2(plane: &mut [Complex64], h: usize, w: usize, planner: &mut FftPlanner<f64>) {
    let row = planner.plan_fft_forward(w);
    for r in plane.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut buf = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = plane[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            plane[y * w + x] = buf[y];
        }
    }
}

/// Frequency of DFT index `k` of an `n`-point transform as a fraction of
/// Nyquist, folded to `[0, 1]`.
fn nyquist_fraction(k: usize, n: usize) -> f64 {
    let f = k.min(n - k) as f64 / n as f64;
    f / 0.5
}

/// Power spectrum of a `(1, C, H, W)` map: per-channel 2-D DFT power,
/// averaged over channels, binned by radius and normalised.
///
/// An all-zero map has no energy to distribute; it is treated as a constant
/// and reported entirely in the DC bin.
pub fn fourier_spectrum<T: Scalar>(feature: &Tensor<T>) -> Result<SpectrumProfile> {
    let [n, c, h, w] = feature.dims();
    if n != 1 {
        return Err(Error::Invalid(format!("spectrum needs a single feature map, got batch {n}")));
    }
    if h * w < 2 || c == 0 {
        return Err(Error::Invalid(format!("spectrum of a degenerate {c}x{h}x{w} map")));
    }
    let mut planner = FftPlanner::new();
    let mut power = vec![0f64; h * w];
    let mut spatial = 0f64;
    let mut plane = vec![Complex64::default(); h * w];
    for ch in 0..c {
        let src = &feature.data()[ch * h * w..(ch + 1) * h * w];
        for (p, v) in plane.iter_mut().zip(src) {
            let v = v.as_f64();
            spatial += v * v;
            *p = Complex64::new(v, 0.0);
        }
        fft2(&mut plane, h, w, &mut planner);
        for (acc, p) in power.iter_mut().zip(&plane) {
            *acc += p.norm_sqr();
        }
    }
    let mut bins = vec![0f64; RADIAL_BINS];
    let mut low = 0f64;
    let top = std::f64::consts::SQRT_2;
    for y in 0..h {
        let fy = nyquist_fraction(y, h);
        for x in 0..w {
            let fx = nyquist_fraction(x, w);
            let r = (fy * fy + fx * fx).sqrt();
            let e = power[y * w + x];
            let bin = ((r / top * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1);
            bins[bin] += e;
            if r < LOW_FREQ_CUTOFF {
                low += e;
            }
        }
    }
    let total: f64 = bins.iter().sum();
    let low_freq_ratio = if total > 0.0 {
        for b in &mut bins {
            *b /= total;
        }
        low / total
    } else {
        bins[0] = 1.0;
        1.0
    };
    Ok(SpectrumProfile {
        branch: String::new(),
        block: String::new(),
        radial_bins: bins,
        low_freq_ratio,
        spatial_energy: spatial / c as f64,
        spectral_energy: total / (h * w) as f64 / c as f64,
    })
}

/// Profiles of the five frequency-branch features of every multi-frequency
/// block, in forward order, for a single `(1, C, H, W)` input.
///
/// `f1` is the attention branch output, `f2` the block input and `f3..f5`
/// the three cascaded convolutional branches.
pub fn branch_spectrum_report(model: &Model, x: &Tensor) -> Result<Vec<SpectrumProfile>> {
    if x.dims()[0] != 1 {
        return Err(Error::Invalid(format!("spectrum report needs one sample, got {}", x.dims()[0])));
    }
    let mut e = Eager::<f32>::inference().with_taps();
    model.forward(&mut e, x)?;
    let mut out = Vec::new();
    for (path, kind, t) in e.take_taps() {
        if kind != TapKind::Spectrum {
            continue;
        }
        let (block, name) = path.rsplit_once('.').unwrap_or(("", path.as_str()));
        let mut p = fourier_spectrum(&t)?;
        p.block = block.to_string();
        p.branch = name.trim_start_matches("tap_").to_string();
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "variant `{}` has no multi-frequency block to profile",
            model.spec.name
        )));
    }
    Ok(out)
}
