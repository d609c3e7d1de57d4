//! K-mer counting and the solid-k-mer threshold.
//!
//! The abundance histogram is smoothed by a Gaussian kernel density estimate
//! (one sample per distinct k-mer, at its count). The base bandwidth is
//! Silverman's rule of thumb scaled by a user factor; when the curve still has
//! more than one internal local minimum below its rightmost local maximum the
//! factor doubles, up to ten times. The threshold is the rounded midpoint
//! between the first internal local minimum and the nearest local maximum to
//! its left (the left data boundary stands in for that maximum when the curve
//! is monotone decreasing up to the minimum).

use std::collections::HashMap;
use std::io::{self, Write};

use crate::seqio::{kmer_windows, KmerBits, ReadSet};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Multiset of canonical k-mers with occurrence counts.
#[derive(Debug, Clone)]
pub struct KmerSpectrum {
    pub k: usize,
    pub counts: HashMap<KmerBits, u32>,
}

impl KmerSpectrum {
    /// Builds a spectrum from (count, multiplicity) pairs. The synthetic keys
    /// are sequential and never decoded; tests and calibration use this.
    pub fn from_count_multiset(k: usize, entries: &[(u32, usize)]) -> Self {
        let mut counts = HashMap::new();
        let mut next: u64 = 0;
        for &(count, mult) in entries {
            for _ in 0..mult {
                counts.insert([next, 0, 0, 0], count.max(1));
                next += 1;
            }
        }
        KmerSpectrum { k, counts }
    }

    pub fn total_kmers(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    /// Histogram of abundance -> number of distinct k-mers, sorted ascending.
    pub fn histogram(&self) -> Vec<(u32, usize)> {
        let mut h: HashMap<u32, usize> = HashMap::new();
        for &c in self.counts.values() {
            *h.entry(c).or_insert(0) += 1;
        }
        let mut v: Vec<_> = h.into_iter().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CountMode {
    Canonical,
    ForwardOnly,
}

#[derive(Debug, thiserror::Error)]
pub enum SpectrumError {
    #[error("k = {k} exceeds the minimum read length {min_len}")]
    KTooLargeForReads { k: usize, min_len: usize },
    #[error("empty spectrum")]
    Empty,
}

fn count_into(map: &mut HashMap<KmerBits, u32>, seq: &[u8], k: usize, canonical: bool) {
    for (_, bits, _) in kmer_windows(seq, k, canonical) {
        *map.entry(bits).or_insert(0) += 1;
    }
}

/// Counts canonical (or forward-only) k-mers across both mates of every pair.
pub fn count_kmers(reads: &ReadSet, k: usize, mode: CountMode) -> Result<KmerSpectrum, SpectrumError> {
    let min_len = reads.min_read_len();
    if k > min_len {
        return Err(SpectrumError::KTooLargeForReads { k, min_len });
    }
    let canonical = matches!(mode, CountMode::Canonical);

    #[cfg(feature = "parallel")]
    let counts = reads
        .pairs
        .par_iter()
        .fold(HashMap::new, |mut map, pair| {
            count_into(&mut map, &pair.left, k, canonical);
            count_into(&mut map, &pair.right, k, canonical);
            map
        })
        .reduce(HashMap::new, |mut a, b| {
            for (bits, c) in b {
                *a.entry(bits).or_insert(0) += c;
            }
            a
        });

    #[cfg(not(feature = "parallel"))]
    let counts = {
        let mut map = HashMap::new();
        for pair in &reads.pairs {
            count_into(&mut map, &pair.left, k, canonical);
            count_into(&mut map, &pair.right, k, canonical);
        }
        map
    };

    Ok(KmerSpectrum { k, counts })
}

/// Gaussian KDE of the abundance distribution over an integer grid.
#[derive(Debug, Clone)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.grid.windows(2).zip(self.density.windows(2)) {
            let (xs, ys) = w;
            acc += (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    /// Valley found between the error mode and the genomic mode.
    KdeValley,
    /// Degenerate spectrum: no internal minimum after ten doublings.
    DegenerateFallback,
}

#[derive(Debug, Clone)]
pub struct KdeOptions {
    pub oversmooth: f64,
    /// When true, each k-mer contributes `count` samples instead of one.
    pub count_weighted: bool,
}

impl Default for KdeOptions {
    fn default() -> Self {
        KdeOptions {
            oversmooth: 1.0,
            count_weighted: false,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = percentile(&sorted, 0.75) - percentile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        0.5
    }
}

/// Evaluates the KDE on the integer grid `1..=grid_max` with the left tail
/// reflected about 1 so the curve integrates to one over the k-mer support.
fn evaluate_density(samples: &[f64], h: f64, grid_max: usize) -> DensityCurve {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * samples.len() as f64);
    let mut grid = Vec::with_capacity(grid_max);
    let mut density = Vec::with_capacity(grid_max);
    for gi in 1..=grid_max {
        let x = gi as f64;
        let mut acc = 0.0;
        for &xi in samples {
            let d = (x - xi) / h;
            acc += (-0.5 * d * d).exp();
            // reflection of the sample about the left support boundary
            let dr = (x - (2.0 - xi)) / h;
            acc += (-0.5 * dr * dr).exp();
        }
        grid.push(x);
        density.push(acc * norm);
    }
    DensityCurve {
        grid,
        density,
        bandwidth: h,
    }
}

/// Indices of strict local maxima and minima after collapsing plateaus.
fn extrema(density: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let n = density.len();
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    if n < 3 {
        return (maxima, minima);
    }
    let mut i = 1;
    while i < n - 1 {
        // collapse a plateau to its first index
        let mut j = i;
        while j + 1 < n && (density[j + 1] - density[i]).abs() < 1e-15 {
            j += 1;
        }
        let left = density[i - 1];
        let right = if j + 1 < n { density[j + 1] } else { density[j] };
        let mid = (i + j) / 2;
        if density[i] > left && density[i] > right {
            maxima.push(mid);
        } else if density[i] < left && density[i] < right {
            minima.push(mid);
        }
        i = j + 1;
    }
    (maxima, minima)
}

/// Internal local minima that lie left of the rightmost local maximum.
pub fn internal_minima_below_rightmost_max(density: &[f64]) -> Vec<usize> {
    let (maxima, minima) = extrema(density);
    match maxima.last() {
        None => Vec::new(),
        Some(&rm) => minima.into_iter().filter(|&m| m < rm).collect(),
    }
}

/// Estimates the density and selects the solid-k-mer abundance threshold.
pub fn kde_threshold(
    spectrum: &KmerSpectrum,
    opts: &KdeOptions,
) -> Result<(DensityCurve, u32, ThresholdMethod), SpectrumError> {
    if spectrum.counts.is_empty() {
        return Err(SpectrumError::Empty);
    }
    let mut samples: Vec<f64> = Vec::new();
    for &c in spectrum.counts.values() {
        if opts.count_weighted {
            for _ in 0..c {
                samples.push(c as f64);
            }
        } else {
            samples.push(c as f64);
        }
    }
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cap = percentile(&sorted, 0.999);

    let base = silverman_bandwidth(&samples);
    let mut factor = opts.oversmooth.max(1.0);
    let mut curve;
    let mut doublings = 0;
    loop {
        let h = base * factor;
        let grid_max = (cap + 6.0 * h).ceil().max(2.0) as usize;
        curve = evaluate_density(&samples, h, grid_max);
        let mins = internal_minima_below_rightmost_max(&curve.density);
        if mins.len() <= 1 || doublings >= 10 {
            break;
        }
        factor *= 2.0;
        doublings += 1;
    }

    let mins = internal_minima_below_rightmost_max(&curve.density);
    match mins.first() {
        None => Ok((curve, 2, ThresholdMethod::DegenerateFallback)),
        Some(&min_idx) => {
            let (maxima, _) = extrema(&curve.density);
            let left_max = maxima
                .iter()
                .copied()
                .filter(|&m| m < min_idx)
                .max()
                .map(|m| curve.grid[m])
                .unwrap_or(curve.grid[0]);
            let t = ((curve.grid[min_idx] + left_max) / 2.0).round().max(1.0) as u32;
            Ok((curve, t, ThresholdMethod::KdeValley))
        }
    }
}

/// Canonical k-mers whose count reaches the threshold.
#[derive(Debug, Clone)]
pub struct SolidSet {
    pub k: usize,
    pub threshold: u32,
    pub kmers: std::collections::HashSet<KmerBits>,
    pub canonical: bool,
}

pub fn filter_solid(spectrum: &KmerSpectrum, t: u32, canonical: bool) -> SolidSet {
    SolidSet {
        k: spectrum.k,
        threshold: t.max(1),
        kmers: spectrum
            .counts
            .iter()
            .filter(|&(_, &c)| c >= t)
            .map(|(&bits, _)| bits)
            .collect(),
        canonical,
    }
}

/// Histogram and density dump for plotting, one TSV row per grid point.
pub fn write_density_tsv<W: Write>(w: &mut W, curve: &DensityCurve) -> io::Result<()> {
    writeln!(w, "abundance\tdensity")?;
    for (x, y) in curve.grid.iter().zip(&curve.density) {
        writeln!(w, "{x}\t{y:.6e}")?;
    }
    Ok(())
}

pub fn write_histogram_tsv<W: Write>(w: &mut W, spectrum: &KmerSpectrum) -> io::Result<()> {
    writeln!(w, "abundance\tdistinct_kmers")?;
    for (count, n) in spectrum.histogram() {
        writeln!(w, "{count}\t{n}")?;
    }
    Ok(())
}
