//! XR frame stream generation: truncated-Gaussian frame sizes, Gamma
//! inter-arrival times, resolution presets.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficProfile {
    pub label: String,
    pub datarate_bps: u64,
    pub fps: f64,
    pub mean_frame_bits: u64,
    /// sigma / mu of the frame-size Gaussian before truncation.
    pub size_sigma_fraction: f64,
    pub trunc_low: f64,
    pub trunc_high: f64,
    pub interarrival_mean: SimTime,
    pub gamma_shape: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrafficError {
    #[error("unknown resolution '{0}', known presets: experimental, 2K, 4K, 8K")]
    UnknownResolution(String),
    #[error("invalid profile '{label}': {reason}")]
    InvalidProfile { label: String, reason: String },
}

impl TrafficProfile {
    /// Preset profiles. All presets run 20 frames/s with a 50 ms mean
    /// inter-arrival; datarates: experimental camera 1.152 Mbps, 2K 40 Mbps,
    /// 4K 90 Mbps, 8K 360 Mbps.
    pub fn preset(resolution: &str) -> Result<TrafficProfile, TrafficError> {
        let datarate_bps: u64 = match resolution {
            "experimental" => 1_152_000,
            "2K" => 40_000_000,
            "4K" => 90_000_000,
            "8K" => 360_000_000,
            other => return Err(TrafficError::UnknownResolution(other.to_string())),
        };
        let fps = 20.0;
        Ok(TrafficProfile {
            label: resolution.to_string(),
            datarate_bps,
            fps,
            mean_frame_bits: (datarate_bps as f64 / fps) as u64,
            size_sigma_fraction: 1.0 / 6.0,
            trunc_low: 0.5,
            trunc_high: 1.5,
            interarrival_mean: SimTime::from_ms(50),
            gamma_shape: 4.0,
        })
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        let err = |reason: &str| TrafficError::InvalidProfile {
            label: self.label.clone(),
            reason: reason.to_string(),
        };
        if (self.mean_frame_bits as f64 * self.fps - self.datarate_bps as f64).abs()
            > self.fps
        {
            return Err(err("mean_frame_bits * fps != datarate_bps"));
        }
        if !(self.trunc_low > 0.0 && self.trunc_low < 1.0 && self.trunc_high > 1.0) {
            return Err(err("truncation bounds must satisfy 0 < low < 1 < high"));
        }
        if self.interarrival_mean == SimTime::ZERO {
            return Err(err("interarrival_mean must be positive"));
        }
        if self.gamma_shape <= 0.0 {
            return Err(err("gamma_shape must be positive"));
        }
        if self.size_sigma_fraction < 0.0 {
            return Err(err("size_sigma_fraction must be non-negative"));
        }
        Ok(())
    }

    /// Uniformly rescales the offered rate by `factor`, keeping the frame
    /// size at the resolution's nominal value: the frame rate scales, the
    /// per-frame statistics do not. This is how load sweeps move along the
    /// x-axis without changing the topology.
    pub fn scaled(&self, factor: f64) -> TrafficProfile {
        assert!(factor > 0.0);
        let mut p = self.clone();
        p.datarate_bps = (self.datarate_bps as f64 * factor).round() as u64;
        p.fps = self.fps * factor;
        p.mean_frame_bits = (p.datarate_bps as f64 / p.fps) as u64;
        p.interarrival_mean =
            SimTime::from_secs_f64(self.interarrival_mean.as_secs_f64() / factor);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XrFrame {
    pub frame_id: u64,
    pub stream_id: u32,
    pub size_bits: u64,
    pub gen_time: SimTime,
}

/// Frame size in bits, drawn by rejection from Normal(mu, sigma) until the
/// sample falls inside [trunc_low, trunc_high] * mu. Clamping instead of
/// rejection would pile probability mass on the bounds.
pub fn sample_frame_size(profile: &TrafficProfile, rng: &mut impl Rng) -> u64 {
    let mu = profile.mean_frame_bits as f64;
    let sigma = profile.size_sigma_fraction * mu;
    if sigma == 0.0 {
        return profile.mean_frame_bits;
    }
    let normal = Normal::new(mu, sigma).expect("valid normal");
    let lo = profile.trunc_low * mu;
    let hi = profile.trunc_high * mu;
    loop {
        let s = normal.sample(rng);
        if s >= lo && s <= hi {
            return s.round() as u64;
        }
    }
}

/// Inter-arrival gap drawn from Gamma(k, theta) with theta = mean / k.
pub fn sample_interarrival(profile: &TrafficProfile, rng: &mut impl Rng) -> SimTime {
    let k = profile.gamma_shape;
    let theta = profile.interarrival_mean.as_secs_f64() / k;
    let gamma = Gamma::new(k, theta).expect("valid gamma");
    let secs = gamma.sample(rng);
    // Gamma samples are positive; guarantee strictly increasing gen times
    // even after rounding to integer nanoseconds.
    SimTime::from_secs_f64(secs).max(SimTime(1))
}

/// Generator state for one XR stream.
#[derive(Debug)]
pub struct StreamState {
    pub stream_id: u32,
    pub profile: TrafficProfile,
    next_frame_id: u64,
    next_gen_time: SimTime,
}

impl StreamState {
    pub fn new(stream_id: u32, profile: TrafficProfile, start_offset: SimTime) -> Self {
        StreamState {
            stream_id,
            profile,
            next_frame_id: 0,
            next_gen_time: start_offset,
        }
    }

    /// Emits the frame due now and advances the stream by one sampled gap.
    pub fn next_frame(&mut self, rng: &mut impl Rng) -> XrFrame {
        let frame = XrFrame {
            frame_id: self.next_frame_id,
            stream_id: self.stream_id,
            size_bits: sample_frame_size(&self.profile, rng),
            gen_time: self.next_gen_time,
        };
        debug_assert!(
            frame.size_bits as f64 >= self.profile.trunc_low * self.profile.mean_frame_bits as f64
                && frame.size_bits as f64
                    <= self.profile.trunc_high * self.profile.mean_frame_bits as f64
        );
        self.next_frame_id += 1;
        self.next_gen_time = self.next_gen_time + sample_interarrival(&self.profile, rng);
        frame
    }

    pub fn next_gen_time(&self) -> SimTime {
        self.next_gen_time
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::derive_rng;

    #[test]
    fn presets_match_datarates() {
        assert_eq!(TrafficProfile::preset("2K").unwrap().datarate_bps, 40_000_000);
        assert_eq!(
            TrafficProfile::preset("8K").unwrap().mean_frame_bits,
            18_000_000
        );
        let exp = TrafficProfile::preset("experimental").unwrap();
        assert_eq!(exp.datarate_bps, 1_152_000);
        assert_eq!(exp.fps, 20.0);
        assert_eq!(exp.mean_frame_bits, 57_600);
        assert_eq!(exp.interarrival_mean, SimTime::from_ms(50));
    }

    #[test]
    fn unknown_preset_lists_known() {
        let err = TrafficProfile::preset("16K").unwrap_err();
        assert!(err.to_string().contains("2K"));
    }

    #[test]
    fn zero_sigma_returns_mean() {
        let mut p = TrafficProfile::preset("4K").unwrap();
        p.size_sigma_fraction = 0.0;
        let mut rng = derive_rng(1, "t");
        for _ in 0..100 {
            assert_eq!(sample_frame_size(&p, &mut rng), p.mean_frame_bits);
        }
    }

    #[test]
    fn samples_respect_truncation_bounds() {
        let p = TrafficProfile::preset("8K").unwrap();
        let mut rng = derive_rng(2, "t");
        let lo = (p.trunc_low * p.mean_frame_bits as f64) as u64;
        let hi = (p.trunc_high * p.mean_frame_bits as f64) as u64;
        for _ in 0..100_000 {
            let s = sample_frame_size(&p, &mut rng);
            assert!(s >= lo && s <= hi, "sample {s} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn size_mean_converges_to_mu() {
        // symmetric truncation keeps the mean at mu
        let p = TrafficProfile::preset("8K").unwrap();
        let mut rng = derive_rng(3, "t");
        let n = 100_000;
        let sum: f64 = (0..n).map(|_| sample_frame_size(&p, &mut rng) as f64).sum();
        let mean = sum / n as f64;
        let mu = p.mean_frame_bits as f64;
        assert!((mean - mu).abs() / mu < 0.01, "mean {mean} vs mu {mu}");
    }

    #[test]
    fn gamma_shape_one_is_exponential() {
        let mut p = TrafficProfile::preset("2K").unwrap();
        p.gamma_shape = 1.0;
        let mut rng = derive_rng(4, "t");
        let n = 100_000;
        let above = (0..n)
            .filter(|_| sample_interarrival(&p, &mut rng) > SimTime::from_ms(50))
            .count();
        let frac = above as f64 / n as f64;
        let expected = (-1.0f64).exp();
        assert!((frac - expected).abs() < 0.01, "P(X>mean) {frac} vs e^-1");
    }

    #[test]
    fn interarrival_mean_and_variance() {
        let p = TrafficProfile::preset("2K").unwrap();
        let mut rng = derive_rng(5, "t");
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| sample_interarrival(&p, &mut rng).as_secs_f64())
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.050).abs() / 0.050 < 0.01, "mean {mean}");
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let theta = 0.050 / p.gamma_shape;
        let expected = p.gamma_shape * theta * theta;
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn stream_ids_and_times_advance() {
        let p = TrafficProfile::preset("4K").unwrap();
        let start = SimTime::from_ms(3);
        let mut s = StreamState::new(7, p, start);
        let mut rng = derive_rng(6, "t");
        let first = s.next_frame(&mut rng);
        assert_eq!(first.frame_id, 0);
        assert_eq!(first.gen_time, start);
        let mut prev = first.gen_time;
        for i in 1..10_000u64 {
            let f = s.next_frame(&mut rng);
            assert_eq!(f.frame_id, i);
            assert!(f.gen_time > prev);
            prev = f.gen_time;
        }
    }

    #[test]
    fn long_run_offered_rate_matches_datarate() {
        let p = TrafficProfile::preset("2K").unwrap();
        let rate = p.datarate_bps as f64;
        let mut s = StreamState::new(0, p, SimTime::ZERO);
        let mut rng = derive_rng(7, "t");
        let n = 100_000;
        let mut bits = 0u64;
        let mut last = SimTime::ZERO;
        for _ in 0..n {
            let f = s.next_frame(&mut rng);
            bits += f.size_bits;
            last = f.gen_time;
        }
        let offered = bits as f64 / last.as_secs_f64();
        assert!((offered - rate).abs() / rate < 0.02, "offered {offered} vs {rate}");
    }

    #[test]
    fn scaled_profile_keeps_frame_size() {
        let p = TrafficProfile::preset("8K").unwrap();
        let s = p.scaled(2.0);
        assert_eq!(s.mean_frame_bits, p.mean_frame_bits);
        assert_eq!(s.datarate_bps, 720_000_000);
        assert_eq!(s.interarrival_mean, SimTime::from_ms(25));
        s.validate().unwrap();
    }

    #[test]
    fn determinism_same_seed_same_frames() {
        let p = TrafficProfile::preset("4K").unwrap();
        let gen = |seed| {
            let mut s = StreamState::new(0, p.clone(), SimTime::ZERO);
            let mut rng = derive_rng(seed, "traffic.0");
            (0..1000).map(|_| s.next_frame(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(gen(9), gen(9));
        assert_ne!(gen(9), gen(10));
    }
}
