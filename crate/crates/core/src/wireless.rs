//! Channel, rate, delay and energy models.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};

use crate::error::{invalid, Result};

/// Converts a power in dBm to Watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Radio parameters, all in linear units.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioParams {
    pub bandwidth_hz: f64,
    pub noise_w: f64,
    pub downlink_power_w: f64,
    pub max_power_w: f64,
    pub interference_w: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 15_000.0,
            noise_w: dbm_to_watts(-107.0),
            downlink_power_w: dbm_to_watts(23.0),
            max_power_w: dbm_to_watts(30.0),
            interference_w: 0.0,
        }
    }
}

impl RadioParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_w", self.noise_w),
            ("downlink_power_w", self.downlink_power_w),
            ("max_power_w", self.max_power_w),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("{v} must be > 0")));
            }
        }
        if !(self.interference_w >= 0.0) || !self.interference_w.is_finite() {
            return Err(invalid("interference_w", "must be >= 0"));
        }
        Ok(())
    }

    /// Interference plus noise.
    pub fn floor_w(&self) -> f64 {
        self.interference_w + self.noise_w
    }
}

/// Per-client computation profile for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeParams {
    pub cycles_per_sample: f64,
    pub cpu_freq_hz: f64,
    pub capacitance: f64,
}

impl ComputeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cycles_per_sample", self.cycles_per_sample),
            ("cpu_freq_hz", self.cpu_freq_hz),
            ("capacitance", self.capacitance),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("{v} must be > 0")));
            }
        }
        Ok(())
    }

    /// `tau * |D| * Phi / f`.
    pub fn local_delay(&self, tau: usize, samples: usize) -> f64 {
        tau as f64 * samples as f64 * self.cycles_per_sample / self.cpu_freq_hz
    }

    /// `chi * tau * |D| * Phi * f^2 / 2`.
    pub fn cpu_energy(&self, tau: usize, samples: usize) -> f64 {
        self.capacitance * tau as f64 * samples as f64 * self.cycles_per_sample * self.cpu_freq_hz * self.cpu_freq_hz
            / 2.0
    }
}

/// Path loss in dB with the distance in metres.
pub fn path_loss_db(distance_m: f64) -> f64 {
    128.1 + 37.6 * (distance_m / 1000.0).log10()
}

/// Distances below 1 m are clamped.
pub fn clamp_distance(distance_m: f64) -> f64 {
    if distance_m < 1.0 || !distance_m.is_finite() {
        log::warn!("distance {distance_m} m clamped to 1 m");
        1.0
    } else {
        distance_m
    }
}

/// `10^(-PLE/10) * fading`.
pub fn channel_gain(distance_m: f64, fading: f64) -> f64 {
    10f64.powf(-path_loss_db(clamp_distance(distance_m)) / 10.0) * fading
}

/// Uniform placement in a square with the access point at its centre.
pub fn place_clients<R: Rng + ?Sized>(count: usize, side_m: f64, rng: &mut R) -> Vec<f64> {
    let u = Uniform::new_inclusive(-side_m / 2.0, side_m / 2.0).expect("finite side");
    (0..count)
        .map(|_| {
            let (x, y): (f64, f64) = (u.sample(rng), u.sample(rng));
            x.hypot(y)
        })
        .collect()
}

/// Gains for one round: `uplink[i][j]` for client `i` on channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub uplink: Vec<Vec<f64>>,
    pub downlink: Vec<f64>,
}

impl ChannelRealization {
    /// Independent unit-mean exponential fading on every link.
    pub fn draw<R: Rng + ?Sized>(distances_m: &[f64], channels: usize, rng: &mut R) -> Self {
        let mut uplink = Vec::with_capacity(distances_m.len());
        let mut downlink = Vec::with_capacity(distances_m.len());
        for &d in distances_m {
            let mean = channel_gain(d, 1.0);
            uplink.push((0..channels).map(|_| mean * fading(rng)).collect());
            downlink.push(mean * fading(rng));
        }
        Self { uplink, downlink }
    }
}

fn fading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Exact zeros would give a zero rate; they have probability ~2^-53.
    let f: f64 = Exp1.sample(rng);
    f.max(f64::MIN_POSITIVE)
}

/// Shannon rate `B * log2(1 + P h / (I + sigma^2))` in bits/s.
pub fn link_rate(power_w: f64, gain: f64, interference_w: f64, radio: &RadioParams) -> f64 {
    radio.bandwidth_hz * (power_w * gain / (interference_w + radio.noise_w)).ln_1p() / std::f64::consts::LN_2
}

/// Uplink bits for a sparse update: `ceil(32 s |g|) + |g|`.
pub fn payload_bits(dim: usize, s: f64) -> u64 {
    (32.0 * s * dim as f64).ceil() as u64 + dim as u64
}

/// Uplink bits at the nominal rate without rounding.
pub fn expected_payload_bits(dim: usize, s: f64) -> f64 {
    32.0 * s * dim as f64 + dim as f64
}

/// Dense global-model broadcast.
pub fn downlink_bits(dim: usize) -> f64 {
    32.0 * dim as f64
}

/// Delays (s) and energies (J) of one client on one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCosts {
    pub d_do: f64,
    pub d_lo: f64,
    pub d_up: f64,
    pub e_co: f64,
    pub e_cp: f64,
}

impl LinkCosts {
    pub fn delay(&self) -> f64 {
        self.d_do + self.d_lo + self.d_up
    }

    pub fn energy(&self) -> f64 {
        self.e_co + self.e_cp
    }
}

/// What the cost model needs to know about one client in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientLink {
    pub samples: usize,
    pub uplink_gain: f64,
    pub downlink_gain: f64,
    pub compute: ComputeParams,
}

/// Costs of uploading `uplink_bits` at `power_w` after `tau` local steps.
pub fn round_costs(
    link: &ClientLink,
    power_w: f64,
    uplink_bits: f64,
    downlink_bits: f64,
    tau: usize,
    radio: &RadioParams,
) -> LinkCosts {
    let up_rate = link_rate(power_w, link.uplink_gain, radio.interference_w, radio);
    let do_rate = link_rate(radio.downlink_power_w, link.downlink_gain, radio.interference_w, radio);
    let d_up = uplink_bits / up_rate;
    LinkCosts {
        d_do: downlink_bits / do_rate,
        d_lo: link.compute.local_delay(tau, link.samples),
        d_up,
        e_co: power_w * d_up,
        e_cp: link.compute.cpu_energy(tau, link.samples),
    }
}
