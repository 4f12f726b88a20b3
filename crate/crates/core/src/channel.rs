//! Seeded channel generation.
//!
//! Small-scale fading is Rayleigh, Ricean or Nakagami-m, with every entry of
//! unit (Rayleigh, Ricean) or `nakagami_power` (Nakagami) mean power.
//! Large-scale fading applies `PL_dB = a + b log10(d_km)` plus log-normal
//! shadowing per user, with users uniform over an annulus around the base
//! station. The large-scale gain multiplies the user's column by
//! `sqrt(gain)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};
use crate::system::{db_to_linear, SystemConfig};

pub type ChannelRng = ChaCha8Rng;

/// Mixes a base seed with a stream id and an index (splitmix64 finaliser),
/// giving independent per-sample generators that do not depend on iteration
/// order.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChannelRng {
    ChannelRng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Circularly-symmetric `CN(0, 1)` draw.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `Nt x K` matrix of i.i.d. `CN(0, 1)` entries.
pub fn rayleigh_channel<R: Rng + ?Sized>(nt: usize, k_users: usize, rng: &mut R) -> CMat {
    CMat::from_fn(nt, k_users, |_, _| complex_gaussian(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FadingFamily {
    Rayleigh,
    Ricean,
    Nakagami,
}

impl FadingFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rayleigh => "rayleigh",
            Self::Ricean => "ricean",
            Self::Nakagami => "nakagami",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FadingSpec {
    pub family: FadingFamily,
    pub ricean_factor: f64,
    pub nakagami_m: f64,
    pub nakagami_power: f64,
}

impl Default for FadingSpec {
    fn default() -> Self {
        Self {
            family: FadingFamily::Rayleigh,
            ricean_factor: 3.0,
            nakagami_m: 5.0,
            nakagami_power: 2.0,
        }
    }
}

impl FadingSpec {
    pub fn rayleigh() -> Self {
        Self::default()
    }

    pub fn ricean(factor: f64) -> Self {
        Self {
            family: FadingFamily::Ricean,
            ricean_factor: factor,
            ..Self::default()
        }
    }

    pub fn nakagami(m: f64, power: f64) -> Self {
        Self {
            family: FadingFamily::Nakagami,
            nakagami_m: m,
            nakagami_power: power,
            ..Self::default()
        }
    }

    /// Rayleigh, Ricean (K = 3) and Nakagami (m = 5, power 2).
    pub fn pretraining_mixture() -> Vec<Self> {
        vec![Self::rayleigh(), Self::ricean(3.0), Self::nakagami(5.0, 2.0)]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ricean_factor >= 0.0) {
            return Err(Error::InvalidSpec("ricean_factor must be >= 0".into()));
        }
        if !(self.nakagami_m >= 0.5) {
            return Err(Error::InvalidSpec("nakagami_m must be >= 0.5".into()));
        }
        if !(self.nakagami_power > 0.0) {
            return Err(Error::InvalidSpec("nakagami_power must be > 0".into()));
        }
        Ok(())
    }

    /// One small-scale `Nt x K` realisation.
    pub fn sample<R: Rng + ?Sized>(&self, nt: usize, k_users: usize, rng: &mut R) -> CMat {
        match self.family {
            FadingFamily::Rayleigh => rayleigh_channel(nt, k_users, rng),
            FadingFamily::Ricean => {
                let kf = self.ricean_factor;
                let los = (kf / (kf + 1.0)).sqrt();
                let nlos = (1.0 / (kf + 1.0)).sqrt();
                let mut h = CMat::zeros(nt, k_users);
                for k in 0..k_users {
                    // Half-wavelength ULA steering towards a random angle.
                    let theta: f64 = rng.random_range(-PI / 2.0..PI / 2.0);
                    for n in 0..nt {
                        let steer = C64::from_polar(1.0, PI * n as f64 * theta.sin());
                        h[(n, k)] = steer * los + complex_gaussian(rng) * nlos;
                    }
                }
                h
            }
            FadingFamily::Nakagami => {
                let m = self.nakagami_m;
                let gamma = Gamma::new(m, self.nakagami_power / m).expect("validated shape");
                CMat::from_fn(nt, k_users, |_, _| {
                    let power: f64 = gamma.sample(rng);
                    let phase: f64 = rng.random_range(0.0..2.0 * PI);
                    C64::from_polar(power.sqrt(), phase)
                })
            }
        }
    }
}

/// Path loss, shadowing and user placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LargeScaleSpec {
    pub enabled: bool,
    pub cell_radius_m: f64,
    pub min_dist_m: f64,
    pub shadow_std_db: f64,
    /// `a` in `PL_dB = a + b log10(d_km)`.
    pub pathloss_intercept_db: f64,
    /// `b` in `PL_dB = a + b log10(d_km)`.
    pub pathloss_slope_db: f64,
    /// Combined transmit/receive antenna gain, added to every user's gain.
    pub antenna_gain_db: f64,
    /// Common gain applied to every user when `enabled` is false.
    pub reference_gain_db: f64,
}

/// Path gain at 250 m under the default path-loss law; the common gain of the
/// small-scale-only pretraining channels.
pub const DEFAULT_REFERENCE_GAIN_DB: f64 = -105.46;

impl Default for LargeScaleSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            cell_radius_m: 500.0,
            min_dist_m: 50.0,
            shadow_std_db: 8.0,
            pathloss_intercept_db: 128.1,
            pathloss_slope_db: 37.6,
            antenna_gain_db: 0.0,
            reference_gain_db: DEFAULT_REFERENCE_GAIN_DB,
        }
    }
}

impl LargeScaleSpec {
    /// No per-user large-scale variation: every column scaled by the reference gain.
    pub fn disabled() -> Self {
        Self::default()
    }

    /// Users uniform over an annulus, default path loss and 8 dB shadowing.
    pub fn cell(radius_m: f64, min_dist_m: f64) -> Self {
        Self {
            enabled: true,
            cell_radius_m: radius_m,
            min_dist_m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if !(self.min_dist_m > 0.0 && self.cell_radius_m > self.min_dist_m) {
                return Err(Error::InvalidSpec(
                    "need cell_radius_m > min_dist_m > 0".into(),
                ));
            }
            if !(self.shadow_std_db >= 0.0) {
                return Err(Error::InvalidSpec("shadow_std_db must be >= 0".into()));
            }
        }
        if !self.reference_gain_db.is_finite() || !self.antenna_gain_db.is_finite() {
            return Err(Error::InvalidSpec("gains must be finite".into()));
        }
        Ok(())
    }

    pub fn pathloss_db(&self, dist_m: f64) -> f64 {
        self.pathloss_intercept_db + self.pathloss_slope_db * (dist_m / 1000.0).log10()
    }

    /// Distance drawn uniformly over the annulus area.
    pub fn sample_distance<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (r0, r1) = (self.min_dist_m, self.cell_radius_m);
        let u: f64 = rng.random_range(0.0..1.0);
        (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt()
    }

    /// Gain in dB of a user at `dist_m`, shadowing included.
    pub fn gain_db_at<R: Rng + ?Sized>(&self, dist_m: f64, rng: &mut R) -> f64 {
        let shadow = if self.shadow_std_db > 0.0 {
            Normal::new(0.0, self.shadow_std_db).unwrap().sample(rng)
        } else {
            0.0
        };
        -self.pathloss_db(dist_m) + shadow + self.antenna_gain_db
    }

    /// Linear power gains for `k_users` users.
    pub fn sample_gains<R: Rng + ?Sized>(&self, k_users: usize, rng: &mut R) -> Vec<f64> {
        if !self.enabled {
            return vec![db_to_linear(self.reference_gain_db + self.antenna_gain_db); k_users];
        }
        (0..k_users)
            .map(|_| {
                let d = self.sample_distance(rng);
                db_to_linear(self.gain_db_at(d, rng))
            })
            .collect()
    }
}

/// One channel realisation: small-scale fading scaled per user by the
/// square root of its large-scale gain.
pub fn sample_channel<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    fading: &FadingSpec,
    large: &LargeScaleSpec,
    rng: &mut R,
) -> CMat {
    let mut h = fading.sample(cfg.nt, cfg.k_users, rng);
    let gains = large.sample_gains(cfg.k_users, rng);
    for (k, g) in gains.iter().enumerate() {
        let s = g.sqrt();
        for n in 0..cfg.nt {
            h[(n, k)] *= s;
        }
    }
    h
}

/// One stretch of a non-stationary schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub fading: FadingSpec,
    pub large: LargeScaleSpec,
    pub slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSchedule {
    pub segments: Vec<Segment>,
}

pub const SLOTS_PER_SEGMENT: usize = 50;

impl ScenarioSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let s = Self { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn stationary(fading: FadingSpec, large: LargeScaleSpec, slots: usize) -> Self {
        Self {
            segments: vec![Segment {
                name: "stationary".into(),
                fading,
                large,
                slots,
            }],
        }
    }

    /// Outdoor, then urban, then highway proxies: Rayleigh fading throughout
    /// with progressively harsher large-scale conditions. The urban and
    /// highway segments carry an 11 dB antenna gain (8 dBi + 3 dBi) as an
    /// additive offset.
    pub fn mobility_proxy(slots_per_segment: usize) -> Self {
        let outdoor = LargeScaleSpec {
            enabled: true,
            cell_radius_m: 1000.0,
            min_dist_m: 100.0,
            shadow_std_db: 8.0,
            ..LargeScaleSpec::default()
        };
        let urban = LargeScaleSpec {
            enabled: true,
            cell_radius_m: 750.0,
            min_dist_m: 35.0,
            shadow_std_db: 4.0,
            pathloss_intercept_db: 148.8,
            pathloss_slope_db: 36.7,
            antenna_gain_db: 11.0,
            ..LargeScaleSpec::default()
        };
        let highway = LargeScaleSpec {
            enabled: true,
            cell_radius_m: 1200.0,
            min_dist_m: 300.0,
            shadow_std_db: 3.0,
            pathloss_intercept_db: 150.0,
            pathloss_slope_db: 37.6,
            antenna_gain_db: 11.0,
            ..LargeScaleSpec::default()
        };
        let seg = |name: &str, large| Segment {
            name: name.into(),
            fading: FadingSpec::rayleigh(),
            large,
            slots: slots_per_segment,
        };
        Self {
            segments: vec![
                seg("outdoor", outdoor),
                seg("urban", urban),
                seg("highway", highway),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidSpec("schedule has no segments".into()));
        }
        for s in &self.segments {
            if s.slots == 0 {
                return Err(Error::InvalidSpec(format!("segment {} has no slots", s.name)));
            }
            s.fading.validate()?;
            s.large.validate()?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.segments.iter().map(|s| s.slots).sum()
    }

    /// Index of the segment active at slot `t`.
    pub fn segment_at(&self, t: usize) -> Result<usize> {
        let mut end = 0;
        for (i, s) in self.segments.iter().enumerate() {
            end += s.slots;
            if t < end {
                return Ok(i);
            }
        }
        Err(Error::OutOfHorizon {
            slot: t,
            horizon: end,
        })
    }

    /// First slot of every segment after the first.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut t = 0;
        for s in &self.segments[..self.segments.len() - 1] {
            t += s.slots;
            out.push(t);
        }
        out
    }
}

/// Channels delivered in one slot.
#[derive(Clone, Debug)]
pub struct SlotData {
    pub slot: usize,
    pub segment: usize,
    pub adapt: Vec<CMat>,
    pub test: Vec<CMat>,
}

const ADAPT_STREAM: u64 = 0xADA7;
const TEST_STREAM: u64 = 0x7E57;

/// Draws `n_adapt` adaptation and `u_test` test channels from the segment
/// active at slot `t`. The two sets use separate generator streams, so
/// changing one count leaves the other set unchanged.
pub fn next_slot(
    schedule: &ScenarioSchedule,
    cfg: &SystemConfig,
    t: usize,
    n_adapt: usize,
    u_test: usize,
    seed: u64,
) -> Result<SlotData> {
    let segment = schedule.segment_at(t)?;
    let seg = &schedule.segments[segment];
    let slot_seed = derive_seed(seed, 0x5107, t as u64);
    let draw = |stream: u64, n: usize| -> Vec<CMat> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(slot_seed, stream, i as u64);
                sample_channel(cfg, &seg.fading, &seg.large, &mut rng)
            })
            .collect()
    };
    Ok(SlotData {
        slot: t,
        segment,
        adapt: draw(ADAPT_STREAM, n_adapt),
        test: draw(TEST_STREAM, u_test),
    })
}
