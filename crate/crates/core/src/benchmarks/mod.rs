//! Excitation signals and synthetic truth data.

pub mod multisine;
pub mod noise;
pub mod systems;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use multisine::{multisine, repeat_periods, Amplitude, Lines, MultisineSpec};
pub use noise::add_output_noise;
pub use systems::{
    bouc_wen_linear, discrete_seed, duffing_linear, simulate_bouc_wen, simulate_duffing, simulate_vdp, vdp_truth_model, zoh, BoucWenParams,
    DuffingParams, OdeRun, VdpParams,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Vdp,
    #[serde(alias = "bouc-wen", alias = "bouc_wen")]
    BoucWen,
    Duffing,
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vdp" => Ok(System::Vdp),
            "boucwen" | "bouc-wen" | "bouc_wen" => Ok(System::BoucWen),
            "duffing" => Ok(System::Duffing),
            other => Err(Error::invalid(format!("unknown system '{other}'"))),
        }
    }
}

/// Everything needed to synthesise training/validation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSpec {
    pub system: System,
    pub fs: Option<f64>,
    pub f0: Option<f64>,
    pub odd: bool,
    /// Excited band in Hz; defaults per system.
    pub band: Option<(f64, f64)>,
    pub rms: f64,
    /// Output SNR in dB; `None` means noiseless.
    pub snr_db: Option<f64>,
    pub realizations: usize,
    /// Leading periods simulated and discarded.
    pub settle_periods: usize,
    pub periods: usize,
    pub seed: u64,
    pub oversample: usize,
    pub vdp: VdpParams,
    pub bouc_wen: BoucWenParams,
    pub duffing: DuffingParams,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            system: System::Vdp,
            fs: None,
            f0: None,
            odd: false,
            band: None,
            rms: 50.0,
            snr_db: None,
            realizations: 1,
            settle_periods: 1,
            periods: 1,
            seed: 0,
            oversample: 20,
            vdp: VdpParams::default(),
            bouc_wen: BoucWenParams::default(),
            duffing: DuffingParams::default(),
        }
    }
}

impl GenerateSpec {
    pub fn for_system(system: System) -> Self {
        let mut s = Self { system, ..Default::default() };
        if system != System::Vdp {
            s.snr_db = Some(40.0);
        }
        if system == System::Duffing {
            s.odd = true;
            s.rms = 10.0;
        }
        s
    }

    pub fn fs(&self) -> f64 {
        self.fs.unwrap_or(match self.system {
            System::Vdp => 1.0 / self.vdp.ts,
            System::BoucWen | System::Duffing => 750.0,
        })
    }

    pub fn f0(&self) -> f64 {
        self.f0.unwrap_or(match self.system {
            System::Vdp => 0.01,
            System::BoucWen | System::Duffing => self.fs() / 8192.0,
        })
    }

    pub fn band(&self) -> (f64, f64) {
        self.band.unwrap_or(match self.system {
            System::Vdp => (0.01, 4.0),
            System::BoucWen => (5.0, 150.0),
            System::Duffing => (0.0, 200.0),
        })
    }

    pub fn multisine_spec(&self) -> MultisineSpec {
        let (lo, hi) = self.band();
        MultisineSpec {
            f0: self.f0(),
            fs: self.fs(),
            lines: Lines::band(lo, hi, self.f0(), self.odd),
            amplitude: Amplitude::Rms(self.rms),
            seed: self.seed,
            periods: self.periods.max(1),
            realizations: self.realizations,
        }
    }
}

/// Synthesises `realizations` records: simulates `settle + periods`
/// periods from rest, keeps the last `periods`, then adds output noise.
/// Van der Pol records carry the state at the start of the kept window.
pub fn generate(spec: &GenerateSpec) -> Result<Vec<Dataset>> {
    if spec.system == System::Vdp && (spec.fs() - 1.0 / spec.vdp.ts).abs() > 1e-9 * spec.fs() {
        return Err(Error::invalid("Van der Pol sample rate is fixed by ts"));
    }
    let ms = spec.multisine_spec();
    let periods = ms.periods;
    let inputs = multisine(&ms)?;
    inputs
        .into_par_iter()
        .enumerate()
        .map(|(i, period)| {
            let n = period.nrows();
            let total = spec.settle_periods + periods;
            let u = repeat_periods(&period, total);
            let skip = spec.settle_periods * n;
            let (full, states) = match spec.system {
                System::Vdp => {
                    let (run, _) = simulate_vdp(&spec.vdp, &u, None)?;
                    check_diverged(run.diverged)?;
                    (run.dataset, run.states)
                }
                System::BoucWen => {
                    let run = simulate_bouc_wen(&spec.bouc_wen, &u, spec.fs(), spec.oversample)?;
                    check_diverged(run.diverged)?;
                    (run.dataset, run.states)
                }
                System::Duffing => {
                    let run = simulate_duffing(&spec.duffing, &u, spec.fs(), spec.oversample)?;
                    check_diverged(run.diverged)?;
                    (run.dataset, run.states)
                }
            };
            let mut ds = full.slice(skip, periods * n)?;
            if spec.system == System::Vdp {
                ds.x0 = Some(DVector::from_iterator(2, states.row(skip).iter().copied()));
            }
            add_output_noise(&ds, spec.snr_db.unwrap_or(f64::INFINITY), child_seed(spec.seed, 1_000 + i as u64))
        })
        .collect()
}

fn check_diverged(diverged: bool) -> Result<()> {
    if diverged {
        Err(Error::Unstable("truth system diverged".into()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vdp_records_reproducible_from_x0() {
        let spec = GenerateSpec { realizations: 2, seed: 5, ..GenerateSpec::for_system(System::Vdp) };
        let data = generate(&spec).unwrap();
        assert_eq!(data.len(), 2);
        let truth = vdp_truth_model(&spec.vdp).unwrap();
        for ds in &data {
            assert_eq!(ds.len(), 10_000);
            let sim = truth.simulate(&ds.u, ds.x0.as_ref()).unwrap();
            assert!((sim.y - &ds.y).amax() < 1e-9);
        }
        assert_eq!(generate(&spec).unwrap(), data);
    }

    #[test]
    fn system_names_parse() {
        assert_eq!("boucwen".parse::<System>().unwrap(), System::BoucWen);
        assert!("foo".parse::<System>().is_err());
    }
}
