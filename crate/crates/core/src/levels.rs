//! Static level structure of 137Ba+.
//!
//! Ground S1/2 hyperfine manifold (I = 3/2, J = 1/2 gives F = 1 and F = 2),
//! the P1/2 manifold used by the pumping light, and the D5/2 shelf in the
//! high-field regime where its F = 3 / F = 4 hyperfine levels reorganize into
//! an effective J = 4 manifold. Zeeman shifts are linear throughout.

use crate::{Error, Result};

/// Bohr magneton over Planck's constant, Hz per gauss.
pub const BOHR_MAGNETON_HZ_PER_GAUSS: f64 = 1.399624e6;

/// Above this field the D5/2 levels are addressed by m_J (strict inequality).
pub const DEFAULT_B_CROSSOVER_GAUSS: f64 = 1.0;

/// Landé factor assumed for the effective J = 4 shelf manifold (that of D5/2).
pub const DEFAULT_G_J_EFF: f64 = 6.0 / 5.0;

/// Effective m_J of the shelf level the 1.76 µm laser addresses.
pub const SHELF_TARGET_MJ: i32 = -2;

/// Number of S1/2 sublevels (3 + 5).
pub const GROUND_SUBLEVELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    S12,
    P12,
    D32,
    D52,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarization {
    Pi,
    SigmaPlus,
    SigmaMinus,
}

impl Polarization {
    /// Change in m_F driven by this polarization on absorption.
    pub fn delta_m(self) -> i32 {
        match self {
            Polarization::Pi => 0,
            Polarization::SigmaPlus => 1,
            Polarization::SigmaMinus => -1,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Polarization::Pi => Polarization::Pi,
            Polarization::SigmaPlus => Polarization::SigmaMinus,
            Polarization::SigmaMinus => Polarization::SigmaPlus,
        }
    }
}

/// A hyperfine-Zeeman sublevel. `energy_offset` is in Hz relative to the
/// term's hyperfine centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sublevel {
    pub term: Term,
    pub f: i32,
    pub m_f: i32,
    pub energy_offset: f64,
}

impl Sublevel {
    /// Sublevel without an energy assignment, for selection-rule queries.
    pub fn bare(term: Term, f: i32, m_f: i32) -> Result<Self> {
        if f < 0 || m_f.abs() > f {
            return Err(Error::domain(format!("invalid sublevel F={f}, mF={m_f}")));
        }
        Ok(Sublevel {
            term,
            f,
            m_f,
            energy_offset: 0.0,
        })
    }

    pub fn is(&self, f: i32, m_f: i32) -> bool {
        self.f == f && self.m_f == m_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wavelengths {
    pub cooling_nm: f64,
    pub repump_nm: f64,
    pub shelf_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomicConstants {
    /// S1/2 F=1 to F=2 splitting, Hz.
    pub ground_hf_splitting: f64,
    /// D5/2 F=3 to F=4 splitting, Hz.
    pub d52_hf_splitting_34: f64,
    /// D5/2 radiative lifetime, s.
    pub d52_lifetime: f64,
    /// Branching ratio of P1/2 into D3/2.
    pub p12_branch_to_d32: f64,
    pub wavelengths: Wavelengths,
}

impl AtomicConstants {
    pub const BA137: AtomicConstants = AtomicConstants {
        ground_hf_splitting: 8.037e9,
        d52_hf_splitting_34: 5.0e5,
        d52_lifetime: 35.0,
        p12_branch_to_d32: 0.25,
        wavelengths: Wavelengths {
            cooling_nm: 493.0,
            repump_nm: 650.0,
            shelf_um: 1.76,
        },
    };
}

impl Default for AtomicConstants {
    fn default() -> Self {
        Self::BA137
    }
}

fn check_field(b_gauss: f64) -> Result<()> {
    if !(b_gauss >= 0.0) || !b_gauss.is_finite() {
        return Err(Error::domain(format!(
            "magnetic field must be finite and >= 0 G, got {b_gauss}"
        )));
    }
    Ok(())
}

/// g_F for an S1/2 or P1/2 hyperfine level with I = 3/2, J = 1/2.
fn g_f(term: Term, f: i32) -> f64 {
    let g_j = match term {
        Term::S12 => 2.0,
        Term::P12 => 2.0 / 3.0,
        // not used for D terms
        Term::D32 | Term::D52 => 0.0,
    };
    // g_F = ±g_J / (2I + 1) for F = I ± 1/2
    match f {
        2 => g_j / 4.0,
        1 => -g_j / 4.0,
        _ => 0.0,
    }
}

/// Index of (F, m_F) in the ground ordering used by population vectors:
/// F=1 m_F=-1..1 at 0..3, then F=2 m_F=-2..2 at 3..8.
pub fn ground_index(f: i32, m_f: i32) -> Option<usize> {
    match f {
        1 if m_f.abs() <= 1 => Some((m_f + 1) as usize),
        2 if m_f.abs() <= 2 => Some((m_f + 2) as usize + 3),
        _ => None,
    }
}

/// Population-vector index of the hyperfine qubit's upper state (F=2, m_F=0).
pub const CLOCK_UPPER: usize = 5;
/// Population-vector index of the hyperfine qubit's lower state (F=1, m_F=0).
pub const CLOCK_LOWER: usize = 1;

/// The 8 S1/2 sublevels in [`ground_index`] order.
pub fn build_ground_manifold(b_gauss: f64, constants: &AtomicConstants) -> Result<Vec<Sublevel>> {
    check_field(b_gauss)?;
    let split = constants.ground_hf_splitting;
    let mut out = Vec::with_capacity(GROUND_SUBLEVELS);
    for (f, centroid) in [(1, -5.0 / 8.0 * split), (2, 3.0 / 8.0 * split)] {
        for m_f in -f..=f {
            let zeeman = g_f(Term::S12, f) * BOHR_MAGNETON_HZ_PER_GAUSS * b_gauss * m_f as f64;
            out.push(Sublevel {
                term: Term::S12,
                f,
                m_f,
                energy_offset: centroid + zeeman,
            });
        }
    }
    Ok(out)
}

/// P1/2 sublevels (F' = 1, 2) with linear Zeeman offsets only; the P-state
/// hyperfine splitting is not modelled.
pub fn build_excited_manifold(b_gauss: f64) -> Result<Vec<Sublevel>> {
    check_field(b_gauss)?;
    let mut out = Vec::with_capacity(8);
    for f in [1, 2] {
        for m_f in -f..=f {
            out.push(Sublevel {
                term: Term::P12,
                f,
                m_f,
                energy_offset: g_f(Term::P12, f) * BOHR_MAGNETON_HZ_PER_GAUSS * b_gauss * m_f as f64,
            });
        }
    }
    Ok(out)
}

/// D5/2 shelf in the effective J = 4 picture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveDManifold {
    pub j_eff: i32,
    pub b_gauss: f64,
    pub g_j_eff: f64,
    pub regime_valid: bool,
}

impl EffectiveDManifold {
    /// Linear Zeeman energy of an m_J level, Hz. Only defined in the
    /// high-field regime.
    pub fn mj_energy(&self, m_j: i32) -> Result<f64> {
        if !self.regime_valid {
            return Err(Error::domain(format!(
                "m_J levels are not good quantum numbers at {} G",
                self.b_gauss
            )));
        }
        if m_j.abs() > self.j_eff {
            return Err(Error::domain(format!("|m_J| = {} exceeds J = {}", m_j.abs(), self.j_eff)));
        }
        Ok(self.g_j_eff * BOHR_MAGNETON_HZ_PER_GAUSS * self.b_gauss * m_j as f64)
    }

    pub fn target_mj(&self) -> i32 {
        SHELF_TARGET_MJ
    }
}

pub fn d52_regime(b_gauss: f64) -> Result<EffectiveDManifold> {
    d52_regime_with(b_gauss, DEFAULT_B_CROSSOVER_GAUSS, DEFAULT_G_J_EFF)
}

pub fn d52_regime_with(b_gauss: f64, crossover_gauss: f64, g_j_eff: f64) -> Result<EffectiveDManifold> {
    check_field(b_gauss)?;
    Ok(EffectiveDManifold {
        j_eff: 4,
        b_gauss,
        g_j_eff,
        regime_valid: b_gauss > crossover_gauss,
    })
}

/// Electric-dipole selection rule for an S1/2 -> P1/2 hyperfine transition,
/// including the vanishing F=F', m_F=0 -> m_F'=0 matrix element that makes
/// (F=2, m_F=0) dark under π light.
pub fn transition_allowed(lower: &Sublevel, upper: &Sublevel, polarization: Polarization) -> Result<bool> {
    if lower.term != Term::S12 || upper.term != Term::P12 {
        return Err(Error::domain(format!(
            "transition_allowed expects S1/2 -> P1/2, got {:?} -> {:?}",
            lower.term, upper.term
        )));
    }
    let delta_f = upper.f - lower.f;
    if delta_f.abs() > 1 {
        return Ok(false);
    }
    if upper.m_f - lower.m_f != polarization.delta_m() {
        return Ok(false);
    }
    if delta_f == 0 && lower.m_f == 0 && upper.m_f == 0 {
        return Ok(false);
    }
    if lower.f == 0 && upper.f == 0 {
        return Ok(false);
    }
    Ok(true)
}
