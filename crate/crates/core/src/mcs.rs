//! The 28-entry 256-QAM MCS table (3GPP TS 38.214, Table 5.1.3.1-2) and the
//! per-MCS SINR thresholds derived from it.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Number of MCS indices available to the link adapter.
pub const NUM_MCS: usize = 28;

/// Default SNR gap to Shannon capacity used to place the BLER curves.
pub const DEFAULT_GAP_DB: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McsEntry {
    pub index: u8,
    /// Bits per modulation symbol (Qm).
    pub modulation_order: u8,
    /// Target code rate multiplied by 1024. Two rows carry a half unit (682.5, 916.5).
    pub rate_x1024: f64,
    /// Spectral efficiency in bits/s/Hz as published.
    pub spectral_efficiency: f64,
}

impl McsEntry {
    pub fn code_rate(&self) -> f64 {
        self.rate_x1024 / 1024.0
    }
}

const fn row(index: u8, modulation_order: u8, rate_x1024: f64, se: f64) -> McsEntry {
    McsEntry {
        index,
        modulation_order,
        rate_x1024,
        spectral_efficiency: se,
    }
}

static TABLE: [McsEntry; NUM_MCS] = [
    row(0, 2, 120.0, 0.2344),
    row(1, 2, 193.0, 0.3770),
    row(2, 2, 308.0, 0.6016),
    row(3, 2, 449.0, 0.8770),
    row(4, 2, 602.0, 1.1758),
    row(5, 4, 378.0, 1.4766),
    row(6, 4, 434.0, 1.6953),
    row(7, 4, 490.0, 1.9141),
    row(8, 4, 553.0, 2.1602),
    row(9, 4, 616.0, 2.4063),
    row(10, 4, 658.0, 2.5703),
    row(11, 6, 466.0, 2.7305),
    row(12, 6, 517.0, 3.0293),
    row(13, 6, 567.0, 3.3223),
    row(14, 6, 616.0, 3.6094),
    row(15, 6, 666.0, 3.9023),
    row(16, 6, 719.0, 4.2129),
    row(17, 6, 772.0, 4.5234),
    row(18, 6, 822.0, 4.8164),
    row(19, 6, 873.0, 5.1152),
    row(20, 8, 682.5, 5.3320),
    row(21, 8, 711.0, 5.5547),
    row(22, 8, 754.0, 5.8906),
    row(23, 8, 797.0, 6.2266),
    row(24, 8, 841.0, 6.5703),
    row(25, 8, 885.0, 6.9141),
    row(26, 8, 916.5, 7.1602),
    row(27, 8, 948.0, 7.4063),
];

/// The canonical table, indices 0..=27.
pub fn mcs_table() -> &'static [McsEntry; NUM_MCS] {
    &TABLE
}

pub fn entry(m: usize) -> Result<&'static McsEntry> {
    TABLE
        .get(m)
        .ok_or_else(|| Error::domain(format!("MCS index {m} outside 0..{NUM_MCS}")))
}

/// Spectral efficiency of MCS `m`. Panics on an out-of-range index; use
/// [`entry`] when the index is untrusted.
#[inline]
pub fn spectral_efficiency(m: usize) -> f64 {
    TABLE[m].spectral_efficiency
}

/// SINR (dB) at which MCS `m` sits on the BLER curve midpoint:
/// `10·log10(2^SE − 1) + gap_db`.
pub fn required_sinr_db(m: usize, gap_db: f64) -> Result<f64> {
    if gap_db < 0.0 || !gap_db.is_finite() {
        return Err(Error::domain(format!("gap_db must be finite and >= 0, got {gap_db}")));
    }
    let se = entry(m)?.spectral_efficiency;
    Ok(shannon_threshold_db(se) + gap_db)
}

#[inline]
pub(crate) fn shannon_threshold_db(se: f64) -> f64 {
    10.0 * (se.exp2() - 1.0).log10()
}

/// All 28 thresholds for a fixed gap, indexed by MCS.
pub fn threshold_ladder(gap_db: f64) -> Result<[f64; NUM_MCS]> {
    let mut out = [0.0; NUM_MCS];
    for (m, slot) in out.iter_mut().enumerate() {
        *slot = required_sinr_db(m, gap_db)?;
    }
    Ok(out)
}

/// Writes the table as `index,order,rate_x1024,se`.
pub fn write_csv<W: Write>(w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "order", "rate_x1024", "se"])?;
    for e in TABLE.iter() {
        wr.write_record([
            e.index.to_string(),
            e.modulation_order.to_string(),
            e.rate_x1024.to_string(),
            format!("{:.4}", e.spectral_efficiency),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
