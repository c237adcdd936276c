//! UTC instants on the 15-minute reporting grid and their calendar indices.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Seconds between consecutive KPI reports.
pub const STEP_SECS: i64 = 15 * 60;
/// Reporting intervals per day.
pub const STEPS_PER_DAY: usize = 96;

/// Seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

/// Broken-down UTC date and time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CivilTime {
    pub year: i64,
    /// 1..=12
    pub month: u32,
    /// 1..=31
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
}

/// Categorical calendar and carrier indices for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarIndex {
    /// 0..=11
    pub month: usize,
    /// 0..=6, Monday = 0
    pub weekday: usize,
    /// 0..=23
    pub hour: usize,
    /// 0..=3, minute / 15
    pub minute_slot: usize,
    /// 0..=20
    pub carrier: usize,
}

impl Timestamp {
    pub fn from_civil(year: i64, month: u32, day: u32, hour: u32, minute: u32, second: u32) -> Self {
        let days = days_from_civil(year, month, day);
        Self(days * 86_400 + i64::from(hour) * 3600 + i64::from(minute) * 60 + i64::from(second))
    }

    pub fn to_civil(self) -> CivilTime {
        let days = self.0.div_euclid(86_400);
        let secs = self.0.rem_euclid(86_400) as u32;
        let (year, month, day) = civil_from_days(days);
        CivilTime {
            year,
            month,
            day,
            hour: secs / 3600,
            minute: secs % 3600 / 60,
            second: secs % 60,
        }
    }

    pub fn is_aligned(self) -> bool {
        self.0.rem_euclid(STEP_SECS) == 0
    }

    /// Moves by a signed number of 15-minute steps.
    pub fn add_steps(self, steps: i64) -> Self {
        Self(self.0 + steps * STEP_SECS)
    }

    /// Monday = 0.
    pub fn weekday(self) -> usize {
        // 1970-01-01 was a Thursday.
        (self.0.div_euclid(86_400) + 3).rem_euclid(7) as usize
    }

    /// Fractional hour of day in `[0, 24)`.
    pub fn hour_of_day(self) -> f64 {
        self.0.rem_euclid(86_400) as f64 / 3600.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.to_civil();
        write!(
            f,
            "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z",
            c.year, c.month, c.day, c.hour, c.minute, c.second
        )
    }
}

/// Calendar error for instants that are off the reporting grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("timestamp {0} is not aligned to the 15-minute grid")]
pub struct Unaligned(pub Timestamp);

/// Derives the categorical embedding indices for a grid instant.
pub fn calendar_indices(ts: Timestamp, carrier_id: usize) -> Result<CalendarIndex, Unaligned> {
    if !ts.is_aligned() {
        return Err(Unaligned(ts));
    }
    let c = ts.to_civil();
    Ok(CalendarIndex {
        month: (c.month - 1) as usize,
        weekday: ts.weekday(),
        hour: c.hour as usize,
        minute_slot: (c.minute / 15) as usize,
        carrier: carrier_id,
    })
}

// Proleptic Gregorian conversions (H. Hinnant's days_from_civil / civil_from_days).
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = i64::from(m);
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + i64::from(d) - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn civil_round_trip() {
        let ts = Timestamp::from_civil(2024, 3, 4, 10, 45, 0);
        assert_eq!(ts.to_string(), "2024-03-04T10:45:00Z");
        assert_eq!(ts.0, 1_709_549_100);
        let c = ts.to_civil();
        assert_eq!((c.year, c.month, c.day, c.hour, c.minute), (2024, 3, 4, 10, 45));
    }

    #[test]
    fn minute_zero_and_december() {
        let ts = Timestamp::from_civil(2023, 12, 31, 23, 0, 0);
        let idx = calendar_indices(ts, 0).unwrap();
        assert_eq!(idx.minute_slot, 0);
        assert_eq!(idx.month, 11);
    }

    #[test]
    fn unaligned_minute_is_rejected() {
        let ts = Timestamp::from_civil(2024, 1, 1, 0, 7, 0);
        assert_eq!(calendar_indices(ts, 0), Err(Unaligned(ts)));
    }
}
