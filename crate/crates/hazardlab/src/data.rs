//! Data pipeline: monthly price/rate ingestion, log returns, spell
//! extraction with covariates, and the descriptive-statistics layer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::special;

/// Calendar month, totally ordered, arithmetic via a flat month index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("month out of range: {year}-{month}")));
        }
        Ok(Self { year, month })
    }

    pub fn index(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    pub fn from_index(ix: i64) -> Self {
        Self {
            year: ix.div_euclid(12) as i32,
            month: (ix.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn next(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    /// Months from `earlier` to `self` (positive when self is later).
    pub fn months_since(self, earlier: Self) -> i64 {
        self.index() - earlier.index()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("bad month literal {s:?}, want YYYY-MM")))?;
        let year: i32 = y
            .parse()
            .map_err(|_| Error::Data(format!("bad year in month literal {s:?}")))?;
        let month: u32 = m
            .parse()
            .map_err(|_| Error::Data(format!("bad month in month literal {s:?}")))?;
        YearMonth::new(year, month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRow {
    pub month: YearMonth,
    pub real_price: f64,
    pub long_rate_pct: f64,
}

/// Contiguous monthly price and long-rate series.
#[derive(Debug, Clone)]
pub struct PriceSeries {
    rows: Vec<PriceRow>,
    source_digest: String,
}

impl PriceSeries {
    /// Build from rows, enforcing contiguity and positive prices.
    pub fn from_rows(rows: Vec<PriceRow>) -> Result<Self> {
        Self::validated(rows, String::new())
    }

    fn validated(rows: Vec<PriceRow>, source_digest: String) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("price series is empty".into()));
        }
        for w in rows.windows(2) {
            let gap = w[1].month.months_since(w[0].month);
            if gap == 0 {
                return Err(Error::Data(format!("duplicate month {}", w[1].month)));
            }
            if gap != 1 {
                return Err(Error::Data(format!(
                    "gap in series: missing month {}",
                    w[0].month.next()
                )));
            }
        }
        for r in &rows {
            if !r.real_price.is_finite() || r.real_price <= 0.0 {
                return Err(Error::Data(format!(
                    "non-positive price {} at {}",
                    r.real_price, r.month
                )));
            }
        }
        Ok(Self { rows, source_digest })
    }

    pub fn rows(&self) -> &[PriceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn date_range(&self) -> (YearMonth, YearMonth) {
        (self.rows[0].month, self.rows[self.rows.len() - 1].month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnRow {
    /// Month the return lands on (the later of the two price months).
    pub month: YearMonth,
    pub r: f64,
    /// Long rate at the return month, carried for spell covariates.
    pub long_rate_pct: f64,
}

#[derive(Debug, Clone)]
pub struct ReturnSeries {
    rows: Vec<ReturnRow>,
    source_digest: String,
}

impl ReturnSeries {
    pub fn rows(&self) -> &[ReturnRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Closed month intervals of economic recession, sorted and disjoint.
#[derive(Debug, Clone, Default)]
pub struct RecessionCalendar {
    intervals: Vec<(YearMonth, YearMonth)>,
}

impl RecessionCalendar {
    pub fn new(mut intervals: Vec<(YearMonth, YearMonth)>) -> Result<Self> {
        for (b, e) in &intervals {
            if e < b {
                return Err(Error::Data(format!("recession interval {b}..{e} is reversed")));
            }
        }
        intervals.sort();
        for w in intervals.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(Error::Data(format!(
                    "recession intervals overlap near {}",
                    w[1].0
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[(YearMonth, YearMonth)] {
        &self.intervals
    }

    pub fn contains(&self, m: YearMonth) -> bool {
        // intervals are sorted by begin month
        let i = self.intervals.partition_point(|(b, _)| *b <= m);
        i > 0 && m <= self.intervals[i - 1].1
    }
}

/// How much of a spell must overlap the calendar for recession = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecessionRule {
    #[default]
    Any,
    Majority,
    All,
}

impl FromStr for RecessionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Self::Any),
            "majority" => Ok(Self::Majority),
            "all" => Ok(Self::All),
            other => Err(Error::Data(format!(
                "unknown recession rule {other:?}, want any|majority|all"
            ))),
        }
    }
}

/// One maximal run of consecutive negative-return months.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpellRecord {
    pub start: YearMonth,
    /// Duration in months, >= 1.
    pub duration: u32,
    /// 1 if the run was ended by a non-negative month, 0 if censored at the
    /// end of the sample.
    pub event: u8,
    pub recession: bool,
    /// Mean of -100 * log-return over the spell months, percent.
    pub price_decline: f64,
    /// Mean long rate over the spell months, percent.
    pub interest_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SpellSet {
    pub spells: Vec<SpellRecord>,
    pub source_digest: String,
    pub date_range: Option<(YearMonth, YearMonth)>,
    /// Count of negative-return months in the sample.
    pub negative_months: usize,
    /// Count of negative-return months that fall inside a recession.
    pub joint_recession_months: usize,
}

impl SpellSet {
    pub fn durations(&self) -> Vec<f64> {
        self.spells.iter().map(|s| f64::from(s.duration)).collect()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Load the normalized monthly CSV (`date,real_price,long_rate_pct`).
pub fn load_series(path: &Path) -> Result<PriceSeries> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let digest = format!("{:016x}", fnv1a64(&raw));
    let mut rdr = csv::ReaderBuilder::new().from_reader(raw.as_slice());
    {
        let hdr = rdr.headers()?;
        let want = ["date", "real_price", "long_rate_pct"];
        if hdr.len() != 3 || hdr.iter().zip(want).any(|(a, b)| a != b) {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad header {:?}, want date,real_price,long_rate_pct", hdr),
            });
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or(Error::Parse {
                line,
                message: format!("missing field {i}"),
            })
        };
        let month: YearMonth = field(0)?.parse().map_err(|e| Error::Parse {
            line,
            message: format!("{e}"),
        })?;
        let real_price: f64 = field(1)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad price {:?}", rec.get(1).unwrap_or("")),
        })?;
        let long_rate_pct: f64 = field(2)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad rate {:?}", rec.get(2).unwrap_or("")),
        })?;
        rows.push(PriceRow {
            month,
            real_price,
            long_rate_pct,
        });
    }
    PriceSeries::validated(rows, digest)
}

/// Load the recession calendar CSV (`begin,end`, months inclusive).
pub fn load_recessions(path: &Path) -> Result<RecessionCalendar> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(raw.as_slice());
    {
        let hdr = rdr.headers()?;
        if hdr.len() != 2 || &hdr[0] != "begin" || &hdr[1] != "end" {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad header {:?}, want begin,end", hdr),
            });
        }
    }
    let mut intervals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let parse = |s: &str| -> Result<YearMonth> {
            s.parse().map_err(|e| Error::Parse {
                line,
                message: format!("{e}"),
            })
        };
        intervals.push((parse(&rec[0])?, parse(&rec[1])?));
    }
    RecessionCalendar::new(intervals)
}

/// Log returns r_t = ln P_t − ln P_{t−1}, one per month after the first.
pub fn compute_returns(series: &PriceSeries) -> Result<ReturnSeries> {
    if series.len() < 2 {
        return Err(Error::Data(
            "need at least two price rows to compute returns".into(),
        ));
    }
    let rows = series
        .rows()
        .windows(2)
        .map(|w| ReturnRow {
            month: w[1].month,
            r: w[1].real_price.ln() - w[0].real_price.ln(),
            long_rate_pct: w[1].long_rate_pct,
        })
        .collect();
    Ok(ReturnSeries {
        rows,
        source_digest: series.source_digest.clone(),
    })
}

/// Extract maximal runs of strictly negative returns as spells. A run still
/// open at the final observation is censored (event = 0).
pub fn extract_spells(
    returns: &ReturnSeries,
    calendar: &RecessionCalendar,
    rule: RecessionRule,
) -> Result<SpellSet> {
    if returns.is_empty() {
        return Err(Error::Data("return series is empty".into()));
    }
    let rows = returns.rows();
    let mut spells = Vec::new();
    let mut negative_months = 0usize;
    let mut joint = 0usize;
    let mut run_start: Option<usize> = None;

    let close = |i0: usize, i1: usize, spells: &mut Vec<SpellRecord>| {
        let months = &rows[i0..=i1];
        let t = (i1 - i0 + 1) as u32;
        let event = u8::from(i1 + 1 < rows.len());
        let overlap = months.iter().filter(|m| calendar.contains(m.month)).count() as u32;
        let recession = match rule {
            RecessionRule::Any => overlap >= 1,
            RecessionRule::Majority => 2 * overlap > t,
            RecessionRule::All => overlap == t,
        };
        let price_decline =
            months.iter().map(|m| -100.0 * m.r).sum::<f64>() / f64::from(t);
        let interest_rate =
            months.iter().map(|m| m.long_rate_pct).sum::<f64>() / f64::from(t);
        spells.push(SpellRecord {
            start: months[0].month,
            duration: t,
            event,
            recession,
            price_decline,
            interest_rate,
        });
    };

    for (i, row) in rows.iter().enumerate() {
        if row.r < 0.0 {
            negative_months += 1;
            if calendar.contains(row.month) {
                joint += 1;
            }
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(i0) = run_start.take() {
            close(i0, i - 1, &mut spells);
        }
    }
    if let Some(i0) = run_start {
        close(i0, rows.len() - 1, &mut spells);
    }

    Ok(SpellSet {
        spells,
        source_digest: returns.source_digest.clone(),
        date_range: Some((rows[0].month, rows[rows.len() - 1].month)),
        negative_months,
        joint_recession_months: joint,
    })
}

/// Write a spell set in the export layout.
pub fn write_spells_csv<W: std::io::Write>(spells: &[SpellRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "start",
        "duration",
        "event",
        "recession",
        "price_decline_pct",
        "interest_rate_pct",
    ])?;
    for s in spells {
        w.write_record([
            s.start.to_string(),
            s.duration.to_string(),
            s.event.to_string(),
            u8::from(s.recession).to_string(),
            format!("{}", s.price_decline),
            format!("{}", s.interest_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-group duration statistics; variance is a marker-free option so a
/// single-spell group reports it as undefined rather than 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    pub variance: Option<f64>,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone)]
pub struct SpellSummary {
    pub groups: Vec<GroupStats>,
    pub histogram: BTreeMap<u32, usize>,
}

fn group_stats(label: &str, durations: &[u32]) -> Result<GroupStats> {
    if durations.is_empty() {
        return Err(Error::EmptyGroup(label.to_string()));
    }
    let n = durations.len();
    let mean = durations.iter().map(|&d| f64::from(d)).sum::<f64>() / n as f64;
    let variance = if n >= 2 {
        Some(
            durations
                .iter()
                .map(|&d| (f64::from(d) - mean).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0),
        )
    } else {
        None
    };
    Ok(GroupStats {
        label: label.to_string(),
        n,
        mean,
        variance,
        min: *durations.iter().min().unwrap(),
        max: *durations.iter().max().unwrap(),
    })
}

/// Summarize spell durations, optionally split into labeled index groups.
pub fn describe_spells(
    spells: &[SpellRecord],
    grouping: Option<&[(String, Vec<usize>)]>,
) -> Result<SpellSummary> {
    if spells.is_empty() {
        return Err(Error::Data("no spells to describe".into()));
    }
    let mut histogram = BTreeMap::new();
    for s in spells {
        *histogram.entry(s.duration).or_insert(0) += 1;
    }
    let groups = match grouping {
        None => vec![group_stats(
            "all",
            &spells.iter().map(|s| s.duration).collect::<Vec<_>>(),
        )?],
        Some(gs) => gs
            .iter()
            .map(|(label, idx)| {
                let ds: Vec<u32> = idx.iter().map(|&i| spells[i].duration).collect();
                group_stats(label, &ds)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(SpellSummary { groups, histogram })
}

/// Welch two-sample t-test with unequal variances. The Welch-Satterthwaite
/// degrees of freedom are reported rounded to the nearest integer and the
/// two-tailed p-value uses the rounded value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, i64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data(format!(
            "welch_t_test needs both samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Data(
            "welch_t_test is degenerate: both samples have zero variance".into(),
        ));
    }
    let sa = va / na;
    let sb = vb / nb;
    let t = (ma - mb) / (sa + sb).sqrt();
    let df_raw = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let df = (df_raw + 0.5).floor() as i64;
    let p = special::student_t_two_tail(t, df as f64)?;
    Ok((t, df, p))
}

/// OLS cubic over (duration, relative frequency) pairs from a histogram of
/// observed durations. Returns the four coefficients (constant first) and
/// the fit's R-squared.
pub fn cubic_trend_fit(histogram: &BTreeMap<u32, usize>) -> Result<([f64; 4], f64)> {
    if histogram.len() < 5 {
        return Err(Error::Data(format!(
            "cubic_trend_fit needs at least 5 distinct durations, got {}",
            histogram.len()
        )));
    }
    let total: usize = histogram.values().sum();
    let pts: Vec<(f64, f64)> = histogram
        .iter()
        .map(|(&t, &c)| (f64::from(t), c as f64 / total as f64))
        .collect();
    let m = pts.len();
    let mut x = nalgebra::DMatrix::zeros(m, 4);
    let mut y = nalgebra::DVector::zeros(m);
    for (i, &(t, f)) in pts.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = t;
        x[(i, 2)] = t * t;
        x[(i, 3)] = t * t * t;
        y[i] = f;
    }
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Data("cubic_trend_fit design is rank-deficient".into()))?;
    let pred = &x * &beta;
    let ybar = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let ss_res: f64 = y
        .iter()
        .zip(pred.iter())
        .map(|(v, p)| (v - p).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("cubic_trend_fit: constant frequencies".into()));
    }
    Ok(([beta[0], beta[1], beta[2], beta[3]], 1.0 - ss_res / ss_tot))
}

/// Type-7 quartile breakpoints (linear interpolation between order
/// statistics), matching the usual spreadsheet convention.
pub fn quartile_breaks(xs: &[f64]) -> Result<[f64; 3]> {
    if xs.len() < 4 {
        return Err(Error::Data(format!(
            "quartile_breaks needs at least 4 values, got {}",
            xs.len()
        )));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    let mut out = [0.0; 3];
    for (j, q) in [0.25, 0.5, 0.75].iter().enumerate() {
        let h = (n as f64 - 1.0) * q;
        let lo = h.floor() as usize;
        let frac = h - h.floor();
        out[j] = if lo + 1 < n {
            v[lo] + frac * (v[lo + 1] - v[lo])
        } else {
            v[lo]
        };
    }
    Ok(out)
}

/// Quartile membership (1-based): values at or below a break stay in the
/// lower quartile.
pub fn quartile_of(x: f64, breaks: &[f64; 3]) -> usize {
    1 + breaks.iter().filter(|&&b| x > b).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(prices: &[f64]) -> PriceSeries {
        let rows = prices
            .iter()
            .enumerate()
            .map(|(i, &p)| PriceRow {
                month: YearMonth::from_index(YearMonth::new(2000, 1).unwrap().index() + i as i64),
                real_price: p,
                long_rate_pct: 4.0,
            })
            .collect();
        PriceSeries::from_rows(rows).unwrap()
    }

    #[test]
    fn year_month_round_trip() {
        let m: YearMonth = "1871-02".parse().unwrap();
        assert_eq!(m.to_string(), "1871-02");
        assert_eq!(YearMonth::from_index(m.index()), m);
        assert_eq!(m.next().to_string(), "1871-03");
        assert_eq!(
            YearMonth::new(1871, 12).unwrap().next(),
            YearMonth::new(1872, 1).unwrap()
        );
    }

    #[test]
    fn returns_basic() {
        let s = series(&[100.0, 110.0]);
        let r = compute_returns(&s).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.rows()[0].r - 1.1f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn spells_from_signs() {
        // +, -, -, +, - : two spells, the last censored
        let s = series(&[100.0, 101.0, 99.0, 98.0, 99.0, 97.0]);
        let cal = RecessionCalendar::default();
        let sp = extract_spells(&compute_returns(&s).unwrap(), &cal, RecessionRule::Any).unwrap();
        assert_eq!(sp.spells.len(), 2);
        assert_eq!((sp.spells[0].duration, sp.spells[0].event), (2, 1));
        assert_eq!((sp.spells[1].duration, sp.spells[1].event), (1, 0));
        assert_eq!(sp.negative_months, 3);
    }

    #[test]
    fn all_positive_is_empty() {
        let s = series(&[1.0, 2.0, 3.0]);
        let cal = RecessionCalendar::default();
        let sp = extract_spells(&compute_returns(&s).unwrap(), &cal, RecessionRule::Any).unwrap();
        assert!(sp.spells.is_empty());
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let (t, _, p) = welch_t_test(&a, &a).unwrap();
        assert_eq!(t, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quartiles_type7() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let b = quartile_breaks(&xs).unwrap();
        assert_eq!(b, [1.75, 2.5, 3.25]);
        assert_eq!(quartile_of(1.75, &b), 1);
        assert_eq!(quartile_of(2.0, &b), 2);
        assert_eq!(quartile_of(4.0, &b), 4);
    }

    #[test]
    fn gap_detection() {
        let rows = vec![
            PriceRow {
                month: "2000-01".parse().unwrap(),
                real_price: 1.0,
                long_rate_pct: 0.0,
            },
            PriceRow {
                month: "2000-03".parse().unwrap(),
                real_price: 1.0,
                long_rate_pct: 0.0,
            },
        ];
        let err = PriceSeries::from_rows(rows).unwrap_err();
        assert!(err.to_string().contains("2000-02"));
    }

    #[test]
    fn cubic_exact_data() {
        let mut h = BTreeMap::new();
        // frequencies proportional to 10 - t so the cubic fits exactly
        for t in 1..=6u32 {
            h.insert(t, (10 - t) as usize);
        }
        let (_, r2) = cubic_trend_fit(&h).unwrap();
        assert!((r2 - 1.0).abs() < 1e-10);
    }
}
