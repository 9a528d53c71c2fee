//! Calibration profile: the activation statistics gathered at every Quant
//! site, in a lossless text file from which scales for any word-length and
//! activation method can be resolved later.
//!
//! ```text
//! format ptq-profile 1
//! calibration samples=1000 seed=0 capacity=1048576
//! site id=q_in count=768000 min=0x0p+0 max=... abs_max=... abs_mean=... mean=... std=...
//! channel site=q_in index=0 count=256000 min=... max=... abs_max=... abs_mean=... mean=... std=...
//! percentile site=q_in k=99.99 value=...
//! scale site=q_in method=absp bits=8 value=...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::calibration::{compute_quant_params, ScaleMethod, StatsSource, ACTIVATION_CHANNEL_AXIS};
use crate::engine::CalibrationSink;
use crate::error::{PtqError, Result};
use crate::hexfloat;
use crate::quant::Signedness;
use crate::tensor::{AxisGroup, GroupStats};
use crate::textfmt::{check_header, content_lines, Fields};

pub const FORMAT_NAME: &str = "ptq-profile";
pub const FORMAT_VERSION: u16 = 1;

/// Statistics of one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteProfile {
    pub tensor: GroupStats,
    /// Per-channel statistics (NCHW axis 1), used by BatchQuant.
    pub channels: Vec<GroupStats>,
    /// `(k, k-th percentile of |x|)`, sorted by `k`.
    pub percentiles: Vec<(f64, f64)>,
}

impl SiteProfile {
    pub fn percentile(&self, k: f64) -> Option<f64> {
        if k == 100.0 {
            return Some(self.tensor.abs_max);
        }
        self.percentiles
            .iter()
            .find(|(pk, _)| *pk == k)
            .map(|&(_, v)| v)
    }
}

impl StatsSource for SiteProfile {
    fn group_stats(&self, g: AxisGroup) -> Result<Vec<GroupStats>> {
        match g {
            AxisGroup::WholeTensor => Ok(vec![self.tensor]),
            AxisGroup::PerChannel {
                axis: ACTIVATION_CHANNEL_AXIS,
            } => Ok(self.channels.clone()),
            other => Err(PtqError::ShapeMismatch(format!(
                "profile has no statistics for {other:?}"
            ))),
        }
    }

    fn abs_percentiles(&self, k: f64, g: AxisGroup) -> Result<Vec<f64>> {
        if g != AxisGroup::WholeTensor {
            return Err(PtqError::ShapeMismatch(
                "profile percentiles are whole-tensor".into(),
            ));
        }
        self.percentile(k).map(|v| vec![v]).ok_or_else(|| {
            PtqError::Missing(format!(
                "percentile k={k} was not recorded; recalibrate with --percentile-k {k}"
            ))
        })
    }
}

/// A scale computed at calibration time for the configured method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRecord {
    pub site: String,
    pub method: ScaleMethod,
    pub bits: u8,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationProfile {
    pub samples: usize,
    pub seed: u64,
    pub capacity: usize,
    pub sites: BTreeMap<String, SiteProfile>,
    pub scales: Vec<ScaleRecord>,
}

impl CalibrationProfile {
    /// Summarizes a calibration sink, recording the requested percentiles.
    pub fn from_sink(
        sink: &CalibrationSink,
        percentiles: &[f64],
        samples: usize,
        seed: u64,
        capacity: usize,
    ) -> Result<Self> {
        let mut ks: Vec<f64> = percentiles.to_vec();
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        let mut sites = BTreeMap::new();
        for (id, s) in sink.sites() {
            let tensor = s.tensor.summaries()?[0];
            let channels = s.channels.summaries()?;
            let percentiles = ks
                .iter()
                .map(|&k| Ok((k, s.tensor.abs_percentiles(k)?[0])))
                .collect::<Result<Vec<_>>>()?;
            sites.insert(
                id.clone(),
                SiteProfile {
                    tensor,
                    channels,
                    percentiles,
                },
            );
        }
        Ok(CalibrationProfile {
            samples,
            seed,
            capacity,
            sites,
            scales: Vec::new(),
        })
    }

    pub fn site(&self, id: &str) -> Result<&SiteProfile> {
        self.sites
            .get(id)
            .ok_or_else(|| PtqError::Missing(format!("profile has no site {id:?}")))
    }

    /// Computes and records the activation scale of every site for
    /// `method` at `bits`. Failures are collected and reported per site.
    pub fn record_scales(&mut self, method: ScaleMethod, bits: u8) -> Result<()> {
        let mut issues = Vec::new();
        for (id, site) in &self.sites {
            match compute_quant_params(method, AxisGroup::WholeTensor, site, bits, Signedness::Unsigned) {
                Ok(p) => self.scales.push(ScaleRecord {
                    site: id.clone(),
                    method,
                    bits,
                    value: p.scales()[0],
                }),
                Err(e) => issues.push(format!("{id}: {e}")),
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PtqError::Degenerate(issues.join("; ")))
        }
    }

    pub fn encode(&self) -> String {
        let mut s = format!(
            "format {FORMAT_NAME} {FORMAT_VERSION}\ncalibration samples={} seed={} capacity={}\n",
            self.samples, self.seed, self.capacity
        );
        for (id, site) in &self.sites {
            writeln!(s, "site id={id} {}", stats_fields(&site.tensor)).unwrap();
            for (i, c) in site.channels.iter().enumerate() {
                writeln!(s, "channel site={id} index={i} {}", stats_fields(c)).unwrap();
            }
            for (k, v) in &site.percentiles {
                writeln!(s, "percentile site={id} k={k} value={}", hexfloat::format(*v)).unwrap();
            }
        }
        for r in &self.scales {
            writeln!(
                s,
                "scale site={} method={} bits={} value={}",
                r.site,
                r.method,
                r.bits,
                hexfloat::format(r.value)
            )
            .unwrap();
        }
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (_, header) = lines
            .next()
            .ok_or_else(|| PtqError::Format("empty profile".into()))?;
        check_header(header, FORMAT_NAME, FORMAT_VERSION)?;
        let mut p = CalibrationProfile::default();
        let mut saw_calibration = false;
        for (no, line) in lines {
            let mut tokens = line.split_whitespace();
            let record = tokens.next().expect("non-empty line");
            let f = Fields::parse(no, tokens)?;
            let site_of = |p: &mut CalibrationProfile| -> Result<String> {
                let id = f.str("site")?;
                if !p.sites.contains_key(id) {
                    return Err(PtqError::Format(format!(
                        "line {no}: site {id:?} used before its site record"
                    )));
                }
                Ok(id.to_string())
            };
            match record {
                "calibration" => {
                    p.samples = f.get("samples")?;
                    p.seed = f.get("seed")?;
                    p.capacity = f.get("capacity")?;
                    saw_calibration = true;
                }
                "site" => {
                    let id = f.str("id")?.to_string();
                    let site = SiteProfile {
                        tensor: parse_stats(&f)?,
                        channels: Vec::new(),
                        percentiles: Vec::new(),
                    };
                    if p.sites.insert(id.clone(), site).is_some() {
                        return Err(PtqError::Format(format!("line {no}: duplicate site {id:?}")));
                    }
                }
                "channel" => {
                    let id = site_of(&mut p)?;
                    let site = p.sites.get_mut(&id).expect("checked");
                    let index: usize = f.get("index")?;
                    if index != site.channels.len() {
                        return Err(PtqError::Format(format!(
                            "line {no}: channel {index} out of order"
                        )));
                    }
                    site.channels.push(parse_stats(&f)?);
                }
                "percentile" => {
                    let id = site_of(&mut p)?;
                    let entry = (f.get("k")?, f.hex("value")?);
                    p.sites.get_mut(&id).expect("checked").percentiles.push(entry);
                }
                "scale" => {
                    let site = site_of(&mut p)?;
                    p.scales.push(ScaleRecord {
                        site,
                        method: f.get("method")?,
                        bits: f.get("bits")?,
                        value: f.hex("value")?,
                    });
                }
                other => {
                    return Err(PtqError::Format(format!(
                        "line {no}: unknown record {other:?}"
                    )))
                }
            }
        }
        if !saw_calibration {
            return Err(PtqError::Format("profile lacks a calibration record".into()));
        }
        if p.sites.is_empty() {
            return Err(PtqError::NoCalibrationData);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        CalibrationProfile::decode(&fs::read_to_string(path)?)
    }
}

fn stats_fields(s: &GroupStats) -> String {
    let h = hexfloat::format;
    format!(
        "count={} min={} max={} abs_max={} abs_mean={} mean={} std={}",
        s.count,
        h(s.min),
        h(s.max),
        h(s.abs_max),
        h(s.abs_mean),
        h(s.mean),
        h(s.std)
    )
}

fn parse_stats(f: &Fields) -> Result<GroupStats> {
    Ok(GroupStats {
        min: f.hex("min")?,
        max: f.hex("max")?,
        abs_max: f.hex("abs_max")?,
        abs_mean: f.hex("abs_mean")?,
        mean: f.hex("mean")?,
        std: f.hex("std")?,
        count: f.get("count")?,
    })
}
