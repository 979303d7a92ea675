use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    default_histogram_edges, dice_from_counts, ggo_consolidation_split, hu_histogram, poi_breakdown, summary_stats,
    voxels_to_cm3, Histogram, HuRange, QuantError, RegionPoi, RegionSet, SummaryStats,
};
use crate::volume::{LabelMask, Volume};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantOptions {
    pub ggo_range: HuRange,
    pub consolidation_range: HuRange,
    pub histogram_edges: Vec<f32>,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            ggo_range: HuRange::DEFAULT_GGO,
            consolidation_range: HuRange::DEFAULT_CONSOLIDATION,
            histogram_edges: default_histogram_edges(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfectedRegionCounts {
    pub lobes: usize,
    pub segments: usize,
}

/// Everything measured on one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub schema_version: u32,
    pub infection_voxels: usize,
    pub infection_volume_cm3: f64,
    pub poi_whole_lung: f64,
    pub poi_per_lobe: Vec<RegionPoi>,
    pub poi_per_segment: Vec<RegionPoi>,
    pub hu_histogram: Histogram,
    pub ggo_range: HuRange,
    pub consolidation_range: HuRange,
    pub ggo_volume_cm3: f64,
    pub consolidation_volume_cm3: f64,
    pub other_volume_cm3: f64,
    pub ggo_percent: f64,
    pub consolidation_percent: f64,
    pub infected_region_counts: InfectedRegionCounts,
}

pub fn quantify(
    volume: &Volume,
    infection: &LabelMask,
    regions: &RegionSet,
    options: &QuantOptions,
) -> Result<QuantReport, QuantError> {
    volume.geometry().ensure_same(infection.geometry())?;
    let breakdown = poi_breakdown(infection, regions)?;
    let hist = hu_histogram(volume, infection, &options.histogram_edges)?;
    let split = ggo_consolidation_split(volume, infection, options.ggo_range, options.consolidation_range)?;
    let g = volume.geometry();
    let n = infection.foreground_count();
    Ok(QuantReport {
        schema_version: REPORT_SCHEMA_VERSION,
        infection_voxels: n,
        infection_volume_cm3: voxels_to_cm3(n, g),
        poi_whole_lung: breakdown.lung.poi,
        infected_region_counts: InfectedRegionCounts {
            lobes: breakdown.lobes.iter().filter(|r| r.infected).count(),
            segments: breakdown.segments.iter().filter(|r| r.infected).count(),
        },
        poi_per_lobe: breakdown.lobes,
        poi_per_segment: breakdown.segments,
        hu_histogram: hist,
        ggo_range: options.ggo_range,
        consolidation_range: options.consolidation_range,
        ggo_volume_cm3: voxels_to_cm3(split.ggo_voxels, g),
        consolidation_volume_cm3: voxels_to_cm3(split.consolidation_voxels, g),
        other_volume_cm3: voxels_to_cm3(split.other_voxels, g),
        ggo_percent: split.ggo_percent(),
        consolidation_percent: split.consolidation_percent(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionError {
    pub name: String,
    pub reference_poi: f64,
    pub predicted_poi: f64,
    pub abs_error: f64,
    pub reference_infected: bool,
}

/// Agreement of a predicted mask with a reference on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub schema_version: u32,
    pub dice: f64,
    pub reference_volume_cm3: f64,
    pub predicted_volume_cm3: f64,
    pub volume_error_cm3: f64,
    /// Whole lung, then the 5 lobes, then the 18 segments.
    pub regions: Vec<RegionError>,
}

pub fn compare_masks(
    reference: &LabelMask,
    predicted: &LabelMask,
    volume: &Volume,
    regions: &RegionSet,
) -> Result<EvaluationRow, QuantError> {
    volume.geometry().ensure_same(reference.geometry())?;
    volume.geometry().ensure_same(predicted.geometry())?;
    let (mut nr, mut np, mut both) = (0, 0, 0);
    for (&a, &b) in reference.labels().iter().zip(predicted.labels()) {
        nr += (a != 0) as usize;
        np += (b != 0) as usize;
        both += (a != 0 && b != 0) as usize;
    }
    let r = poi_breakdown(reference, regions)?;
    let p = poi_breakdown(predicted, regions)?;
    let g = volume.geometry();
    let (vr, vp) = (voxels_to_cm3(nr, g), voxels_to_cm3(np, g));
    Ok(EvaluationRow {
        schema_version: REPORT_SCHEMA_VERSION,
        dice: dice_from_counts(nr, np, both),
        reference_volume_cm3: vr,
        predicted_volume_cm3: vp,
        volume_error_cm3: (vr - vp).abs(),
        regions: r
            .all()
            .zip(p.all())
            .map(|(a, b)| RegionError {
                name: a.name.clone(),
                reference_poi: a.poi,
                predicted_poi: b.poi,
                abs_error: (a.poi - b.poi).abs(),
                reference_infected: a.infected,
            })
            .collect(),
    })
}

/// One line of the cohort summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    /// `None` when no case qualifies.
    pub stats: Option<SummaryStats>,
    /// Cases contributing to this row.
    pub samples: usize,
    /// Percentages are rendered at 0.1 resolution.
    pub percent: bool,
}

/// Summarise per-case rows: Dice (percent), volume error, then POI error per
/// region over the cases where the reference region is infected.
pub fn aggregate(rows: &[EvaluationRow]) -> Result<Vec<AggregateRow>, QuantError> {
    if rows.is_empty() {
        return Err(QuantError::TooFewValues { need: 1, got: 0 });
    }
    let mut out = Vec::new();
    let dice: Vec<f64> = rows.iter().map(|r| 100.0 * r.dice).collect();
    out.push(AggregateRow {
        metric: "Dice (%)".into(),
        stats: Some(summary_stats(&dice)?),
        samples: dice.len(),
        percent: true,
    });
    let vol: Vec<f64> = rows.iter().map(|r| r.volume_error_cm3).collect();
    out.push(AggregateRow {
        metric: "Volume error (cm3)".into(),
        stats: Some(summary_stats(&vol)?),
        samples: vol.len(),
        percent: false,
    });
    let n_regions = rows[0].regions.len();
    if rows.iter().any(|r| r.regions.len() != n_regions) {
        return Err(QuantError::Regions("rows cover different region sets".into()));
    }
    for k in 0..n_regions {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.regions[k].reference_infected)
            .map(|r| r.regions[k].abs_error)
            .collect();
        out.push(AggregateRow {
            metric: format!("POI error ({})", rows[0].regions[k].name),
            stats: if errs.is_empty() { None } else { Some(summary_stats(&errs)?) },
            samples: errs.len(),
            percent: true,
        });
    }
    Ok(out)
}

/// CSV with columns `Metric, Mean, SD, Median, 25% IQR, 75% IQR, N`.
pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["Metric", "Mean", "SD", "Median", "25% IQR", "75% IQR", "N"])?;
    for row in rows {
        let fmt = |v: f64| if row.percent { format!("{v:.1}") } else { format!("{v:.3}") };
        let mut rec = vec![row.metric.clone()];
        match &row.stats {
            Some(s) => rec.extend([fmt(s.mean), fmt(s.sd), fmt(s.median), fmt(s.iqr25), fmt(s.iqr75)]),
            None => rec.extend(std::iter::repeat(String::new()).take(5)),
        }
        rec.push(row.samples.to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalEntry {
    pub date: NaiveDate,
    pub poi_whole_lung: f64,
    pub poi_per_lobe: Vec<f64>,
    pub infection_volume_cm3: f64,
    pub ggo_volume_cm3: f64,
    pub consolidation_volume_cm3: f64,
}

/// Change between consecutive scans (later minus earlier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDelta {
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub days: i64,
    pub poi_whole_lung: f64,
    pub poi_per_lobe: Vec<f64>,
    pub infection_volume_cm3: f64,
    pub ggo_volume_cm3: f64,
    pub consolidation_volume_cm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub schema_version: u32,
    pub entries: Vec<LongitudinalEntry>,
    pub deltas: Vec<LongitudinalDelta>,
}

pub fn longitudinal_report(series: &[(NaiveDate, QuantReport)]) -> Result<Timeline, QuantError> {
    if series.len() < 2 {
        return Err(QuantError::TooFewValues { need: 2, got: series.len() });
    }
    for w in series.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(QuantError::UnsortedDates(w[0].0.to_string(), w[1].0.to_string()));
        }
    }
    let entries: Vec<LongitudinalEntry> = series
        .iter()
        .map(|(date, r)| LongitudinalEntry {
            date: *date,
            poi_whole_lung: r.poi_whole_lung,
            poi_per_lobe: r.poi_per_lobe.iter().map(|p| p.poi).collect(),
            infection_volume_cm3: r.infection_volume_cm3,
            ggo_volume_cm3: r.ggo_volume_cm3,
            consolidation_volume_cm3: r.consolidation_volume_cm3,
        })
        .collect();
    let deltas = entries
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            LongitudinalDelta {
                from: a.date,
                to: b.date,
                days: (b.date - a.date).num_days(),
                poi_whole_lung: b.poi_whole_lung - a.poi_whole_lung,
                poi_per_lobe: b.poi_per_lobe.iter().zip(&a.poi_per_lobe).map(|(x, y)| x - y).collect(),
                infection_volume_cm3: b.infection_volume_cm3 - a.infection_volume_cm3,
                ggo_volume_cm3: b.ggo_volume_cm3 - a.ggo_volume_cm3,
                consolidation_volume_cm3: b.consolidation_volume_cm3 - a.consolidation_volume_cm3,
            }
        })
        .collect();
    Ok(Timeline {
        schema_version: REPORT_SCHEMA_VERSION,
        entries,
        deltas,
    })
}
