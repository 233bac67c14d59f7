//! The three analysis experiments: steering sweep, fixed-timestep sweep and
//! timestep statistics, with their CSV/JSON reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::Pair;
use crate::image::Image;
use crate::metrics::{self, hf_energy_ratio, psnr, ssim};
use crate::pipeline::{RestorationResult, RestoreOptions, Restorer};
use crate::unet::NoisePredictor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Steering,
    FixedTimestep,
    Baseline,
}

/// Identifies the model and configuration a report was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub checkpoint_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: usize,
    /// The swept value: `s` for steering sweeps, the fixed `t` otherwise.
    pub value: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hf_energy_ratio: f64,
    pub t_hat: f64,
    pub t_mix: f64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        Self { mean: metrics::mean(v), std: metrics::std(v) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    pub count: usize,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
    pub hf_energy_ratio: MeanStd,
    pub t_hat: MeanStd,
    pub t_mix: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: SweepKind,
    pub provenance: Provenance,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn new(kind: SweepKind, provenance: Provenance, rows: Vec<ReportRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { kind, provenance, rows, aggregates }
    }

    pub fn aggregate_at(&self, value: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.value == value)
    }

    /// Swept values and mean PSNR, in sweep order.
    pub fn psnr_curve(&self) -> (Vec<f64>, Vec<f64>) {
        self.aggregates.iter().map(|a| (a.value, a.psnr_db.mean)).unzip()
    }

    pub fn csv_header(&self) -> &'static str {
        match self.kind {
            SweepKind::Steering => "image_id,s,psnr_db,ssim,hf_energy_ratio,t_hat,t_mix,checkpoint_hash",
            SweepKind::FixedTimestep => "image_id,fixed_t,psnr_db,ssim,hf_energy_ratio,t_hat,t_mix,checkpoint_hash",
            SweepKind::Baseline => "image_id,value,psnr_db,ssim,hf_energy_ratio,t_hat,t_mix,checkpoint_hash",
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", self.csv_header())?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.image_id, r.value, r.psnr_db, r.ssim, r.hf_energy_ratio, r.t_hat, r.t_mix, r.checkpoint_hash
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Groups rows by swept value, keeping first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let group: Vec<&ReportRow> = rows.iter().filter(|r| r.value == value).collect();
            let col = |f: fn(&ReportRow) -> f64| MeanStd::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                value,
                count: group.len(),
                psnr_db: col(|r| r.psnr_db),
                ssim: col(|r| r.ssim),
                hf_energy_ratio: col(|r| r.hf_energy_ratio),
                t_hat: col(|r| r.t_hat),
                t_mix: col(|r| r.t_mix),
            }
        })
        .collect()
}

fn score(images: &[Image], refs: &[Image], value: f64, t: &[(f64, f64)], hash: &str) -> Result<Vec<ReportRow>> {
    images
        .iter()
        .zip(refs)
        .zip(t)
        .enumerate()
        .map(|(i, ((x, y), (t_hat, t_mix)))| {
            Ok(ReportRow {
                image_id: i,
                value,
                psnr_db: psnr(x, y)?,
                ssim: ssim(x, y)?,
                hf_energy_ratio: hf_energy_ratio(x, y)?,
                t_hat: *t_hat,
                t_mix: *t_mix,
                checkpoint_hash: hash.to_string(),
            })
        })
        .collect()
}

fn split(eval: &[Pair]) -> (Vec<Image>, Vec<Image>) {
    eval.iter().map(|p| (p.lq.clone(), p.hq.clone())).unzip()
}

fn rows_of(out: &RestorationResult, hq: &[Image], value: f64, hash: &str) -> Result<Vec<ReportRow>> {
    let t: Vec<(f64, f64)> = out.diagnostics.iter().map(|d| (d.t_hat, d.t_mix)).collect();
    score(&out.images, hq, value, &t, hash)
}

/// Restores every pair at each `s` with the same seed.
pub fn sweep_s<P: NoisePredictor>(
    model: &Restorer<P>,
    eval: &[Pair],
    s_list: &[f64],
    batch: usize,
    provenance: Provenance,
) -> Result<ExperimentReport> {
    let (lq, hq) = split(eval);
    let mut rows = Vec::new();
    for &s in s_list {
        let out = model.restore_all(&lq, &RestoreOptions::new(s, provenance.seed), batch)?;
        rows.extend(rows_of(&out, &hq, s, &provenance.checkpoint_hash)?);
    }
    Ok(ExperimentReport::new(SweepKind::Steering, provenance, rows))
}

/// Restores every pair at `s = 0` with the anchor overridden to each fixed `t`
/// and fresh Gaussian noise in place of the predicted inversion noise.
pub fn sweep_fixed_t<P: NoisePredictor>(
    model: &Restorer<P>,
    eval: &[Pair],
    t_list: &[f64],
    batch: usize,
    provenance: Provenance,
) -> Result<ExperimentReport> {
    let (lq, hq) = split(eval);
    let mut rows = Vec::new();
    for &t in t_list {
        let opts = RestoreOptions { fixed_t: Some(t), ..RestoreOptions::new(0.0, provenance.seed) };
        let out = model.restore_all(&lq, &opts, batch)?;
        rows.extend(rows_of(&out, &hq, t, &provenance.checkpoint_hash)?);
    }
    Ok(ExperimentReport::new(SweepKind::FixedTimestep, provenance, rows))
}

/// Scores plain bicubic upsampling of the LQ inputs.
pub fn bicubic_baseline<P: NoisePredictor>(model: &Restorer<P>, eval: &[Pair], provenance: Provenance) -> Result<ExperimentReport> {
    let (lq, hq) = split(eval);
    let up = Image::batch_from_tensor(&model.upsample(&lq)?)?;
    let t = vec![(f64::NAN, f64::NAN); up.len()];
    let rows = score(&up, &hq, 0.0, &t, &provenance.checkpoint_hash)?;
    Ok(ExperimentReport::new(SweepKind::Baseline, provenance, rows))
}

pub const HISTOGRAM_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Lower edge of the first bin and upper edge of the last.
    pub range: (f64, f64),
    pub histogram: Vec<usize>,
    pub values: Vec<f64>,
}

impl TimestepStats {
    pub fn from_values(values: Vec<f64>, range: (f64, f64), bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no timesteps to summarise".into()));
        }
        Ok(Self {
            mean: metrics::mean(&values),
            std: metrics::std(&values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            range,
            histogram: metrics::histogram(&values, range.0, range.1, bins),
            values,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "image_id,t_hat")?;
        for (i, t) in self.values.iter().enumerate() {
            writeln!(f, "{i},{t}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Distribution of the predicted timestep over a set of LQ images.
pub fn timestep_stats<P: NoisePredictor>(model: &Restorer<P>, lq: &[Image], batch: usize) -> Result<TimestepStats> {
    let mut values = Vec::with_capacity(lq.len());
    for chunk in lq.chunks(batch.max(1)) {
        let z_l = model.codec.encode(&model.upsample(chunk)?)?;
        let t = model.mine.forward(&z_l)?.t_hat;
        values.extend(t.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
    }
    let c = &model.config;
    TimestepStats::from_values(values, (c.t_min, c.t_max_anchor), HISTOGRAM_BINS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, value: f64, p: f64) -> ReportRow {
        ReportRow {
            image_id: id,
            value,
            psnr_db: p,
            ssim: 0.5,
            hf_energy_ratio: 1.0,
            t_hat: 100.0,
            t_mix: 100.0,
            checkpoint_hash: "h".into(),
        }
    }

    fn prov() -> Provenance {
        Provenance { config_fingerprint: "c".into(), checkpoint_hash: "h".into(), seed: 1 }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = vec![row(0, 0.0, 20.0), row(1, 0.0, 22.0), row(0, 0.6, 18.0), row(1, 0.6, 18.0)];
        let rep = ExperimentReport::new(SweepKind::Steering, prov(), rows.clone());
        assert_eq!(rep.aggregates.len(), 2);
        assert_eq!(rep.aggregate_at(0.0).unwrap().psnr_db, MeanStd { mean: 21.0, std: 1.0 });
        assert_eq!(rep.aggregate_at(0.6).unwrap().count, 2);
        assert_eq!(aggregate(&rep.rows), rep.aggregates);
        assert_eq!(rep.psnr_curve(), (vec![0.0, 0.6], vec![21.0, 18.0]));
    }

    #[test]
    fn reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = ExperimentReport::new(SweepKind::FixedTimestep, prov(), vec![row(0, 50.0, 20.0), row(0, 150.0, 19.0)]);
        rep.write_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(ExperimentReport::read_json(&dir.path().join("r.json")).unwrap(), rep);
        rep.write_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(csv.starts_with("image_id,fixed_t,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn stats_histogram_sums_to_count() {
        let v: Vec<f64> = (0..64).map(|i| 60.0 + 5.0 * i as f64).collect();
        let st = TimestepStats::from_values(v, (50.0, 450.0), HISTOGRAM_BINS).unwrap();
        assert_eq!(st.histogram.iter().sum::<usize>(), 64);
        assert_eq!((st.min, st.max), (60.0, 375.0));
        assert!(TimestepStats::from_values(vec![], (50.0, 450.0), 4).is_err());
    }
}
