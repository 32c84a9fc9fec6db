//! Markdown tables and MIP panels for a finished sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::harness::sweep::{expand_sweep, read_cell_records, sweep_dir, SweepAxis, SweepCell};
use crate::metrics::{mean_std, MeanStd, MetricsRecord, Region};
use crate::volume::{export_pgm, load_uvol, mip_project, Axis, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    pub markdown: PathBuf,
    pub panels: Vec<PathBuf>,
    /// Cells without metrics.
    pub missing: Vec<String>,
}

impl ReportOutcome {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Metric {
    Ssim,
    Psnr,
    Mse,
}

impl Metric {
    const ALL: [Metric; 3] = [Metric::Ssim, Metric::Psnr, Metric::Mse];

    fn title(self) -> &'static str {
        match self {
            Metric::Ssim => "SSIM",
            Metric::Psnr => "PSNR",
            Metric::Mse => "MSE",
        }
    }

    fn of(self, r: &MetricsRecord) -> f64 {
        match self {
            Metric::Ssim => r.ssim,
            Metric::Psnr => r.psnr,
            Metric::Mse => r.mse,
        }
    }

    fn format(self, m: MeanStd) -> String {
        match self {
            Metric::Ssim => format!("{:.3} ± {:.3}", m.mean, m.std),
            Metric::Psnr if m.mean.is_infinite() => "inf".into(),
            Metric::Psnr => format!("{:.2} ± {:.2}", m.mean, m.std),
            Metric::Mse => format!("{:.2e} ± {:.1e}", m.mean, m.std),
        }
    }
}

const MISSING: &str = "—";

fn cell_value(records: Option<&Vec<MetricsRecord>>, region: Region, metric: Metric) -> String {
    let values: Vec<f64> = match records {
        Some(rs) => rs.iter().filter(|r| r.region == region).map(|r| metric.of(r)).collect(),
        None => return MISSING.into(),
    };
    mean_std(&values).map(|m| metric.format(m)).unwrap_or_else(|_| MISSING.into())
}

fn ordered(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn table(md: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(md, "| {} |", r.join(" | "));
    }
    md.push('\n');
}

fn clamp01(v: &Volume) -> Result<Volume> {
    Volume::new(v.dims(), v.voxel_size(), v.data().iter().map(|x| x.clamp(0.0, 1.0)).collect())
}

/// Writes clean, noisy, denoised and |difference| MIP panels for a cell that
/// stored sample volumes. Returns the written paths.
pub fn write_panels(dir: &Path, axis: Axis) -> Result<Vec<PathBuf>> {
    let clean = load_uvol(dir.join("sample_clean.uvol"))?;
    let noisy = clamp01(&load_uvol(dir.join("sample_noisy.uvol"))?)?;
    let denoised = load_uvol(dir.join("sample_denoised.uvol"))?;
    let diff_data = denoised.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs().min(1.0)).collect();
    let diff = Volume::new(clean.dims(), clean.voxel_size(), diff_data)?;
    let mut out = Vec::new();
    for (name, v) in [("clean", &clean), ("noisy", &noisy), ("denoised", &denoised), ("diff", &diff)] {
        let p = dir.join(format!("panel_{name}.pgm"));
        export_pgm(&mip_project(v, axis), &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Renders `report.md` for the sweep of `base` along `axis` from the per-cell
/// CSVs on disk. Cells without data appear as "—" and are listed in
/// [`ReportOutcome::missing`].
pub fn report(axis: SweepAxis, base: &ExperimentConfig, mip_axis: Axis) -> Result<ReportOutcome> {
    let dir = sweep_dir(base, axis);
    let cells = expand_sweep(axis, base)?;
    let records = read_cell_records(&cells);
    let missing: Vec<String> = cells.iter().filter(|c| !records.contains_key(&c.name)).map(|c| c.name.clone()).collect();
    let grid = cells.iter().any(|c| !c.col.is_empty());

    let mut md = String::new();
    let _ = writeln!(md, "# Sweep: {axis}\n");
    let _ = writeln!(md, "Checkpoint selection: best validation SSIM.");
    let _ = writeln!(md, "Noise level: Gaussian σ relative to the unit data range.");
    let _ = writeln!(md, "Values: mean ± sample std over training seeds and test volumes.");
    let _ = writeln!(md, "Training seeds: {}.\n", base.sweep_seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "));
    if !missing.is_empty() {
        let _ = writeln!(md, "Incomplete: no data for {}.\n", missing.join(", "));
    }
    for region in [Region::Full, Region::Center] {
        let _ = writeln!(md, "## Region: {region}\n");
        if grid {
            grid_tables(&mut md, &cells, &records, region);
        } else {
            let header: Vec<String> = ["Setting", "SSIM", "PSNR", "MSE"].map(String::from).to_vec();
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    let mut row = vec![c.row.clone()];
                    row.extend(Metric::ALL.map(|m| cell_value(records.get(&c.name), region, m)));
                    row
                })
                .collect();
            table(&mut md, &header, &rows);
        }
    }

    let mut panels = Vec::new();
    let _ = writeln!(md, "## Panels ({} MIP)\n", mip_axis.name());
    for c in &cells {
        let cdir = &c.config.output_dir;
        if !cdir.join("sample_denoised.uvol").exists() {
            continue;
        }
        let written = write_panels(cdir, mip_axis)?;
        let links: Vec<String> = written
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&dir).unwrap_or(p).display().to_string();
                let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("panel").trim_start_matches("panel_").to_string();
                format!("[{label}]({rel})")
            })
            .collect();
        let _ = writeln!(md, "- {}: {}", c.name, links.join(" "));
        panels.extend(written);
    }
    md.push('\n');
    fs::create_dir_all(&dir)?;
    let markdown = dir.join("report.md");
    fs::write(&markdown, md)?;
    Ok(ReportOutcome { markdown, panels, missing })
}

fn grid_tables(md: &mut String, cells: &[SweepCell], records: &std::collections::BTreeMap<String, Vec<MetricsRecord>>, region: Region) {
    let rows = ordered(cells.iter().map(|c| c.row.clone()));
    let cols = ordered(cells.iter().map(|c| c.col.clone()));
    for metric in Metric::ALL {
        let _ = writeln!(md, "### {}\n", metric.title());
        let mut header = vec![String::new()];
        header.extend(cols.iter().cloned());
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut line = vec![r.clone()];
                for col in &cols {
                    let found = cells.iter().find(|c| &c.row == r && &c.col == col);
                    line.push(match found {
                        Some(c) => cell_value(records.get(&c.name), region, metric),
                        None => MISSING.into(),
                    });
                }
                line
            })
            .collect();
        table(md, &header, &body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::metrics_csv;
    use crate::volume::{pgm_bytes, save_uvol};

    fn rec(id: &str, region: Region, ssim: f64) -> MetricsRecord {
        MetricsRecord {
            experiment_id: id.into(),
            seed: 0,
            noise: 0.1,
            arch: "dncnn".into(),
            loss: "l1".into(),
            region,
            ssim,
            psnr: 30.0,
            mse: 1e-3,
        }
    }

    fn fake_sweep(base: &ExperimentConfig, skip: usize) -> Vec<SweepCell> {
        let cells = expand_sweep(SweepAxis::LossComparison, base).unwrap();
        for (i, c) in cells.iter().enumerate() {
            if i == skip {
                continue;
            }
            fs::create_dir_all(&c.config.output_dir).unwrap();
            let rs = vec![rec(&c.config.id, Region::Full, 0.8 + 0.01 * i as f64), rec(&c.config.id, Region::Center, 0.7)];
            fs::write(c.config.output_dir.join("metrics.csv"), metrics_csv(&rs).unwrap()).unwrap();
        }
        cells
    }

    #[test]
    fn loss_table_has_one_row_per_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::default();
        base.output_dir = dir.path().to_path_buf();
        fake_sweep(&base, usize::MAX);
        let out = report(SweepAxis::LossComparison, &base, Axis::Axial).unwrap();
        assert!(out.is_complete());
        let md = fs::read_to_string(&out.markdown).unwrap();
        assert!(md.contains("| Setting | SSIM | PSNR | MSE |"));
        for row in ["| l1 | 0.800 ± 0.000 |", "| ssim | 0.810", "| uPL SimpleNet-3 | 0.820", "| uPL deep | 0.830"] {
            assert!(md.contains(row), "{row}\n{md}");
        }
        let again = report(SweepAxis::LossComparison, &base, Axis::Axial).unwrap();
        assert_eq!(fs::read(&again.markdown).unwrap(), md.as_bytes());
    }

    #[test]
    fn missing_cells_show_a_dash() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::default();
        base.output_dir = dir.path().to_path_buf();
        fake_sweep(&base, 1);
        let out = report(SweepAxis::LossComparison, &base, Axis::Axial).unwrap();
        assert_eq!(out.missing, vec!["ssim".to_string()]);
        let md = fs::read_to_string(&out.markdown).unwrap();
        assert!(md.contains("| ssim | — | — | — |"));
    }

    #[test]
    fn perfect_reconstruction_has_black_difference_panel() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([6, 6, 6], |d, h, w| ((d + h + w) % 3) as f32 / 2.0);
        save_uvol(&v, dir.path().join("sample_clean.uvol")).unwrap();
        save_uvol(&v, dir.path().join("sample_noisy.uvol")).unwrap();
        save_uvol(&v, dir.path().join("sample_denoised.uvol")).unwrap();
        let panels = write_panels(dir.path(), Axis::Axial).unwrap();
        let diff = fs::read(&panels[3]).unwrap();
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&diff[..header.len()], header);
        assert!(diff[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(fs::read(&panels[0]).unwrap(), pgm_bytes(&mip_project(&v, Axis::Axial)).unwrap());
    }

    #[test]
    fn grid_axes_render_grids() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::default();
        base.output_dir = dir.path().to_path_buf();
        let out = report(SweepAxis::DepthKernel, &base, Axis::Axial).unwrap();
        assert_eq!(out.missing.len(), 16);
        let md = fs::read_to_string(&out.markdown).unwrap();
        assert!(md.contains("|  | kernel 3 | kernel 5 | kernel 7 | kernel 9 |"));
        assert!(md.contains("| 13 conv | — | — | — | — |"));
    }
}
