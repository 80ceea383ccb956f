use super::metrics::{fid, lpips, psnr, resize_pad_512, ssim, validate_extractor, EVAL_SIZE, PSNR_CAP_DB};
use super::EvalError;
use crate::clients::FeatureExtractorClient;
use crate::raster::Rgb8Image;
use crate::tuning::config_hash;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

/// Means of the per-pair values, plus FID over the whole set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// Absent with fewer than two pairs.
    pub fid: Option<f64>,
}

/// An id present on only one side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingPair {
    pub id: String,
    pub missing_from: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config_hash: String,
    pub extractor: String,
    pub pairs: Vec<PairMetrics>,
    pub aggregate: AggregateMetrics,
    pub missing: Vec<MissingPair>,
}

#[derive(Serialize)]
struct ProtocolSettings<'a> {
    size: u32,
    resize: &'a str,
    pad: &'a str,
    psnr_cap_db: f64,
    ssim: &'a str,
    extractor: &'a str,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    /// Score aligned `(id, result, reference)` triples.
    pub fn compute(
        dataset: &str,
        pairs: &[(String, Rgb8Image, Rgb8Image)],
        fx: &dyn FeatureExtractorClient,
        missing: Vec<MissingPair>,
    ) -> Result<Self, EvalError> {
        let prepared: Vec<(String, Rgb8Image, Rgb8Image)> = pairs
            .iter()
            .map(|(id, r, g)| Ok((id.clone(), resize_pad_512(r)?, resize_pad_512(g)?)))
            .collect::<Result<_, EvalError>>()?;
        if let Some((_, r, g)) = prepared.first() {
            validate_extractor(fx, r, g)?;
        }
        let mut per_pair = Vec::with_capacity(prepared.len());
        for (id, r, g) in &prepared {
            per_pair.push(PairMetrics { id: id.clone(), psnr: psnr(r, g)?, ssim: ssim(r, g)?, lpips: lpips(r, g, fx)? });
        }
        let fid_value = if prepared.len() >= 2 {
            let results: Vec<Rgb8Image> = prepared.iter().map(|p| p.1.clone()).collect();
            let refs: Vec<Rgb8Image> = prepared.iter().map(|p| p.2.clone()).collect();
            let fa = fx.embed(&results).map_err(EvalError::ExtractorUnavailable)?;
            let fb = fx.embed(&refs).map_err(EvalError::ExtractorUnavailable)?;
            Some(fid(&fa, &fb)?)
        } else {
            None
        };
        let extractor = fx.identifier();
        let settings = ProtocolSettings {
            size: EVAL_SIZE,
            resize: "long-side-bilinear",
            pad: "zero, odd line bottom/right",
            psnr_cap_db: PSNR_CAP_DB,
            ssim: "luma, gaussian 11x11 sigma 1.5, valid windows",
            extractor: &extractor,
        };
        Ok(Self {
            dataset: dataset.to_string(),
            config_hash: config_hash(&settings),
            extractor,
            aggregate: AggregateMetrics {
                psnr: mean(per_pair.iter().map(|p| p.psnr)),
                ssim: mean(per_pair.iter().map(|p| p.ssim)),
                lpips: mean(per_pair.iter().map(|p| p.lpips)),
                fid: fid_value,
            },
            pairs: per_pair,
            missing,
        })
    }

    /// Aligned plain-text table: one row per pair and a mean row.
    pub fn to_table(&self) -> String {
        let id_w = self.pairs.iter().map(|p| p.id.len()).chain(["mean".len(), "id".len()]).max().unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}  extractor: {}  config: {}", self.dataset, self.extractor, &self.config_hash[..12]);
        let _ = writeln!(out, "{:<id_w$}  {:>9}  {:>7}  {:>7}", "id", "PSNR", "SSIM", "LPIPS");
        for p in &self.pairs {
            let _ = writeln!(out, "{:<id_w$}  {:>9.3}  {:>7.4}  {:>7.4}", p.id, p.psnr, p.ssim, p.lpips);
        }
        let a = &self.aggregate;
        let _ = writeln!(out, "{:<id_w$}  {:>9.3}  {:>7.4}  {:>7.4}", "mean", a.psnr, a.ssim, a.lpips);
        match a.fid {
            Some(f) => {
                let _ = writeln!(out, "FID: {f:.4}");
            }
            None => {
                let _ = writeln!(out, "FID: n/a (fewer than two pairs)");
            }
        }
        for m in &self.missing {
            let _ = writeln!(out, "missing pair: {} (absent from {})", m.id, m.missing_from);
        }
        out
    }

    /// Write `metrics.json` and `metrics.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self).expect("report serializes"))?;
        std::fs::write(dir.join("metrics.txt"), self.to_table())?;
        Ok(())
    }
}

fn images_by_id(dir: &Path) -> Result<BTreeMap<String, PathBuf>, EvalError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn load(path: &Path) -> Result<Rgb8Image, EvalError> {
    let img = image::open(path).map_err(|e| EvalError::Raster(crate::raster::RasterError::Codec(e)))?;
    Ok(img.to_rgb8())
}

/// Pair images by file stem, score them and report ids found on one side
/// only without stopping.
pub fn evaluate(results_dir: &Path, refs_dir: &Path, fx: &dyn FeatureExtractorClient) -> Result<MetricsReport, EvalError> {
    let results = images_by_id(results_dir)?;
    let refs = images_by_id(refs_dir)?;
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (id, rpath) in &results {
        match refs.get(id) {
            Some(gpath) => pairs.push((id.clone(), load(rpath)?, load(gpath)?)),
            None => missing.push(MissingPair { id: id.clone(), missing_from: "references".into() }),
        }
    }
    for id in refs.keys().filter(|id| !results.contains_key(*id)) {
        missing.push(MissingPair { id: id.clone(), missing_from: "results".into() });
    }
    for m in &missing {
        log::warn!("missing pair {} (absent from {})", m.id, m.missing_from);
    }
    let dataset = refs_dir.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
    MetricsReport::compute(&dataset, &pairs, fx, missing)
}
