//! On-disk dataset: binary PPM images, 18-column CSV windows and a JSON
//! manifest carrying digests, normalization statistics and the segment index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gait::{window_metrics, GaitParams, MetricRecord};
use crate::numerics::Tensor;
use crate::synth::SynthSample;
use crate::ts::{TimeSeriesWindow, TsStats, D_TS, N_CH};
use crate::vision::{crop_bottom_center, ImageStats, RawImage};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub const CHANNEL_NAMES: [&str; N_CH] = [
    "acc_x",
    "acc_y",
    "acc_z",
    "gyro_x",
    "gyro_y",
    "gyro_z",
    "effort_0",
    "effort_1",
    "effort_2",
    "effort_3",
    "effort_4",
    "effort_5",
    "effort_6",
    "effort_7",
    "effort_8",
    "effort_9",
    "effort_10",
    "effort_11",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub image: String,
    pub image_sha256: String,
    pub window: String,
    pub window_sha256: String,
    pub t_end: f64,
    pub terrain: String,
    pub label: usize,
    pub gait: GaitParams,
    pub segment: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_count: usize,
    pub n_i: usize,
    pub categories: Vec<String>,
    pub image_stats: ImageStats,
    pub ts_stats: TsStats,
    /// Segment id → sample ids.
    pub segments: BTreeMap<usize, Vec<usize>>,
    pub samples: Vec<SampleRecord>,
}

/// A dataset held in memory; `images[i]` and `windows[i]` belong to
/// `manifest.samples[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RawImage>,
    pub windows: Vec<TimeSeriesWindow>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated PPM header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("bad PPM header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(corrupt("not an 8-bit binary PPM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad PPM size"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| corrupt("missing PPM payload"))?;
    if data.len() != w * h * 3 {
        return Err(corrupt("PPM payload size mismatch"));
    }
    RawImage::new(h, w, data.to_vec())
}

pub fn encode_window_csv(w: &TimeSeriesWindow) -> Vec<u8> {
    let mut s = CHANNEL_NAMES.join(",");
    s.push('\n');
    for k in 0..D_TS {
        let row: Vec<String> = (0..N_CH).map(|c| w.channel(c)[k].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s.into_bytes()
}

pub fn decode_window_csv(bytes: &[u8], t_end: f64, path: &Path) -> Result<TimeSeriesWindow> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::str::from_utf8(bytes).map_err(|_| corrupt("window CSV is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHANNEL_NAMES.join(",").as_str()) {
        return Err(corrupt("unexpected CSV header".into()));
    }
    let mut data = vec![0.0f32; N_CH * D_TS];
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        if k >= D_TS {
            return Err(corrupt(format!("more than {D_TS} rows")));
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != N_CH {
            return Err(corrupt(format!("row {k} has {} columns", vals.len())));
        }
        for (c, v) in vals.iter().enumerate() {
            data[c * D_TS + k] = v
                .trim()
                .parse()
                .map_err(|_| corrupt(format!("row {k}: bad number {v:?}")))?;
        }
        rows += 1;
    }
    if rows != D_TS {
        return Err(corrupt(format!("{rows} rows, expected {D_TS}")));
    }
    TimeSeriesWindow::new(Tensor::new(&[N_CH, D_TS], data)?, t_end)
}

/// Per-channel statistics of the bottom-centre crops, pixels scaled to [0, 1].
pub fn image_stats<'a>(
    images: impl Iterator<Item = &'a RawImage>,
    n_i: usize,
) -> Result<ImageStats> {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        let crop = crop_bottom_center(img, n_i, &ImageStats::default())?;
        for px in crop.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
        }
        n += crop.data.len() / 3;
    }
    let mut out = ImageStats::default();
    if n == 0 {
        return Ok(out);
    }
    for c in 0..3 {
        let mean = sum[c] / n as f64;
        let var = (sq[c] / n as f64 - mean * mean).max(0.0);
        out.mean[c] = mean as f32;
        out.std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
    }
    Ok(out)
}

pub fn ts_stats<'a>(windows: impl Iterator<Item = &'a TimeSeriesWindow>) -> TsStats {
    let mut sum = [0.0f64; N_CH];
    let mut sq = [0.0f64; N_CH];
    let mut n = 0usize;
    for w in windows {
        for c in 0..N_CH {
            for &v in w.channel(c) {
                sum[c] += v as f64;
                sq[c] += (v as f64).powi(2);
            }
        }
        n += D_TS;
    }
    let mut out = TsStats::default();
    if n == 0 {
        return out;
    }
    for c in 0..N_CH {
        let mean = sum[c] / n as f64;
        let var = (sq[c] / n as f64 - mean * mean).max(0.0);
        out.mean[c] = mean as f32;
        out.std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
    }
    out
}

impl Dataset {
    /// Assemble an in-memory dataset; statistics come from the train split.
    pub fn from_samples(
        samples: Vec<SynthSample>,
        n_i: usize,
        categories: Vec<String>,
    ) -> Result<Self> {
        let mut records = Vec::with_capacity(samples.len());
        let mut images = Vec::with_capacity(samples.len());
        let mut windows = Vec::with_capacity(samples.len());
        let mut segments: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (id, s) in samples.into_iter().enumerate() {
            let (image, window) = (
                format!("images/{id:06}.ppm"),
                format!("windows/{id:06}.csv"),
            );
            records.push(SampleRecord {
                id,
                image_sha256: sha256_hex(&encode_ppm(&s.image)),
                window_sha256: sha256_hex(&encode_window_csv(&s.window)),
                image,
                window,
                t_end: s.window.t_end,
                terrain: s.terrain,
                label: s.label,
                gait: s.gait,
                segment: s.segment,
                split: if s.holdout {
                    Split::Holdout
                } else {
                    Split::Train
                },
            });
            segments.entry(s.segment).or_default().push(id);
            images.push(s.image);
            windows.push(s.window);
        }
        let train: Vec<usize> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.id)
            .collect();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            sample_count: records.len(),
            n_i,
            categories,
            image_stats: image_stats(train.iter().map(|&i| &images[i]), n_i)?,
            ts_stats: ts_stats(train.iter().map(|&i| &windows[i])),
            segments,
            samples: records,
        };
        Ok(Self {
            manifest,
            images,
            windows,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id)
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|r| r.label).collect()
    }

    pub fn segments(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|r| r.segment).collect()
    }

    /// Raw window metrics of the given samples, for label selection.
    pub fn metric_records(&self, ids: &[usize]) -> Vec<MetricRecord> {
        ids.iter()
            .map(|&i| MetricRecord {
                terrain: self.manifest.samples[i].terrain.clone(),
                gait: self.manifest.samples[i].gait,
                metrics: window_metrics(&self.windows[i]),
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "windows"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, r) in self.manifest.samples.iter().enumerate() {
            write(&dir.join(&r.image), &encode_ppm(&self.images[i]))?;
            write(&dir.join(&r.window), &encode_window_csv(&self.windows[i]))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    /// Load and verify every digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        if manifest.sample_count != manifest.samples.len() {
            return Err(Error::Corrupt {
                path: mpath,
                reason: format!(
                    "sample_count {} but {} records",
                    manifest.sample_count,
                    manifest.samples.len()
                ),
            });
        }
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut windows = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let ipath = dir.join(&r.image);
            let bytes = read_verified(&ipath, &r.image_sha256)?;
            images.push(decode_ppm(&bytes, &ipath)?);
            let wpath = dir.join(&r.window);
            let bytes = read_verified(&wpath, &r.window_sha256)?;
            windows.push(decode_window_csv(&bytes, r.t_end, &wpath)?);
        }
        Ok(Self {
            manifest,
            images,
            windows,
        })
    }
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_verified(path: &PathBuf, digest: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != digest {
        return Err(Error::Corrupt {
            path: path.clone(),
            reason: format!("sha256 {actual} does not match manifest {digest}"),
        });
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_samples, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig::new(3, 1, 32);
        Dataset::from_samples(gen_samples(&cfg).unwrap(), 32, cfg.categories()).unwrap()
    }

    #[test]
    fn ppm_round_trip() {
        let img = RawImage::new(2, 3, (0..18).collect()).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes, Path::new("x")).unwrap(), img);
        let commented = b"P6\n# hi\n3 2\n255\n"
            .iter()
            .chain(&img.data)
            .copied()
            .collect::<Vec<_>>();
        assert_eq!(decode_ppm(&commented, Path::new("x")).unwrap(), img);
        assert!(decode_ppm(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn disk_round_trip_and_tamper_detection() {
        let ds = small();
        assert_eq!(ds.len(), 100);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);

        let victim = dir.path().join(&ds.manifest.samples[7].window);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 2;
        bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn stats_use_the_train_split() {
        let ds = small();
        let train = ds.indices(Split::Train);
        assert!(train.len() < ds.len());
        let s = ts_stats(train.iter().map(|&i| &ds.windows[i]));
        assert_eq!(s, ds.manifest.ts_stats);
        assert!((s.mean[2] - 9.81).abs() < 0.5);
    }
}
