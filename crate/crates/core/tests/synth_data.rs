use std::collections::BTreeMap;

use xgait::gait::{select_labels, CostWeights, GaitGrid};
use xgait::harness::dataset::{Dataset, Split};
use xgait::harness::probe::{probe_classify, probe_fit_eval, ProbeConfig};
use xgait::synth::{build_dataset, gen_dataset, gen_image, SynthConfig, Terrain, TerrainSpec};
use xgait::ts::{TimeSeriesWindow, N_CH};
use xgait::vision::RawImage;

fn mean_color(img: &RawImage) -> [f64; 3] {
    let n = (img.height * img.width) as f64;
    let mut m = [0.0; 3];
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            m[c] += px[c] as f64 / n;
        }
    }
    m
}

/// Per-channel mean and spread, plus mean absolute horizontal and vertical
/// differences as a crude texture measure.
fn pixel_features(img: &RawImage) -> Vec<f32> {
    let (h, w) = (img.height, img.width);
    let mean = mean_color(img);
    let mut var = [0.0; 3];
    let mut dx = [0.0; 3];
    let mut dy = [0.0; 3];
    for r in 0..h {
        for c in 0..w {
            let p = img.pixel(r, c);
            for k in 0..3 {
                var[k] += (p[k] as f64 - mean[k]).powi(2) / (h * w) as f64;
                if c + 1 < w {
                    dx[k] += (p[k] as f64 - img.pixel(r, c + 1)[k] as f64).abs() / (h * w) as f64;
                }
                if r + 1 < h {
                    dy[k] += (p[k] as f64 - img.pixel(r + 1, c)[k] as f64).abs() / (h * w) as f64;
                }
            }
        }
    }
    mean.iter()
        .chain(var.map(f64::sqrt).iter())
        .chain(dx.iter())
        .chain(dy.iter())
        .map(|&v| v as f32)
        .collect()
}

fn window_features(w: &TimeSeriesWindow) -> Vec<f32> {
    (0..N_CH)
        .flat_map(|c| {
            let x = w.channel(c);
            let n = x.len() as f32;
            let mean = x.iter().sum::<f32>() / n;
            let rms = (x.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt();
            [mean, rms]
        })
        .collect()
}

#[test]
fn terrain_images_are_far_apart_in_color() {
    let spec = |t| TerrainSpec::default_for(t);
    let colors = |t: Terrain| -> Vec<[f64; 3]> {
        (0..100)
            .map(|s| mean_color(&gen_image(&spec(t), 80, 96, s)))
            .collect()
    };
    let hard = colors(Terrain::HardSurface);
    let veg = colors(Terrain::Vegetation);
    let centroid = |v: &[[f64; 3]]| -> [f64; 3] {
        let mut m = [0.0; 3];
        for x in v {
            for c in 0..3 {
                m[c] += x[c] / v.len() as f64;
            }
        }
        m
    };
    // total variance: mean squared distance to the centroid
    let variance = |v: &[[f64; 3]]| {
        let m = centroid(v);
        v.iter()
            .map(|x| (0..3).map(|c| (x[c] - m[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / v.len() as f64
    };
    let (a, b) = (centroid(&hard), centroid(&veg));
    let dist = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
    let within = variance(&hard).max(variance(&veg));
    assert!(
        dist > 4.0 * within,
        "distance {dist:.3}, within-terrain variance {within:.3}"
    );
    assert!(dist > 4.0 * within.sqrt());
}

#[test]
fn raw_pixel_probe_separates_terrains() {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in Terrain::ALL {
        let spec = TerrainSpec::default_for(t);
        for s in 0..60 {
            x.push(pixel_features(&gen_image(&spec, 80, 96, 1000 + s)));
            y.push(t.id());
        }
    }
    let report = probe_classify(&x, &y, 4).unwrap();
    assert!(report.accuracy >= 95.0, "{}", report.confusion_text());
}

#[test]
fn generated_labels_match_designed_optima() {
    let ds = build_dataset(&SynthConfig::new(21, 3, 32)).unwrap();
    let ids: Vec<usize> = (0..ds.len()).collect();
    let labels = select_labels(
        &ds.metric_records(&ids),
        &GaitGrid::default(),
        &CostWeights::default(),
    )
    .unwrap();
    assert_eq!(labels.len(), 5);
    for t in Terrain::ALL {
        let want = TerrainSpec::default_for(t).signal.optimum;
        assert_eq!(labels[t.name()], want, "{}", t.name());
    }
    assert_eq!(labels["vegetation"].step_height, 0.3);
}

#[test]
fn xor_categories_need_both_modalities() {
    let ds = build_dataset(&SynthConfig::xor(5, 3, 32)).unwrap();
    let labels = ds.labels();
    let img: Vec<Vec<f32>> = ds.images.iter().map(pixel_features).collect();
    let win: Vec<Vec<f32>> = ds.windows.iter().map(window_features).collect();
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Holdout);
    let cfg = ProbeConfig::default();
    let probe = |x: &[Vec<f32>], y: &[usize]| {
        let pick = |ix: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
            (
                ix.iter().map(|&i| x[i].clone()).collect(),
                ix.iter().map(|&i| y[i]).collect(),
            )
        };
        let (a, b) = pick(&train);
        let (c, d) = pick(&test);
        probe_fit_eval(&a, &b, &c, &d, 9, &cfg).unwrap()
    };
    let image_only = probe(&img, &labels);
    let window_only = probe(&win, &labels);
    assert!(
        image_only.accuracy <= 70.0,
        "image-only {:.1}",
        image_only.accuracy
    );
    assert!(
        window_only.accuracy <= 70.0,
        "window-only {:.1}",
        window_only.accuracy
    );

    // Each modality carries its own bit; decoding both recovers the category.
    let bit0: Vec<usize> = labels.iter().map(|l| l & 1).collect();
    let bit1: Vec<usize> = labels.iter().map(|l| l >> 1).collect();
    let b0 = probe(&img, &bit0);
    let b1 = probe(&win, &bit1);
    assert!(
        b0.accuracy >= 99.0 && b1.accuracy >= 99.0,
        "{} / {}",
        b0.accuracy,
        b1.accuracy
    );
}

#[test]
fn dataset_on_disk_round_trips_and_is_deterministic() {
    let cfg = SynthConfig::new(7, 3, 32);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = gen_dataset(&cfg, a.path()).unwrap();
    assert_eq!(manifest.sample_count, 300);
    gen_dataset(&cfg, b.path()).unwrap();

    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.len(), 300);
    assert_eq!(loaded, build_dataset(&cfg).unwrap());

    let digest = |dir: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
        out
    };
    assert_eq!(digest(a.path()), digest(b.path()));
}

#[test]
fn tampered_sample_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(&SynthConfig::new(3, 1, 32), dir.path()).unwrap();
    let victim = dir.path().join(&manifest.samples[0].window);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    std::fs::write(&victim, bytes).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}
