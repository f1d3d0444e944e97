//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xgait::fusion::{supcon_loss, FusionConfig, FusionNet};
use xgait::gait::{
    apply_dynamic_window, mse_loss, predicted_steps, select_labels, CostWeights, GaitGrid,
    GaitParams, GaitRegressor, MetricRecord, WindowState, MAX_DELTA, SPLAY_BOUNDS, STEP_BOUNDS,
};
use xgait::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use xgait::harness::eval::{evaluate, EvalTable, ROW_FULL, ROW_MLP, ROW_NO_PROPRIO, ROW_NO_VISION};
use xgait::harness::nav::eval_navigation_metrics;
use xgait::harness::pipeline::{bench_log, measure_throughput, Pipeline};
use xgait::harness::train::{
    embed_all, encode_latents, inference_mask, prepare_inputs, train_all, Models, TrainPlan,
};
use xgait::harness::{Dataset, PipelineConfig, Split, StageReport};
use xgait::nn::Module;
use xgait::numerics::{finite_diff_check, primitive_gradient_errors};
use xgait::synth::{build_dataset, SynthConfig};
use xgait::ts::{triplet_loss, ImuSample, JointSample, TsEncoder, N_CH};
use xgait::vision::{reconstruction_loss, MaskedAutoencoder, PATCH_DIM};
use xgait::{Error, Tape, Tensor};

const SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        println!(
            "{} [{id}] {}",
            if ok { "PASS" } else { "FAIL" },
            detail.as_ref()
        );
        if !ok {
            self.failures += 1;
        }
    }

    fn info(&self, id: &str, detail: impl AsRef<str>) {
        println!("INFO [{id}] {}", detail.as_ref());
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn gradients(r: &mut Report) {
    let began = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for seed in 0..SEEDS {
        for (name, err) in primitive_gradient_errors(seed).expect("primitive sweep") {
            note(name, err);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let target = random(&[6, 8], &mut rng);
        let masked = [0usize, 2, 3, 5];
        let pred = random(&[6, 8], &mut rng);
        let e = finite_diff_check(
            |t, x| {
                let tv = t.constant(target.clone());
                reconstruction_loss(t, x, tv, &masked)
            },
            &pred,
            FD_EPS,
        )
        .expect("reconstruction check");
        note("loss:reconstruction", e);

        let (p, n1, n2) = (
            random(&[1, 5], &mut rng),
            random(&[1, 5], &mut rng),
            random(&[1, 5], &mut rng),
        );
        let anchor = random(&[1, 5], &mut rng);
        let e = finite_diff_check(
            |t, x| {
                let (pv, a, b) = (
                    t.constant(p.clone()),
                    t.constant(n1.clone()),
                    t.constant(n2.clone()),
                );
                triplet_loss(t, x, pv, &[a, b])
            },
            &anchor,
            FD_EPS,
        )
        .expect("triplet check");
        note("loss:triplet", e);
        let both = Tensor::<f64>::from_fn(&[3, 5], |i| [&anchor, &p, &n1][i / 5].data()[i % 5]);
        let e = finite_diff_check(
            |t, x| {
                let ar = t.gather_rows(x, &[0])?;
                let pr = t.gather_rows(x, &[1])?;
                let nr = t.gather_rows(x, &[2])?;
                triplet_loss(t, ar, pr, &[nr])
            },
            &both,
            FD_EPS,
        )
        .expect("triplet joint check");
        note("loss:triplet", e);

        let z = random(&[6, 4], &mut rng);
        let labels = [0usize, 1, 0, 2, 1, 0];
        let e = finite_diff_check(|t, x| supcon_loss(t, x, &labels, 0.5), &z, FD_EPS)
            .expect("supcon check");
        note("loss:supcon", e);

        let y = random(&[4, 2], &mut rng);
        let yhat = random(&[4, 2], &mut rng);
        let e = finite_diff_check(
            |t, x| {
                let yv = t.constant(y.clone());
                mse_loss(t, x, yv)
            },
            &yhat,
            FD_EPS,
        )
        .expect("mse check");
        note("loss:mse", e);
    }
    let secs = began.elapsed().as_secs_f64();
    let (name, max) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap_or(("none", 0.0));
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| **e >= GRAD_TOL)
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    r.check(
        "1 gradients",
        failing.is_empty(),
        format!(
            "{} checks x {SEEDS} seeds, worst {name} {max:.2e} (< {GRAD_TOL:e}) {}",
            worst.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("failing: {}", failing.join(", "))
            }
        ),
    );
    r.check(
        "1 gradients runtime",
        secs < 120.0,
        format!("{secs:.2} s (< 120 s)"),
    );
}

fn shapes(r: &mut Report) {
    let cfg = PipelineConfig::paper();
    let mae = MaskedAutoencoder::new(&cfg.vision, 1, false).expect("paper mae");
    let ts = TsEncoder::new(&cfg.ts, 1).expect("paper ts");
    let fusion = FusionNet::new(&cfg.fusion, cfg.ts.d_m, cfg.vision.d_e, 1).expect("paper fusion");
    let head = GaitRegressor::new(cfg.d_v(), 1);
    let mask = inference_mask(&cfg).expect("mask");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f32>::inference();
    let patches = tape.constant(random(&[cfg.vision.n_patches(), PATCH_DIM], &mut rng).cast());
    let z_img = mae
        .encode_visible(&mut tape, patches, &mask)
        .expect("encode image");
    let x = tape.constant(random(&[N_CH, 100], &mut rng).cast());
    let z_ts = ts.forward(&mut tape, x).expect("encode series");
    let fused = fusion.forward(&mut tape, z_ts, z_img).expect("fuse");
    let out = head.forward(&mut tape, fused.z_comb).expect("regress");

    let got = [
        ("Z_img", tape.shape(z_img).to_vec(), vec![50, 768]),
        ("Z_TS", tape.shape(z_ts).to_vec(), vec![1, 160]),
        ("Q", tape.shape(fused.cross.q).to_vec(), vec![1, 640]),
        ("K", tape.shape(fused.cross.k).to_vec(), vec![50, 640]),
        ("Z_comb", tape.shape(fused.z_comb).to_vec(), vec![1, 160]),
        ("regressor", vec![tape.value(out).numel()], vec![2]),
    ];
    let ok = got.iter().all(|(_, a, b)| a == b);
    let detail: Vec<String> = got.iter().map(|(n, a, _)| format!("{n} {a:?}")).collect();
    r.check("2 paper shapes", ok, detail.join(", "));
}

fn attention(r: &mut Report) {
    let cfg = FusionConfig::desk();
    let (d_m, d_e, n) = (32, 64, 17);
    let net = FusionNet::new(&cfg, d_m, d_e, 9).expect("fusion");
    let mut worst_sum = 0.0f64;
    let mut worst_perm = 0.0f64;
    let mut collapse = true;
    let mut flat = cfg.clone();
    flat.n_sa = 0;
    let flat_net = FusionNet::new(&flat, d_m, d_e, 9).expect("fusion without self-attention");
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let q = random(&[1, d_m], &mut rng);
        let src = random(&[n, d_e], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = Tensor::<f64>::from_fn(&[n, d_e], |i| src.at2(perm[i / d_e], i % d_e));

        let mut t = Tape::<f64>::inference();
        let (qv, sv) = (t.constant(q.clone()), t.constant(src.clone()));
        let a = net.cross_attend(&mut t, qv, sv).expect("attend");
        for &w in &a.weights {
            let wt = t.value(w);
            let (rows, _) = wt.dims2().expect("weights");
            for i in 0..rows {
                worst_sum = worst_sum.max((wt.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let sp = t.constant(shuffled);
        let b = net.cross_attend(&mut t, qv, sp).expect("attend permuted");
        worst_perm = worst_perm.max(t.value(a.out).max_abs_diff(t.value(b.out)));

        let out = flat_net.forward(&mut t, qv, sv).expect("flat forward");
        collapse &= t.value(out.z_comb).data() == t.value(out.z_imd).data();
    }
    r.check(
        "3 softmax rows",
        worst_sum <= 1e-6,
        format!("max |row sum - 1| = {worst_sum:.2e}"),
    );
    r.check(
        "3 permutation",
        worst_perm <= 1e-6,
        format!("max output change = {worst_perm:.2e}"),
    );
    r.check(
        "3 no self-attention",
        collapse,
        "output equals the cross-attention block output exactly",
    );
}

fn dynamic_window(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = BTreeMap::from([
        ("delta", 0usize),
        ("bounds", 0),
        ("identity", 0),
        ("convergence", 0),
    ]);
    let pairs = 100_000;
    for k in 0..pairs {
        let start = GaitParams::new(
            rng.random_range(STEP_BOUNDS.0..=STEP_BOUNDS.1),
            rng.random_range(SPLAY_BOUNDS.0..=SPLAY_BOUNDS.1),
        );
        let target = if k % 4 == 0 {
            GaitParams::new(
                start.step_height + rng.random_range(-MAX_DELTA..=MAX_DELTA),
                start.hip_splay + rng.random_range(-MAX_DELTA..=MAX_DELTA),
            )
        } else {
            GaitParams::new(rng.random_range(-0.1..0.5), rng.random_range(-0.1..0.4))
        };
        let mut s = WindowState::new(start);
        let next = apply_dynamic_window(&mut s, target);
        if (next.step_height - start.step_height).abs() > MAX_DELTA + 1e-12
            || (next.hip_splay - start.hip_splay).abs() > MAX_DELTA + 1e-12
        {
            *violations.get_mut("delta").unwrap() += 1;
        }
        if !next.in_bounds() {
            *violations.get_mut("bounds").unwrap() += 1;
        }
        let within = (target.step_height - start.step_height).abs() <= MAX_DELTA
            && (target.hip_splay - start.hip_splay).abs() <= MAX_DELTA;
        if within && target.in_bounds() && next != target {
            *violations.get_mut("identity").unwrap() += 1;
        }
        let expect = predicted_steps(start, target);
        let goal = target.clamped();
        let mut s = WindowState::new(start);
        let mut steps = 0;
        while s.current != goal && steps <= expect + 1 {
            apply_dynamic_window(&mut s, target);
            steps += 1;
        }
        if steps != expect {
            *violations.get_mut("convergence").unwrap() += 1;
        }
    }
    let total: usize = violations.values().sum();
    let detail: Vec<String> = violations.iter().map(|(k, v)| format!("{k}={v}")).collect();
    r.check(
        "4 dynamic window",
        total == 0,
        format!("{pairs} pairs, violations: {}", detail.join(" ")),
    );
}

/// Exhaustive search written independently of the library: per-cell means,
/// min-max over every (terrain, cell) mean, exponential cost, first minimum.
fn brute_force_labels(
    records: &[MetricRecord],
    grid: &GaitGrid,
    w: &CostWeights,
) -> BTreeMap<String, GaitParams> {
    let cells = grid.cells();
    let mut means: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for terrain in records
        .iter()
        .map(|r| r.terrain.clone())
        .collect::<std::collections::BTreeSet<_>>()
    {
        let mut per_cell = Vec::new();
        for cell in &cells {
            let hits: Vec<&MetricRecord> = records
                .iter()
                .filter(|r| {
                    r.terrain == terrain
                        && (r.gait.step_height - cell.step_height).abs() < 1e-9
                        && (r.gait.hip_splay - cell.hip_splay).abs() < 1e-9
                })
                .collect();
            let k = hits.len() as f64;
            per_cell.push([
                hits.iter().map(|r| r.metrics.omega).sum::<f64>() / k,
                hits.iter().map(|r| r.metrics.a_z).sum::<f64>() / k,
                hits.iter().map(|r| r.metrics.effort).sum::<f64>() / k,
            ]);
        }
        means.insert(terrain, per_cell);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for m in means.values().flatten() {
        for j in 0..3 {
            lo[j] = lo[j].min(m[j]);
            hi[j] = hi[j].max(m[j]);
        }
    }
    let norm = |v: f64, j: usize| {
        if hi[j] > lo[j] {
            (v - lo[j]) / (hi[j] - lo[j])
        } else {
            0.0
        }
    };
    means
        .into_iter()
        .map(|(t, cellv)| {
            let mut best = (f64::INFINITY, 0);
            for (i, m) in cellv.iter().enumerate() {
                let c =
                    (w.alpha * norm(m[0], 0) + w.beta * norm(m[1], 1) + w.gamma * norm(m[2], 2))
                        .exp();
                if c < best.0 {
                    best = (c, i);
                }
            }
            (t, cells[best.1])
        })
        .collect()
}

fn labels(r: &mut Report) {
    let grid = GaitGrid::default();
    let weights = [
        CostWeights::default(),
        CostWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        },
        CostWeights {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.3,
        },
        CostWeights {
            alpha: 0.0,
            beta: 0.1,
            gamma: 0.9,
        },
    ];
    let mut datasets = Vec::new();
    for seed in [1, 2, 3] {
        datasets.push((
            format!("standard seed {seed}"),
            SynthConfig::new(seed, 2, 32),
        ));
    }
    datasets.push((
        "standard seed 4, one sample per cell".into(),
        SynthConfig::new(4, 1, 32),
    ));
    let mut mismatches = 0;
    let mut cases = 0;
    let mut default_labels = BTreeMap::new();
    for (name, sc) in &datasets {
        let ds = build_dataset(sc).expect("dataset");
        let ids: Vec<usize> = (0..ds.len()).collect();
        let recs = ds.metric_records(&ids);
        for w in &weights {
            let got = select_labels(&recs, &grid, w).expect("select_labels");
            let want = brute_force_labels(&recs, &grid, w);
            cases += 1;
            if got != want {
                mismatches += 1;
                r.info(
                    "5 labels",
                    format!("{name} {w:?}: library {got:?} vs brute force {want:?}"),
                );
            }
            if name == "standard seed 1" && *w == CostWeights::default() {
                default_labels = got;
            }
        }
    }
    r.check(
        "5 label oracle",
        mismatches == 0,
        format!("{cases} dataset/weight cases, {mismatches} mismatches"),
    );
    let veg = default_labels.get("vegetation").map(|g| g.step_height);
    r.check(
        "5 vegetation step height",
        veg.is_some_and(|h| (h - 0.3).abs() < 1e-9),
        format!("selected {veg:?} (want 0.3); table {default_labels:?}"),
    );
}

fn stage_checks(r: &mut Report, tag: &str, reports: &[StageReport]) {
    for s in reports {
        if s.stage == Stage::Concat {
            r.info(
                &format!("{tag} {} loss", s.stage.name()),
                format!(
                    "final/initial = {:.4} (comparison baseline, reported only)",
                    s.ratio()
                ),
            );
            continue;
        }
        r.check(
            &format!("{tag} {} loss", s.stage.name()),
            s.ratio() < 0.5,
            format!(
                "final/initial = {:.4} ({:.4} -> {:.4}, < 0.5)",
                s.ratio(),
                s.initial_loss,
                s.final_loss
            ),
        );
        if !s.frozen.is_empty() {
            let same = s.frozen.values().all(|(a, b)| a == b);
            r.check(
                &format!("{tag} {} frozen", s.stage.name()),
                same,
                format!(
                    "upstream digests unchanged: {}",
                    s.frozen.keys().cloned().collect::<Vec<_>>().join(", ")
                ),
            );
        }
    }
}

fn print_table(r: &Report, tag: &str, t: &EvalTable) {
    for line in t.to_tsv().lines() {
        r.info(tag, line);
    }
    r.info(
        tag,
        format!(
            "shuffle control {:.1} (chance {:.1})",
            t.shuffle_control.accuracy,
            t.chance()
        ),
    );
}

fn accuracy(t: &EvalTable, row: &str) -> f64 {
    t.row(row).map(|p| p.accuracy).unwrap_or(f64::NAN)
}

fn head_holdout(ds: &Dataset, models: &Models, cfg: &PipelineConfig) -> f64 {
    let inputs = prepare_inputs(ds, cfg.vision.n_i).expect("inputs");
    let latents = encode_latents(&models.mae, &models.ts, &inputs, cfg).expect("latents");
    let z = embed_all(&models.fusion, &latents).expect("fused");
    let head = models.head.as_ref().expect("head");
    let mut worst = 0.0f64;
    for i in ds.indices(Split::Holdout) {
        let g = head.predict(&z[i]).expect("predict");
        let want = models.labels[&ds.manifest.samples[i].terrain];
        worst = worst
            .max((g.step_height - want.step_height).abs())
            .max((g.hip_splay - want.hip_splay).abs());
    }
    worst
}

fn representation(r: &mut Report) {
    let cfg = PipelineConfig::desk();
    let plan = TrainPlan {
        head: true,
        concat: true,
    };

    let began = Instant::now();
    let ds = build_dataset(&SynthConfig::new(7, 5, cfg.vision.n_i)).expect("standard dataset");
    let (models, reports) = train_all(&ds, &cfg, 1, plan).expect("train standard");
    let minutes = began.elapsed().as_secs_f64() / 60.0;
    let table = evaluate(&ds, &models, &cfg, 3).expect("evaluate standard");
    print_table(r, "6 standard", &table);
    r.check(
        "6 standard training time",
        minutes < 30.0,
        format!("{minutes:.2} min (< 30)"),
    );
    let full = accuracy(&table, ROW_FULL);
    r.check(
        "6 standard fused",
        full >= 90.0,
        format!("fused probe {full:.1}% (>= 90)"),
    );
    let gap = (table.shuffle_control.accuracy - table.chance()).abs();
    r.check(
        "6 standard shuffle",
        gap <= 10.0,
        format!(
            "shuffle {:.1}% vs chance {:.1}% (within 10)",
            table.shuffle_control.accuracy,
            table.chance()
        ),
    );
    stage_checks(r, "6 standard", &reports);
    let worst = head_holdout(&ds, &models, &cfg);
    r.check(
        "6 head holdout",
        worst <= 0.03,
        format!("worst |error| {worst:.4} m (<= 0.03)"),
    );

    let ds = build_dataset(&SynthConfig::xor(7, 3, cfg.vision.n_i)).expect("xor dataset");
    let (models, reports) = train_all(
        &ds,
        &cfg,
        1,
        TrainPlan {
            head: false,
            concat: true,
        },
    )
    .expect("train xor");
    let table = evaluate(&ds, &models, &cfg, 3).expect("evaluate xor");
    print_table(r, "6 xor", &table);
    let full = accuracy(&table, ROW_FULL);
    r.check(
        "6 xor fused",
        full >= 95.0,
        format!("fused probe {full:.1}% (>= 95)"),
    );
    for row in [ROW_NO_VISION, ROW_NO_PROPRIO] {
        let a = accuracy(&table, row);
        r.check(
            &format!("6 xor {row}"),
            a <= 70.0,
            format!("{a:.1}% (<= 70)"),
        );
    }
    r.info(
        "6 xor",
        format!("{ROW_MLP} {:.1}%", accuracy(&table, ROW_MLP)),
    );
    let gap = (table.shuffle_control.accuracy - table.chance()).abs();
    r.check(
        "6 xor shuffle",
        gap <= 10.0,
        format!(
            "shuffle {:.1}% vs chance {:.1}% (within 10)",
            table.shuffle_control.accuracy,
            table.chance()
        ),
    );
    stage_checks(r, "6 xor", &reports);
}

fn hand_values(r: &mut Report) {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).expect("anchor"));
    let p = t.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).expect("positive"));
    let l = triplet_loss(&mut t, a, p, &[p]).expect("triplet");
    let got = t.value(l).data()[0];
    let want = 2.0 * 2f64.ln();
    r.check(
        "7 triplet",
        (got - want).abs() <= 1e-6,
        format!("{got:.9} vs 2 ln 2 = {want:.9}"),
    );

    let z = t.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("batch"));
    let l = supcon_loss(&mut t, z, &[0, 0, 1], 1.0).expect("supcon");
    let got = t.value(l).data()[0];
    let want = 2.0 * (1.0 + (-1f64).exp()).ln();
    r.check(
        "7 supcon",
        (got - want).abs() <= 1e-6,
        format!("{got:.9} vs 2 ln(1+e^-1) = {want:.9}"),
    );
}

fn throughput(r: &mut Report) {
    let cfg = PipelineConfig::desk();
    let mut p = Pipeline::untrained(&cfg, 1).expect("desk pipeline");
    let log = bench_log(&cfg, 1).expect("log");
    measure_throughput(&mut p, &log, 10).expect("warm up");
    let t = measure_throughput(&mut p, &log, 600).expect("desk throughput");
    r.check(
        "8 desk throughput",
        t.per_second >= 60.0,
        format!("{:.1} it/s (>= 60)", t.per_second),
    );

    let cfg = PipelineConfig::paper();
    let mut p = Pipeline::untrained(&cfg, 1).expect("paper pipeline");
    let log = bench_log(&cfg, 1).expect("log");
    let t = measure_throughput(&mut p, &log, 3).expect("paper throughput");
    r.info(
        "8 paper throughput",
        format!("{:.2} it/s over {} iterations", t.per_second, t.iterations),
    );
}

fn persistence(r: &mut Report) {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = PipelineConfig::desk();
    let net = FusionNet::new(&cfg.fusion, cfg.ts.d_m, cfg.vision.d_e, 3).expect("fusion");
    let c = Checkpoint::new(
        Stage::Fusion,
        net.state_dict(),
        serde_json::json!({"k": 1}),
        3,
    );
    let path = dir.path().join("fusion.cgw");
    save_checkpoint(&path, &c).expect("save");
    let back = load_checkpoint(&path).expect("load");
    let bits = |c: &Checkpoint| -> Vec<(String, Vec<usize>, Vec<u32>)> {
        c.tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    r.check(
        "9 checkpoint round trip",
        bits(&back) == bits(&c),
        format!("{} tensors bit-identical", c.tensors.len()),
    );

    let mut bytes = std::fs::read(&path).expect("read");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let flipped = dir.path().join("flipped.cgw");
    std::fs::write(&flipped, &bytes).expect("write");
    let rejected = matches!(load_checkpoint(&flipped), Err(Error::Corrupt { .. }));
    r.check(
        "9 checkpoint corruption",
        rejected,
        "one flipped payload byte is rejected",
    );

    let sc = SynthConfig::new(5, 1, 32);
    let ds = build_dataset(&sc).expect("dataset");
    let ddir = dir.path().join("data");
    ds.save(&ddir).expect("save dataset");
    let loaded = Dataset::load(&ddir).expect("load dataset");
    r.check(
        "9 dataset round trip",
        loaded == ds,
        format!("{} samples identical after reload", ds.len()),
    );

    let mut small = PipelineConfig::desk();
    small.vision.n_i = 32;
    for st in [
        &mut small.train.mae,
        &mut small.train.ts,
        &mut small.train.fusion,
        &mut small.train.concat,
        &mut small.train.head,
    ] {
        st.epochs = 2;
    }
    let run = || -> String {
        let ds = build_dataset(&SynthConfig::new(11, 2, 32)).expect("dataset");
        let (models, _) = train_all(
            &ds,
            &small,
            5,
            TrainPlan {
                head: true,
                concat: true,
            },
        )
        .expect("train");
        let t = evaluate(&ds, &models, &small, 5).expect("evaluate");
        format!("{}shuffle\t{:.6}\n", t.to_tsv(), t.shuffle_control.accuracy)
    };
    let (a, b) = (run(), run());
    r.check(
        "9 end-to-end determinism",
        a == b,
        "two fixed-seed runs produce identical eval tables",
    );
}

fn navigation(r: &mut Report) {
    let imu = [ImuSample {
        t: 0.0,
        acc: [1.0, 0.0, 9.81 + 1.0],
        gyro: [0.0; 3],
    }];
    let joints = [JointSample {
        t: 0.0,
        effort: [0.5; 12],
    }];
    let m = eval_navigation_metrics(&imu, &joints);
    r.check(
        "10 hand example",
        m.cumulative_joint_effort == 6.0 && (m.rms_imu_energy_density - 2.0).abs() < 1e-12,
        format!(
            "effort {} Nm, energy {}",
            m.cumulative_joint_effort, m.rms_imu_energy_density
        ),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let joints: Vec<JointSample> = (0..50)
        .map(|i| JointSample {
            t: i as f64 * 0.04,
            effort: std::array::from_fn(|_| rng.random_range(-20.0..20.0)),
        })
        .collect();
    let base = eval_navigation_metrics(&[], &joints).cumulative_joint_effort;
    let mut linear = true;
    for k in [0.5, 2.0, 3.0, -1.5] {
        let scaled: Vec<JointSample> = joints
            .iter()
            .map(|j| JointSample {
                t: j.t,
                effort: j.effort.map(|e| k * e),
            })
            .collect();
        let got = eval_navigation_metrics(&[], &scaled).cumulative_joint_effort;
        linear &= (got - f64::abs(k) * base).abs() <= 1e-9 * base;
    }
    r.check(
        "10 linearity",
        linear,
        "effort metric scales with |k| for k in {0.5, 2, 3, -1.5}",
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    let began = Instant::now();
    gradients(&mut r);
    shapes(&mut r);
    attention(&mut r);
    dynamic_window(&mut r);
    labels(&mut r);
    representation(&mut r);
    hand_values(&mut r);
    throughput(&mut r);
    persistence(&mut r);
    navigation(&mut r);
    println!(
        "{} failing criteria, {:.1} s total",
        r.failures,
        began.elapsed().as_secs_f64()
    );
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
